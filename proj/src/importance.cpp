#include "repcmp/importance.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "repcmp/errors.hpp"

namespace repcmp {
namespace {

constexpr const char* kModule = "importance-stats";

double mean_of(std::span<const double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string csv_number(double v) {
    if (!std::isfinite(v)) return "";
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

AblationResult compute_importance(const FeatureSpec& unit, std::span<const std::string> top_ids,
                                  BackendClient& client, std::span<const double> direction,
                                  std::span<const double> codes, const ImportanceOptions& opts) {
    AblationResult result;
    result.unit = unit;
    result.depth_block = layer_depth(unit.layer);
    result.image_ids.assign(top_ids.begin(), top_ids.end());

    AblationRequest request;
    request.layer = unit.layer;
    request.image_ids = result.image_ids;
    request.logit = opts.logit;
    if (unit.condition == Condition::Local) {
        request.mode = AblationMode::Neuron;
        request.index = unit.neuron_index;
    } else {
        if (direction.empty()) throw ValidationError(kModule, unit.feature_key() + " has no dictionary atom");
        if (codes.size() != top_ids.size())
            throw ValidationError(kModule, unit.feature_key() + ": " + std::to_string(codes.size()) +
                                               " codes for " + std::to_string(top_ids.size()) + " images");
        request.mode = AblationMode::Direction;
        request.direction.assign(direction.begin(), direction.end());
        request.codes.assign(codes.begin(), codes.end());
    }

    const std::size_t attempts = std::max<std::size_t>(1, opts.max_attempts);
    for (std::size_t attempt = 0; attempt < attempts; ++attempt) {
        try {
            const auto outcomes = client.ablate(request);
            if (outcomes.size() != top_ids.size())
                throw BackendError(kModule, "backend returned " + std::to_string(outcomes.size()) + " results for " +
                                                std::to_string(top_ids.size()) + " images");
            result.per_image_delta.clear();
            for (std::size_t i = 0; i < outcomes.size(); ++i) {
                if (outcomes[i].image_id != top_ids[i])
                    throw BackendError(kModule, "backend reordered results at position " + std::to_string(i));
                result.per_image_delta.push_back(outcomes[i].y - outcomes[i].y_prime);
            }
            result.mean_delta = mean_of(result.per_image_delta);
            result.ok = true;
            result.error.clear();
            return result;
        } catch (const BackendError& e) {
            result.ok = false;
            result.error = e.what();
        }
    }
    result.per_image_delta.clear();
    result.mean_delta = std::numeric_limits<double>::quiet_NaN();
    return result;
}

AblationResult compute_importance(const CatalogFeature& feature, BackendClient& client,
                                  const ImportanceOptions& opts) {
    const auto& top = feature.pool.top_ids;
    if (top.size() < opts.top_count)
        throw ValidationError(kModule, feature.spec.feature_key() + " has fewer than " +
                                           std::to_string(opts.top_count) + " top images");
    std::span<const std::string> ids(top.data(), opts.top_count);
    if (feature.spec.condition == Condition::Local) return compute_importance(feature.spec, ids, client, {}, {}, opts);
    if (feature.top_codes.size() < opts.top_count)
        throw ValidationError(kModule, feature.spec.feature_key() + " has codes for only " +
                                           std::to_string(feature.top_codes.size()) + " images");
    return compute_importance(feature.spec, ids, client, feature.direction,
                              std::span<const double>(feature.top_codes.data(), opts.top_count), opts);
}

std::vector<AblationResult> compute_importance_all(const FeatureCatalog& catalog, const BackendClientFactory& factory,
                                                   std::size_t max_in_flight, const ImportanceOptions& opts) {
    const auto& features = catalog.features;
    std::vector<AblationResult> results(features.size());
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;

    auto worker = [&] {
        try {
            auto client = factory();
            for (std::size_t i = next++; i < features.size(); i = next++) {
                results[i] = compute_importance(features[i], *client, opts);
            }
        } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(max_in_flight, features.size()));
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    pool.clear();
    if (first_error) std::rethrow_exception(first_error);
    return results;
}

ImportanceReport importance_report(std::span<const AblationResult> results) {
    ImportanceReport report;
    std::vector<double> local, distributed;
    std::map<std::pair<int, Condition>, std::vector<double>> by_depth;
    for (const auto& r : results) {
        report.units.push_back(r);
        if (!r.ok) {
            ++report.failed_units;
            continue;
        }
        (r.unit.condition == Condition::Local ? local : distributed).push_back(r.mean_delta);
        by_depth[{r.depth_block, r.unit.condition}].push_back(r.mean_delta);
    }
    if (local.empty() || distributed.empty())
        throw ValidationError(kModule, "importance report needs successful units in both conditions");

    for (int depth = 1; depth <= 4; ++depth) {
        for (auto c : {Condition::Local, Condition::Distributed}) {
            const auto& v = by_depth[{depth, c}];
            report.per_depth.push_back({depth, c, v.size(), mean_of(v)});
        }
        const auto& l = by_depth[{depth, Condition::Local}];
        const auto& d = by_depth[{depth, Condition::Distributed}];
        if (!l.empty() && !d.empty()) report.per_depth_tests[depth] = mann_whitney_u(l, d);
    }
    report.overall = mann_whitney_u(local, distributed);
    report.mean_local = mean_of(local);
    report.mean_distributed = mean_of(distributed);
    report.distributed_relies_more = report.mean_distributed > report.mean_local;
    return report;
}

nlohmann::json to_json(const AblationResult& r) {
    nlohmann::json j = {{"unit", to_json(r.unit)},
                        {"depth_block", r.depth_block},
                        {"ok", r.ok},
                        {"image_ids", r.image_ids},
                        {"per_image_delta", r.per_image_delta}};
    if (r.ok) j["mean_delta"] = r.mean_delta;
    if (!r.error.empty()) j["error"] = r.error;
    return j;
}

AblationResult ablation_result_from_json(const nlohmann::json& j) {
    AblationResult r;
    try {
        r.unit = feature_spec_from_json(j.at("unit"));
        r.depth_block = j.at("depth_block").get<int>();
        r.ok = j.at("ok").get<bool>();
        r.image_ids = j.at("image_ids").get<std::vector<std::string>>();
        r.per_image_delta = j.at("per_image_delta").get<std::vector<double>>();
        r.mean_delta = r.ok ? j.at("mean_delta").get<double>() : std::numeric_limits<double>::quiet_NaN();
        r.error = j.value("error", std::string{});
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(kModule, std::string("malformed ablation result: ") + e.what());
    }
    return r;
}

nlohmann::json to_json(const ImportanceReport& r) {
    nlohmann::json depth = nlohmann::json::array();
    for (const auto& d : r.per_depth) {
        nlohmann::json row = {{"depth", d.depth}, {"condition", to_string(d.condition)}, {"n_units", d.n_units}};
        row["mean_delta"] = d.n_units ? nlohmann::json(d.mean_delta) : nlohmann::json(nullptr);
        depth.push_back(row);
    }
    nlohmann::json tests = nlohmann::json::object();
    for (const auto& [d, t] : r.per_depth_tests) tests[std::to_string(d)] = to_json(t);
    return {{"per_depth", depth},
            {"overall_test", to_json(r.overall)},
            {"per_depth_tests", tests},
            {"mean_local", r.mean_local},
            {"mean_distributed", r.mean_distributed},
            {"distributed_relies_more", r.distributed_relies_more},
            {"failed_units", r.failed_units}};
}

std::string importance_units_csv(const ImportanceReport& r) {
    std::ostringstream os;
    os << "unit,layer,condition,depth,mean_delta,ok\n";
    for (const auto& u : r.units)
        os << u.unit.unit_key() << ',' << u.unit.layer << ',' << to_string(u.unit.condition) << ',' << u.depth_block
           << ',' << csv_number(u.mean_delta) << ',' << (u.ok ? 1 : 0) << '\n';
    return os.str();
}

std::string importance_depth_csv(const ImportanceReport& r) {
    std::ostringstream os;
    os << "depth,condition,n_units,mean_delta,z,p\n";
    for (const auto& d : r.per_depth) {
        os << d.depth << ',' << to_string(d.condition) << ',' << d.n_units << ',' << csv_number(d.mean_delta) << ',';
        if (auto it = r.per_depth_tests.find(d.depth); it != r.per_depth_tests.end())
            os << csv_number(it->second.z_score) << ',' << csv_number(it->second.p_value);
        else
            os << ',';
        os << '\n';
    }
    return os.str();
}

}  // namespace repcmp

#include "repcmp/feature_catalog.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <regex>
#include <set>

#include "repcmp/errors.hpp"
#include "repcmp/rng.hpp"

namespace repcmp {
namespace {

constexpr const char* kModule = "feature-catalog";

std::vector<std::size_t> ordered_descending(std::span<const double> values, std::span<const std::string> ids) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (values[a] != values[b]) return values[a] > values[b];
        if (!ids.empty() && ids[a] != ids[b]) return ids[a] < ids[b];
        return a < b;
    });
    return order;
}

std::vector<double> column_of(const Matrix& m, std::size_t c) {
    if (c >= m.cols())
        throw ValidationError(kModule, "neuron index " + std::to_string(c) + " out of range for layer width " +
                                           std::to_string(m.cols()));
    return m.column(c);
}

std::vector<std::size_t> positions_of(const DatasetManifest& manifest, std::span<const std::string> ids) {
    std::vector<std::size_t> rows;
    rows.reserve(ids.size());
    for (const auto& id : ids) rows.push_back(manifest.index_of(id));
    return rows;
}

nlohmann::json feature_to_json(const CatalogFeature& f) {
    nlohmann::json j = {
        {"spec", to_json(f.spec)},
        {"depth", f.depth},
        {"top_ids", f.pool.top_ids},
        {"top_activations", f.pool.top_activations},
        {"bottom_ids", f.pool.bottom_ids},
        {"bottom_activations", f.pool.bottom_activations},
        {"fit_ids", f.fit_ids},
    };
    if (!f.direction.empty()) j["direction"] = f.direction;
    if (!f.top_codes.empty()) j["top_codes"] = f.top_codes;
    if (!f.featureviz_left.empty() || !f.featureviz_right.empty())
        j["featureviz"] = {{"left", f.featureviz_left}, {"right", f.featureviz_right}};
    return j;
}

CatalogFeature feature_from_json(const nlohmann::json& j) {
    CatalogFeature f;
    f.spec = feature_spec_from_json(j.at("spec"));
    f.depth = j.at("depth").get<int>();
    f.pool.top_ids = j.at("top_ids").get<std::vector<std::string>>();
    f.pool.top_activations = j.at("top_activations").get<std::vector<double>>();
    f.pool.bottom_ids = j.at("bottom_ids").get<std::vector<std::string>>();
    f.pool.bottom_activations = j.at("bottom_activations").get<std::vector<double>>();
    f.fit_ids = j.value("fit_ids", std::vector<std::string>{});
    f.direction = j.value("direction", std::vector<double>{});
    f.top_codes = j.value("top_codes", std::vector<double>{});
    if (j.contains("featureviz")) {
        f.featureviz_left = j["featureviz"].value("left", std::vector<std::string>{});
        f.featureviz_right = j["featureviz"].value("right", std::vector<std::string>{});
    }
    return f;
}

}  // namespace

std::string to_string(Condition c) { return c == Condition::Local ? "local" : "distributed"; }

Condition condition_from_string(const std::string& s) {
    if (s == "local") return Condition::Local;
    if (s == "distributed") return Condition::Distributed;
    throw ValidationError(kModule, "unknown condition '" + s + "'");
}

std::string to_string(DirectionVariant v) { return v == DirectionVariant::Top300 ? "top300" : "full"; }

DirectionVariant direction_variant_from_string(const std::string& s) {
    if (s == "top300") return DirectionVariant::Top300;
    if (s == "full") return DirectionVariant::Full;
    throw ValidationError(kModule, "unknown direction variant '" + s + "'");
}

void PoolSizes::validate() const {
    if (top == 0 || bottom == 0 || fit_count == 0 || ref_pool == 0 || min_pool == 0 || trials_per_feature == 0 ||
        k == 0)
        throw ValidationError(kModule, "all pool sizes must be positive");
    if (ref_pool > top) throw ValidationError(kModule, "ref_pool must not exceed top");
    if (min_pool > bottom) throw ValidationError(kModule, "min_pool must not exceed bottom");
    if (fit_count > top) throw ValidationError(kModule, "fit_count must not exceed top");
    if (ref_pool < 10) throw ValidationError(kModule, "ref_pool must hold 9 references plus a query");
    if (min_pool < 10) throw ValidationError(kModule, "min_pool must hold 9 references plus a query");
    if (k > fit_count) throw ValidationError(kModule, "k must not exceed fit_count");
}

std::string FeatureSpec::unit_key() const { return layer + "#" + std::to_string(neuron_index); }

std::string FeatureSpec::feature_key() const { return unit_key() + "/" + to_string(condition); }

void FeatureSpec::validate() const {
    layer_depth(layer);
    if (condition == Condition::Distributed && !direction_index)
        throw ValidationError(kModule, "distributed feature " + unit_key() + " has no direction index");
    if (condition == Condition::Local && direction_index)
        throw ValidationError(kModule, "local feature " + unit_key() + " carries a direction index");
}

StimulusPool build_pool(std::span<const double> activations, std::span<const std::string> image_ids,
                        std::size_t top, std::size_t bottom) {
    if (activations.size() != image_ids.size())
        throw ValidationError(kModule, "activation count " + std::to_string(activations.size()) +
                                           " does not match image count " + std::to_string(image_ids.size()));
    if (activations.size() < top + bottom)
        throw ValidationError(kModule, "need at least " + std::to_string(top + bottom) + " images, have " +
                                           std::to_string(activations.size()));
    for (double v : activations)
        if (!std::isfinite(v)) throw DomainError(kModule, "non-finite activation");

    const auto order = ordered_descending(activations, image_ids);
    StimulusPool pool;
    for (std::size_t i = 0; i < top; ++i) {
        pool.top_ids.push_back(image_ids[order[i]]);
        pool.top_activations.push_back(activations[order[i]]);
    }
    // Weakest first: the exact reverse of the total order.
    for (auto it = order.rbegin(); it != order.rbegin() + static_cast<std::ptrdiff_t>(bottom); ++it) {
        const auto i = *it;
        pool.bottom_ids.push_back(image_ids[i]);
        pool.bottom_activations.push_back(activations[i]);
    }
    return pool;
}

StimulusPool build_pool(std::span<const double> activations, const DatasetManifest& manifest, std::size_t top,
                        std::size_t bottom) {
    if (activations.size() != manifest.size())
        throw ValidationError(kModule, "activation vector length does not match manifest");
    const auto ids = manifest.image_ids();
    return build_pool(activations, ids, top, bottom);
}

std::size_t select_direction(const Matrix& codes) {
    if (codes.rows() == 0 || codes.cols() == 0) throw ValidationError(kModule, "empty codes matrix");
    std::vector<std::size_t> counts(codes.cols(), 0);
    for (auto a : row_argmax(codes)) ++counts[a];
    return static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

std::size_t select_direction_alt(const Matrix& codes_pool) { return select_direction(codes_pool); }

std::vector<std::size_t> rank_by_direction(const Matrix& codes, std::size_t direction,
                                           std::span<const std::string> image_ids) {
    if (direction >= codes.cols())
        throw ValidationError(kModule, "direction " + std::to_string(direction) + " out of range for k=" +
                                           std::to_string(codes.cols()));
    if (!image_ids.empty() && image_ids.size() != codes.rows())
        throw ValidationError(kModule, "image id count does not match codes rows");
    const auto column = codes.column(direction);
    return ordered_descending(column, image_ids);
}

int layer_depth(const std::string& layer_name) {
    static const std::regex scheme(R"(^layer([1-4])(\..*)?$)");
    std::smatch m;
    if (!std::regex_match(layer_name, m, scheme))
        throw ValidationError(kModule, "layer '" + layer_name + "' is outside the layer1..layer4 block scheme");
    return m[1].str()[0] - '0';
}

std::vector<const CatalogFeature*> FeatureCatalog::by_condition(Condition c) const {
    std::vector<const CatalogFeature*> out;
    for (const auto& f : features)
        if (f.spec.condition == c) out.push_back(&f);
    return out;
}

void FeatureCatalog::validate() const {
    sizes.validate();
    std::set<std::string> keys;
    std::set<std::string> units;
    auto check_pool = [&](const CatalogFeature& f) {
        if (f.pool.top_ids.size() < sizes.ref_pool || f.pool.bottom_ids.size() < sizes.min_pool)
            throw ValidationError(kModule, f.spec.feature_key() + " pool is smaller than the configured sizes");
    };
    for (const auto& f : features) {
        f.spec.validate();
        check_pool(f);
        if (!keys.insert(f.spec.feature_key()).second)
            throw ValidationError(kModule, "duplicate feature " + f.spec.feature_key());
        units.insert(f.spec.unit_key());
    }
    for (const auto& f : catch_features) {
        check_pool(f);
        if (units.contains(f.spec.unit_key()))
            throw ValidationError(kModule, "catch unit " + f.spec.unit_key() + " is also an experimental unit");
    }
}

namespace {

CatalogFeature local_feature(const Matrix& layer_activations, const DatasetManifest& manifest, const UnitRequest& unit,
                             const PoolSizes& sizes) {
    sizes.validate();
    check_alignment(manifest, layer_activations);
    CatalogFeature local;
    local.spec = {unit.layer, Condition::Local, unit.neuron, std::nullopt, {}};
    local.depth = layer_depth(unit.layer);
    local.pool = build_pool(column_of(layer_activations, unit.neuron), manifest.image_ids(), sizes.top, sizes.bottom);
    local.fit_ids.assign(local.pool.top_ids.begin(),
                         local.pool.top_ids.begin() + static_cast<std::ptrdiff_t>(sizes.fit_count));
    return local;
}

}  // namespace

Factorization fit_unit_dictionary(const Matrix& layer_activations, const DatasetManifest& manifest,
                                  const UnitRequest& unit, const PoolSizes& sizes, const NmfOptions& nmf) {
    const auto local = local_feature(layer_activations, manifest, unit, sizes);
    NmfOptions opts = nmf;
    opts.k = sizes.k;
    return fit_nmf(layer_activations.select_rows(positions_of(manifest, local.fit_ids)), opts);
}

UnitBuild build_unit(const Matrix& layer_activations, const DatasetManifest& manifest, const UnitRequest& unit,
                     const PoolSizes& sizes, const NmfOptions& nmf, DirectionVariant variant) {
    return build_unit(layer_activations, manifest, unit, sizes,
                      fit_unit_dictionary(layer_activations, manifest, unit, sizes, nmf), variant, nmf.exec);
}

UnitBuild build_unit(const Matrix& layer_activations, const DatasetManifest& manifest, const UnitRequest& unit,
                     const PoolSizes& sizes, Factorization factorization, DirectionVariant variant,
                     kernels::Exec exec) {
    UnitBuild out;
    out.local = local_feature(layer_activations, manifest, unit, sizes);
    const auto& local = out.local;
    if (factorization.dictionary.rows() != layer_activations.cols() || factorization.dictionary.cols() != sizes.k ||
        factorization.codes.rows() != sizes.fit_count || factorization.codes.cols() != sizes.k)
        throw DimensionError(kModule, local.spec.unit_key() + ": factorization shape does not match the pool sizes");
    out.factorization = std::move(factorization);

    // Codes for every pooled image (top then bottom) under the frozen dictionary.
    std::vector<std::string> pool_ids = local.pool.top_ids;
    pool_ids.insert(pool_ids.end(), local.pool.bottom_ids.begin(), local.pool.bottom_ids.end());
    const Matrix pool_rows = layer_activations.select_rows(positions_of(manifest, pool_ids));
    const Matrix pool_codes = project_codes(pool_rows, out.factorization.dictionary, ProjectOptions{.exec = exec});

    const std::size_t direction = variant == DirectionVariant::Top300 ? select_direction(out.factorization.codes)
                                                                      : select_direction_alt(pool_codes);

    auto& dist = out.distributed;
    dist.spec = {unit.layer, Condition::Distributed, unit.neuron, direction, local.spec.unit_key() + "/nmf"};
    dist.depth = local.depth;
    dist.fit_ids = local.fit_ids;
    dist.pool = build_pool(pool_codes.column(direction), pool_ids, sizes.top, sizes.bottom);
    dist.direction = out.factorization.dictionary.column(direction);

    std::map<std::string, std::size_t> pool_row;
    for (std::size_t i = 0; i < pool_ids.size(); ++i) pool_row.emplace(pool_ids[i], i);
    for (std::size_t i = 0; i < sizes.fit_count; ++i)
        dist.top_codes.push_back(pool_codes(pool_row.at(dist.pool.top_ids[i]), direction));
    return out;
}

CatalogFeature build_catch_unit(const Matrix& layer_activations, const DatasetManifest& manifest,
                                const UnitRequest& unit, const PoolSizes& sizes) {
    check_alignment(manifest, layer_activations);
    CatalogFeature f;
    f.spec = {unit.layer, Condition::Local, unit.neuron, std::nullopt, {}};
    f.depth = layer_depth(unit.layer);
    f.pool = build_pool(column_of(layer_activations, unit.neuron), manifest, sizes.top, sizes.bottom);
    return f;
}

nlohmann::json to_json(const PoolSizes& s) {
    return {{"top", s.top},
            {"bottom", s.bottom},
            {"fit_count", s.fit_count},
            {"ref_pool", s.ref_pool},
            {"min_pool", s.min_pool},
            {"trials_per_feature", s.trials_per_feature},
            {"k", s.k}};
}

PoolSizes pool_sizes_from_json(const nlohmann::json& j) {
    PoolSizes s;
    s.top = j.at("top").get<std::size_t>();
    s.bottom = j.at("bottom").get<std::size_t>();
    s.fit_count = j.at("fit_count").get<std::size_t>();
    s.ref_pool = j.at("ref_pool").get<std::size_t>();
    s.min_pool = j.at("min_pool").get<std::size_t>();
    s.trials_per_feature = j.at("trials_per_feature").get<std::size_t>();
    s.k = j.at("k").get<std::size_t>();
    return s;
}

nlohmann::json to_json(const FeatureSpec& s) {
    nlohmann::json j = {{"layer", s.layer}, {"condition", to_string(s.condition)}, {"neuron_index", s.neuron_index}};
    if (s.direction_index) j["direction_index"] = *s.direction_index;
    if (!s.dictionary_ref.empty()) j["dictionary_ref"] = s.dictionary_ref;
    return j;
}

FeatureSpec feature_spec_from_json(const nlohmann::json& j) {
    FeatureSpec s;
    s.layer = j.at("layer").get<std::string>();
    s.condition = condition_from_string(j.at("condition").get<std::string>());
    s.neuron_index = j.at("neuron_index").get<std::size_t>();
    if (j.contains("direction_index")) s.direction_index = j.at("direction_index").get<std::size_t>();
    s.dictionary_ref = j.value("dictionary_ref", std::string{});
    return s;
}

nlohmann::json to_json(const FeatureCatalog& c) {
    nlohmann::json features = nlohmann::json::array();
    for (const auto& f : c.features) features.push_back(feature_to_json(f));
    nlohmann::json catches = nlohmann::json::array();
    for (const auto& f : c.catch_features) catches.push_back(feature_to_json(f));
    return {{"sizes", to_json(c.sizes)},
            {"direction_variant", to_string(c.variant)},
            {"config_hash", c.config_hash},
            {"features", features},
            {"catch_features", catches}};
}

FeatureCatalog catalog_from_json(const nlohmann::json& j) {
    FeatureCatalog c;
    try {
        c.sizes = pool_sizes_from_json(j.at("sizes"));
        c.variant = direction_variant_from_string(j.value("direction_variant", std::string{"top300"}));
        c.config_hash = j.value("config_hash", std::string{});
        for (const auto& f : j.at("features")) c.features.push_back(feature_from_json(f));
        for (const auto& f : j.value("catch_features", nlohmann::json::array()))
            c.catch_features.push_back(feature_from_json(f));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(kModule, std::string("malformed catalog: ") + e.what());
    }
    return c;
}

}  // namespace repcmp

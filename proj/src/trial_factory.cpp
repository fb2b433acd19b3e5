#include "repcmp/trial_factory.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>

#include "repcmp/errors.hpp"
#include "repcmp/rng.hpp"

namespace repcmp {
namespace {

constexpr const char* kModule = "trial-factory";

struct SampledSide {
    std::vector<std::string> refs;
    std::string query;
};

// kPanelSize references plus one query, drawn without replacement from the
// first `window` ids.
SampledSide sample_side(const std::vector<std::string>& ids, std::size_t window, Rng& rng, const char* what) {
    if (ids.size() < window || window < kPanelSize + 1)
        throw ValidationError(kModule, std::string("insufficient ") + what + " pool: need " +
                                           std::to_string(std::max(window, kPanelSize + 1)) + ", have " +
                                           std::to_string(ids.size()));
    const auto picks = rng.sample_without_replacement(window, kPanelSize + 1);
    SampledSide side;
    for (std::size_t i = 0; i < kPanelSize; ++i) side.refs.push_back(ids[picks[i]]);
    side.query = ids[picks[kPanelSize]];
    return side;
}

std::string trial_prefix(Experiment e) { return to_string(e) + "/"; }

std::vector<int> to_ints(const std::vector<std::size_t>& v) {
    std::vector<int> out;
    for (auto x : v) out.push_back(static_cast<int>(x));
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

std::string to_string(Experiment e) {
    switch (e) {
        case Experiment::I: return "I";
        case Experiment::II: return "II";
        case Experiment::III: return "III";
    }
    return "?";
}

Experiment experiment_from_string(const std::string& s) {
    if (s == "I") return Experiment::I;
    if (s == "II") return Experiment::II;
    if (s == "III") return Experiment::III;
    throw ValidationError(kModule, "unknown experiment '" + s + "' (expected I, II or III)");
}

std::string to_string(TrialKind k) {
    switch (k) {
        case TrialKind::Standard: return "standard";
        case TrialKind::Practice: return "practice";
        case TrialKind::Catch: return "catch";
    }
    return "?";
}

TrialKind trial_kind_from_string(const std::string& s) {
    if (s == "standard") return TrialKind::Standard;
    if (s == "practice") return TrialKind::Practice;
    if (s == "catch") return TrialKind::Catch;
    throw ValidationError(kModule, "unknown trial kind '" + s + "'");
}

void validate_trial(const Trial& t) {
    const auto& id = t.trial_id;
    if (t.left_refs.size() != kPanelSize || t.right_refs.size() != kPanelSize)
        throw ValidationError(kModule, id + ": panels must hold 9 images each");
    if (t.correct_query != 0 && t.correct_query != 1) throw ValidationError(kModule, id + ": bad correct_query");
    if (t.queries[0] == t.queries[1]) throw ValidationError(kModule, id + ": queries are identical");

    std::multiset<std::string> all(t.left_refs.begin(), t.left_refs.end());
    all.insert(t.right_refs.begin(), t.right_refs.end());
    const auto& correct = t.correct_image();
    const auto& distractor = t.distractor_image();

    if (t.kind == TrialKind::Catch) {
        if (std::count(t.right_refs.begin(), t.right_refs.end(), correct) != 1)
            throw ValidationError(kModule, id + ": catch query must appear exactly once in the right grid");
        if (all.count(distractor) != 0) throw ValidationError(kModule, id + ": distractor appears in a panel");
    } else {
        if (all.count(correct) != 0 || all.count(distractor) != 0)
            throw ValidationError(kModule, id + ": query appears in a reference panel");
    }
    for (const auto& img : all)
        if (all.count(img) != 1) throw ValidationError(kModule, id + ": image '" + img + "' repeated in panels");
}

Trial make_standard_trial(const FeatureSpec& unit, const StimulusPool& pool, const PoolSizes& sizes,
                          std::uint64_t seed) {
    Rng rng(seed);
    auto right = sample_side(pool.top_ids, sizes.ref_pool, rng, "top");
    auto left = sample_side(pool.bottom_ids, sizes.min_pool, rng, "bottom");
    Trial t;
    t.unit = unit;
    t.kind = TrialKind::Standard;
    t.right_refs = std::move(right.refs);
    t.left_refs = std::move(left.refs);
    t.queries = {std::move(right.query), std::move(left.query)};
    t.correct_query = 0;
    return t;
}

std::optional<Trial> make_controlled_trial(const Trial& base, const SemanticMatch& match) {
    if (match.excluded) return std::nullopt;
    if (match.matched_ids.size() != kPanelSize + 1)
        throw ValidationError(kModule, "semantic match must hold 10 images, has " +
                                           std::to_string(match.matched_ids.size()));
    Trial t = base;
    t.left_refs.assign(match.matched_ids.begin(), match.matched_ids.begin() + kPanelSize);
    t.queries[static_cast<std::size_t>(1 - t.correct_query)] = match.matched_ids[kPanelSize];
    t.semantic_level = match.level;
    return t;
}

std::optional<Trial> make_semantic_trial(const FeatureSpec& unit, const StimulusPool& pool, const PoolSizes& sizes,
                                         const Taxonomy& taxonomy, const DatasetManifest& manifest,
                                         std::uint64_t seed) {
    Trial base = make_standard_trial(unit, pool, sizes, seed);
    // References are the 9 right images plus the correct query, in that order,
    // so the matched distractor shares the correct query's lifted label.
    std::vector<std::string> refs = base.right_refs;
    refs.push_back(base.correct_image());
    const auto match =
        iterative_semantic_search(refs, pool.bottom_ids, taxonomy, manifest, derive_seed(seed, "semantic"));
    return make_controlled_trial(base, match);
}

Trial make_catch_trial(const FeatureSpec& unit, const StimulusPool& pool, const PoolSizes& sizes,
                       std::uint64_t seed) {
    Rng rng(seed);
    auto right = sample_side(pool.top_ids, sizes.ref_pool, rng, "top");
    auto left = sample_side(pool.bottom_ids, sizes.min_pool, rng, "bottom");
    const auto position = static_cast<int>(rng.uniform_index(kPanelSize));
    Trial t;
    t.unit = unit;
    t.kind = TrialKind::Catch;
    t.right_refs = std::move(right.refs);
    t.right_refs[static_cast<std::size_t>(position)] = right.query;
    t.left_refs = std::move(left.refs);
    t.queries = {std::move(right.query), std::move(left.query)};
    t.correct_query = 0;
    t.catch_position = position;
    return t;
}

PracticeConfig PracticeConfig::from_json(const nlohmann::json& j) {
    PracticeConfig c;
    try {
        for (const auto& f : j.at("features"))
            c.features.push_back({f.at("name").get<std::string>(), f.at("image_ids").get<std::vector<std::string>>()});
        c.distractor_pool = j.at("distractor_pool").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(kModule, std::string("malformed practice config: ") + e.what());
    }
    return c;
}

nlohmann::json PracticeConfig::to_json() const {
    nlohmann::json fs = nlohmann::json::array();
    for (const auto& f : features) fs.push_back({{"name", f.name}, {"image_ids", f.image_ids}});
    return {{"features", fs}, {"distractor_pool", distractor_pool}};
}

std::vector<Trial> make_practice_set(const PracticeConfig& config, const DatasetManifest& experimental,
                                     std::uint64_t seed) {
    if (config.features.size() != kPracticeTrials)
        throw ValidationError(kModule, "practice set needs 9 curated features, got " +
                                           std::to_string(config.features.size()));
    auto check = [&](const std::string& id) {
        if (experimental.contains(id))
            throw ValidationError(kModule, "practice image '" + id + "' is part of the experimental set");
    };
    for (const auto& f : config.features) std::for_each(f.image_ids.begin(), f.image_ids.end(), check);
    std::for_each(config.distractor_pool.begin(), config.distractor_pool.end(), check);

    std::vector<Trial> out;
    for (std::size_t i = 0; i < config.features.size(); ++i) {
        const auto& f = config.features[i];
        Rng rng(derive_seed(seed, f.name));
        auto right = sample_side(f.image_ids, f.image_ids.size(), rng, "practice feature");
        auto left = sample_side(config.distractor_pool, config.distractor_pool.size(), rng, "practice distractor");
        Trial t;
        t.trial_id = "practice/" + std::to_string(i);
        t.kind = TrialKind::Practice;
        t.practice_feature = f.name;
        t.unit.layer = "practice";
        t.right_refs = std::move(right.refs);
        t.left_refs = std::move(left.refs);
        t.queries = {std::move(right.query), std::move(left.query)};
        t.correct_query = 0;
        validate_trial(t);
        out.push_back(std::move(t));
    }
    return out;
}

Trial mix_featureviz(const Trial& trial, const std::vector<std::string>& fv_images, std::uint64_t seed) {
    if (trial.kind != TrialKind::Standard)
        throw ValidationError(kModule, "feature visualizations are only mixed into experimental trials");
    if (fv_images.size() != 2 * kFeaturevizPerPanel)
        throw ValidationError(kModule, "expected 8 feature visualizations (4 per panel), got " +
                                           std::to_string(fv_images.size()));
    Rng rng(seed);
    Trial t = trial;
    const auto left = rng.sample_without_replacement(kPanelSize, kFeaturevizPerPanel);
    const auto right = rng.sample_without_replacement(kPanelSize, kFeaturevizPerPanel);
    for (std::size_t i = 0; i < kFeaturevizPerPanel; ++i) {
        t.left_refs[left[i]] = fv_images[i];
        t.right_refs[right[i]] = fv_images[kFeaturevizPerPanel + i];
    }
    t.featureviz_slots_left = to_ints(left);
    t.featureviz_slots_right = to_ints(right);
    return t;
}

std::vector<const Trial*> TrialBundle::trials_for(const std::string& feature_key) const {
    std::vector<const Trial*> out;
    for (const auto& t : trials)
        if (t.unit.feature_key() == feature_key) out.push_back(&t);
    return out;
}

TrialBundle build_bundle(const FeatureCatalog& catalog, Experiment experiment, const BundleInputs& inputs,
                         std::uint64_t seed) {
    catalog.validate();
    const bool semantic = experiment != Experiment::I;
    if (semantic && (inputs.taxonomy == nullptr || inputs.manifest == nullptr))
        throw ValidationError(kModule, "experiments II and III need a taxonomy and a manifest");
    if (catalog.catch_features.empty()) throw ValidationError(kModule, "catalog has no catch units");

    const auto& sizes = catalog.sizes;
    TrialBundle bundle;
    bundle.experiment = experiment;
    bundle.sizes = sizes;
    bundle.seed = seed;
    bundle.config_hash = catalog.config_hash;

    std::set<std::string> excluded;
    std::vector<std::pair<const CatalogFeature*, std::vector<Trial>>> per_feature;
    for (const auto& feature : catalog.features) {
        const auto key = feature.spec.feature_key();
        std::vector<Trial> trials;
        std::set<std::vector<std::string>> seen_right;
        bool dropped = false;
        for (std::size_t t = 0; t < sizes.trials_per_feature && !dropped; ++t) {
            bool placed = false;
            for (std::size_t attempt = 0; attempt <= inputs.max_distinct_retries; ++attempt) {
                const auto trial_seed = derive_seed(derive_seed(seed, key), t * 1000003ULL + attempt);
                std::optional<Trial> trial;
                if (semantic) {
                    trial = make_semantic_trial(feature.spec, feature.pool, sizes, *inputs.taxonomy, *inputs.manifest,
                                                trial_seed);
                    if (!trial) {
                        dropped = true;
                        break;
                    }
                } else {
                    trial = make_standard_trial(feature.spec, feature.pool, sizes, trial_seed);
                }
                auto right = trial->right_refs;
                std::sort(right.begin(), right.end());
                if (!seen_right.insert(right).second) continue;
                if (experiment == Experiment::III) {
                    std::vector<std::string> fv = feature.featureviz_left;
                    fv.insert(fv.end(), feature.featureviz_right.begin(), feature.featureviz_right.end());
                    if (fv.size() != 2 * kFeaturevizPerPanel)
                        throw ValidationError(kModule, key + " lacks the 8 feature visualizations experiment III needs");
                    trial = mix_featureviz(*trial, fv, derive_seed(trial_seed, "featureviz"));
                }
                char suffix[8];
                std::snprintf(suffix, sizeof suffix, "t%02zu", t);
                trial->trial_id = trial_prefix(experiment) + key + "/" + suffix;
                trial->experiment = experiment;
                trials.push_back(std::move(*trial));
                placed = true;
                break;
            }
            if (!placed && !dropped)
                throw ValidationError(kModule, key + ": could not draw distinct reference sets after " +
                                                   std::to_string(inputs.max_distinct_retries) + " retries");
        }
        if (dropped) excluded.insert(feature.spec.unit_key());
        per_feature.emplace_back(&feature, std::move(trials));
    }

    for (auto& [feature, trials] : per_feature) {
        if (excluded.contains(feature->spec.unit_key())) continue;
        for (auto& t : trials) {
            validate_trial(t);
            bundle.trials.push_back(std::move(t));
        }
    }
    bundle.excluded_units.assign(excluded.begin(), excluded.end());

    for (std::size_t i = 0; i < kCatchTrials; ++i) {
        const auto& unit = catalog.catch_features[i % catalog.catch_features.size()];
        auto t = make_catch_trial(unit.spec, unit.pool, sizes, derive_seed(seed, "catch/" + std::to_string(i)));
        t.trial_id = trial_prefix(experiment) + "catch/" + std::to_string(i);
        t.experiment = experiment;
        validate_trial(t);
        bundle.catch_trials.push_back(std::move(t));
    }

    if (inputs.practice != nullptr) {
        const DatasetManifest empty;
        bundle.practice = make_practice_set(*inputs.practice, inputs.manifest ? *inputs.manifest : empty,
                                            derive_seed(seed, "practice"));
        for (auto& t : bundle.practice) {
            t.trial_id = trial_prefix(experiment) + t.trial_id;
            t.experiment = experiment;
        }
    }
    return bundle;
}

nlohmann::json to_json(const Trial& t) {
    nlohmann::json j = {
        {"trial_id", t.trial_id},
        {"unit", to_json(t.unit)},
        {"experiment", to_string(t.experiment)},
        {"kind", to_string(t.kind)},
        {"left_refs", t.left_refs},
        {"right_refs", t.right_refs},
        {"queries", t.queries},
        {"correct_query", t.correct_query},
    };
    if (t.semantic_level) j["semantic_level"] = *t.semantic_level;
    if (!t.featureviz_slots_left.empty() || !t.featureviz_slots_right.empty())
        j["featureviz_slots"] = {{"left", t.featureviz_slots_left}, {"right", t.featureviz_slots_right}};
    if (t.catch_position) j["catch_position"] = *t.catch_position;
    if (!t.practice_feature.empty()) j["practice_feature"] = t.practice_feature;
    return j;
}

Trial trial_from_json(const nlohmann::json& j) {
    Trial t;
    t.trial_id = j.at("trial_id").get<std::string>();
    const auto& unit = j.at("unit");
    if (unit.contains("condition")) {
        t.unit = feature_spec_from_json(unit);
    } else {
        t.unit.layer = unit.value("layer", std::string{});
    }
    t.experiment = experiment_from_string(j.at("experiment").get<std::string>());
    t.kind = trial_kind_from_string(j.at("kind").get<std::string>());
    t.left_refs = j.at("left_refs").get<std::vector<std::string>>();
    t.right_refs = j.at("right_refs").get<std::vector<std::string>>();
    t.queries = j.at("queries").get<std::array<std::string, 2>>();
    t.correct_query = j.at("correct_query").get<int>();
    if (j.contains("semantic_level")) t.semantic_level = j.at("semantic_level").get<int>();
    if (j.contains("featureviz_slots")) {
        t.featureviz_slots_left = j["featureviz_slots"].at("left").get<std::vector<int>>();
        t.featureviz_slots_right = j["featureviz_slots"].at("right").get<std::vector<int>>();
    }
    if (j.contains("catch_position")) t.catch_position = j.at("catch_position").get<int>();
    t.practice_feature = j.value("practice_feature", std::string{});
    return t;
}

nlohmann::json to_json(const TrialBundle& b) {
    nlohmann::json trials = nlohmann::json::array();
    for (const auto& t : b.practice) trials.push_back(to_json(t));
    for (const auto& t : b.trials) trials.push_back(to_json(t));
    for (const auto& t : b.catch_trials) trials.push_back(to_json(t));
    return {{"config",
             {{"experiment", to_string(b.experiment)}, {"sizes", to_json(b.sizes)}, {"config_hash", b.config_hash}}},
            {"seed", b.seed},
            {"excluded_units", b.excluded_units},
            {"trials", trials}};
}

TrialBundle bundle_from_json(const nlohmann::json& j) {
    TrialBundle b;
    try {
        const auto& config = j.at("config");
        b.experiment = experiment_from_string(config.at("experiment").get<std::string>());
        b.sizes = pool_sizes_from_json(config.at("sizes"));
        b.config_hash = config.value("config_hash", std::string{});
        b.seed = j.at("seed").get<std::uint64_t>();
        b.excluded_units = j.value("excluded_units", std::vector<std::string>{});
        for (const auto& tj : j.at("trials")) {
            auto t = trial_from_json(tj);
            switch (t.kind) {
                case TrialKind::Practice: b.practice.push_back(std::move(t)); break;
                case TrialKind::Catch: b.catch_trials.push_back(std::move(t)); break;
                case TrialKind::Standard: b.trials.push_back(std::move(t)); break;
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(kModule, std::string("malformed bundle: ") + e.what());
    }
    return b;
}

std::string serialize_bundle(const TrialBundle& b) { return to_json(b).dump(1) + "\n"; }

void write_bundle(const std::filesystem::path& path, const TrialBundle& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(kModule, "cannot open " + path.string() + " for writing");
    out << serialize_bundle(b);
}

TrialBundle read_bundle(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(kModule, "cannot open bundle " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(kModule, std::string("bundle is not valid JSON: ") + e.what());
    }
    return bundle_from_json(j);
}

}  // namespace repcmp

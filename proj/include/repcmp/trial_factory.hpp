#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "repcmp/feature_catalog.hpp"
#include "repcmp/semantic_control.hpp"
#include "repcmp/tensor_store.hpp"

namespace repcmp {

enum class Experiment { I, II, III };
enum class TrialKind { Standard, Practice, Catch };

std::string to_string(Experiment e);
Experiment experiment_from_string(const std::string& s);
std::string to_string(TrialKind k);
TrialKind trial_kind_from_string(const std::string& s);

inline constexpr std::size_t kPanelSize = 9;
inline constexpr std::size_t kFeaturevizPerPanel = 4;
inline constexpr std::size_t kPracticeTrials = 9;
inline constexpr std::size_t kCatchTrials = 5;

struct Trial {
    std::string trial_id;
    FeatureSpec unit;
    Experiment experiment = Experiment::I;
    TrialKind kind = TrialKind::Standard;
    /// Minimally activating references.
    std::vector<std::string> left_refs;
    /// Maximally activating references.
    std::vector<std::string> right_refs;
    /// Stored as generated; the service randomises on-screen order per session.
    std::array<std::string, 2> queries;
    int correct_query = 0;
    std::optional<int> semantic_level;
    std::vector<int> featureviz_slots_left;
    std::vector<int> featureviz_slots_right;
    /// Catch trials: grid cell holding the duplicated query.
    std::optional<int> catch_position;
    /// Practice trials: curated feature name.
    std::string practice_feature;

    const std::string& correct_image() const { return queries[static_cast<std::size_t>(correct_query)]; }
    const std::string& distractor_image() const { return queries[static_cast<std::size_t>(1 - correct_query)]; }
};

/// Throws ValidationError when a trial breaks the layout or duplication rules.
void validate_trial(const Trial& trial);

/// 9 right references plus the correct query from the top ref_pool images,
/// 9 left references plus the distractor from the bottom min_pool images.
Trial make_standard_trial(const FeatureSpec& unit, const StimulusPool& pool, const PoolSizes& sizes,
                          std::uint64_t seed);

/// Replaces the left panel and distractor of `base` with a semantic match
/// (9 + 1). Returns nullopt for an excluded match.
std::optional<Trial> make_controlled_trial(const Trial& base, const SemanticMatch& match);

/// Standard trial followed by the iterative semantic search over the whole
/// bottom pool. nullopt when the search is excluded.
std::optional<Trial> make_semantic_trial(const FeatureSpec& unit, const StimulusPool& pool, const PoolSizes& sizes,
                                         const Taxonomy& taxonomy, const DatasetManifest& manifest,
                                         std::uint64_t seed);

/// Attentiveness test: the correct query also occupies one random cell of the
/// right grid.
Trial make_catch_trial(const FeatureSpec& unit, const StimulusPool& pool, const PoolSizes& sizes,
                       std::uint64_t seed);

struct PracticeFeature {
    std::string name;
    std::vector<std::string> image_ids;
};

struct PracticeConfig {
    std::vector<PracticeFeature> features;
    /// Images without a coherent pattern, used for the left panels.
    std::vector<std::string> distractor_pool;

    static PracticeConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// One practice trial per curated feature. Throws ValidationError if any
/// practice image belongs to `experimental`.
std::vector<Trial> make_practice_set(const PracticeConfig& config, const DatasetManifest& experimental,
                                     std::uint64_t seed);

/// Replaces 4 random cells of each panel with feature visualizations
/// (fv[0..3] left, fv[4..7] right).
Trial mix_featureviz(const Trial& trial, const std::vector<std::string>& fv_images, std::uint64_t seed);

struct TrialBundle {
    Experiment experiment = Experiment::I;
    PoolSizes sizes;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<Trial> trials;
    std::vector<Trial> practice;
    std::vector<Trial> catch_trials;
    /// Unit keys dropped by the semantic search (both conditions).
    std::vector<std::string> excluded_units;

    std::vector<const Trial*> trials_for(const std::string& feature_key) const;
};

struct BundleInputs {
    const DatasetManifest* manifest = nullptr;
    /// Required for experiments II and III.
    const Taxonomy* taxonomy = nullptr;
    const PracticeConfig* practice = nullptr;
    std::size_t max_distinct_retries = 100;
};

TrialBundle build_bundle(const FeatureCatalog& catalog, Experiment experiment, const BundleInputs& inputs,
                         std::uint64_t seed);

nlohmann::json to_json(const Trial& t);
Trial trial_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrialBundle& b);
TrialBundle bundle_from_json(const nlohmann::json& j);

std::string serialize_bundle(const TrialBundle& b);
void write_bundle(const std::filesystem::path& path, const TrialBundle& b);
TrialBundle read_bundle(const std::filesystem::path& path);

}  // namespace repcmp

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "repcmp/matrix.hpp"
#include "repcmp/nmf.hpp"
#include "repcmp/tensor_store.hpp"

namespace repcmp {

enum class Condition { Local, Distributed };

std::string to_string(Condition c);
Condition condition_from_string(const std::string& s);

/// Which rows drive direction selection: the NMF fitting set (default) or the
/// whole local pool.
enum class DirectionVariant { Top300, Full };

std::string to_string(DirectionVariant v);
DirectionVariant direction_variant_from_string(const std::string& s);

/// Pool and sampling sizes. Defaults are the full-scale values; tests and
/// desk-scale fixtures shrink them.
struct PoolSizes {
    std::size_t top = 2500;
    std::size_t bottom = 400;
    std::size_t fit_count = 300;
    std::size_t ref_pool = 150;
    std::size_t min_pool = 20;
    std::size_t trials_per_feature = 10;
    std::size_t k = 10;

    void validate() const;
    friend bool operator==(const PoolSizes&, const PoolSizes&) = default;
};

struct FeatureSpec {
    std::string layer;
    Condition condition = Condition::Local;
    /// The neuron under study; for distributed features, the neuron whose
    /// top images seeded the dictionary.
    std::size_t neuron_index = 0;
    std::optional<std::size_t> direction_index;
    std::string dictionary_ref;

    /// Stable identity of the underlying unit, shared by both conditions.
    std::string unit_key() const;
    /// unit_key plus condition.
    std::string feature_key() const;
    void validate() const;

    friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

struct StimulusPool {
    /// Descending activation.
    std::vector<std::string> top_ids;
    std::vector<double> top_activations;
    /// Ascending activation.
    std::vector<std::string> bottom_ids;
    std::vector<double> bottom_activations;
};

/// Splits images into the `top` strongest and `bottom` weakest. Ordering is
/// total: activation first, then ascending image_id. The bottom pool is the
/// tail of the descending order, so the two pools are always disjoint.
StimulusPool build_pool(std::span<const double> activations, std::span<const std::string> image_ids,
                        std::size_t top, std::size_t bottom);
StimulusPool build_pool(std::span<const double> activations, const DatasetManifest& manifest, std::size_t top,
                        std::size_t bottom);

/// Modal row-argmax over a codes matrix (lowest index wins all ties).
std::size_t select_direction(const Matrix& codes);
/// Same rule applied to the codes of the full pool instead of the fitting set.
std::size_t select_direction_alt(const Matrix& codes_pool);

/// Row positions sorted by descending codes[:, direction]. Ties go to the
/// lower image_id when ids are given, otherwise to the lower row.
std::vector<std::size_t> rank_by_direction(const Matrix& codes, std::size_t direction,
                                           std::span<const std::string> image_ids = {});

/// Depth block 1..4 of a ResNet-style layer name ("layer3.1.bn2" -> 3).
int layer_depth(const std::string& layer_name);

struct CatalogFeature {
    FeatureSpec spec;
    StimulusPool pool;
    int depth = 0;
    /// Images the dictionary was fitted on (first fit_count of the local top pool).
    std::vector<std::string> fit_ids;
    /// Distributed only: unit-norm dictionary atom d_c (length p).
    std::vector<double> direction;
    /// Distributed only: z_c for the first fit_count images of pool.top_ids.
    std::vector<double> top_codes;
    /// Optional feature-visualization assets (4 per panel).
    std::vector<std::string> featureviz_left;
    std::vector<std::string> featureviz_right;
};

struct FeatureCatalog {
    PoolSizes sizes;
    DirectionVariant variant = DirectionVariant::Top300;
    std::vector<CatalogFeature> features;
    /// Units reserved for attentiveness tests; never experimental.
    std::vector<CatalogFeature> catch_features;
    std::string config_hash;

    /// Features for one condition, in catalog order.
    std::vector<const CatalogFeature*> by_condition(Condition c) const;
    /// Throws ValidationError on duplicate features, catch units overlapping
    /// experimental units, or pools smaller than the configured sizes.
    void validate() const;
};

struct UnitRequest {
    std::string layer;
    std::size_t neuron = 0;
};

struct UnitBuild {
    CatalogFeature local;
    CatalogFeature distributed;
    Factorization factorization;
};

/// NMF dictionary fitted on the first fit_count images of the unit's local top pool.
Factorization fit_unit_dictionary(const Matrix& layer_activations, const DatasetManifest& manifest,
                                  const UnitRequest& unit, const PoolSizes& sizes, const NmfOptions& nmf);

/// Local pool, dictionary fit on the top fit_count images, direction selection
/// and re-ranking for one neuron. `layer_activations` is n x p, aligned with
/// `manifest`.
UnitBuild build_unit(const Matrix& layer_activations, const DatasetManifest& manifest, const UnitRequest& unit,
                     const PoolSizes& sizes, const NmfOptions& nmf, DirectionVariant variant);
/// Same, reusing a factorization produced by fit_unit_dictionary.
UnitBuild build_unit(const Matrix& layer_activations, const DatasetManifest& manifest, const UnitRequest& unit,
                     const PoolSizes& sizes, Factorization factorization, DirectionVariant variant,
                     kernels::Exec exec = kernels::Exec::Parallel);

/// Local-only pool for a catch unit.
CatalogFeature build_catch_unit(const Matrix& layer_activations, const DatasetManifest& manifest,
                                const UnitRequest& unit, const PoolSizes& sizes);

nlohmann::json to_json(const PoolSizes& s);
PoolSizes pool_sizes_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FeatureSpec& s);
FeatureSpec feature_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FeatureCatalog& c);
FeatureCatalog catalog_from_json(const nlohmann::json& j);

}  // namespace repcmp

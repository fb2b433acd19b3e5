#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "repcmp/backend_client.hpp"
#include "repcmp/feature_catalog.hpp"
#include "repcmp/stats.hpp"

namespace repcmp {

/// Logit drop for each of a feature's most activating images when the
/// feature is ablated: delta_i = y_i - y_i'.
struct AblationResult {
    FeatureSpec unit;
    int depth_block = 0;
    std::vector<std::string> image_ids;
    std::vector<double> per_image_delta;
    double mean_delta = 0.0;
    bool ok = true;
    std::string error;
};

struct ImportanceOptions {
    /// Number of most activating images per feature.
    std::size_t top_count = 300;
    std::size_t max_attempts = 3;
    LogitTarget logit = LogitTarget::Predicted;
};

/// Neuron ablation for local units; for distributed units the backend applies
/// a' = max(0, a - z_c d_c) with the given atom and per-image codes.
/// Backend failures are retried up to max_attempts, after which the result
/// carries ok = false and the last error.
AblationResult compute_importance(const FeatureSpec& unit, std::span<const std::string> top_ids,
                                  BackendClient& client, std::span<const double> direction,
                                  std::span<const double> codes, const ImportanceOptions& opts = {});

AblationResult compute_importance(const CatalogFeature& feature, BackendClient& client,
                                  const ImportanceOptions& opts = {});

using BackendClientFactory = std::function<std::unique_ptr<BackendClient>()>;

/// All experimental features, at most `max_in_flight` concurrent backend
/// conversations. Output order follows the catalog.
std::vector<AblationResult> compute_importance_all(const FeatureCatalog& catalog, const BackendClientFactory& factory,
                                                   std::size_t max_in_flight, const ImportanceOptions& opts = {});

struct DepthImportance {
    int depth = 0;
    Condition condition = Condition::Local;
    std::size_t n_units = 0;
    /// Mean over units of their mean logit drop; NaN when n_units == 0.
    double mean_delta = 0.0;
};

struct ImportanceReport {
    /// Depth blocks 1..4 x {local, distributed}, always 8 rows.
    std::vector<DepthImportance> per_depth;
    /// Local unit means (first sample) vs distributed unit means.
    MannWhitneyResult overall;
    std::map<int, MannWhitneyResult> per_depth_tests;
    double mean_local = 0.0;
    double mean_distributed = 0.0;
    /// Qualitative check: mean distributed drop exceeds mean local drop.
    bool distributed_relies_more = false;
    std::size_t failed_units = 0;
    std::vector<AblationResult> units;
};

/// Throws ValidationError unless both conditions have at least one
/// successful unit.
ImportanceReport importance_report(std::span<const AblationResult> results);

nlohmann::json to_json(const AblationResult& r);
AblationResult ablation_result_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ImportanceReport& r);
/// One row per unit: unit, layer, condition, depth, mean_delta.
std::string importance_units_csv(const ImportanceReport& r);
/// One row per (depth, condition): the per-layer bar chart.
std::string importance_depth_csv(const ImportanceReport& r);

}  // namespace repcmp

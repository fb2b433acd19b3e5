#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "repcmp/backend_client.hpp"
#include "repcmp/feature_catalog.hpp"
#include "repcmp/trial_factory.hpp"

namespace repcmp {

/// Everything a pipeline run reads. Only the result-affecting subset enters
/// the config hash (see hashed_json), so selectors such as --experiment or
/// --backend-url do not split one pipeline into incompatible artifacts.
struct PipelineConfig {
    // Inputs.
    std::filesystem::path manifest;
    /// Directory of pre-computed <layer>.clts files; ingest reads these instead of the backend.
    std::filesystem::path tensors;
    std::filesystem::path taxonomy;
    std::filesystem::path practice;
    std::filesystem::path responses;
    std::filesystem::path out_dir = "out";
    std::filesystem::path log;
    std::filesystem::path static_dir;

    // Result-affecting.
    PoolSizes sizes;
    std::uint64_t seed = 0;
    DirectionVariant variant = DirectionVariant::Top300;
    std::vector<std::string> layers;
    /// Explicit "layer:neuron" units; when empty, unit_count units are sampled.
    std::vector<std::string> units;
    std::size_t unit_count = 80;
    std::size_t catch_unit_count = kCatchTrials;
    std::size_t nmf_max_iters = 500;
    double nmf_rel_tol = 1e-5;
    std::string nmf_init = "uniform";
    std::string nmf_solver = "mu";
    std::size_t importance_top = 300;
    std::string logit = "predicted";
    bool featureviz = false;
    std::size_t featureviz_steps = 256;

    // Selectors and runtime.
    std::string experiment = "I";
    std::string condition = "both";
    std::string backend_url = "http://127.0.0.1:8000";
    double backend_timeout_s = 30.0;
    std::size_t max_in_flight = 4;
    std::size_t batch_size = 256;
    bool serial = false;
    bool force = false;
    bool quiet = false;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::size_t main_trials = 40;

    /// Throws ValidationError on inconsistent settings.
    void validate() const;
    nlohmann::json to_json() const;
    nlohmann::json hashed_json() const;
    /// 16 hex digits of FNV-1a over hashed_json().dump().
    std::string config_hash() const;

    std::vector<Experiment> experiments() const;
    std::vector<Condition> conditions() const;
    NmfOptions nmf_options() const;
};

inline const std::vector<std::string> kCommands = {"ingest", "factorize", "catalog",  "semctl",
                                                   "trials", "importance", "report", "serve"};

/// Injection points for tests; defaults talk HTTP to config.backend_url.
struct PipelineHooks {
    std::function<std::unique_ptr<BackendClient>(const PipelineConfig&)> make_backend;
    /// Called by `serve` once the port is bound (port, stop callback).
    std::function<void(int, std::function<void()>)> on_serving;
    std::ostream* log = nullptr;
};

/// Runs one subcommand to completion and returns its exit status. Writes
/// <out_dir>/<command>.config.json before doing anything else.
/// Errors propagate as repcmp::Error subclasses.
int run_command(const std::string& command, const PipelineConfig& config, const PipelineHooks& hooks = {});

std::string fnv1a_hex(std::string_view bytes);

/// Parses "layer:neuron".
UnitRequest parse_unit(const std::string& text);

/// Units for the catalog: explicit ones, or unit_count sampled without
/// replacement, round-robin over the depth blocks present in `layer_widths`.
/// Catch units are sampled from the remaining channels.
struct UnitSelection {
    std::vector<UnitRequest> experimental;
    std::vector<UnitRequest> catch_units;
};
UnitSelection select_units(const PipelineConfig& config,
                           const std::vector<std::pair<std::string, std::size_t>>& layer_widths);

}  // namespace repcmp

#include <iostream>

#include <CLI11.hpp>

#include "repcmp/errors.hpp"
#include "repcmp/pipeline.hpp"

namespace {

const char* kDescriptions[] = {
    "fetch or import pooled activations and the image manifest",
    "fit one NMF dictionary per selected unit",
    "build stimulus pools, directions and catch units",
    "check the taxonomy and report semantic-search levels",
    "generate trial bundles for the selected experiment(s)",
    "measure logit drops through the model backend",
    "write accuracy and importance tables",
    "run the participant-facing experiment service",
};

}  // namespace

int main(int argc, char** argv) {
    repcmp::PipelineConfig cfg;
    CLI::App app{"Local vs distributed representation comparison pipeline"};
    app.set_config("--config", "", "TOML config file; flags override it");
    app.require_subcommand(1);
    app.fallthrough();

    app.add_option("--seed", cfg.seed, "Root RNG seed")->capture_default_str();
    app.add_option("--experiment", cfg.experiment, "I, II, III or all")->capture_default_str();
    app.add_option("--condition", cfg.condition, "local, distributed or both")->capture_default_str();
    app.add_option("--backend-url", cfg.backend_url, "Model backend base URL")->capture_default_str();
    app.add_option("--backend-timeout", cfg.backend_timeout_s, "Backend request timeout in seconds");
    app.add_option("--out-dir", cfg.out_dir, "Artifact directory")->capture_default_str();
    app.add_option_function<std::string>(
           "--direction-variant",
           [&](const std::string& v) { cfg.variant = repcmp::direction_variant_from_string(v); },
           "top300 (fitting images) or full (whole pool)")
        ->check(CLI::IsMember({"top300", "full"}));

    app.add_option("--manifest", cfg.manifest, "Dataset manifest (JSON array)");
    app.add_option("--tensors", cfg.tensors, "Directory of <layer>.clts activations to import");
    app.add_option("--taxonomy", cfg.taxonomy, "Label taxonomy JSON");
    app.add_option("--practice", cfg.practice, "Practice feature config JSON");
    app.add_option("--responses", cfg.responses, "Exported responses JSON for report");
    app.add_option("--log", cfg.log, "Service event log (default <out-dir>/events.jsonl)");
    app.add_option("--static-dir", cfg.static_dir, "Participant UI bundle served at /");

    app.add_option("--layers", cfg.layers, "Layers to ingest (default: all)")->delimiter(',');
    app.add_option("--units", cfg.units, "Explicit layer:neuron units")->delimiter(',');
    app.add_option("--unit-count", cfg.unit_count, "Units to sample when --units is empty")->capture_default_str();
    app.add_option("--catch-unit-count", cfg.catch_unit_count, "Catch units to sample")->capture_default_str();

    app.add_option("--top", cfg.sizes.top, "Top pool size")->capture_default_str();
    app.add_option("--bottom", cfg.sizes.bottom, "Bottom pool size")->capture_default_str();
    app.add_option("--fit-count", cfg.sizes.fit_count, "Images the dictionary is fitted on")->capture_default_str();
    app.add_option("--ref-pool", cfg.sizes.ref_pool, "Top images trials draw from")->capture_default_str();
    app.add_option("--min-pool", cfg.sizes.min_pool, "Bottom images trials draw from")->capture_default_str();
    app.add_option("--trials-per-feature", cfg.sizes.trials_per_feature)->capture_default_str();
    app.add_option("--k", cfg.sizes.k, "Dictionary size")->capture_default_str();

    app.add_option("--max-iters", cfg.nmf_max_iters)->capture_default_str();
    app.add_option("--rel-tol", cfg.nmf_rel_tol)->capture_default_str();
    app.add_option("--nmf-init", cfg.nmf_init)->check(CLI::IsMember({"uniform", "nndsvd"}))->capture_default_str();
    app.add_option("--nmf-solver", cfg.nmf_solver)->check(CLI::IsMember({"mu", "hals"}))->capture_default_str();
    app.add_flag("--serial", cfg.serial, "Use the serial reference kernels");

    app.add_option("--importance-top", cfg.importance_top, "Images ablated per feature")->capture_default_str();
    app.add_option("--logit", cfg.logit)->check(CLI::IsMember({"predicted", "label"}))->capture_default_str();
    app.add_option("--max-in-flight", cfg.max_in_flight, "Concurrent backend conversations")->capture_default_str();
    app.add_option("--batch-size", cfg.batch_size, "Images per activation request")->capture_default_str();
    app.add_flag("--featureviz", cfg.featureviz, "Synthesize feature visualizations in catalog");
    app.add_option("--featureviz-steps", cfg.featureviz_steps)->capture_default_str();

    app.add_option("--host", cfg.host)->capture_default_str();
    app.add_option("--port", cfg.port)->capture_default_str();
    app.add_option("--main-trials", cfg.main_trials, "Main trials per session")->capture_default_str();

    app.add_flag("--force", cfg.force, "Let report combine artifacts with different config hashes");
    app.add_flag("-q,--quiet", cfg.quiet, "Suppress progress output");

    std::string command;
    for (std::size_t i = 0; i < repcmp::kCommands.size(); ++i) {
        const auto& name = repcmp::kCommands[i];
        app.add_subcommand(name, kDescriptions[i])->callback([&command, name] { command = name; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        return repcmp::run_command(command, cfg);
    } catch (const repcmp::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

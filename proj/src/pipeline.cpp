#include "repcmp/pipeline.hpp"

#include <pthread.h>
#include <signal.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "repcmp/errors.hpp"
#include "repcmp/experiment_service.hpp"
#include "repcmp/importance.hpp"
#include "repcmp/rng.hpp"
#include "repcmp/semantic_control.hpp"
#include "repcmp/stats.hpp"

namespace repcmp {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kModule = "cli";

// ---------------------------------------------------------------- files

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(kModule, "cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

json read_json(const fs::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw FormatError(kModule, path.string() + " is not valid JSON: " + e.what());
    }
}

/// Write-then-rename so readers never observe a partial artifact.
void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError(kModule, "cannot write " + path.string());
        out << text;
        if (!out.flush()) throw IoError(kModule, "short write to " + path.string());
    }
    fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(1) + "\n"); }

struct Layout {
    fs::path root;

    fs::path manifest() const { return root / "manifest.json"; }
    fs::path ingest() const { return root / "ingest.json"; }
    fs::path activations(const std::string& layer) const { return root / "activations" / (layer + ".clts"); }
    fs::path activations_meta(const std::string& layer) const { return root / "activations" / (layer + ".json"); }
    fs::path factorization(const UnitRequest& u) const {
        return root / "factorizations" / (u.layer + "_n" + std::to_string(u.neuron) + ".json");
    }
    fs::path catalog() const { return root / "catalog.json"; }
    fs::path taxonomy() const { return root / "taxonomy.json"; }
    fs::path semctl() const { return root / "semctl.json"; }
    fs::path bundle(Experiment e) const { return root / ("bundle_" + to_string(e) + ".json"); }
    fs::path importance() const { return root / "importance.json"; }
    fs::path report_dir() const { return root / "report"; }
    fs::path events() const { return root / "events.jsonl"; }
    fs::path featureviz() const { return root / "featureviz"; }
    fs::path snapshot(const std::string& command) const { return root / (command + ".config.json"); }
};

fs::path require(const fs::path& path, const std::string& producer) {
    if (!fs::exists(path)) throw IoError(kModule, path.string() + " is missing; run `" + producer + "` first");
    return path;
}

// ---------------------------------------------------------------- context

struct Context {
    const PipelineConfig& cfg;
    const PipelineHooks& hooks;
    Layout out;
    std::string hash;
    std::ostream& log;

    template <class... Args>
    void info(const std::string& command, Args&&... args) const {
        if (cfg.quiet) return;
        log << '[' << command << "] ";
        (log << ... << args);
        log << '\n';
    }

    std::unique_ptr<BackendClient> backend() const {
        if (hooks.make_backend) return hooks.make_backend(cfg);
        const auto timeout = std::chrono::milliseconds(static_cast<long long>(cfg.backend_timeout_s * 1000));
        return std::make_unique<HttpBackendClient>(cfg.backend_url, timeout);
    }
};

std::vector<std::pair<std::string, std::size_t>> ingested_layers(const Context& ctx) {
    const auto j = read_json(require(ctx.out.ingest(), "ingest"));
    std::vector<std::pair<std::string, std::size_t>> layers;
    for (const auto& l : j.at("layers")) layers.emplace_back(l.at("name"), l.at("channels"));
    return layers;
}

Matrix load_activations(const Context& ctx, const std::string& layer) {
    return matrix_from_tensor(read_tensor(require(ctx.out.activations(layer), "ingest")));
}

DatasetManifest load_manifest(const Context& ctx) { return ingest_manifest(require(ctx.out.manifest(), "ingest")); }

FeatureCatalog load_catalog(const Context& ctx) {
    return catalog_from_json(read_json(require(ctx.out.catalog(), "catalog")));
}

/// Keeps the experimental features of the selected conditions.
FeatureCatalog filter_conditions(FeatureCatalog catalog, const std::vector<Condition>& conditions) {
    std::erase_if(catalog.features, [&](const CatalogFeature& f) {
        return std::find(conditions.begin(), conditions.end(), f.spec.condition) == conditions.end();
    });
    return catalog;
}

json matrix_to_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"values", m.values()}};
}

Matrix matrix_from_json(const json& j) {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  j.at("values").get<std::vector<double>>());
}

// ---------------------------------------------------------------- ingest

int cmd_ingest(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    if (cfg.manifest.empty()) throw ValidationError(kModule, "ingest needs --manifest");
    auto manifest = ingest_manifest(cfg.manifest);
    const auto base = fs::absolute(cfg.manifest).parent_path();
    for (auto& e : manifest.entries) {
        fs::path p(e.source_path);
        if (!p.empty() && p.is_relative()) e.source_path = (base / p).lexically_normal().string();
    }

    std::vector<std::pair<std::string, Matrix>> tensors;
    if (!cfg.tensors.empty()) {
        std::vector<std::string> layers = cfg.layers;
        if (layers.empty()) {
            for (const auto& entry : fs::directory_iterator(cfg.tensors))
                if (entry.path().extension() == ".clts") layers.push_back(entry.path().stem().string());
            std::sort(layers.begin(), layers.end());
        }
        if (layers.empty()) throw ValidationError(kModule, "no .clts tensors in " + cfg.tensors.string());
        for (const auto& layer : layers) {
            auto t = read_tensor(cfg.tensors / (layer + ".clts"));
            if (t.shape.size() != 2)
                throw ValidationError(kModule, layer + ": expected pooled n x p activations, got rank " +
                                                   std::to_string(t.shape.size()));
            check_alignment(manifest, t);
            tensors.emplace_back(layer, matrix_from_tensor(t));
        }
    } else {
        auto client = ctx.backend();
        const auto desc = client->describe();
        std::map<std::string, std::size_t> widths;
        for (const auto& l : desc.layers) widths[l.name] = l.channels;
        std::vector<std::string> layers = cfg.layers;
        if (layers.empty())
            for (const auto& l : desc.layers) layers.push_back(l.name);
        const auto ids = manifest.image_ids();
        for (const auto& layer : layers) {
            auto w = widths.find(layer);
            if (w == widths.end())
                throw ValidationError(kModule, "backend at " + client->endpoint() + " has no layer '" + layer + "'");
            Matrix m(ids.size(), w->second);
            for (std::size_t start = 0; start < ids.size(); start += cfg.batch_size) {
                const std::size_t end = std::min(ids.size(), start + cfg.batch_size);
                std::vector<std::string> batch(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                               ids.begin() + static_cast<std::ptrdiff_t>(end));
                auto result = client->activations(layer, batch);
                if (result.warning) ctx.info("ingest", "warning from backend for ", layer, ": ", *result.warning);
                const Matrix rows = matrix_from_tensor(result.tensor);
                if (rows.rows() != batch.size() || rows.cols() != w->second)
                    throw BackendError(kModule, layer + ": backend returned " + std::to_string(rows.rows()) + "x" +
                                                    std::to_string(rows.cols()) + " for a batch of " +
                                                    std::to_string(batch.size()) + " images");
                for (std::size_t r = 0; r < rows.rows(); ++r)
                    std::copy(rows.row(r).begin(), rows.row(r).end(), m.row(start + r).begin());
            }
            tensors.emplace_back(layer, std::move(m));
        }
    }

    write_manifest(ctx.out.manifest(), manifest);
    fs::create_directories(ctx.out.activations("x").parent_path());
    json layers = json::array();
    for (const auto& [layer, m] : tensors) {
        const auto negative = static_cast<std::size_t>(
            std::count_if(m.values().begin(), m.values().end(), [](double v) { return v < 0.0; }));
        if (negative) ctx.info("ingest", "warning: ", layer, " has ", negative, " negative entries; NMF will reject it");
        write_tensor(ctx.out.activations(layer), tensor_from_matrix(m));
        write_json(ctx.out.activations_meta(layer), {{"layer", layer},
                                                     {"rows", m.rows()},
                                                     {"cols", m.cols()},
                                                     {"negative_entries", negative},
                                                     {"config_hash", ctx.hash}});
        layers.push_back({{"name", layer}, {"channels", m.cols()}});
        ctx.info("ingest", layer, ": ", m.rows(), " x ", m.cols());
    }
    write_json(ctx.out.ingest(), {{"config_hash", ctx.hash}, {"images", manifest.entries.size()}, {"layers", layers}});
    return 0;
}

// ---------------------------------------------------------------- factorize

std::map<std::string, std::vector<UnitRequest>> by_layer(const std::vector<UnitRequest>& units) {
    std::map<std::string, std::vector<UnitRequest>> out;
    for (const auto& u : units) out[u.layer].push_back(u);
    return out;
}

int cmd_factorize(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    const auto manifest = load_manifest(ctx);
    const auto selection = select_units(cfg, ingested_layers(ctx));
    for (const auto& [layer, units] : by_layer(selection.experimental)) {
        const Matrix acts = load_activations(ctx, layer);
        for (const auto& unit : units) {
            const auto key = unit.layer + "#" + std::to_string(unit.neuron);
            NmfOptions nmf = cfg.nmf_options();
            nmf.seed = derive_seed(cfg.seed, "nmf/" + key);
            const auto f = fit_unit_dictionary(acts, manifest, unit, cfg.sizes, nmf);
            write_json(ctx.out.factorization(unit), {{"config_hash", ctx.hash},
                                                     {"unit", {{"layer", unit.layer}, {"neuron", unit.neuron}}},
                                                     {"iterations", f.iterations},
                                                     {"converged", f.converged},
                                                     {"objective_trace", f.objective_trace},
                                                     {"dictionary", matrix_to_json(f.dictionary)},
                                                     {"codes", matrix_to_json(f.codes)}});
            ctx.info("factorize", key, ": ", f.iterations, " iterations, ",
                     f.converged ? "converged" : "stopped at max_iters", ", residual ",
                     f.objective_trace.empty() ? 0.0 : f.objective_trace.back());
        }
    }
    return 0;
}

// ---------------------------------------------------------------- catalog

Factorization load_factorization(const Context& ctx, const UnitRequest& unit) {
    const auto j = read_json(require(ctx.out.factorization(unit), "factorize"));
    Factorization f;
    f.dictionary = matrix_from_json(j.at("dictionary"));
    f.codes = matrix_from_json(j.at("codes"));
    f.objective_trace = j.at("objective_trace").get<std::vector<double>>();
    f.converged = j.at("converged").get<bool>();
    f.iterations = j.at("iterations").get<std::size_t>();
    return f;
}

std::vector<double> one_hot(std::size_t width, std::size_t index) {
    std::vector<double> v(width, 0.0);
    v.at(index) = 1.0;
    return v;
}

void attach_featureviz(const Context& ctx, BackendClient& client, CatalogFeature& f, std::size_t layer_width) {
    const auto key = f.spec.feature_key();
    FeaturevizRequest req;
    req.layer = f.spec.layer;
    req.direction = f.spec.condition == Condition::Local ? one_hot(layer_width, f.spec.neuron_index) : f.direction;
    req.steps = ctx.cfg.featureviz_steps;
    f.featureviz_left.clear();
    f.featureviz_right.clear();
    for (std::size_t i = 0; i < 2 * kFeaturevizPerPanel; ++i) {
        req.maximize = i >= kFeaturevizPerPanel;
        req.seed = derive_seed(ctx.cfg.seed, key + "/featureviz/" + std::to_string(i));
        const auto asset = client.featureviz(req);
        if (!asset.converged) ctx.info("catalog", "warning: feature visualization ", i, " of ", key, " did not converge");
        const fs::path src(asset.image_path);
        std::string name = f.spec.layer + "_n" + std::to_string(f.spec.neuron_index) + "_" +
                           to_string(f.spec.condition) + "_" + std::to_string(i) + src.extension().string();
        fs::create_directories(ctx.out.featureviz());
        fs::copy_file(src, ctx.out.featureviz() / name, fs::copy_options::overwrite_existing);
        (req.maximize ? f.featureviz_right : f.featureviz_left).push_back("featureviz/" + name);
    }
}

int cmd_catalog(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    const auto manifest = load_manifest(ctx);
    const auto layers = ingested_layers(ctx);
    const auto selection = select_units(cfg, layers);
    const auto exec = cfg.serial ? kernels::Exec::Serial : kernels::Exec::Parallel;

    FeatureCatalog catalog;
    catalog.sizes = cfg.sizes;
    catalog.variant = cfg.variant;
    catalog.config_hash = ctx.hash;

    std::map<std::string, UnitBuild> built;
    for (const auto& [layer, units] : by_layer(selection.experimental)) {
        const Matrix acts = load_activations(ctx, layer);
        for (const auto& unit : units)
            built.emplace(unit.layer + "#" + std::to_string(unit.neuron),
                          build_unit(acts, manifest, unit, cfg.sizes, load_factorization(ctx, unit), cfg.variant, exec));
    }
    // Catalog order follows the selection, not the per-layer grouping.
    for (const auto& unit : selection.experimental) {
        auto& b = built.at(unit.layer + "#" + std::to_string(unit.neuron));
        catalog.features.push_back(std::move(b.local));
        catalog.features.push_back(std::move(b.distributed));
    }
    for (const auto& [layer, units] : by_layer(selection.catch_units)) {
        const Matrix acts = load_activations(ctx, layer);
        for (const auto& unit : units) catalog.catch_features.push_back(build_catch_unit(acts, manifest, unit, cfg.sizes));
    }
    std::sort(catalog.catch_features.begin(), catalog.catch_features.end(),
              [](const auto& a, const auto& b) { return a.spec.unit_key() < b.spec.unit_key(); });

    if (cfg.featureviz) {
        std::map<std::string, std::size_t> widths(layers.begin(), layers.end());
        auto client = ctx.backend();
        for (auto& f : catalog.features) attach_featureviz(ctx, *client, f, widths.at(f.spec.layer));
    }
    catalog.validate();
    write_json(ctx.out.catalog(), to_json(catalog));
    ctx.info("catalog", catalog.features.size(), " features, ", catalog.catch_features.size(), " catch units");
    return 0;
}

// ---------------------------------------------------------------- semctl

Taxonomy load_taxonomy(const Context& ctx) {
    if (!ctx.cfg.taxonomy.empty()) return Taxonomy::load(ctx.cfg.taxonomy);
    if (fs::exists(ctx.out.taxonomy())) return Taxonomy::load(ctx.out.taxonomy());
    throw ValidationError(kModule, "no taxonomy: pass --taxonomy or run `semctl` first");
}

int cmd_semctl(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    if (cfg.taxonomy.empty()) throw ValidationError(kModule, "semctl needs --taxonomy");
    const auto taxonomy = Taxonomy::load(cfg.taxonomy);
    const auto manifest = load_manifest(ctx);
    std::set<std::string> missing;
    for (const auto& e : manifest.entries)
        if (!taxonomy.contains(label_node(e.label_id))) missing.insert(label_node(e.label_id));
    if (!missing.empty())
        throw ValidationError(kModule, std::to_string(missing.size()) + " manifest labels are not in the taxonomy, e.g. " +
                                           *missing.begin());
    write_json(ctx.out.taxonomy(), taxonomy.to_json());

    // Level distribution of the semantic search over each feature's standard trials.
    json features = json::array();
    std::array<std::size_t, kMaxSemanticLevel + 1> level_counts{};
    std::size_t excluded_trials = 0;
    if (fs::exists(ctx.out.catalog())) {
        const auto catalog = filter_conditions(load_catalog(ctx), cfg.conditions());
        for (const auto& f : catalog.features) {
            const auto key = f.spec.feature_key();
            json levels = json::array();
            bool excluded = false;
            for (std::size_t t = 0; t < cfg.sizes.trials_per_feature; ++t) {
                const auto seed = derive_seed(derive_seed(cfg.seed, "semctl/" + key), t);
                const auto trial = make_standard_trial(f.spec, f.pool, cfg.sizes, seed);
                std::vector<std::string> refs = trial.right_refs;
                refs.push_back(trial.correct_image());
                const auto match = iterative_semantic_search(refs, f.pool.bottom_ids, taxonomy, manifest, seed);
                if (match.excluded) {
                    excluded = true;
                    ++excluded_trials;
                    levels.push_back(nullptr);
                } else {
                    ++level_counts[static_cast<std::size_t>(match.level)];
                    levels.push_back(match.level);
                }
            }
            features.push_back({{"feature", key}, {"levels", levels}, {"excluded", excluded}});
        }
    } else {
        ctx.info("semctl", "no catalog yet; only the taxonomy was checked");
    }
    json counts = json::object();
    for (std::size_t l = 0; l < level_counts.size(); ++l) counts[std::to_string(l)] = level_counts[l];
    counts["excluded"] = excluded_trials;
    write_json(ctx.out.semctl(), {{"config_hash", ctx.hash},
                                  {"taxonomy_nodes", taxonomy.size()},
                                  {"level_counts", counts},
                                  {"features", features}});
    ctx.info("semctl", "taxonomy covers all ", manifest.entries.size(), " images; level counts ", counts.dump());
    return 0;
}

// ---------------------------------------------------------------- trials

int cmd_trials(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    auto catalog = filter_conditions(load_catalog(ctx), cfg.conditions());
    if (catalog.config_hash != ctx.hash)
        ctx.info("trials", "warning: catalog config_hash ", catalog.config_hash, " differs from this run's ", ctx.hash);
    // Sampling is a trial-stage setting; pool sizes stay as the catalog built them.
    catalog.sizes.trials_per_feature = cfg.sizes.trials_per_feature;
    const auto manifest = load_manifest(ctx);
    std::optional<PracticeConfig> practice;
    if (!cfg.practice.empty()) practice = PracticeConfig::from_json(read_json(cfg.practice));
    else ctx.info("trials", "warning: no --practice set; bundles carry no practice trials");

    for (const auto e : cfg.experiments()) {
        std::optional<Taxonomy> taxonomy;
        if (e != Experiment::I) taxonomy = load_taxonomy(ctx);
        BundleInputs inputs;
        inputs.manifest = &manifest;
        inputs.taxonomy = taxonomy ? &*taxonomy : nullptr;
        inputs.practice = practice ? &*practice : nullptr;
        auto bundle = build_bundle(catalog, e, inputs, derive_seed(cfg.seed, "bundle/" + to_string(e)));
        bundle.config_hash = ctx.hash;
        write_bundle(ctx.out.bundle(e), bundle);
        ctx.info("trials", "experiment ", to_string(e), ": ", bundle.trials.size(), " trials, ", bundle.practice.size(),
                 " practice, ", bundle.catch_trials.size(), " catch, ", bundle.excluded_units.size(), " units excluded");
    }
    return 0;
}

// ---------------------------------------------------------------- importance

int cmd_importance(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    const auto catalog = filter_conditions(load_catalog(ctx), cfg.conditions());
    // Fail fast, naming the endpoint, before spawning workers.
    ctx.backend()->describe();

    ImportanceOptions opts;
    opts.top_count = cfg.importance_top;
    opts.logit = cfg.logit == "label" ? LogitTarget::Label : LogitTarget::Predicted;
    const auto results = compute_importance_all(
        catalog, [&] { return ctx.backend(); }, cfg.max_in_flight, opts);

    json units = json::array();
    std::size_t failed = 0;
    for (const auto& r : results) {
        units.push_back(to_json(r));
        if (!r.ok) {
            ++failed;
            ctx.info("importance", "warning: ", r.unit.feature_key(), " failed: ", r.error);
        }
    }
    if (!results.empty() && failed == results.size())
        throw BackendError(kModule, "every ablation against " + cfg.backend_url + " failed");
    write_json(ctx.out.importance(), {{"config_hash", ctx.hash}, {"logit", cfg.logit}, {"results", units}});
    ctx.info("importance", results.size() - failed, " of ", results.size(), " features ablated");
    return 0;
}

// ---------------------------------------------------------------- report

std::string csv_with_hash(const std::string& hash, const std::string& csv) {
    return "# config_hash: " + hash + "\n" + csv;
}

std::string accuracy_csv(const std::vector<AccuracySummary>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "experiment,condition,depth,n_responses,proportion_correct,ci95_low,ci95_high\n";
    for (const auto& r : rows) {
        os << (r.experiment ? to_string(*r.experiment) : "") << ',' << (r.condition ? to_string(*r.condition) : "")
           << ',' << (r.depth_block ? std::to_string(*r.depth_block) : "") << ',' << r.n_responses << ',';
        if (r.defined) os << r.proportion_correct << ',' << r.ci95_low << ',' << r.ci95_high;
        else os << ",,";
        os << '\n';
    }
    return os.str();
}

int cmd_report(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    const auto& out = ctx.out;

    std::map<std::string, std::string> hashes;
    auto note_hash = [&](const fs::path& p) {
        if (fs::exists(p)) hashes[p.filename().string()] = read_json(p).value("config_hash", std::string{});
    };
    note_hash(out.catalog());
    note_hash(out.importance());
    for (auto e : {Experiment::I, Experiment::II, Experiment::III}) {
        const auto p = out.bundle(e);
        if (fs::exists(p)) hashes[p.filename().string()] = read_bundle(p).config_hash;
    }
    std::set<std::string> distinct;
    for (const auto& [file, h] : hashes) distinct.insert(h);
    if (distinct.size() > 1) {
        std::string detail;
        for (const auto& [file, h] : hashes) detail += " " + file + "=" + (h.empty() ? "<none>" : h);
        if (!cfg.force) throw ValidationError(kModule, "inputs carry different config hashes:" + detail + " (use --force)");
        ctx.info("report", "warning: mixed config hashes:", detail);
    }
    const std::string hash = distinct.size() == 1 ? *distinct.begin() : ctx.hash;

    bool emitted = false;
    if (fs::exists(out.importance())) {
        const auto j = read_json(out.importance());
        std::vector<AblationResult> results;
        for (const auto& r : j.at("results")) results.push_back(ablation_result_from_json(r));
        const auto report = importance_report(results);
        auto rj = to_json(report);
        rj["config_hash"] = hash;
        write_json(out.report_dir() / "importance_report.json", rj);
        write_text(out.report_dir() / "importance_depth.csv", csv_with_hash(hash, importance_depth_csv(report)));
        write_text(out.report_dir() / "importance_units.csv", csv_with_hash(hash, importance_units_csv(report)));
        ctx.info("report", "mean logit drop local ", report.mean_local, ", distributed ", report.mean_distributed,
                 "; distributed_relies_more=", report.distributed_relies_more ? "true" : "false",
                 ", U p=", report.overall.p_value);
        emitted = true;
    }

    if (!cfg.responses.empty()) {
        const auto j = read_json(cfg.responses);
        std::vector<ResponseRecord> records;
        for (const auto& r : j) {
            auto rec = response_from_json(r);
            if (rec.kind == TrialKind::Standard && !rec.session_excluded) records.push_back(std::move(rec));
        }
        const auto detailed = accuracy_summary(records, {true, true, true});
        const auto overall = accuracy_summary(records, {true, true, false});
        json aj = {{"config_hash", hash}, {"by_condition", json::array()}, {"by_depth", json::array()}};
        for (const auto& s : overall) aj["by_condition"].push_back(to_json(s));
        for (const auto& s : detailed) aj["by_depth"].push_back(to_json(s));
        write_json(out.report_dir() / "accuracy.json", aj);
        write_text(out.report_dir() / "accuracy_depth.csv", csv_with_hash(hash, accuracy_csv(detailed)));
        write_text(out.report_dir() / "accuracy.csv", csv_with_hash(hash, accuracy_csv(overall)));
        ctx.info("report", records.size(), " analysable responses");
        emitted = true;
    }
    if (!emitted) throw ValidationError(kModule, "nothing to report: no importance.json and no --responses");
    return 0;
}

// ---------------------------------------------------------------- serve

int cmd_serve(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    std::map<Experiment, TrialBundle> bundles;
    for (auto e : {Experiment::I, Experiment::II, Experiment::III})
        if (fs::exists(ctx.out.bundle(e))) bundles.emplace(e, read_bundle(ctx.out.bundle(e)));
    if (bundles.empty()) throw ValidationError(kModule, "no bundles in " + ctx.out.root.string() + "; run `trials` first");
    const auto manifest = load_manifest(ctx);

    ServiceOptions sopts;
    sopts.seed = mix64(std::random_device{}() ^ (static_cast<std::uint64_t>(std::time(nullptr)) << 32));
    sopts.main_trials = cfg.main_trials;
    SessionManager manager(std::move(bundles), cfg.log.empty() ? ctx.out.events() : cfg.log, sopts);

    AssetResolver assets;
    assets.manifest = &manifest;
    assets.search_roots.push_back(ctx.out.root);
    if (!cfg.practice.empty()) assets.search_roots.push_back(fs::absolute(cfg.practice).parent_path());
    ServerOptions server_opts{cfg.host, cfg.port, {}};
    if (!cfg.static_dir.empty()) server_opts.static_dir = cfg.static_dir;
    ExperimentServer server(manager, assets, server_opts);

    const int port = server.bind();
    if (port < 0) throw IoError(kModule, "cannot bind " + cfg.host + ":" + std::to_string(cfg.port));

    // Signals are consumed by a polling loop on this thread; workers inherit the mask.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    sigset_t previous;
    pthread_sigmask(SIG_BLOCK, &signals, &previous);

    std::atomic<bool> done{false};
    std::thread listener([&] {
        server.listen_after_bind();
        done = true;
    });
    server.wait_until_ready();
    ctx.info("serve", "listening on http://", cfg.host, ":", port, " (", manager.sessions().size(),
             " sessions recovered)");
    if (ctx.hooks.on_serving) ctx.hooks.on_serving(port, [&server] { server.stop(); });

    const timespec poll{0, 200'000'000};
    while (!done) {
        if (sigtimedwait(&signals, nullptr, &poll) > 0) {
            ctx.info("serve", "shutting down");
            server.stop();
            break;
        }
    }
    listener.join();
    pthread_sigmask(SIG_SETMASK, &previous, nullptr);
    return 0;
}

}  // namespace

// ---------------------------------------------------------------- config

void PipelineConfig::validate() const {
    sizes.validate();
    (void)experiments();
    (void)conditions();
    if (nmf_init != "uniform" && nmf_init != "nndsvd")
        throw ValidationError(kModule, "nmf init must be 'uniform' or 'nndsvd', got '" + nmf_init + "'");
    if (nmf_solver != "mu" && nmf_solver != "hals")
        throw ValidationError(kModule, "nmf solver must be 'mu' or 'hals', got '" + nmf_solver + "'");
    if (logit != "predicted" && logit != "label")
        throw ValidationError(kModule, "logit must be 'predicted' or 'label', got '" + logit + "'");
    if (importance_top == 0 || importance_top > sizes.fit_count)
        throw ValidationError(kModule, "importance_top must be in [1, fit_count]");
    if (units.empty() && unit_count == 0) throw ValidationError(kModule, "unit_count must be positive");
    if (catch_unit_count == 0) throw ValidationError(kModule, "catch_unit_count must be positive");
    if (batch_size == 0 || max_in_flight == 0) throw ValidationError(kModule, "batch_size and max_in_flight must be positive");
    if (!(nmf_rel_tol >= 0.0) || nmf_max_iters == 0) throw ValidationError(kModule, "invalid NMF stopping rule");
    for (const auto& u : units) (void)parse_unit(u);
}

json PipelineConfig::hashed_json() const {
    return {{"sizes", repcmp::to_json(sizes)},
            {"seed", seed},
            {"direction_variant", to_string(variant)},
            {"layers", layers},
            {"units", units},
            {"unit_count", unit_count},
            {"catch_unit_count", catch_unit_count},
            {"nmf", {{"max_iters", nmf_max_iters}, {"rel_tol", nmf_rel_tol}, {"init", nmf_init}, {"solver", nmf_solver}}},
            {"importance", {{"top", importance_top}, {"logit", logit}}},
            {"featureviz", {{"enabled", featureviz}, {"steps", featureviz_steps}}}};
}

json PipelineConfig::to_json() const {
    json j = hashed_json();
    j["paths"] = {{"manifest", manifest.string()}, {"tensors", tensors.string()},     {"taxonomy", taxonomy.string()},
                  {"practice", practice.string()}, {"responses", responses.string()}, {"out_dir", out_dir.string()},
                  {"log", log.string()},           {"static_dir", static_dir.string()}};
    j["experiment"] = experiment;
    j["condition"] = condition;
    j["backend_url"] = backend_url;
    j["max_in_flight"] = max_in_flight;
    j["batch_size"] = batch_size;
    j["serial"] = serial;
    j["main_trials"] = main_trials;
    j["config_hash"] = config_hash();
    return j;
}

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string PipelineConfig::config_hash() const { return fnv1a_hex(hashed_json().dump()); }

std::vector<Experiment> PipelineConfig::experiments() const {
    if (experiment == "all") return {Experiment::I, Experiment::II, Experiment::III};
    return {experiment_from_string(experiment)};
}

std::vector<Condition> PipelineConfig::conditions() const {
    if (condition == "both") return {Condition::Local, Condition::Distributed};
    return {condition_from_string(condition)};
}

NmfOptions PipelineConfig::nmf_options() const {
    NmfOptions o;
    o.k = sizes.k;
    o.max_iters = nmf_max_iters;
    o.rel_tol = nmf_rel_tol;
    o.seed = seed;
    o.init = nmf_init == "nndsvd" ? NmfInit::Nndsvd : NmfInit::SeededUniform;
    o.solver = nmf_solver == "hals" ? NmfSolver::Hals : NmfSolver::Multiplicative;
    o.exec = serial ? kernels::Exec::Serial : kernels::Exec::Parallel;
    return o;
}

UnitRequest parse_unit(const std::string& text) {
    static const std::regex re(R"(^([^:\s]+):(\d+)$)");
    std::smatch m;
    if (!std::regex_match(text, m, re)) throw ValidationError(kModule, "unit '" + text + "' is not layer:neuron");
    UnitRequest u{m[1].str(), std::stoul(m[2].str())};
    (void)layer_depth(u.layer);
    return u;
}

UnitSelection select_units(const PipelineConfig& config,
                           const std::vector<std::pair<std::string, std::size_t>>& layer_widths) {
    std::map<std::string, std::size_t> widths(layer_widths.begin(), layer_widths.end());
    std::set<std::pair<std::string, std::size_t>> taken;
    UnitSelection out;

    auto admit = [&](const UnitRequest& u) {
        auto w = widths.find(u.layer);
        if (w == widths.end()) throw ValidationError(kModule, "unit layer '" + u.layer + "' was not ingested");
        if (u.neuron >= w->second)
            throw ValidationError(kModule, "neuron " + std::to_string(u.neuron) + " out of range for " + u.layer);
        if (!taken.emplace(u.layer, u.neuron).second)
            throw ValidationError(kModule, "unit " + u.layer + ":" + std::to_string(u.neuron) + " listed twice");
    };

    // Candidate channels per depth block, in a canonical order.
    std::map<int, std::vector<UnitRequest>> pool;
    for (const auto& [layer, width] : widths)
        for (std::size_t n = 0; n < width; ++n) pool[layer_depth(layer)].push_back({layer, n});

    Rng rng(derive_seed(config.seed, "units"));
    auto draw = [&](std::size_t count, std::vector<UnitRequest>& into) {
        std::vector<int> blocks;
        for (const auto& [depth, units] : pool) blocks.push_back(depth);
        for (std::size_t i = 0; i < count; ++i) {
            std::erase_if(blocks, [&](int d) {
                return std::all_of(pool[d].begin(), pool[d].end(),
                                   [&](const UnitRequest& u) { return taken.contains({u.layer, u.neuron}); });
            });
            if (blocks.empty())
                throw ValidationError(kModule, "ingested layers have too few channels for " + std::to_string(count) +
                                                   " units");
            const int depth = blocks[i % blocks.size()];
            std::vector<UnitRequest> free;
            for (const auto& u : pool[depth])
                if (!taken.contains({u.layer, u.neuron})) free.push_back(u);
            const auto& pick = free[rng.uniform_index(free.size())];
            taken.emplace(pick.layer, pick.neuron);
            into.push_back(pick);
        }
    };

    if (!config.units.empty()) {
        for (const auto& text : config.units) {
            auto u = parse_unit(text);
            admit(u);
            out.experimental.push_back(std::move(u));
        }
    } else {
        draw(config.unit_count, out.experimental);
    }
    draw(config.catch_unit_count, out.catch_units);
    return out;
}

int run_command(const std::string& command, const PipelineConfig& config, const PipelineHooks& hooks) {
    if (std::find(kCommands.begin(), kCommands.end(), command) == kCommands.end())
        throw ValidationError(kModule, "unknown command '" + command + "'");
    config.validate();
    Context ctx{config, hooks, Layout{config.out_dir}, config.config_hash(), hooks.log ? *hooks.log : std::cerr};
    fs::create_directories(config.out_dir);
    json snapshot = config.to_json();
    snapshot["command"] = command;
    write_json(ctx.out.snapshot(command), snapshot);

    if (command == "ingest") return cmd_ingest(ctx);
    if (command == "factorize") return cmd_factorize(ctx);
    if (command == "catalog") return cmd_catalog(ctx);
    if (command == "semctl") return cmd_semctl(ctx);
    if (command == "trials") return cmd_trials(ctx);
    if (command == "importance") return cmd_importance(ctx);
    if (command == "report") return cmd_report(ctx);
    return cmd_serve(ctx);
}

}  // namespace repcmp

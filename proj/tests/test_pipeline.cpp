#include <doctest.h>

#include <cstdio>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "repcmp/errors.hpp"
#include "repcmp/experiment_service.hpp"
#include "support/pipeline_driver.hpp"
#include "support/service_driver.hpp"

using namespace repcmp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

PipelineConfig small(const fixture::ToyWorld& w, const std::string& out) {
    auto c = w.config(out);
    c.sizes.top = 120;
    c.sizes.bottom = 60;
    c.sizes.fit_count = 40;
    c.sizes.ref_pool = 30;
    c.sizes.min_pool = 20;
    c.sizes.k = 5;
    c.unit_count = 8;
    c.importance_top = 30;
    c.experiment = "all";
    c.featureviz = true;
    c.featureviz_steps = 8;
    return c;
}

fixture::ToyWorld& world() {
    static fixture::ToyWorld w(400);
    return w;
}

/// Output of ingest..importance for the small config, produced once.
const PipelineConfig& prepared() {
    static const PipelineConfig cfg = [] {
        auto c = small(world(), "main");
        for (const auto* cmd : {"ingest", "factorize", "catalog", "semctl", "trials", "importance"})
            REQUIRE(run_command(cmd, c) == 0);
        return c;
    }();
    return cfg;
}

std::map<std::string, std::string> directory_bytes(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = fixture::slurp(e.path());
    return out;
}

std::pair<int, std::string> run_cli(const std::string& args) {
    const std::string cmd = std::string(REPCMP_CLI) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::string out;
    char buf[512];
    while (fgets(buf, sizeof buf, pipe)) out += buf;
    const int status = pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

}  // namespace

TEST_CASE("pipeline writes every stage's artifacts with the config hash") {
    const auto& cfg = prepared();
    const auto out = cfg.out_dir;
    for (const auto* f : {"manifest.json", "ingest.json", "catalog.json", "semctl.json", "bundle_I.json",
                          "bundle_II.json", "bundle_III.json", "importance.json", "ingest.config.json",
                          "trials.config.json"})
        CHECK_MESSAGE(fs::exists(out / f), f);
    const auto catalog = catalog_from_json(json::parse(fixture::slurp(out / "catalog.json")));
    CHECK(catalog.config_hash == cfg.config_hash());
    CHECK(catalog.features.size() == 2 * cfg.unit_count);
    CHECK(catalog.catch_features.size() == cfg.catch_unit_count);
    CHECK(json::parse(fixture::slurp(out / "trials.config.json")).at("config_hash") == cfg.config_hash());
    for (const auto& f : catalog.features) CHECK(f.featureviz_left.size() == 4);
}

TEST_CASE("trials emits units x 2 conditions x trials_per_feature for experiment I") {
    const auto& cfg = prepared();
    const auto b = read_bundle(cfg.out_dir / "bundle_I.json");
    CHECK(b.trials.size() == cfg.unit_count * 2 * cfg.sizes.trials_per_feature);
    CHECK(b.practice.size() == kPracticeTrials);
    CHECK(b.catch_trials.size() == kCatchTrials);
    const auto b2 = read_bundle(cfg.out_dir / "bundle_II.json");
    CHECK(b2.trials.size() + 2 * cfg.sizes.trials_per_feature * b2.excluded_units.size() ==
          cfg.unit_count * 2 * cfg.sizes.trials_per_feature);
}

TEST_CASE("factorize is byte-reproducible and independent of the kernel policy") {
    auto cfg = prepared();
    const auto before = directory_bytes(cfg.out_dir / "factorizations");
    REQUIRE(before.size() == cfg.unit_count);
    REQUIRE(run_command("factorize", cfg) == 0);
    CHECK(directory_bytes(cfg.out_dir / "factorizations") == before);
    cfg.serial = true;
    REQUIRE(run_command("factorize", cfg) == 0);
    CHECK(directory_bytes(cfg.out_dir / "factorizations") == before);
}

TEST_CASE("trials regenerate byte-identically") {
    const auto& cfg = prepared();
    const auto before = fixture::slurp(cfg.out_dir / "bundle_II.json");
    REQUIRE(run_command("trials", cfg) == 0);
    CHECK(fixture::slurp(cfg.out_dir / "bundle_II.json") == before);
}

TEST_CASE("report emits importance tables and accuracy from exported responses") {
    const auto& cfg = prepared();
    std::map<Experiment, TrialBundle> bundles;
    bundles.emplace(Experiment::I, read_bundle(cfg.out_dir / "bundle_I.json"));
    fixture::TempDir dir("report");
    ServiceOptions so;
    so.main_trials = cfg.unit_count;
    so.now_ms = [] { return std::int64_t{0}; };
    SessionManager mgr(bundles, dir / "events.jsonl", so);
    for (int i = 0; i < 4; ++i) {
        const auto id = mgr.create_session(Experiment::I).session_id;
        fixture::run_session(mgr, bundles, id, [](TrialKind k, std::size_t n) {
            return k != TrialKind::Standard || n % 4 != 0;
        });
    }
    json exported = json::array();
    for (const auto& r : mgr.export_responses()) exported.push_back(to_json(r));
    std::ofstream(dir / "responses.json") << exported.dump();

    auto c = cfg;
    c.responses = dir / "responses.json";
    REQUIRE(run_command("report", c) == 0);
    const auto depth_csv = fixture::slurp(cfg.out_dir / "report/importance_depth.csv");
    CHECK(depth_csv.starts_with("# config_hash: " + cfg.config_hash()));
    const auto report = json::parse(fixture::slurp(cfg.out_dir / "report/importance_report.json"));
    CHECK(report.contains("distributed_relies_more"));
    const auto acc = json::parse(fixture::slurp(cfg.out_dir / "report/accuracy.json"));
    CHECK_FALSE(acc.empty());
    CHECK(fs::exists(cfg.out_dir / "report/accuracy_depth.csv"));
}

TEST_CASE("report refuses artifacts with mixed config hashes unless forced") {
    const auto& base = prepared();
    const auto out = base.out_dir.parent_path() / "mixed";
    fs::remove_all(out);
    fs::copy(base.out_dir, out, fs::copy_options::recursive);
    auto cfg = base;
    cfg.out_dir = out;
    cfg.sizes.trials_per_feature = 9;
    REQUIRE(run_command("trials", cfg) == 0);
    CHECK_THROWS_AS(run_command("report", cfg), ValidationError);
    cfg.force = true;
    CHECK(run_command("report", cfg) == 0);
}

TEST_CASE("importance against an unreachable backend names the URL") {
    auto cfg = prepared();
    cfg.backend_url = "http://127.0.0.1:1";
    cfg.backend_timeout_s = 0.5;
    try {
        run_command("importance", cfg);
        FAIL("expected BackendError");
    } catch (const BackendError& e) {
        CHECK(std::string(e.what()).find("http://127.0.0.1:1") != std::string::npos);
    }
}

TEST_CASE("stages refuse to run without their inputs") {
    auto cfg = small(world(), "empty");
    CHECK_THROWS_AS(run_command("factorize", cfg), IoError);
    CHECK_THROWS_AS(run_command("bogus", cfg), ValidationError);
    cfg.manifest.clear();
    CHECK_THROWS_AS(run_command("ingest", cfg), ValidationError);
    auto bad = small(world(), "bad");
    bad.importance_top = bad.sizes.fit_count + 1;
    CHECK_THROWS_AS(run_command("catalog", bad), ValidationError);
}

TEST_CASE("ingest imports precomputed tensors without a backend") {
    const auto& cfg = prepared();
    auto c = cfg;
    c.out_dir = cfg.out_dir.parent_path() / "imported";
    c.tensors = cfg.out_dir / "activations";
    c.backend_url = "http://127.0.0.1:1";
    REQUIRE(run_command("ingest", c) == 0);
    REQUIRE(run_command("factorize", c) == 0);
    CHECK(directory_bytes(c.out_dir / "factorizations") == directory_bytes(cfg.out_dir / "factorizations"));
}

TEST_CASE("config hash ignores selectors and tracks result-affecting fields") {
    PipelineConfig a;
    auto b = a;
    b.experiment = "II";
    b.backend_url = "http://elsewhere";
    b.serial = true;
    b.out_dir = "x";
    CHECK(a.config_hash() == b.config_hash());
    b.seed = 1;
    CHECK(a.config_hash() != b.config_hash());
    CHECK(a.config_hash().size() == 16);
    CHECK(fnv1a_hex("") == "cbf29ce484222325");
    CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
    CHECK(parse_unit("layer3.1:42").neuron == 42);
    CHECK_THROWS_AS(parse_unit("layer3"), ValidationError);
}

TEST_CASE("unit selection is seeded, distinct and spread over depth blocks") {
    PipelineConfig c;
    c.unit_count = 8;
    c.seed = 3;
    const std::vector<std::pair<std::string, std::size_t>> widths = {
        {"layer1.0", 16}, {"layer2.0", 16}, {"layer3.0", 16}, {"layer4.0", 16}};
    const auto s1 = select_units(c, widths), s2 = select_units(c, widths);
    REQUIRE(s1.experimental.size() == 8);
    CHECK(s1.catch_units.size() == c.catch_unit_count);
    std::map<int, int> per_depth;
    std::set<std::string> seen;
    for (const auto& u : s1.experimental) {
        ++per_depth[layer_depth(u.layer)];
        CHECK(seen.insert(u.layer + ":" + std::to_string(u.neuron)).second);
    }
    for (const auto& u : s1.catch_units) CHECK(seen.insert(u.layer + ":" + std::to_string(u.neuron)).second);
    for (int d = 1; d <= 4; ++d) CHECK(per_depth[d] == 2);
    for (std::size_t i = 0; i < 8; ++i) CHECK(s1.experimental[i].neuron == s2.experimental[i].neuron);

    c.units = {"layer2.0:3", "layer2.0:3"};
    CHECK_THROWS_AS(select_units(c, widths), ValidationError);
}

TEST_CASE("serve exposes the bundles over HTTP until stopped") {
    const auto& cfg = prepared();
    auto c = cfg;
    c.port = 0;
    c.log = cfg.out_dir.parent_path() / "serve_events.jsonl";
    c.main_trials = cfg.unit_count;
    int status = 0;
    PipelineHooks hooks;
    hooks.on_serving = [&](int port, std::function<void()> stop) {
        httplib::Client cli("127.0.0.1", port);
        auto res = cli.Post("/sessions", R"({"experiment":"III"})", "application/json");
        REQUIRE(res);
        status = res->status;
        const auto id = json::parse(res->body).at("session_id").get<std::string>();
        const auto view = json::parse(cli.Get("/sessions/" + id + "/trial")->body);
        const auto asset = cli.Get(view.at("left").at(0).get<std::string>());
        REQUIRE(asset);
        CHECK(asset->status == 200);
        CHECK(asset->get_header_value("Content-Type") == "image/svg+xml");
        stop();
    };
    CHECK(run_command("serve", c, hooks) == 0);
    CHECK(status == 201);
}

TEST_CASE("CLI reports errors on stderr with a nonzero exit") {
    auto [code, out] = run_cli("importance --out-dir " + prepared().out_dir.string() +
                               " --backend-url http://127.0.0.1:1 --backend-timeout 0.5 -q");
    CHECK(code != 0);
    CHECK(out.find("error:") != std::string::npos);
    CHECK(out.find("http://127.0.0.1:1") != std::string::npos);

    std::tie(code, out) = run_cli("--help");
    CHECK(code == 0);
    for (const auto& cmd : kCommands) CHECK(out.find(cmd) != std::string::npos);

    std::tie(code, out) = run_cli("frobnicate");
    CHECK(code != 0);
}

TEST_CASE("CLI reads TOML config files and flags override them") {
    fixture::TempDir dir("toml");
    std::ofstream(dir / "run.toml") << "seed = 99\nunit-count = 3\nout-dir = \"" << (dir / "out").string() << "\"\n";
    auto [code, out] = run_cli("--config " + (dir / "run.toml").string() + " --unit-count 5 factorize");
    CHECK(code != 0);
    const auto written = json::parse(fixture::slurp(dir / "out/factorize.config.json"));
    CHECK(written.at("seed") == 99);
    CHECK(written.at("unit_count") == 5);
}

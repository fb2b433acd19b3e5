#include <doctest.h>

#include <fstream>
#include <thread>

#include <httplib.h>

#include "repcmp/errors.hpp"
#include "repcmp/experiment_service.hpp"
#include "support/service_driver.hpp"

using namespace repcmp;
using nlohmann::json;

namespace {

ServiceOptions options(std::uint64_t seed = 1) {
    ServiceOptions o;
    o.seed = seed;
    o.now_ms = [] { return std::int64_t{1700000000000}; };
    return o;
}

const std::map<Experiment, TrialBundle>& bundles() {
    static const auto b = fixture::service_bundles();
    return b;
}

auto always(bool v) {
    return [v](TrialKind, std::size_t) { return v; };
}

}  // namespace

TEST_CASE("sessions hold practice, main and interleaved catch trials") {
    fixture::TempDir dir("svc_layout");
    SessionManager mgr(bundles(), dir / "events.jsonl", options());
    const auto s = mgr.create_session(Experiment::I);
    CHECK(s.session_id.size() == 32);
    CHECK(s.state == SessionState::Practice);
    REQUIRE(s.sequence.size() == kPracticeTrials + 40 + kCatchTrials);
    std::map<TrialKind, std::size_t> kinds;
    std::set<std::string> main_units;
    for (std::size_t i = 0; i < s.sequence.size(); ++i) {
        const auto& t = fixture::bundle_trial(bundles().at(Experiment::I), s.sequence[i]);
        ++kinds[t.kind];
        if (i < kPracticeTrials) CHECK(t.kind == TrialKind::Practice);
        if (t.kind == TrialKind::Standard) {
            CHECK(t.unit.condition == s.condition);
            CHECK(main_units.insert(t.unit.feature_key()).second);
        }
    }
    CHECK(kinds[TrialKind::Catch] == kCatchTrials);
    CHECK(kinds[TrialKind::Standard] == 40);
    // Catch trials never come last: each precedes a main trial.
    CHECK(fixture::bundle_trial(bundles().at(Experiment::I), s.sequence.back()).kind == TrialKind::Standard);
}

TEST_CASE("trial views hide correctness and repeat until answered") {
    fixture::TempDir dir("svc_view");
    SessionManager mgr(bundles(), dir / "events.jsonl", options());
    const auto s = mgr.create_session(Experiment::I);
    const auto v1 = mgr.next_trial(s.session_id);
    const auto v2 = mgr.next_trial(s.session_id);
    CHECK(to_json(v1) == to_json(v2));
    const auto j = to_json(v1);
    for (const auto* forbidden : {"correct_query", "kind", "unit", "correct", "catch_position", "semantic_level"})
        CHECK_FALSE(j.contains(forbidden));
    CHECK(v1.trial_id == "0");
    CHECK(v1.phase == "practice");
    CHECK(v1.left.size() == kPanelSize);
    CHECK(v1.queries[0].starts_with("/assets/"));
    CHECK(v1.total == s.sequence.size());
}

TEST_CASE("practice feedback and protocol errors") {
    fixture::TempDir dir("svc_errors");
    SessionManager mgr(bundles(), dir / "events.jsonl", options());
    const auto id = mgr.create_session(Experiment::I).session_id;
    CHECK_THROWS_AS(mgr.submit_response(id, "0", 0, 10), StateError);
    mgr.next_trial(id);
    CHECK_THROWS_AS(mgr.submit_response(id, "1", 0, 10), StateError);
    CHECK_THROWS_AS(mgr.submit_response(id, "0", 2, 10), ValidationError);
    CHECK_THROWS_AS(mgr.submit_response(id, "0", 0, -1), ValidationError);
    CHECK_THROWS_AS(mgr.next_trial("nope"), NotFoundError);
    const auto r = mgr.submit_response(id, "0", 0, 10);
    CHECK(r.feedback_correct.has_value());
    CHECK_THROWS_AS(mgr.submit_response(id, "0", 0, 10), StateError);
}

TEST_CASE("gating excludes weak practice and catch performance") {
    fixture::TempDir dir("svc_gate");
    SessionManager mgr(bundles(), dir / "events.jsonl", options());

    SUBCASE("practice below 5 of 9 stops right after practice") {
        const auto id = mgr.create_session(Experiment::I).session_id;
        CHECK(fixture::run_session(mgr, bundles(), id, [](TrialKind k, std::size_t i) {
                  return k != TrialKind::Practice || i < 4;
              }) == SessionState::Excluded);
        CHECK(mgr.session(id).cursor == kPracticeTrials);
        CHECK_THROWS_AS(mgr.next_trial(id), StateError);
    }
    SUBCASE("exactly 5 practice and 4 catch pass") {
        const auto id = mgr.create_session(Experiment::I).session_id;
        CHECK(fixture::run_session(mgr, bundles(), id, [](TrialKind k, std::size_t i) {
                  if (k == TrialKind::Practice) return i < 5;
                  if (k == TrialKind::Catch) return i < 4;
                  return false;
              }) == SessionState::Finished);
    }
    SUBCASE("catch below 4 of 5 excludes at the end") {
        const auto id = mgr.create_session(Experiment::I).session_id;
        CHECK(fixture::run_session(mgr, bundles(), id, [](TrialKind k, std::size_t i) {
                  return k != TrialKind::Catch || i < 3;
              }) == SessionState::Excluded);
        CHECK(mgr.session(id).cursor == mgr.session(id).sequence.size());
    }
}

TEST_CASE("exports filter by kind, gate and experiment") {
    fixture::TempDir dir("svc_export");
    SessionManager mgr(bundles(), dir / "events.jsonl", options());
    const auto good = mgr.create_session(Experiment::I).session_id;
    fixture::run_session(mgr, bundles(), good, always(true));
    const auto bad = mgr.create_session(Experiment::II).session_id;
    fixture::run_session(mgr, bundles(), bad, always(false));

    const auto all = mgr.export_responses();
    CHECK(all.size() == 54 + 9);
    const auto main = mgr.export_responses({.main_only = true, .passing_only = false, .experiment = std::nullopt});
    CHECK(main.size() == 40);
    for (const auto& r : main) CHECK(r.kind == TrialKind::Standard);
    CHECK(mgr.export_responses({.main_only = false, .passing_only = true, .experiment = std::nullopt}).size() == 54);
    CHECK(mgr.export_responses({.experiment = Experiment::II}).size() == 9);
    for (const auto& r : mgr.export_responses({.experiment = Experiment::II})) CHECK(r.session_excluded);
    for (const auto& r : main) CHECK(r.correct);
    CHECK(response_from_json(to_json(all.front())) == all.front());
}

TEST_CASE("conditions stay balanced per experiment") {
    fixture::TempDir dir("svc_balance");
    SessionManager mgr(bundles(), dir / "events.jsonl", options());
    for (int i = 0; i < 60; ++i) {
        mgr.create_session(i % 3 == 0 ? Experiment::II : Experiment::I);
        for (auto e : {Experiment::I, Experiment::II}) {
            const auto l = static_cast<long>(mgr.condition_count(e, Condition::Local));
            const auto d = static_cast<long>(mgr.condition_count(e, Condition::Distributed));
            CHECK(std::abs(l - d) <= 1);
        }
    }
}

TEST_CASE("replaying the event log reconstructs identical state") {
    fixture::TempDir dir("svc_replay");
    const auto log = dir / "events.jsonl";
    json before;
    {
        SessionManager mgr(bundles(), log, options());
        for (int i = 0; i < 4; ++i) {
            const auto id = mgr.create_session(Experiment::I).session_id;
            fixture::run_session(mgr, bundles(), id, [i](TrialKind, std::size_t n) { return (n + i) % 3 != 0; });
        }
        const auto open = mgr.create_session(Experiment::II).session_id;
        mgr.next_trial(open);
        mgr.submit_response(open, "0", 1, 5);
        mgr.next_trial(open);
        before = mgr.snapshot();
    }
    SessionManager replayed(bundles(), log, options());
    CHECK(replayed.snapshot() == before);

    SUBCASE("served query order survives a restart") {
        const auto all = replayed.sessions();
        const auto open = std::find_if(all.begin(), all.end(), [](const Session& s) { return s.experiment == Experiment::II; });
        REQUIRE(open != all.end());
        CHECK(open->served_swapped.contains(open->cursor));
    }
    SUBCASE("torn final line is discarded") {
        {
            std::ofstream out(log, std::ios::app);
            out << R"({"event":"response","rec)";
        }
        SessionManager torn(bundles(), log, options());
        CHECK(torn.snapshot() == before);
        // The truncated tail is gone, so new events append cleanly.
        torn.create_session(Experiment::I);
        SessionManager again(bundles(), log, options());
        CHECK(again.sessions().size() == before.at("sessions").size() + 1);
    }
    SUBCASE("corruption in the middle is fatal") {
        std::ifstream in(log);
        std::stringstream text;
        text << in.rdbuf();
        in.close();
        auto s = text.str();
        s.insert(s.find('\n') + 1, "garbage\n");
        std::ofstream(log, std::ios::trunc) << s;
        CHECK_THROWS_AS(SessionManager(bundles(), log, options()), CorruptionError);
    }
    SUBCASE("a log from a different bundle is rejected") {
        auto other = bundles();
        other.at(Experiment::I).config_hash = "different";
        CHECK_THROWS_AS(SessionManager(other, log, options()), ValidationError);
    }
}

TEST_CASE("sessions refuse bundles that are too small") {
    fixture::TempDir dir("svc_small");
    SessionManager mgr(fixture::service_bundles(10), dir / "events.jsonl", options());
    CHECK_THROWS_AS(mgr.create_session(Experiment::I), ValidationError);
    CHECK_THROWS_AS(mgr.create_session(Experiment::III), NotFoundError);
}

TEST_CASE("asset resolver maps manifest ids and never escapes its roots") {
    fixture::TempDir dir("assets");
    std::filesystem::create_directories(dir / "root/images");
    std::filesystem::create_directories(dir / "root/featureviz");
    std::ofstream(dir / "root/images/a.svg") << "<svg/>";
    std::ofstream(dir / "root/featureviz/f.svg") << "<svg/>";
    std::ofstream(dir / "secret.txt") << "secret";
    const DatasetManifest manifest({{"a", 0, "images/a.svg", "val"}});
    AssetResolver r{&manifest, dir / "root", {dir / "root"}};
    CHECK(r.resolve("a"));
    CHECK(r.resolve("featureviz/f.svg"));
    CHECK_FALSE(r.resolve("../secret.txt"));
    CHECK_FALSE(r.resolve("featureviz/../../secret.txt"));
    CHECK_FALSE(r.resolve((dir / "secret.txt").string()));
    CHECK_FALSE(r.resolve("missing.svg"));
}

TEST_CASE("HTTP API serves the session protocol") {
    fixture::TempDir dir("http");
    std::filesystem::create_directories(dir / "practice");
    std::ofstream(dir / "practice/p0_0") << "<svg/>";
    SessionManager mgr(bundles(), dir / "events.jsonl", options());
    AssetResolver assets{nullptr, dir.path(), {dir.path()}};
    ExperimentServer server(mgr, assets, {.host = "127.0.0.1", .port = 0, .static_dir = std::nullopt});
    const int port = server.bind();
    REQUIRE(port > 0);
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);

    auto res = cli.Get("/healthz");
    REQUIRE(res);
    CHECK(res->status == 200);

    res = cli.Post("/sessions", R"({"experiment":"I"})", "application/json");
    REQUIRE(res);
    CHECK(res->status == 201);
    const auto id = json::parse(res->body).at("session_id").get<std::string>();

    res = cli.Get("/sessions/" + id + "/trial");
    REQUIRE(res);
    CHECK(res->status == 200);
    const auto view = json::parse(res->body);
    CHECK(view.at("phase") == "practice");
    CHECK_FALSE(view.contains("correct_query"));

    res = cli.Post("/sessions/" + id + "/response", R"({"trial_id":"5","choice":0,"latency_ms":3})", "application/json");
    REQUIRE(res);
    CHECK(res->status == 409);
    CHECK(json::parse(res->body).at("code") == "conflict");

    res = cli.Post("/sessions/" + id + "/response", R"({"trial_id":"0","choice":7,"latency_ms":3})", "application/json");
    CHECK(res->status == 400);

    res = cli.Post("/sessions/" + id + "/response", R"({"trial_id":"0","choice":1,"latency_ms":3})", "application/json");
    REQUIRE(res);
    CHECK(res->status == 200);
    const auto reply = json::parse(res->body);
    CHECK(reply.at("status") == "practice");
    CHECK(reply.at("feedback").contains("correct"));

    CHECK(cli.Get("/sessions/unknown/trial")->status == 404);
    CHECK(cli.Post("/sessions", R"({"experiment":"IX"})", "application/json")->status == 400);
    CHECK(cli.Post("/sessions", "{", "application/json")->status == 400);

    res = cli.Get("/export?main_only=0&experiment=I");
    REQUIRE(res);
    CHECK(json::parse(res->body).size() == 1);
    CHECK(json::parse(cli.Get("/export?main_only=1")->body).empty());

    res = cli.Get("/assets/practice%2Fp0_0");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->body == "<svg/>");
    CHECK(cli.Get("/assets/..%2F..%2Fetc%2Fpasswd")->status == 404);

    server.stop();
    t.join();
}

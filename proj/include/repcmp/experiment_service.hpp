#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "repcmp/response_record.hpp"
#include "repcmp/trial_factory.hpp"

namespace repcmp {

enum class SessionState { Practice, Main, Finished, Excluded };

std::string to_string(SessionState s);
SessionState session_state_from_string(const std::string& s);

struct Session {
    std::string session_id;
    Experiment experiment = Experiment::I;
    Condition condition = Condition::Local;
    SessionState state = SessionState::Practice;
    /// Bundle trial ids: practice first, then main trials with catch trials interleaved.
    std::vector<std::string> sequence;
    std::size_t practice_count = 0;
    std::size_t cursor = 0;
    std::size_t practice_correct = 0;
    std::size_t catch_correct = 0;
    std::int64_t created_at_ms = 0;
    std::uint64_t seed = 0;
    /// Query order decided when the trial at a cursor position was first served.
    std::map<std::size_t, bool> served_swapped;

    friend bool operator==(const Session&, const Session&) = default;
};

nlohmann::json to_json(const Session& s);
Session session_from_json(const nlohmann::json& j);

/// What the participant's browser receives. Carries no correctness, trial
/// kind, unit or activation information.
struct TrialView {
    std::string trial_id;
    std::string phase;
    std::size_t index = 0;
    std::size_t total = 0;
    std::vector<std::string> left;
    std::vector<std::string> right;
    std::array<std::string, 2> queries;
};

nlohmann::json to_json(const TrialView& v);

struct SubmitResult {
    SessionState state = SessionState::Practice;
    /// Only set for practice trials.
    std::optional<bool> feedback_correct;
};

struct ExportFilter {
    /// Standard trials only (drops practice and catch).
    bool main_only = false;
    /// Drop sessions that failed a gate.
    bool passing_only = false;
    std::optional<Experiment> experiment;
};

struct ServiceOptions {
    std::uint64_t seed = 0;
    std::size_t main_trials = 40;
    std::size_t catch_trials = kCatchTrials;
    std::size_t practice_pass = 5;
    std::size_t catch_pass = 4;
    /// Wall clock in milliseconds; injectable for tests.
    std::function<std::int64_t()> now_ms;
};

/// Session bookkeeping behind the HTTP API. Every state change is appended
/// to a JSON-lines event log before it becomes visible; constructing a
/// SessionManager on an existing log replays it.
class SessionManager {
public:
    SessionManager(std::map<Experiment, TrialBundle> bundles, std::filesystem::path log_path,
                   ServiceOptions opts = {});

    Session create_session(Experiment experiment);
    TrialView next_trial(const std::string& session_id);
    SubmitResult submit_response(const std::string& session_id, const std::string& trial_id, int choice,
                                 double latency_ms);
    std::vector<ResponseRecord> export_responses(const ExportFilter& filter = {}) const;

    Session session(const std::string& session_id) const;
    std::vector<Session> sessions() const;
    /// Full state (sessions and records) for replay-equality checks.
    nlohmann::json snapshot() const;

    std::size_t condition_count(Experiment e, Condition c) const;

private:
    void replay();
    void append(const nlohmann::json& event);
    void apply(const nlohmann::json& event);
    Session& find(const std::string& session_id);
    const Session& find(const std::string& session_id) const;
    const Trial& trial(Experiment e, const std::string& trial_id) const;
    std::string view_url(const std::string& ref) const;

    std::map<Experiment, TrialBundle> bundles_;
    std::map<Experiment, std::map<std::string, const Trial*>> trial_index_;
    std::filesystem::path log_path_;
    ServiceOptions opts_;
    std::ofstream log_;
    std::uint64_t session_counter_ = 0;
    std::map<std::string, Session> sessions_;
    std::vector<ResponseRecord> records_;
    mutable std::mutex mutex_;
};

/// Maps an asset reference to a file: manifest image_ids through their
/// source_path (relative paths against image_root), anything else as a
/// relative path under one of search_roots, never escaping it.
struct AssetResolver {
    const DatasetManifest* manifest = nullptr;
    std::filesystem::path image_root;
    std::vector<std::filesystem::path> search_roots;
    std::optional<std::filesystem::path> resolve(const std::string& ref) const;
};

struct ServerOptions {
    std::string host = "127.0.0.1";
    /// 0 binds an ephemeral port.
    int port = 8080;
    /// Static participant UI, mounted at "/" when set.
    std::optional<std::filesystem::path> static_dir;
};

/// HTTP front end:
///   POST /sessions {experiment}               -> {session_id, state}
///   GET  /sessions/{id}/trial                 -> TrialView
///   POST /sessions/{id}/response {trial_id, choice, latency_ms} -> {status, feedback?}
///   GET  /export?main_only=&passing_only=&experiment=
///   GET  /assets/{ref}
///   GET  /healthz
/// Errors are {code, message} with 400/404/409/500 statuses.
class ExperimentServer {
public:
    ExperimentServer(SessionManager& manager, AssetResolver assets, ServerOptions opts = {});
    ~ExperimentServer();

    /// Binds to opts.port (0 picks an ephemeral port). Returns the bound port, or -1.
    int bind();
    /// Serves on the bound socket until stop().
    bool listen_after_bind();
    void stop();
    void wait_until_ready() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace repcmp

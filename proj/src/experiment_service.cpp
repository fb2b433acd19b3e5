#include "repcmp/experiment_service.hpp"

#include <algorithm>
#include <chrono>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "repcmp/errors.hpp"
#include "repcmp/rng.hpp"

namespace repcmp {
namespace {

constexpr const char* kModule = "experiment-service";

std::int64_t system_now_ms() {
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string percent_encode(const std::string& s) {
    static constexpr char kHex[] = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back('%');
            out.push_back(kHex[c >> 4]);
            out.push_back(kHex[c & 15]);
        }
    }
    return out;
}

}  // namespace

std::string to_string(SessionState s) {
    switch (s) {
        case SessionState::Practice: return "practice";
        case SessionState::Main: return "main";
        case SessionState::Finished: return "finished";
        case SessionState::Excluded: return "excluded";
    }
    return "?";
}

SessionState session_state_from_string(const std::string& s) {
    if (s == "practice") return SessionState::Practice;
    if (s == "main") return SessionState::Main;
    if (s == "finished") return SessionState::Finished;
    if (s == "excluded") return SessionState::Excluded;
    throw ValidationError(kModule, "unknown session state '" + s + "'");
}

nlohmann::json to_json(const Session& s) {
    nlohmann::json served = nlohmann::json::array();
    for (const auto& [cursor, swapped] : s.served_swapped) served.push_back({cursor, swapped});
    return {{"session_id", s.session_id},
            {"experiment", to_string(s.experiment)},
            {"condition", to_string(s.condition)},
            {"state", to_string(s.state)},
            {"sequence", s.sequence},
            {"practice_count", s.practice_count},
            {"cursor", s.cursor},
            {"practice_correct", s.practice_correct},
            {"catch_correct", s.catch_correct},
            {"created_at_ms", s.created_at_ms},
            {"seed", s.seed},
            {"served", served}};
}

Session session_from_json(const nlohmann::json& j) {
    Session s;
    try {
        s.session_id = j.at("session_id").get<std::string>();
        s.experiment = experiment_from_string(j.at("experiment").get<std::string>());
        s.condition = condition_from_string(j.at("condition").get<std::string>());
        s.state = session_state_from_string(j.at("state").get<std::string>());
        s.sequence = j.at("sequence").get<std::vector<std::string>>();
        s.practice_count = j.at("practice_count").get<std::size_t>();
        s.cursor = j.at("cursor").get<std::size_t>();
        s.practice_correct = j.at("practice_correct").get<std::size_t>();
        s.catch_correct = j.at("catch_correct").get<std::size_t>();
        s.created_at_ms = j.at("created_at_ms").get<std::int64_t>();
        s.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& e : j.value("served", nlohmann::json::array()))
            s.served_swapped[e.at(0).get<std::size_t>()] = e.at(1).get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(kModule, std::string("malformed session: ") + e.what());
    }
    return s;
}

nlohmann::json to_json(const TrialView& v) {
    return {{"trial_id", v.trial_id}, {"phase", v.phase}, {"index", v.index},     {"total", v.total},
            {"left", v.left},         {"right", v.right}, {"queries", v.queries}};
}

SessionManager::SessionManager(std::map<Experiment, TrialBundle> bundles, std::filesystem::path log_path,
                               ServiceOptions opts)
    : bundles_(std::move(bundles)), log_path_(std::move(log_path)), opts_(std::move(opts)) {
    if (!opts_.now_ms) opts_.now_ms = system_now_ms;
    for (const auto& [exp, bundle] : bundles_) {
        auto& index = trial_index_[exp];
        for (const auto* group : {&bundle.trials, &bundle.practice, &bundle.catch_trials})
            for (const auto& t : *group)
                if (!index.emplace(t.trial_id, &t).second)
                    throw ValidationError(kModule, "duplicate trial id " + t.trial_id);
    }
    replay();
    log_.open(log_path_, std::ios::app);
    if (!log_) throw IoError(kModule, "cannot open event log " + log_path_.string());
}

void SessionManager::replay() {
    std::ifstream in(log_path_, std::ios::binary);
    if (!in) return;
    std::string line;
    std::uintmax_t good_bytes = 0;
    std::size_t line_no = 0;
    bool torn_tail = false;
    while (std::getline(in, line)) {
        ++line_no;
        const bool terminated = !in.eof();
        if (line.empty()) {
            good_bytes += 1;
            continue;
        }
        nlohmann::json event;
        try {
            event = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error&) {
            if (!terminated) {
                torn_tail = true;
                break;
            }
            throw CorruptionError(kModule, log_path_.string() + ":" + std::to_string(line_no) + " is not JSON");
        }
        if (!terminated) {
            // A complete event without its newline: the writer died before flushing it.
            torn_tail = true;
            break;
        }
        apply(event);
        good_bytes += line.size() + 1;
    }
    in.close();
    if (torn_tail) std::filesystem::resize_file(log_path_, good_bytes);
}

void SessionManager::append(const nlohmann::json& event) {
    log_ << event.dump() << '\n';
    log_.flush();
    if (!log_) throw IoError(kModule, "event log write failed: " + log_path_.string());
}

void SessionManager::apply(const nlohmann::json& event) {
    const auto type = event.at("event").get<std::string>();
    if (type == "session_created") {
        auto s = session_from_json(event.at("session"));
        auto it = bundles_.find(s.experiment);
        if (it == bundles_.end())
            throw ValidationError(kModule, "log references experiment " + to_string(s.experiment) + " with no bundle");
        if (event.value("config_hash", std::string{}) != it->second.config_hash)
            throw ValidationError(kModule, "log session " + s.session_id + " was created against a different bundle");
        session_counter_ = std::max(session_counter_, event.at("counter").get<std::uint64_t>() + 1);
        sessions_[s.session_id] = std::move(s);
    } else if (type == "trial_served") {
        auto& s = find(event.at("session_id").get<std::string>());
        s.served_swapped[event.at("cursor").get<std::size_t>()] = event.at("swapped").get<bool>();
    } else if (type == "response") {
        auto record = response_from_json(event.at("record"));
        auto& s = find(record.session_id);
        if (record.kind == TrialKind::Practice && record.correct) ++s.practice_correct;
        if (record.kind == TrialKind::Catch && record.correct) ++s.catch_correct;
        ++s.cursor;
        if (s.state == SessionState::Practice && s.cursor == s.practice_count)
            s.state = s.practice_correct >= opts_.practice_pass ? SessionState::Main : SessionState::Excluded;
        if (s.state == SessionState::Main && s.cursor == s.sequence.size())
            s.state = s.catch_correct >= opts_.catch_pass ? SessionState::Finished : SessionState::Excluded;
        records_.push_back(std::move(record));
    } else {
        throw CorruptionError(kModule, "unknown event '" + type + "'");
    }
}

Session& SessionManager::find(const std::string& session_id) {
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) throw NotFoundError(kModule, "unknown session '" + session_id + "'");
    return it->second;
}

const Session& SessionManager::find(const std::string& session_id) const {
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) throw NotFoundError(kModule, "unknown session '" + session_id + "'");
    return it->second;
}

const Trial& SessionManager::trial(Experiment e, const std::string& trial_id) const {
    const auto& index = trial_index_.at(e);
    auto it = index.find(trial_id);
    if (it == index.end()) throw ValidationError(kModule, "unknown trial '" + trial_id + "'");
    return *it->second;
}

std::string SessionManager::view_url(const std::string& ref) const {
    return "/assets/" + percent_encode(ref);
}

std::size_t SessionManager::condition_count(Experiment e, Condition c) const {
    std::lock_guard lock(mutex_);
    return static_cast<std::size_t>(std::count_if(sessions_.begin(), sessions_.end(), [&](const auto& kv) {
        return kv.second.experiment == e && kv.second.condition == c;
    }));
}

Session SessionManager::create_session(Experiment experiment) {
    std::lock_guard lock(mutex_);
    auto it = bundles_.find(experiment);
    if (it == bundles_.end()) throw NotFoundError(kModule, "no bundle loaded for experiment " + to_string(experiment));
    const auto& bundle = it->second;

    const std::uint64_t counter = session_counter_;
    Session s;
    s.seed = derive_seed(opts_.seed, counter);
    Rng rng(s.seed);
    s.session_id = hex64(rng.next_u64()) + hex64(rng.next_u64());
    s.experiment = experiment;
    s.created_at_ms = opts_.now_ms();

    std::size_t n_local = 0, n_distributed = 0;
    for (const auto& [id, other] : sessions_) {
        if (other.experiment != experiment) continue;
        (other.condition == Condition::Local ? n_local : n_distributed)++;
    }
    if (n_local != n_distributed)
        s.condition = n_local < n_distributed ? Condition::Local : Condition::Distributed;
    else
        s.condition = rng.uniform_index(2) == 0 ? Condition::Local : Condition::Distributed;

    std::map<std::string, std::vector<const Trial*>> by_unit;
    for (const auto& t : bundle.trials)
        if (t.unit.condition == s.condition) by_unit[t.unit.feature_key()].push_back(&t);
    if (by_unit.size() < opts_.main_trials)
        throw ValidationError(kModule, "bundle has " + std::to_string(by_unit.size()) + " " + to_string(s.condition) +
                                           " units, sessions need " + std::to_string(opts_.main_trials));
    if (bundle.catch_trials.size() < opts_.catch_trials)
        throw ValidationError(kModule, "bundle has " + std::to_string(bundle.catch_trials.size()) +
                                           " catch trials, sessions need " + std::to_string(opts_.catch_trials));

    std::vector<const std::vector<const Trial*>*> units;
    for (const auto& [key, trials] : by_unit) units.push_back(&trials);
    std::vector<std::string> main;
    for (auto u : rng.sample_without_replacement(units.size(), opts_.main_trials)) {
        const auto& trials = *units[u];
        main.push_back(trials[rng.uniform_index(trials.size())]->trial_id);
    }
    auto catch_order = rng.sample_without_replacement(bundle.catch_trials.size(), opts_.catch_trials);
    auto positions = rng.sample_without_replacement(opts_.main_trials, opts_.catch_trials);
    std::vector<bool> has_catch(opts_.main_trials, false);
    for (auto p : positions) has_catch[p] = true;

    for (const auto& t : bundle.practice) s.sequence.push_back(t.trial_id);
    s.practice_count = bundle.practice.size();
    std::size_t next_catch = 0;
    for (std::size_t i = 0; i < main.size(); ++i) {
        if (has_catch[i]) s.sequence.push_back(bundle.catch_trials[catch_order[next_catch++]].trial_id);
        s.sequence.push_back(main[i]);
    }
    s.state = s.practice_count ? SessionState::Practice : SessionState::Main;

    const nlohmann::json event = {
        {"event", "session_created"}, {"counter", counter}, {"config_hash", bundle.config_hash}, {"session", to_json(s)}};
    append(event);
    apply(event);
    return sessions_.at(s.session_id);
}

TrialView SessionManager::next_trial(const std::string& session_id) {
    std::lock_guard lock(mutex_);
    const auto& s = find(session_id);
    if (s.state == SessionState::Finished || s.state == SessionState::Excluded)
        throw StateError(kModule, "session " + session_id + " is " + to_string(s.state));

    bool swapped = false;
    if (auto it = s.served_swapped.find(s.cursor); it != s.served_swapped.end()) {
        swapped = it->second;
    } else {
        swapped = Rng(derive_seed(s.seed, s.cursor)).uniform_index(2) == 1;
        const nlohmann::json event = {
            {"event", "trial_served"}, {"session_id", session_id}, {"cursor", s.cursor}, {"swapped", swapped}};
        append(event);
        apply(event);
    }

    const auto& t = trial(s.experiment, s.sequence[s.cursor]);
    TrialView v;
    v.trial_id = std::to_string(s.cursor);
    v.phase = s.cursor < s.practice_count ? "practice" : "main";
    v.index = s.cursor;
    v.total = s.sequence.size();
    for (const auto& r : t.left_refs) v.left.push_back(view_url(r));
    for (const auto& r : t.right_refs) v.right.push_back(view_url(r));
    v.queries = {view_url(t.queries[swapped ? 1 : 0]), view_url(t.queries[swapped ? 0 : 1])};
    return v;
}

SubmitResult SessionManager::submit_response(const std::string& session_id, const std::string& trial_id, int choice,
                                             double latency_ms) {
    std::lock_guard lock(mutex_);
    const auto& s = find(session_id);
    if (s.state == SessionState::Finished || s.state == SessionState::Excluded)
        throw StateError(kModule, "session " + session_id + " is " + to_string(s.state));
    if (trial_id != std::to_string(s.cursor))
        throw StateError(kModule, "expected a response to trial " + std::to_string(s.cursor) + ", got '" + trial_id + "'");
    auto served = s.served_swapped.find(s.cursor);
    if (served == s.served_swapped.end())
        throw StateError(kModule, "trial " + trial_id + " has not been served");
    if (choice != 0 && choice != 1) throw ValidationError(kModule, "choice must be 0 or 1");
    if (!std::isfinite(latency_ms) || latency_ms < 0) throw ValidationError(kModule, "latency_ms must be >= 0");

    const auto& t = trial(s.experiment, s.sequence[s.cursor]);
    const bool swapped = served->second;
    const int stored = swapped ? 1 - choice : choice;

    ResponseRecord r;
    r.session_id = session_id;
    r.trial_id = t.trial_id;
    r.unit = t.unit;
    r.experiment = s.experiment;
    r.condition = s.condition;
    r.kind = t.kind;
    r.chosen_query = choice;
    r.correct = stored == t.correct_query;
    r.response_ms = latency_ms;
    r.served_swapped = swapped;
    r.timestamp_ms = opts_.now_ms();

    const nlohmann::json event = {{"event", "response"}, {"record", to_json(r)}};
    append(event);
    apply(event);

    SubmitResult result;
    result.state = sessions_.at(session_id).state;
    if (t.kind == TrialKind::Practice) result.feedback_correct = r.correct;
    return result;
}

std::vector<ResponseRecord> SessionManager::export_responses(const ExportFilter& filter) const {
    std::lock_guard lock(mutex_);
    std::vector<ResponseRecord> out;
    for (auto r : records_) {
        r.session_excluded = sessions_.at(r.session_id).state == SessionState::Excluded;
        if (filter.main_only && r.kind != TrialKind::Standard) continue;
        if (filter.passing_only && r.session_excluded) continue;
        if (filter.experiment && r.experiment != *filter.experiment) continue;
        out.push_back(std::move(r));
    }
    return out;
}

Session SessionManager::session(const std::string& session_id) const {
    std::lock_guard lock(mutex_);
    return find(session_id);
}

std::vector<Session> SessionManager::sessions() const {
    std::lock_guard lock(mutex_);
    std::vector<Session> out;
    for (const auto& [id, s] : sessions_) out.push_back(s);
    return out;
}

nlohmann::json SessionManager::snapshot() const {
    std::lock_guard lock(mutex_);
    nlohmann::json sessions = nlohmann::json::array();
    for (const auto& [id, s] : sessions_) sessions.push_back(to_json(s));
    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : records_) records.push_back(to_json(r));
    return {{"session_counter", session_counter_}, {"sessions", sessions}, {"records", records}};
}

}  // namespace repcmp

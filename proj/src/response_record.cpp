#include "repcmp/response_record.hpp"

#include "repcmp/errors.hpp"

namespace repcmp {

nlohmann::json to_json(const ResponseRecord& r) {
    return {{"session_id", r.session_id},
            {"trial_id", r.trial_id},
            {"unit", to_json(r.unit)},
            {"experiment", to_string(r.experiment)},
            {"condition", to_string(r.condition)},
            {"kind", to_string(r.kind)},
            {"chosen_query", r.chosen_query},
            {"correct", r.correct},
            {"response_ms", r.response_ms},
            {"served_swapped", r.served_swapped},
            {"timestamp_ms", r.timestamp_ms},
            {"session_excluded", r.session_excluded}};
}

ResponseRecord response_from_json(const nlohmann::json& j) {
    ResponseRecord r;
    try {
        r.session_id = j.at("session_id").get<std::string>();
        r.trial_id = j.at("trial_id").get<std::string>();
        r.unit = feature_spec_from_json(j.at("unit"));
        r.experiment = experiment_from_string(j.at("experiment").get<std::string>());
        r.condition = condition_from_string(j.at("condition").get<std::string>());
        r.kind = trial_kind_from_string(j.at("kind").get<std::string>());
        r.chosen_query = j.at("chosen_query").get<int>();
        r.correct = j.at("correct").get<bool>();
        r.response_ms = j.at("response_ms").get<double>();
        r.served_swapped = j.value("served_swapped", false);
        r.timestamp_ms = j.value("timestamp_ms", std::int64_t{0});
        r.session_excluded = j.value("session_excluded", false);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("experiment-service", std::string("malformed response record: ") + e.what());
    }
    return r;
}

}  // namespace repcmp

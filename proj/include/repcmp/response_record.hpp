#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "repcmp/feature_catalog.hpp"
#include "repcmp/trial_factory.hpp"

namespace repcmp {

/// One participant answer. `chosen_query` indexes the served (on-screen)
/// order; `served_swapped` records whether that order is the reverse of the
/// stored one.
struct ResponseRecord {
    std::string session_id;
    std::string trial_id;
    FeatureSpec unit;
    Experiment experiment = Experiment::I;
    Condition condition = Condition::Local;
    TrialKind kind = TrialKind::Standard;
    int chosen_query = 0;
    bool correct = false;
    double response_ms = 0.0;
    bool served_swapped = false;
    std::int64_t timestamp_ms = 0;
    /// Filled in on export from the session's final state.
    bool session_excluded = false;

    friend bool operator==(const ResponseRecord&, const ResponseRecord&) = default;
};

nlohmann::json to_json(const ResponseRecord& r);
ResponseRecord response_from_json(const nlohmann::json& j);

}  // namespace repcmp

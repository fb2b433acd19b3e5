#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "repcmp/response_record.hpp"

namespace repcmp {

struct MannWhitneyResult {
    /// U for the first sample: #{x > y} + 0.5 #{x == y}.
    double u_statistic = 0.0;
    /// Normal approximation with tie-corrected variance and continuity correction.
    double z_score = 0.0;
    /// Two-sided p from the normal approximation.
    double p_value = 1.0;
    std::size_t n1 = 0;
    std::size_t n2 = 0;
    /// Two-sided permutation p-value, conditional on the observed ties. Only
    /// computed for small samples (see MannWhitneyOptions).
    std::optional<double> exact_p_value;
};

struct MannWhitneyOptions {
    /// Exact permutation p is computed when n1 + n2 <= this bound.
    std::size_t exact_max_total = 60;
};

/// Throws ValidationError on empty samples or non-finite values.
MannWhitneyResult mann_whitney_u(std::span<const double> xs, std::span<const double> ys,
                                 const MannWhitneyOptions& opts = {});

/// Average ranks (1-based) of the pooled values; tied values share the mean rank.
std::vector<double> average_ranks(std::span<const double> values);

struct WilsonInterval {
    double low = 0.0;
    double high = 0.0;
};

inline constexpr double kZ95 = 1.959963984540054;

WilsonInterval wilson_interval(std::size_t successes, std::size_t n, double z = kZ95);

struct AccuracyGrouping {
    bool by_experiment = true;
    bool by_condition = true;
    bool by_depth = true;
};

struct AccuracySummary {
    std::optional<Experiment> experiment;
    std::optional<Condition> condition;
    std::optional<int> depth_block;
    double proportion_correct = 0.0;
    double ci95_low = 0.0;
    double ci95_high = 0.0;
    std::size_t n_responses = 0;
    /// False when the group is empty; proportion and interval are then meaningless.
    bool defined = true;
};

/// Per-group proportion correct with Wilson 95% intervals, sorted by group
/// key. Input must already exclude practice/catch trials and gated-out
/// sessions; a record of another kind raises ValidationError. Empty input
/// yields one undefined summary.
std::vector<AccuracySummary> accuracy_summary(std::span<const ResponseRecord> responses,
                                              const AccuracyGrouping& grouping = {});

nlohmann::json to_json(const MannWhitneyResult& r);
nlohmann::json to_json(const AccuracySummary& s);

}  // namespace repcmp

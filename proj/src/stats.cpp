#include "repcmp/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <tuple>

#include "repcmp/errors.hpp"

namespace repcmp {
namespace {

constexpr const char* kModule = "importance-stats";

// Two-sided exact p by dynamic programming over subsets of the doubled ranks.
// Doubled average ranks are integers, so comparisons are exact.
double exact_two_sided_p(const std::vector<double>& ranks, std::size_t n1) {
    const std::size_t n = ranks.size();
    std::vector<std::int64_t> r2(n);
    std::int64_t max_sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        r2[i] = std::llround(2.0 * ranks[i]);
        max_sum += r2[i];
    }
    // ways[j][s]: subsets of size j with doubled rank sum s.
    std::vector<std::vector<std::uint64_t>> ways(n1 + 1, std::vector<std::uint64_t>(max_sum + 1, 0));
    ways[0][0] = 1;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = std::min(i + 1, n1); j >= 1; --j) {
            auto& dst = ways[j];
            const auto& src = ways[j - 1];
            for (std::int64_t s = max_sum; s >= r2[i]; --s) dst[s] += src[s - r2[i]];
        }
    }
    std::int64_t observed = 0;
    for (std::size_t i = 0; i < n1; ++i) observed += r2[i];
    const auto expected2 = static_cast<std::int64_t>(n1 * (n + 1));  // 2 * n1 (N+1) / 2
    const auto dev_obs = std::llabs(observed - expected2);
    std::uint64_t extreme = 0, total = 0;
    for (std::int64_t s = 0; s <= max_sum; ++s) {
        const auto w = ways[n1][s];
        total += w;
        if (std::llabs(s - expected2) >= dev_obs) extreme += w;
    }
    return static_cast<double>(extreme) / static_cast<double>(total);
}

}  // namespace

std::vector<double> average_ranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i + 1;
        while (j < n && values[order[j]] == values[order[i]]) ++j;
        const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t t = i; t < j; ++t) ranks[order[t]] = avg;
        i = j;
    }
    return ranks;
}

MannWhitneyResult mann_whitney_u(std::span<const double> xs, std::span<const double> ys,
                                 const MannWhitneyOptions& opts) {
    if (xs.empty() || ys.empty()) throw ValidationError(kModule, "Mann-Whitney U needs two non-empty samples");
    std::vector<double> pooled(xs.begin(), xs.end());
    pooled.insert(pooled.end(), ys.begin(), ys.end());
    for (double v : pooled)
        if (!std::isfinite(v)) throw ValidationError(kModule, "Mann-Whitney U input has a non-finite value");

    const auto n1 = static_cast<double>(xs.size());
    const auto n2 = static_cast<double>(ys.size());
    const double n = n1 + n2;
    const auto ranks = average_ranks(pooled);

    double rank_sum = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) rank_sum += ranks[i];

    MannWhitneyResult r;
    r.n1 = xs.size();
    r.n2 = ys.size();
    r.u_statistic = rank_sum - n1 * (n1 + 1.0) / 2.0;

    // Tie term: sum over tie groups of (t^3 - t).
    std::map<double, std::size_t> groups;
    for (double v : pooled) ++groups[v];
    double tie_term = 0.0;
    for (const auto& [value, t] : groups) {
        const auto td = static_cast<double>(t);
        tie_term += td * td * td - td;
    }
    const double mean = n1 * n2 / 2.0;
    const double variance = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    const double diff = r.u_statistic - mean;
    if (variance > 0.0) {
        const double corrected = std::max(std::abs(diff) - 0.5, 0.0);
        r.z_score = std::copysign(corrected, diff) / std::sqrt(variance);
        if (corrected == 0.0) r.z_score = 0.0;
        r.p_value = std::min(1.0, std::erfc(std::abs(r.z_score) / std::sqrt(2.0)));
    } else {
        r.z_score = 0.0;
        r.p_value = 1.0;
    }

    if (xs.size() + ys.size() <= opts.exact_max_total) r.exact_p_value = exact_two_sided_p(ranks, xs.size());
    return r;
}

WilsonInterval wilson_interval(std::size_t successes, std::size_t n, double z) {
    if (n == 0) return {0.0, 1.0};
    const double nn = static_cast<double>(n);
    const double p = static_cast<double>(successes) / nn;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / nn;
    const double center = (p + z2 / (2.0 * nn)) / denom;
    const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
    WilsonInterval ci{std::max(0.0, center - half), std::min(1.0, center + half)};
    // The bounds are exactly 0 / 1 at the extremes; pin them against rounding.
    if (successes == 0) ci.low = 0.0;
    if (successes == n) ci.high = 1.0;
    return ci;
}

std::vector<AccuracySummary> accuracy_summary(std::span<const ResponseRecord> responses,
                                              const AccuracyGrouping& grouping) {
    using Key = std::tuple<int, int, int>;
    std::map<Key, std::pair<std::size_t, std::size_t>> counts;  // correct, total
    for (const auto& r : responses) {
        if (r.kind != TrialKind::Standard)
            throw ValidationError(kModule, "accuracy_summary received a " + to_string(r.kind) + " response");
        const Key key{grouping.by_experiment ? static_cast<int>(r.experiment) : -1,
                      grouping.by_condition ? static_cast<int>(r.condition) : -1,
                      grouping.by_depth ? layer_depth(r.unit.layer) : -1};
        auto& [correct, total] = counts[key];
        correct += r.correct ? 1 : 0;
        ++total;
    }

    std::vector<AccuracySummary> out;
    if (counts.empty()) {
        AccuracySummary s;
        s.defined = false;
        s.ci95_high = 1.0;
        out.push_back(s);
        return out;
    }
    for (const auto& [key, c] : counts) {
        const auto& [e, cond, depth] = key;
        AccuracySummary s;
        if (e >= 0) s.experiment = static_cast<Experiment>(e);
        if (cond >= 0) s.condition = static_cast<Condition>(cond);
        if (depth >= 0) s.depth_block = depth;
        s.n_responses = c.second;
        s.proportion_correct = static_cast<double>(c.first) / static_cast<double>(c.second);
        const auto ci = wilson_interval(c.first, c.second);
        s.ci95_low = ci.low;
        s.ci95_high = ci.high;
        out.push_back(s);
    }
    return out;
}

nlohmann::json to_json(const MannWhitneyResult& r) {
    nlohmann::json j = {{"u", r.u_statistic}, {"z", r.z_score}, {"p", r.p_value}, {"n1", r.n1}, {"n2", r.n2}};
    if (r.exact_p_value) j["p_exact"] = *r.exact_p_value;
    return j;
}

nlohmann::json to_json(const AccuracySummary& s) {
    nlohmann::json j = {{"n_responses", s.n_responses}, {"defined", s.defined}};
    if (s.experiment) j["experiment"] = to_string(*s.experiment);
    if (s.condition) j["condition"] = to_string(*s.condition);
    if (s.depth_block) j["depth_block"] = *s.depth_block;
    if (s.defined) {
        j["proportion_correct"] = s.proportion_correct;
        j["ci95_low"] = s.ci95_low;
        j["ci95_high"] = s.ci95_high;
    }
    return j;
}

}  // namespace repcmp

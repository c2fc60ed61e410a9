// Chain-level scoring: mAP and BLEU_1..4 on event-type and user-group
// tokens, DTW on delays, MAE on event counts.
//
// Every metric sees pairs after the empty-chain convention: an empty side
// becomes a single placeholder event (type index 12, group -2, delay 0).

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gitevolve/core_types.hpp"
#include "gitevolve/error.hpp"
#include "gitevolve/io_util.hpp"
#include "gitevolve/parallel.hpp"
#include "gitevolve/simulator.hpp"

namespace gitevolve {

enum class Task { EventType, UserGroup };

/// One repo's predicted and ground-truth chains, both restricted to the
/// simulation window. SOC never appears.
struct EvalPair {
    std::string repo_id;
    SimulatedChain predicted;
    SimulatedChain truth;
};

inline Event placeholder_event() { return {EventType::NoEventInSimPeriod, kPlaceholderGroup, 0, 0.0}; }

inline EvalPair apply_noevent_convention(EvalPair pair) {
    if (pair.truth.events.empty()) pair.truth.push(placeholder_event(), 1.0, 1.0);
    if (pair.predicted.events.empty()) pair.predicted.push(placeholder_event(), 1.0, 1.0);
    return pair;
}

inline std::vector<int> tokens(const std::vector<Event>& events, Task task) {
    std::vector<int> out;
    out.reserve(events.size());
    for (const Event& e : events) out.push_back(task == Task::EventType ? type_index(e.type) : e.group);
    return out;
}

inline std::vector<double> delays(const std::vector<Event>& events) {
    std::vector<double> out;
    out.reserve(events.size());
    for (const Event& e : events) out.push_back(e.delay_hours);
    return out;
}

// ---------------------------------------------------------------------------
// BLEU

namespace detail {

inline std::map<std::vector<int>, int> ngram_counts(const std::vector<int>& seq, std::size_t n) {
    std::map<std::vector<int>, int> counts;
    for (std::size_t i = 0; i + n <= seq.size(); ++i) ++counts[std::vector<int>(seq.begin() + i, seq.begin() + i + n)];
    return counts;
}

}  // namespace detail

inline bool bleu_eligible(std::size_t cand_len, std::size_t ref_len, int k) {
    return cand_len >= static_cast<std::size_t>(k) && ref_len >= static_cast<std::size_t>(k);
}

/// Sentence BLEU of order k without smoothing. Requires both sides to hold
/// at least k tokens.
inline double bleu_k(const std::vector<int>& candidate, const std::vector<int>& reference, int k) {
    if (k < 1) throw ValidationError("BLEU order k must be >= 1");
    if (!bleu_eligible(candidate.size(), reference.size(), k)) {
        throw ValidationError("BLEU_" + std::to_string(k) + " needs at least k tokens on both sides");
    }
    // Clipped and total counts multiply as integers (exact while the product
    // stays below 2^53), so short sentences give correctly rounded scores.
    double num = 1.0, den = 1.0;
    for (int n = 1; n <= k; ++n) {
        const auto cand = detail::ngram_counts(candidate, static_cast<std::size_t>(n));
        const auto ref = detail::ngram_counts(reference, static_cast<std::size_t>(n));
        long clipped = 0, total = 0;
        for (const auto& [gram, c] : cand) {
            total += c;
            const auto it = ref.find(gram);
            if (it != ref.end()) clipped += std::min(c, it->second);
        }
        if (clipped == 0) return 0.0;
        num *= static_cast<double>(clipped);
        den *= static_cast<double>(total);
    }
    const double c = static_cast<double>(candidate.size());
    const double r = static_cast<double>(reference.size());
    const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
    const double ratio = num / den;
    return bp * (k == 1 ? ratio : k == 2 ? std::sqrt(ratio) : std::pow(ratio, 1.0 / k));
}

// ---------------------------------------------------------------------------
// DTW

/// Minimum cumulative |a_i - b_j| over monotone alignments covering both
/// sequences end to end. An empty side is read as the single value 0.
inline double dtw(const std::vector<double>& a_in, const std::vector<double>& b_in) {
    static const std::vector<double> zero{0.0};
    const auto& a = a_in.empty() ? zero : a_in;
    const auto& b = b_in.empty() ? zero : b_in;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> prev(b.size() + 1, inf), cur(b.size() + 1, inf);
    prev[0] = 0.0;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = inf;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const double best = std::min({prev[j - 1], prev[j], cur[j - 1]});
            cur[j] = std::abs(a[i - 1] - b[j - 1]) + best;
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// ---------------------------------------------------------------------------
// Average precision

enum class ApVariant { Positional, Multiset };

/// Positional: position i (< min length) is a hit iff the classes agree.
/// Multiset: walking predictions in rank order, a prediction is a hit while
/// its class still has unmatched occurrences in the truth.
/// Ranking is by confidence descending, ties by position. AP is the mean of
/// precision@r over hit ranks r, or 0 without hits.
inline double average_precision(const std::vector<int>& predicted, const std::vector<double>& confidence,
                                const std::vector<int>& truth, ApVariant variant = ApVariant::Positional) {
    if (confidence.size() != predicted.size()) throw ValidationError("one confidence per predicted event required");
    const std::size_t n = variant == ApVariant::Positional ? std::min(predicted.size(), truth.size()) : predicted.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return confidence[x] > confidence[y]; });
    std::map<int, int> remaining;
    if (variant == ApVariant::Multiset)
        for (int t : truth) ++remaining[t];
    double sum = 0.0;
    int hits = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
        const std::size_t i = order[r];
        bool hit = false;
        if (variant == ApVariant::Positional) {
            hit = predicted[i] == truth[i];
        } else {
            auto it = remaining.find(predicted[i]);
            if (it != remaining.end() && it->second > 0) {
                --it->second;
                hit = true;
            }
        }
        if (hit) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(r + 1);
        }
    }
    return hits == 0 ? 0.0 : sum / hits;
}

inline double pair_ap(const EvalPair& p, Task task, ApVariant variant = ApVariant::Positional) {
    const auto& conf = task == Task::EventType ? p.predicted.type_confidence : p.predicted.group_confidence;
    return average_precision(tokens(p.predicted.events, task), conf, tokens(p.truth.events, task), variant);
}

/// Mean AP over pairs (convention applied to each pair first).
inline double mean_ap(const std::vector<EvalPair>& pairs, Task task, ApVariant variant = ApVariant::Positional) {
    if (pairs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& p : pairs) s += pair_ap(apply_noevent_convention(p), task, variant);
    return s / static_cast<double>(pairs.size());
}

inline double mae_counts(const std::vector<EvalPair>& pairs) {
    if (pairs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& raw : pairs) {
        const auto p = apply_noevent_convention(raw);
        s += std::abs(static_cast<double>(p.predicted.events.size()) - static_cast<double>(p.truth.events.size()));
    }
    return s / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Report

constexpr int kMaxBleuOrder = 4;

struct RepoScore {
    std::string repo_id;
    std::size_t truth_len = 0;  // after the convention
    std::size_t pred_len = 0;
    double type_ap = 0.0;
    double group_ap = 0.0;
    /// NaN where the pair is too short for that order.
    std::array<double, kMaxBleuOrder> type_bleu{};
    std::array<double, kMaxBleuOrder> group_bleu{};
    double dtw = 0.0;
    double abs_count_diff = 0.0;
};

struct TaskSummary {
    double map = 0.0;
    std::array<double, kMaxBleuOrder> bleu{};
    std::array<std::size_t, kMaxBleuOrder> bleu_eligible{};
};

struct MetricReport {
    std::size_t repos = 0;
    TaskSummary event_type;
    TaskSummary user_group;
    double mean_dtw = 0.0;
    double mae = 0.0;
    double dtw_scale = 1.0;
    ApVariant ap_variant = ApVariant::Positional;
    std::vector<RepoScore> per_repo;
};

struct MetricOptions {
    ApVariant ap_variant = ApVariant::Positional;
    /// Reported DTW is multiplied by this (1e-3 gives thousands of hours).
    double dtw_scale = 1.0;
    int threads = 1;
};

inline RepoScore score_pair(const EvalPair& raw, const MetricOptions& opt = {}) {
    const EvalPair p = apply_noevent_convention(raw);
    RepoScore s;
    s.repo_id = p.repo_id;
    s.truth_len = p.truth.events.size();
    s.pred_len = p.predicted.events.size();
    s.type_ap = pair_ap(p, Task::EventType, opt.ap_variant);
    s.group_ap = pair_ap(p, Task::UserGroup, opt.ap_variant);
    const auto pt = tokens(p.predicted.events, Task::EventType), tt = tokens(p.truth.events, Task::EventType);
    const auto pg = tokens(p.predicted.events, Task::UserGroup), tg = tokens(p.truth.events, Task::UserGroup);
    for (int k = 1; k <= kMaxBleuOrder; ++k) {
        const bool ok = bleu_eligible(s.pred_len, s.truth_len, k);
        const double nan = std::numeric_limits<double>::quiet_NaN();
        s.type_bleu[static_cast<std::size_t>(k - 1)] = ok ? bleu_k(pt, tt, k) : nan;
        s.group_bleu[static_cast<std::size_t>(k - 1)] = ok ? bleu_k(pg, tg, k) : nan;
    }
    s.dtw = dtw(delays(p.predicted.events), delays(p.truth.events));
    s.abs_count_diff = std::abs(static_cast<double>(s.pred_len) - static_cast<double>(s.truth_len));
    return s;
}

inline MetricReport evaluate(const std::vector<EvalPair>& pairs, const MetricOptions& opt = {}) {
    MetricReport r;
    r.repos = pairs.size();
    r.dtw_scale = opt.dtw_scale;
    r.ap_variant = opt.ap_variant;
    r.per_repo.resize(pairs.size());
    parallel_for(pairs.size(), opt.threads, [&](std::size_t i) { r.per_repo[i] = score_pair(pairs[i], opt); });
    if (pairs.empty()) return r;
    const double n = static_cast<double>(pairs.size());
    for (const auto& s : r.per_repo) {
        r.event_type.map += s.type_ap / n;
        r.user_group.map += s.group_ap / n;
        r.mean_dtw += s.dtw * opt.dtw_scale / n;
        r.mae += s.abs_count_diff / n;
    }
    for (std::size_t k = 0; k < kMaxBleuOrder; ++k) {
        double ts = 0.0, gs = 0.0;
        std::size_t count = 0;
        for (const auto& s : r.per_repo) {
            if (std::isnan(s.type_bleu[k])) continue;
            ts += s.type_bleu[k];
            gs += s.group_bleu[k];
            ++count;
        }
        const double nan = std::numeric_limits<double>::quiet_NaN();
        r.event_type.bleu[k] = count ? ts / static_cast<double>(count) : nan;
        r.user_group.bleu[k] = count ? gs / static_cast<double>(count) : nan;
        r.event_type.bleu_eligible[k] = count;
        r.user_group.bleu_eligible[k] = count;
    }
    return r;
}

/// Pairs every repo in `repos` with its prediction and truth (absent
/// entries are empty chains). Repos are scored in the given order.
inline std::vector<EvalPair> make_pairs(const std::vector<std::string>& repos,
                                        const std::map<std::string, SimulatedChain>& predicted,
                                        const std::map<std::string, SimulatedChain>& truth) {
    std::vector<EvalPair> out;
    out.reserve(repos.size());
    for (const auto& id : repos) {
        EvalPair p;
        p.repo_id = id;
        if (auto it = predicted.find(id); it != predicted.end()) p.predicted = it->second;
        if (auto it = truth.find(id); it != truth.end()) p.truth = it->second;
        p.predicted.repo_id = p.truth.repo_id = id;
        out.push_back(std::move(p));
    }
    return out;
}

inline std::vector<std::string> repo_union(const std::map<std::string, SimulatedChain>& a,
                                           const std::map<std::string, SimulatedChain>& b) {
    std::set<std::string> ids;
    for (const auto& [k, v] : a) ids.insert(k);
    for (const auto& [k, v] : b) ids.insert(k);
    return {ids.begin(), ids.end()};
}

// ---------------------------------------------------------------------------
// Report files

inline std::string metric_text(double v) { return std::isnan(v) ? "nan" : io::exact_decimal(v); }

/// Summary rows: metric, event_type, time_delay, user_group.
inline void write_report_tsv(std::ostream& out, const MetricReport& r) {
    const std::string na = "-";
    out << "metric\tevent_type\ttime_delay\tuser_group\n";
    out << "mAP\t" << metric_text(r.event_type.map) << '\t' << na << '\t' << metric_text(r.user_group.map) << '\n';
    for (std::size_t k = 0; k < kMaxBleuOrder; ++k) {
        out << "BLEU" << k + 1 << '\t' << metric_text(r.event_type.bleu[k]) << '\t' << na << '\t'
            << metric_text(r.user_group.bleu[k]) << '\n';
    }
    out << "DTW\t" << na << '\t' << metric_text(r.mean_dtw) << '\t' << na << '\n';
    out << "MAE_count\t" << metric_text(r.mae) << '\t' << na << '\t' << na << '\n';
    out << "repos\t" << r.repos << '\t' << r.repos << '\t' << r.repos << '\n';
    for (std::size_t k = 0; k < kMaxBleuOrder; ++k) {
        out << "BLEU" << k + 1 << "_eligible\t" << r.event_type.bleu_eligible[k] << '\t' << na << '\t'
            << r.user_group.bleu_eligible[k] << '\n';
    }
}

inline void write_per_repo_tsv(std::ostream& out, const MetricReport& r) {
    out << "repo_id\ttruth_len\tpred_len\ttype_ap\tgroup_ap";
    for (int k = 1; k <= kMaxBleuOrder; ++k) out << "\ttype_bleu" << k;
    for (int k = 1; k <= kMaxBleuOrder; ++k) out << "\tgroup_bleu" << k;
    out << "\tdtw\tabs_count_diff\n";
    for (const auto& s : r.per_repo) {
        out << s.repo_id << '\t' << s.truth_len << '\t' << s.pred_len << '\t' << metric_text(s.type_ap) << '\t'
            << metric_text(s.group_ap);
        for (double v : s.type_bleu) out << '\t' << metric_text(v);
        for (double v : s.group_bleu) out << '\t' << metric_text(v);
        out << '\t' << metric_text(s.dtw * r.dtw_scale) << '\t' << metric_text(s.abs_count_diff) << '\n';
    }
}

inline nlohmann::ordered_json report_json(const MetricReport& r) {
    auto num = [](double v) { return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v); };
    auto task = [&](const TaskSummary& t) {
        nlohmann::ordered_json j;
        j["mAP"] = num(t.map);
        for (std::size_t k = 0; k < kMaxBleuOrder; ++k) {
            j["BLEU" + std::to_string(k + 1)] = num(t.bleu[k]);
            j["BLEU" + std::to_string(k + 1) + "_eligible"] = t.bleu_eligible[k];
        }
        return j;
    };
    nlohmann::ordered_json j;
    j["repos"] = r.repos;
    j["ap_variant"] = r.ap_variant == ApVariant::Positional ? "positional" : "multiset";
    j["event_type"] = task(r.event_type);
    j["time_delay"] = {{"DTW", num(r.mean_dtw)}, {"dtw_scale", r.dtw_scale}};
    j["user_group"] = task(r.user_group);
    j["count"] = {{"MAE", num(r.mae)}};
    return j;
}

}  // namespace gitevolve

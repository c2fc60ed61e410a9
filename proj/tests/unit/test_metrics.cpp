#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

#include "gitevolve/metrics.hpp"
#include "gitevolve/random.hpp"

using namespace gitevolve;

namespace {

// Minimum over every monotone path, enumerated explicitly.
double dtw_brute(const std::vector<double>& a, const std::vector<double>& b) {
    double best = std::numeric_limits<double>::infinity();
    std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double acc) {
        acc += std::abs(a[i] - b[j]);
        if (acc >= best) return;
        if (i + 1 == a.size() && j + 1 == b.size()) {
            best = acc;
            return;
        }
        if (i + 1 < a.size()) walk(i + 1, j, acc);
        if (j + 1 < b.size()) walk(i, j + 1, acc);
        if (i + 1 < a.size() && j + 1 < b.size()) walk(i + 1, j + 1, acc);
    };
    walk(0, 0, 0.0);
    return best;
}

std::vector<std::vector<double>> all_sequences(int max_len, int alphabet) {
    std::vector<std::vector<double>> out;
    for (int n = 1; n <= max_len; ++n) {
        int total = 1;
        for (int i = 0; i < n; ++i) total *= alphabet;
        for (int code = 0; code < total; ++code) {
            std::vector<double> s(static_cast<std::size_t>(n));
            int c = code;
            for (int i = 0; i < n; ++i, c /= alphabet) s[static_cast<std::size_t>(i)] = c % alphabet;
            out.push_back(s);
        }
    }
    return out;
}

// Rank of each item counted directly: items with higher confidence, or equal
// confidence and earlier position, come first.
double ap_by_counting(const std::vector<int>& pred, const std::vector<double>& conf, const std::vector<int>& truth) {
    const std::size_t n = std::min(pred.size(), truth.size());
    std::vector<std::size_t> rank(n);
    for (std::size_t i = 0; i < n; ++i) {
        rank[i] = 1;
        for (std::size_t j = 0; j < n; ++j) {
            if (conf[j] > conf[i] || (conf[j] == conf[i] && j < i)) ++rank[i];
        }
    }
    double sum = 0.0;
    int hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (pred[i] != truth[i]) continue;
        ++hits;
        int above = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (pred[j] == truth[j] && rank[j] <= rank[i]) ++above;
        }
        sum += static_cast<double>(above) / static_cast<double>(rank[i]);
    }
    return hits ? sum / hits : 0.0;
}

// Clipped n-gram precision with plain nested loops.
double bleu_by_loops(const std::vector<int>& c, const std::vector<int>& r, int k) {
    double log_p = 0.0;
    for (int n = 1; n <= k; ++n) {
        const std::size_t cn = c.size() - static_cast<std::size_t>(n) + 1;
        const std::size_t rn = r.size() - static_cast<std::size_t>(n) + 1;
        auto same = [&](const std::vector<int>& x, std::size_t i, const std::vector<int>& y, std::size_t j) {
            for (int t = 0; t < n; ++t)
                if (x[i + static_cast<std::size_t>(t)] != y[j + static_cast<std::size_t>(t)]) return false;
            return true;
        };
        double clipped = 0.0;
        std::vector<bool> counted(cn, false);
        for (std::size_t i = 0; i < cn; ++i) {
            if (counted[i]) continue;
            int in_c = 0, in_r = 0;
            for (std::size_t j = 0; j < cn; ++j)
                if (same(c, i, c, j)) {
                    ++in_c;
                    counted[j] = true;
                }
            for (std::size_t j = 0; j < rn; ++j)
                if (same(c, i, r, j)) ++in_r;
            clipped += std::min(in_c, in_r);
        }
        if (clipped == 0.0) return 0.0;
        log_p += std::log(clipped / static_cast<double>(cn));
    }
    const double bp = c.size() >= r.size() ? 1.0 : std::exp(1.0 - static_cast<double>(r.size()) / c.size());
    return bp * std::exp(log_p / k);
}

SimulatedChain chain_of(const std::vector<EventType>& types, const std::vector<GroupId>& groups = {},
                        const std::vector<double>& delays = {}) {
    SimulatedChain c;
    for (std::size_t i = 0; i < types.size(); ++i) {
        const GroupId g = groups.empty() ? 0 : groups[i];
        const double d = delays.empty() ? 1.0 : delays[i];
        c.push({types[i], g, static_cast<Timestamp>(i), d}, 1.0, 1.0);
    }
    return c;
}

}  // namespace

TEST(Dtw, IdenticalSequencesCostZero) {
    EXPECT_EQ(dtw({1.0, 5.0, 2.5}, {1.0, 5.0, 2.5}), 0.0);
}

TEST(Dtw, TwoZerosAgainstOneIsTwo) { EXPECT_EQ(dtw({0.0, 0.0}, {1.0}), 2.0); }

TEST(Dtw, SingleElementsGiveAbsoluteDifference) {
    EXPECT_EQ(dtw({3.5}, {1.25}), 2.25);
    EXPECT_EQ(dtw({}, {4.0}), 4.0);
}

TEST(Dtw, Symmetric) {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> a(1 + uniform_index(rng, 9)), b(1 + uniform_index(rng, 9));
        for (auto& x : a) x = uniform_real(rng, 0, 100);
        for (auto& x : b) x = uniform_real(rng, 0, 100);
        EXPECT_DOUBLE_EQ(dtw(a, b), dtw(b, a));
    }
}

TEST(Dtw, MatchesBruteForceOnShortTernarySequences) {
    const auto seqs = all_sequences(4, 3);
    for (const auto& a : seqs)
        for (const auto& b : seqs) ASSERT_EQ(dtw(a, b), dtw_brute(a, b));
}

TEST(Bleu, IdenticalSequencesScoreOne) {
    const std::vector<int> s{1, 2, 3, 1, 2};
    for (int k = 1; k <= 4; ++k) EXPECT_DOUBLE_EQ(bleu_k(s, s, k), 1.0);
}

TEST(Bleu, ClippedUnigramPrecision) { EXPECT_DOUBLE_EQ(bleu_k({0, 0, 1}, {0, 1, 2}, 1), 2.0 / 3.0); }

TEST(Bleu, HandCountedExamples) {
    // p1 = 3/4, p2 = 2/3, equal lengths.
    EXPECT_EQ(bleu_k({0, 1, 2, 3}, {0, 1, 2, 4}, 2), std::sqrt(0.5));
    // Short candidate: p1 = 1, BP = exp(1 - 4/2).
    EXPECT_EQ(bleu_k({0, 1}, {0, 1, 2, 3}, 1), std::exp(-1.0));
    // p1..p4 = 4/5, 3/4, 2/3, 1/2.
    EXPECT_EQ(bleu_k({0, 1, 2, 3, 4}, {0, 1, 2, 3, 5}, 4), std::pow(0.2, 0.25));
    // Repeated token clipped by its reference count.
    EXPECT_DOUBLE_EQ(bleu_k({0, 0, 0, 0}, {0, 1, 2, 3}, 1), 0.25);
}

TEST(Bleu, DisjointVocabulariesScoreZero) { EXPECT_EQ(bleu_k({0, 1, 2}, {3, 4, 5}, 1), 0.0); }

TEST(Bleu, RejectsBadOrderAndShortInputs) {
    EXPECT_THROW(bleu_k({1}, {1}, 0), ValidationError);
    EXPECT_THROW(bleu_k({1, 2}, {1}, 2), ValidationError);
}

TEST(Bleu, MatchesLoopCountingOracle) {
    Rng rng(5);
    for (int trial = 0; trial < 2000; ++trial) {
        std::vector<int> c(1 + uniform_index(rng, 10)), r(1 + uniform_index(rng, 10));
        for (auto& x : c) x = static_cast<int>(uniform_index(rng, 3));
        for (auto& x : r) x = static_cast<int>(uniform_index(rng, 3));
        for (int k = 1; k <= 4; ++k) {
            if (!bleu_eligible(c.size(), r.size(), k)) continue;
            ASSERT_NEAR(bleu_k(c, r, k), bleu_by_loops(c, r, k), 1e-12);
        }
    }
}

TEST(Bleu, BoundedAndOneOnIdentity) {
    Rng rng(8);
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t n = 4 + uniform_index(rng, 8);
        std::vector<int> c(n), r(4 + uniform_index(rng, 8));
        for (auto& x : c) x = static_cast<int>(uniform_index(rng, 3));
        for (auto& x : r) x = static_cast<int>(uniform_index(rng, 3));
        for (int k = 1; k <= 4; ++k) {
            const double v = bleu_k(c, r, k);
            ASSERT_GE(v, 0.0);
            ASSERT_LE(v, 1.0 + 1e-15);
            ASSERT_DOUBLE_EQ(bleu_k(c, c, k), 1.0);
        }
    }
}

TEST(AveragePrecision, AllCorrectAndNoneCorrect) {
    EXPECT_DOUBLE_EQ(average_precision({1, 2, 3}, {0.9, 0.5, 0.7}, {1, 2, 3}), 1.0);
    EXPECT_DOUBLE_EQ(average_precision({1, 2, 3}, {0.9, 0.5, 0.7}, {2, 3, 1}), 0.0);
}

TEST(AveragePrecision, HitsAtRanksOneAndThree) {
    // Confidence order: position 0, 1, 2; hits at positions 0 and 2.
    EXPECT_DOUBLE_EQ(average_precision({1, 9, 3}, {0.9, 0.8, 0.7}, {1, 2, 3}), 5.0 / 6.0);
}

TEST(AveragePrecision, TiesBrokenByPosition) {
    EXPECT_DOUBLE_EQ(average_precision({9, 1}, {0.5, 0.5}, {1, 1}), 0.5);
    EXPECT_DOUBLE_EQ(average_precision({1, 9}, {0.5, 0.5}, {1, 1}), 1.0);
}

TEST(AveragePrecision, MatchesExhaustiveRankCounting) {
    const std::vector<double> levels{0.2, 0.5, 0.9};
    for (int n = 1; n <= 5; ++n) {
        const int patterns = 1 << n;
        int conf_codes = 1;
        for (int i = 0; i < n; ++i) conf_codes *= 3;
        for (int p = 0; p < patterns; ++p)
            for (int t = 0; t < patterns; ++t)
                for (int cc = 0; cc < conf_codes; ++cc) {
                    std::vector<int> pred(static_cast<std::size_t>(n)), truth(static_cast<std::size_t>(n));
                    std::vector<double> conf(static_cast<std::size_t>(n));
                    int code = cc;
                    for (int i = 0; i < n; ++i, code /= 3) {
                        pred[static_cast<std::size_t>(i)] = (p >> i) & 1;
                        truth[static_cast<std::size_t>(i)] = (t >> i) & 1;
                        conf[static_cast<std::size_t>(i)] = levels[static_cast<std::size_t>(code % 3)];
                    }
                    ASSERT_DOUBLE_EQ(average_precision(pred, conf, truth), ap_by_counting(pred, conf, truth));
                }
    }
}

TEST(AveragePrecision, PositionalUsesOnlyOverlap) {
    EXPECT_DOUBLE_EQ(average_precision({1, 2, 3, 4}, {1, 1, 1, 1}, {1, 2}), 1.0);
}

TEST(AveragePrecision, MultisetIgnoresOrder) {
    EXPECT_DOUBLE_EQ(average_precision({2, 1}, {0.9, 0.8}, {1, 2}, ApVariant::Multiset), 1.0);
    EXPECT_DOUBLE_EQ(average_precision({1, 1}, {0.9, 0.8}, {1, 2}, ApVariant::Multiset), 1.0);
    // Second 1 finds no unmatched truth; hit only at rank 1.
    EXPECT_DOUBLE_EQ(average_precision({1, 1, 2}, {0.9, 0.8, 0.7}, {1, 2, 3}, ApVariant::Multiset), (1.0 + 2.0 / 3.0) / 2.0);
}

TEST(Convention, EmptySidesBecomePlaceholder) {
    EvalPair p;
    const auto both = apply_noevent_convention(p);
    ASSERT_EQ(both.truth.events.size(), 1u);
    ASSERT_EQ(both.predicted.events.size(), 1u);
    EXPECT_EQ(both.truth.events[0].type, EventType::NoEventInSimPeriod);
    EXPECT_EQ(both.truth.events[0].group, kPlaceholderGroup);
    EXPECT_EQ(both.truth.events[0].delay_hours, 0.0);

    const auto s = score_pair(p);
    EXPECT_DOUBLE_EQ(s.type_bleu[0], 1.0);
    EXPECT_DOUBLE_EQ(s.group_bleu[0], 1.0);
    EXPECT_DOUBLE_EQ(s.type_ap, 1.0);
    EXPECT_EQ(s.abs_count_diff, 0.0);
    EXPECT_EQ(s.dtw, 0.0);
    EXPECT_TRUE(std::isnan(s.type_bleu[1]));
}

TEST(Convention, NonEmptyPredictionAgainstEmptyTruthIsScoredAsMismatch) {
    EvalPair p;
    p.predicted = chain_of({EventType::Push, EventType::Push}, {}, {5.0, 5.0});
    const auto s = score_pair(p);
    EXPECT_EQ(s.truth_len, 1u);
    EXPECT_EQ(s.type_ap, 0.0);
    EXPECT_EQ(s.type_bleu[0], 0.0);
    EXPECT_EQ(s.abs_count_diff, 1.0);
    EXPECT_EQ(s.dtw, 10.0);
}

TEST(Convention, NonEmptyPairsUnchanged) {
    EvalPair p;
    p.predicted = chain_of({EventType::Push});
    p.truth = chain_of({EventType::Fork, EventType::Watch});
    const auto q = apply_noevent_convention(p);
    EXPECT_EQ(q.predicted.events, p.predicted.events);
    EXPECT_EQ(q.truth.events, p.truth.events);
}

TEST(Mae, ExamplesFromCounts) {
    std::vector<EvalPair> pairs(4);
    for (int i = 0; i < 3; ++i) {
        pairs[static_cast<std::size_t>(i)].predicted = chain_of({EventType::Push});
        pairs[static_cast<std::size_t>(i)].truth = chain_of({EventType::Fork});
    }
    pairs[3].predicted = chain_of({EventType::Push, EventType::Push, EventType::Push, EventType::Push});
    pairs[3].truth = chain_of({EventType::Push});
    EXPECT_DOUBLE_EQ(mae_counts(pairs), 0.75);
    pairs.pop_back();
    EXPECT_DOUBLE_EQ(mae_counts(pairs), 0.0);
}

TEST(Report, InvariantUnderConsistentRelabeling) {
    Rng rng(12);
    std::vector<EvalPair> pairs, relabeled;
    // Permutation of the ten concrete types and of groups 0..9.
    const std::vector<int> tperm{3, 7, 0, 9, 1, 5, 2, 8, 6, 4};
    const std::vector<int> gperm{9, 8, 7, 6, 5, 4, 3, 2, 1, 0};
    for (int r = 0; r < 30; ++r) {
        EvalPair p, q;
        p.repo_id = q.repo_id = "r" + std::to_string(r);
        for (auto* side : {&p.predicted, &p.truth}) {
            const std::size_t n = uniform_index(rng, 6);
            for (std::size_t i = 0; i < n; ++i) {
                side->push({static_cast<EventType>(uniform_index(rng, 10)), static_cast<GroupId>(uniform_index(rng, 10)),
                            static_cast<Timestamp>(i), uniform_real(rng, 0, 50)},
                           uniform01(rng), uniform01(rng));
            }
        }
        q = p;
        for (auto* side : {&q.predicted, &q.truth}) {
            for (auto& e : side->events) {
                e.type = static_cast<EventType>(tperm[static_cast<std::size_t>(type_index(e.type))]);
                e.group = gperm[static_cast<std::size_t>(e.group)];
            }
        }
        pairs.push_back(p);
        relabeled.push_back(q);
    }
    const auto a = evaluate(pairs), b = evaluate(relabeled);
    EXPECT_EQ(a.event_type.map, b.event_type.map);
    EXPECT_EQ(a.user_group.map, b.user_group.map);
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_TRUE(a.event_type.bleu[k] == b.event_type.bleu[k] ||
                    (std::isnan(a.event_type.bleu[k]) && std::isnan(b.event_type.bleu[k])));
        EXPECT_TRUE(a.user_group.bleu[k] == b.user_group.bleu[k] ||
                    (std::isnan(a.user_group.bleu[k]) && std::isnan(b.user_group.bleu[k])));
    }
    EXPECT_EQ(a.mean_dtw, b.mean_dtw);
    EXPECT_EQ(a.mae, b.mae);
}

TEST(Report, RangesAndEligibleCounts) {
    std::vector<EvalPair> pairs(3);
    pairs[0].predicted = chain_of({EventType::Push, EventType::Fork, EventType::Watch});
    pairs[0].truth = chain_of({EventType::Push, EventType::Fork, EventType::Watch});
    pairs[1].predicted = chain_of({EventType::Push});
    pairs[1].truth = chain_of({EventType::Push, EventType::Fork});
    const auto r = evaluate(pairs);
    EXPECT_EQ(r.event_type.bleu_eligible[0], 3u);
    EXPECT_EQ(r.event_type.bleu_eligible[1], 1u);
    EXPECT_EQ(r.event_type.bleu_eligible[2], 1u);
    EXPECT_EQ(r.event_type.bleu_eligible[3], 0u);
    EXPECT_TRUE(std::isnan(r.event_type.bleu[3]));
    EXPECT_DOUBLE_EQ(r.event_type.bleu[1], 1.0);
    EXPECT_GE(r.event_type.map, 0.0);
    EXPECT_LE(r.event_type.map, 1.0);
    EXPECT_GE(r.mean_dtw, 0.0);
}

TEST(Report, DtwScaleApplied) {
    std::vector<EvalPair> pairs(1);
    pairs[0].predicted = chain_of({EventType::Push}, {}, {2000.0});
    pairs[0].truth = chain_of({EventType::Push}, {}, {0.0});
    MetricOptions opt;
    opt.dtw_scale = 1e-3;
    EXPECT_DOUBLE_EQ(evaluate(pairs, opt).mean_dtw, 2.0);
}

TEST(Report, ParallelScoringMatchesSerial) {
    Rng rng(4);
    std::vector<EvalPair> pairs(50);
    for (auto& p : pairs)
        for (auto* side : {&p.predicted, &p.truth})
            for (std::size_t i = 0, n = uniform_index(rng, 8); i < n; ++i)
                side->push({static_cast<EventType>(uniform_index(rng, 10)), 0, 0, uniform_real(rng, 0, 9)}, 1.0, 1.0);
    MetricOptions serial, par;
    par.threads = 4;
    std::ostringstream a, b;
    write_per_repo_tsv(a, evaluate(pairs, serial));
    write_per_repo_tsv(b, evaluate(pairs, par));
    EXPECT_EQ(a.str(), b.str());
}

TEST(Report, WritersEmitEveryMetric) {
    std::vector<EvalPair> pairs(1);
    pairs[0].predicted = chain_of({EventType::Push});
    pairs[0].truth = chain_of({EventType::Push});
    const auto r = evaluate(pairs);
    std::ostringstream tsv;
    write_report_tsv(tsv, r);
    for (const char* key : {"mAP", "BLEU1", "BLEU4", "DTW", "MAE_count", "BLEU2_eligible"}) {
        EXPECT_NE(tsv.str().find(key), std::string::npos) << key;
    }
    const auto j = report_json(r);
    EXPECT_EQ(j["event_type"]["BLEU1"].get<double>(), 1.0);
    EXPECT_TRUE(j["event_type"]["BLEU2"].is_null());
    EXPECT_EQ(j["count"]["MAE"].get<double>(), 0.0);
}

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "gitevolve/testkit.hpp"

using namespace gitevolve;

namespace {

constexpr Timestamp H = kSecondsPerHour;

TimeWindows windows() {
    const Timestamp b = 1600000000;
    return {b, b + 60 * H, b + 60 * H, b + 72 * H, b + 72 * H, b + 120 * H};
}

std::string serialize(const testkit::SyntheticDataset& d) {
    std::ostringstream s;
    write_event_log(s, d.events);
    write_user_profiles(s, d.users);
    write_repo_profiles(s, d.repos);
    return s.str();
}

}  // namespace

TEST(Testkit, SameSeedSameBytes) {
    const auto spec = testkit::deterministic_cycle(30, 5);
    EXPECT_EQ(serialize(testkit::generate(spec, windows())), serialize(testkit::generate(spec, windows())));
    auto other = spec;
    other.seed = 6;
    EXPECT_NE(serialize(testkit::generate(spec, windows())), serialize(testkit::generate(other, windows())));
}

TEST(Testkit, IngestsWithoutRejections) {
    const auto d = testkit::generate(testkit::deterministic_cycle(40, 1), windows());
    std::ostringstream s;
    write_event_log(s, d.events);
    std::istringstream in(s.str());
    const auto r = parse_event_log(in);
    EXPECT_EQ(r.rejected(), 0u);
    EXPECT_EQ(r.chains.size(), 40u);
    for (const auto& e : d.events) EXPECT_TRUE(d.users.count(e.user_id)) << e.user_id;
    for (const auto& [id, p] : d.repos) EXPECT_TRUE(d.users.count(p.creator_user_id));
}

TEST(Testkit, DeterministicCycleFollowsItsStates) {
    const auto w = windows();
    const auto d = testkit::generate(testkit::deterministic_cycle(20, 2), w);
    const auto r = parse_event_log(d.events);
    for (const auto& [repo, chain] : r.chains) {
        for (std::size_t i = 2; i < chain.events.size(); ++i) {
            const auto a = chain.events[i - 1].type, b = chain.events[i].type;
            const auto next = a == EventType::Push ? EventType::Issues : a == EventType::Issues ? EventType::Watch : EventType::Push;
            ASSERT_EQ(b, next);
            ASSERT_EQ(chain.events[i].delay_hours, 1.0);
        }
        EXPECT_LT(chain.events.back().timestamp, w.sim_end);
        EXPECT_GE(chain.events.back().timestamp, w.sim_end - H);
    }
    EXPECT_NEAR(testkit::bayes_next_type_accuracy(testkit::deterministic_cycle()), 1.0, 1e-12);
}

TEST(Testkit, TransitionFrequenciesPassChiSquare) {
    testkit::SyntheticSpec spec;
    spec.repos = 50;
    spec.transition = {{0.2, 0.5, 0.3}, {0.6, 0.1, 0.3}, {0.25, 0.25, 0.5}};
    spec.delays = {{0.5, 2.0}, {0.5, 2.0}, {0.5, 2.0}};
    const auto d = testkit::generate(spec, windows());
    const auto r = parse_event_log(d.events);
    std::map<EventType, int> idx{{EventType::Push, 0}, {EventType::Issues, 1}, {EventType::Watch, 2}};
    double counts[3][3] = {};
    for (const auto& [repo, chain] : r.chains)
        for (std::size_t i = 2; i < chain.events.size(); ++i)
            counts[idx.at(chain.events[i - 1].type)][idx.at(chain.events[i].type)] += 1;
    // 3 rows x 2 dof; 99.9% quantile of chi^2 with 6 dof is 22.46.
    double chi2 = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double n = counts[a][0] + counts[a][1] + counts[a][2];
        ASSERT_GT(n, 500);
        for (int b = 0; b < 3; ++b) {
            const double e = n * spec.transition[a][b];
            chi2 += (counts[a][b] - e) * (counts[a][b] - e) / e;
        }
    }
    EXPECT_LT(chi2, 22.46);
}

TEST(Testkit, GammaDelaysHaveConfiguredMean) {
    testkit::SyntheticSpec spec;
    spec.repos = 30;
    spec.delays = {{0.3, 2.0}, {0.3, 2.0}, {0.3, 2.0}};
    const auto d = testkit::generate(spec, windows());
    const auto r = parse_event_log(d.events);
    double sum = 0.0, sum2 = 0.0;
    int n = 0;
    for (const auto& [repo, chain] : r.chains)
        for (std::size_t i = 2; i < chain.events.size(); ++i) {
            sum += chain.events[i].delay_hours;
            sum2 += chain.events[i].delay_hours * chain.events[i].delay_hours;
            ++n;
        }
    const double mean = sum / n;
    const double sd = std::sqrt(sum2 / n - mean * mean);
    // Whole-second timestamps shift the mean by under 1/3600 h.
    EXPECT_NEAR(mean, 0.3, 4 * sd / std::sqrt(n) + 1.0 / 3600);
}

TEST(Testkit, DormantReposStopAtSimStart) {
    auto spec = testkit::deterministic_cycle(40, 3);
    spec.dormant_fraction = 1.0;
    const auto w = windows();
    for (const auto& e : testkit::generate(spec, w).events) ASSERT_LT(e.timestamp, w.sim_start);
}

TEST(Testkit, PopulationsAreSeparated) {
    const auto d = testkit::generate(testkit::deterministic_cycle(10, 1), windows());
    EXPECT_EQ(d.users.size(), 400u);
    for (const auto& [id, p] : d.users) {
        const int pop = d.population.at(id);
        EXPECT_EQ(p.user_type, pop == 0 ? UserType::Individual : UserType::Organization);
        if (pop == 0) EXPECT_LT(p.follower_count, 31);
        else EXPECT_GE(p.follower_count, 10000);
    }
}

TEST(Testkit, StationaryDistributionAndBayesAccuracy) {
    testkit::SyntheticSpec spec;
    spec.transition = {{0.9, 0.1, 0.0}, {0.0, 0.5, 0.5}, {1.0, 0.0, 0.0}};
    const auto pi = testkit::stationary_distribution(spec);
    // Balance: pi0 = 0.9 pi0 + pi2, pi1 = 0.1 pi0 + 0.5 pi1, pi2 = 0.5 pi1.
    const double p0 = 1.0 / (1.0 + 0.2 + 0.1);
    EXPECT_NEAR(pi(0), p0, 1e-10);
    EXPECT_NEAR(pi(1), 0.2 * p0, 1e-10);
    EXPECT_NEAR(pi(2), 0.1 * p0, 1e-10);
    EXPECT_NEAR(testkit::bayes_next_type_accuracy(spec), p0 * (0.9 + 0.2 * 0.5 + 0.1), 1e-10);
}

TEST(Testkit, SpecValidation) {
    testkit::SyntheticSpec spec;
    spec.transition[0] = {0.5, 0.6, 0.0};
    EXPECT_THROW(spec.validate(), ValidationError);
    spec = {};
    spec.states[0] = EventType::SOC;
    EXPECT_THROW(spec.validate(), ValidationError);
    spec = {};
    spec.delays.pop_back();
    EXPECT_THROW(spec.validate(), ValidationError);
}

TEST(Testkit, TwoCliqueProfiles) {
    const auto p = testkit::two_clique_profiles(6, 1);
    ASSERT_EQ(p.size(), 12u);
    int c0 = 0;
    for (const auto& [id, r] : p) c0 += r.creator_user_id == "creator0";
    EXPECT_EQ(c0, 6);
}

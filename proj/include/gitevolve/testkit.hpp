// Synthetic event logs with known dynamics: a Markov chain over concrete
// event types per repo, per-state delays, and actors drawn from two user
// populations with well separated profiles.

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gitevolve/core_types.hpp"
#include "gitevolve/error.hpp"
#include "gitevolve/ingestion.hpp"
#include "gitevolve/random.hpp"

namespace gitevolve::testkit {

struct DelaySpec {
    /// shape <= 0 means the delay is exactly `hours`; otherwise gamma with
    /// the given shape and mean `hours`.
    double hours = 1.0;
    double shape = 0.0;
};

struct SyntheticSpec {
    int repos = 200;
    int users_per_population = 200;
    /// Distinct repo creators; repos sharing a creator are linked in the repo graph.
    int creators = 20;
    std::vector<EventType> states{EventType::Push, EventType::Issues, EventType::Watch};
    std::vector<std::vector<double>> transition{{0, 1, 0}, {0, 0, 1}, {1, 0, 0}};
    std::vector<DelaySpec> delays{{1.0, 0.0}, {1.0, 0.0}, {1.0, 0.0}};
    /// Probability that the actor of an event in state s belongs to population 1.
    std::vector<double> population1_share{0.5, 0.5, 0.5};
    /// First event of a repo falls in [train_start, train_start + start_spread_hours).
    double start_spread_hours = 24.0;
    /// Fraction of repos that go silent at sim_start.
    double dormant_fraction = 0.0;
    std::uint64_t seed = 1;

    std::size_t num_states() const { return states.size(); }

    void validate() const {
        const std::size_t n = states.size();
        if (n == 0) throw ValidationError("synthetic spec needs at least one state");
        if (repos < 1 || users_per_population < 1 || creators < 1) {
            throw ValidationError("synthetic spec needs positive repos, users_per_population and creators");
        }
        if (transition.size() != n || delays.size() != n || population1_share.size() != n) {
            throw ValidationError("transition, delays and population1_share need one entry per state");
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!is_concrete(states[i])) throw ValidationError("synthetic states must be concrete event types");
            if (transition[i].size() != n) throw ValidationError("transition matrix must be square");
            double s = 0.0;
            for (double p : transition[i]) {
                if (p < 0.0) throw ValidationError("transition probabilities must be >= 0");
                s += p;
            }
            if (std::abs(s - 1.0) > 1e-9) throw ValidationError("transition row " + std::to_string(i) + " must sum to 1");
            if (!(delays[i].hours >= 0.0)) throw ValidationError("delays must be >= 0");
            if (population1_share[i] < 0.0 || population1_share[i] > 1.0) {
                throw ValidationError("population1_share must lie in [0, 1]");
            }
        }
        if (dormant_fraction < 0.0 || dormant_fraction > 1.0) throw ValidationError("dormant_fraction must lie in [0, 1]");
        if (start_spread_hours < 0.0) throw ValidationError("start_spread_hours must be >= 0");
    }
};

/// Push -> Issues -> Watch -> Push ... with 1h delays.
inline SyntheticSpec deterministic_cycle(int repos = 200, std::uint64_t seed = 1) {
    SyntheticSpec s;
    s.repos = repos;
    s.seed = seed;
    return s;
}

struct SyntheticDataset {
    std::vector<RawEventRecord> events;
    std::map<std::string, UserProfile> users;
    std::map<std::string, RepoProfile> repos;
    /// Population (0 or 1) of every generated user.
    std::map<std::string, int> population;
};

inline std::string user_name(int population, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "u%d_%04d", population, i);
    return buf;
}

inline std::string repo_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "repo%04d", i);
    return buf;
}

namespace detail {

/// Population 0: individuals with small audiences. Population 1:
/// organizations with audiences three orders of magnitude larger. The gap
/// exceeds the within-population spread in every log-encoded feature.
inline UserProfile population_profile(int population, int i, Rng& rng) {
    UserProfile p;
    p.user_id = user_name(population, i);
    const double scale = population == 0 ? 1.0 : 1000.0;
    p.user_type = population == 0 ? UserType::Individual : UserType::Organization;
    p.country = population == 0 ? "US" : "DE";
    p.github_impact = std::round(uniform_real(rng, 1.0, 3.0) * scale);
    p.follower_count = std::round(uniform_real(rng, 10.0, 30.0) * scale);
    p.followee_count = std::round(uniform_real(rng, 10.0, 30.0) * scale);
    p.repos_created_count = std::round(uniform_real(rng, 2.0, 6.0) * (population == 0 ? 1.0 : 100.0));
    p.forks_on_created_repos = std::round(uniform_real(rng, 5.0, 15.0) * scale);
    p.watches_on_created_repos = std::round(uniform_real(rng, 10.0, 30.0) * scale);
    return p;
}

inline double draw_delay(const DelaySpec& d, Rng& rng) {
    if (d.shape <= 0.0) return d.hours;
    return gamma_sample(rng, d.shape, d.hours / d.shape);
}

inline std::size_t draw_index(const std::vector<double>& probs, Rng& rng) {
    double r = uniform01(rng);
    for (std::size_t i = 0; i < probs.size(); ++i) {
        r -= probs[i];
        if (r < 0.0) return i;
    }
    for (std::size_t i = probs.size(); i-- > 0;)
        if (probs[i] > 0.0) return i;
    return 0;
}

}  // namespace detail

/// Deterministic per seed. Each repo starts in a uniformly drawn state and
/// emits events until sim_end (or sim_start for dormant repos). Timestamps
/// are whole seconds.
inline SyntheticDataset generate(const SyntheticSpec& spec, const TimeWindows& windows) {
    spec.validate();
    windows.validate();
    SyntheticDataset out;
    Rng user_rng(derive_seed(spec.seed, 0x75736572));
    for (int pop = 0; pop < 2; ++pop) {
        for (int i = 0; i < spec.users_per_population; ++i) {
            auto p = detail::population_profile(pop, i, user_rng);
            out.population[p.user_id] = pop;
            out.users[p.user_id] = std::move(p);
        }
    }
    static const std::vector<std::string> kWords[2] = {{"tiny", "cli", "tool", "hobby", "script", "parser"},
                                                       {"enterprise", "platform", "cloud", "framework", "sdk", "api"}};
    const std::size_t n_states = spec.num_states();
    for (int r = 0; r < spec.repos; ++r) {
        Rng rng(derive_seed(spec.seed, 0x1000 + static_cast<std::uint64_t>(r)));
        const std::string repo = repo_name(r);
        const int creator = r % spec.creators;
        const int creator_pop = creator % 2;
        const std::string creator_id = user_name(creator_pop, creator / 2 % spec.users_per_population);
        std::string desc;
        for (int w = 0; w < 4; ++w) {
            if (w) desc += ' ';
            desc += kWords[creator_pop][uniform_index(rng, kWords[creator_pop].size())];
        }
        const std::string lang(kLanguages[static_cast<std::size_t>(creator) % kLanguages.size()]);
        out.repos[repo] = make_repo_profile(repo, creator_id, lang, out.users.at(creator_id).user_type, desc);

        const bool dormant = uniform01(rng) < spec.dormant_fraction;
        const Timestamp stop = dormant ? windows.sim_start : windows.sim_end;
        double t = static_cast<double>(windows.train_start) +
                   uniform01(rng) * spec.start_spread_hours * static_cast<double>(kSecondsPerHour);
        std::size_t state = uniform_index(rng, n_states);
        while (true) {
            const Timestamp ts = static_cast<Timestamp>(std::floor(t));
            if (ts >= stop) break;
            const int pop = uniform01(rng) < spec.population1_share[state] ? 1 : 0;
            const int user = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(spec.users_per_population)));
            out.events.push_back({repo, user_name(pop, user), std::string(to_string(spec.states[state])), ts});
            state = detail::draw_index(spec.transition[state], rng);
            t += detail::draw_delay(spec.delays[state], rng) * static_cast<double>(kSecondsPerHour);
        }
    }
    return out;
}

/// Writes events.tsv, users.tsv and repos.tsv in the ingestion formats.
inline void write_dataset(const SyntheticDataset& d, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto open = [&](const char* name) {
        std::ofstream f(dir / name, std::ios::binary);
        if (!f) throw DataError("cannot write " + (dir / name).string());
        return f;
    };
    {
        auto f = open("events.tsv");
        write_event_log(f, d.events);
    }
    {
        auto f = open("users.tsv");
        write_user_profiles(f, d.users);
    }
    {
        auto f = open("repos.tsv");
        write_repo_profiles(f, d.repos);
    }
}

/// Stationary distribution of the transition matrix (power iteration on
/// the lazy chain, which shares the stationary distribution and converges
/// for periodic chains too).
inline Eigen::VectorXd stationary_distribution(const SyntheticSpec& spec) {
    const auto n = static_cast<Eigen::Index>(spec.num_states());
    Eigen::MatrixXd p(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) p(i, j) = spec.transition[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    const Eigen::MatrixXd lazy = 0.5 * (Eigen::MatrixXd::Identity(n, n) + p);
    Eigen::RowVectorXd pi = Eigen::RowVectorXd::Constant(n, 1.0 / static_cast<double>(n));
    for (int it = 0; it < 100000; ++it) {
        const Eigen::RowVectorXd next = pi * lazy;
        const double diff = (next - pi).cwiseAbs().sum();
        pi = next;
        if (diff < 1e-15) break;
    }
    return pi.transpose() / pi.sum();
}

/// Long-run accuracy of predicting the most likely next type given the
/// current type: sum_i pi_i max_j P_ij.
inline double bayes_next_type_accuracy(const SyntheticSpec& spec) {
    const Eigen::VectorXd pi = stationary_distribution(spec);
    double acc = 0.0;
    for (std::size_t i = 0; i < spec.num_states(); ++i) {
        // States sharing an event type are indistinguishable to the observer;
        // merge their outgoing mass by type.
        std::map<EventType, double> by_type;
        for (std::size_t j = 0; j < spec.num_states(); ++j) by_type[spec.states[j]] += spec.transition[i][j];
        double best = 0.0;
        for (const auto& [t, p] : by_type) best = std::max(best, p);
        acc += pi(static_cast<Eigen::Index>(i)) * best;
    }
    return acc;
}

/// Two creators each owning `size` repos; the co-creator graph is two
/// disjoint cliques. Attributes are drawn per repo with no clique signal
/// beyond the creator type.
inline std::map<std::string, RepoProfile> two_clique_profiles(int size, std::uint64_t seed) {
    Rng rng(seed);
    std::map<std::string, RepoProfile> out;
    static const std::vector<std::string> kVocab{"graph", "data", "web", "fast", "secure", "tool", "lib", "app"};
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < size; ++i) {
            const std::string id = repo_name(c * size + i);
            std::string desc = kVocab[uniform_index(rng, kVocab.size())] + " " + kVocab[uniform_index(rng, kVocab.size())];
            const std::string lang(kLanguages[uniform_index(rng, kLanguages.size())]);
            out[id] = make_repo_profile(id, "creator" + std::to_string(c), lang,
                                        c == 0 ? UserType::Individual : UserType::Organization, desc);
        }
    }
    return out;
}

}  // namespace gitevolve::testkit

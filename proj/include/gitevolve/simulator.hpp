// Closed-loop rollout, teacher-forced next-event prediction and the
// Random / Previous / NoEvent baselines.
//
// Horizon rule: a generated event whose timestamp reaches sim_end is
// discarded and generation stops. Events generated before sim_start (the
// clock catching up from the last seed event) stay in the model's input
// window but are not reported.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "gitevolve/core_types.hpp"
#include "gitevolve/encoder.hpp"
#include "gitevolve/io_util.hpp"
#include "gitevolve/model.hpp"
#include "gitevolve/parallel.hpp"
#include "gitevolve/random.hpp"

namespace gitevolve {

struct SimConfig {
    Timestamp sim_start = 0;
    Timestamp sim_end = 0;
    int window = 20;
    /// Argmax decoding by default; sampling draws from the normalized
    /// per-class probabilities instead.
    bool sample = false;
    std::uint64_t seed = 0;
    std::size_t max_events_per_repo = 100000;
    FeatureFlags flags;

    void validate() const {
        if (sim_start >= sim_end) throw ValidationError("simulation window must satisfy sim_start < sim_end");
        if (max_events_per_repo < 1) throw ValidationError("max_events_per_repo must be >= 1");
        if (window < 1) throw ValidationError("window length N must be >= 1");
    }
};

/// Reported events of one repo plus per-event class confidences (used by
/// mAP; baselines report 1).
struct SimulatedChain {
    std::string repo_id;
    std::vector<Event> events;
    std::vector<double> type_confidence;
    std::vector<double> group_confidence;
    bool truncated = false;
    std::size_t generated = 0;

    void push(const Event& e, double tconf, double gconf) {
        events.push_back(e);
        type_confidence.push_back(tconf);
        group_confidence.push_back(gconf);
    }

    EventChain chain() const { return {repo_id, events}; }
};

struct DecodedEvent {
    EventType type = EventType::Create;
    GroupId group = 0;
    double delay_hours = 0.0;
    double type_confidence = 1.0;
    double group_confidence = 1.0;
};

namespace detail {

inline int pick_class(const Eigen::RowVectorXd& probs, const std::vector<bool>& allowed, Rng* rng) {
    int best = -1;
    double best_p = -1.0;
    double total = 0.0;
    for (Eigen::Index k = 0; k < probs.size(); ++k) {
        if (!allowed[static_cast<std::size_t>(k)]) continue;
        total += probs(k);
        if (probs(k) > best_p) {
            best_p = probs(k);
            best = static_cast<int>(k);
        }
    }
    if (rng == nullptr || total <= 0.0) return best;
    double r = uniform01(*rng) * total;
    for (Eigen::Index k = 0; k < probs.size(); ++k) {
        if (!allowed[static_cast<std::size_t>(k)]) continue;
        r -= probs(k);
        if (r < 0.0) return static_cast<int>(k);
    }
    return best;
}

}  // namespace detail

/// Decodes row `b` of a model output. SOC is never emitted, nor is
/// NoEventForOneMonth when the artificial type is disabled.
inline DecodedEvent decode_output(const MtsOutput& out, Eigen::Index b, const FeatureFlags& flags, Rng* rng = nullptr) {
    std::vector<bool> type_ok(static_cast<std::size_t>(out.type_probs.cols()), true);
    type_ok[static_cast<std::size_t>(type_index(EventType::SOC))] = false;
    if (!flags.no_event_type) type_ok[static_cast<std::size_t>(type_index(EventType::NoEventForOneMonth))] = false;
    std::vector<bool> group_ok(static_cast<std::size_t>(out.group_probs.cols()), true);
    DecodedEvent d;
    const Eigen::RowVectorXd tp = out.type_probs.row(b);
    const Eigen::RowVectorXd gp = out.group_probs.row(b);
    const int t = detail::pick_class(tp, type_ok, rng);
    const int g = detail::pick_class(gp, group_ok, rng);
    d.type = static_cast<EventType>(t);
    d.group = g;
    d.type_confidence = tp(t);
    d.group_confidence = gp(g);
    d.delay_hours = decode_delay(std::max(0.0, out.delay(b)));
    return d;
}

namespace detail {

/// Shared clock/horizon loop. `next` produces the following event given the
/// current clock; returning nullopt ends the rollout.
inline SimulatedChain rollout(const std::string& repo, Timestamp clock, const SimConfig& cfg,
                              const std::function<std::optional<DecodedEvent>(Timestamp)>& next,
                              const std::function<void(const Event&)>& accepted = {}) {
    SimulatedChain out;
    out.repo_id = repo;
    while (out.generated < cfg.max_events_per_repo) {
        const auto d = next(clock);
        if (!d) break;
        const double seconds = d->delay_hours * static_cast<double>(kSecondsPerHour);
        if (!std::isfinite(seconds) || static_cast<double>(clock) + seconds >= static_cast<double>(cfg.sim_end)) break;
        const Timestamp ts = clock + static_cast<Timestamp>(std::llround(seconds));
        if (ts >= cfg.sim_end) break;
        const Event e{d->type, d->group, ts, hours_between(clock, ts)};
        ++out.generated;
        if (ts >= cfg.sim_start) out.push(e, d->type_confidence, d->group_confidence);
        if (accepted) accepted(e);
        clock = ts;
    }
    out.truncated = out.generated >= cfg.max_events_per_repo;
    return out;
}

}  // namespace detail

/// Recursive rollout from a SOC-led seed chain whose events precede
/// sim_start. Each step feeds the previous N encoded events (SOC-padded) to
/// the model and appends the decoded prediction.
inline SimulatedChain simulate_repo(const MtsModel& model, const FeatureContext& ctx, const EventChain& seed_chain,
                                    const SimConfig& cfg) {
    cfg.validate();
    if (!seed_chain.starts_with_soc()) throw ValidationError("seed chain " + seed_chain.repo_id + " must start with SOC");
    if (seed_chain.events.back().timestamp >= cfg.sim_start) {
        throw ValidationError("seed chain " + seed_chain.repo_id + " reaches into the simulation window");
    }
    const int n = cfg.window;
    const Eigen::MatrixXd encoded = encode_chain(seed_chain, ctx);
    SequenceBatch batch{n, 1, Eigen::MatrixXd(ctx.dim(), n)};
    fill_window(encoded, seed_chain.events.size(), n, batch, 0);
    const Eigen::VectorXd repo_vec = ctx.repo_block(seed_chain.repo_id);
    Rng rng(derive_seed(cfg.seed, io::fnv1a(seed_chain.repo_id)));
    Rng* sampler = cfg.sample ? &rng : nullptr;
    auto next = [&](Timestamp) -> std::optional<DecodedEvent> {
        return decode_output(model.forward(batch), 0, cfg.flags, sampler);
    };
    auto accepted = [&](const Event& e) {
        // Shift the window left by one and append the new event.
        for (int t = 0; t + 1 < n; ++t) batch.x.col(t) = batch.x.col(t + 1);
        detail::encode_into(e, seed_chain.repo_id, ctx, repo_vec, batch.x.col(n - 1));
    };
    return detail::rollout(seed_chain.repo_id, seed_chain.events.back().timestamp, cfg, next, accepted);
}

/// Teacher-forced prediction: one prediction per ground-truth event in
/// [sim_start, sim_end), each conditioned on the true previous N events.
/// Returns nullopt when the repo has no ground truth in the window.
inline std::optional<SimulatedChain> predict_single_events(const MtsModel& model, const FeatureContext& ctx,
                                                           const EventChain& truth, const SimConfig& cfg) {
    cfg.validate();
    if (!truth.starts_with_soc()) throw ValidationError("chain " + truth.repo_id + " must start with SOC");
    std::vector<std::size_t> positions;
    for (std::size_t i = 1; i < truth.events.size(); ++i) {
        const auto ts = truth.events[i].timestamp;
        if (ts >= cfg.sim_start && ts < cfg.sim_end) positions.push_back(i);
    }
    if (positions.empty()) return std::nullopt;
    const Eigen::MatrixXd encoded = encode_chain(truth, ctx);
    const int n = cfg.window;
    const int bs = static_cast<int>(positions.size());
    SequenceBatch batch{n, bs, Eigen::MatrixXd(ctx.dim(), static_cast<Eigen::Index>(n) * bs)};
    for (int b = 0; b < bs; ++b) fill_window(encoded, positions[static_cast<std::size_t>(b)], n, batch, b);
    const MtsOutput out = model.forward(batch);
    Rng rng(derive_seed(cfg.seed, io::fnv1a(truth.repo_id)));
    SimulatedChain result;
    result.repo_id = truth.repo_id;
    for (int b = 0; b < bs; ++b) {
        const auto d = decode_output(out, b, cfg.flags, cfg.sample ? &rng : nullptr);
        const Timestamp prev = truth.events[positions[static_cast<std::size_t>(b)] - 1].timestamp;
        const double seconds = std::min(d.delay_hours * static_cast<double>(kSecondsPerHour), 1e15);
        const Timestamp ts = prev + static_cast<Timestamp>(std::llround(seconds));
        result.push({d.type, d.group, ts, hours_between(prev, ts)}, d.type_confidence, d.group_confidence);
    }
    result.generated = result.events.size();
    return result;
}

// ---------------------------------------------------------------------------
// Baselines

/// Uniform type over the 12 classes, uniform group, delay uniform between
/// the smallest and largest historical inter-event delay ([0, 720] with
/// fewer than two historical events).
inline SimulatedChain baseline_random(const EventChain& history, const SimConfig& cfg, int total_groups,
                                      std::uint64_t seed) {
    cfg.validate();
    if (history.empty()) return {history.repo_id, {}, {}, {}, false, 0};
    std::vector<double> delays;
    std::size_t real = 0;
    for (std::size_t i = 0; i < history.events.size(); ++i) {
        if (history.events[i].type == EventType::SOC) continue;
        ++real;
        if (i >= 2) delays.push_back(history.events[i].delay_hours);
    }
    double lo = 0.0, hi = kMonthHours;
    if (real >= 2 && !delays.empty()) {
        lo = *std::min_element(delays.begin(), delays.end());
        hi = *std::max_element(delays.begin(), delays.end());
    }
    Rng rng(derive_seed(seed, io::fnv1a(history.repo_id)));
    auto next = [&](Timestamp) -> std::optional<DecodedEvent> {
        DecodedEvent d;
        d.type = static_cast<EventType>(uniform_index(rng, kNumEventTypes));
        d.group = static_cast<GroupId>(uniform_index(rng, static_cast<std::size_t>(total_groups)));
        d.delay_hours = lo == hi ? lo : uniform_real(rng, lo, hi);
        return d;
    };
    return detail::rollout(history.repo_id, history.events.back().timestamp, cfg, next);
}

/// Repeats the last pre-simulation event's (type, group, delay).
inline SimulatedChain baseline_previous(const EventChain& history, const SimConfig& cfg) {
    cfg.validate();
    if (history.empty() || history.events.back().type == EventType::SOC) {
        return {history.repo_id, {}, {}, {}, false, 0};
    }
    const Event last = history.events.back();
    auto next = [&](Timestamp) -> std::optional<DecodedEvent> {
        DecodedEvent d;
        d.type = last.type;
        d.group = last.group;
        d.delay_hours = last.delay_hours;
        return d;
    };
    return detail::rollout(history.repo_id, last.timestamp, cfg, next);
}

/// NoEventForOneMonth every 720h from sim_start; independent of history.
inline SimulatedChain baseline_noevent(const std::string& repo, const SimConfig& cfg, GroupId artificial_group) {
    cfg.validate();
    auto next = [&](Timestamp) -> std::optional<DecodedEvent> {
        DecodedEvent d;
        d.type = EventType::NoEventForOneMonth;
        d.group = artificial_group;
        d.delay_hours = kMonthHours;
        return d;
    };
    return detail::rollout(repo, cfg.sim_start, cfg, next);
}

// ---------------------------------------------------------------------------
// Simulation files: one line per event
//   repo_id  event_type  group  timestamp  delay_hours  [type_conf  group_conf]

inline void write_simulation(std::ostream& out, const std::vector<SimulatedChain>& chains) {
    out << "# repo_id\tevent_type\tgroup\ttimestamp\tdelay_hours\ttype_confidence\tgroup_confidence\n";
    for (const auto& c : chains) {
        for (std::size_t i = 0; i < c.events.size(); ++i) {
            const Event& e = c.events[i];
            out << c.repo_id << '\t' << to_string(e.type) << '\t' << e.group << '\t' << e.timestamp << '\t'
                << io::exact_decimal(e.delay_hours) << '\t' << io::exact_decimal(c.type_confidence[i]) << '\t'
                << io::exact_decimal(c.group_confidence[i]) << '\n';
        }
    }
}

inline std::map<std::string, SimulatedChain> read_simulation(std::istream& in) {
    std::map<std::string, SimulatedChain> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto view = io::strip_cr(line);
        if (view.empty() || view.front() == '#') continue;
        const auto f = io::split(view);
        if (f.size() != 5 && f.size() != 7) {
            throw DataError("simulation file line " + std::to_string(lineno) + ": expected 5 or 7 fields");
        }
        const auto type = parse_event_type(f[1]);
        if (!type) throw DataError("simulation file line " + std::to_string(lineno) + ": unknown event type");
        Event e{*type, static_cast<GroupId>(io::parse_int_or_throw(f[2], "group")),
                io::parse_int_or_throw(f[3], "timestamp"), io::parse_double_or_throw(f[4], "delay_hours")};
        const double tc = f.size() == 7 ? io::parse_double_or_throw(f[5], "type_confidence") : 1.0;
        const double gc = f.size() == 7 ? io::parse_double_or_throw(f[6], "group_confidence") : 1.0;
        auto& chain = out[std::string(f[0])];
        chain.repo_id = std::string(f[0]);
        chain.push(e, tc, gc);
        chain.generated = chain.events.size();
    }
    return out;
}

/// Ground truth in the simulation file format (confidences 1).
inline SimulatedChain as_reported(const EventChain& chain) {
    SimulatedChain out;
    out.repo_id = chain.repo_id;
    for (const Event& e : chain.events) {
        if (e.type != EventType::SOC) out.push(e, 1.0, 1.0);
    }
    out.generated = out.events.size();
    return out;
}

}  // namespace gitevolve

// Shared domain vocabulary: event types, events, per-repo chains and the
// train/validation/simulation time windows.

#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gitevolve/error.hpp"

namespace gitevolve {

/// Model classes occupy [0, 12). NoEventInSimPeriod is an evaluation-only
/// placeholder and never a model class.
enum class EventType : std::uint8_t {
    Create = 0,
    Delete,
    Fork,
    Issues,
    IssueComment,
    PullRequest,
    PullRequestReviewComment,
    Push,
    CommitComment,
    Watch,
    SOC,
    NoEventForOneMonth,
    NoEventInSimPeriod,
};

inline constexpr int kNumEventTypes = 12;
inline constexpr int kNumConcreteTypes = 10;
inline constexpr std::int64_t kSecondsPerHour = 3600;
inline constexpr double kMonthHours = 720.0;
inline constexpr std::int64_t kMonthSeconds = 720 * kSecondsPerHour;

using GroupId = int;
/// Group of the SOC sentinel (it has no actor).
inline constexpr GroupId kNoGroup = -1;
/// Group token carried by the NoEventInSimPeriod placeholder.
inline constexpr GroupId kPlaceholderGroup = -2;

using Timestamp = std::int64_t;
inline constexpr Timestamp kMinTime = std::numeric_limits<Timestamp>::min();
inline constexpr Timestamp kMaxTime = std::numeric_limits<Timestamp>::max();

inline constexpr int type_index(EventType t) { return static_cast<int>(t); }

inline constexpr bool is_concrete(EventType t) { return type_index(t) < kNumConcreteTypes; }

inline constexpr std::array<std::string_view, 13> kEventTypeNames = {
    "Create",      "Delete", "Fork",  "Issues",
    "IssueComment", "PullRequest", "PullRequestReviewComment", "Push",
    "CommitComment", "Watch", "SOC", "NoEventForOneMonth",
    "NoEventInSimPeriod",
};

inline std::string_view to_string(EventType t) { return kEventTypeNames[type_index(t)]; }

/// Accepts both the short names above and GitHub archive names ("PushEvent").
inline std::optional<EventType> parse_event_type(std::string_view name) {
    constexpr std::string_view suffix = "Event";
    if (name.size() > suffix.size() && name.substr(name.size() - suffix.size()) == suffix &&
        name != "NoEventForOneMonth") {
        name.remove_suffix(suffix.size());
    }
    for (int i = 0; i < static_cast<int>(kEventTypeNames.size()); ++i) {
        if (kEventTypeNames[i] == name) return static_cast<EventType>(i);
    }
    return std::nullopt;
}

inline EventType event_type_from_index(int i) {
    if (i < 0 || i > type_index(EventType::NoEventInSimPeriod)) {
        throw ValidationError("event type index out of range: " + std::to_string(i));
    }
    return static_cast<EventType>(i);
}

inline double hours_between(Timestamp from, Timestamp to) {
    return static_cast<double>(to - from) / static_cast<double>(kSecondsPerHour);
}

struct Event {
    EventType type = EventType::SOC;
    GroupId group = kNoGroup;
    Timestamp timestamp = 0;
    double delay_hours = 0.0;

    friend bool operator==(const Event&, const Event&) = default;
};

struct EventChain {
    std::string repo_id;
    std::vector<Event> events;

    bool empty() const { return events.empty(); }
    std::size_t size() const { return events.size(); }
    bool starts_with_soc() const { return !events.empty() && events.front().type == EventType::SOC; }

    friend bool operator==(const EventChain&, const EventChain&) = default;
};

/// Sets every delay from timestamp differences; the first event gets 0.
inline void recompute_delays(std::vector<Event>& events) {
    for (std::size_t i = 0; i < events.size(); ++i) {
        events[i].delay_hours = i == 0 ? 0.0 : hours_between(events[i - 1].timestamp, events[i].timestamp);
    }
}

/// Throws DataError when the chain breaks ordering or SOC placement rules.
inline void validate_chain(const EventChain& chain) {
    for (std::size_t i = 0; i < chain.events.size(); ++i) {
        const Event& e = chain.events[i];
        if (e.type == EventType::SOC && i != 0) {
            throw DataError("chain " + chain.repo_id + ": SOC at position " + std::to_string(i));
        }
        if (i > 0 && e.timestamp < chain.events[i - 1].timestamp) {
            throw DataError("chain " + chain.repo_id + ": timestamps decrease at position " + std::to_string(i));
        }
        if (!(e.delay_hours >= 0.0)) {
            throw DataError("chain " + chain.repo_id + ": negative delay at position " + std::to_string(i));
        }
    }
}

/// Events with start <= timestamp < end, order preserved. SOC is not re-added.
inline EventChain chain_slice(const EventChain& chain, Timestamp start, Timestamp end) {
    if (start >= end) {
        throw ValidationError("chain_slice: empty window [" + std::to_string(start) + ", " + std::to_string(end) + ")");
    }
    EventChain out{chain.repo_id, {}};
    for (const Event& e : chain.events) {
        if (e.timestamp >= start && e.timestamp < end) out.events.push_back(e);
    }
    return out;
}

/// Events strictly before `end`.
inline EventChain chain_prefix(const EventChain& chain, Timestamp end) {
    EventChain out{chain.repo_id, {}};
    for (const Event& e : chain.events) {
        if (e.timestamp < end) out.events.push_back(e);
    }
    return out;
}

struct TimeWindows {
    Timestamp train_start = 0;
    Timestamp train_end = 0;
    Timestamp val_start = 0;
    Timestamp val_end = 0;
    Timestamp sim_start = 0;
    Timestamp sim_end = 0;

    void validate() const {
        if (!(train_start < train_end && train_end <= val_start && val_start < val_end && val_end <= sim_start &&
              sim_start < sim_end)) {
            throw ValidationError(
                "time windows must satisfy train_start < train_end <= val_start < val_end <= sim_start < sim_end");
        }
    }
};

}  // namespace gitevolve

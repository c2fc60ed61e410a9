// Raw event logs and profile tables -> per-repo event chains.
//
// File formats (UTF-8, tab separated):
//   events: repo_id  user_id  event_type_name  timestamp_seconds   (no header)
//   users:  header, then user_id user_type country github_impact followers
//           followees repos_created forks_on_created watches_on_created
//   repos:  header, then repo_id creator_user_id main_language creator_type
//           description
//
// Chains get a SOC event at the first real event's timestamp; inactivity of a
// full month or more is made explicit with NoEventForOneMonth events.

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "gitevolve/core_types.hpp"
#include "gitevolve/io_util.hpp"
#include "gitevolve/random.hpp"

namespace gitevolve {

// ---------------------------------------------------------------------------
// Delay normalization

inline double encode_delay(double hours) {
    if (!(hours >= 0.0)) throw ValidationError("encode_delay: negative or NaN input");
    return 10.0 * std::log10(hours + 1.0);
}

inline double decode_delay(double encoded) {
    if (!(encoded >= 0.0)) throw ValidationError("decode_delay: negative or NaN input");
    return std::pow(10.0, encoded / 10.0) - 1.0;
}

// ---------------------------------------------------------------------------
// Records and profiles

struct RawEventRecord {
    std::string repo_id;
    std::string user_id;
    std::string event_type_name;
    Timestamp timestamp = 0;
};

enum class UserType : std::uint8_t { Individual = 0, Organization = 1 };

struct UserProfile {
    std::string user_id;
    UserType user_type = UserType::Individual;
    std::string country;
    double github_impact = 0.0;
    double follower_count = 0.0;
    double followee_count = 0.0;
    double repos_created_count = 0.0;
    double forks_on_created_repos = 0.0;
    double watches_on_created_repos = 0.0;

    std::array<double, 2> user_type_onehot() const {
        return user_type == UserType::Individual ? std::array<double, 2>{1.0, 0.0} : std::array<double, 2>{0.0, 1.0};
    }
};

inline constexpr int kDescriptionDim = 150;

struct RepoProfile {
    std::string repo_id;
    std::string creator_user_id;
    int main_language_id = 0;
    std::array<double, 2> creator_type_onehot{1.0, 0.0};
    std::vector<double> description_vector = std::vector<double>(kDescriptionDim, 0.0);

    // Kept so profile files can be rewritten verbatim.
    std::string main_language;
    std::string description;
};

inline constexpr Timestamp kMaxAcceptedTimestamp = 4102444800;  // 2100-01-01

inline std::optional<UserType> parse_user_type(std::string_view s) {
    if (s == "individual" || s == "User" || s == "user") return UserType::Individual;
    if (s == "organization" || s == "Organization" || s == "org") return UserType::Organization;
    return std::nullopt;
}

inline std::string_view to_string(UserType t) { return t == UserType::Individual ? "individual" : "organization"; }

// Frozen lookup tables: the position + 1 is the code, unknown maps to 0.
inline constexpr std::array<std::string_view, 60> kCountryCodes = {
    "US", "CN", "IN", "DE", "GB", "FR", "BR", "RU", "JP", "CA", "KR", "ES", "NL", "IT", "AU",
    "PL", "SE", "UA", "CH", "TW", "IL", "ID", "VN", "CZ", "AR", "MX", "BE", "AT", "DK", "FI",
    "NO", "PT", "TR", "SG", "HK", "IR", "RO", "HU", "GR", "NZ", "IE", "ZA", "CO", "CL", "PK",
    "TH", "MY", "PH", "EG", "NG", "BD", "BG", "BY", "SK", "RS", "HR", "LT", "LV", "EE", "PE"};

inline constexpr std::array<std::string_view, 40> kLanguages = {
    "JavaScript", "Python", "Java", "C", "C++", "Go", "Ruby", "PHP", "C#", "Shell",
    "TypeScript", "Rust", "Perl", "Objective-C", "Swift", "Scala", "Kotlin", "Lua", "Haskell", "R",
    "PowerShell", "Erlang", "Elixir", "Clojure", "Assembly", "HTML", "CSS", "Makefile", "Vim script", "Emacs Lisp",
    "Dart", "Groovy", "OCaml", "Julia", "Matlab", "Visual Basic", "Batchfile", "Tcl", "CoffeeScript", "Dockerfile"};

inline int country_code(std::string_view country) {
    for (std::size_t i = 0; i < kCountryCodes.size(); ++i) {
        if (kCountryCodes[i] == country) return static_cast<int>(i) + 1;
    }
    return 0;
}

inline int language_code(std::string_view language) {
    for (std::size_t i = 0; i < kLanguages.size(); ++i) {
        if (kLanguages[i] == language) return static_cast<int>(i) + 1;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Description vectors

inline std::vector<std::string> tokenize_lower(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || c >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

/// Deterministic unit vector for a token, seeded by its FNV-1a hash.
inline std::vector<double> token_vector(std::string_view token) {
    Rng rng(io::fnv1a(token));
    std::vector<double> v(kDescriptionDim);
    double norm2 = 0.0;
    for (double& x : v) {
        x = standard_normal(rng);
        norm2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : v) x *= inv;
    return v;
}

/// Average of token vectors; an empty description gives the zero vector.
inline std::vector<double> description_vector(std::string_view text) {
    std::vector<double> out(kDescriptionDim, 0.0);
    const auto tokens = tokenize_lower(text);
    if (tokens.empty()) return out;
    for (const auto& t : tokens) {
        const auto v = token_vector(t);
        for (int i = 0; i < kDescriptionDim; ++i) out[i] += v[i];
    }
    const double inv = 1.0 / static_cast<double>(tokens.size());
    for (double& x : out) x *= inv;
    return out;
}

// ---------------------------------------------------------------------------
// Event log parsing

struct IngestResult {
    /// Chains keyed by repo id; groups are kNoGroup until users are grouped.
    std::map<std::string, EventChain> chains;
    /// Acting user per chain event (parallel to chain.events, "" for SOC).
    std::map<std::string, std::vector<std::string>> actors;
    std::size_t total_records = 0;
    std::size_t rejected_unknown_type = 0;
    std::size_t rejected_bad_timestamp = 0;
    std::size_t rejected_malformed = 0;

    std::size_t rejected() const { return rejected_unknown_type + rejected_bad_timestamp + rejected_malformed; }
    double rejected_fraction() const {
        return total_records == 0 ? 0.0 : static_cast<double>(rejected()) / static_cast<double>(total_records);
    }
};

/// Builds sorted chains from individually parsed records. Unknown or
/// non-concrete types and out-of-range timestamps are counted and dropped.
inline IngestResult parse_event_log(const std::vector<RawEventRecord>& records) {
    IngestResult result;
    struct Pending {
        std::size_t order;
        Timestamp ts;
        EventType type;
        std::string user;
    };
    std::map<std::string, std::vector<Pending>> by_repo;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        ++result.total_records;
        const auto type = parse_event_type(r.event_type_name);
        if (!type || !is_concrete(*type)) {
            ++result.rejected_unknown_type;
            continue;
        }
        if (r.timestamp < 0 || r.timestamp > kMaxAcceptedTimestamp) {
            ++result.rejected_bad_timestamp;
            continue;
        }
        by_repo[r.repo_id].push_back({i, r.timestamp, *type, r.user_id});
    }
    for (auto& [repo, pending] : by_repo) {
        std::stable_sort(pending.begin(), pending.end(),
                         [](const Pending& a, const Pending& b) { return a.ts < b.ts; });
        EventChain chain{repo, {}};
        std::vector<std::string> actors;
        chain.events.reserve(pending.size() + 1);
        chain.events.push_back({EventType::SOC, kNoGroup, pending.front().ts, 0.0});
        actors.emplace_back();
        for (const auto& p : pending) {
            chain.events.push_back({p.type, kNoGroup, p.ts, 0.0});
            actors.push_back(p.user);
        }
        recompute_delays(chain.events);
        result.chains.emplace(repo, std::move(chain));
        result.actors.emplace(repo, std::move(actors));
    }
    return result;
}

/// Parses the tab-separated events stream; malformed lines are counted.
inline IngestResult parse_event_log(std::istream& in) {
    std::vector<RawEventRecord> records;
    std::size_t malformed = 0;
    std::string line;
    while (std::getline(in, line)) {
        const auto view = io::strip_cr(line);
        if (view.empty() || view.front() == '#') continue;
        const auto fields = io::split(view);
        std::int64_t ts = 0;
        if (fields.size() != 4 || fields[0].empty() || fields[1].empty() || !io::parse_int64(fields[3], ts)) {
            ++malformed;
            continue;
        }
        records.push_back({std::string(fields[0]), std::string(fields[1]), std::string(fields[2]), ts});
    }
    IngestResult result = parse_event_log(records);
    result.total_records += malformed;
    result.rejected_malformed += malformed;
    return result;
}

/// Throws DataError when more than `max_fraction` of input lines were rejected.
inline void check_rejection_rate(const IngestResult& r, double max_fraction = 0.01) {
    if (r.rejected_fraction() > max_fraction) {
        throw DataError("rejected " + std::to_string(r.rejected()) + " of " + std::to_string(r.total_records) +
                        " event records (limit " + io::fixed(max_fraction * 100.0, 2) + "%)");
    }
}

/// Writes chains back out in the events file format (SOC rows omitted).
inline void write_event_log(std::ostream& out, const IngestResult& r) {
    for (const auto& [repo, chain] : r.chains) {
        const auto& actors = r.actors.at(repo);
        for (std::size_t i = 0; i < chain.events.size(); ++i) {
            const Event& e = chain.events[i];
            if (!is_concrete(e.type)) continue;
            out << repo << '\t' << actors[i] << '\t' << to_string(e.type) << "Event\t" << e.timestamp << '\n';
        }
    }
}

inline void write_event_log(std::ostream& out, const std::vector<RawEventRecord>& records) {
    for (const auto& r : records) {
        out << r.repo_id << '\t' << r.user_id << '\t' << r.event_type_name << '\t' << r.timestamp << '\n';
    }
}

// ---------------------------------------------------------------------------
// Profile tables

inline std::map<std::string, UserProfile> read_user_profiles(std::istream& in) {
    std::map<std::string, UserProfile> out;
    std::string line;
    bool header = true;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto view = io::strip_cr(line);
        if (header) {
            header = false;
            continue;
        }
        if (view.empty()) continue;
        const auto f = io::split(view);
        if (f.size() != 9) throw DataError("users file line " + std::to_string(lineno) + ": expected 9 fields");
        UserProfile p;
        p.user_id = std::string(f[0]);
        const auto type = parse_user_type(f[1]);
        if (!type) throw DataError("users file line " + std::to_string(lineno) + ": bad user type");
        p.user_type = *type;
        p.country = std::string(f[2]);
        p.github_impact = io::parse_double_or_throw(f[3], "github_impact");
        double* counts[] = {&p.follower_count,      &p.followee_count,         &p.repos_created_count,
                            &p.forks_on_created_repos, &p.watches_on_created_repos};
        for (int i = 0; i < 5; ++i) {
            *counts[i] = io::parse_double_or_throw(f[4 + i], "count");
            if (!(*counts[i] >= 0.0)) throw DataError("users file line " + std::to_string(lineno) + ": negative count");
        }
        out[p.user_id] = std::move(p);
    }
    return out;
}

inline void write_user_profiles(std::ostream& out, const std::map<std::string, UserProfile>& users) {
    out << "user_id\tuser_type\tcountry\tgithub_impact\tfollowers\tfollowees\trepos_created\tforks_on_created\t"
           "watches_on_created\n";
    for (const auto& [id, p] : users) {
        out << id << '\t' << to_string(p.user_type) << '\t' << p.country << '\t' << io::exact_decimal(p.github_impact)
            << '\t' << io::exact_decimal(p.follower_count) << '\t' << io::exact_decimal(p.followee_count) << '\t'
            << io::exact_decimal(p.repos_created_count) << '\t' << io::exact_decimal(p.forks_on_created_repos) << '\t'
            << io::exact_decimal(p.watches_on_created_repos) << '\n';
    }
}

inline RepoProfile make_repo_profile(std::string repo_id, std::string creator, std::string language,
                                     UserType creator_type, std::string description) {
    RepoProfile p;
    p.repo_id = std::move(repo_id);
    p.creator_user_id = std::move(creator);
    p.main_language_id = language_code(language);
    p.main_language = std::move(language);
    p.creator_type_onehot =
        creator_type == UserType::Individual ? std::array<double, 2>{1.0, 0.0} : std::array<double, 2>{0.0, 1.0};
    p.description_vector = description_vector(description);
    p.description = std::move(description);
    return p;
}

inline std::map<std::string, RepoProfile> read_repo_profiles(std::istream& in) {
    std::map<std::string, RepoProfile> out;
    std::string line;
    bool header = true;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto view = io::strip_cr(line);
        if (header) {
            header = false;
            continue;
        }
        if (view.empty()) continue;
        const auto f = io::split(view);
        if (f.size() != 5) throw DataError("repos file line " + std::to_string(lineno) + ": expected 5 fields");
        if (f[1].empty()) throw DataError("repos file line " + std::to_string(lineno) + ": missing creator");
        const auto ct = parse_user_type(f[3]);
        if (!ct) throw DataError("repos file line " + std::to_string(lineno) + ": bad creator type");
        auto p = make_repo_profile(std::string(f[0]), std::string(f[1]), std::string(f[2]), *ct, std::string(f[4]));
        out[p.repo_id] = std::move(p);
    }
    return out;
}

inline void write_repo_profiles(std::ostream& out, const std::map<std::string, RepoProfile>& repos) {
    out << "repo_id\tcreator_user_id\tmain_language\tcreator_type\tdescription\n";
    for (const auto& [id, p] : repos) {
        out << id << '\t' << p.creator_user_id << '\t' << p.main_language << '\t'
            << (p.creator_type_onehot[0] == 1.0 ? "individual" : "organization") << '\t' << p.description << '\n';
    }
}

// ---------------------------------------------------------------------------
// Inactivity events

/// Inserts floor(gap / 720h) NoEventForOneMonth events, 720h apart, into
/// every gap between consecutive events. The event after the inserted ones
/// keeps the remainder as its delay, so all delays end up <= 720h.
inline EventChain inject_no_event(const EventChain& chain, GroupId artificial_group) {
    EventChain out{chain.repo_id, {}};
    out.events.reserve(chain.events.size());
    for (std::size_t i = 0; i < chain.events.size(); ++i) {
        Event e = chain.events[i];
        if (i > 0) {
            Timestamp prev = out.events.back().timestamp;
            const Timestamp gap = e.timestamp - prev;
            for (Timestamp j = 0; j < gap / kMonthSeconds; ++j) {
                prev += kMonthSeconds;
                out.events.push_back({EventType::NoEventForOneMonth, artificial_group, prev, kMonthHours});
            }
            e.delay_hours = hours_between(out.events.back().timestamp, e.timestamp);
        }
        out.events.push_back(e);
    }
    return out;
}

/// Inverse of inject_no_event: drops artificial events and recomputes delays.
inline EventChain strip_no_event(const EventChain& chain) {
    EventChain out{chain.repo_id, {}};
    for (const Event& e : chain.events) {
        if (e.type != EventType::NoEventForOneMonth) out.events.push_back(e);
    }
    recompute_delays(out.events);
    return out;
}

}  // namespace gitevolve

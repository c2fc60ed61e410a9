// User grouping: profile feature table, k-means (k-means++ seeding + Lloyd),
// elbow/silhouette scans, and per-group activity statistics.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gitevolve/core_types.hpp"
#include "gitevolve/ingestion.hpp"
#include "gitevolve/io_util.hpp"
#include "gitevolve/random.hpp"

namespace gitevolve {

inline constexpr int kUserFeatureDim = 9;
inline constexpr int kActivityBlockDim = 14;
inline constexpr int kActivityDim = 2 * kActivityBlockDim;

/// Profile row in fixed order: user type one-hot (2), country code,
/// GitHub impact, followers, followees, repos created, forks and watches on
/// created repos. Count columns go through the delay log map.
inline std::array<double, kUserFeatureDim> user_feature_row(const UserProfile& p) {
    const auto onehot = p.user_type_onehot();
    return {onehot[0],
            onehot[1],
            static_cast<double>(country_code(p.country)),
            p.github_impact,
            encode_delay(p.follower_count),
            encode_delay(p.followee_count),
            encode_delay(p.repos_created_count),
            encode_delay(p.forks_on_created_repos),
            encode_delay(p.watches_on_created_repos)};
}

struct UserFeatureTable {
    std::vector<std::string> user_ids;
    Eigen::MatrixXd rows;  // n x 9
    std::size_t missing_profiles = 0;
};

/// One row per user acting in [start, end). Users without a profile get a
/// zero row and are counted.
inline UserFeatureTable build_user_features(const std::map<std::string, UserProfile>& profiles,
                                            const IngestResult& ingest, Timestamp start, Timestamp end) {
    std::set<std::string> users;
    for (const auto& [repo, chain] : ingest.chains) {
        const auto& actors = ingest.actors.at(repo);
        for (std::size_t i = 0; i < chain.events.size(); ++i) {
            const auto& e = chain.events[i];
            if (is_concrete(e.type) && e.timestamp >= start && e.timestamp < end) users.insert(actors[i]);
        }
    }
    UserFeatureTable table;
    table.user_ids.assign(users.begin(), users.end());
    table.rows = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(users.size()), kUserFeatureDim);
    for (std::size_t i = 0; i < table.user_ids.size(); ++i) {
        const auto it = profiles.find(table.user_ids[i]);
        if (it == profiles.end()) {
            ++table.missing_profiles;
            continue;
        }
        const auto row = user_feature_row(it->second);
        for (int j = 0; j < kUserFeatureDim; ++j) table.rows(static_cast<Eigen::Index>(i), j) = row[j];
    }
    return table;
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansResult {
    Eigen::MatrixXd centroids;  // k x d
    std::vector<int> assignment;
    double inertia = 0.0;
    /// Inertia after every assignment step, starting with the seeding.
    std::vector<double> inertia_history;
    int iterations = 0;
};

namespace detail {

inline double squared_distance(const Eigen::MatrixXd& a, Eigen::Index i, const Eigen::MatrixXd& b, Eigen::Index j) {
    return (a.row(i) - b.row(j)).squaredNorm();
}

/// Nearest centroid per point (lowest index on ties). Returns whether any
/// label changed and writes the total squared distance.
inline bool assign_nearest(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids, std::vector<int>& labels,
                           std::vector<double>& dist, double& inertia) {
    bool changed = false;
    inertia = 0.0;
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
            const double d = squared_distance(points, i, centroids, c);
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(c);
            }
        }
        if (labels[i] != best) {
            labels[i] = best;
            changed = true;
        }
        dist[i] = best_d;
        inertia += best_d;
    }
    return changed;
}

inline Eigen::MatrixXd kmeanspp_seed(const Eigen::MatrixXd& points, int k, Rng& rng) {
    const Eigen::Index n = points.rows();
    Eigen::MatrixXd centroids(k, points.cols());
    centroids.row(0) = points.row(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n))));
    std::vector<double> d2(n);
    for (Eigen::Index i = 0; i < n; ++i) d2[i] = squared_distance(points, i, centroids, 0);
    for (int c = 1; c < k; ++c) {
        double total = 0.0;
        for (double v : d2) total += v;
        Eigen::Index pick = 0;
        if (total <= 0.0) {
            pick = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n)));
        } else {
            double r = uniform01(rng) * total;
            pick = n - 1;
            for (Eigen::Index i = 0; i < n; ++i) {
                r -= d2[i];
                if (r < 0.0 && d2[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
            while (d2[pick] <= 0.0 && pick > 0) --pick;
        }
        centroids.row(c) = points.row(pick);
        for (Eigen::Index i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(points, i, centroids, c));
    }
    return centroids;
}

}  // namespace detail

/// Lloyd iterations from k-means++ seeds. Stops when no label changes, when
/// the relative inertia improvement drops below `tol`, or after `max_iter`
/// update steps. An emptied cluster is re-seeded at the point farthest from
/// its current centroid.
inline KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iter = 300,
                           double tol = 1e-6) {
    const Eigen::Index n = points.rows();
    if (k < 1) throw ValidationError("kmeans: k must be >= 1");
    if (points.cols() < 1) throw ValidationError("kmeans: points need at least one dimension");
    if (n < k) throw ValidationError("kmeans: fewer points (" + std::to_string(n) + ") than clusters (" +
                                     std::to_string(k) + ")");
    Rng rng(seed);
    KMeansResult res;
    res.centroids = detail::kmeanspp_seed(points, k, rng);
    res.assignment.assign(static_cast<std::size_t>(n), -1);
    std::vector<double> dist(static_cast<std::size_t>(n));
    detail::assign_nearest(points, res.centroids, res.assignment, dist, res.inertia);
    res.inertia_history.push_back(res.inertia);

    for (int it = 0; it < max_iter; ++it) {
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
        std::vector<Eigen::Index> counts(k, 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(res.assignment[i]) += points.row(i);
            ++counts[res.assignment[i]];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                res.centroids.row(c) = sums.row(c) / static_cast<double>(counts[c]);
            }
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) continue;
            Eigen::Index far = 0;
            double far_d = -1.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                const double d = detail::squared_distance(points, i, res.centroids, res.assignment[i]);
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            res.centroids.row(c) = points.row(far);
            --counts[res.assignment[far]];
            res.assignment[far] = c;
            counts[c] = 1;
        }
        const double prev = res.inertia;
        const bool changed = detail::assign_nearest(points, res.centroids, res.assignment, dist, res.inertia);
        res.inertia_history.push_back(res.inertia);
        res.iterations = it + 1;
        if (!changed) break;
        if (prev > 0.0 && (prev - res.inertia) < tol * prev) break;
        if (prev == 0.0) break;
    }
    return res;
}

/// Mean silhouette coefficient; singleton clusters score 0.
inline double silhouette(const Eigen::MatrixXd& points, const std::vector<int>& labels, int k) {
    const Eigen::Index n = points.rows();
    if (n < 2 || k < 2) return 0.0;
    std::vector<Eigen::Index> sizes(k, 0);
    for (int l : labels) ++sizes[l];
    double total = 0.0;
    std::vector<double> sum_by_cluster(k);
    for (Eigen::Index i = 0; i < n; ++i) {
        std::fill(sum_by_cluster.begin(), sum_by_cluster.end(), 0.0);
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j != i) sum_by_cluster[labels[j]] += std::sqrt(detail::squared_distance(points, i, points, j));
        }
        const int own = labels[i];
        if (sizes[own] <= 1) continue;
        const double a = sum_by_cluster[own] / static_cast<double>(sizes[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            if (c != own && sizes[c] > 0) b = std::min(b, sum_by_cluster[c] / static_cast<double>(sizes[c]));
        }
        if (!std::isfinite(b)) continue;
        const double denom = std::max(a, b);
        if (denom > 0.0) total += (b - a) / denom;
    }
    return total / static_cast<double>(n);
}

struct KScanRow {
    int k = 0;
    double inertia = 0.0;
    double silhouette = 0.0;
};

/// Elbow (inertia) and silhouette per candidate k.
inline std::vector<KScanRow> scan_k(const Eigen::MatrixXd& points, const std::vector<int>& ks, std::uint64_t seed,
                                    int max_iter = 300, double tol = 1e-6) {
    std::vector<KScanRow> rows;
    for (int k : ks) {
        const auto res = kmeans(points, k, seed, max_iter, tol);
        rows.push_back({k, res.inertia, silhouette(points, res.assignment, k)});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Group model

/// Per-dimension z-score parameters; constant columns keep scale 1.
struct Standardizer {
    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd scale;

    static Standardizer fit(const Eigen::MatrixXd& rows) {
        Standardizer s;
        s.mean = rows.colwise().mean();
        s.scale = Eigen::RowVectorXd::Ones(rows.cols());
        for (Eigen::Index j = 0; j < rows.cols(); ++j) {
            const double var = (rows.col(j).array() - s.mean(j)).square().mean();
            if (var > 0.0) s.scale(j) = std::sqrt(var);
        }
        return s;
    }

    Eigen::MatrixXd apply(const Eigen::MatrixXd& rows) const {
        return (rows.rowwise() - mean).array().rowwise() / scale.array();
    }
};

struct UserGroupModel {
    int k = 0;
    int dim = kUserFeatureDim;
    std::uint64_t seed = 0;
    Standardizer standardizer;
    Eigen::MatrixXd centroids;  // k x dim, standardized space
    std::map<std::string, GroupId> assignment;

    /// Index of the extra group reserved for NoEventForOneMonth events.
    GroupId artificial_group() const { return k; }
    int total_groups() const { return k + 1; }

    GroupId nearest(const std::array<double, kUserFeatureDim>& raw_row) const {
        Eigen::MatrixXd row(1, kUserFeatureDim);
        for (int j = 0; j < kUserFeatureDim; ++j) row(0, j) = raw_row[j];
        const Eigen::MatrixXd z = standardizer.apply(row);
        GroupId best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
            const double d = (z.row(0) - centroids.row(c)).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = static_cast<GroupId>(c);
            }
        }
        return best;
    }

    /// Known users use their fitted group; unseen users go to the nearest
    /// centroid by profile (zero row when no profile exists).
    GroupId group_of(const std::string& user, const std::map<std::string, UserProfile>& profiles) const {
        if (const auto it = assignment.find(user); it != assignment.end()) return it->second;
        const auto p = profiles.find(user);
        std::array<double, kUserFeatureDim> row{};
        if (p != profiles.end()) row = user_feature_row(p->second);
        return nearest(row);
    }
};

struct GroupingConfig {
    int k = 100;
    std::uint64_t seed = 42;
    int max_iter = 300;
    double tol = 1e-6;
};

inline UserGroupModel fit_user_groups(const UserFeatureTable& table, const GroupingConfig& cfg,
                                      KMeansResult* diagnostics = nullptr) {
    UserGroupModel model;
    model.k = cfg.k;
    model.seed = cfg.seed;
    model.standardizer = Standardizer::fit(table.rows);
    const Eigen::MatrixXd z = model.standardizer.apply(table.rows);
    auto res = kmeans(z, cfg.k, cfg.seed, cfg.max_iter, cfg.tol);
    model.centroids = res.centroids;
    for (std::size_t i = 0; i < table.user_ids.size(); ++i) model.assignment[table.user_ids[i]] = res.assignment[i];
    if (diagnostics) *diagnostics = std::move(res);
    return model;
}

/// Labels every chain event with its actor's group; artificial events are
/// not present yet (inject after this).
inline std::map<std::string, EventChain> assign_groups(const IngestResult& ingest, const UserGroupModel& model,
                                                       const std::map<std::string, UserProfile>& profiles) {
    std::map<std::string, EventChain> out;
    std::map<std::string, GroupId> cache;
    for (const auto& [repo, chain] : ingest.chains) {
        EventChain labeled = chain;
        const auto& actors = ingest.actors.at(repo);
        for (std::size_t i = 0; i < labeled.events.size(); ++i) {
            if (!is_concrete(labeled.events[i].type)) continue;
            const auto& user = actors[i];
            auto it = cache.find(user);
            if (it == cache.end()) it = cache.emplace(user, model.group_of(user, profiles)).first;
            labeled.events[i].group = it->second;
        }
        out.emplace(repo, std::move(labeled));
    }
    return out;
}

inline void save_user_groups(std::ostream& out, const UserGroupModel& m) {
    out << "gitevolve-user-groups v1\n";
    out << "k\t" << m.k << "\ndim\t" << m.dim << "\nseed\t" << m.seed << '\n';
    out << "mean";
    for (Eigen::Index j = 0; j < m.standardizer.mean.size(); ++j) out << '\t' << io::hexfloat(m.standardizer.mean(j));
    out << "\nscale";
    for (Eigen::Index j = 0; j < m.standardizer.scale.size(); ++j) out << '\t' << io::hexfloat(m.standardizer.scale(j));
    out << '\n';
    for (Eigen::Index c = 0; c < m.centroids.rows(); ++c) {
        out << "centroid\t" << c;
        for (Eigen::Index j = 0; j < m.centroids.cols(); ++j) out << '\t' << io::hexfloat(m.centroids(c, j));
        out << '\n';
    }
    for (const auto& [user, g] : m.assignment) out << "assign\t" << user << '\t' << g << '\n';
}

inline UserGroupModel load_user_groups(std::istream& in) {
    UserGroupModel m;
    std::string line;
    if (!std::getline(in, line) || io::strip_cr(line) != "gitevolve-user-groups v1") {
        throw DataError("not a user-group model file (bad header)");
    }
    std::vector<std::vector<double>> centroid_rows;
    auto parse_row = [](const std::vector<std::string_view>& f, std::size_t from) {
        Eigen::RowVectorXd v(static_cast<Eigen::Index>(f.size() - from));
        for (std::size_t i = from; i < f.size(); ++i) v(static_cast<Eigen::Index>(i - from)) = io::parse_double_or_throw(f[i], "model value");
        return v;
    };
    while (std::getline(in, line)) {
        const auto f = io::split(io::strip_cr(line));
        if (f.empty() || f[0].empty()) continue;
        if (f[0] == "k") m.k = static_cast<int>(io::parse_int_or_throw(f.at(1), "k"));
        else if (f[0] == "dim") m.dim = static_cast<int>(io::parse_int_or_throw(f.at(1), "dim"));
        else if (f[0] == "seed") m.seed = std::stoull(std::string(f.at(1)));
        else if (f[0] == "mean") m.standardizer.mean = parse_row(f, 1);
        else if (f[0] == "scale") m.standardizer.scale = parse_row(f, 1);
        else if (f[0] == "centroid") {
            const auto row = parse_row(f, 2);
            centroid_rows.emplace_back(row.data(), row.data() + row.size());
        } else if (f[0] == "assign") {
            m.assignment[std::string(f.at(1))] = static_cast<GroupId>(io::parse_int_or_throw(f.at(2), "group"));
        } else {
            throw DataError("user-group model: unknown record '" + std::string(f[0]) + "'");
        }
    }
    if (static_cast<int>(centroid_rows.size()) != m.k || m.standardizer.mean.size() != m.dim ||
        m.standardizer.scale.size() != m.dim) {
        throw DataError("user-group model: inconsistent dimensions");
    }
    m.centroids.resize(m.k, m.dim);
    for (int c = 0; c < m.k; ++c) {
        if (static_cast<int>(centroid_rows[c].size()) != m.dim) throw DataError("user-group model: bad centroid width");
        for (int j = 0; j < m.dim; ++j) m.centroids(c, j) = centroid_rows[c][j];
    }
    for (const auto& [user, g] : m.assignment) {
        if (g < 0 || g >= m.k) throw DataError("user-group model: assignment out of range for " + user);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Group activity

/// Raw (un-normalized) statistics for one group: mean and population
/// variance of inter-event hours, then per-type event counts.
struct ActivityBlock {
    double mean_delay = 0.0;
    double var_delay = 0.0;
    std::array<double, kNumEventTypes> counts{};

    std::array<double, kActivityBlockDim> normalized() const {
        std::array<double, kActivityBlockDim> out{};
        out[0] = encode_delay(mean_delay);
        out[1] = encode_delay(var_delay);
        for (int t = 0; t < kNumEventTypes; ++t) out[2 + t] = encode_delay(counts[t]);
        return out;
    }
};

namespace detail {

struct ActivityAccumulator {
    double sum = 0.0;
    double sum_sq = 0.0;
    std::size_t n_delays = 0;
    std::array<double, kNumEventTypes> counts{};

    void add_delay(double h) {
        sum += h;
        sum_sq += h * h;
        ++n_delays;
    }

    ActivityBlock finish() const {
        ActivityBlock b;
        b.counts = counts;
        if (n_delays > 0) {
            const double n = static_cast<double>(n_delays);
            b.mean_delay = sum / n;
            b.var_delay = n_delays < 2 ? 0.0 : std::max(0.0, sum_sq / n - b.mean_delay * b.mean_delay);
        }
        return b;
    }
};

}  // namespace detail

struct GroupActivityTable {
    int total_groups = 0;
    std::vector<ActivityBlock> global;
    std::map<std::pair<std::string, GroupId>, ActivityBlock> per_repo;

    const ActivityBlock& global_block(GroupId g) const { return global.at(static_cast<std::size_t>(g)); }

    ActivityBlock repo_block(const std::string& repo, GroupId g) const {
        const auto it = per_repo.find({repo, g});
        return it == per_repo.end() ? ActivityBlock{} : it->second;
    }

    /// 28-d feature: normalized global block, then the (group, repo) block.
    std::array<double, kActivityDim> features(GroupId g, const std::string& repo) const {
        if (g < 0 || g >= total_groups) throw ValidationError("group index out of range: " + std::to_string(g));
        std::array<double, kActivityDim> out{};
        const auto a = global_block(g).normalized();
        const auto b = repo_block(repo, g).normalized();
        std::copy(a.begin(), a.end(), out.begin());
        std::copy(b.begin(), b.end(), out.begin() + kActivityBlockDim);
        return out;
    }
};

/// Statistics over events in [start, end) of group-labelled chains. An
/// event contributes its delay only when its predecessor is not SOC.
inline GroupActivityTable compute_group_activity(const std::map<std::string, EventChain>& chains, int total_groups,
                                                 Timestamp start, Timestamp end) {
    std::vector<detail::ActivityAccumulator> global(static_cast<std::size_t>(total_groups));
    std::map<std::pair<std::string, GroupId>, detail::ActivityAccumulator> per_repo;
    for (const auto& [repo, chain] : chains) {
        for (std::size_t i = 0; i < chain.events.size(); ++i) {
            const Event& e = chain.events[i];
            if (e.type == EventType::SOC || e.group < 0) continue;
            if (e.timestamp < start || e.timestamp >= end) continue;
            if (e.group >= total_groups) throw ValidationError("group index out of range: " + std::to_string(e.group));
            auto& g = global[static_cast<std::size_t>(e.group)];
            auto& r = per_repo[{repo, e.group}];
            g.counts[type_index(e.type)] += 1.0;
            r.counts[type_index(e.type)] += 1.0;
            if (i >= 2) {
                g.add_delay(e.delay_hours);
                r.add_delay(e.delay_hours);
            }
        }
    }
    GroupActivityTable table;
    table.total_groups = total_groups;
    table.global.reserve(global.size());
    for (const auto& acc : global) table.global.push_back(acc.finish());
    for (const auto& [key, acc] : per_repo) table.per_repo.emplace(key, acc.finish());
    return table;
}

namespace detail {

inline void write_activity_block(std::ostream& out, const ActivityBlock& b) {
    out << '\t' << io::hexfloat(b.mean_delay) << '\t' << io::hexfloat(b.var_delay);
    for (double c : b.counts) out << '\t' << io::hexfloat(c);
}

inline ActivityBlock read_activity_block(const std::vector<std::string_view>& f, std::size_t from) {
    if (f.size() != from + 2 + kNumEventTypes) throw DataError("group activity file: bad row width");
    ActivityBlock b;
    b.mean_delay = io::parse_double_or_throw(f[from], "mean delay");
    b.var_delay = io::parse_double_or_throw(f[from + 1], "delay variance");
    for (int t = 0; t < kNumEventTypes; ++t) b.counts[t] = io::parse_double_or_throw(f[from + 2 + t], "count");
    return b;
}

}  // namespace detail

inline void save_group_activity(std::ostream& out, const GroupActivityTable& t) {
    out << "gitevolve-group-activity v1\t" << t.total_groups << '\n';
    for (std::size_t g = 0; g < t.global.size(); ++g) {
        out << "global\t" << g;
        detail::write_activity_block(out, t.global[g]);
        out << '\n';
    }
    for (const auto& [key, b] : t.per_repo) {
        out << "repo\t" << key.first << '\t' << key.second;
        detail::write_activity_block(out, b);
        out << '\n';
    }
}

inline GroupActivityTable load_group_activity(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("group activity file is empty");
    const auto head = io::split(io::strip_cr(line));
    if (head.size() != 2 || head[0] != "gitevolve-group-activity v1") throw DataError("not a group activity file (bad header)");
    GroupActivityTable t;
    t.total_groups = static_cast<int>(io::parse_int_or_throw(head[1], "total groups"));
    t.global.assign(static_cast<std::size_t>(std::max(0, t.total_groups)), ActivityBlock{});
    while (std::getline(in, line)) {
        const auto f = io::split(io::strip_cr(line));
        if (f.empty() || f[0].empty()) continue;
        if (f[0] == "global") {
            const auto g = io::parse_int_or_throw(f.at(1), "group");
            if (g < 0 || g >= t.total_groups) throw DataError("group activity file: group out of range");
            t.global[static_cast<std::size_t>(g)] = detail::read_activity_block(f, 2);
        } else if (f[0] == "repo") {
            const auto g = static_cast<GroupId>(io::parse_int_or_throw(f.at(2), "group"));
            if (g < 0 || g >= t.total_groups) throw DataError("group activity file: group out of range");
            t.per_repo[{std::string(f[1]), g}] = detail::read_activity_block(f, 3);
        } else {
            throw DataError("group activity file: unknown record '" + std::string(f[0]) + "'");
        }
    }
    return t;
}

}  // namespace gitevolve

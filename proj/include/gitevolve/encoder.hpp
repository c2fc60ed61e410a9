// Per-event input vectors and sliding windows of N events.
//
// Default layout (398 columns):
//   [0, 12)     event type one-hot
//   [12, 13)    log-normalized delay
//   [13, 114)   user group one-hot (C + 1 = 101 groups)
//   [114, 142)  group activity (global block, then group-in-repo block)
//   [142, 398)  repo embedding f(R)
// Ablations shrink or replace the activity and repo blocks.

#pragma once

#include <Eigen/Dense>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gitevolve/core_types.hpp"
#include "gitevolve/grouping.hpp"
#include "gitevolve/ingestion.hpp"
#include "gitevolve/repo_graph.hpp"

namespace gitevolve {

enum class RepoFeature { None, Index, Profile, Learned };

inline std::string_view to_string(RepoFeature r) {
    switch (r) {
        case RepoFeature::None: return "none";
        case RepoFeature::Index: return "index";
        case RepoFeature::Profile: return "profile";
        case RepoFeature::Learned: return "learned";
    }
    return "?";
}

inline RepoFeature parse_repo_feature(std::string_view s) {
    if (s == "none") return RepoFeature::None;
    if (s == "index") return RepoFeature::Index;
    if (s == "profile") return RepoFeature::Profile;
    if (s == "learned") return RepoFeature::Learned;
    throw ValidationError("use_repo_embedding must be one of none|index|profile|learned, got '" + std::string(s) + "'");
}

struct FeatureFlags {
    RepoFeature repo = RepoFeature::Learned;
    bool group_activity = true;
    bool no_event_type = true;

    friend bool operator==(const FeatureFlags&, const FeatureFlags&) = default;
};

struct FeatureLayout {
    int type_offset = 0, type_size = kNumEventTypes;
    int delay_offset = 0, delay_size = 1;
    int group_offset = 0, group_size = 0;
    int activity_offset = 0, activity_size = 0;
    int repo_offset = 0, repo_size = 0;

    int dim() const { return repo_offset + repo_size; }

    static FeatureLayout make(const FeatureFlags& flags, int total_groups, int embedding_dim = kRepoEmbeddingDim) {
        FeatureLayout l;
        l.delay_offset = l.type_offset + l.type_size;
        l.group_offset = l.delay_offset + l.delay_size;
        l.group_size = total_groups;
        l.activity_offset = l.group_offset + l.group_size;
        l.activity_size = flags.group_activity ? kActivityDim : 0;
        l.repo_offset = l.activity_offset + l.activity_size;
        switch (flags.repo) {
            case RepoFeature::None: l.repo_size = 0; break;
            case RepoFeature::Index: l.repo_size = 1; break;
            case RepoFeature::Profile: l.repo_size = kRepoAttributeDim; break;
            case RepoFeature::Learned: l.repo_size = embedding_dim; break;
        }
        return l;
    }
};

/// Fitted models and switches needed to encode events.
struct FeatureContext {
    FeatureFlags flags;
    int total_groups = 101;
    FeatureLayout layout = FeatureLayout::make(FeatureFlags{}, 101);
    std::shared_ptr<const GroupActivityTable> activity;
    std::shared_ptr<const RepoEmbeddingModel> embeddings;
    std::shared_ptr<const std::map<std::string, RepoProfile>> repo_profiles;
    /// Repo -> 1-based index for the i(R) ablation.
    std::map<std::string, int> repo_index;

    void finalize() {
        layout = FeatureLayout::make(flags, total_groups, embeddings ? embeddings->dim : kRepoEmbeddingDim);
    }

    int dim() const { return layout.dim(); }

    /// False when the repo block falls back to zeros.
    bool knows_repo(const std::string& repo) const {
        switch (flags.repo) {
            case RepoFeature::None: return true;
            case RepoFeature::Index: return repo_index.count(repo) > 0;
            case RepoFeature::Profile: return repo_profiles && repo_profiles->count(repo) > 0;
            case RepoFeature::Learned: return embeddings && embeddings->contains(repo);
        }
        return false;
    }

    Eigen::VectorXd repo_block(const std::string& repo) const {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(layout.repo_size);
        switch (flags.repo) {
            case RepoFeature::None: break;
            case RepoFeature::Index:
                if (const auto it = repo_index.find(repo); it != repo_index.end()) v(0) = encode_delay(it->second);
                break;
            case RepoFeature::Profile:
                if (repo_profiles) {
                    if (const auto it = repo_profiles->find(repo); it != repo_profiles->end()) {
                        v = repo_attribute_vector(it->second);
                        v(0) /= static_cast<double>(kLanguages.size());
                    }
                }
                break;
            case RepoFeature::Learned:
                if (embeddings) v = embeddings->embedding_of(repo);
                break;
        }
        return v;
    }
};

namespace detail {

inline void encode_into(const Event& e, const std::string& repo, const FeatureContext& ctx,
                        const Eigen::VectorXd& repo_vec, Eigen::Ref<Eigen::VectorXd> out) {
    const auto& l = ctx.layout;
    out.setZero();
    if (e.type == EventType::NoEventInSimPeriod) throw ValidationError("NoEventInSimPeriod cannot be encoded");
    out(l.type_offset + type_index(e.type)) = 1.0;
    out(l.delay_offset) = encode_delay(e.delay_hours);
    if (e.type != EventType::SOC) {
        if (e.group < 0 || e.group >= ctx.total_groups) {
            throw ValidationError("group index out of range: " + std::to_string(e.group));
        }
        out(l.group_offset + e.group) = 1.0;
        if (l.activity_size > 0) {
            if (!ctx.activity) throw ValidationError("group activity requested but no activity table fitted");
            const auto a = ctx.activity->features(e.group, repo);
            for (int i = 0; i < kActivityDim; ++i) out(l.activity_offset + i) = a[static_cast<std::size_t>(i)];
        }
    }
    if (l.repo_size > 0) out.segment(l.repo_offset, l.repo_size) = repo_vec;
}

}  // namespace detail

/// One encoded event. SOC carries no group and no activity.
inline Eigen::VectorXd encode_event(const Event& e, const std::string& repo, const FeatureContext& ctx) {
    Eigen::VectorXd v(ctx.dim());
    detail::encode_into(e, repo, ctx, ctx.repo_block(repo), v);
    return v;
}

/// Encodes a whole chain, one column per event (dim x n).
inline Eigen::MatrixXd encode_chain(const EventChain& chain, const FeatureContext& ctx) {
    Eigen::MatrixXd out(ctx.dim(), static_cast<Eigen::Index>(chain.events.size()));
    const Eigen::VectorXd repo_vec = ctx.repo_block(chain.repo_id);
    for (std::size_t i = 0; i < chain.events.size(); ++i) {
        detail::encode_into(chain.events[i], chain.repo_id, ctx, repo_vec, out.col(static_cast<Eigen::Index>(i)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Windows and batches

struct SampleTarget {
    int type = 0;
    double delay = 0.0;  // log-normalized
    GroupId group = 0;
};

inline SampleTarget target_of(const Event& e) {
    if (e.type == EventType::SOC || e.group < 0) throw ValidationError("SOC cannot be a prediction target");
    return {type_index(e.type), encode_delay(e.delay_hours), e.group};
}

struct WindowedSample {
    Eigen::MatrixXd inputs;  // N x dim, oldest first
    SampleTarget target;
    std::size_t target_position = 0;

    Eigen::VectorXd type_onehot() const {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(kNumEventTypes);
        v(target.type) = 1.0;
        return v;
    }
    Eigen::VectorXd group_onehot(int total_groups) const {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(total_groups);
        v(target.group) = 1.0;
        return v;
    }
};

/// steps x batch inputs packed column-wise: column t * batch + b holds
/// step t of sample b.
struct SequenceBatch {
    int steps = 0;
    int batch = 0;
    Eigen::MatrixXd x;

    auto step(int t) const { return x.middleCols(static_cast<Eigen::Index>(t) * batch, batch); }
};

struct BatchTargets {
    std::vector<int> type;
    Eigen::VectorXd delay;
    std::vector<GroupId> group;

    std::size_t size() const { return type.size(); }
};

/// Positions of the previous `window` events for a target at `pos`,
/// left-padded with the chain's SOC (position 0).
inline void fill_window(const Eigen::MatrixXd& encoded, std::size_t pos, int window, SequenceBatch& batch, int b) {
    for (int t = 0; t < window; ++t) {
        const long src = static_cast<long>(pos) - window + t;
        const Eigen::Index col = src < 0 ? 0 : static_cast<Eigen::Index>(src);
        batch.x.col(static_cast<Eigen::Index>(t) * batch.batch + b) = encoded.col(col);
    }
}

/// One sample per event in [start, end) with at least one predecessor.
inline std::vector<WindowedSample> make_windows(const EventChain& chain, int window, Timestamp start, Timestamp end,
                                                const FeatureContext& ctx) {
    if (window < 1) throw ValidationError("window length N must be >= 1");
    if (!chain.starts_with_soc()) throw ValidationError("chain " + chain.repo_id + " does not start with SOC");
    std::vector<WindowedSample> out;
    if (start >= end) return out;
    const Eigen::MatrixXd encoded = encode_chain(chain, ctx);
    for (std::size_t i = 1; i < chain.events.size(); ++i) {
        const Event& e = chain.events[i];
        if (e.timestamp < start || e.timestamp >= end) continue;
        SequenceBatch one{window, 1, Eigen::MatrixXd(ctx.dim(), window)};
        fill_window(encoded, i, window, one, 0);
        out.push_back({one.x.transpose(), target_of(e), i});
    }
    return out;
}

/// Encoded chains plus (chain, position) references; windows are gathered
/// on demand so memory stays linear in the number of events.
class SequenceDataset {
public:
    SequenceDataset(int window, int dim) : window_(window), dim_(dim) {
        if (window < 1) throw ValidationError("window length N must be >= 1");
    }

    /// Adds every target in [start, end) of a SOC-led chain.
    void add_chain(const EventChain& chain, const FeatureContext& ctx, Timestamp start, Timestamp end) {
        if (!chain.starts_with_soc()) throw ValidationError("chain " + chain.repo_id + " does not start with SOC");
        std::vector<std::size_t> positions;
        for (std::size_t i = 1; i < chain.events.size(); ++i) {
            const auto ts = chain.events[i].timestamp;
            if (ts >= start && ts < end) positions.push_back(i);
        }
        if (positions.empty()) return;
        const auto c = static_cast<int>(encoded_.size());
        encoded_.push_back(encode_chain(chain, ctx));
        for (std::size_t p : positions) {
            refs_.push_back({c, p});
            targets_.push_back(target_of(chain.events[p]));
        }
    }

    std::size_t size() const { return refs_.size(); }
    bool empty() const { return refs_.empty(); }
    int window() const { return window_; }
    int dim() const { return dim_; }
    const SampleTarget& target(std::size_t i) const { return targets_[i]; }

    void gather(std::span<const std::size_t> ids, SequenceBatch& batch, BatchTargets& targets) const {
        const int bs = static_cast<int>(ids.size());
        batch.steps = window_;
        batch.batch = bs;
        batch.x.resize(dim_, static_cast<Eigen::Index>(window_) * bs);
        targets.type.resize(ids.size());
        targets.group.resize(ids.size());
        targets.delay.resize(bs);
        for (int b = 0; b < bs; ++b) {
            const auto& [c, pos] = refs_[ids[static_cast<std::size_t>(b)]];
            fill_window(encoded_[static_cast<std::size_t>(c)], pos, window_, batch, b);
            const auto& t = targets_[ids[static_cast<std::size_t>(b)]];
            targets.type[static_cast<std::size_t>(b)] = t.type;
            targets.delay(b) = t.delay;
            targets.group[static_cast<std::size_t>(b)] = t.group;
        }
    }

private:
    struct Ref {
        int chain;
        std::size_t position;
    };
    int window_;
    int dim_;
    std::vector<Eigen::MatrixXd> encoded_;
    std::vector<Ref> refs_;
    std::vector<SampleTarget> targets_;
};

}  // namespace gitevolve

// Repo co-creator graph and inductive node embeddings.
//
// Two mean-aggregator layers:
//   h1(w) = normalize(relu(W1 [x_w ; mean_{u in S1(w)} x_u] + b1))
//   z(v)  = normalize(W2 [h1(v) ; mean_{w in S2(v)} h1(w)] + b2)
// trained with the unsupervised edge objective
//   -log sigmoid(z_u . z_v) - sum_n log sigmoid(-z_u . z_n)
// over graph edges (u, v) and uniformly drawn negatives n.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "gitevolve/ingestion.hpp"
#include "gitevolve/io_util.hpp"
#include "gitevolve/random.hpp"

namespace gitevolve {

inline constexpr int kRepoAttributeDim = 1 + 2 + kDescriptionDim;
inline constexpr int kRepoEmbeddingDim = 256;

/// Language code, creator-type one-hot, description vector.
inline Eigen::VectorXd repo_attribute_vector(const RepoProfile& p) {
    Eigen::VectorXd v(kRepoAttributeDim);
    v(0) = static_cast<double>(p.main_language_id);
    v(1) = p.creator_type_onehot[0];
    v(2) = p.creator_type_onehot[1];
    for (int i = 0; i < kDescriptionDim; ++i) v(3 + i) = p.description_vector[static_cast<std::size_t>(i)];
    return v;
}

struct RepoGraph {
    std::vector<std::string> ids;
    std::map<std::string, int> index;
    Eigen::MatrixXd attributes;  // n x 153
    std::vector<std::vector<int>> adjacency;

    int node_count() const { return static_cast<int>(ids.size()); }

    std::size_t edge_count() const {
        std::size_t n = 0;
        for (const auto& a : adjacency) n += a.size();
        return n / 2;
    }

    /// Undirected edges as (a, b) with a < b.
    std::vector<std::pair<int, int>> edges() const {
        std::vector<std::pair<int, int>> out;
        for (int a = 0; a < node_count(); ++a) {
            for (int b : adjacency[static_cast<std::size_t>(a)]) {
                if (a < b) out.emplace_back(a, b);
            }
        }
        return out;
    }
};

/// Nodes are repos; a and b are adjacent iff they share a creator.
inline RepoGraph build_repo_graph(const std::map<std::string, RepoProfile>& profiles) {
    RepoGraph g;
    g.attributes.resize(static_cast<Eigen::Index>(profiles.size()), kRepoAttributeDim);
    std::map<std::string, std::vector<int>> by_creator;
    for (const auto& [id, p] : profiles) {
        if (p.creator_user_id.empty()) throw DataError("repo " + id + " has no creator");
        const int i = g.node_count();
        g.ids.push_back(id);
        g.index[id] = i;
        g.attributes.row(i) = repo_attribute_vector(p).transpose();
        by_creator[p.creator_user_id].push_back(i);
    }
    g.adjacency.assign(g.ids.size(), {});
    for (const auto& [creator, nodes] : by_creator) {
        for (std::size_t a = 0; a < nodes.size(); ++a) {
            for (std::size_t b = 0; b < nodes.size(); ++b) {
                if (a != b) g.adjacency[static_cast<std::size_t>(nodes[a])].push_back(nodes[b]);
            }
        }
    }
    for (auto& a : g.adjacency) std::sort(a.begin(), a.end());
    return g;
}

struct EmbeddingConfig {
    int dim = kRepoEmbeddingDim;
    int hidden = kRepoEmbeddingDim;
    int outer_samples = 10;  // neighbours aggregated by the output layer
    int inner_samples = 10;  // neighbours aggregated by the hidden layer
    int negatives = 10;
    int epochs = 10;
    int batch_edges = 64;
    double learning_rate = 0.01;
    std::uint64_t seed = 7;
};

struct EmbeddingTrainingHistory {
    /// Objective on all edges after each epoch, full neighbourhoods and a
    /// fixed negative draw so epochs are comparable.
    std::vector<double> epoch_loss;
    double initial_loss = 0.0;
};

struct RepoEmbeddingModel {
    int dim = kRepoEmbeddingDim;
    Eigen::MatrixXd w1, w2;
    Eigen::VectorXd b1, b2;
    std::vector<std::string> ids;
    std::map<std::string, int> index;
    Eigen::MatrixXd embeddings;  // n x dim, unit rows

    bool contains(const std::string& repo) const { return index.count(repo) > 0; }

    /// Zero vector for repos outside the graph.
    Eigen::VectorXd embedding_of(const std::string& repo) const {
        const auto it = index.find(repo);
        if (it == index.end()) return Eigen::VectorXd::Zero(dim);
        return embeddings.row(it->second).transpose();
    }
};

namespace detail {

/// All neighbours when degree <= k, otherwise k drawn without replacement.
inline std::vector<int> sample_neighbors(const std::vector<int>& adj, int k, Rng* rng) {
    if (rng == nullptr || static_cast<int>(adj.size()) <= k) return adj;
    std::vector<int> pool = adj;
    for (int i = 0; i < k; ++i) {
        const std::size_t j = static_cast<std::size_t>(i) + uniform_index(*rng, pool.size() - static_cast<std::size_t>(i));
        std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    }
    pool.resize(static_cast<std::size_t>(k));
    return pool;
}

struct AggregatorParams {
    Eigen::MatrixXd w1, w2;
    Eigen::VectorXd b1, b2;
};

struct AggregatorGrads {
    Eigen::MatrixXd w1, w2;
    Eigen::VectorXd b1, b2;

    explicit AggregatorGrads(const AggregatorParams& p)
        : w1(Eigen::MatrixXd::Zero(p.w1.rows(), p.w1.cols())),
          w2(Eigen::MatrixXd::Zero(p.w2.rows(), p.w2.cols())),
          b1(Eigen::VectorXd::Zero(p.b1.size())),
          b2(Eigen::VectorXd::Zero(p.b2.size())) {}
};

inline constexpr double kNormEps = 1e-12;

/// Forward trace for one target node, kept for backprop.
struct NodeTrace {
    Eigen::MatrixXd in1;    // 2F x L (L = 1 + outer neighbours)
    Eigen::MatrixXd pre1;   // H x L
    Eigen::MatrixXd h1;     // H x L
    Eigen::VectorXd norm1;  // L
    Eigen::VectorXd in2;    // 2H
    Eigen::VectorXd pre2;   // D
    Eigen::VectorXd z;      // D
    double norm2 = 0.0;
    int outer = 0;
};

inline NodeTrace forward_node(const RepoGraph& g, const Eigen::MatrixXd& x, const AggregatorParams& p,
                              const EmbeddingConfig& cfg, int v, Rng* rng) {
    const Eigen::Index f = x.cols();
    const Eigen::Index h = p.w1.rows();
    NodeTrace t;
    std::vector<int> layer1{v};
    const auto outer = sample_neighbors(g.adjacency[static_cast<std::size_t>(v)], cfg.outer_samples, rng);
    layer1.insert(layer1.end(), outer.begin(), outer.end());
    t.outer = static_cast<int>(outer.size());
    const Eigen::Index l = static_cast<Eigen::Index>(layer1.size());
    t.in1 = Eigen::MatrixXd::Zero(2 * f, l);
    for (Eigen::Index c = 0; c < l; ++c) {
        const int w = layer1[static_cast<std::size_t>(c)];
        t.in1.col(c).head(f) = x.row(w).transpose();
        const auto inner = sample_neighbors(g.adjacency[static_cast<std::size_t>(w)], cfg.inner_samples, rng);
        if (!inner.empty()) {
            Eigen::VectorXd mean = Eigen::VectorXd::Zero(f);
            for (int u : inner) mean += x.row(u).transpose();
            t.in1.col(c).tail(f) = mean / static_cast<double>(inner.size());
        }
    }
    t.pre1 = (p.w1 * t.in1).colwise() + p.b1;
    t.h1 = t.pre1.cwiseMax(0.0);
    t.norm1.resize(l);
    for (Eigen::Index c = 0; c < l; ++c) {
        const double n = t.h1.col(c).norm();
        t.norm1(c) = n;
        if (n > kNormEps) t.h1.col(c) /= n;
        else t.h1.col(c).setZero();
    }
    t.in2 = Eigen::VectorXd::Zero(2 * h);
    t.in2.head(h) = t.h1.col(0);
    if (t.outer > 0) t.in2.tail(h) = t.h1.rightCols(t.outer).rowwise().mean();
    t.pre2 = p.w2 * t.in2 + p.b2;
    t.norm2 = t.pre2.norm();
    if (t.norm2 > kNormEps) {
        t.z = t.pre2 / t.norm2;
    } else {
        t.z = Eigen::VectorXd::Zero(t.pre2.size());
        t.z(0) = 1.0;
    }
    return t;
}

inline void backward_node(const NodeTrace& t, const AggregatorParams& p, const Eigen::VectorXd& gz,
                          AggregatorGrads& grads) {
    if (t.norm2 <= kNormEps) return;
    const Eigen::VectorXd gpre2 = (gz - t.z * t.z.dot(gz)) / t.norm2;
    grads.w2.noalias() += gpre2 * t.in2.transpose();
    grads.b2 += gpre2;
    const Eigen::VectorXd gin2 = p.w2.transpose() * gpre2;
    const Eigen::Index h = p.w1.rows();
    const Eigen::Index l = t.h1.cols();
    Eigen::MatrixXd gpre1 = Eigen::MatrixXd::Zero(h, l);
    for (Eigen::Index c = 0; c < l; ++c) {
        if (t.norm1(c) <= kNormEps) continue;
        Eigen::VectorXd gh = c == 0 ? Eigen::VectorXd(gin2.head(h)) : Eigen::VectorXd(gin2.tail(h) / t.outer);
        const Eigen::VectorXd hc = t.h1.col(c);
        Eigen::VectorXd gr = (gh - hc * hc.dot(gh)) / t.norm1(c);
        gpre1.col(c) = (t.pre1.col(c).array() > 0.0).select(gr.array(), 0.0).matrix();
    }
    grads.w1.noalias() += gpre1 * t.in1.transpose();
    grads.b1 += gpre1.rowwise().sum();
}

inline double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// Language code mapped into [0, 1] so it does not swamp the other columns.
inline Eigen::MatrixXd scaled_attributes(const RepoGraph& g) {
    Eigen::MatrixXd x = g.attributes;
    if (x.rows() > 0) x.col(0) /= static_cast<double>(kLanguages.size());
    return x;
}

inline Eigen::MatrixXd embed_all(const RepoGraph& g, const Eigen::MatrixXd& x, const AggregatorParams& p,
                                 const EmbeddingConfig& cfg) {
    Eigen::MatrixXd out(g.node_count(), p.w2.rows());
    for (int v = 0; v < g.node_count(); ++v) out.row(v) = forward_node(g, x, p, cfg, v, nullptr).z.transpose();
    return out;
}

inline double edge_objective(const Eigen::MatrixXd& z, const std::vector<std::pair<int, int>>& pairs,
                             const std::vector<std::vector<int>>& negatives) {
    if (pairs.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t e = 0; e < pairs.size(); ++e) {
        const auto [u, v] = pairs[e];
        total -= log_sigmoid(z.row(u).dot(z.row(v)));
        for (int n : negatives[e]) total -= log_sigmoid(-z.row(u).dot(z.row(n)));
    }
    return total / static_cast<double>(pairs.size());
}

}  // namespace detail

/// Trains the aggregator and returns unit-norm embeddings for every node.
/// Inference uses full neighbourhoods.
inline RepoEmbeddingModel learn_embeddings(const RepoGraph& graph, const EmbeddingConfig& cfg,
                                           EmbeddingTrainingHistory* history = nullptr) {
    if (graph.node_count() == 0) throw ValidationError("learn_embeddings: empty graph");
    if (cfg.dim < 1 || cfg.hidden < 1 || cfg.negatives < 0 || cfg.epochs < 0 || cfg.batch_edges < 1) {
        throw ValidationError("learn_embeddings: invalid configuration");
    }
    Rng rng(cfg.seed);
    const Eigen::MatrixXd x = detail::scaled_attributes(graph);
    const Eigen::Index f = x.cols();
    detail::AggregatorParams p;
    auto init = [&rng](Eigen::Index rows, Eigen::Index cols) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index j = 0; j < cols; ++j)
            for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = uniform_real(rng, -bound, bound);
        return m;
    };
    p.w1 = init(cfg.hidden, 2 * f);
    p.b1 = Eigen::VectorXd::Zero(cfg.hidden);
    p.w2 = init(cfg.dim, 2 * cfg.hidden);
    p.b2 = Eigen::VectorXd::Zero(cfg.dim);

    // Both orientations of every undirected edge.
    std::vector<std::pair<int, int>> pairs;
    for (const auto& [a, b] : graph.edges()) {
        pairs.emplace_back(a, b);
        pairs.emplace_back(b, a);
    }
    const int n_nodes = graph.node_count();
    Rng eval_rng(derive_seed(cfg.seed, 0xE7A1));
    std::vector<std::vector<int>> eval_negatives(pairs.size());
    for (auto& negs : eval_negatives)
        for (int k = 0; k < cfg.negatives; ++k) negs.push_back(static_cast<int>(uniform_index(eval_rng, n_nodes)));

    if (history) history->initial_loss = detail::edge_objective(detail::embed_all(graph, x, p, cfg), pairs, eval_negatives);

    // Adam state.
    detail::AggregatorGrads m(p), s(p);
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step = 0;
    std::vector<std::size_t> order(pairs.size());
    for (int epoch = 0; epoch < cfg.epochs && !pairs.empty(); ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_edges)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_edges));
            // One forward per distinct node in the batch.
            std::map<int, std::size_t> slot;
            std::vector<detail::NodeTrace> traces;
            std::vector<std::vector<int>> batch_negs;
            auto trace_of = [&](int node) {
                auto it = slot.find(node);
                if (it == slot.end()) {
                    it = slot.emplace(node, traces.size()).first;
                    traces.push_back(detail::forward_node(graph, x, p, cfg, node, &rng));
                }
                return it->second;
            };
            std::vector<std::array<std::size_t, 2>> pos;
            std::vector<std::vector<std::size_t>> neg_slots;
            for (std::size_t i = start; i < end; ++i) {
                const auto [u, v] = pairs[order[i]];
                pos.push_back({trace_of(u), trace_of(v)});
                std::vector<std::size_t> ns;
                for (int k = 0; k < cfg.negatives; ++k) ns.push_back(trace_of(static_cast<int>(uniform_index(rng, n_nodes))));
                neg_slots.push_back(std::move(ns));
            }
            std::vector<Eigen::VectorXd> gz(traces.size(), Eigen::VectorXd::Zero(cfg.dim));
            const double scale = 1.0 / static_cast<double>(end - start);
            for (std::size_t e = 0; e < pos.size(); ++e) {
                const auto& zu = traces[pos[e][0]].z;
                const auto& zv = traces[pos[e][1]].z;
                // d/ds [-log sigmoid(s)] = sigmoid(s) - 1
                const double gp = (detail::sigmoid(zu.dot(zv)) - 1.0) * scale;
                gz[pos[e][0]] += gp * zv;
                gz[pos[e][1]] += gp * zu;
                for (std::size_t ns : neg_slots[e]) {
                    const auto& zn = traces[ns].z;
                    // d/ds [-log sigmoid(-s)] = sigmoid(s)
                    const double gn = detail::sigmoid(zu.dot(zn)) * scale;
                    gz[pos[e][0]] += gn * zn;
                    gz[ns] += gn * zu;
                }
            }
            detail::AggregatorGrads grads(p);
            for (std::size_t t = 0; t < traces.size(); ++t) detail::backward_node(traces[t], p, gz[t], grads);

            ++step;
            const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            auto adam = [&](auto& param, auto& mom, auto& sq, const auto& g) {
                mom = beta1 * mom + (1.0 - beta1) * g;
                sq = beta2 * sq + (1.0 - beta2) * g.cwiseProduct(g);
                param.array() -= cfg.learning_rate * (mom.array() / c1) / ((sq.array() / c2).sqrt() + eps);
            };
            adam(p.w1, m.w1, s.w1, grads.w1);
            adam(p.b1, m.b1, s.b1, grads.b1);
            adam(p.w2, m.w2, s.w2, grads.w2);
            adam(p.b2, m.b2, s.b2, grads.b2);
        }
        if (history) {
            history->epoch_loss.push_back(
                detail::edge_objective(detail::embed_all(graph, x, p, cfg), pairs, eval_negatives));
        }
    }

    RepoEmbeddingModel model;
    model.dim = cfg.dim;
    model.w1 = p.w1;
    model.b1 = p.b1;
    model.w2 = p.w2;
    model.b2 = p.b2;
    model.ids = graph.ids;
    model.index = graph.index;
    model.embeddings = detail::embed_all(graph, x, p, cfg);
    if (!model.embeddings.allFinite()) throw NumericError("learn_embeddings: non-finite embedding");
    return model;
}

inline void save_embeddings(std::ostream& out, const RepoEmbeddingModel& m) {
    out << "gitevolve-embeddings v1\t" << m.dim << '\t' << m.ids.size() << '\n';
    for (std::size_t i = 0; i < m.ids.size(); ++i) {
        out << m.ids[i];
        for (int j = 0; j < m.dim; ++j) out << '\t' << io::hexfloat(m.embeddings(static_cast<Eigen::Index>(i), j));
        out << '\n';
    }
}

/// Loads the embedding table only; aggregator weights are not persisted.
inline RepoEmbeddingModel load_embeddings(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("embedding file is empty");
    const auto head = io::split(io::strip_cr(line));
    if (head.size() != 3 || head[0] != "gitevolve-embeddings v1") throw DataError("not an embedding file (bad header)");
    RepoEmbeddingModel m;
    m.dim = static_cast<int>(io::parse_int_or_throw(head[1], "dim"));
    const auto count = io::parse_int_or_throw(head[2], "count");
    m.embeddings.resize(count, m.dim);
    while (std::getline(in, line)) {
        const auto f = io::split(io::strip_cr(line));
        if (f.size() == 1 && f[0].empty()) continue;
        if (static_cast<int>(f.size()) != m.dim + 1) throw DataError("embedding row has wrong width");
        if (static_cast<std::int64_t>(m.ids.size()) >= count) throw DataError("embedding file has extra rows");
        const int i = static_cast<int>(m.ids.size());
        m.ids.emplace_back(f[0]);
        m.index[m.ids.back()] = i;
        for (int j = 0; j < m.dim; ++j) m.embeddings(i, j) = io::parse_double_or_throw(f[static_cast<std::size_t>(j) + 1], "embedding");
    }
    if (static_cast<std::int64_t>(m.ids.size()) != count) throw DataError("embedding file row count mismatch");
    return m;
}

}  // namespace gitevolve

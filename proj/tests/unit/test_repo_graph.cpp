#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "gitevolve/repo_graph.hpp"
#include "gitevolve/testkit.hpp"

using namespace gitevolve;

namespace {

RepoGraph toy_graph() {
    std::map<std::string, RepoProfile> profiles;
    profiles["a"] = make_repo_profile("a", "alice", "C", UserType::Individual, "fast tool");
    profiles["b"] = make_repo_profile("b", "alice", "Go", UserType::Individual, "web app");
    profiles["c"] = make_repo_profile("c", "alice", "Rust", UserType::Individual, "");
    profiles["d"] = make_repo_profile("d", "bob", "Java", UserType::Organization, "data");
    profiles["e"] = make_repo_profile("e", "carol", "Lua", UserType::Individual, "graph lib");
    profiles["f"] = make_repo_profile("f", "carol", "R", UserType::Individual, "");
    return build_repo_graph(profiles);
}

double mean_cosine(const RepoEmbeddingModel& m, int lo_a, int hi_a, int lo_b, int hi_b) {
    double s = 0.0;
    int n = 0;
    for (int i = lo_a; i < hi_a; ++i)
        for (int j = lo_b; j < hi_b; ++j) {
            if (i == j) continue;
            s += m.embeddings.row(i).dot(m.embeddings.row(j));
            ++n;
        }
    return s / n;
}

}  // namespace

TEST(RepoGraph, EdgesJoinReposSharingACreator) {
    const auto g = toy_graph();
    EXPECT_EQ(g.node_count(), 6);
    EXPECT_EQ(g.edge_count(), 4u);
    const auto& a = g.adjacency[static_cast<std::size_t>(g.index.at("a"))];
    EXPECT_EQ(a, (std::vector<int>{g.index.at("b"), g.index.at("c")}));
    EXPECT_TRUE(g.adjacency[static_cast<std::size_t>(g.index.at("d"))].empty());
    for (const auto& [u, v] : g.edges()) EXPECT_LT(u, v);
}

TEST(RepoGraph, AttributeLayout) {
    const auto p = make_repo_profile("x", "o", "Python", UserType::Organization, "graph");
    const auto v = repo_attribute_vector(p);
    ASSERT_EQ(v.size(), kRepoAttributeDim);
    EXPECT_EQ(v(0), 2.0);
    EXPECT_EQ(v(1), 0.0);
    EXPECT_EQ(v(2), 1.0);
    EXPECT_NEAR(v.tail(kDescriptionDim).norm(), 1.0, 1e-12);
}

TEST(RepoGraph, MissingCreatorIsADataError) {
    std::map<std::string, RepoProfile> profiles;
    profiles["x"] = make_repo_profile("x", "", "C", UserType::Individual, "");
    EXPECT_THROW(build_repo_graph(profiles), DataError);
}

TEST(Aggregator, BackwardMatchesFiniteDifferences) {
    const auto g = toy_graph();
    Rng rng(3);
    const int f = 4, h = 6, d = 5;
    Eigen::MatrixXd x(g.node_count(), f);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = standard_normal(rng);
    detail::AggregatorParams p;
    auto fill = [&](Eigen::MatrixXd& m, Eigen::Index r, Eigen::Index c) {
        m.resize(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.5 * standard_normal(rng);
    };
    fill(p.w1, h, 2 * f);
    fill(p.w2, d, 2 * h);
    p.b1 = Eigen::VectorXd::Constant(h, 0.1);
    p.b2 = Eigen::VectorXd::Constant(d, 0.05);
    EmbeddingConfig cfg;

    // Linear probe of every node's embedding.
    Eigen::MatrixXd probe(g.node_count(), d);
    for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = standard_normal(rng);
    auto objective = [&](const detail::AggregatorParams& q) {
        double s = 0.0;
        for (int v = 0; v < g.node_count(); ++v) s += probe.row(v).dot(detail::forward_node(g, x, q, cfg, v, nullptr).z);
        return s;
    };
    detail::AggregatorGrads grads(p);
    for (int v = 0; v < g.node_count(); ++v) {
        detail::backward_node(detail::forward_node(g, x, p, cfg, v, nullptr), p, probe.row(v).transpose(), grads);
    }

    const double eps = 1e-6;
    double worst = 0.0;
    auto check = [&](auto member, const auto& analytic) {
        auto q = p;
        auto& param = q.*member;
        for (Eigen::Index i = 0; i < param.size(); ++i) {
            const double orig = param.data()[i];
            param.data()[i] = orig + eps;
            const double up = objective(q);
            param.data()[i] = orig - eps;
            const double down = objective(q);
            param.data()[i] = orig;
            const double fd = (up - down) / (2 * eps);
            const double a = analytic.data()[i];
            worst = std::max(worst, std::abs(fd - a) / std::max({std::abs(fd), std::abs(a), 1e-6}));
        }
    };
    check(&detail::AggregatorParams::w1, grads.w1);
    check(&detail::AggregatorParams::b1, grads.b1);
    check(&detail::AggregatorParams::w2, grads.w2);
    check(&detail::AggregatorParams::b2, grads.b2);
    EXPECT_LT(worst, 1e-5);
}

TEST(Embeddings, UnitNormAndLossDecreases) {
    const auto profiles = testkit::two_clique_profiles(8, 1);
    const auto g = build_repo_graph(profiles);
    EmbeddingConfig cfg;
    cfg.dim = 16;
    cfg.hidden = 16;
    cfg.epochs = 15;
    EmbeddingTrainingHistory hist;
    const auto m = learn_embeddings(g, cfg, &hist);
    ASSERT_EQ(m.embeddings.rows(), 16);
    for (Eigen::Index i = 0; i < m.embeddings.rows(); ++i) EXPECT_NEAR(m.embeddings.row(i).norm(), 1.0, 1e-6);
    ASSERT_EQ(hist.epoch_loss.size(), 15u);
    EXPECT_LT(hist.epoch_loss.back(), hist.initial_loss);
    EXPECT_GT(mean_cosine(m, 0, 8, 0, 8), mean_cosine(m, 0, 8, 8, 16));
}

TEST(Embeddings, DeterministicPerSeed) {
    const auto g = build_repo_graph(testkit::two_clique_profiles(5, 2));
    EmbeddingConfig cfg;
    cfg.dim = 8;
    cfg.hidden = 8;
    cfg.epochs = 3;
    EXPECT_TRUE(learn_embeddings(g, cfg).embeddings == learn_embeddings(g, cfg).embeddings);
    cfg.seed = 8;
    EXPECT_FALSE(learn_embeddings(g, cfg).embeddings == learn_embeddings(g, EmbeddingConfig{8, 8}).embeddings);
}

TEST(Embeddings, SaveLoadRoundTripAndUnknownRepo) {
    const auto g = toy_graph();
    EmbeddingConfig cfg;
    cfg.dim = 6;
    cfg.hidden = 4;
    cfg.epochs = 2;
    const auto m = learn_embeddings(g, cfg);
    std::stringstream s;
    save_embeddings(s, m);
    const auto back = load_embeddings(s);
    EXPECT_EQ(back.ids, m.ids);
    EXPECT_TRUE(back.embeddings == m.embeddings);
    EXPECT_EQ(back.embedding_of("nope"), Eigen::VectorXd::Zero(6));
    std::istringstream bad("gitevolve-embeddings v1\t2\t1\nx\t0.5\n");
    EXPECT_THROW(load_embeddings(bad), DataError);
}

TEST(Embeddings, InvalidConfigAndEmptyGraph) {
    EXPECT_THROW(learn_embeddings(RepoGraph{}, EmbeddingConfig{}), ValidationError);
    EmbeddingConfig cfg;
    cfg.batch_edges = 0;
    EXPECT_THROW(learn_embeddings(toy_graph(), cfg), ValidationError);
}

#include <gtest/gtest.h>

#include <numeric>

#include "gitevolve/encoder.hpp"

using namespace gitevolve;

namespace {

constexpr Timestamp H = kSecondsPerHour;

EventChain sample_chain() {
    EventChain c{"r1", {}};
    c.events = {{EventType::SOC, kNoGroup, 0, 0},   {EventType::Push, 3, 0, 0},   {EventType::Fork, 7, 2 * H, 0},
                {EventType::Watch, 3, 5 * H, 0},   {EventType::Issues, 100, 9 * H, 0}, {EventType::Push, 1, 10 * H, 0}};
    recompute_delays(c.events);
    return c;
}

FeatureContext full_context() {
    FeatureContext ctx;
    ctx.total_groups = 101;
    std::map<std::string, EventChain> chains{{"r1", sample_chain()}};
    ctx.activity = std::make_shared<GroupActivityTable>(compute_group_activity(chains, 101, 0, 100 * H));
    auto emb = std::make_shared<RepoEmbeddingModel>();
    emb->dim = kRepoEmbeddingDim;
    emb->ids = {"r1"};
    emb->index = {{"r1", 0}};
    emb->embeddings = Eigen::MatrixXd::Zero(1, kRepoEmbeddingDim);
    for (int j = 0; j < kRepoEmbeddingDim; ++j) emb->embeddings(0, j) = (j % 7) - 3.0;
    emb->embeddings.row(0).normalize();
    ctx.embeddings = emb;
    ctx.repo_index = {{"r1", 1}, {"r2", 2}};
    auto profiles = std::make_shared<std::map<std::string, RepoProfile>>();
    (*profiles)["r1"] = make_repo_profile("r1", "alice", "Python", UserType::Organization, "graph tool");
    ctx.repo_profiles = profiles;
    ctx.finalize();
    return ctx;
}

}  // namespace

TEST(Layout, DefaultBlocks) {
    const auto l = FeatureLayout::make(FeatureFlags{}, 101);
    EXPECT_EQ(l.dim(), 398);
    EXPECT_EQ(l.type_offset, 0);
    EXPECT_EQ(l.type_size, 12);
    EXPECT_EQ(l.delay_offset, 12);
    EXPECT_EQ(l.group_offset, 13);
    EXPECT_EQ(l.group_size, 101);
    EXPECT_EQ(l.activity_offset, 114);
    EXPECT_EQ(l.activity_size, 28);
    EXPECT_EQ(l.repo_offset, 142);
    EXPECT_EQ(l.repo_size, 256);
}

TEST(Layout, AblationWidths) {
    EXPECT_EQ(FeatureLayout::make({RepoFeature::None, true, true}, 101).dim(), 142);
    EXPECT_EQ(FeatureLayout::make({RepoFeature::Learned, false, true}, 101).dim(), 370);
    EXPECT_EQ(FeatureLayout::make({RepoFeature::Index, true, true}, 101).dim(), 143);
    EXPECT_EQ(FeatureLayout::make({RepoFeature::Profile, true, true}, 101).dim(), 142 + kRepoAttributeDim);
    EXPECT_EQ(FeatureLayout::make({RepoFeature::None, false, false}, 101).dim(), 114);
    // Dropping the inactivity type keeps its slot.
    EXPECT_EQ(FeatureLayout::make({RepoFeature::Learned, true, false}, 101).dim(), 398);
    EXPECT_EQ(FeatureLayout::make(FeatureFlags{}, 6, 16).dim(), 12 + 1 + 6 + 28 + 16);
}

TEST(Layout, ParseRepoFeature) {
    EXPECT_EQ(parse_repo_feature("profile"), RepoFeature::Profile);
    EXPECT_THROW(parse_repo_feature("graph"), ValidationError);
}

TEST(Encode, ConcreteEventBlocks) {
    const auto ctx = full_context();
    const auto chain = sample_chain();
    const auto v = encode_event(chain.events[2], "r1", ctx);
    ASSERT_EQ(v.size(), 398);
    EXPECT_EQ(v.head(12).sum(), 1.0);
    EXPECT_EQ(v(type_index(EventType::Fork)), 1.0);
    EXPECT_NEAR(v(12), encode_delay(2.0), 1e-12);
    EXPECT_EQ(v.segment(13, 101).sum(), 1.0);
    EXPECT_EQ(v(13 + 7), 1.0);
    const auto a = ctx.activity->features(7, "r1");
    for (int i = 0; i < kActivityDim; ++i) EXPECT_EQ(v(114 + i), a[static_cast<std::size_t>(i)]);
    EXPECT_TRUE(v.tail(256) == ctx.embeddings->embedding_of("r1"));
}

TEST(Encode, SocHasNoGroupOrActivityButKeepsRepoBlock) {
    const auto ctx = full_context();
    const auto v = encode_event(sample_chain().events[0], "r1", ctx);
    EXPECT_EQ(v(type_index(EventType::SOC)), 1.0);
    EXPECT_EQ(v(12), 0.0);
    EXPECT_EQ(v.segment(13, 101 + 28).squaredNorm(), 0.0);
    EXPECT_NEAR(v.tail(256).norm(), 1.0, 1e-12);
}

TEST(Encode, UnknownRepoFallsBackToZeros) {
    const auto ctx = full_context();
    EXPECT_FALSE(ctx.knows_repo("zzz"));
    EXPECT_TRUE(ctx.knows_repo("r1"));
    const auto v = encode_event(sample_chain().events[1], "zzz", ctx);
    EXPECT_EQ(v.tail(256).squaredNorm(), 0.0);
}

TEST(Encode, IndexAndProfileRepoBlocks) {
    auto ctx = full_context();
    ctx.flags.repo = RepoFeature::Index;
    ctx.finalize();
    EXPECT_EQ(ctx.dim(), 143);
    EXPECT_NEAR(encode_event(sample_chain().events[1], "r2", ctx)(142), encode_delay(2.0), 1e-12);
    ctx.flags.repo = RepoFeature::Profile;
    ctx.finalize();
    const auto v = encode_event(sample_chain().events[1], "r1", ctx);
    EXPECT_NEAR(v(142), 2.0 / 40.0, 1e-15);
    EXPECT_EQ(v(144), 1.0);
}

TEST(Encode, Rejections) {
    auto ctx = full_context();
    Event e{EventType::Push, 101, 0, 0};
    EXPECT_THROW(encode_event(e, "r1", ctx), ValidationError);
    e = {EventType::NoEventInSimPeriod, 0, 0, 0};
    EXPECT_THROW(encode_event(e, "r1", ctx), ValidationError);
    ctx.activity.reset();
    e = {EventType::Push, 0, 0, 0};
    EXPECT_THROW(encode_event(e, "r1", ctx), ValidationError);
    ctx.flags.group_activity = false;
    ctx.finalize();
    EXPECT_NO_THROW(encode_event(e, "r1", ctx));
    EXPECT_THROW(target_of(sample_chain().events[0]), ValidationError);
}

TEST(Windows, LeftPaddedWithSocAndCausal) {
    const auto ctx = full_context();
    const auto chain = sample_chain();
    const auto enc = encode_chain(chain, ctx);
    const auto w = make_windows(chain, 3, 0, 100 * H, ctx);
    ASSERT_EQ(w.size(), 5u);
    // First target sees only SOC.
    for (int t = 0; t < 3; ++t) EXPECT_TRUE(w[0].inputs.row(t).transpose() == enc.col(0));
    for (const auto& s : w) {
        EXPECT_TRUE(s.inputs.row(2).transpose() == enc.col(static_cast<Eigen::Index>(s.target_position) - 1));
        EXPECT_EQ(s.target.type, type_index(chain.events[s.target_position].type));
    }
    EXPECT_EQ(w[3].target.group, 100);
    EXPECT_NEAR(w[3].target.delay, encode_delay(4.0), 1e-12);
    EXPECT_EQ(w[1].type_onehot().sum(), 1.0);
    EXPECT_EQ(w[1].group_onehot(101)(7), 1.0);
}

TEST(Windows, TargetsRestrictedToWindow) {
    const auto ctx = full_context();
    const auto w = make_windows(sample_chain(), 20, 2 * H, 9 * H, ctx);
    ASSERT_EQ(w.size(), 2u);
    EXPECT_EQ(w[0].target_position, 2u);
    EXPECT_EQ(w[1].target_position, 3u);
    EXPECT_TRUE(make_windows(sample_chain(), 2, 5, 5, ctx).empty());
    EXPECT_THROW(make_windows(sample_chain(), 0, 0, 1, ctx), ValidationError);
    auto no_soc = sample_chain();
    no_soc.events.erase(no_soc.events.begin());
    EXPECT_THROW(make_windows(no_soc, 2, 0, 1, ctx), ValidationError);
}

TEST(Windows, DatasetGatherMatchesMakeWindows) {
    const auto ctx = full_context();
    const auto chain = sample_chain();
    SequenceDataset ds(4, ctx.dim());
    ds.add_chain(chain, ctx, 0, 100 * H);
    const auto w = make_windows(chain, 4, 0, 100 * H, ctx);
    ASSERT_EQ(ds.size(), w.size());
    std::vector<std::size_t> ids(ds.size());
    std::iota(ids.rbegin(), ids.rend(), std::size_t{0});
    SequenceBatch batch;
    BatchTargets targets;
    ds.gather(ids, batch, targets);
    ASSERT_EQ(batch.batch, static_cast<int>(ids.size()));
    for (int b = 0; b < batch.batch; ++b) {
        const auto& s = w[ids[static_cast<std::size_t>(b)]];
        for (int t = 0; t < 4; ++t) ASSERT_TRUE(batch.step(t).col(b) == s.inputs.row(t).transpose());
        EXPECT_EQ(targets.type[static_cast<std::size_t>(b)], s.target.type);
        EXPECT_EQ(targets.group[static_cast<std::size_t>(b)], s.target.group);
        EXPECT_EQ(targets.delay(b), s.target.delay);
    }
}

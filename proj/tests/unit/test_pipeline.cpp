#include <gtest/gtest.h>

#include <fstream>
#include <unistd.h>

#include "gitevolve/pipeline.hpp"

using namespace gitevolve;
namespace pl = gitevolve::pipeline;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    explicit TempDir(const std::string& tag)
        : path_(fs::temp_directory_path() / ("gitevolve_" + tag + "_" + std::to_string(::getpid()))) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

pl::Json small_json() {
    return pl::Json::parse(R"({
        "synth": {"repos": 12, "users_per_population": 20, "creators": 4},
        "grouping": {"k": 4},
        "embedding": {"dim": 8, "hidden": 8, "epochs": 1},
        "model": {"lstm_hidden1": 8, "lstm_hidden2": 6, "branch_hidden1": 8, "branch_hidden2": 4,
                  "epochs": 2, "batch_size": 64, "window": 5}
    })");
}

pl::Config small_config(const fs::path& base) {
    auto c = pl::config_from_json(small_json(), base);
    return c;
}

std::string slurp(const fs::path& p) { return io::read_file(p.string()); }

void run_all(const pl::Config& c) {
    pl::run_synth(c);
    pl::run_ingest(c);
    pl::run_group_users(c);
    pl::run_embed_repos(c);
    pl::run_train(c);
    pl::run_simulate(c);
}

}  // namespace

TEST(Config, DefaultsAndPresets) {
    const auto c = pl::config_from_json(pl::Json::object());
    EXPECT_EQ(c.preset, "mts_all");
    EXPECT_EQ(c.model.num_groups, 101);
    EXPECT_EQ(pl::presets().size(), 7u);
    EXPECT_EQ(pl::preset_flags("mts_all_11").no_event_type, false);
    EXPECT_EQ(pl::preset_flags("mts_all_11").repo, RepoFeature::Learned);
    EXPECT_EQ(pl::preset_flags("baseline").repo, RepoFeature::None);
    EXPECT_FALSE(pl::preset_flags("baseline").group_activity);
    EXPECT_EQ(pl::preset_flags("mts_all_idx").repo, RepoFeature::Index);
    EXPECT_THROW(pl::preset_flags("nope"), ValidationError);
}

TEST(Config, ErrorsNameTheField) {
    auto expect_error = [](const char* text, const std::string& needle) {
        try {
            pl::config_from_json(pl::Json::parse(text));
            ADD_FAILURE() << "accepted " << text;
        } catch (const ValidationError& e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    expect_error(R"({"model": {"epochs": "ten"}})", "model.epochs");
    expect_error(R"({"model": {"epochz": 3}})", "model.epochz");
    expect_error(R"({"grouping": {"k": 0}})", "grouping.k");
    expect_error(R"({"metrics": {"ap_variant": "fuzzy"}})", "metrics.ap_variant");
    expect_error(R"({"model": {"use_repo_embedding": "graph"}})", "model.use_repo_embedding");
    expect_error(R"({"simulation": {"seed": -1}})", "simulation.seed");
    expect_error(R"({"typo": 1})", "typo");
}

TEST(Config, PresetThenExplicitFlags) {
    const auto c = pl::config_from_json(pl::Json::parse(R"({"model": {"preset": "baseline", "use_group_activity": true}})"));
    EXPECT_EQ(c.flags.repo, RepoFeature::None);
    EXPECT_TRUE(c.flags.group_activity);
    EXPECT_FALSE(c.flags.no_event_type);
}

TEST(Config, OverridesAndHash) {
    pl::Json j = pl::Json::object();
    pl::apply_override(j, "model.epochs=7");
    pl::apply_override(j, "model.preset=mts_all_idx");
    pl::apply_override(j, "workdir=\"w2\"");
    const auto c = pl::config_from_json(j);
    EXPECT_EQ(c.model.epochs, 7);
    EXPECT_EQ(c.preset, "mts_all_idx");
    EXPECT_EQ(c.workdir, "w2");
    EXPECT_THROW(pl::apply_override(j, "=3"), ValidationError);
    EXPECT_THROW(pl::apply_override(j, "model.epochs"), ValidationError);

    const auto a = pl::config_from_json(pl::Json::object());
    EXPECT_EQ(pl::config_hash(a), pl::config_hash(pl::config_from_json(pl::config_to_json(a))));
    EXPECT_NE(pl::config_hash(a), pl::config_hash(c));
}

TEST(Config, LoadResolvesAgainstConfigDirectory) {
    TempDir t("cfg");
    {
        std::ofstream f(t.path() / "c.json");
        f << R"({"workdir": "out"})";
    }
    const auto c = pl::load_config(t.path() / "c.json", {"threads=2"});
    EXPECT_EQ(c.work(), t.path() / "out");
    EXPECT_EQ(c.threads, 2);
    EXPECT_THROW(pl::load_config(t.path() / "missing.json"), ValidationError);
    {
        std::ofstream f(t.path() / "bad.json");
        f << "{not json";
    }
    EXPECT_THROW(pl::load_config(t.path() / "bad.json"), ValidationError);
}

TEST(Pipeline, MissingArtifactNamesTheStage) {
    TempDir t("missing");
    const auto c = small_config(t.path());
    try {
        pl::run_group_users(c);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("gitevolve ingest"), std::string::npos) << e.what();
    }
    pl::run_synth(c);
    pl::run_ingest(c);
    pl::run_group_users(c);
    try {
        pl::run_train(c);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("embed-repos"), std::string::npos) << e.what();
    }
    EXPECT_THROW(pl::run_simulate(c), DataError);
}

TEST(Pipeline, EndToEndIsDeterministic) {
    TempDir a("det_a"), b("det_b");
    const auto ca = small_config(a.path()), cb = small_config(b.path());
    run_all(ca);
    run_all(cb);
    for (const char* rel : {"work/chains.tsv", "work/user_groups.txt", "work/embeddings.txt", "work/models/mts_all/model.txt",
                            "work/runs/mts_all_simulate/simulation.tsv", "work/runs/mts_all_simulate/simulate.manifest.json"}) {
        EXPECT_EQ(slurp(a.path() / rel), slurp(b.path() / rel)) << rel;
    }
}

TEST(Pipeline, EvaluateIdenticalFilesIsPerfect) {
    TempDir t("eval");
    const auto c = small_config(t.path());
    pl::run_synth(c);
    pl::run_ingest(c);
    pl::run_group_users(c);
    const auto run = pl::run_baseline(c, pl::BaselineKind::Previous);
    const auto truth = run.dir / "truth.tsv";
    const auto r = pl::run_evaluate(c, truth, truth, run.dir / "repos.txt", t.path() / "eval");
    EXPECT_EQ(r.repos, 12u);
    EXPECT_DOUBLE_EQ(r.event_type.bleu[0], 1.0);
    EXPECT_DOUBLE_EQ(r.user_group.bleu[0], 1.0);
    EXPECT_DOUBLE_EQ(r.event_type.map, 1.0);
    EXPECT_EQ(r.mean_dtw, 0.0);
    EXPECT_EQ(r.mae, 0.0);
    EXPECT_TRUE(fs::exists(t.path() / "eval" / "report.tsv"));
    EXPECT_TRUE(fs::exists(t.path() / "eval" / "evaluate.manifest.json"));
}

TEST(Pipeline, AblationsTrainAndPredict) {
    TempDir t("ablate");
    auto base = small_json();
    base["model"]["epochs"] = 1;
    const auto c0 = pl::config_from_json(base, t.path());
    pl::run_synth(c0);
    pl::run_ingest(c0);
    pl::run_group_users(c0);
    pl::run_embed_repos(c0);
    for (const auto& [name, flags] : pl::presets()) {
        auto j = base;
        j["model"]["preset"] = name;
        const auto c = pl::config_from_json(j, t.path());
        const auto s = pl::run_train(c);
        int expected = 12 + 1 + 5 + (flags.group_activity ? 28 : 0);
        if (flags.repo == RepoFeature::Index) expected += 1;
        if (flags.repo == RepoFeature::Profile) expected += kRepoAttributeDim;
        if (flags.repo == RepoFeature::Learned) expected += 8;
        EXPECT_EQ(s.input_dim, expected) << name;
        const auto p = pl::run_predict(c);
        const auto pred = pl::read_simulation_file(p.dir / "prediction.tsv");
        const auto truth = pl::read_simulation_file(p.dir / "truth.tsv");
        for (const auto& [repo, chain] : truth) EXPECT_EQ(pred.at(repo).events.size(), chain.events.size()) << name;
        if (!flags.no_event_type) {
            for (const auto& [repo, chain] : pred)
                for (const auto& e : chain.events) EXPECT_NE(e.type, EventType::NoEventForOneMonth);
        }
    }
}

TEST(Pipeline, BaselineKinds) {
    EXPECT_EQ(pl::parse_baseline("noevent"), pl::BaselineKind::NoEvent);
    EXPECT_THROW(pl::parse_baseline("oracle"), ValidationError);
}

TEST(Pipeline, GradcheckPasses) {
    const auto s = pl::run_gradcheck(2, 20, 5);
    EXPECT_LT(s.combined.max_rel_error, 1e-4);
    for (const auto& b : s.per_branch) EXPECT_LT(b.max_rel_error, 1e-4);
}

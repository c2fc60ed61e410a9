// gitevolve: stage runner over a JSON config.
//
// Exit codes: 0 success, 1 validation, 2 data, 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gitevolve.hpp"

namespace {

using namespace gitevolve;
namespace pl = gitevolve::pipeline;

struct Options {
    std::string config;
    std::vector<std::string> overrides;
    std::string workdir;
    std::string preset;
    int threads = 0;
};

pl::Config resolve_config(const Options& o) {
    std::vector<std::string> overrides = o.overrides;
    if (!o.workdir.empty()) overrides.push_back("workdir=\"" + o.workdir + "\"");
    if (!o.preset.empty()) overrides.push_back("model.preset=\"" + o.preset + "\"");
    if (o.threads > 0) overrides.push_back("threads=" + std::to_string(o.threads));
    std::optional<std::filesystem::path> path;
    if (!o.config.empty()) path = o.config;
    return pl::load_config(path, overrides);
}

std::vector<int> parse_k_list(const std::string& s) {
    std::vector<int> ks;
    for (auto part : io::split(s, ',')) {
        std::int64_t k = 0;
        if (!io::parse_int64(part, k) || k < 2) {
            throw ValidationError("--scan-k expects a comma-separated list of integers >= 2");
        }
        ks.push_back(static_cast<int>(k));
    }
    return ks;
}

void print_run(const char* what, const pl::RunSummary& s) {
    std::cout << what << ": " << s.repos << " repos, " << s.events << " events";
    if (s.truncated) std::cout << ", " << s.truncated << " truncated at the event cap";
    std::cout << " -> " << s.dir.string() << '\n';
}

void print_report(const MetricReport& r) {
    write_report_tsv(std::cout, r);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Repository evolution simulator: ingest, group, embed, train, simulate and evaluate."};
    app.require_subcommand(1);
    app.fallthrough();
    Options opt;
    app.add_option("-c,--config", opt.config, "JSON config file");
    app.add_option("--set", opt.overrides, "Override a config field, e.g. --set model.epochs=5")->take_all();
    app.add_option("--workdir", opt.workdir, "Artifact directory (overrides config workdir)");
    app.add_option("--threads", opt.threads, "Worker cap for per-repo stages")->check(CLI::PositiveNumber);

    auto* ingest = app.add_subcommand("ingest", "Parse the event log into the chain store");
    auto* group = app.add_subcommand("group-users", "Cluster users into groups");
    std::string scan_k;
    group->add_option("--scan-k", scan_k, "Also write an elbow/silhouette table for these k, e.g. 2,5,10,50,100");
    auto* embed = app.add_subcommand("embed-repos", "Learn repo embeddings on the co-creator graph");

    auto* train = app.add_subcommand("train", "Train the multi-task sequence model");
    std::string dump_encoded;
    train->add_option("--preset", opt.preset, "Ablation preset")
        ->check(CLI::IsMember({"baseline", "mts_all", "mts_all_minus_fr", "mts_all_minus_act", "mts_all_idx",
                               "mts_all_profile", "mts_all_11"}));
    train->add_option("--dump-encoded", dump_encoded, "Write every encoded event vector to this file");

    auto* simulate = app.add_subcommand("simulate", "Closed-loop rollout over the simulation window");
    auto* predict = app.add_subcommand("predict", "Teacher-forced next-event prediction");
    std::string run_out;
    for (auto* s : {simulate, predict}) {
        s->add_option("--preset", opt.preset, "Model preset to load");
        s->add_option("--out", run_out, "Output directory (default <workdir>/runs/<preset>_<mode>)");
    }

    auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a prediction file against ground truth");
    std::string pred_path, truth_path, repos_path, eval_out;
    evaluate_cmd->add_option("--pred", pred_path, "Prediction file")->required();
    evaluate_cmd->add_option("--truth", truth_path, "Ground-truth file")->required();
    evaluate_cmd->add_option("--repos", repos_path, "Repo list (defaults to the union of both files)");
    evaluate_cmd->add_option("--out", eval_out, "Report directory (default: the prediction file's directory)");

    auto* baseline = app.add_subcommand("baseline", "Random, Previous or NoEvent baseline rollouts");
    std::string baseline_kind;
    baseline->add_option("kind", baseline_kind, "random | previous | noevent")
        ->required()
        ->check(CLI::IsMember({"random", "previous", "noevent"}));
    baseline->add_option("--out", run_out, "Output directory (default <workdir>/runs/baseline_<kind>)");

    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset to the configured data paths");

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the model gradient");
    std::uint64_t gc_seed = 1;
    double gc_tol = 1e-4;
    gradcheck->add_option("--seed", gc_seed, "Initialization and batch seed");
    gradcheck->add_option("--tol", gc_tol, "Maximum accepted relative error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        const pl::Config cfg = resolve_config(opt);
        auto out_dir = [&]() -> std::optional<std::filesystem::path> {
            if (run_out.empty()) return std::nullopt;
            return std::filesystem::path(run_out);
        };
        if (*ingest) {
            const auto s = pl::run_ingest(cfg);
            std::cout << "ingest: " << s.records << " records, " << s.rejected << " rejected, " << s.repos << " repos, "
                      << s.events << " events\n";
        } else if (*group) {
            const auto s = pl::run_group_users(cfg, scan_k.empty() ? std::vector<int>{} : parse_k_list(scan_k));
            std::cout << "group-users: " << s.users << " users (" << s.missing_profiles << " without profile), inertia "
                      << io::fixed(s.inertia, 4) << " after " << s.iterations << " iterations\n";
        } else if (*embed) {
            const auto s = pl::run_embed_repos(cfg);
            std::cout << "embed-repos: " << s.repos << " repos, " << s.edges << " edges, final loss "
                      << io::fixed(s.final_loss, 6) << '\n';
        } else if (*train) {
            std::optional<std::filesystem::path> dump;
            if (!dump_encoded.empty()) dump = dump_encoded;
            const auto s = pl::run_train(
                cfg,
                [](const EpochRecord& r) {
                    std::cout << "epoch " << r.epoch << "\ttrain " << io::fixed(r.train.total, 6) << "\tval "
                              << io::fixed(r.val.total, 6) << '\n';
                },
                dump);
            std::cout << "train: " << s.train_samples << " train / " << s.val_samples << " validation samples, input width "
                      << s.input_dim << ", best epoch " << s.best_epoch << " (val " << io::fixed(s.best_val, 6) << ")\n";
        } else if (*simulate) {
            print_run("simulate", pl::run_simulate(cfg, out_dir()));
        } else if (*predict) {
            print_run("predict", pl::run_predict(cfg, out_dir()));
        } else if (*evaluate_cmd) {
            std::optional<std::filesystem::path> repos;
            if (!repos_path.empty()) repos = repos_path;
            const std::filesystem::path pred(pred_path);
            const std::filesystem::path dir =
                eval_out.empty() ? (pred.has_parent_path() ? pred.parent_path() : std::filesystem::path(".")) : std::filesystem::path(eval_out);
            print_report(pl::run_evaluate(cfg, pred, truth_path, repos, dir));
        } else if (*baseline) {
            print_run(("baseline " + baseline_kind).c_str(), pl::run_baseline(cfg, pl::parse_baseline(baseline_kind), out_dir()));
        } else if (*synth) {
            const auto d = pl::run_synth(cfg);
            std::cout << "synth: " << d.events.size() << " events, " << d.users.size() << " users, " << d.repos.size()
                      << " repos -> " << cfg.resolve(cfg.data.events).parent_path().string() << '\n';
        } else if (*gradcheck) {
            const auto s = pl::run_gradcheck(gc_seed);
            static const char* names[] = {"type", "delay", "group"};
            bool ok = s.combined.max_rel_error < gc_tol;
            for (int b = 0; b < kNumBranches; ++b) {
                const auto& r = s.per_branch[static_cast<std::size_t>(b)];
                std::cout << "branch " << names[b] << "\tmax relative error " << r.max_rel_error << " (" << r.worst_tensor
                          << ")\n";
                ok = ok && r.max_rel_error < gc_tol;
            }
            std::cout << "combined\tmax relative error " << s.combined.max_rel_error << " over " << s.combined.parameters
                      << " parameters\n";
            if (!ok) throw NumericError("gradient check failed: relative error above " + std::to_string(gc_tol));
            std::cout << "gradcheck: ok\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

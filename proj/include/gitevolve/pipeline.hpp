// Config-driven stages that persist their artifacts in a work directory.
//
// Work directory layout:
//   chains.tsv, ingest.json                       ingest
//   user_groups.txt, kscan.tsv                    group-users
//   embeddings.txt, embedding_history.tsv         embed-repos
//   models/<preset>/{model.txt, activity.txt, repo_index.tsv, features.json, history.tsv}
//   runs/<name>/{simulation.tsv, truth.tsv, repos.txt}
//   runs/<name>/{report.tsv, report.json, per_repo.tsv}
// Every stage also writes <stage>.manifest.json next to its outputs.

#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gitevolve/core_types.hpp"
#include "gitevolve/encoder.hpp"
#include "gitevolve/error.hpp"
#include "gitevolve/grouping.hpp"
#include "gitevolve/ingestion.hpp"
#include "gitevolve/io_util.hpp"
#include "gitevolve/metrics.hpp"
#include "gitevolve/model.hpp"
#include "gitevolve/parallel.hpp"
#include "gitevolve/repo_graph.hpp"
#include "gitevolve/simulator.hpp"
#include "gitevolve/testkit.hpp"

namespace gitevolve::pipeline {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config

struct DataPaths {
    std::string events = "data/events.tsv";
    std::string users = "data/users.tsv";
    std::string repos = "data/repos.tsv";
};

struct SimulationSettings {
    std::size_t max_events_per_repo = 100000;
    bool sample = false;
    std::uint64_t seed = 11;
};

/// Named ablation variants.
inline const std::map<std::string, FeatureFlags>& presets() {
    static const std::map<std::string, FeatureFlags> p = {
        {"baseline", {RepoFeature::None, false, false}},
        {"mts_all", {RepoFeature::Learned, true, true}},
        {"mts_all_minus_fr", {RepoFeature::None, true, true}},
        {"mts_all_minus_act", {RepoFeature::Learned, false, true}},
        {"mts_all_idx", {RepoFeature::Index, true, true}},
        {"mts_all_profile", {RepoFeature::Profile, true, true}},
        {"mts_all_11", {RepoFeature::Learned, true, false}},
    };
    return p;
}

inline FeatureFlags preset_flags(const std::string& name) {
    const auto it = presets().find(name);
    if (it == presets().end()) {
        std::string names;
        for (const auto& [k, v] : presets()) names += (names.empty() ? "" : ", ") + k;
        throw ValidationError("config field model.preset: unknown preset '" + name + "' (known: " + names + ")");
    }
    return it->second;
}

/// Window defaults fit the bundled synthetic data: 60h train, 12h
/// validation, 48h simulation.
inline TimeWindows default_windows() {
    constexpr Timestamp base = 1600000000;
    constexpr Timestamp h = kSecondsPerHour;
    return {base, base + 60 * h, base + 60 * h, base + 72 * h, base + 72 * h, base + 120 * h};
}

struct Config {
    /// Directory relative paths are resolved against (the config file's).
    fs::path base_dir = ".";
    std::string workdir = "work";
    int threads = 1;
    DataPaths data;
    TimeWindows windows = default_windows();
    double max_rejected_fraction = 0.01;
    GroupingConfig grouping;
    EmbeddingConfig embedding;
    std::string preset = "mts_all";
    FeatureFlags flags = preset_flags("mts_all");
    MtsConfig model;
    SimulationSettings simulation;
    MetricOptions metrics;
    testkit::SyntheticSpec synth;

    fs::path resolve(const std::string& p) const {
        const fs::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    }
    fs::path work() const { return resolve(workdir); }
    fs::path model_dir() const { return work() / "models" / preset; }
    fs::path run_dir(const std::string& name) const { return work() / "runs" / name; }
};

namespace detail {

/// Reads one JSON object section; unknown keys and wrong types raise
/// ValidationError naming the full field path.
class Section {
public:
    Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ValidationError("config field " + name() + ": expected an object");
    }

    std::string name() const { return path_.empty() ? "<root>" : path_; }
    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <class T>
    void read(const std::string& key, T& target) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const Json& v = j_.at(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) fail(key, "expected true or false");
            target = v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) fail(key, "expected a string");
            target = v.get<std::string>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) fail(key, "expected a number");
            target = v.get<T>();
        } else if constexpr (std::is_unsigned_v<T>) {
            if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
                fail(key, "expected a non-negative integer");
            }
            target = v.get<T>();
        } else {
            if (!v.is_number_integer()) fail(key, "expected an integer");
            target = v.get<T>();
        }
    }

    std::optional<Section> sub(const std::string& key) {
        seen_.insert(key);
        if (!j_.contains(key)) return std::nullopt;
        return Section(j_.at(key), field(key));
    }

    const Json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw ValidationError("config field " + field(k) + ": unknown key");
        }
    }

    [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
        throw ValidationError("config field " + field(key) + ": " + msg);
    }

private:
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline std::vector<double> read_double_list(const Json& v, const std::string& field) {
    if (!v.is_array()) throw ValidationError("config field " + field + ": expected an array of numbers");
    std::vector<double> out;
    for (const auto& x : v) {
        if (!x.is_number()) throw ValidationError("config field " + field + ": expected an array of numbers");
        out.push_back(x.get<double>());
    }
    return out;
}

}  // namespace detail

inline Config config_from_json(const Json& j, const fs::path& base_dir = ".") {
    Config c;
    c.base_dir = base_dir;
    detail::Section root(j, "");
    root.read("workdir", c.workdir);
    root.read("threads", c.threads);
    root.read("max_rejected_fraction", c.max_rejected_fraction);
    if (auto s = root.sub("data")) {
        s->read("events", c.data.events);
        s->read("users", c.data.users);
        s->read("repos", c.data.repos);
        s->finish();
    }
    if (auto s = root.sub("windows")) {
        s->read("train_start", c.windows.train_start);
        s->read("train_end", c.windows.train_end);
        s->read("val_start", c.windows.val_start);
        s->read("val_end", c.windows.val_end);
        s->read("sim_start", c.windows.sim_start);
        s->read("sim_end", c.windows.sim_end);
        s->finish();
    }
    if (auto s = root.sub("grouping")) {
        s->read("k", c.grouping.k);
        s->read("seed", c.grouping.seed);
        s->read("max_iter", c.grouping.max_iter);
        s->read("tol", c.grouping.tol);
        s->finish();
    }
    if (auto s = root.sub("embedding")) {
        auto& e = c.embedding;
        s->read("dim", e.dim);
        s->read("hidden", e.hidden);
        s->read("outer_samples", e.outer_samples);
        s->read("inner_samples", e.inner_samples);
        s->read("negatives", e.negatives);
        s->read("epochs", e.epochs);
        s->read("batch_edges", e.batch_edges);
        s->read("learning_rate", e.learning_rate);
        s->read("seed", e.seed);
        s->finish();
    }
    if (auto s = root.sub("model")) {
        auto& m = c.model;
        s->read("preset", c.preset);
        c.flags = preset_flags(c.preset);
        if (s->has("use_repo_embedding")) {
            std::string r;
            s->read("use_repo_embedding", r);
            try {
                c.flags.repo = parse_repo_feature(r);
            } catch (const ValidationError& e) {
                s->fail("use_repo_embedding", e.what());
            }
        }
        s->read("use_group_activity", c.flags.group_activity);
        s->read("use_no_event_type", c.flags.no_event_type);
        s->read("window", m.window);
        s->read("lstm_hidden1", m.lstm_hidden1);
        s->read("lstm_hidden2", m.lstm_hidden2);
        s->read("branch_hidden1", m.branch_hidden1);
        s->read("branch_hidden2", m.branch_hidden2);
        s->read("dropout", m.dropout);
        s->read("batch_size", m.batch_size);
        s->read("epochs", m.epochs);
        s->read("learning_rate", m.learning_rate);
        s->read("beta1", m.beta1);
        s->read("beta2", m.beta2);
        s->read("epsilon", m.epsilon);
        s->read("seed", m.seed);
        if (auto w = s->sub("loss_weights")) {
            w->read("type", m.weights.type);
            w->read("delay", m.weights.delay);
            w->read("group", m.weights.group);
            w->finish();
        }
        s->finish();
    }
    if (auto s = root.sub("simulation")) {
        s->read("max_events_per_repo", c.simulation.max_events_per_repo);
        s->read("sample", c.simulation.sample);
        s->read("seed", c.simulation.seed);
        s->finish();
    }
    if (auto s = root.sub("metrics")) {
        std::string variant = "positional";
        s->read("ap_variant", variant);
        if (variant == "positional") c.metrics.ap_variant = ApVariant::Positional;
        else if (variant == "multiset") c.metrics.ap_variant = ApVariant::Multiset;
        else s->fail("ap_variant", "expected positional or multiset");
        s->read("dtw_scale", c.metrics.dtw_scale);
        s->finish();
    }
    if (auto s = root.sub("synth")) {
        auto& t = c.synth;
        s->read("repos", t.repos);
        s->read("users_per_population", t.users_per_population);
        s->read("creators", t.creators);
        s->read("start_spread_hours", t.start_spread_hours);
        s->read("dormant_fraction", t.dormant_fraction);
        s->read("seed", t.seed);
        if (s->has("states")) {
            const Json& v = s->raw("states");
            if (!v.is_array()) s->fail("states", "expected an array of event type names");
            t.states.clear();
            for (const auto& x : v) {
                const auto ty = x.is_string() ? parse_event_type(x.get<std::string>()) : std::nullopt;
                if (!ty) s->fail("states", "expected an array of event type names");
                t.states.push_back(*ty);
            }
        }
        if (s->has("transition")) {
            const Json& v = s->raw("transition");
            if (!v.is_array()) s->fail("transition", "expected an array of rows");
            t.transition.clear();
            for (const auto& row : v) t.transition.push_back(detail::read_double_list(row, s->field("transition")));
        }
        if (s->has("delay_hours") || s->has("delay_shape")) {
            const auto hours = s->has("delay_hours") ? detail::read_double_list(s->raw("delay_hours"), s->field("delay_hours"))
                                                     : std::vector<double>(t.states.size(), 1.0);
            const auto shape = s->has("delay_shape") ? detail::read_double_list(s->raw("delay_shape"), s->field("delay_shape"))
                                                     : std::vector<double>(hours.size(), 0.0);
            if (hours.size() != shape.size()) s->fail("delay_shape", "must have one entry per state");
            t.delays.clear();
            for (std::size_t i = 0; i < hours.size(); ++i) t.delays.push_back({hours[i], shape[i]});
        }
        if (s->has("population1_share")) {
            t.population1_share = detail::read_double_list(s->raw("population1_share"), s->field("population1_share"));
        }
        s->finish();
    }
    root.finish();

    if (c.threads < 1) throw ValidationError("config field threads: must be >= 1");
    if (!(c.max_rejected_fraction >= 0.0 && c.max_rejected_fraction <= 1.0)) {
        throw ValidationError("config field max_rejected_fraction: must lie in [0, 1]");
    }
    if (c.grouping.k < 1) throw ValidationError("config field grouping.k: must be >= 1");
    if (c.grouping.max_iter < 1) throw ValidationError("config field grouping.max_iter: must be >= 1");
    if (c.embedding.dim < 1 || c.embedding.hidden < 1 || c.embedding.epochs < 0 || c.embedding.batch_edges < 1 ||
        c.embedding.negatives < 1 || c.embedding.outer_samples < 1 || c.embedding.inner_samples < 1) {
        throw ValidationError("config section embedding: sizes must be positive");
    }
    if (c.simulation.max_events_per_repo < 1) {
        throw ValidationError("config field simulation.max_events_per_repo: must be >= 1");
    }
    if (!(c.metrics.dtw_scale > 0.0)) throw ValidationError("config field metrics.dtw_scale: must be positive");
    c.model.num_groups = c.grouping.k + 1;
    try {
        c.model.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("config section ") + e.what());
    }
    return c;
}

/// Canonical form of every setting that affects results (paths excluded).
inline Json config_to_json(const Config& c) {
    const auto& w = c.windows;
    const auto& e = c.embedding;
    const auto& m = c.model;
    const auto& t = c.synth;
    Json states = Json::array(), hours = Json::array(), shape = Json::array();
    for (auto s : t.states) states.push_back(std::string(to_string(s)));
    for (const auto& d : t.delays) {
        hours.push_back(d.hours);
        shape.push_back(d.shape);
    }
    return Json{
        {"max_rejected_fraction", c.max_rejected_fraction},
        {"windows",
         {{"train_start", w.train_start},
          {"train_end", w.train_end},
          {"val_start", w.val_start},
          {"val_end", w.val_end},
          {"sim_start", w.sim_start},
          {"sim_end", w.sim_end}}},
        {"grouping", {{"k", c.grouping.k}, {"seed", c.grouping.seed}, {"max_iter", c.grouping.max_iter}, {"tol", c.grouping.tol}}},
        {"embedding",
         {{"dim", e.dim},
          {"hidden", e.hidden},
          {"outer_samples", e.outer_samples},
          {"inner_samples", e.inner_samples},
          {"negatives", e.negatives},
          {"epochs", e.epochs},
          {"batch_edges", e.batch_edges},
          {"learning_rate", e.learning_rate},
          {"seed", e.seed}}},
        {"model",
         {{"preset", c.preset},
          {"use_repo_embedding", std::string(to_string(c.flags.repo))},
          {"use_group_activity", c.flags.group_activity},
          {"use_no_event_type", c.flags.no_event_type},
          {"window", m.window},
          {"lstm_hidden1", m.lstm_hidden1},
          {"lstm_hidden2", m.lstm_hidden2},
          {"branch_hidden1", m.branch_hidden1},
          {"branch_hidden2", m.branch_hidden2},
          {"dropout", m.dropout},
          {"batch_size", m.batch_size},
          {"epochs", m.epochs},
          {"learning_rate", m.learning_rate},
          {"beta1", m.beta1},
          {"beta2", m.beta2},
          {"epsilon", m.epsilon},
          {"seed", m.seed},
          {"loss_weights", {{"type", m.weights.type}, {"delay", m.weights.delay}, {"group", m.weights.group}}}}},
        {"simulation",
         {{"max_events_per_repo", c.simulation.max_events_per_repo},
          {"sample", c.simulation.sample},
          {"seed", c.simulation.seed}}},
        {"metrics",
         {{"ap_variant", c.metrics.ap_variant == ApVariant::Positional ? "positional" : "multiset"},
          {"dtw_scale", c.metrics.dtw_scale}}},
        {"synth",
         {{"repos", t.repos},
          {"users_per_population", t.users_per_population},
          {"creators", t.creators},
          {"start_spread_hours", t.start_spread_hours},
          {"dormant_fraction", t.dormant_fraction},
          {"seed", t.seed},
          {"states", states},
          {"transition", t.transition},
          {"delay_hours", hours},
          {"delay_shape", shape},
          {"population1_share", t.population1_share}}},
    };
}

inline std::string config_hash(const Config& c) { return io::hex64(io::fnv1a(config_to_json(c).dump())); }

/// Applies "a.b.c=value" to a JSON tree. The value is parsed as JSON and
/// falls back to a plain string.
inline void apply_override(Json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ValidationError("override '" + assignment + "' must have the form section.key=value");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    Json value = Json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    Json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ValidationError("override '" + assignment + "' has an empty key");
        if (!node->is_object()) throw ValidationError("override '" + assignment + "': " + key + " is not inside an object");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        if (node->is_null()) *node = Json::object();
        start = dot + 1;
    }
}

inline Config load_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides = {}) {
    Json j = Json::object();
    fs::path base = ".";
    if (path) {
        std::ifstream in(*path);
        if (!in) throw ValidationError("cannot open config file " + path->string());
        j = Json::parse(in, nullptr, false);
        if (j.is_discarded()) throw ValidationError("config file " + path->string() + " is not valid JSON");
        base = path->parent_path().empty() ? fs::path(".") : path->parent_path();
    }
    for (const auto& o : overrides) apply_override(j, o);
    return config_from_json(j, base);
}

// ---------------------------------------------------------------------------
// Artifact helpers

inline void require(const fs::path& p, const std::string& producer) {
    if (!fs::exists(p)) {
        throw DataError("missing artifact " + p.string() + "; run `gitevolve " + producer + "` first");
    }
}

inline std::ifstream open_artifact(const fs::path& p, const std::string& producer) {
    require(p, producer);
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot read " + p.string());
    return in;
}

inline std::ifstream open_data(const fs::path& p, const std::string& what) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot open " + what + " file " + p.string());
    return in;
}

inline void write_text(const fs::path& p, const std::function<void(std::ostream&)>& fn) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("cannot write " + p.string());
    fn(out);
    out.flush();
    if (!out) throw DataError("write failed for " + p.string());
}

/// Stage manifest: config hash, seeds, input and output checksums. No
/// wall-clock fields, so reruns reproduce it byte for byte.
inline void write_manifest(const fs::path& dir, const std::string& stage, const Config& c,
                           const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
    Json m;
    m["stage"] = stage;
    m["config_hash"] = config_hash(c);
    m["seeds"] = {{"grouping", c.grouping.seed},
                  {"embedding", c.embedding.seed},
                  {"model", c.model.seed},
                  {"simulation", c.simulation.seed},
                  {"synth", c.synth.seed}};
    m["preset"] = c.preset;
    Json in = Json::object(), out = Json::object();
    for (const auto& p : inputs) in[p.filename().string()] = io::file_checksum(p.string());
    for (const auto& p : outputs) out[p.filename().string()] = io::file_checksum(p.string());
    m["inputs"] = in;
    m["outputs"] = out;
    write_text(dir / (stage + ".manifest.json"), [&](std::ostream& o) { o << m.dump(2) << '\n'; });
}

// ---------------------------------------------------------------------------
// Loading shared state

inline IngestResult load_chains(const Config& c) {
    auto in = open_artifact(c.work() / "chains.tsv", "ingest");
    return parse_event_log(in);
}

inline std::map<std::string, UserProfile> load_users(const Config& c) {
    auto in = open_data(c.resolve(c.data.users), "user profile");
    return read_user_profiles(in);
}

inline std::map<std::string, RepoProfile> load_repos(const Config& c) {
    auto in = open_data(c.resolve(c.data.repos), "repo profile");
    return read_repo_profiles(in);
}

inline UserGroupModel load_groups(const Config& c) {
    auto in = open_artifact(c.work() / "user_groups.txt", "group-users");
    return load_user_groups(in);
}

/// Group-labelled chains; NoEventForOneMonth injected when `inject`.
inline std::map<std::string, EventChain> labelled_chains(const IngestResult& ingest, const UserGroupModel& groups,
                                                         const std::map<std::string, UserProfile>& users, bool inject) {
    auto chains = assign_groups(ingest, groups, users);
    if (inject) {
        for (auto& [repo, chain] : chains) chain = inject_no_event(chain, groups.artificial_group());
    }
    return chains;
}

/// Repos with at least one event before sim_start, in id order.
inline std::vector<std::string> seeded_repos(const std::map<std::string, EventChain>& chains, Timestamp sim_start) {
    std::vector<std::string> out;
    for (const auto& [repo, chain] : chains) {
        if (!chain.events.empty() && chain.events.front().timestamp < sim_start) out.push_back(repo);
    }
    return out;
}

inline std::vector<std::string> read_repo_list(std::istream& in) {
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        const auto v = io::strip_cr(line);
        if (!v.empty() && v.front() != '#') out.emplace_back(v);
    }
    return out;
}

inline void write_repo_list(std::ostream& out, const std::vector<std::string>& repos) {
    for (const auto& r : repos) out << r << '\n';
}

// ---------------------------------------------------------------------------
// Stages

struct IngestSummary {
    std::size_t records = 0;
    std::size_t rejected = 0;
    std::size_t repos = 0;
    std::size_t events = 0;
};

inline IngestSummary run_ingest(const Config& c) {
    const auto events_path = c.resolve(c.data.events);
    auto in = open_data(events_path, "event log");
    const IngestResult r = parse_event_log(in);
    check_rejection_rate(r, c.max_rejected_fraction);
    IngestSummary s{r.total_records, r.rejected(), r.chains.size(), 0};
    for (const auto& [repo, chain] : r.chains) s.events += chain.events.size() - 1;
    const auto dir = c.work();
    write_text(dir / "chains.tsv", [&](std::ostream& o) { write_event_log(o, r); });
    const Json report{{"records", r.total_records},
                      {"rejected_unknown_type", r.rejected_unknown_type},
                      {"rejected_bad_timestamp", r.rejected_bad_timestamp},
                      {"rejected_malformed", r.rejected_malformed},
                      {"repos", s.repos},
                      {"events", s.events}};
    write_text(dir / "ingest.json", [&](std::ostream& o) { o << report.dump(2) << '\n'; });
    write_manifest(dir, "ingest", c, {events_path}, {dir / "chains.tsv", dir / "ingest.json"});
    return s;
}

struct GroupingSummary {
    std::size_t users = 0;
    std::size_t missing_profiles = 0;
    double inertia = 0.0;
    int iterations = 0;
};

/// Users active in the training window are clustered; `scan_ks` adds an
/// elbow/silhouette table.
inline GroupingSummary run_group_users(const Config& c, const std::vector<int>& scan_ks = {}) {
    const IngestResult ingest = load_chains(c);
    const auto users = load_users(c);
    const auto table = build_user_features(users, ingest, c.windows.train_start, c.windows.train_end);
    KMeansResult diag;
    const UserGroupModel model = fit_user_groups(table, c.grouping, &diag);
    const auto dir = c.work();
    std::vector<fs::path> outputs{dir / "user_groups.txt"};
    write_text(dir / "user_groups.txt", [&](std::ostream& o) { save_user_groups(o, model); });
    if (!scan_ks.empty()) {
        const Eigen::MatrixXd z = model.standardizer.apply(table.rows);
        const auto rows = scan_k(z, scan_ks, c.grouping.seed, c.grouping.max_iter, c.grouping.tol);
        write_text(dir / "kscan.tsv", [&](std::ostream& o) {
            o << "k\tinertia\tsilhouette\n";
            for (const auto& r : rows) o << r.k << '\t' << io::exact_decimal(r.inertia) << '\t' << io::exact_decimal(r.silhouette) << '\n';
        });
        outputs.push_back(dir / "kscan.tsv");
    }
    write_manifest(dir, "group-users", c, {dir / "chains.tsv", c.resolve(c.data.users)}, outputs);
    return {table.user_ids.size(), table.missing_profiles, diag.inertia, diag.iterations};
}

struct EmbeddingSummary {
    std::size_t repos = 0;
    std::size_t edges = 0;
    double final_loss = 0.0;
};

inline EmbeddingSummary run_embed_repos(const Config& c) {
    const auto repos = load_repos(c);
    const RepoGraph graph = build_repo_graph(repos);
    EmbeddingTrainingHistory hist;
    const RepoEmbeddingModel model = learn_embeddings(graph, c.embedding, &hist);
    const auto dir = c.work();
    write_text(dir / "embeddings.txt", [&](std::ostream& o) { save_embeddings(o, model); });
    write_text(dir / "embedding_history.tsv", [&](std::ostream& o) {
        o << "epoch\tloss\n";
        o << "init\t" << io::exact_decimal(hist.initial_loss) << '\n';
        for (std::size_t e = 0; e < hist.epoch_loss.size(); ++e) o << e << '\t' << io::exact_decimal(hist.epoch_loss[e]) << '\n';
    });
    write_manifest(dir, "embed-repos", c, {c.resolve(c.data.repos)}, {dir / "embeddings.txt", dir / "embedding_history.tsv"});
    return {static_cast<std::size_t>(graph.node_count()), static_cast<std::size_t>(graph.edge_count()), hist.epoch_loss.empty() ? hist.initial_loss : hist.epoch_loss.back()};
}

/// Encoding context for the configured flags. Activity statistics are
/// taken from the training window of `chains`.
inline FeatureContext build_context(const Config& c, const std::map<std::string, EventChain>& chains, int total_groups,
                                    const fs::path& embeddings_path) {
    FeatureContext ctx;
    ctx.flags = c.flags;
    ctx.total_groups = total_groups;
    if (c.flags.group_activity) {
        ctx.activity = std::make_shared<const GroupActivityTable>(
            compute_group_activity(chains, total_groups, c.windows.train_start, c.windows.train_end));
    }
    if (c.flags.repo == RepoFeature::Learned) {
        auto in = open_artifact(embeddings_path, "embed-repos");
        ctx.embeddings = std::make_shared<const RepoEmbeddingModel>(load_embeddings(in));
    }
    if (c.flags.repo == RepoFeature::Profile) {
        ctx.repo_profiles = std::make_shared<const std::map<std::string, RepoProfile>>(load_repos(c));
    }
    if (c.flags.repo == RepoFeature::Index) {
        int i = 0;
        for (const auto& [repo, chain] : chains) ctx.repo_index[repo] = ++i;
    }
    ctx.finalize();
    return ctx;
}

inline Json flags_json(const FeatureFlags& f, int total_groups, int dim) {
    return Json{{"use_repo_embedding", std::string(to_string(f.repo))},
                {"use_group_activity", f.group_activity},
                {"use_no_event_type", f.no_event_type},
                {"total_groups", total_groups},
                {"input_dim", dim}};
}

/// Persisted model plus everything needed to encode new events.
struct ModelBundle {
    MtsModel model;
    FeatureContext ctx;
};

inline void save_context(const fs::path& dir, const FeatureContext& ctx) {
    write_text(dir / "features.json", [&](std::ostream& o) { o << flags_json(ctx.flags, ctx.total_groups, ctx.dim()).dump(2) << '\n'; });
    write_text(dir / "activity.txt", [&](std::ostream& o) {
        if (ctx.activity) save_group_activity(o, *ctx.activity);
    });
    write_text(dir / "repo_index.tsv", [&](std::ostream& o) {
        for (const auto& [repo, i] : ctx.repo_index) o << repo << '\t' << i << '\n';
    });
}

inline ModelBundle load_bundle(const Config& c) {
    const auto dir = c.model_dir();
    auto model_in = open_artifact(dir / "model.txt", "train --preset " + c.preset);
    MtsModel model = MtsModel::load(model_in);
    auto feat_in = open_artifact(dir / "features.json", "train --preset " + c.preset);
    const Json f = Json::parse(feat_in, nullptr, false);
    if (f.is_discarded()) throw DataError("corrupt " + (dir / "features.json").string());
    FeatureContext ctx;
    ctx.flags.repo = parse_repo_feature(f.at("use_repo_embedding").get<std::string>());
    ctx.flags.group_activity = f.at("use_group_activity").get<bool>();
    ctx.flags.no_event_type = f.at("use_no_event_type").get<bool>();
    ctx.total_groups = f.at("total_groups").get<int>();
    if (ctx.flags.group_activity) {
        auto in = open_artifact(dir / "activity.txt", "train --preset " + c.preset);
        ctx.activity = std::make_shared<const GroupActivityTable>(load_group_activity(in));
    }
    if (ctx.flags.repo == RepoFeature::Learned) {
        auto in = open_artifact(c.work() / "embeddings.txt", "embed-repos");
        ctx.embeddings = std::make_shared<const RepoEmbeddingModel>(load_embeddings(in));
    }
    if (ctx.flags.repo == RepoFeature::Profile) {
        ctx.repo_profiles = std::make_shared<const std::map<std::string, RepoProfile>>(load_repos(c));
    }
    if (ctx.flags.repo == RepoFeature::Index) {
        auto in = open_artifact(dir / "repo_index.tsv", "train --preset " + c.preset);
        std::string line;
        while (std::getline(in, line)) {
            const auto fields = io::split(io::strip_cr(line));
            if (fields.size() != 2) continue;
            ctx.repo_index[std::string(fields[0])] = static_cast<int>(io::parse_int_or_throw(fields[1], "repo index"));
        }
    }
    ctx.finalize();
    if (ctx.dim() != model.config().input_dim) {
        throw DataError("model in " + dir.string() + " expects input width " + std::to_string(model.config().input_dim) +
                        " but its feature context encodes " + std::to_string(ctx.dim()));
    }
    return {std::move(model), std::move(ctx)};
}

struct TrainSummary {
    std::size_t train_samples = 0;
    std::size_t val_samples = 0;
    int best_epoch = -1;
    double best_val = 0.0;
    int input_dim = 0;
};

inline TrainSummary run_train(const Config& c, const std::function<void(const EpochRecord&)>& on_epoch = {},
                              const std::optional<fs::path>& dump_encoded = std::nullopt) {
    c.windows.validate();
    const IngestResult ingest = load_chains(c);
    const auto users = load_users(c);
    const UserGroupModel groups = load_groups(c);
    if (groups.total_groups() != c.model.num_groups) {
        throw ValidationError("user-group model has " + std::to_string(groups.k) + " groups but config grouping.k is " +
                              std::to_string(c.grouping.k));
    }
    const auto chains = labelled_chains(ingest, groups, users, c.flags.no_event_type);
    const FeatureContext ctx = build_context(c, chains, groups.total_groups(), c.work() / "embeddings.txt");

    MtsConfig mc = c.model;
    mc.input_dim = ctx.dim();
    mc.num_groups = groups.total_groups();
    SequenceDataset train_set(mc.window, mc.input_dim), val_set(mc.window, mc.input_dim);
    for (const auto& [repo, chain] : chains) {
        train_set.add_chain(chain, ctx, c.windows.train_start, c.windows.train_end);
        val_set.add_chain(chain, ctx, c.windows.val_start, c.windows.val_end);
    }
    if (dump_encoded) {
        write_text(*dump_encoded, [&](std::ostream& o) {
            for (const auto& [repo, chain] : chains) {
                const auto m = encode_chain(chain, ctx);
                for (Eigen::Index j = 0; j < m.cols(); ++j) {
                    o << repo << '\t' << j;
                    for (Eigen::Index i = 0; i < m.rows(); ++i) o << '\t' << io::exact_decimal(m(i, j));
                    o << '\n';
                }
            }
        });
    }
    const TrainResult res = train(train_set, val_set, mc, on_epoch);
    const auto dir = c.model_dir();
    fs::create_directories(dir);
    write_text(dir / "model.txt", [&](std::ostream& o) { res.model.save(o); });
    write_text(dir / "history.tsv", [&](std::ostream& o) { write_history(o, res.history); });
    save_context(dir, ctx);
    std::vector<fs::path> inputs{c.work() / "chains.tsv", c.work() / "user_groups.txt", c.resolve(c.data.users)};
    if (c.flags.repo == RepoFeature::Learned) inputs.push_back(c.work() / "embeddings.txt");
    if (c.flags.repo == RepoFeature::Profile) inputs.push_back(c.resolve(c.data.repos));
    write_manifest(dir, "train", c, inputs,
                   {dir / "model.txt", dir / "history.tsv", dir / "features.json", dir / "activity.txt", dir / "repo_index.tsv"});
    TrainSummary s{train_set.size(), val_set.size(), res.best_epoch, 0.0, mc.input_dim};
    if (res.best_epoch >= 0) s.best_val = res.history[static_cast<std::size_t>(res.best_epoch)].val.total;
    return s;
}

inline SimConfig sim_config(const Config& c, const FeatureFlags& flags) {
    SimConfig s;
    s.sim_start = c.windows.sim_start;
    s.sim_end = c.windows.sim_end;
    s.window = c.model.window;
    s.sample = c.simulation.sample;
    s.seed = c.simulation.seed;
    s.max_events_per_repo = c.simulation.max_events_per_repo;
    s.flags = flags;
    return s;
}

/// Ground truth for the simulation window. Truth chains always carry
/// NoEventForOneMonth so every variant is scored on the same events.
inline std::vector<SimulatedChain> window_truth(const std::map<std::string, EventChain>& injected,
                                                const std::vector<std::string>& repos, const TimeWindows& w) {
    std::vector<SimulatedChain> out;
    for (const auto& repo : repos) {
        auto t = as_reported(chain_slice(injected.at(repo), w.sim_start, w.sim_end));
        t.repo_id = repo;
        out.push_back(std::move(t));
    }
    return out;
}

struct RunSummary {
    fs::path dir;
    std::size_t repos = 0;
    std::size_t events = 0;
    std::size_t truncated = 0;
};

inline RunSummary write_run(const Config& c, const fs::path& dir, const std::string& stage, const std::string& output_name,
                            const std::vector<SimulatedChain>& predicted, const std::vector<SimulatedChain>& truth,
                            const std::vector<std::string>& repos, const std::vector<fs::path>& inputs) {
    write_text(dir / output_name, [&](std::ostream& o) { write_simulation(o, predicted); });
    write_text(dir / "truth.tsv", [&](std::ostream& o) { write_simulation(o, truth); });
    write_text(dir / "repos.txt", [&](std::ostream& o) { write_repo_list(o, repos); });
    write_manifest(dir, stage, c, inputs, {dir / output_name, dir / "truth.tsv", dir / "repos.txt"});
    RunSummary s{dir, repos.size(), 0, 0};
    for (const auto& p : predicted) {
        s.events += p.events.size();
        s.truncated += p.truncated ? 1 : 0;
    }
    return s;
}

/// Closed-loop rollout of every seeded repo with the trained model.
inline RunSummary run_simulate(const Config& c, const std::optional<fs::path>& out_dir = std::nullopt) {
    c.windows.validate();
    const ModelBundle bundle = load_bundle(c);
    const IngestResult ingest = load_chains(c);
    const auto users = load_users(c);
    const UserGroupModel groups = load_groups(c);
    const auto injected = labelled_chains(ingest, groups, users, true);
    const auto model_chains = bundle.ctx.flags.no_event_type ? injected : labelled_chains(ingest, groups, users, false);
    const auto repos = seeded_repos(model_chains, c.windows.sim_start);
    const SimConfig sc = sim_config(c, bundle.ctx.flags);
    std::vector<SimulatedChain> predicted(repos.size());
    parallel_for(repos.size(), c.threads, [&](std::size_t i) {
        const auto seed = chain_prefix(model_chains.at(repos[i]), c.windows.sim_start);
        predicted[i] = simulate_repo(bundle.model, bundle.ctx, seed, sc);
    });
    const auto dir = out_dir.value_or(c.run_dir(c.preset + "_simulate"));
    return write_run(c, dir, "simulate", "simulation.tsv", predicted, window_truth(injected, repos, c.windows), repos,
                     {c.model_dir() / "model.txt", c.work() / "chains.tsv", c.work() / "user_groups.txt"});
}

/// Teacher-forced next-event prediction. Truth here is the chain the model
/// conditions on, so predicted and true lengths agree.
inline RunSummary run_predict(const Config& c, const std::optional<fs::path>& out_dir = std::nullopt) {
    c.windows.validate();
    const ModelBundle bundle = load_bundle(c);
    const IngestResult ingest = load_chains(c);
    const auto users = load_users(c);
    const UserGroupModel groups = load_groups(c);
    const auto chains = labelled_chains(ingest, groups, users, bundle.ctx.flags.no_event_type);
    const SimConfig sc = sim_config(c, bundle.ctx.flags);
    std::vector<std::string> all;
    for (const auto& [repo, chain] : chains) all.push_back(repo);
    std::vector<std::optional<SimulatedChain>> results(all.size());
    parallel_for(all.size(), c.threads, [&](std::size_t i) {
        results[i] = predict_single_events(bundle.model, bundle.ctx, chains.at(all[i]), sc);
    });
    std::vector<std::string> repos;
    std::vector<SimulatedChain> predicted;
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (!results[i]) continue;
        repos.push_back(all[i]);
        predicted.push_back(std::move(*results[i]));
    }
    const auto dir = out_dir.value_or(c.run_dir(c.preset + "_predict"));
    return write_run(c, dir, "predict", "prediction.tsv", predicted, window_truth(chains, repos, c.windows), repos,
                     {c.model_dir() / "model.txt", c.work() / "chains.tsv", c.work() / "user_groups.txt"});
}

enum class BaselineKind { Random, Previous, NoEvent };

inline BaselineKind parse_baseline(const std::string& s) {
    if (s == "random") return BaselineKind::Random;
    if (s == "previous") return BaselineKind::Previous;
    if (s == "noevent") return BaselineKind::NoEvent;
    throw ValidationError("baseline must be one of random|previous|noevent, got '" + s + "'");
}

inline RunSummary run_baseline(const Config& c, BaselineKind kind, const std::optional<fs::path>& out_dir = std::nullopt) {
    c.windows.validate();
    const IngestResult ingest = load_chains(c);
    const auto users = load_users(c);
    const UserGroupModel groups = load_groups(c);
    const auto injected = labelled_chains(ingest, groups, users, true);
    const auto repos = seeded_repos(injected, c.windows.sim_start);
    const SimConfig sc = sim_config(c, c.flags);
    std::vector<SimulatedChain> predicted(repos.size());
    parallel_for(repos.size(), c.threads, [&](std::size_t i) {
        const auto history = chain_prefix(injected.at(repos[i]), c.windows.sim_start);
        switch (kind) {
            case BaselineKind::Random:
                predicted[i] = baseline_random(history, sc, groups.total_groups(), c.simulation.seed);
                break;
            case BaselineKind::Previous: predicted[i] = baseline_previous(history, sc); break;
            case BaselineKind::NoEvent: predicted[i] = baseline_noevent(repos[i], sc, groups.artificial_group()); break;
        }
    });
    static const char* names[] = {"random", "previous", "noevent"};
    const std::string name = std::string("baseline_") + names[static_cast<int>(kind)];
    const auto dir = out_dir.value_or(c.run_dir(name));
    return write_run(c, dir, name, "simulation.tsv", predicted, window_truth(injected, repos, c.windows), repos,
                     {c.work() / "chains.tsv", c.work() / "user_groups.txt"});
}

inline std::map<std::string, SimulatedChain> read_simulation_file(const fs::path& p) {
    auto in = open_data(p, "simulation");
    return read_simulation(in);
}

/// Scores a prediction file against a truth file. Without a repo list the
/// union of repos in both files is scored.
inline MetricReport run_evaluate(const Config& c, const fs::path& pred, const fs::path& truth,
                                 const std::optional<fs::path>& repos_path, const fs::path& out_dir) {
    const auto p = read_simulation_file(pred);
    const auto t = read_simulation_file(truth);
    std::vector<std::string> repos;
    if (repos_path) {
        auto in = open_data(*repos_path, "repo list");
        repos = read_repo_list(in);
    } else {
        repos = repo_union(p, t);
    }
    MetricOptions opt = c.metrics;
    opt.threads = c.threads;
    const MetricReport r = evaluate(make_pairs(repos, p, t), opt);
    write_text(out_dir / "report.tsv", [&](std::ostream& o) { write_report_tsv(o, r); });
    write_text(out_dir / "report.json", [&](std::ostream& o) { o << report_json(r).dump(2) << '\n'; });
    write_text(out_dir / "per_repo.tsv", [&](std::ostream& o) { write_per_repo_tsv(o, r); });
    std::vector<fs::path> inputs{pred, truth};
    if (repos_path) inputs.push_back(*repos_path);
    write_manifest(out_dir, "evaluate", c, inputs, {out_dir / "report.tsv", out_dir / "report.json", out_dir / "per_repo.tsv"});
    return r;
}

/// Writes the synthetic dataset to the configured data paths.
inline testkit::SyntheticDataset run_synth(const Config& c) {
    const auto data = testkit::generate(c.synth, c.windows);
    const auto events = c.resolve(c.data.events), users = c.resolve(c.data.users), repos = c.resolve(c.data.repos);
    write_text(events, [&](std::ostream& o) { write_event_log(o, data.events); });
    write_text(users, [&](std::ostream& o) { write_user_profiles(o, data.users); });
    write_text(repos, [&](std::ostream& o) { write_repo_profiles(o, data.repos); });
    write_manifest(events.parent_path(), "synth", c, {}, {events, users, repos});
    return data;
}

struct GradCheckSummary {
    GradCheckReport combined;
    std::array<GradCheckReport, kNumBranches> per_branch;
};

/// Finite-difference check on the tiny config with a random dense batch;
/// each branch alone (other weights zero) and all three combined.
inline GradCheckSummary run_gradcheck(std::uint64_t seed, int input_dim = 398, int num_groups = 101, int steps = 4,
                                      int batch = 3) {
    MtsConfig cfg = tiny_config(input_dim, num_groups);
    cfg.seed = seed;
    MtsModel model(cfg);
    const auto [x, t] = random_batch(cfg, steps, batch, derive_seed(seed, 3));
    const auto reps = grad_check(model, x, t, {{1.0, 1.0, 1.0}, {1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}});
    GradCheckSummary s;
    s.combined = reps[0];
    for (std::size_t b = 0; b < s.per_branch.size(); ++b) s.per_branch[b] = reps[b + 1];
    return s;
}

}  // namespace gitevolve::pipeline

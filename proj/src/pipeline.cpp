#include "ebr/pipeline.hpp"

#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ebr/checkpoint.hpp"
#include "ebr/corpus.hpp"
#include "ebr/retrieval.hpp"

namespace ebr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kPathKeys = {"dataset.path", "artifact_dir", "cluster.labels_path"};
const std::set<std::string> kVariants = {"mf", "global", "mixed", "within", "hadamard", "prefix"};
const std::vector<std::string> kDivided = {"within", "hadamard", "prefix"};

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::string fmt_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

std::string hash_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw InputError("cannot open " + p.string());
    Fingerprint f;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        f.add(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())));
    }
    return f.hex();
}

std::string model_file(const std::string& variant) { return "models/" + variant + ".ebrck"; }
std::string mixed_file(double rho) { return "models/mixed_rho" + fmt_real(rho) + ".ebrck"; }

TrainingMode mode_of(const std::string& v, double rho = 0) {
    TrainingMode m;
    if (v == "mixed") {
        m.kind = NegativeKind::mixed;
        m.mix_ratio = rho;
    } else if (v == "within" || v == "hadamard" || v == "prefix") {
        m.kind = NegativeKind::within_cluster;
        if (v == "hadamard") m.prompt = PromptKind::hadamard;
        if (v == "prefix") m.prompt = PromptKind::prefix;
    }
    return m;
}

std::string method_name(const std::string& v) {
    if (v == "global") return "sasrec";
    if (v == "mixed") return "sasrec+";
    if (v == "within") return "naive_mtl";
    if (v == "hadamard") return "ours";
    if (v == "prefix") return "ours_prefix";
    return v;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw InputError("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw InputError(p.string() + ": " + e.what());
    }
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p);
    if (!out) throw InputError("cannot write " + p.string());
    out << j.dump(2) << '\n';
}

class Timer {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

} // namespace

// ---- config ----

PipelineConfig::PipelineConfig() {
    values_ = {
        {"seed", "1"},
        {"artifact_dir", "artifacts"},
        {"dataset.kind", "movielens"},
        {"dataset.path", ""},
        {"dataset.min_item_freq", "1"},
        {"dataset.min_user_freq", "1"},
        {"dataset.delimiter", ","},
        {"dataset.user_column", "user_id"},
        {"dataset.item_column", "video_id"},
        {"dataset.timestamp_column", "time_ms"},
        {"dataset.label_column", "is_click"},
        {"dataset.scenario_column", "tab"},
        {"dataset.positive_filter", "is_click=1,tab=1"},
        {"synth.users", "200"},
        {"synth.items", "100"},
        {"synth.clusters", "4"},
        {"synth.min_len", "5"},
        {"synth.max_len", "30"},
        {"synth.home_weight", "0.7"},
        {"synth.stay_prob", "0.8"},
        {"synth.seed", ""},
        {"item2vec.dim", "32"},
        {"item2vec.window", "5"},
        {"item2vec.negatives", "5"},
        {"item2vec.epochs", "5"},
        {"item2vec.lr", "0.025"},
        {"item2vec.workers", "1"},
        {"item2vec.seed", ""},
        {"cluster.source", "kmeans"},
        {"cluster.labels_path", ""},
        {"kmeans.k", "10"},
        {"kmeans.max_iters", "100"},
        {"kmeans.tol", "1e-4"},
        {"kmeans.seed", ""},
        {"encoder.max_len", "200"},
        {"encoder.dim", "50"},
        {"encoder.blocks", "2"},
        {"encoder.heads", "1"},
        {"encoder.dropout", "0.2"},
        {"encoder.lr", "1e-3"},
        {"encoder.batch_size", "128"},
        {"encoder.epochs", "200"},
        {"encoder.patience", "20"},
        {"encoder.eval_every", "1"},
        {"encoder.eval_m", "20"},
        {"encoder.eval_users", "0"},
        {"encoder.seed", ""},
        {"mf.dim", "50"},
        {"mf.lr", "1e-3"},
        {"mf.init_std", "0.1"},
        {"mf.batch_size", "1024"},
        {"mf.epochs", "200"},
        {"mf.patience", "20"},
        {"mf.eval_users", "0"},
        {"mf.seed", ""},
        {"train.variants", "mf,global,mixed,within,hadamard"},
        {"train.mix_grid", "0.1,0.3,0.5,0.7,0.9"},
        {"intent.lr", "1e-2"},
        {"intent.batch_size", "256"},
        {"intent.epochs", "100"},
        {"intent.patience", "5"},
        {"intent.max_positions", "50"},
        {"intent.seed", ""},
        {"retrieve.alpha_grid", "0.5,1,2,4"},
        {"retrieve.m", "50"},
        {"retrieve.candidate_users", "0"},
        {"retrieve.schedule", "parallel"},
        {"eval.ms", "20,50"},
        {"eval.within_ms", "5,10,20"},
        {"eval.throughput_seconds", "0"},
    };
}

PipelineConfig PipelineConfig::from_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    PipelineConfig cfg;
    cfg.parse(in, path.string(), fs::absolute(path).parent_path());
    return cfg;
}

void PipelineConfig::parse(std::istream& in, const std::string& origin, const fs::path& base_dir) {
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(no) + ": expected key = value");
        std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (!values_.count(key)) throw ConfigError(origin + ":" + std::to_string(no) + ": unknown key '" + key + "'");
        if (kPathKeys.count(key) && !value.empty() && fs::path(value).is_relative())
            value = (base_dir / value).lexically_normal().string();
        values_[key] = value;
    }
}

void PipelineConfig::set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown key '" + key + "'");
    values_[key] = kPathKeys.count(key) && !value.empty() ? fs::absolute(value).lexically_normal().string() : value;
}

void PipelineConfig::apply_override(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like key=value: '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void PipelineConfig::set_seed(std::uint64_t seed) {
    for (auto& [k, v] : values_)
        if (k == "seed" || (k.size() > 5 && k.compare(k.size() - 5, 5, ".seed") == 0)) v = std::to_string(seed);
}

const std::string& PipelineConfig::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    return it->second;
}

std::size_t PipelineConfig::count(const std::string& key) const {
    const auto& v = get(key);
    std::size_t used = 0;
    try {
        if (!v.empty() && v[0] != '-') {
            auto n = std::stoull(v, &used);
            if (used == v.size()) return static_cast<std::size_t>(n);
        }
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
}

double PipelineConfig::real(const std::string& key) const {
    const auto& v = get(key);
    std::size_t used = 0;
    try {
        double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a number, got '" + v + "'");
}

std::vector<std::string> PipelineConfig::list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<std::size_t> PipelineConfig::counts(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& s : list(key)) {
        PipelineConfig tmp;
        tmp.values_["seed"] = s;
        try {
            out.push_back(tmp.count("seed"));
        } catch (const ConfigError&) {
            throw ConfigError(key + ": expected a list of non-negative integers, got '" + get(key) + "'");
        }
    }
    return out;
}

std::vector<double> PipelineConfig::reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : list(key)) {
        PipelineConfig tmp;
        tmp.values_["seed"] = s;
        try {
            out.push_back(tmp.real("seed"));
        } catch (const ConfigError&) {
            throw ConfigError(key + ": expected a list of numbers, got '" + get(key) + "'");
        }
    }
    return out;
}

std::string PipelineConfig::section(const std::string& prefix) const {
    std::string out;
    for (const auto& [k, v] : values_)
        if (k.compare(0, prefix.size(), prefix) == 0 && k.size() > 5 && k.compare(k.size() - 5, 5, ".seed") != 0)
            out += k + "=" + v + "\n";
    std::string sec = prefix.substr(0, prefix.size() - 1);
    out += "seed=" + std::to_string(seed_of(sec)) + "\n";
    return out;
}

std::uint64_t PipelineConfig::seed_of(const std::string& section) const {
    auto it = values_.find(section + ".seed");
    if (it != values_.end() && !it->second.empty()) return count(section + ".seed");
    return count("seed");
}

fs::path PipelineConfig::artifact_dir() const { return get("artifact_dir"); }

Item2VecConfig PipelineConfig::item2vec() const {
    Item2VecConfig c;
    c.dim = count("item2vec.dim");
    c.window = count("item2vec.window");
    c.negatives_per_pair = count("item2vec.negatives");
    c.epochs = count("item2vec.epochs");
    c.lr = real("item2vec.lr");
    c.workers = count("item2vec.workers");
    c.seed = seed_of("item2vec");
    return c;
}

KMeansConfig PipelineConfig::kmeans() const {
    KMeansConfig c;
    c.k = count("kmeans.k");
    c.max_iters = count("kmeans.max_iters");
    c.tol = real("kmeans.tol");
    c.seed = seed_of("kmeans");
    return c;
}

EncoderConfig PipelineConfig::encoder() const {
    EncoderConfig c;
    c.max_len = count("encoder.max_len");
    c.dim = count("encoder.dim");
    c.blocks = count("encoder.blocks");
    c.heads = count("encoder.heads");
    c.dropout = real("encoder.dropout");
    c.lr = real("encoder.lr");
    c.batch_size = count("encoder.batch_size");
    c.epochs = count("encoder.epochs");
    c.patience = count("encoder.patience");
    c.eval_every = count("encoder.eval_every");
    c.eval_m = count("encoder.eval_m");
    c.eval_users = count("encoder.eval_users");
    c.seed = seed_of("encoder");
    return c;
}

MFConfig PipelineConfig::mf() const {
    MFConfig c;
    c.dim = count("mf.dim");
    c.lr = real("mf.lr");
    c.init_std = real("mf.init_std");
    c.batch_size = count("mf.batch_size");
    c.epochs = count("mf.epochs");
    c.patience = count("mf.patience");
    c.eval_m = count("encoder.eval_m");
    c.eval_users = count("mf.eval_users");
    c.seed = seed_of("mf");
    return c;
}

IntentConfig PipelineConfig::intent() const {
    IntentConfig c;
    c.lr = real("intent.lr");
    c.batch_size = count("intent.batch_size");
    c.epochs = count("intent.epochs");
    c.patience = count("intent.patience");
    c.max_positions_per_user = count("intent.max_positions");
    c.seed = seed_of("intent");
    return c;
}

SyntheticConfig PipelineConfig::synthetic() const {
    SyntheticConfig c;
    c.users = count("synth.users");
    c.items = count("synth.items");
    c.clusters = count("synth.clusters");
    c.min_len = count("synth.min_len");
    c.max_len = count("synth.max_len");
    c.home_weight = real("synth.home_weight");
    c.stay_prob = real("synth.stay_prob");
    c.seed = seed_of("synth");
    return c;
}

std::vector<std::string> PipelineConfig::variants() const { return list("train.variants"); }

bool PipelineConfig::has_variant(const std::string& v) const {
    auto vs = variants();
    return std::find(vs.begin(), vs.end(), v) != vs.end();
}

void PipelineConfig::validate(bool check_paths) const {
    const auto& kind = get("dataset.kind");
    if (kind != "movielens" && kind != "event_log" && kind != "synthetic")
        throw ConfigError("dataset.kind must be movielens, event_log or synthetic, got '" + kind + "'");
    count("seed");
    count("dataset.min_item_freq");
    count("dataset.min_user_freq");
    if (get("dataset.delimiter").size() != 1) throw ConfigError("dataset.delimiter must be one character");
    if (kind == "synthetic") {
        auto s = synthetic();
        if (s.items < s.clusters || s.clusters == 0 || s.min_len == 0 || s.max_len < s.min_len)
            throw ConfigError("synth: need items >= clusters >= 1 and 1 <= min_len <= max_len");
    }
    item2vec().validate();
    auto km = kmeans();
    if (km.k == 0) throw ConfigError("kmeans.k must be >= 1");
    encoder().validate();
    mf().validate();
    intent().validate();
    const auto& src = get("cluster.source");
    if (src != "kmeans" && src != "labels") throw ConfigError("cluster.source must be kmeans or labels");
    if (src == "labels" && get("cluster.labels_path").empty()) throw ConfigError("cluster.labels_path is required");
    auto vs = variants();
    if (vs.empty()) throw ConfigError("train.variants is empty");
    for (const auto& v : vs)
        if (!kVariants.count(v)) throw ConfigError("train.variants: unknown variant '" + v + "'");
    for (const auto& v : kDivided)
        if (has_variant(v) && !has_variant("global"))
            throw ConfigError("train.variants: '" + v + "' needs 'global' as the intent backbone");
    for (double r : reals("train.mix_grid"))
        if (!(r >= 0 && r <= 1)) throw ConfigError("train.mix_grid values must lie in [0, 1]");
    if (has_variant("mixed") && reals("train.mix_grid").empty()) throw ConfigError("train.mix_grid is empty");
    for (double a : reals("retrieve.alpha_grid"))
        if (!(a >= 0)) throw ConfigError("retrieve.alpha_grid values must be >= 0");
    if (reals("retrieve.alpha_grid").empty()) throw ConfigError("retrieve.alpha_grid is empty");
    count("retrieve.m");
    count("retrieve.candidate_users");
    const auto& sch = get("retrieve.schedule");
    if (sch != "serial" && sch != "parallel") throw ConfigError("retrieve.schedule must be serial or parallel");
    if (counts("eval.ms").empty()) throw ConfigError("eval.ms is empty");
    if (counts("eval.within_ms").empty()) throw ConfigError("eval.within_ms is empty");
    if (real("eval.throughput_seconds") < 0) throw ConfigError("eval.throughput_seconds must be >= 0");
    if (get("artifact_dir").empty()) throw ConfigError("artifact_dir is empty");
    if (check_paths) {
        if (kind != "synthetic") {
            const auto& p = get("dataset.path");
            if (p.empty()) throw ConfigError("dataset.path is not set");
            if (!fs::is_regular_file(p)) throw ConfigError("dataset.path does not exist: " + p);
        }
        if (src == "labels" && !fs::is_regular_file(get("cluster.labels_path")))
            throw ConfigError("cluster.labels_path does not exist: " + get("cluster.labels_path"));
    }
}

// ---- pipeline ----

Pipeline::Pipeline(PipelineConfig cfg, bool strict, std::ostream& log)
    : cfg_(std::move(cfg)), strict_(strict), log_(log), dir_(cfg_.artifact_dir()) {
    cfg_.validate(false);
    fs::create_directories(dir_ / "models");
    const auto lock = dir_ / ".lock";
    if (fs::exists(lock)) {
        std::ifstream in(lock);
        long pid = 0;
        in >> pid;
        if (pid > 0 && pid != static_cast<long>(::getpid()) && ::kill(static_cast<pid_t>(pid), 0) == 0)
            throw PipelineError("artifact directory " + dir_.string() + " is locked by running process " +
                                std::to_string(pid));
        log_ << "taking over stale lock from pid " << pid << "\n";
    }
    std::ofstream(lock) << ::getpid() << "\n";
}

Pipeline::~Pipeline() {
    std::error_code ec;
    const auto lock = dir_ / ".lock";
    std::ifstream in(lock);
    long pid = 0;
    in >> pid;
    in.close();
    if (pid == static_cast<long>(::getpid())) fs::remove(lock, ec);
}

std::string Pipeline::input_fingerprint(const std::string& artifact, const std::string& stage) const {
    const auto p = dir_ / artifact;
    const auto meta = dir_ / (artifact + ".meta.json");
    if (!fs::exists(p) || !fs::exists(meta))
        throw PipelineError("missing artifact '" + artifact + "': run stage '" + stage + "' first");
    return read_json(meta).at("fingerprint").get<std::string>();
}

bool Pipeline::cached(const std::string& artifact, const std::string& fp) {
    const auto p = dir_ / artifact;
    const auto meta = dir_ / (artifact + ".meta.json");
    if (!fs::exists(p) || !fs::exists(meta)) return false;
    const auto have = read_json(meta).value("fingerprint", "");
    if (have == fp) {
        ++hits_;
        log_ << "  " << artifact << ": cache hit\n";
        return true;
    }
    if (strict_)
        throw StaleArtifactError("stale artifact '" + artifact + "': fingerprint " + have + " does not match " + fp);
    log_ << "  " << artifact << ": stale, recomputing\n";
    return false;
}

void Pipeline::record(const std::string& artifact, const std::string& stage, const std::string& fp,
                      double seconds) const {
    json meta = {{"stage", stage}, {"fingerprint", fp}, {"seconds", seconds}};
    write_json(dir_ / (artifact + ".meta.json"), meta);
    log_ << "  " << artifact << ": computed in " << fmt_real(seconds) << " s\n";
}

const Split& Pipeline::split() {
    if (!split_) {
        input_fingerprint("dataset.ebrds", "prepare");
        split_ = std::make_unique<Split>(leave_last_out_split(load_dataset(dir_ / "dataset.ebrds")));
    }
    return *split_;
}

const ClusterAssignment& Pipeline::clusters() {
    if (!ca_) {
        input_fingerprint("clusters.csv", "cluster");
        ca_ = std::make_unique<ClusterAssignment>(load_clusters(dir_ / "clusters.csv"));
    }
    return *ca_;
}

std::vector<fs::path> Pipeline::run_stage(const std::string& stage) {
    Timer t;
    log_ << "[" << stage << "]\n";
    std::vector<fs::path> out;
    if (stage == "prepare") out = prepare();
    else if (stage == "item2vec") out = item2vec();
    else if (stage == "cluster") out = cluster();
    else if (stage == "train") out = train();
    else if (stage == "intent") out = intent();
    else if (stage == "retrieve") out = retrieve();
    else if (stage == "eval") out = eval();
    else if (stage == "report") out = report();
    else throw UsageError("unknown stage '" + stage + "'");
    log_ << "[" << stage << "] done in " << fmt_real(t.seconds()) << " s\n";
    return out;
}

MetricsReport Pipeline::run_all() {
    cfg_.validate(true);
    for (const auto& s : kStages) run_stage(s);
    return MetricsReport::from_json(read_json(dir_ / "metrics.json"));
}

std::vector<fs::path> Pipeline::prepare() {
    cfg_.validate(true);
    const std::string art = "dataset.ebrds";
    const auto& kind = cfg_.get("dataset.kind");
    Fingerprint f;
    f.add("prepare").add(cfg_.section("dataset."));
    if (kind == "synthetic") f.add(cfg_.section("synth."));
    else f.add(hash_file(cfg_.get("dataset.path")));
    const auto fp = f.hex();
    if (cached(art, fp)) return {dir_ / art};
    Timer t;
    Dataset d;
    if (kind == "movielens") {
        d = parse_movielens(cfg_.get("dataset.path"));
    } else if (kind == "event_log") {
        EventLogSchema s;
        s.delimiter = cfg_.get("dataset.delimiter")[0];
        s.user_column = cfg_.get("dataset.user_column");
        s.item_column = cfg_.get("dataset.item_column");
        s.timestamp_column = cfg_.get("dataset.timestamp_column");
        s.label_column = cfg_.get("dataset.label_column");
        s.scenario_column = cfg_.get("dataset.scenario_column");
        d = parse_event_log(cfg_.get("dataset.path"), s, PositiveFilter::parse(cfg_.get("dataset.positive_filter")));
    } else {
        d = make_synthetic(cfg_.synthetic()).data;
    }
    d = filter_by_frequency(d, cfg_.count("dataset.min_item_freq"), cfg_.count("dataset.min_user_freq"));
    log_ << "  users " << d.num_users << ", items " << d.num_items << ", interactions " << d.num_interactions() << "\n";
    save_dataset(d, dir_ / art);
    split_.reset();
    ++computed_;
    record(art, "prepare", fp, t.seconds());
    return {dir_ / art};
}

std::vector<fs::path> Pipeline::item2vec() {
    const std::string art = "item2vec.ebrv";
    const auto fp = Fingerprint().add("item2vec").add(cfg_.section("item2vec.")).add(input_fingerprint("dataset.ebrds", "prepare")).hex();
    if (cached(art, fp)) return {dir_ / art};
    Timer t;
    Item2VecStats stats;
    auto emb = train_item2vec(split().train, cfg_.item2vec(), &stats);
    save_embeddings(emb, dir_ / art);
    ++computed_;
    record(art, "item2vec", fp, t.seconds());
    return {dir_ / art};
}

std::vector<fs::path> Pipeline::cluster() {
    const std::string art = "clusters.csv";
    Fingerprint f;
    f.add("cluster").add(cfg_.get("cluster.source"));
    const bool labels = cfg_.get("cluster.source") == "labels";
    if (labels) f.add(hash_file(cfg_.get("cluster.labels_path"))).add(input_fingerprint("dataset.ebrds", "prepare"));
    else f.add(cfg_.section("kmeans.")).add(input_fingerprint("item2vec.ebrv", "item2vec"));
    const auto fp = f.hex();
    if (cached(art, fp)) return {dir_ / art};
    Timer t;
    ClusterAssignment ca;
    if (labels) {
        const auto& data = split().train;
        std::vector<std::optional<std::string>> lab(data.num_items);
        std::ifstream in(cfg_.get("cluster.labels_path"));
        std::string line;
        std::getline(in, line); // header
        std::size_t no = 1;
        while (std::getline(in, line)) {
            ++no;
            line = trim(line);
            if (line.empty()) continue;
            auto comma = line.find(',');
            if (comma == std::string::npos) throw ParseError(no, "expected item_id,label");
            std::int64_t ext = 0;
            try {
                ext = std::stoll(line.substr(0, comma));
            } catch (const std::exception&) {
                throw ParseError(no, "non-integer item id");
            }
            if (auto i = data.items.find(ext)) lab[*i] = trim(line.substr(comma + 1));
        }
        ca = assign_from_labels(lab);
    } else {
        auto res = kmeans_detailed(load_embeddings(dir_ / "item2vec.ebrv"), cfg_.kmeans());
        log_ << "  k-means: " << res.iterations << " iterations, converged " << (res.converged ? "yes" : "no") << "\n";
        ca = std::move(res.assignment);
    }
    save_clusters(ca, dir_ / art);
    ca_.reset();
    ++computed_;
    record(art, "cluster", fp, t.seconds());
    return {dir_ / art};
}

std::vector<fs::path> Pipeline::train() {
    std::vector<fs::path> out;
    const auto data_fp = input_fingerprint("dataset.ebrds", "prepare");
    auto train_one = [&](const std::string& art, const std::string& variant, const TrainingMode& mode) {
        Fingerprint f;
        f.add("train").add(variant).add(data_fp);
        if (variant == "mf") {
            f.add(cfg_.section("mf.")).add(cfg_.get("encoder.eval_m"));
        } else {
            f.add(cfg_.section("encoder.")).add(to_string(mode.kind)).add(fmt_real(mode.mix_ratio)).add(to_string(mode.prompt));
            if (mode.needs_clusters()) f.add(input_fingerprint("clusters.csv", "cluster"));
        }
        const auto fp = f.hex();
        out.push_back(dir_ / art);
        if (cached(art, fp)) return;
        Timer t;
        if (variant == "mf") {
            auto p = train_mf(split(), cfg_.mf());
            save_mf(p, dir_ / art);
            log_ << "  mf: best epoch " << p.report.best_epoch << ", validation recall " << p.report.best_metric << "\n";
        } else {
            const ClusterAssignment* ca = mode.needs_clusters() ? &clusters() : nullptr;
            auto m = ebr::train(split(), ca, cfg_.encoder(), mode);
            save_model(m, dir_ / art);
            log_ << "  " << art << ": best epoch " << m.report.best_epoch << ", validation recall "
                 << m.report.best_metric << "\n";
        }
        ++computed_;
        record(art, "train", fp, t.seconds());
    };
    for (const auto& v : cfg_.variants()) {
        if (v == "mixed") {
            Fingerprint sel;
            sel.add("mixed");
            for (double r : cfg_.reals("train.mix_grid")) {
                train_one(mixed_file(r), v, mode_of(v, r));
                sel.add(input_fingerprint(mixed_file(r), "train"));
            }
            const std::string art = "models/mixed.json";
            const auto fp = sel.hex();
            out.push_back(dir_ / art);
            if (cached(art, fp)) continue;
            Timer t;
            json grid = json::array();
            double best_r = 0, best = -1;
            for (double r : cfg_.reals("train.mix_grid")) {
                auto ck = load_checkpoint(dir_ / mixed_file(r));
                double metric = ck.meta.at("report").at("best_metric");
                grid.push_back({{"rho", r}, {"validation_recall", metric}});
                if (metric > best) best = metric, best_r = r;
            }
            write_json(dir_ / art, {{"rho", best_r}, {"model", mixed_file(best_r)}, {"grid", grid}});
            log_ << "  selected rho " << best_r << "\n";
            ++computed_;
            record(art, "train", fp, t.seconds());
        } else {
            train_one(model_file(v), v, mode_of(v));
        }
    }
    return out;
}

std::vector<fs::path> Pipeline::intent() {
    bool needed = false;
    for (const auto& v : kDivided) needed |= cfg_.has_variant(v);
    if (!needed) {
        log_ << "  no divided variant configured, nothing to do\n";
        return {};
    }
    const std::string art = "intent.ebrck";
    const auto fp = Fingerprint()
                        .add("intent")
                        .add(cfg_.section("intent."))
                        .add(input_fingerprint(model_file("global"), "train"))
                        .add(input_fingerprint("clusters.csv", "cluster"))
                        .add(input_fingerprint("dataset.ebrds", "prepare"))
                        .hex();
    if (cached(art, fp)) return {dir_ / art};
    Timer t;
    auto backbone = std::make_shared<const TrainedModel>(load_model(dir_ / model_file("global")));
    auto head = train_intent(split(), clusters(), backbone, cfg_.intent());
    head.backbone_name = model_file("global");
    save_intent(head, dir_ / art);
    log_ << "  intent: " << head.report.examples << " examples, best epoch " << head.report.best_epoch << "\n";
    ++computed_;
    record(art, "intent", fp, t.seconds());
    return {dir_ / art};
}

std::vector<fs::path> Pipeline::retrieve() {
    std::vector<fs::path> out;
    std::vector<std::string> divided;
    for (const auto& v : kDivided)
        if (cfg_.has_variant(v)) divided.push_back(v);
    if (divided.empty()) {
        log_ << "  no divided variant configured, nothing to do\n";
        return out;
    }
    const auto sched = cfg_.get("retrieve.schedule") == "parallel" ? Schedule::parallel : Schedule::serial;
    const auto intent_fp = input_fingerprint("intent.ebrck", "intent");
    const auto ca_fp = input_fingerprint("clusters.csv", "cluster");
    const auto data_fp = input_fingerprint("dataset.ebrds", "prepare");
    std::unique_ptr<IntentHead> head;
    auto load_head = [&]() -> const IntentHead& {
        if (!head) head = std::make_unique<IntentHead>(load_intent(dir_ / "intent.ebrck"));
        if (!head->backbone) throw PipelineError("intent head backbone is missing: run stage 'train' first");
        return *head;
    };
    const auto ms = cfg_.counts("eval.ms");
    for (const auto& v : divided) {
        const std::string art = "retrieve_" + v + ".json";
        const auto model_fp = input_fingerprint(model_file(v), "train");
        const auto fp = Fingerprint()
                            .add("retrieve")
                            .add(v)
                            .add(cfg_.get("retrieve.alpha_grid"))
                            .add(cfg_.get("eval.ms"))
                            .add(model_fp)
                            .add(intent_fp)
                            .add(ca_fp)
                            .add(data_fp)
                            .hex();
        out.push_back(dir_ / art);
        if (cached(art, fp)) continue;
        Timer t;
        auto model = load_model(dir_ / model_file(v));
        SeqRecUserModel um(model);
        auto idx = build_index(EmbeddingMatrix{um.items()}, clusters());
        DividedStack stack{&idx, &load_head(), 1.0, sched};
        auto alphas = cfg_.reals("retrieve.alpha_grid");
        std::size_t first = ms.front();
        auto rows = evaluate_overall_alphas(um, stack, split(), {&first, 1}, alphas, Phase::validation);
        json grid = json::array();
        double best_a = alphas.front(), best = -1;
        for (std::size_t i = 0; i < alphas.size(); ++i) {
            double r = rows[i].recall.at(first);
            grid.push_back({{"alpha", alphas[i]}, {"validation_recall", r}});
            if (r > best) best = r, best_a = alphas[i];
        }
        write_json(dir_ / art, {{"variant", v}, {"alpha", best_a}, {"m", first}, {"grid", grid}});
        log_ << "  " << v << ": alpha " << best_a << " (validation R@" << first << " " << best << ")\n";
        ++computed_;
        record(art, "retrieve", fp, t.seconds());
    }

    // Candidate lists for the headline divided variant.
    const std::string v = cfg_.has_variant("hadamard") ? "hadamard" : divided.front();
    const std::string art = "candidates.jsonl";
    const auto fp = Fingerprint()
                        .add("candidates")
                        .add(v)
                        .add(cfg_.get("retrieve.m"))
                        .add(cfg_.get("retrieve.candidate_users"))
                        .add(input_fingerprint("retrieve_" + v + ".json", "retrieve"))
                        .add(input_fingerprint(model_file(v), "train"))
                        .add(intent_fp)
                        .hex();
    out.push_back(dir_ / art);
    if (cached(art, fp)) return out;
    Timer t;
    auto model = load_model(dir_ / model_file(v));
    SeqRecUserModel um(model);
    auto idx = build_index(EmbeddingMatrix{um.items()}, clusters());
    const double alpha = read_json(dir_ / ("retrieve_" + v + ".json")).at("alpha");
    const auto& sp = split();
    const auto& h = load_head();
    const std::size_t m = cfg_.count("retrieve.m");
    std::size_t limit = cfg_.count("retrieve.candidate_users");
    if (limit == 0 || limit > sp.eligible_users.size()) limit = sp.eligible_users.size();
    std::ofstream outf(dir_ / art);
    const auto k = idx.k();
    for (std::size_t n = 0; n < limit; ++n) {
        UserIndex u = sp.eligible_users[n];
        std::vector<ItemIndex> hist = sp.train.sequences[u];
        hist.push_back(sp.valid_target[u]);
        auto p = predict_intent(h, hist);
        MatrixF users;
        if (um.has_prompts()) {
            users.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(um.dim()));
            for (std::size_t c = 0; c < k; ++c)
                users.row(static_cast<Eigen::Index>(c)) = um.encode(u, hist, static_cast<ClusterId>(c)).transpose();
        } else {
            users = um.encode(u, hist).transpose();
        }
        auto r = retrieve_merged(idx, users, p, alpha, m, ItemSet(hist), sched);
        write_candidates_jsonl(outf, sp.train.users.external(u), r, &sp.train.items);
    }
    outf.close();
    ++computed_;
    record(art, "retrieve", fp, t.seconds());
    return out;
}

std::vector<fs::path> Pipeline::eval() {
    const std::string art = "metrics.json";
    Fingerprint f;
    f.add("eval").add(cfg_.section("eval.")).add(input_fingerprint("dataset.ebrds", "prepare"));
    f.add(input_fingerprint("clusters.csv", "cluster"));
    bool divided = false;
    for (const auto& v : cfg_.variants()) {
        if (v == "mixed") {
            f.add(input_fingerprint("models/mixed.json", "train"));
            for (double r : cfg_.reals("train.mix_grid")) f.add(input_fingerprint(mixed_file(r), "train"));
        } else {
            f.add(input_fingerprint(model_file(v), "train"));
        }
        if (std::find(kDivided.begin(), kDivided.end(), v) != kDivided.end()) {
            f.add(input_fingerprint("retrieve_" + v + ".json", "retrieve"));
            divided = true;
        }
    }
    if (divided) f.add(input_fingerprint("intent.ebrck", "intent"));
    if (cfg_.real("eval.throughput_seconds") > 0) f.add(cfg_.section("encoder."));
    const auto fp = f.hex();
    if (cached(art, fp)) return {dir_ / art};
    Timer t;
    const auto& sp = split();
    const auto& ca = clusters();
    const auto ms = cfg_.counts("eval.ms");
    const auto wms = cfg_.counts("eval.within_ms");
    std::unique_ptr<IntentHead> head;
    if (divided) head = std::make_unique<IntentHead>(load_intent(dir_ / "intent.ebrck"));
    MetricsReport rep;
    rep.config_fingerprint = fp;
    rep.seed = cfg_.count("seed");
    auto add_seqrec = [&](const std::string& name, const TrainedModel& m, const std::string& variant,
                          std::optional<double> rho) {
        SeqRecUserModel um(m);
        auto idx = build_index(EmbeddingMatrix{um.items()}, ca);
        MethodMetrics overall;
        if (std::find(kDivided.begin(), kDivided.end(), variant) != kDivided.end()) {
            const double alpha = read_json(dir_ / ("retrieve_" + variant + ".json")).at("alpha");
            DividedStack stack{&idx, head.get(), alpha, Schedule::serial};
            overall = evaluate_overall(um, &stack, sp, ms);
        } else {
            overall = evaluate_overall(um, nullptr, sp, ms);
        }
        overall.method = name;
        overall.mix_ratio = rho;
        auto within = evaluate_within_cluster(um, idx, ca, sp, wms);
        within.method = name;
        within.mix_ratio = rho;
        log_ << "  " << name << ": overall R@" << ms.front() << " " << overall.recall.at(ms.front()) << ", within R@"
             << wms.front() << " " << within.recall.at(wms.front()) << "\n";
        rep.rows.push_back(std::move(overall));
        rep.rows.push_back(std::move(within));
    };
    for (const auto& v : cfg_.variants()) {
        if (v == "mf") {
            auto p = load_mf(dir_ / model_file("mf"));
            MFUserModel um(p);
            auto idx = build_index(EmbeddingMatrix{p.item_table}, ca);
            auto overall = evaluate_overall(um, nullptr, sp, ms);
            overall.method = "mf";
            auto within = evaluate_within_cluster(um, idx, ca, sp, wms);
            within.method = "mf";
            log_ << "  mf: overall R@" << ms.front() << " " << overall.recall.at(ms.front()) << "\n";
            rep.rows.push_back(std::move(overall));
            rep.rows.push_back(std::move(within));
        } else if (v == "mixed") {
            const auto sel = read_json(dir_ / "models/mixed.json");
            const double best = sel.at("rho");
            add_seqrec("sasrec+", load_model(dir_ / mixed_file(best)), v, best);
            const auto grid = cfg_.reals("train.mix_grid");
            if (grid.size() > 1)
                for (double r : grid) add_seqrec("sasrec+@rho=" + fmt_real(r), load_model(dir_ / mixed_file(r)), v, r);
        } else {
            add_seqrec(method_name(v), load_model(dir_ / model_file(v)), v, std::nullopt);
        }
    }
    if (const double secs = cfg_.real("eval.throughput_seconds"); secs > 0) {
        for (const std::string v : {"global", "hadamard"}) {
            if (!cfg_.has_variant(v)) continue;
            const auto mode = mode_of(v);
            Trainer tr(sp, mode.needs_clusters() ? &ca : nullptr, cfg_.encoder(), mode);
            auto res = measure_throughput([&] { return tr.step(); }, secs, 3);
            for (auto& r : rep.rows)
                if (r.method == method_name(v) && r.protocol == "overall") r.throughput = res.median;
            log_ << "  throughput " << v << ": " << res.median << " samples/s\n";
        }
    }
    write_json(dir_ / art, rep.to_json());
    ++computed_;
    record(art, "eval", fp, t.seconds());
    return {dir_ / art};
}

std::vector<fs::path> Pipeline::report() {
    const std::string art = "report.txt";
    const auto fp = Fingerprint().add("report").add(input_fingerprint("metrics.json", "eval")).hex();
    auto rep = MetricsReport::from_json(read_json(dir_ / "metrics.json"));
    const auto table = rep.render_table();
    if (!cached(art, fp)) {
        Timer t;
        std::ofstream(dir_ / art) << table;
        ++computed_;
        record(art, "report", fp, t.seconds());
    }
    log_ << table;
    return {dir_ / art};
}

void write_synthetic_ratings(const SyntheticConfig& cfg, const fs::path& out) {
    auto corpus = make_synthetic(cfg);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_movielens(corpus.data, out);
}

} // namespace ebr

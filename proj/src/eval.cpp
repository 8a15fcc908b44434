#include "ebr/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <set>
#include <sstream>

namespace ebr {

namespace {

struct UserCase {
    std::vector<ItemIndex> history;
    ItemSet exclude;
    ItemIndex target;
};

UserCase make_case(const Split& split, UserIndex u, Phase phase) {
    UserCase c;
    c.history = split.train.sequences[u];
    if (phase == Phase::test) {
        c.history.push_back(split.valid_target[u]);
        c.target = split.test_target[u];
    } else {
        c.target = split.valid_target[u];
    }
    c.exclude = ItemSet(c.history);
    return c;
}

// Number of eligible items ranked ahead of the target, stopping at `cap`.
// Returns cap when the target itself is excluded.
std::size_t rank_of(const MatrixF& items, std::span<const float> user, ItemIndex target,
                    std::span<const ItemIndex> pool, const ItemSet& exclude, std::size_t cap) {
    if (exclude.contains(target)) return cap;
    const auto d = static_cast<std::size_t>(items.cols());
    const ScoredItem t{target, score(user, {items.row(target).data(), d})};
    std::size_t ahead = 0;
    auto visit = [&](ItemIndex i) {
        if (i == target || exclude.contains(i)) return;
        if (ranks_before({i, score(user, {items.row(i).data(), d})}, t)) ++ahead;
    };
    if (pool.empty()) {
        for (Eigen::Index i = 0; i < items.rows() && ahead < cap; ++i) visit(static_cast<ItemIndex>(i));
    } else {
        for (std::size_t k = 0; k < pool.size() && ahead < cap; ++k) visit(pool[k]);
    }
    return std::min(ahead, cap);
}

std::size_t max_m(std::span<const std::size_t> ms) {
    if (ms.empty()) throw UsageError("evaluation needs at least one M");
    return *std::max_element(ms.begin(), ms.end());
}

void finish(MethodMetrics& out, std::span<const std::size_t> ms, const std::vector<std::size_t>& hits) {
    for (std::size_t j = 0; j < ms.size(); ++j)
        out.recall[ms[j]] = out.users ? static_cast<double>(hits[j]) / static_cast<double>(out.users) : 0.0;
}

nlohmann::json recall_json(const std::map<std::size_t, double>& r) {
    nlohmann::json j = nlohmann::json::object();
    for (auto [m, v] : r) j[std::to_string(m)] = v;
    return j;
}

std::map<std::size_t, double> recall_from_json(const nlohmann::json& j) {
    std::map<std::size_t, double> r;
    for (auto it = j.begin(); it != j.end(); ++it) r[std::stoul(it.key())] = it.value().get<double>();
    return r;
}

} // namespace

double recall_at_m(std::span<const ItemIndex> candidates, ItemIndex target) {
    return std::find(candidates.begin(), candidates.end(), target) != candidates.end() ? 1.0 : 0.0;
}

MethodMetrics evaluate_overall(const UserModel& model, const DividedStack* stack, const Split& split,
                               std::span<const std::size_t> ms, Phase phase) {
    if (stack) {
        double a = stack->alpha;
        return evaluate_overall_alphas(model, *stack, split, ms, {&a, 1}, phase).front();
    }
    const std::size_t cap = max_m(ms);
    MethodMetrics out;
    out.protocol = "overall";
    std::vector<std::size_t> hits(ms.size());
    const auto d = model.dim();
    for (UserIndex u : split.eligible_users) {
        UserCase c = make_case(split, u, phase);
        VectorF e = model.encode(u, c.history);
        std::size_t r = rank_of(model.items(), {e.data(), d}, c.target, {}, c.exclude, cap);
        for (std::size_t j = 0; j < ms.size(); ++j) hits[j] += r < ms[j];
        ++out.users;
    }
    finish(out, ms, hits);
    return out;
}

std::vector<MethodMetrics> evaluate_overall_alphas(const UserModel& model, const DividedStack& stack, const Split& split,
                                                   std::span<const std::size_t> ms, std::span<const double> alphas,
                                                   Phase phase) {
    if (!stack.index || !stack.intent) throw PipelineError("divided evaluation needs an index and an intent head");
    const auto& idx = *stack.index;
    if (stack.intent->k() != idx.k()) throw InputError("intent head and index disagree on the number of clusters");
    max_m(ms);
    const std::size_t k = idx.k();
    const auto d = static_cast<Eigen::Index>(model.dim());
    std::vector<MethodMetrics> out(alphas.size());
    std::vector<std::vector<std::size_t>> hits(alphas.size(), std::vector<std::size_t>(ms.size()));
    MatrixF users;
    for (UserIndex u : split.eligible_users) {
        UserCase c = make_case(split, u, phase);
        auto p = predict_intent(*stack.intent, c.history);
        if (model.has_prompts()) {
            users.resize(static_cast<Eigen::Index>(k), d);
            for (std::size_t t = 0; t < k; ++t)
                users.row(static_cast<Eigen::Index>(t)) = model.encode(u, c.history, static_cast<ClusterId>(t)).transpose();
        } else {
            users = model.encode(u, c.history).transpose();
        }
        for (std::size_t a = 0; a < alphas.size(); ++a) {
            for (std::size_t j = 0; j < ms.size(); ++j) {
                auto r = retrieve_merged(idx, users, p, alphas[a], ms[j], c.exclude, stack.schedule);
                hits[a][j] += std::any_of(r.merged.begin(), r.merged.end(),
                                          [&](const ScoredItem& s) { return s.item == c.target; });
            }
        }
    }
    for (std::size_t a = 0; a < alphas.size(); ++a) {
        out[a].protocol = "overall";
        out[a].alpha = alphas[a];
        out[a].users = split.eligible_users.size();
        finish(out[a], ms, hits[a]);
    }
    return out;
}

MethodMetrics evaluate_within_cluster(const UserModel& model, const PartitionedIndex& idx, const ClusterAssignment& ca,
                                      const Split& split, std::span<const std::size_t> ms, Phase phase) {
    const std::size_t cap = max_m(ms);
    if (idx.num_items() != static_cast<std::size_t>(model.items().rows()))
        throw InputError("index and model disagree on the number of items");
    MethodMetrics out;
    out.protocol = "within_cluster";
    const std::size_t k = ca.k();
    std::vector<std::size_t> hits(ms.size());
    std::vector<std::vector<std::size_t>> cluster_hits(k, std::vector<std::size_t>(ms.size()));
    out.per_cluster_users.assign(k, 0);
    const auto d = model.dim();
    for (UserIndex u : split.eligible_users) {
        UserCase c = make_case(split, u, phase);
        const ClusterId g = cluster_of(ca, c.target);
        VectorF e = model.encode(u, c.history, g);
        std::size_t r = rank_of(model.items(), {e.data(), d}, c.target, idx.ids(g), c.exclude, cap);
        for (std::size_t j = 0; j < ms.size(); ++j) {
            hits[j] += r < ms[j];
            cluster_hits[g][j] += r < ms[j];
        }
        ++out.per_cluster_users[g];
        ++out.users;
    }
    finish(out, ms, hits);
    out.per_cluster.resize(k);
    for (std::size_t g = 0; g < k; ++g)
        for (std::size_t j = 0; j < ms.size(); ++j)
            out.per_cluster[g][ms[j]] = out.per_cluster_users[g]
                                            ? static_cast<double>(cluster_hits[g][j]) / static_cast<double>(out.per_cluster_users[g])
                                            : 0.0;
    return out;
}

ThroughputResult measure_throughput(const std::function<std::size_t()>& step, double seconds, std::size_t windows,
                                    std::size_t warmup) {
    using clock = std::chrono::steady_clock;
    if (windows < 1) throw UsageError("measure_throughput: at least one window");
    for (std::size_t i = 0; i < warmup; ++i) step();
    ThroughputResult r;
    for (std::size_t w = 0; w < windows; ++w) {
        std::size_t samples = 0;
        const auto start = clock::now();
        double elapsed = 0;
        do {
            samples += step();
            elapsed = std::chrono::duration<double>(clock::now() - start).count();
        } while (elapsed < seconds);
        r.window_rates.push_back(static_cast<double>(samples) / elapsed);
    }
    auto sorted = r.window_rates;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    r.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    return r;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json rows_j = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json j = {{"method", r.method}, {"protocol", r.protocol}, {"recall", recall_json(r.recall)},
                            {"users", r.users}};
        if (!r.per_cluster.empty()) {
            nlohmann::json pc = nlohmann::json::array();
            for (std::size_t g = 0; g < r.per_cluster.size(); ++g)
                pc.push_back({{"cluster", g}, {"users", r.per_cluster_users[g]}, {"recall", recall_json(r.per_cluster[g])}});
            j["per_cluster"] = pc;
        }
        if (r.alpha) j["alpha"] = *r.alpha;
        if (r.mix_ratio) j["mix_ratio"] = *r.mix_ratio;
        if (r.throughput) j["throughput"] = *r.throughput;
        rows_j.push_back(j);
    }
    return {{"config_fingerprint", config_fingerprint}, {"seed", seed}, {"phase", phase}, {"rows", rows_j}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    MetricsReport rep;
    rep.config_fingerprint = j.value("config_fingerprint", "");
    rep.seed = j.value("seed", std::uint64_t{0});
    rep.phase = j.value("phase", "test");
    for (const auto& rj : j.at("rows")) {
        MethodMetrics r;
        r.method = rj.at("method");
        r.protocol = rj.at("protocol");
        r.recall = recall_from_json(rj.at("recall"));
        r.users = rj.at("users");
        if (rj.contains("per_cluster")) {
            for (const auto& pc : rj.at("per_cluster")) {
                r.per_cluster.push_back(recall_from_json(pc.at("recall")));
                r.per_cluster_users.push_back(pc.at("users"));
            }
        }
        if (rj.contains("alpha")) r.alpha = rj.at("alpha").get<double>();
        if (rj.contains("mix_ratio")) r.mix_ratio = rj.at("mix_ratio").get<double>();
        if (rj.contains("throughput")) r.throughput = rj.at("throughput").get<double>();
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

const MethodMetrics* MetricsReport::find(const std::string& method, const std::string& protocol) const {
    for (const auto& r : rows)
        if (r.method == method && r.protocol == protocol) return &r;
    return nullptr;
}

std::string MetricsReport::render_table() const {
    std::size_t w = 6;
    for (const auto& r : rows) w = std::max(w, r.method.size());
    std::ostringstream out;
    char buf[64];
    auto pad = [&](const std::string& s, std::size_t n) { out << s << std::string(n > s.size() ? n - s.size() : 0, ' '); };
    for (const char* protocol : {"overall", "within_cluster"}) {
        std::set<std::size_t> ms;
        for (const auto& r : rows)
            if (r.protocol == protocol)
                for (auto [m, v] : r.recall) ms.insert(m);
        if (ms.empty()) continue;
        out << "[" << protocol << "]\n";
        pad("method", w + 2);
        for (auto m : ms) {
            std::snprintf(buf, sizeof buf, "R@%zu", m);
            pad(buf, 9);
        }
        out << "extra\n";
        for (const auto& r : rows) {
            if (r.protocol != protocol) continue;
            pad(r.method, w + 2);
            for (auto m : ms) {
                auto it = r.recall.find(m);
                if (it == r.recall.end()) pad("-", 9);
                else {
                    std::snprintf(buf, sizeof buf, "%.4f", it->second);
                    pad(buf, 9);
                }
            }
            if (r.alpha) {
                std::snprintf(buf, sizeof buf, "alpha=%g ", *r.alpha);
                out << buf;
            }
            if (r.mix_ratio) {
                std::snprintf(buf, sizeof buf, "rho=%g ", *r.mix_ratio);
                out << buf;
            }
            if (r.throughput) {
                std::snprintf(buf, sizeof buf, "%.0f samples/s", *r.throughput);
                out << buf;
            }
            out << "\n";
        }
        out << "\n";
    }
    out << "users evaluated: " << (rows.empty() ? 0 : rows.front().users) << ", phase: " << phase
        << ", config: " << config_fingerprint << "\n";
    return out.str();
}

} // namespace ebr

#include "ebr/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace ebr {

namespace {
constexpr double kSnap = 1e-9;
}

PartitionedIndex PartitionedIndex::build(const EmbeddingMatrix& emb, const ClusterAssignment& ca) {
    if (emb.rows() != ca.num_items())
        throw InputError("build_index: " + std::to_string(emb.rows()) + " embedding rows but " +
                         std::to_string(ca.num_items()) + " assigned items");
    PartitionedIndex idx;
    idx.dim_ = emb.dim();
    idx.cluster_of_ = ca.assign();
    for (ClusterId c = 0; c < ca.k(); ++c) {
        const auto& members = ca.members(c);
        MatrixF block(static_cast<Eigen::Index>(members.size()), emb.values.cols());
        for (std::size_t r = 0; r < members.size(); ++r) block.row(static_cast<Eigen::Index>(r)) = emb.values.row(members[r]);
        idx.blocks_.push_back(std::move(block));
        idx.ids_.push_back(members);
    }
    return idx;
}

PartitionedIndex build_index(const EmbeddingMatrix& emb, const ClusterAssignment& ca) {
    return PartitionedIndex::build(emb, ca);
}

ClusterId PartitionedIndex::cluster(ItemIndex i) const {
    if (i >= cluster_of_.size()) throw IndexError("index: item " + std::to_string(i) + " out of range");
    return cluster_of_[i];
}

std::vector<std::size_t> PartitionedIndex::capacities(const ItemSet& exclude) const {
    std::vector<std::size_t> cap(k());
    for (std::size_t c = 0; c < k(); ++c) cap[c] = ids_[c].size();
    for (ItemIndex i : exclude.items())
        if (i < cluster_of_.size()) --cap[cluster_of_[i]];
    return cap;
}

bool PartitionedIndex::operator==(const PartitionedIndex& other) const {
    if (dim_ != other.dim_ || ids_ != other.ids_ || cluster_of_ != other.cluster_of_) return false;
    for (std::size_t c = 0; c < blocks_.size(); ++c)
        if (blocks_[c].rows() != other.blocks_[c].rows() || blocks_[c].cols() != other.blocks_[c].cols() ||
            blocks_[c] != other.blocks_[c])
            return false;
    return true;
}

std::vector<ScoredItem> topk_in_cluster(const PartitionedIndex& idx, ClusterId c, std::span<const float> user,
                                        std::size_t k, const ItemSet& exclude) {
    if (c >= idx.k()) throw IndexError("topk_in_cluster: cluster " + std::to_string(c) + " out of range (K=" +
                                       std::to_string(idx.k()) + ")");
    if (user.size() != idx.dim()) throw UsageError("topk_in_cluster: user vector dimension mismatch");
    const auto& block = idx.block(c);
    const auto& ids = idx.ids(c);
    std::vector<ScoredItem> pool;
    pool.reserve(ids.size());
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (exclude.contains(ids[r])) continue;
        pool.push_back({ids[r], score(user, std::span<const float>(block.row(static_cast<Eigen::Index>(r)).data(), idx.dim()))});
    }
    k = std::min(k, pool.size());
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k), pool.end(), ranks_before);
    pool.resize(k);
    return pool;
}

QuotaPlan compute_quotas(std::span<const double> p, double alpha, std::size_t m, std::span<const std::size_t> capacities) {
    const std::size_t k = p.size();
    if (capacities.size() != k) throw UsageError("compute_quotas: capacities and probabilities differ in length");
    QuotaPlan plan;
    plan.alpha = alpha;
    plan.capacities.assign(capacities.begin(), capacities.end());
    plan.quotas.assign(k, 0);
    const std::size_t cap_sum = std::accumulate(capacities.begin(), capacities.end(), std::size_t{0});
    plan.total = std::min(m, cap_sum);

    std::vector<bool> active(k);
    for (std::size_t c = 0; c < k; ++c) active[c] = capacities[c] > 0;
    std::size_t fixed = 0;
    std::vector<double> lw(k), raw(k);
    while (true) {
        const std::size_t budget = plan.total - fixed;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
            if (!active[c]) continue;
            const double pc = std::isfinite(p[c]) ? std::max(p[c], 0.0) : 0.0;
            lw[c] = alpha == 0 ? 0.0 : pc == 0 ? -std::numeric_limits<double>::infinity() : alpha * std::log(pc);
            mx = std::max(mx, lw[c]);
        }
        double wsum = 0;
        for (std::size_t c = 0; c < k; ++c) {
            if (!active[c]) continue;
            lw[c] = std::isinf(mx) ? 1.0 : std::exp(lw[c] - mx);
            wsum += lw[c];
        }
        if (wsum == 0) break; // no active cluster left, budget is 0
        std::size_t assigned = 0;
        std::vector<double> rem(k, -1.0);
        for (std::size_t c = 0; c < k; ++c) {
            if (!active[c]) continue;
            raw[c] = static_cast<double>(budget) * lw[c] / wsum;
            double fl = std::floor(raw[c]);
            if (raw[c] - fl > 1 - kSnap) fl += 1;
            plan.quotas[c] = static_cast<std::size_t>(fl);
            rem[c] = std::max(0.0, raw[c] - fl);
            assigned += plan.quotas[c];
        }
        // Snapping may overshoot by a unit in pathological cases; take it back
        // from the smallest remainders.
        while (assigned > budget) {
            std::size_t pick = k;
            for (std::size_t c = 0; c < k; ++c)
                if (active[c] && plan.quotas[c] > 0 && (pick == k || rem[c] < rem[pick] - kSnap)) pick = c;
            --plan.quotas[pick];
            rem[pick] = 2.0;
            --assigned;
        }
        for (std::size_t left = budget - assigned; left > 0; --left) {
            std::size_t pick = k;
            for (std::size_t c = 0; c < k; ++c)
                if (active[c] && rem[c] >= 0 && rem[c] <= 1 && (pick == k || rem[c] > rem[pick] + kSnap)) pick = c;
            ++plan.quotas[pick];
            rem[pick] = -1.0;
        }
        bool clipped = false;
        for (std::size_t c = 0; c < k; ++c) {
            if (active[c] && plan.quotas[c] > capacities[c]) {
                plan.quotas[c] = capacities[c];
                active[c] = false;
                fixed += capacities[c];
                clipped = true;
            }
        }
        if (!clipped) break;
    }
    return plan;
}

RetrievalResult retrieve_merged(const PartitionedIndex& idx, const MatrixF& users, std::span<const double> p,
                                double alpha, std::size_t m, const ItemSet& exclude, Schedule schedule) {
    const std::size_t k = idx.k();
    if (p.size() != k) throw UsageError("retrieve_merged: intent vector has " + std::to_string(p.size()) +
                                        " entries for " + std::to_string(k) + " clusters");
    if (users.rows() != 1 && static_cast<std::size_t>(users.rows()) != k)
        throw UsageError("retrieve_merged: user matrix must have 1 or K rows");
    if (static_cast<std::size_t>(users.cols()) != idx.dim()) throw UsageError("retrieve_merged: user vector dimension mismatch");
    RetrievalResult r;
    const auto caps = idx.capacities(exclude);
    r.plan = compute_quotas(p, alpha, m, caps);
    r.per_cluster.resize(k);
    auto run = [&](std::size_t c) {
        const Eigen::Index row = users.rows() == 1 ? 0 : static_cast<Eigen::Index>(c);
        return topk_in_cluster(idx, static_cast<ClusterId>(c), {users.row(row).data(), idx.dim()}, r.plan.quotas[c], exclude);
    };
    if (schedule == Schedule::parallel) {
        std::vector<std::future<std::vector<ScoredItem>>> jobs(k);
        for (std::size_t c = 0; c < k; ++c)
            if (r.plan.quotas[c] > 0) jobs[c] = std::async(std::launch::async, run, c);
        for (std::size_t c = 0; c < k; ++c)
            if (jobs[c].valid()) r.per_cluster[c] = jobs[c].get();
    } else {
        for (std::size_t c = 0; c < k; ++c)
            if (r.plan.quotas[c] > 0) r.per_cluster[c] = run(c);
    }
    for (const auto& list : r.per_cluster) r.merged.insert(r.merged.end(), list.begin(), list.end());
    std::sort(r.merged.begin(), r.merged.end(), ranks_before);
    return r;
}

void write_candidates_jsonl(std::ostream& out, std::int64_t user, const RetrievalResult& r, const IdMap* item_ids) {
    nlohmann::json items = nlohmann::json::array(), scores = nlohmann::json::array();
    for (const auto& s : r.merged) {
        if (item_ids) items.push_back(item_ids->external(s.item));
        else items.push_back(s.item);
        scores.push_back(s.score);
    }
    nlohmann::json line = {{"user", user}, {"items", items}, {"scores", scores}, {"quotas", r.plan.quotas}};
    out << line.dump() << '\n';
}

} // namespace ebr

#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "ebr/common.hpp"
#include "ebr/item2vec.hpp"
#include "ebr/partition.hpp"
#include "ebr/seqrec.hpp"

namespace ebr {

struct ScoredItem {
    ItemIndex item;
    double score;
    bool operator==(const ScoredItem&) const = default;
};

// Descending score, ascending item id on ties.
inline bool ranks_before(const ScoredItem& a, const ScoredItem& b) {
    return a.score > b.score || (a.score == b.score && a.item < b.item);
}

// Item embeddings regrouped into one contiguous row block per cluster.
class PartitionedIndex {
public:
    static PartitionedIndex build(const EmbeddingMatrix& emb, const ClusterAssignment& ca);

    std::size_t k() const noexcept { return blocks_.size(); }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t num_items() const noexcept { return cluster_of_.size(); }
    const MatrixF& block(ClusterId c) const { return blocks_.at(c); }
    const std::vector<ItemIndex>& ids(ClusterId c) const { return ids_.at(c); }
    ClusterId cluster(ItemIndex i) const;

    // Per-cluster count of items not in `exclude`.
    std::vector<std::size_t> capacities(const ItemSet& exclude) const;

    bool operator==(const PartitionedIndex& other) const;

private:
    std::vector<MatrixF> blocks_;
    std::vector<std::vector<ItemIndex>> ids_;
    std::vector<ClusterId> cluster_of_;
    std::size_t dim_ = 0;
};

PartitionedIndex build_index(const EmbeddingMatrix& emb, const ClusterAssignment& ca);

// Exact top-k of one cluster minus `exclude`; shorter when the pool is.
std::vector<ScoredItem> topk_in_cluster(const PartitionedIndex& idx, ClusterId c, std::span<const float> user,
                                        std::size_t k, const ItemSet& exclude);

struct QuotaPlan {
    std::vector<std::size_t> quotas;
    std::size_t total = 0;
    double alpha = 0;
    std::vector<std::size_t> capacities;
};

// Shares M * p_k^a / sum p^a, largest-remainder rounding (ties to the lower
// cluster id), then capacity clipping with redistribution over the remaining
// clusters. 0^0 = 1.
QuotaPlan compute_quotas(std::span<const double> p, double alpha, std::size_t m, std::span<const std::size_t> capacities);

enum class Schedule { serial, parallel };

struct RetrievalResult {
    QuotaPlan plan;
    std::vector<std::vector<ScoredItem>> per_cluster;
    std::vector<ScoredItem> merged; // ranked by score, ties by item id
};

// `users` is 1 x d (one vector for every cluster) or K x d (row k used for
// cluster k, e.g. prompted encodings).
RetrievalResult retrieve_merged(const PartitionedIndex& idx, const MatrixF& users, std::span<const double> p,
                                double alpha, std::size_t m, const ItemSet& exclude,
                                Schedule schedule = Schedule::serial);

// One JSON object per line: {"user", "items", "scores", "quotas"}.
void write_candidates_jsonl(std::ostream& out, std::int64_t user, const RetrievalResult& r,
                            const IdMap* item_ids = nullptr);

} // namespace ebr

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ebr/common.hpp"
#include "ebr/item2vec.hpp"

namespace ebr {

// Total item -> cluster map plus its inverse. Clusters are non-empty and
// partition the item set.
class ClusterAssignment {
public:
    ClusterAssignment() = default;

    // Throws InputError unless `assign` covers k non-empty clusters.
    ClusterAssignment(std::size_t k, std::vector<ClusterId> assign);

    std::size_t k() const noexcept { return members_.size(); }
    std::size_t num_items() const noexcept { return assign_.size(); }
    const std::vector<ClusterId>& assign() const noexcept { return assign_; }
    const std::vector<ItemIndex>& members(ClusterId c) const { return members_.at(c); }

    bool operator==(const ClusterAssignment& other) const = default;

private:
    std::vector<ClusterId> assign_;
    std::vector<std::vector<ItemIndex>> members_;
};

ClusterId cluster_of(const ClusterAssignment& ca, ItemIndex item);

struct KMeansConfig {
    std::size_t k = 10;
    std::size_t max_iters = 100;
    double tol = 1e-4;
    std::uint64_t seed = 1;

    void validate(std::size_t rows) const;
};

struct KMeansResult {
    ClusterAssignment assignment;
    MatrixF centroids;                   // k x dim, in normalized space
    std::vector<double> objective;       // after each Lloyd iteration
    std::size_t iterations = 0;
    bool converged = false;
};

// Lloyd iterations on length-normalized rows with k-means++ seeding.
KMeansResult kmeans_detailed(const EmbeddingMatrix& emb, const KMeansConfig& cfg);
ClusterAssignment kmeans(const EmbeddingMatrix& emb, const KMeansConfig& cfg);

// Densely renumbers external labels in first-appearance order. A missing
// label (nullopt) is an error.
ClusterAssignment assign_from_labels(const std::vector<std::optional<std::string>>& labels);

// CSV "item_internal_id,cluster_id" with header.
void save_clusters(const ClusterAssignment& ca, const std::filesystem::path& path);
ClusterAssignment load_clusters(const std::filesystem::path& path);

} // namespace ebr

#pragma once

#include <cstdint>
#include <vector>

#include "ebr/corpus.hpp"

namespace ebr {

// Clustered sequential corpus generator for tests, the bundled smoke dataset
// and desk-scale experiments without downloads.
//
// Items are split into `clusters` equal blocks arranged as rings. A user has a
// home cluster plus `secondary_clusters` others; each step either stays in the
// current cluster (probability `stay_prob`) and walks a few ring positions, or
// jumps to a cluster drawn from the user's preference.
struct SyntheticConfig {
    std::size_t users = 200;
    std::size_t items = 100;
    std::size_t clusters = 4;
    std::size_t min_len = 5;
    std::size_t max_len = 30;
    std::size_t secondary_clusters = 1;
    double home_weight = 0.7;
    double stay_prob = 0.8;
    double ring_walk_prob = 0.8; // otherwise uniform inside the cluster
    std::size_t max_step = 2;
    bool allow_repeats = false; // otherwise a user never sees an item twice
    std::uint64_t seed = 7;
};

struct SyntheticCorpus {
    Dataset data;
    std::vector<ClusterId> item_cluster; // ground-truth generating cluster per item
    std::vector<ClusterId> home_cluster; // per user
};

SyntheticCorpus make_synthetic(const SyntheticConfig& cfg);

} // namespace ebr

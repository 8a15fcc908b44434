#pragma once

#include <cstdint>
#include <filesystem>

#include "ebr/common.hpp"
#include "ebr/corpus.hpp"
#include "ebr/seqrec.hpp"

namespace ebr {

struct MFConfig {
    std::size_t dim = 50;
    double lr = 1e-3;
    double init_std = 0.1;
    std::size_t batch_size = 1024;
    std::size_t epochs = 200;
    std::size_t patience = 20;
    std::size_t eval_every = 1;
    std::size_t eval_m = 20;
    std::size_t eval_users = 0;
    std::uint64_t seed = 1;

    void validate() const;
};

// Pure inner-product factorization, no bias terms.
struct MFParams {
    MatrixF user_table; // num_users x d
    MatrixF item_table; // num_items x d
    MFConfig config;
    TrainingReport report;

    std::size_t dim() const noexcept { return static_cast<std::size_t>(user_table.cols()); }
};

MFParams init_mf_params(std::size_t num_users, std::size_t num_items, const MFConfig& cfg);

// Per-interaction BCE with one uniform negative from the user's unseen items,
// Adam on touched rows, early stopping on validation Recall@eval_m.
MFParams train_mf(const Split& split, const MFConfig& cfg);

VectorF mf_user_vector(const MFParams& p, UserIndex user);

void save_mf(const MFParams& p, const std::filesystem::path& path);
MFParams load_mf(const std::filesystem::path& path);

} // namespace ebr

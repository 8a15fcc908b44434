#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "ebr/common.hpp"
#include "ebr/corpus.hpp"

namespace ebr {

// Dense item x dim float matrix shared by item2vec output, model item tables
// and the retrieval index.
struct EmbeddingMatrix {
    MatrixF values;

    std::size_t rows() const noexcept { return static_cast<std::size_t>(values.rows()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(values.cols()); }
    bool all_finite() const { return values.allFinite(); }
};

// "EBRV1": u32 rows, u32 dim, rows*dim float32 row-major, all little-endian.
void save_embeddings(const EmbeddingMatrix& emb, const std::filesystem::path& path);
EmbeddingMatrix load_embeddings(const std::filesystem::path& path);

struct Item2VecConfig {
    std::size_t dim = 32;
    std::size_t window = 5;
    std::size_t negatives_per_pair = 5;
    std::size_t epochs = 5;
    double lr = 0.025;
    std::size_t workers = 1;
    std::uint64_t seed = 1;

    void validate() const;
};

std::vector<std::pair<ItemIndex, ItemIndex>> skipgram_pairs(std::span<const ItemIndex> sequence,
                                                            std::size_t window);

struct Item2VecStats {
    std::vector<double> epoch_loss; // mean SGNS loss per (center, context) pair
};

EmbeddingMatrix train_item2vec(const Dataset& d, const Item2VecConfig& cfg, Item2VecStats* stats = nullptr);

} // namespace ebr

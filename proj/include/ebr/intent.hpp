#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ebr/common.hpp"
#include "ebr/corpus.hpp"
#include "ebr/partition.hpp"
#include "ebr/seqrec.hpp"

namespace ebr {

struct IntentConfig {
    double lr = 1e-2;
    std::size_t batch_size = 256;
    std::size_t epochs = 100;
    std::size_t patience = 5;
    std::size_t max_positions_per_user = 50; // most recent training positions per user
    std::uint64_t seed = 1;

    void validate() const;
};

struct IntentReport {
    std::vector<double> epoch_loss;
    std::vector<double> validation_loglik; // mean log p(target cluster), index 0 = untrained
    std::size_t best_epoch = 0;
    std::size_t examples = 0;
};

// Softmax regression over frozen, prompt-free backbone features.
struct IntentHead {
    MatrixF weight;  // K x d
    VectorF bias;    // K
    std::shared_ptr<const TrainedModel> backbone;
    std::string backbone_name;
    IntentReport report;

    std::size_t k() const noexcept { return static_cast<std::size_t>(weight.rows()); }
};

std::vector<double> softmax(std::span<const double> logits);

// Target of each training position is the cluster of the next item; the
// backbone is never updated.
IntentHead train_intent(const Split& split, const ClusterAssignment& ca, std::shared_ptr<const TrainedModel> backbone,
                        const IntentConfig& cfg);

std::vector<double> predict_intent(const IntentHead& h, std::span<const ItemIndex> history);
std::vector<double> predict_intent_from_features(const IntentHead& h, const VectorF& features);

// Stored as "EBRCK1" with the backbone's name in the metadata. load_intent
// resolves the name relative to the checkpoint's directory when `backbone` is
// null.
void save_intent(const IntentHead& h, const std::filesystem::path& path);
IntentHead load_intent(const std::filesystem::path& path, std::shared_ptr<const TrainedModel> backbone = nullptr);

} // namespace ebr

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebr/common.hpp"
#include "ebr/corpus.hpp"
#include "ebr/partition.hpp"

namespace ebr {

enum class NegativeKind { global, mixed, within_cluster };
enum class PromptKind { none, prefix, hadamard };

std::string to_string(NegativeKind k);
std::string to_string(PromptKind p);
NegativeKind parse_negative_kind(std::string_view s);
PromptKind parse_prompt_kind(std::string_view s);

struct TrainingMode {
    NegativeKind kind = NegativeKind::global;
    double mix_ratio = 0.0; // probability of a within-cluster negative in mixed mode
    PromptKind prompt = PromptKind::none;

    void validate() const;
    bool needs_clusters() const { return kind != NegativeKind::global; }
    bool operator==(const TrainingMode&) const = default;
};

struct EncoderConfig {
    std::size_t max_len = 200;
    std::size_t dim = 50;
    std::size_t blocks = 2;
    std::size_t heads = 1;
    double dropout = 0.2;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    std::size_t batch_size = 128;
    std::size_t epochs = 200;
    std::size_t patience = 20;   // epochs without validation improvement
    std::size_t eval_every = 1;  // epochs between validation passes
    std::size_t eval_m = 20;     // Recall@M used for early stopping
    std::size_t eval_users = 0;  // 0 = all eligible users
    std::uint64_t seed = 1;

    void validate() const;
};

template <typename T>
struct EncoderParamsT {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    struct Block {
        Mat ln1_gain, ln1_bias;
        Mat wq, bq, wk, bk, wv, bv, wo, bo;
        Mat ln2_gain, ln2_bias;
        Mat w1, b1, w2, b2;
    };

    Mat item_table;   // (num_items + 1) x d, row 0 is padding
    Mat pos_table;    // max_len x d
    std::vector<Block> blocks;
    Mat final_gain, final_bias;
    Mat prompt_table; // K x d, empty without prompts

    template <typename F>
    void visit(F&& f) {
        f(std::string("item_table"), item_table);
        f(std::string("pos_table"), pos_table);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            auto& k = blocks[b];
            const std::string p = "block" + std::to_string(b) + ".";
            f(p + "ln1_gain", k.ln1_gain);
            f(p + "ln1_bias", k.ln1_bias);
            f(p + "wq", k.wq);
            f(p + "bq", k.bq);
            f(p + "wk", k.wk);
            f(p + "bk", k.bk);
            f(p + "wv", k.wv);
            f(p + "bv", k.bv);
            f(p + "wo", k.wo);
            f(p + "bo", k.bo);
            f(p + "ln2_gain", k.ln2_gain);
            f(p + "ln2_bias", k.ln2_bias);
            f(p + "w1", k.w1);
            f(p + "b1", k.b1);
            f(p + "w2", k.w2);
            f(p + "b2", k.b2);
        }
        f(std::string("final_gain"), final_gain);
        f(std::string("final_bias"), final_bias);
        if (prompt_table.size() > 0) f(std::string("prompt_table"), prompt_table);
    }

    template <typename F>
    void visit(F&& f) const {
        const_cast<EncoderParamsT*>(this)->visit([&](const std::string& n, Mat& m) { f(n, static_cast<const Mat&>(m)); });
    }

    // Same shapes, all zeros.
    EncoderParamsT zeros_like() const {
        EncoderParamsT z = *this;
        z.visit([](const std::string&, Mat& m) { m.setZero(); });
        return z;
    }

    template <typename U>
    EncoderParamsT<U> cast() const {
        EncoderParamsT<U> out;
        out.blocks.resize(blocks.size());
        std::vector<const Mat*> src;
        visit([&](const std::string&, const Mat& m) { src.push_back(&m); });
        if (prompt_table.size() == 0) out.prompt_table.resize(0, 0);
        else out.prompt_table.resize(prompt_table.rows(), prompt_table.cols());
        std::size_t i = 0;
        out.visit([&](const std::string&, typename EncoderParamsT<U>::Mat& m) {
            m = src[i++]->template cast<U>();
        });
        return out;
    }
};

using EncoderParams = EncoderParamsT<float>;

// xavier-normal weights, unit layer-norm gains, zero biases and padding row;
// prompt table all-ones (hadamard) or zeros (prefix).
EncoderParams init_encoder_params(const EncoderConfig& cfg, PromptKind prompt, std::size_t num_items,
                                  std::size_t num_clusters, Rng& rng);

// One training sequence: input[j] predicts positive[j]. Positions whose
// negative is kNoItem do not contribute to the loss.
struct TrainingSample {
    std::vector<ItemIndex> input;
    std::vector<ItemIndex> positive;
    std::vector<ItemIndex> negative;
    std::optional<ClusterId> task;
};

// Mean BCE over active positions of the batch, and its gradient accumulated
// into `grads` (which must have the shapes of `params`). Dropout is applied
// when `dropout_rng` is non-null.
template <typename T>
double loss_and_gradients(const EncoderParamsT<T>& params, const EncoderConfig& cfg, PromptKind prompt,
                          std::span<const TrainingSample> batch, EncoderParamsT<T>* grads, Rng* dropout_rng);

struct TrainingReport {
    std::vector<double> epoch_loss;
    std::vector<std::pair<std::size_t, double>> validation; // (epoch, metric)
    std::size_t best_epoch = 0;
    double best_metric = 0;
    bool validation_improved = true;
    std::size_t steps = 0;
    std::size_t samples = 0;
};

struct TrainedModel {
    EncoderParams params;
    EncoderConfig config;
    TrainingMode mode;
    std::size_t num_items = 0;
    std::size_t num_clusters = 0;
    TrainingReport report;

    // Hidden state at the last position for the most recent items of
    // `history`. `task` is required (and range-checked) when prompts are on.
    VectorF encode_user(std::span<const ItemIndex> history, std::optional<ClusterId> task = std::nullopt) const;

    // Prompt-free features (hadamard and prefix both disabled), used by the
    // intent model.
    VectorF encode_user_unprompted(std::span<const ItemIndex> history) const;

    // Hidden state for every position of `history` (prompt-free); row j is the
    // representation after consuming history[0..j] of the truncated window.
    MatrixF encode_positions_unprompted(std::span<const ItemIndex> history) const;

    // e_i for every item (item_table without the padding row).
    MatrixF item_embeddings() const { return params.item_table.bottomRows(params.item_table.rows() - 1); }
};

// Sorted set of a user's interacted items.
class ItemSet {
public:
    ItemSet() = default;
    explicit ItemSet(std::span<const ItemIndex> items);
    bool contains(ItemIndex i) const { return std::binary_search(items_.begin(), items_.end(), i); }
    std::size_t size() const noexcept { return items_.size(); }
    const std::vector<ItemIndex>& items() const noexcept { return items_; }

private:
    std::vector<ItemIndex> items_;
};

double score(std::span<const float> user, std::span<const float> item);
double score(const VectorF& user, const VectorF& item);

// Whether `target` ranks within the top `m` of `pool` minus `exclude` under
// descending score with ascending-id tie-break. An empty pool means all rows
// of `items`. Counts without sorting.
bool target_in_top_m(const MatrixF& items, std::span<const float> user, ItemIndex target,
                     std::span<const ItemIndex> pool, const ItemSet& exclude, std::size_t m);

// -[log s(r_pos) + mean log(1 - s(r_neg))], computed with softplus.
double bce_loss(double r_pos, std::span<const double> r_negs);


// nullopt is the skip-sample signal: the pool minus the user's items is empty.
std::optional<ItemIndex> sample_negative(const TrainingMode& mode, ItemIndex positive, const ItemSet& user_hist,
                                         std::size_t num_items, const ClusterAssignment* ca, Rng& rng);

// Step-wise trainer; train() drives it to completion with early stopping.
class Trainer {
public:
    Trainer(const Split& split, const ClusterAssignment* ca, const EncoderConfig& cfg, const TrainingMode& mode);

    // One optimizer step over the next batch; returns samples consumed.
    std::size_t step();
    // Runs the remainder of the current epoch; returns its mean loss.
    double run_epoch();

    std::size_t samples_per_epoch() const { return samples_.size(); }
    std::size_t epoch() const { return epoch_; }
    TrainedModel snapshot() const;
    const EncoderParams& params() const { return params_; }

    // Validation recall used for early stopping: global Recall@M, or
    // within-cluster Recall@M for within-cluster modes.
    double validation_metric(const TrainedModel& m) const;

private:
    struct Slot {
        UserIndex user;
        std::optional<ClusterId> task;
    };
    TrainingSample make_sample(const Slot& s);
    void start_epoch();
    void adam_update();

    const Split& split_;
    const ClusterAssignment* ca_;
    EncoderConfig cfg_;
    TrainingMode mode_;
    std::size_t num_clusters_ = 0;
    EncoderParams params_;
    EncoderParams grads_;
    EncoderParams adam_m_;
    EncoderParams adam_v_;
    std::size_t adam_t_ = 0;
    std::vector<ItemSet> user_items_;
    std::vector<Slot> samples_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t epoch_ = 0;
    double epoch_loss_sum_ = 0;
    std::size_t epoch_batches_ = 0;
    std::size_t total_steps_ = 0;
    std::size_t total_samples_ = 0;
    Rng rng_;
    std::vector<TrainingSample> batch_;

    friend TrainedModel train(const Split&, const ClusterAssignment*, const EncoderConfig&, const TrainingMode&);
};

TrainedModel train(const Split& split, const ClusterAssignment* ca, const EncoderConfig& cfg, const TrainingMode& mode);

struct GradientCheckReport {
    double max_relative_error = 0;
    std::map<std::string, double> per_tensor;
};

// Tiny probe for the finite-difference gradient check.
struct GradientProbe {
    std::vector<std::vector<ItemIndex>> sequences;
    std::size_t num_items = 0;
    std::optional<ClusterAssignment> clusters;
    std::uint64_t seed = 3;
};

// Analytic gradients of the batch BCE loss against central differences
// (step 1e-4) for every parameter tensor, in double precision, dropout off.
GradientCheckReport gradient_check(const EncoderConfig& cfg, const TrainingMode& mode, const GradientProbe& probe);

// Checkpoint ("EBRCK1") round trip.
void save_model(const TrainedModel& m, const std::filesystem::path& path);
TrainedModel load_model(const std::filesystem::path& path);

} // namespace ebr

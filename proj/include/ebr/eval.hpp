#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ebr/common.hpp"
#include "ebr/corpus.hpp"
#include "ebr/intent.hpp"
#include "ebr/mf.hpp"
#include "ebr/partition.hpp"
#include "ebr/retrieval.hpp"
#include "ebr/seqrec.hpp"

namespace ebr {

// Anything that maps a user (and history) to a vector scored against its own
// item table.
class UserModel {
public:
    virtual ~UserModel() = default;
    virtual const MatrixF& items() const = 0;
    virtual bool has_prompts() const { return false; }
    virtual VectorF encode(UserIndex user, std::span<const ItemIndex> history,
                           std::optional<ClusterId> task = std::nullopt) const = 0;
    std::size_t dim() const { return static_cast<std::size_t>(items().cols()); }
};

class SeqRecUserModel : public UserModel {
public:
    explicit SeqRecUserModel(const TrainedModel& m) : m_(m), items_(m.item_embeddings()) {}
    const MatrixF& items() const override { return items_; }
    bool has_prompts() const override { return m_.mode.prompt != PromptKind::none; }
    VectorF encode(UserIndex, std::span<const ItemIndex> history, std::optional<ClusterId> task = std::nullopt) const override {
        return m_.encode_user(history, has_prompts() ? task : std::nullopt);
    }

private:
    const TrainedModel& m_;
    MatrixF items_;
};

class MFUserModel : public UserModel {
public:
    explicit MFUserModel(const MFParams& p) : p_(p) {}
    const MatrixF& items() const override { return p_.item_table; }
    VectorF encode(UserIndex user, std::span<const ItemIndex>, std::optional<ClusterId> = std::nullopt) const override {
        return mf_user_vector(p_, user);
    }

private:
    const MFParams& p_;
};

// Validation scores the penultimate item from the training history; test
// scores the last item with the validation item appended to the history and
// excluded from the candidates.
enum class Phase { validation, test };

double recall_at_m(std::span<const ItemIndex> candidates, ItemIndex target);

// Everything the divided path needs besides the encoder.
struct DividedStack {
    const PartitionedIndex* index = nullptr;
    const IntentHead* intent = nullptr;
    double alpha = 1.0;
    Schedule schedule = Schedule::serial;
};

struct MethodMetrics {
    std::string method;
    std::string protocol; // "overall" or "within_cluster"
    std::map<std::size_t, double> recall;
    // within_cluster only: per ground-truth cluster recall and user count
    std::vector<std::map<std::size_t, double>> per_cluster;
    std::vector<std::size_t> per_cluster_users;
    std::size_t users = 0;
    std::optional<double> alpha;
    std::optional<double> mix_ratio;
    std::optional<double> throughput;
};

struct MetricsReport {
    std::vector<MethodMetrics> rows;
    std::string config_fingerprint;
    std::uint64_t seed = 0;
    std::string phase = "test";

    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
    // Plain-text table: one row per (method, protocol), one column per M.
    std::string render_table() const;
    const MethodMetrics* find(const std::string& method, const std::string& protocol) const;
};

// Global path (stack == nullptr): exact top-M over all unseen items.
// Divided path: retrieve_merged with the head's p_u; prompted models supply
// one encoding per cluster.
MethodMetrics evaluate_overall(const UserModel& model, const DividedStack* stack, const Split& split,
                               std::span<const std::size_t> ms, Phase phase = Phase::test);

// Divided path for several alphas sharing one encoding pass per user.
std::vector<MethodMetrics> evaluate_overall_alphas(const UserModel& model, const DividedStack& stack, const Split& split,
                                                   std::span<const std::size_t> ms, std::span<const double> alphas,
                                                   Phase phase = Phase::test);

// Candidates restricted to the ground-truth item's cluster, ranked by the
// model with that cluster's prompt when it has prompts.
MethodMetrics evaluate_within_cluster(const UserModel& model, const PartitionedIndex& idx, const ClusterAssignment& ca,
                                      const Split& split, std::span<const std::size_t> ms, Phase phase = Phase::test);

struct ThroughputResult {
    double median = 0;                 // samples per second
    std::vector<double> window_rates;
};

// Calls `step` (which returns the number of samples it processed) for
// `warmup` calls, then for `windows` consecutive windows of `seconds` each.
ThroughputResult measure_throughput(const std::function<std::size_t()>& step, double seconds, std::size_t windows = 3,
                                    std::size_t warmup = 2);

} // namespace ebr

#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

#include "ebr/eval.hpp"
#include "ebr/synthetic.hpp"
#include "support.hpp"

using namespace ebr;

namespace {

Split synthetic_split(std::size_t users, std::size_t items, std::uint64_t seed, std::size_t clusters = 4) {
    SyntheticConfig sc;
    sc.users = users;
    sc.items = items;
    sc.clusters = clusters;
    sc.min_len = 6;
    sc.max_len = 20;
    sc.seed = seed;
    return leave_last_out_split(make_synthetic(sc).data);
}

std::shared_ptr<TrainedModel> untrained(std::size_t items, std::size_t k, PromptKind prompt, std::uint64_t seed = 2) {
    EncoderConfig cfg;
    cfg.max_len = 20;
    cfg.dim = 16;
    cfg.blocks = 1;
    Rng rng(seed);
    auto m = std::make_shared<TrainedModel>();
    m->params = init_encoder_params(cfg, prompt, items, k, rng);
    if (prompt == PromptKind::hadamard) {
        std::normal_distribution<float> n(1, 0.5);
        for (Eigen::Index i = 0; i < m->params.prompt_table.size(); ++i) m->params.prompt_table.data()[i] = n(rng);
    }
    m->config = cfg;
    m->mode = prompt == PromptKind::none ? TrainingMode{} : TrainingMode{NegativeKind::within_cluster, 0, prompt};
    m->num_items = items;
    m->num_clusters = k;
    return m;
}

IntentHead random_head(std::shared_ptr<const TrainedModel> backbone, std::size_t k, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<float> n(0, 1);
    IntentHead h;
    h.weight.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(backbone->config.dim));
    for (Eigen::Index i = 0; i < h.weight.size(); ++i) h.weight.data()[i] = n(rng);
    h.bias = VectorF::Zero(static_cast<Eigen::Index>(k));
    h.backbone = std::move(backbone);
    return h;
}

ClusterAssignment striped(std::size_t items, std::size_t k) {
    std::vector<ClusterId> a(items);
    for (std::size_t i = 0; i < items; ++i) a[i] = static_cast<ClusterId>(i % k);
    return ClusterAssignment(k, a);
}

} // namespace

TEST_CASE("recall examples") {
    std::vector<ItemIndex> c = {1, 2, 3};
    CHECK(recall_at_m(c, 2) == 1.0);
    CHECK(recall_at_m(c, 4) == 0.0);
}

TEST_CASE("random embeddings retrieve at the random rate") {
    auto split = synthetic_split(1500, 1000, 3);
    REQUIRE(split.eligible_users.size() >= 1000);
    MFConfig cfg;
    cfg.dim = 16;
    cfg.seed = 9;
    auto p = init_mf_params(split.train.num_users, split.train.num_items, cfg);
    MFUserModel model(p);
    std::vector<std::size_t> ms = {100};
    auto r = evaluate_overall(model, nullptr, split, ms);
    MESSAGE("recall@100 " << r.recall.at(100));
    CHECK(std::abs(r.recall.at(100) - 0.1) <= 0.02);
    CHECK(r.users == split.eligible_users.size());
}

TEST_CASE("M equal to the unseen count gives recall one") {
    // 20 items, every user has 5 distinct items, so 16 are unseen at test time.
    Rng rng(4);
    std::vector<std::vector<ItemIndex>> seqs;
    for (int u = 0; u < 50; ++u) {
        std::vector<ItemIndex> all(20);
        std::iota(all.begin(), all.end(), 0);
        std::shuffle(all.begin(), all.end(), rng);
        seqs.emplace_back(all.begin(), all.begin() + 5);
    }
    auto split = leave_last_out_split(Dataset::from_sequences(seqs, 20));
    MFConfig cfg;
    cfg.dim = 4;
    auto p = init_mf_params(50, 20, cfg);
    MFUserModel model(p);
    std::vector<std::size_t> ms = {15, 16};
    auto r = evaluate_overall(model, nullptr, split, ms);
    CHECK(r.recall.at(16) == 1.0);
    CHECK(r.recall.at(15) < 1.0);
}

TEST_CASE("divided retrieval with one cluster equals global retrieval") {
    auto split = synthetic_split(300, 200, 5);
    auto model = untrained(200, 1, PromptKind::none);
    SeqRecUserModel um(*model);
    ClusterAssignment one(1, std::vector<ClusterId>(200, 0));
    auto idx = build_index({um.items()}, one);
    auto head = random_head(model, 1, 1);
    std::vector<std::size_t> ms = {5, 20, 50};
    auto global = evaluate_overall(um, nullptr, split, ms);
    for (double alpha : {0.0, 0.5, 1.0, 4.0, 1e6}) {
        DividedStack stack{&idx, &head, alpha, Schedule::serial};
        CHECK(evaluate_overall(um, &stack, split, ms).recall == global.recall);
    }
    for (auto phase : {Phase::validation, Phase::test}) {
        DividedStack stack{&idx, &head, 2.0, Schedule::parallel};
        CHECK(evaluate_overall(um, &stack, split, ms, phase).recall == evaluate_overall(um, nullptr, split, ms, phase).recall);
    }
}

TEST_CASE("property: within-cluster recall bounds overall recall") {
    for (std::uint64_t seed : {1, 2, 3}) {
        auto split = synthetic_split(300, 120, seed);
        for (auto prompt : {PromptKind::none, PromptKind::hadamard}) {
            auto model = untrained(120, 4, prompt, seed);
            SeqRecUserModel um(*model);
            auto ca = striped(120, 4);
            auto idx = build_index({um.items()}, ca);
            auto head = random_head(model, 4, seed);
            std::vector<std::size_t> ms = {5, 10, 20};
            auto within = evaluate_within_cluster(um, idx, ca, split, ms);
            DividedStack stack{&idx, &head, 1.0, Schedule::serial};
            auto divided = evaluate_overall(um, &stack, split, ms);
            for (auto m : ms) {
                CHECK(within.recall.at(m) >= divided.recall.at(m));
                if (prompt == PromptKind::none) {
                    CHECK(within.recall.at(m) >= evaluate_overall(um, nullptr, split, ms).recall.at(m));
                }
            }
            std::size_t users = 0;
            for (auto n : within.per_cluster_users) users += n;
            CHECK(users == within.users);
        }
    }
}

TEST_CASE("a cluster holding only the target gives recall one") {
    // Item 0 is every user's final item and sits alone in cluster 0.
    Rng rng(6);
    std::vector<std::vector<ItemIndex>> seqs;
    for (int u = 0; u < 40; ++u) {
        std::vector<ItemIndex> s;
        for (int j = 0; j < 6; ++j) s.push_back(1 + static_cast<ItemIndex>(rng() % 29));
        s.push_back(0);
        seqs.push_back(s);
    }
    auto split = leave_last_out_split(Dataset::from_sequences(seqs, 30));
    std::vector<ClusterId> a(30, 1);
    a[0] = 0;
    ClusterAssignment ca(2, a);
    auto model = untrained(30, 2, PromptKind::none);
    SeqRecUserModel um(*model);
    auto idx = build_index({um.items()}, ca);
    std::vector<std::size_t> ms = {1, 5};
    auto r = evaluate_within_cluster(um, idx, ca, split, ms);
    CHECK(r.recall.at(1) == 1.0);
    CHECK(r.recall.at(5) == 1.0);
    CHECK(r.per_cluster[0].at(1) == 1.0);
}

TEST_CASE("reports are deterministic and round-trip through JSON") {
    auto split = synthetic_split(200, 100, 7);
    auto model = untrained(100, 4, PromptKind::hadamard);
    SeqRecUserModel um(*model);
    auto ca = striped(100, 4);
    auto idx = build_index({um.items()}, ca);
    auto head = random_head(model, 4, 3);
    std::vector<std::size_t> ms = {10, 20};
    auto build = [&] {
        MetricsReport rep;
        rep.seed = 4;
        rep.config_fingerprint = "abc";
        DividedStack stack{&idx, &head, 2.0, Schedule::parallel};
        auto o = evaluate_overall(um, &stack, split, ms);
        o.method = "ours";
        o.alpha = 2.0;
        o.throughput = 1234.5;
        auto w = evaluate_within_cluster(um, idx, ca, split, ms);
        w.method = "ours";
        rep.rows = {o, w};
        return rep;
    };
    auto a = build(), b = build();
    CHECK(a.to_json() == b.to_json());
    auto back = MetricsReport::from_json(a.to_json());
    CHECK(back.to_json() == a.to_json());
    REQUIRE(back.find("ours", "within_cluster"));
    CHECK(back.find("ours", "within_cluster")->per_cluster.size() == 4);
    CHECK(back.find("ours", "overall")->alpha == 2.0);
    CHECK(back.find("mf", "overall") == nullptr);
    for (const auto& row : a.rows)
        for (auto [m, v] : row.recall) CHECK((v >= 0 && v <= 1));
    auto table = a.render_table();
    CHECK(table.find("ours") != std::string::npos);
    CHECK(table.find("1234") != std::string::npos);
}

TEST_CASE("evaluation rejects mismatched inputs") {
    auto split = synthetic_split(50, 60, 8);
    auto model = untrained(60, 3, PromptKind::none);
    SeqRecUserModel um(*model);
    auto ca = striped(60, 3);
    auto idx = build_index({um.items()}, ca);
    auto head = random_head(model, 2, 1);
    std::vector<std::size_t> ms = {5};
    DividedStack stack{&idx, &head, 1.0, Schedule::serial};
    CHECK_THROWS_AS(evaluate_overall(um, &stack, split, ms), InputError);
    DividedStack empty;
    CHECK_THROWS_AS(evaluate_overall(um, &empty, split, ms), PipelineError);
    std::vector<std::size_t> none;
    CHECK_THROWS_AS(evaluate_overall(um, nullptr, split, none), UsageError);
}

TEST_CASE("throughput measurement") {
    // A step with a fixed cost; sleeping can only overshoot, so the rate is bounded above.
    auto paced = [](std::size_t samples) {
        return [samples] {
            std::this_thread::sleep_for(std::chrono::milliseconds(2));
            return samples;
        };
    };
    auto a = measure_throughput(paced(10), 0.2);
    CHECK(a.window_rates.size() == 3);
    CHECK(a.median <= 5000.0);
    CHECK(a.median >= 2000.0);
    auto sorted = a.window_rates;
    std::sort(sorted.begin(), sorted.end());
    CHECK(a.median == sorted[1]);
    auto b = measure_throughput(paced(20), 0.2, 5);
    MESSAGE("paced rates " << a.median << " " << b.median);
    CHECK(b.window_rates.size() == 5);
    CHECK(b.median == doctest::Approx(2 * a.median).epsilon(0.25));
    CHECK_THROWS_AS(measure_throughput(paced(1), 0.1, 0), UsageError);

    auto split = synthetic_split(400, 200, 9);
    EncoderConfig cfg;
    cfg.max_len = 20;
    cfg.dim = 16;
    cfg.blocks = 1;
    cfg.batch_size = 32;
    Trainer t(split, nullptr, cfg, TrainingMode{});
    auto r = measure_throughput([&] { return t.step(); }, 0.2);
    MESSAGE("encoder rate " << r.median);
    CHECK(r.median > 0);
    CHECK(std::isfinite(r.median));
}

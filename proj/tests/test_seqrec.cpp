#include <doctest.h>

#include <cmath>

#include "ebr/seqrec.hpp"
#include "ebr/synthetic.hpp"
#include "support.hpp"

using namespace ebr;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig c;
    c.max_len = 6;
    c.dim = 8;
    c.blocks = 2;
    c.heads = 2;
    c.dropout = 0.2;
    return c;
}

TrainedModel fresh_model(const EncoderConfig& cfg, const TrainingMode& mode, std::size_t items, std::size_t k,
                         std::uint64_t seed = 5) {
    Rng rng(seed);
    TrainedModel m;
    m.params = init_encoder_params(cfg, mode.prompt, items, k, rng);
    m.config = cfg;
    m.mode = mode;
    m.num_items = items;
    m.num_clusters = k;
    return m;
}

ClusterAssignment striped(std::size_t items, std::size_t k) {
    std::vector<ClusterId> a(items);
    for (std::size_t i = 0; i < items; ++i) a[i] = static_cast<ClusterId>(i % k);
    return ClusterAssignment(k, a);
}

bool bitwise_equal(const VectorF& a, const VectorF& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0;
}

Split synthetic_split(std::size_t users, std::size_t items, std::uint64_t seed) {
    SyntheticConfig sc;
    sc.users = users;
    sc.items = items;
    sc.clusters = 3;
    sc.min_len = 8;
    sc.max_len = 20;
    sc.seed = seed;
    return leave_last_out_split(make_synthetic(sc).data);
}

const TrainingMode kGlobal{};
const TrainingMode kWithin{NegativeKind::within_cluster, 0.0, PromptKind::none};
const TrainingMode kHadamard{NegativeKind::within_cluster, 0.0, PromptKind::hadamard};
const TrainingMode kPrefix{NegativeKind::within_cluster, 0.0, PromptKind::prefix};

} // namespace

TEST_CASE("hadamard prompt at all-ones is the identity, bitwise") {
    auto cfg = tiny_config();
    auto had = fresh_model(cfg, kHadamard, 30, 3);
    REQUIRE(had.params.prompt_table == EncoderParams::Mat::Ones(3, 8));
    auto plain = had;
    plain.mode = kWithin;
    Rng rng(9);
    for (int t = 0; t < 20; ++t) {
        std::vector<ItemIndex> h;
        for (int j = 0; j < 1 + t % 9; ++j) h.push_back(static_cast<ItemIndex>(rng() % 30));
        for (ClusterId k = 0; k < 3; ++k) CHECK(bitwise_equal(had.encode_user(h, k), plain.encode_user(h)));
    }
}

TEST_CASE("encoding keeps only the most recent max_len items") {
    auto cfg = tiny_config();
    for (const auto& mode : {kGlobal, kHadamard, kPrefix}) {
        auto m = fresh_model(cfg, mode, 30, 3);
        const std::size_t window = cfg.max_len - (mode.prompt == PromptKind::prefix ? 1 : 0);
        std::vector<ItemIndex> h = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
        std::vector<ItemIndex> tail(h.end() - static_cast<std::ptrdiff_t>(window), h.end());
        std::optional<ClusterId> task;
        if (mode.prompt != PromptKind::none) task = 1;
        CHECK(bitwise_equal(m.encode_user(h, task), m.encode_user(tail, task)));
        std::vector<ItemIndex> longer(tail.begin() - 1, tail.end());
        longer.front() = 29;
        CHECK(bitwise_equal(m.encode_user(longer, task), m.encode_user(tail, task)));
    }
}

TEST_CASE("encoding is deterministic and validates the task") {
    auto cfg = tiny_config();
    auto m = fresh_model(cfg, kPrefix, 30, 3);
    std::vector<ItemIndex> h = {3, 1, 4};
    CHECK(bitwise_equal(m.encode_user(h, 2), m.encode_user(h, 2)));
    CHECK_THROWS_AS(m.encode_user(h), UsageError);
    CHECK_THROWS_AS(m.encode_user(h, 3), UsageError);
}

TEST_CASE("score") {
    std::vector<float> z = {0, 0}, a = {1, 2}, b = {3, -1}, e = {1, 0};
    CHECK(score(z, a) == 0.0);
    CHECK(score(e, e) == 1.0);
    CHECK(score(a, b) == 1.0);
    std::vector<float> three = {1, 2, 3};
    CHECK_THROWS_AS(score(a, three), UsageError);
}

TEST_CASE("bce examples") {
    std::vector<double> zero = {0.0}, neg30 = {-30.0}, pos30 = {30.0};
    CHECK(bce_loss(0, zero) == doctest::Approx(2 * std::log(2.0)).epsilon(1e-12));
    CHECK(bce_loss(30, neg30) <= 1e-9);
    CHECK(bce_loss(30, neg30) == doctest::Approx(1.8715245937679473e-13).epsilon(1e-9));
    // 60 + 2 log1p(e^-30) evaluated to 50 digits
    CHECK(std::abs(bce_loss(-30, pos30) - 60.000000000000187152459376794735587553948493503154) <= 1e-6);
}

TEST_CASE("property: bce is non-negative and decreasing in r_pos") {
    Rng rng(4);
    std::uniform_real_distribution<double> u(-20, 20);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> negs(1 + t % 4);
        for (auto& n : negs) n = u(rng);
        double prev = std::numeric_limits<double>::infinity();
        for (double r = -20; r <= 20; r += 0.5) {
            const double l = bce_loss(r, negs);
            CHECK(l >= 0);
            CHECK(l < prev);
            prev = l;
        }
    }
}

TEST_CASE("negative sampling") {
    Rng rng(1);
    SUBCASE("pool of one") {
        ClusterAssignment ca(2, {0, 1, 0, 1});
        std::vector<ItemIndex> h = {0};
        ItemSet hist(h);
        for (int t = 0; t < 100; ++t) CHECK(sample_negative(kWithin, 0, hist, 4, &ca, rng) == ItemIndex{2});
    }
    SUBCASE("empty pool is the skip signal") {
        ClusterAssignment ca(2, {0, 1, 0, 1});
        std::vector<ItemIndex> h = {0, 2};
        CHECK_FALSE(sample_negative(kWithin, 0, ItemSet(h), 4, &ca, rng).has_value());
    }
    SUBCASE("global draws are uniform") {
        constexpr std::size_t n = 1000, draws = 100000;
        std::vector<double> counts(n, 0);
        ItemSet empty;
        for (std::size_t t = 0; t < draws; ++t) ++counts[*sample_negative(kGlobal, kNoItem, empty, n, nullptr, rng)];
        const double expected = static_cast<double>(draws) / n;
        double chi2 = 0;
        for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
        // 99th percentile of chi-squared with 999 degrees of freedom
        CHECK(chi2 < 1105.9169575045823);
    }
    SUBCASE("mixed with rho = 1 matches within-cluster") {
        auto ca = striped(50, 5);
        std::vector<ItemIndex> h = {0, 5, 7};
        ItemSet hist(h);
        TrainingMode mixed{NegativeKind::mixed, 1.0, PromptKind::none};
        Rng a(3), b(3);
        for (int t = 0; t < 500; ++t) {
            ItemIndex pos = static_cast<ItemIndex>(t % 50);
            CHECK(sample_negative(mixed, pos, hist, 50, &ca, a) == sample_negative(kWithin, pos, hist, 50, &ca, b));
        }
    }
    SUBCASE("negatives avoid the history and stay in the positive's cluster") {
        auto ca = striped(60, 4);
        std::vector<ItemIndex> h = {1, 2, 3, 9, 13};
        ItemSet hist(h);
        for (int t = 0; t < 1000; ++t) {
            ItemIndex pos = static_cast<ItemIndex>(t % 60);
            auto n = sample_negative(kWithin, pos, hist, 60, &ca, rng);
            REQUIRE(n);
            CHECK_FALSE(hist.contains(*n));
            CHECK(cluster_of(ca, *n) == cluster_of(ca, pos));
        }
    }
}

TEST_CASE("gradient check in every prompt mode") {
    auto cfg = tiny_config();
    GradientProbe probe;
    probe.num_items = 12;
    probe.sequences = {{0, 3, 5, 7, 2}, {1, 4, 8}, {6, 9, 10, 11, 0, 2, 5, 3}};
    probe.clusters = striped(12, 3);
    for (const auto& mode : {kGlobal, kWithin, kHadamard, kPrefix}) {
        auto r = gradient_check(cfg, mode, probe);
        INFO("mode " << to_string(mode.prompt) << " worst " << r.max_relative_error);
        CHECK(r.max_relative_error <= 1e-3);
        if (mode.prompt != PromptKind::none) CHECK(r.per_tensor.count("prompt_table") == 1);
    }
}

TEST_CASE("padding row receives zero gradient") {
    auto cfg = tiny_config();
    cfg.dropout = 0;
    auto m = fresh_model(cfg, kHadamard, 12, 3);
    std::vector<TrainingSample> batch = {{{1}, {2}, {5}, 2}, {{3, 4}, {4, 6}, {7, 9}, 0}};
    auto grads = m.params.zeros_like();
    const double loss = loss_and_gradients<float>(m.params, cfg, PromptKind::hadamard, batch, &grads, nullptr);
    CHECK(std::isfinite(loss));
    CHECK(grads.item_table.row(0).isZero(0));
    CHECK_FALSE(grads.item_table.isZero(0));
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    auto split = synthetic_split(30, 40, 2);
    auto cfg = tiny_config();
    cfg.lr = 0;
    cfg.batch_size = 8;
    Trainer t(split, nullptr, cfg, kGlobal);
    const auto before = t.params();
    for (int s = 0; s < 5; ++s) t.step();
    std::vector<const EncoderParams::Mat*> a, b;
    before.visit([&](const std::string&, const EncoderParams::Mat& x) { a.push_back(&x); });
    t.params().visit([&](const std::string&, const EncoderParams::Mat& x) { b.push_back(&x); });
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(std::memcmp(a[i]->data(), b[i]->data(), sizeof(float) * a[i]->size()) == 0);
}

TEST_CASE("toy training loss decreases") {
    auto d = Dataset::from_sequences({{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1, 2, 3},
                                      {2, 3, 4, 5, 6, 7, 8, 9, 0, 1, 2, 3, 4},
                                      {5, 6, 7, 8, 9, 0, 1, 2, 3, 4, 5, 6}},
                                     40);
    auto split = leave_last_out_split(d);
    auto cfg = tiny_config();
    cfg.max_len = 10;
    cfg.lr = 1e-2;
    cfg.epochs = 2;
    cfg.batch_size = 1;
    auto m = train(split, nullptr, cfg, kGlobal);
    REQUIRE(m.report.epoch_loss.size() == 2);
    CHECK(m.report.epoch_loss[1] < m.report.epoch_loss[0]);
}

TEST_CASE("within-cluster training with one cluster matches global") {
    auto split = synthetic_split(120, 60, 4);
    auto cfg = tiny_config();
    cfg.max_len = 10;
    cfg.dim = 16;
    cfg.lr = 1e-2;
    cfg.epochs = 5;
    cfg.eval_m = 10;
    ClusterAssignment one(1, std::vector<ClusterId>(split.train.num_items, 0));
    auto g = train(split, nullptr, cfg, kGlobal);
    auto w = train(split, &one, cfg, kWithin);
    CHECK(std::abs(g.report.best_metric - w.report.best_metric) <= 0.01);
}

TEST_CASE("diverging learning rate raises") {
    auto split = synthetic_split(30, 40, 5);
    auto cfg = tiny_config();
    cfg.lr = 1e30;
    cfg.adam_eps = 1e-30;
    cfg.epochs = 3;
    CHECK_THROWS_AS(train(split, nullptr, cfg, kGlobal), DivergedError);
}

TEST_CASE("training mode validation") {
    TrainingMode bad{NegativeKind::global, 0.0, PromptKind::hadamard};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    TrainingMode mixed{NegativeKind::mixed, 1.5, PromptKind::none};
    CHECK_THROWS_AS(mixed.validate(), ConfigError);
    auto split = synthetic_split(10, 20, 1);
    CHECK_THROWS_AS(Trainer(split, nullptr, tiny_config(), kWithin), UsageError);
}

TEST_CASE("checkpoint round trip") {
    testing::TempDir tmp;
    auto split = synthetic_split(30, 40, 6);
    auto cfg = tiny_config();
    cfg.epochs = 1;
    auto ca = striped(split.train.num_items, 3);
    auto m = train(split, &ca, cfg, kPrefix);
    save_model(m, tmp / "m.ebrck");
    auto back = load_model(tmp / "m.ebrck");
    CHECK(back.mode == m.mode);
    CHECK(back.num_items == m.num_items);
    CHECK(back.num_clusters == 3);
    CHECK(back.config.max_len == cfg.max_len);
    CHECK(back.params.item_table == m.params.item_table);
    CHECK(back.params.prompt_table == m.params.prompt_table);
    std::vector<ItemIndex> h = {4, 8, 15, 16};
    CHECK(bitwise_equal(back.encode_user(h, 1), m.encode_user(h, 1)));
}

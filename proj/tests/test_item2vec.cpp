#include <doctest.h>

#include <fstream>
#include <iterator>

#include "ebr/item2vec.hpp"
#include "ebr/synthetic.hpp"
#include "support.hpp"

using namespace ebr;
using Pairs = std::vector<std::pair<ItemIndex, ItemIndex>>;

namespace {

double cosine(const MatrixF& m, Eigen::Index a, Eigen::Index b) {
    return m.row(a).dot(m.row(b)) / (m.row(a).norm() * m.row(b).norm());
}

// Users draw only from one of two disjoint pools of 10 items.
Dataset two_pools(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<ItemIndex>> seqs;
    for (int u = 0; u < 200; ++u) {
        const ItemIndex base = (u % 2) * 10;
        std::vector<ItemIndex> s;
        for (int k = 0; k < 15; ++k) s.push_back(base + static_cast<ItemIndex>(rng() % 10));
        seqs.push_back(s);
    }
    return Dataset::from_sequences(seqs, 20);
}

} // namespace

TEST_CASE("skipgram pairs") {
    std::vector<ItemIndex> abc = {0, 1, 2};
    CHECK(skipgram_pairs(abc, 1) == Pairs{{0, 1}, {1, 0}, {1, 2}, {2, 1}});
    std::vector<ItemIndex> a = {0};
    CHECK(skipgram_pairs(a, 3).empty());
    auto w2 = skipgram_pairs(abc, 2);
    CHECK(w2.size() == 6);
    CHECK(std::count(w2.begin(), w2.end(), std::pair<ItemIndex, ItemIndex>{0, 2}) == 1);
    CHECK(std::count(w2.begin(), w2.end(), std::pair<ItemIndex, ItemIndex>{2, 0}) == 1);
}

TEST_CASE("config validation") {
    Item2VecConfig c;
    c.dim = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.window = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.negatives_per_pair = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.lr = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("disjoint pools separate in embedding space") {
    Item2VecConfig cfg;
    cfg.dim = 16;
    cfg.epochs = 5;
    auto emb = train_item2vec(two_pools(1), cfg);
    double intra = 0, inter = 0;
    int ni = 0, nx = 0;
    for (Eigen::Index a = 0; a < 20; ++a)
        for (Eigen::Index b = a + 1; b < 20; ++b) {
            if ((a < 10) == (b < 10)) intra += cosine(emb.values, a, b), ++ni;
            else inter += cosine(emb.values, a, b), ++nx;
        }
    intra /= ni;
    inter /= nx;
    MESSAGE("intra " << intra << " inter " << inter);
    CHECK(intra - inter > 0.2);
}

TEST_CASE("single-item corpus") {
    auto d = Dataset::from_sequences({{0}, {0, 0}}, 1);
    auto emb = train_item2vec(d, {});
    CHECK(emb.rows() == 1);
    CHECK(emb.all_finite());
}

TEST_CASE("determinism for a fixed seed and worker count") {
    auto d = two_pools(2);
    for (std::size_t workers : {1, 3}) {
        Item2VecConfig cfg;
        cfg.workers = workers;
        cfg.epochs = 2;
        auto a = train_item2vec(d, cfg), b = train_item2vec(d, cfg);
        CHECK(a.values == b.values);
    }
}

TEST_CASE("property: finite, non-zero rows and decreasing loss") {
    SyntheticConfig sc;
    sc.users = 100;
    sc.items = 40;
    auto d = make_synthetic(sc).data;
    for (std::uint64_t seed : {1, 2, 3}) {
        Item2VecConfig cfg;
        cfg.seed = seed;
        cfg.epochs = 4;
        Item2VecStats stats;
        auto emb = train_item2vec(d, cfg, &stats);
        CHECK(emb.all_finite());
        CHECK(emb.rows() == d.num_items);
        for (Eigen::Index i = 0; i < emb.values.rows(); ++i) CHECK(emb.values.row(i).norm() > 0);
        REQUIRE(stats.epoch_loss.size() == 4);
        CHECK(stats.epoch_loss.back() < stats.epoch_loss.front());
    }
}

TEST_CASE("diverging learning rate raises") {
    Item2VecConfig cfg;
    cfg.lr = 1e30;
    CHECK_THROWS_AS(train_item2vec(two_pools(3), cfg), DivergedError);
}

TEST_CASE("embedding file layout and round trip") {
    testing::TempDir tmp;
    EmbeddingMatrix e;
    e.values.resize(2, 3);
    e.values << 1.0f, -2.0f, 0.5f, 3.0f, 0.0f, 1.25f;
    save_embeddings(e, tmp / "e.bin");
    std::ifstream in(tmp / "e.bin", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    REQUIRE(bytes.size() == 5 + 8 + 6 * 4);
    CHECK(bytes.substr(0, 5) == "EBRV1");
    CHECK(bytes.substr(5, 8) == std::string("\x02\x00\x00\x00\x03\x00\x00\x00", 8));
    // 1.0f = 0x3f800000, -2.0f = 0xc0000000
    CHECK(bytes.substr(13, 8) == std::string("\x00\x00\x80\x3f\x00\x00\x00\xc0", 8));
    CHECK(load_embeddings(tmp / "e.bin").values == e.values);

    testing::write_file(tmp / "bad.bin", "EBRV1\x02\x00\x00\x00");
    CHECK_THROWS_AS(load_embeddings(tmp / "bad.bin"), InputError);
}

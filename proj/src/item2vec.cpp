#include "ebr/item2vec.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ebr/binary_io.hpp"

namespace ebr {

namespace {

constexpr std::string_view kEmbeddingMagic = "EBRV1";

// Cumulative unigram^(3/4) distribution sampled by binary search.
class NegativeTable {
public:
    explicit NegativeTable(const std::vector<std::size_t>& counts) {
        cdf_.reserve(counts.size());
        double acc = 0;
        for (std::size_t c : counts) {
            acc += std::pow(static_cast<double>(c), 0.75);
            cdf_.push_back(acc);
        }
        total_ = acc;
    }

    ItemIndex sample(Rng& rng) const {
        double r = std::uniform_real_distribution<double>(0.0, total_)(rng);
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), r);
        if (it == cdf_.end()) --it;
        return static_cast<ItemIndex>(it - cdf_.begin());
    }

private:
    std::vector<double> cdf_;
    double total_ = 0;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

struct Tables {
    MatrixF center;
    MatrixF context;
};

// One pass of SGNS over the given users; returns (sum loss, pair count).
std::pair<double, std::size_t> train_shard(Tables& t, const Dataset& d, const std::vector<UserIndex>& users,
                                           const Item2VecConfig& cfg, const NegativeTable& negs, Rng& rng,
                                           std::size_t& global_step, std::size_t total_steps,
                                           std::size_t step_offset) {
    const auto dim = static_cast<Eigen::Index>(cfg.dim);
    Eigen::VectorXf grad_center(dim);
    double loss = 0;
    std::size_t pairs = 0;
    for (UserIndex u : users) {
        const auto& seq = d.sequences[u];
        const std::size_t n = seq.size();
        for (std::size_t p = 0; p < n; ++p) {
            std::size_t lo = p >= cfg.window ? p - cfg.window : 0;
            std::size_t hi = std::min(n - 1, p + cfg.window);
            for (std::size_t q = lo; q <= hi; ++q) {
                if (q == p) continue;
                double progress = static_cast<double>(step_offset + global_step) / static_cast<double>(total_steps);
                float lr = static_cast<float>(cfg.lr * std::max(1e-4, 1.0 - progress));
                ++global_step;
                ItemIndex center = seq[p];
                ItemIndex context = seq[q];
                auto v = t.center.row(center);
                grad_center.setZero();
                double pair_loss = 0;
                for (std::size_t k = 0; k <= cfg.negatives_per_pair; ++k) {
                    ItemIndex target;
                    float label;
                    if (k == 0) {
                        target = context;
                        label = 1.0f;
                    } else {
                        target = negs.sample(rng);
                        if (target == context) continue;
                        label = 0.0f;
                    }
                    auto ctx = t.context.row(target);
                    double score = v.dot(ctx);
                    pair_loss -= label > 0 ? log_sigmoid(score) : log_sigmoid(-score);
                    float g = lr * (label - static_cast<float>(sigmoid(score)));
                    grad_center += g * ctx.transpose();
                    ctx += g * v;
                }
                v += grad_center.transpose();
                if (!std::isfinite(pair_loss)) throw DivergedError(step_offset + global_step, "item2vec loss is not finite");
                loss += pair_loss;
                ++pairs;
            }
        }
    }
    return {loss, pairs};
}

} // namespace

void save_embeddings(const EmbeddingMatrix& emb, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    io::Writer w(out);
    w.bytes(kEmbeddingMagic);
    w.u32(static_cast<std::uint32_t>(emb.rows()));
    w.u32(static_cast<std::uint32_t>(emb.dim()));
    w.f32s({emb.values.data(), static_cast<std::size_t>(emb.values.size())});
    if (!out) throw InputError("write failed: " + path.string());
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    io::Reader r(in, path.string());
    r.expect_magic(kEmbeddingMagic);
    std::uint32_t rows = r.u32();
    std::uint32_t dim = r.u32();
    EmbeddingMatrix emb{MatrixF(rows, dim)};
    r.f32s({emb.values.data(), static_cast<std::size_t>(emb.values.size())});
    return emb;
}

void Item2VecConfig::validate() const {
    if (dim < 1) throw ConfigError("item2vec: dim must be >= 1");
    if (window < 1) throw ConfigError("item2vec: window must be >= 1");
    if (negatives_per_pair < 1) throw ConfigError("item2vec: negatives_per_pair must be >= 1");
    if (!(lr > 0)) throw ConfigError("item2vec: lr must be > 0");
    if (workers < 1) throw ConfigError("item2vec: workers must be >= 1");
}

std::vector<std::pair<ItemIndex, ItemIndex>> skipgram_pairs(std::span<const ItemIndex> sequence,
                                                            std::size_t window) {
    std::vector<std::pair<ItemIndex, ItemIndex>> out;
    const std::size_t n = sequence.size();
    for (std::size_t p = 0; p < n; ++p) {
        std::size_t lo = p >= window ? p - window : 0;
        std::size_t hi = std::min(n - 1, p + window);
        for (std::size_t q = lo; q <= hi; ++q)
            if (q != p) out.emplace_back(sequence[p], sequence[q]);
    }
    return out;
}

EmbeddingMatrix train_item2vec(const Dataset& d, const Item2VecConfig& cfg, Item2VecStats* stats) {
    cfg.validate();
    if (d.num_users == 0 || d.num_items == 0) throw EmptyDatasetError("item2vec: empty dataset");

    std::vector<std::size_t> counts(d.num_items, 0);
    std::size_t pairs_per_epoch = 0;
    for (const auto& seq : d.sequences) {
        for (ItemIndex i : seq) ++counts[i];
        const std::size_t n = seq.size();
        for (std::size_t p = 0; p < n; ++p) {
            std::size_t lo = p >= cfg.window ? p - cfg.window : 0;
            std::size_t hi = std::min(n - 1, p + cfg.window);
            pairs_per_epoch += hi - lo;
        }
    }
    NegativeTable negs(counts);

    Rng init_rng(cfg.seed);
    const auto rows = static_cast<Eigen::Index>(d.num_items);
    const auto dim = static_cast<Eigen::Index>(cfg.dim);
    std::uniform_real_distribution<float> init(-0.5f / static_cast<float>(cfg.dim), 0.5f / static_cast<float>(cfg.dim));
    Tables t{MatrixF(rows, dim), MatrixF::Zero(rows, dim)};
    for (Eigen::Index i = 0; i < t.center.size(); ++i) t.center.data()[i] = init(init_rng);

    std::vector<std::vector<UserIndex>> shards(cfg.workers);
    for (std::size_t u = 0; u < d.num_users; ++u) shards[u % cfg.workers].push_back(static_cast<UserIndex>(u));

    const std::size_t total_steps = std::max<std::size_t>(1, pairs_per_epoch * cfg.epochs);
    std::size_t done = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss = 0;
        std::size_t pairs = 0;
        if (cfg.workers == 1) {
            Rng rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (epoch + 1)));
            std::size_t step = 0;
            auto [l, p] = train_shard(t, d, shards[0], cfg, negs, rng, step, total_steps, done);
            loss += l;
            pairs += p;
            done += step;
        } else {
            // Each worker trains a private copy on its shard; copies are averaged
            // in fixed worker order so results depend only on the worker count.
            Tables sum{MatrixF::Zero(rows, dim), MatrixF::Zero(rows, dim)};
            std::size_t max_step = 0;
            for (std::size_t w = 0; w < cfg.workers; ++w) {
                Tables local = t;
                Rng rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (epoch + 1)) ^ (0xbf58476d1ce4e5b9ULL * (w + 1)));
                std::size_t step = 0;
                auto [l, p] = train_shard(local, d, shards[w], cfg, negs, rng, step, total_steps / cfg.workers + 1,
                                          done / cfg.workers);
                loss += l;
                pairs += p;
                max_step = std::max(max_step, step);
                sum.center += local.center;
                sum.context += local.context;
            }
            t.center = sum.center / static_cast<float>(cfg.workers);
            t.context = sum.context / static_cast<float>(cfg.workers);
            done += max_step * cfg.workers;
        }
        if (stats) stats->epoch_loss.push_back(pairs ? loss / static_cast<double>(pairs) : 0.0);
    }
    if (!t.center.allFinite()) throw DivergedError(done, "item2vec produced non-finite embeddings");
    return EmbeddingMatrix{std::move(t.center)};
}

} // namespace ebr

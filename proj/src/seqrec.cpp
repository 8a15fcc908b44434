#include "ebr/seqrec.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "ebr/checkpoint.hpp"

namespace ebr {

namespace {

template <typename T>
using MatT = typename EncoderParamsT<T>::Mat;

template <typename T>
using ColT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

template <typename T>
struct LayerNormCache {
    MatT<T> xhat;
    ColT<T> rstd;
};

constexpr double kLayerNormEps = 1e-8;

template <typename T>
MatT<T> layer_norm(const MatT<T>& x, const MatT<T>& gain, const MatT<T>& bias, LayerNormCache<T>& c) {
    const auto n = x.rows();
    const auto d = static_cast<T>(x.cols());
    c.xhat.resize(n, x.cols());
    c.rstd.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        T mean = x.row(r).sum() / d;
        auto centered = x.row(r).array() - mean;
        T var = centered.square().sum() / d;
        c.rstd(r) = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        c.xhat.row(r) = centered * c.rstd(r);
    }
    MatT<T> y = c.xhat.array().rowwise() * gain.row(0).array();
    y.rowwise() += bias.row(0);
    return y;
}

template <typename T>
MatT<T> layer_norm_backward(const MatT<T>& dy, const LayerNormCache<T>& c, const MatT<T>& gain, MatT<T>& dgain,
                            MatT<T>& dbias) {
    dgain.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    dbias.row(0) += dy.colwise().sum();
    MatT<T> dxhat = dy.array().rowwise() * gain.row(0).array();
    const auto d = static_cast<T>(dy.cols());
    MatT<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        T mean_dxhat = dxhat.row(r).sum() / d;
        T mean_dxhat_xhat = dxhat.row(r).dot(c.xhat.row(r)) / d;
        dx.row(r) = c.rstd(r) * (dxhat.row(r).array() - mean_dxhat - c.xhat.row(r).array() * mean_dxhat_xhat).matrix();
    }
    return dx;
}

template <typename T>
MatT<T> affine(const MatT<T>& x, const MatT<T>& w, const MatT<T>& b) {
    MatT<T> y = x * w;
    y.rowwise() += b.row(0);
    return y;
}

template <typename T>
MatT<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
    MatT<T> m(rows, cols);
    std::bernoulli_distribution keep(1.0 - rate);
    const T scale = static_cast<T>(1.0 / (1.0 - rate));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? scale : T(0);
    return m;
}

// Forward/backward for one sequence with activations cached between the two.
template <typename T>
class Engine {
public:
    Engine(const EncoderParamsT<T>& p, const EncoderConfig& cfg, PromptKind prompt)
        : p_(p), cfg_(cfg), prompt_(prompt), heads_(cfg.heads), head_dim_(cfg.dim / cfg.heads) {}

    std::size_t capacity() const { return cfg_.max_len - (prompt_ == PromptKind::prefix ? 1 : 0); }
    Eigen::Index prefix_rows() const { return prompt_ == PromptKind::prefix ? 1 : 0; }

    // Rows of the result: [prompt token,] one per input item.
    const MatT<T>& forward(std::span<const ItemIndex> input, std::optional<ClusterId> task, Rng* rng) {
        input_.assign(input.begin(), input.end());
        task_ = task;
        drop_ = rng != nullptr && cfg_.dropout > 0;
        const Eigen::Index pre = prefix_rows();
        const Eigen::Index lv = static_cast<Eigen::Index>(input.size()) + pre;
        const Eigen::Index d = static_cast<Eigen::Index>(cfg_.dim);
        offset_ = static_cast<Eigen::Index>(cfg_.max_len) - lv;
        const T scale = std::sqrt(static_cast<T>(cfg_.dim));

        MatT<T> e(lv, d);
        if (prompt_ == PromptKind::hadamard) emb_raw_.resize(lv, d);
        if (pre) e.row(0) = p_.prompt_table.row(*task_);
        for (Eigen::Index r = pre; r < lv; ++r) {
            auto item = p_.item_table.row(input_[r - pre] + 1);
            if (prompt_ == PromptKind::hadamard) {
                emb_raw_.row(r) = item;
                e.row(r) = item.cwiseProduct(p_.prompt_table.row(*task_));
            } else {
                e.row(r) = item;
            }
        }
        MatT<T> x = e * scale + p_.pos_table.middleRows(offset_, lv);
        if (drop_) {
            x0_mask_ = dropout_mask<T>(lv, d, cfg_.dropout, *rng);
            x = x.cwiseProduct(x0_mask_);
        }

        cache_.resize(p_.blocks.size());
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(head_dim_));
        for (std::size_t b = 0; b < p_.blocks.size(); ++b) {
            const auto& w = p_.blocks[b];
            auto& c = cache_[b];
            c.x_in = x;
            c.q_in = layer_norm<T>(x, w.ln1_gain, w.ln1_bias, c.ln1);
            c.q = affine<T>(c.q_in, w.wq, w.bq);
            c.k = affine<T>(x, w.wk, w.bk);
            c.v = affine<T>(x, w.wv, w.bv);
            c.a.resize(lv, d);
            c.probs.resize(heads_);
            c.attn_mask.resize(heads_);
            for (std::size_t h = 0; h < heads_; ++h) {
                const auto col = static_cast<Eigen::Index>(h * head_dim_);
                const auto hd = static_cast<Eigen::Index>(head_dim_);
                MatT<T> s = c.q.middleCols(col, hd) * c.k.middleCols(col, hd).transpose() * inv_sqrt;
                MatT<T>& pr = c.probs[h];
                pr.setZero(lv, lv);
                for (Eigen::Index r = 0; r < lv; ++r) {
                    T mx = s.row(r).head(r + 1).maxCoeff();
                    T sum = 0;
                    for (Eigen::Index j = 0; j <= r; ++j) {
                        pr(r, j) = std::exp(s(r, j) - mx);
                        sum += pr(r, j);
                    }
                    pr.row(r).head(r + 1) /= sum;
                }
                if (drop_) {
                    c.attn_mask[h] = dropout_mask<T>(lv, lv, cfg_.dropout, *rng);
                    c.a.middleCols(col, hd) = pr.cwiseProduct(c.attn_mask[h]) * c.v.middleCols(col, hd);
                } else {
                    c.a.middleCols(col, hd) = pr * c.v.middleCols(col, hd);
                }
            }
            c.x1 = c.q_in + affine<T>(c.a, w.wo, w.bo);
            c.x2 = layer_norm<T>(c.x1, w.ln2_gain, w.ln2_bias, c.ln2);
            c.h_pre = affine<T>(c.x2, w.w1, w.b1);
            c.h = c.h_pre.cwiseMax(T(0));
            if (drop_) {
                c.mask1 = dropout_mask<T>(lv, d, cfg_.dropout, *rng);
                c.h = c.h.cwiseProduct(c.mask1);
            }
            MatT<T> f = affine<T>(c.h, w.w2, w.b2);
            if (drop_) {
                c.mask2 = dropout_mask<T>(lv, d, cfg_.dropout, *rng);
                f = f.cwiseProduct(c.mask2);
            }
            x = c.x2 + f;
        }
        out_ = layer_norm<T>(x, p_.final_gain, p_.final_bias, final_ln_);
        return out_;
    }

    void backward(const MatT<T>& d_out, EncoderParamsT<T>& g) const {
        const Eigen::Index pre = prefix_rows();
        const Eigen::Index lv = out_.rows();
        MatT<T> dx = layer_norm_backward<T>(d_out, final_ln_, p_.final_gain, g.final_gain, g.final_bias);
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(head_dim_));
        for (std::size_t bi = p_.blocks.size(); bi-- > 0;) {
            const auto& w = p_.blocks[bi];
            auto& gw = g.blocks[bi];
            const auto& c = cache_[bi];
            // x = x2 + ffn(x2)
            MatT<T> df = drop_ ? MatT<T>(dx.cwiseProduct(c.mask2)) : dx;
            gw.w2.noalias() += c.h.transpose() * df;
            gw.b2.row(0) += df.colwise().sum();
            MatT<T> dh = df * w.w2.transpose();
            if (drop_) dh = dh.cwiseProduct(c.mask1);
            dh = (c.h_pre.array() > T(0)).select(dh, T(0));
            gw.w1.noalias() += c.x2.transpose() * dh;
            gw.b1.row(0) += dh.colwise().sum();
            MatT<T> dx2 = dx + dh * w.w1.transpose();
            MatT<T> dx1 = layer_norm_backward<T>(dx2, c.ln2, w.ln2_gain, gw.ln2_gain, gw.ln2_bias);
            // x1 = q_in + attn(q_in, x)
            MatT<T> dq_in = dx1;
            gw.wo.noalias() += c.a.transpose() * dx1;
            gw.bo.row(0) += dx1.colwise().sum();
            MatT<T> da = dx1 * w.wo.transpose();
            MatT<T> dq(lv, da.cols()), dk(lv, da.cols()), dv(lv, da.cols());
            for (std::size_t h = 0; h < heads_; ++h) {
                const auto col = static_cast<Eigen::Index>(h * head_dim_);
                const auto hd = static_cast<Eigen::Index>(head_dim_);
                const MatT<T>& pr = c.probs[h];
                MatT<T> pd = drop_ ? MatT<T>(pr.cwiseProduct(c.attn_mask[h])) : pr;
                MatT<T> dpd = da.middleCols(col, hd) * c.v.middleCols(col, hd).transpose();
                dv.middleCols(col, hd) = pd.transpose() * da.middleCols(col, hd);
                MatT<T> dp = drop_ ? MatT<T>(dpd.cwiseProduct(c.attn_mask[h])) : dpd;
                MatT<T> ds(lv, lv);
                for (Eigen::Index r = 0; r < lv; ++r) {
                    T dot = dp.row(r).dot(pr.row(r));
                    ds.row(r) = pr.row(r).array() * (dp.row(r).array() - dot);
                }
                dq.middleCols(col, hd) = ds * c.k.middleCols(col, hd) * inv_sqrt;
                dk.middleCols(col, hd) = ds.transpose() * c.q.middleCols(col, hd) * inv_sqrt;
            }
            gw.wq.noalias() += c.q_in.transpose() * dq;
            gw.bq.row(0) += dq.colwise().sum();
            dq_in.noalias() += dq * w.wq.transpose();
            gw.wk.noalias() += c.x_in.transpose() * dk;
            gw.bk.row(0) += dk.colwise().sum();
            gw.wv.noalias() += c.x_in.transpose() * dv;
            gw.bv.row(0) += dv.colwise().sum();
            MatT<T> dx_in = dk * w.wk.transpose();
            dx_in.noalias() += dv * w.wv.transpose();
            dx_in += layer_norm_backward<T>(dq_in, c.ln1, w.ln1_gain, gw.ln1_gain, gw.ln1_bias);
            dx = std::move(dx_in);
        }
        if (drop_) dx = dx.cwiseProduct(x0_mask_);
        g.pos_table.middleRows(offset_, lv) += dx;
        const T scale = std::sqrt(static_cast<T>(cfg_.dim));
        MatT<T> de = dx * scale;
        if (pre) g.prompt_table.row(*task_) += de.row(0);
        for (Eigen::Index r = pre; r < lv; ++r) {
            const auto row = input_[r - pre] + 1;
            if (prompt_ == PromptKind::hadamard) {
                g.item_table.row(row) += de.row(r).cwiseProduct(p_.prompt_table.row(*task_));
                g.prompt_table.row(*task_) += de.row(r).cwiseProduct(emb_raw_.row(r));
            } else {
                g.item_table.row(row) += de.row(r);
            }
        }
    }

private:
    struct BlockCache {
        MatT<T> x_in, q_in, q, k, v, a, x1, x2, h_pre, h, mask1, mask2;
        LayerNormCache<T> ln1, ln2;
        std::vector<MatT<T>> probs, attn_mask;
    };

    const EncoderParamsT<T>& p_;
    const EncoderConfig& cfg_;
    PromptKind prompt_;
    std::size_t heads_;
    std::size_t head_dim_;
    std::vector<ItemIndex> input_;
    std::optional<ClusterId> task_;
    bool drop_ = false;
    Eigen::Index offset_ = 0;
    MatT<T> emb_raw_, x0_mask_, out_;
    std::vector<BlockCache> cache_;
    LayerNormCache<T> final_ln_;
};

template <typename T>
MatT<T> xavier_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(rows + cols)));
    MatT<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
    return m;
}

std::span<const ItemIndex> tail(std::span<const ItemIndex> s, std::size_t n) {
    return s.size() > n ? s.subspan(s.size() - n) : s;
}

void check_task(const TrainedModel& m, std::optional<ClusterId> task) {
    if (m.mode.prompt == PromptKind::none) return;
    if (!task) throw UsageError("encode_user: model uses prompts; a task (cluster id) is required");
    if (*task >= m.num_clusters)
        throw UsageError("encode_user: task " + std::to_string(*task) + " out of range (K=" +
                         std::to_string(m.num_clusters) + ")");
}

} // namespace

std::string to_string(NegativeKind k) {
    switch (k) {
    case NegativeKind::global: return "global";
    case NegativeKind::mixed: return "mixed";
    case NegativeKind::within_cluster: return "within_cluster";
    }
    return "?";
}

std::string to_string(PromptKind p) {
    switch (p) {
    case PromptKind::none: return "none";
    case PromptKind::prefix: return "prefix";
    case PromptKind::hadamard: return "hadamard";
    }
    return "?";
}

NegativeKind parse_negative_kind(std::string_view s) {
    if (s == "global") return NegativeKind::global;
    if (s == "mixed") return NegativeKind::mixed;
    if (s == "within_cluster") return NegativeKind::within_cluster;
    throw ConfigError("unknown negative kind \"" + std::string(s) + "\"");
}

PromptKind parse_prompt_kind(std::string_view s) {
    if (s == "none") return PromptKind::none;
    if (s == "prefix") return PromptKind::prefix;
    if (s == "hadamard") return PromptKind::hadamard;
    throw ConfigError("unknown prompt kind \"" + std::string(s) + "\"");
}

void TrainingMode::validate() const {
    if (prompt != PromptKind::none && kind != NegativeKind::within_cluster)
        throw ConfigError("prompts require within_cluster negatives");
    if (kind == NegativeKind::mixed && !(mix_ratio >= 0.0 && mix_ratio <= 1.0))
        throw ConfigError("mixed mode needs mix_ratio in [0,1]");
}

void EncoderConfig::validate() const {
    if (max_len < 1) throw ConfigError("encoder: max_len must be >= 1");
    if (dim < 1) throw ConfigError("encoder: dim must be >= 1");
    if (blocks < 1) throw ConfigError("encoder: blocks must be >= 1");
    if (heads < 1 || dim % heads != 0) throw ConfigError("encoder: heads must divide dim");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder: dropout must be in [0,1)");
    if (!(lr >= 0)) throw ConfigError("encoder: lr must be >= 0");
    if (batch_size < 1) throw ConfigError("encoder: batch_size must be >= 1");
    if (eval_every < 1) throw ConfigError("encoder: eval_every must be >= 1");
}

EncoderParams init_encoder_params(const EncoderConfig& cfg, PromptKind prompt, std::size_t num_items,
                                  std::size_t num_clusters, Rng& rng) {
    cfg.validate();
    using Mat = EncoderParams::Mat;
    const auto d = static_cast<Eigen::Index>(cfg.dim);
    EncoderParams p;
    p.item_table = xavier_normal<float>(static_cast<Eigen::Index>(num_items + 1), d, rng);
    p.item_table.row(0).setZero();
    p.pos_table = xavier_normal<float>(static_cast<Eigen::Index>(cfg.max_len), d, rng);
    p.blocks.resize(cfg.blocks);
    for (auto& b : p.blocks) {
        b.ln1_gain = Mat::Ones(1, d);
        b.ln1_bias = Mat::Zero(1, d);
        b.wq = xavier_normal<float>(d, d, rng);
        b.bq = Mat::Zero(1, d);
        b.wk = xavier_normal<float>(d, d, rng);
        b.bk = Mat::Zero(1, d);
        b.wv = xavier_normal<float>(d, d, rng);
        b.bv = Mat::Zero(1, d);
        b.wo = xavier_normal<float>(d, d, rng);
        b.bo = Mat::Zero(1, d);
        b.ln2_gain = Mat::Ones(1, d);
        b.ln2_bias = Mat::Zero(1, d);
        b.w1 = xavier_normal<float>(d, d, rng);
        b.b1 = Mat::Zero(1, d);
        b.w2 = xavier_normal<float>(d, d, rng);
        b.b2 = Mat::Zero(1, d);
    }
    p.final_gain = Mat::Ones(1, d);
    p.final_bias = Mat::Zero(1, d);
    if (prompt == PromptKind::hadamard) p.prompt_table = Mat::Ones(static_cast<Eigen::Index>(num_clusters), d);
    else if (prompt == PromptKind::prefix) p.prompt_table = Mat::Zero(static_cast<Eigen::Index>(num_clusters), d);
    else p.prompt_table.resize(0, 0);
    return p;
}

template <typename T>
double loss_and_gradients(const EncoderParamsT<T>& params, const EncoderConfig& cfg, PromptKind prompt,
                          std::span<const TrainingSample> batch, EncoderParamsT<T>* grads, Rng* dropout_rng) {
    std::size_t active = 0;
    for (const auto& s : batch)
        for (ItemIndex n : s.negative)
            if (n != kNoItem) ++active;
    if (active == 0) return 0.0;
    const double inv = 1.0 / static_cast<double>(active);

    Engine<T> engine(params, cfg, prompt);
    const Eigen::Index pre = engine.prefix_rows();
    double total = 0;
    for (const auto& s : batch) {
        std::size_t n = s.input.size();
        if (n > engine.capacity()) throw UsageError("training sample longer than the encoder window");
        if (std::none_of(s.negative.begin(), s.negative.end(), [](ItemIndex i) { return i != kNoItem; })) continue;
        const MatT<T>& out = engine.forward(s.input, s.task, dropout_rng);
        MatT<T> d_out;
        if (grads) d_out.setZero(out.rows(), out.cols());
        for (std::size_t j = 0; j < n; ++j) {
            if (s.negative[j] == kNoItem) continue;
            const Eigen::Index r = static_cast<Eigen::Index>(j) + pre;
            const auto pos_row = s.positive[j] + 1;
            const auto neg_row = s.negative[j] + 1;
            double rp = static_cast<double>(out.row(r).dot(params.item_table.row(pos_row)));
            double rn = static_cast<double>(out.row(r).dot(params.item_table.row(neg_row)));
            total += softplus(-rp) + softplus(rn);
            if (!grads) continue;
            const T gp = static_cast<T>((sigmoid(rp) - 1.0) * inv);
            const T gn = static_cast<T>(sigmoid(rn) * inv);
            d_out.row(r) += gp * params.item_table.row(pos_row) + gn * params.item_table.row(neg_row);
            grads->item_table.row(pos_row) += gp * out.row(r);
            grads->item_table.row(neg_row) += gn * out.row(r);
        }
        if (grads) engine.backward(d_out, *grads);
    }
    return total * inv;
}

template double loss_and_gradients<float>(const EncoderParamsT<float>&, const EncoderConfig&, PromptKind,
                                          std::span<const TrainingSample>, EncoderParamsT<float>*, Rng*);
template double loss_and_gradients<double>(const EncoderParamsT<double>&, const EncoderConfig&, PromptKind,
                                           std::span<const TrainingSample>, EncoderParamsT<double>*, Rng*);

VectorF TrainedModel::encode_user(std::span<const ItemIndex> history, std::optional<ClusterId> task) const {
    if (history.empty()) throw UsageError("encode_user: empty history");
    check_task(*this, task);
    Engine<float> engine(params, config, mode.prompt);
    auto in = tail(history, engine.capacity());
    for (ItemIndex i : in)
        if (i >= num_items) throw IndexError("encode_user: item " + std::to_string(i) + " out of range");
    const auto& out = engine.forward(in, mode.prompt == PromptKind::none ? std::nullopt : task, nullptr);
    return out.row(out.rows() - 1).transpose();
}

MatrixF TrainedModel::encode_positions_unprompted(std::span<const ItemIndex> history) const {
    if (history.empty()) throw UsageError("encode_user: empty history");
    Engine<float> engine(params, config, PromptKind::none);
    auto in = tail(history, engine.capacity());
    for (ItemIndex i : in)
        if (i >= num_items) throw IndexError("encode_user: item " + std::to_string(i) + " out of range");
    return engine.forward(in, std::nullopt, nullptr);
}

VectorF TrainedModel::encode_user_unprompted(std::span<const ItemIndex> history) const {
    MatrixF out = encode_positions_unprompted(history);
    return out.row(out.rows() - 1).transpose();
}

double score(std::span<const float> user, std::span<const float> item) {
    if (user.size() != item.size())
        throw UsageError("score: dimension mismatch (" + std::to_string(user.size()) + " vs " +
                         std::to_string(item.size()) + ")");
    double s = 0;
    for (std::size_t i = 0; i < user.size(); ++i) s += static_cast<double>(user[i]) * static_cast<double>(item[i]);
    return s;
}

double score(const VectorF& user, const VectorF& item) {
    return score(std::span<const float>(user.data(), static_cast<std::size_t>(user.size())),
                 std::span<const float>(item.data(), static_cast<std::size_t>(item.size())));
}

bool target_in_top_m(const MatrixF& items, std::span<const float> user, ItemIndex target,
                     std::span<const ItemIndex> pool, const ItemSet& exclude, std::size_t m) {
    if (exclude.contains(target) || m == 0) return false;
    const auto d = static_cast<std::size_t>(items.cols());
    const double st = score(user, std::span<const float>(items.row(target).data(), d));
    std::size_t ahead = 0;
    auto visit = [&](ItemIndex i) {
        if (i == target || exclude.contains(i)) return true;
        double s = score(user, std::span<const float>(items.row(i).data(), d));
        if (s > st || (s == st && i < target)) return ++ahead < m;
        return true;
    };
    if (pool.empty()) {
        for (Eigen::Index i = 0; i < items.rows(); ++i)
            if (!visit(static_cast<ItemIndex>(i))) return false;
    } else {
        for (ItemIndex i : pool)
            if (!visit(i)) return false;
    }
    return true;
}

double bce_loss(double r_pos, std::span<const double> r_negs) {
    double neg = 0;
    for (double r : r_negs) neg += softplus(r);
    if (!r_negs.empty()) neg /= static_cast<double>(r_negs.size());
    return softplus(-r_pos) + neg;
}

ItemSet::ItemSet(std::span<const ItemIndex> items) : items_(items.begin(), items.end()) {
    std::sort(items_.begin(), items_.end());
    items_.erase(std::unique(items_.begin(), items_.end()), items_.end());
}

std::optional<ItemIndex> sample_negative(const TrainingMode& mode, ItemIndex positive, const ItemSet& user_hist,
                                         std::size_t num_items, const ClusterAssignment* ca, Rng& rng) {
    constexpr int kRetries = 32;
    bool within = mode.kind == NegativeKind::within_cluster;
    if (mode.kind == NegativeKind::mixed) {
        within = mode.mix_ratio >= 1.0 ? true
                 : mode.mix_ratio <= 0.0 ? false
                                         : std::bernoulli_distribution(mode.mix_ratio)(rng);
    }
    if (within) {
        if (!ca) throw UsageError("sample_negative: cluster assignment required");
        const auto& pool = ca->members(cluster_of(*ca, positive));
        for (int t = 0; t < kRetries; ++t) {
            ItemIndex c = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
            if (!user_hist.contains(c) && c != positive) return c;
        }
        std::vector<ItemIndex> eligible;
        for (ItemIndex c : pool)
            if (!user_hist.contains(c) && c != positive) eligible.push_back(c);
        if (eligible.empty()) return std::nullopt;
        return eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)];
    }
    if (num_items == 0) return std::nullopt;
    for (int t = 0; t < kRetries; ++t) {
        auto c = static_cast<ItemIndex>(std::uniform_int_distribution<std::size_t>(0, num_items - 1)(rng));
        if (!user_hist.contains(c) && c != positive) return c;
    }
    std::vector<ItemIndex> eligible;
    for (std::size_t c = 0; c < num_items; ++c)
        if (!user_hist.contains(static_cast<ItemIndex>(c)) && c != positive) eligible.push_back(static_cast<ItemIndex>(c));
    if (eligible.empty()) return std::nullopt;
    return eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)];
}

Trainer::Trainer(const Split& split, const ClusterAssignment* ca, const EncoderConfig& cfg, const TrainingMode& mode)
    : split_(split), ca_(ca), cfg_(cfg), mode_(mode), rng_(cfg.seed) {
    cfg_.validate();
    mode_.validate();
    const auto& train = split_.train;
    if (train.num_users == 0 || train.num_items == 0) throw EmptyDatasetError("train: empty dataset");
    if (mode_.needs_clusters()) {
        if (!ca_) throw UsageError("train: mode " + to_string(mode_.kind) + " requires a cluster assignment");
        if (ca_->num_items() != train.num_items) throw InputError("train: cluster assignment does not cover all items");
    }
    num_clusters_ = ca_ ? ca_->k() : 0;
    params_ = init_encoder_params(cfg_, mode_.prompt, train.num_items, num_clusters_, rng_);
    grads_ = params_.zeros_like();
    adam_m_ = params_.zeros_like();
    adam_v_ = params_.zeros_like();

    const std::size_t cap = cfg_.max_len - (mode_.prompt == PromptKind::prefix ? 1 : 0);
    if (cap == 0) throw ConfigError("encoder: max_len must be >= 2 with prefix prompts");
    user_items_.reserve(train.num_users);
    for (std::size_t u = 0; u < train.num_users; ++u) {
        const auto& seq = train.sequences[u];
        user_items_.emplace_back(seq);
        if (seq.size() < 2) continue;
        if (mode_.prompt == PromptKind::none) {
            samples_.push_back({static_cast<UserIndex>(u), std::nullopt});
            continue;
        }
        std::size_t m = std::min(seq.size() - 1, cap);
        std::vector<ClusterId> tasks;
        for (std::size_t j = seq.size() - m; j < seq.size(); ++j) tasks.push_back(cluster_of(*ca_, seq[j]));
        std::sort(tasks.begin(), tasks.end());
        tasks.erase(std::unique(tasks.begin(), tasks.end()), tasks.end());
        for (ClusterId k : tasks) samples_.push_back({static_cast<UserIndex>(u), k});
    }
    if (samples_.empty()) throw EmptyDatasetError("train: no user has at least two training interactions");
}

TrainingSample Trainer::make_sample(const Slot& s) {
    const auto& seq = split_.train.sequences[s.user];
    const std::size_t cap = cfg_.max_len - (mode_.prompt == PromptKind::prefix ? 1 : 0);
    const std::size_t m = std::min(seq.size() - 1, cap);
    TrainingSample out;
    out.task = s.task;
    out.input.assign(seq.end() - static_cast<std::ptrdiff_t>(m) - 1, seq.end() - 1);
    out.positive.assign(seq.end() - static_cast<std::ptrdiff_t>(m), seq.end());
    out.negative.assign(m, kNoItem);
    for (std::size_t j = 0; j < m; ++j) {
        if (s.task && cluster_of(*ca_, out.positive[j]) != *s.task) continue;
        auto neg = sample_negative(mode_, out.positive[j], user_items_[s.user], split_.train.num_items, ca_, rng_);
        if (neg) out.negative[j] = *neg;
    }
    return out;
}

void Trainer::start_epoch() {
    order_.resize(samples_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
    epoch_loss_sum_ = 0;
    epoch_batches_ = 0;
}

void Trainer::adam_update() {
    ++adam_t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(adam_t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(adam_t_));
    const float step = static_cast<float>(cfg_.lr / bc1);
    const float sqrt_bc2 = static_cast<float>(std::sqrt(bc2));
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float eps = static_cast<float>(cfg_.adam_eps);
    std::vector<EncoderParams::Mat*> p, g, m, v;
    params_.visit([&](const std::string&, EncoderParams::Mat& t) { p.push_back(&t); });
    grads_.visit([&](const std::string&, EncoderParams::Mat& t) { g.push_back(&t); });
    adam_m_.visit([&](const std::string&, EncoderParams::Mat& t) { m.push_back(&t); });
    adam_v_.visit([&](const std::string&, EncoderParams::Mat& t) { v.push_back(&t); });
    for (std::size_t i = 0; i < p.size(); ++i) {
        auto ga = g[i]->array();
        m[i]->array() = b1 * m[i]->array() + (1.0f - b1) * ga;
        v[i]->array() = b2 * v[i]->array() + (1.0f - b2) * ga.square();
        p[i]->array() -= step * m[i]->array() / (v[i]->array().sqrt() / sqrt_bc2 + eps);
        g[i]->setZero();
    }
}

std::size_t Trainer::step() {
    if (order_.empty() || cursor_ >= order_.size()) start_epoch();
    const std::size_t n = std::min(cfg_.batch_size, order_.size() - cursor_);
    batch_.clear();
    for (std::size_t i = 0; i < n; ++i) batch_.push_back(make_sample(samples_[order_[cursor_ + i]]));
    Rng* drop = cfg_.dropout > 0 ? &rng_ : nullptr;
    double loss = loss_and_gradients<float>(params_, cfg_, mode_.prompt, batch_, &grads_, drop);
    if (!std::isfinite(loss)) throw DivergedError(total_steps_, "non-finite training loss");
    adam_update();
    cursor_ += n;
    ++total_steps_;
    total_samples_ += n;
    epoch_loss_sum_ += loss;
    ++epoch_batches_;
    if (cursor_ >= order_.size()) ++epoch_;
    return n;
}

double Trainer::run_epoch() {
    if (order_.empty() || cursor_ >= order_.size()) start_epoch();
    const std::size_t e = epoch_;
    while (epoch_ == e) step();
    return epoch_batches_ ? epoch_loss_sum_ / static_cast<double>(epoch_batches_) : 0.0;
}

TrainedModel Trainer::snapshot() const {
    TrainedModel m;
    m.params = params_;
    m.config = cfg_;
    m.mode = mode_;
    m.num_items = split_.train.num_items;
    m.num_clusters = num_clusters_;
    m.report.steps = total_steps_;
    m.report.samples = total_samples_;
    return m;
}

double Trainer::validation_metric(const TrainedModel& m) const {
    const auto& users = split_.eligible_users;
    if (users.empty()) return 0.0;
    std::size_t count = users.size();
    std::size_t stride = 1;
    if (cfg_.eval_users > 0 && cfg_.eval_users < count) {
        stride = count / cfg_.eval_users;
        count = cfg_.eval_users;
    }
    const MatrixF items = m.item_embeddings();
    const auto d = static_cast<std::size_t>(items.cols());
    std::size_t hits = 0;
    for (std::size_t k = 0; k < count; ++k) {
        UserIndex u = users[k * stride];
        const auto& hist = split_.train.sequences[u];
        ItemIndex target = split_.valid_target[u];
        if (mode_.kind == NegativeKind::within_cluster) {
            ClusterId c = cluster_of(*ca_, target);
            VectorF e = m.encode_user(hist, mode_.prompt == PromptKind::none ? std::nullopt : std::optional(c));
            hits += target_in_top_m(items, {e.data(), d}, target, ca_->members(c), user_items_[u], cfg_.eval_m);
        } else {
            VectorF e = m.encode_user(hist);
            hits += target_in_top_m(items, {e.data(), d}, target, {}, user_items_[u], cfg_.eval_m);
        }
    }
    return static_cast<double>(hits) / static_cast<double>(count);
}

TrainedModel train(const Split& split, const ClusterAssignment* ca, const EncoderConfig& cfg, const TrainingMode& mode) {
    Trainer tr(split, ca, cfg, mode);
    TrainingReport report;
    double baseline = tr.validation_metric(tr.snapshot());
    report.validation.emplace_back(0, baseline);
    report.best_metric = baseline;
    report.best_epoch = 0;
    bool improved = false;
    EncoderParams best = tr.params_;
    for (std::size_t epoch = 1; epoch <= tr.cfg_.epochs; ++epoch) {
        report.epoch_loss.push_back(tr.run_epoch());
        if (epoch % tr.cfg_.eval_every != 0 && epoch != tr.cfg_.epochs) continue;
        double metric = tr.validation_metric(tr.snapshot());
        report.validation.emplace_back(epoch, metric);
        if (metric > report.best_metric) {
            report.best_metric = metric;
            report.best_epoch = epoch;
            best = tr.params_;
            improved = true;
        } else if (epoch - report.best_epoch >= tr.cfg_.patience) {
            break;
        }
    }
    TrainedModel out = tr.snapshot();
    report.steps = out.report.steps;
    report.samples = out.report.samples;
    report.validation_improved = improved;
    if (improved) out.params = std::move(best);
    else std::cerr << "warning: validation recall never improved; returning the last checkpoint\n";
    out.report = std::move(report);
    return out;
}

GradientCheckReport gradient_check(const EncoderConfig& cfg_in, const TrainingMode& mode, const GradientProbe& probe) {
    EncoderConfig cfg = cfg_in;
    cfg.dropout = 0;
    cfg.validate();
    mode.validate();
    if (cfg.dim > 8 || cfg.max_len > 6) throw UsageError("gradient_check: use tiny dimensions (d <= 8, n <= 6)");
    if (mode.needs_clusters() && !probe.clusters) throw UsageError("gradient_check: mode requires clusters");
    const ClusterAssignment* ca = probe.clusters ? &*probe.clusters : nullptr;
    const std::size_t k = ca ? ca->k() : 0;

    Rng rng(probe.seed);
    EncoderParamsT<double> params = init_encoder_params(cfg, mode.prompt, probe.num_items, k, rng).cast<double>();
    // Move away from the symmetric initial point so every path carries signal.
    std::normal_distribution<double> noise(0.0, 0.2);
    params.visit([&](const std::string& name, EncoderParamsT<double>::Mat& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += noise(rng);
        if (name == "item_table") m.row(0).setZero();
    });

    const std::size_t cap = cfg.max_len - (mode.prompt == PromptKind::prefix ? 1 : 0);
    std::vector<TrainingSample> batch;
    for (const auto& seq : probe.sequences) {
        if (seq.size() < 2) continue;
        ItemSet hist(seq);
        std::size_t m = std::min(seq.size() - 1, cap);
        TrainingSample base;
        base.input.assign(seq.end() - static_cast<std::ptrdiff_t>(m) - 1, seq.end() - 1);
        base.positive.assign(seq.end() - static_cast<std::ptrdiff_t>(m), seq.end());
        base.negative.assign(m, kNoItem);
        for (std::size_t j = 0; j < m; ++j) {
            auto neg = sample_negative(mode, base.positive[j], hist, probe.num_items, ca, rng);
            if (neg) base.negative[j] = *neg;
        }
        if (mode.prompt == PromptKind::none) {
            batch.push_back(std::move(base));
            continue;
        }
        std::vector<ClusterId> tasks;
        for (ItemIndex p : base.positive) tasks.push_back(cluster_of(*ca, p));
        std::sort(tasks.begin(), tasks.end());
        tasks.erase(std::unique(tasks.begin(), tasks.end()), tasks.end());
        for (ClusterId t : tasks) {
            TrainingSample s = base;
            s.task = t;
            for (std::size_t j = 0; j < m; ++j)
                if (cluster_of(*ca, s.positive[j]) != t) s.negative[j] = kNoItem;
            batch.push_back(std::move(s));
        }
    }

    EncoderParamsT<double> analytic = params.zeros_like();
    loss_and_gradients<double>(params, cfg, mode.prompt, batch, &analytic, nullptr);

    std::vector<std::pair<std::string, EncoderParamsT<double>::Mat*>> tensors;
    params.visit([&](const std::string& n, EncoderParamsT<double>::Mat& m) { tensors.emplace_back(n, &m); });
    std::vector<const EncoderParamsT<double>::Mat*> grads;
    analytic.visit([&](const std::string&, const EncoderParamsT<double>::Mat& m) { grads.push_back(&m); });

    constexpr double h = 1e-4;
    GradientCheckReport report;
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        auto& m = *tensors[t].second;
        EncoderParamsT<double>::Mat numeric(m.rows(), m.cols());
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const double orig = m.data()[i];
            m.data()[i] = orig + h;
            double lp = loss_and_gradients<double>(params, cfg, mode.prompt, batch, nullptr, nullptr);
            m.data()[i] = orig - h;
            double lm = loss_and_gradients<double>(params, cfg, mode.prompt, batch, nullptr, nullptr);
            m.data()[i] = orig;
            numeric.data()[i] = (lp - lm) / (2 * h);
        }
        const auto& a = *grads[t];
        double denom = std::max({a.norm(), numeric.norm(), 1e-6});
        double rel = (a - numeric).norm() / denom;
        report.per_tensor[tensors[t].first] = rel;
        report.max_relative_error = std::max(report.max_relative_error, rel);
    }
    return report;
}

void save_model(const TrainedModel& m, const std::filesystem::path& path) {
    Checkpoint ck;
    ck.meta = {{"kind", "seqrec"},
               {"num_items", m.num_items},
               {"num_clusters", m.num_clusters},
               {"mode", {{"kind", to_string(m.mode.kind)}, {"mix_ratio", m.mode.mix_ratio}, {"prompt", to_string(m.mode.prompt)}}},
               {"config",
                {{"max_len", m.config.max_len}, {"dim", m.config.dim}, {"blocks", m.config.blocks},
                 {"heads", m.config.heads}, {"dropout", m.config.dropout}, {"lr", m.config.lr},
                 {"batch_size", m.config.batch_size}, {"epochs", m.config.epochs}, {"seed", m.config.seed}}},
               {"report",
                {{"best_epoch", m.report.best_epoch}, {"best_metric", m.report.best_metric},
                 {"validation_improved", m.report.validation_improved}, {"epoch_loss", m.report.epoch_loss},
                 {"steps", m.report.steps}, {"samples", m.report.samples}}}};
    m.params.visit([&](const std::string& name, const EncoderParams::Mat& t) { ck.add(name, t); });
    save_checkpoint(ck, path);
}

TrainedModel load_model(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.meta.value("kind", "") != "seqrec") throw InputError(path.string() + ": not a seqrec checkpoint");
    TrainedModel m;
    const auto& meta = ck.meta;
    m.num_items = meta.at("num_items").get<std::size_t>();
    m.num_clusters = meta.at("num_clusters").get<std::size_t>();
    m.mode.kind = parse_negative_kind(meta.at("mode").at("kind").get<std::string>());
    m.mode.mix_ratio = meta.at("mode").at("mix_ratio").get<double>();
    m.mode.prompt = parse_prompt_kind(meta.at("mode").at("prompt").get<std::string>());
    const auto& c = meta.at("config");
    m.config.max_len = c.at("max_len");
    m.config.dim = c.at("dim");
    m.config.blocks = c.at("blocks");
    m.config.heads = c.at("heads");
    m.config.dropout = c.at("dropout");
    m.config.lr = c.at("lr");
    m.config.batch_size = c.at("batch_size");
    m.config.epochs = c.at("epochs");
    m.config.seed = c.at("seed");
    if (meta.contains("report")) {
        const auto& r = meta.at("report");
        m.report.best_epoch = r.at("best_epoch");
        m.report.best_metric = r.at("best_metric");
        m.report.validation_improved = r.at("validation_improved");
        m.report.epoch_loss = r.at("epoch_loss").get<std::vector<double>>();
        m.report.steps = r.at("steps");
        m.report.samples = r.at("samples");
    }
    m.params.blocks.resize(m.config.blocks);
    if (m.mode.prompt != PromptKind::none) m.params.prompt_table.resize(1, 1);
    m.params.visit([&](const std::string& name, EncoderParams::Mat& t) { t = ck.matrix(name); });
    return m;
}

} // namespace ebr

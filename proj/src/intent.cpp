#include "ebr/intent.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "ebr/checkpoint.hpp"

namespace ebr {

namespace {

struct Examples {
    MatrixF x;
    std::vector<ClusterId> y;
};

void logits(const IntentHead& h, const float* x, std::vector<double>& out) {
    const auto k = h.weight.rows(), d = h.weight.cols();
    out.resize(static_cast<std::size_t>(k));
    for (Eigen::Index c = 0; c < k; ++c) {
        double s = h.bias[c];
        const float* w = h.weight.row(c).data();
        for (Eigen::Index j = 0; j < d; ++j) s += static_cast<double>(w[j]) * x[j];
        out[c] = s;
    }
}

double mean_loglik(const IntentHead& h, const Examples& ex) {
    if (ex.y.empty()) return 0;
    std::vector<double> z;
    double sum = 0;
    for (std::size_t i = 0; i < ex.y.size(); ++i) {
        logits(h, ex.x.row(static_cast<Eigen::Index>(i)).data(), z);
        double mx = *std::max_element(z.begin(), z.end());
        double lse = 0;
        for (double v : z) lse += std::exp(v - mx);
        sum += z[ex.y[i]] - mx - std::log(lse);
    }
    return sum / static_cast<double>(ex.y.size());
}

} // namespace

void IntentConfig::validate() const {
    if (!(lr > 0)) throw ConfigError("intent: lr must be > 0");
    if (batch_size < 1) throw ConfigError("intent: batch_size must be >= 1");
    if (max_positions_per_user < 1) throw ConfigError("intent: max_positions_per_user must be >= 1");
}

std::vector<double> softmax(std::span<const double> z) {
    std::vector<double> p(z.size());
    if (z.empty()) return p;
    double mx = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
    for (double& v : p) v /= s;
    return p;
}

IntentHead train_intent(const Split& split, const ClusterAssignment& ca, std::shared_ptr<const TrainedModel> backbone,
                        const IntentConfig& cfg) {
    cfg.validate();
    if (!backbone) throw UsageError("train_intent: backbone required");
    const auto& train = split.train;
    if (ca.num_items() != train.num_items) throw InputError("train_intent: cluster assignment does not cover all items");
    const std::size_t k = ca.k();
    const auto d = static_cast<Eigen::Index>(backbone->config.dim);

    IntentHead h;
    h.backbone = backbone;
    h.weight = MatrixF::Zero(static_cast<Eigen::Index>(k), d);
    h.bias = VectorF::Zero(static_cast<Eigen::Index>(k));

    // Features: per-position hidden states of each training sequence, target
    // is the cluster of the following item.
    Examples tr, va;
    std::vector<MatrixF> chunks;
    std::size_t total = 0;
    for (std::size_t u = 0; u < train.num_users; ++u) {
        const auto& seq = train.sequences[u];
        if (seq.size() < 2) continue;
        std::span<const ItemIndex> input(seq.data(), seq.size() - 1);
        MatrixF hs = backbone->encode_positions_unprompted(input);
        const std::size_t rows = static_cast<std::size_t>(hs.rows());
        const std::size_t keep = std::min(rows, cfg.max_positions_per_user);
        chunks.push_back(hs.bottomRows(static_cast<Eigen::Index>(keep)));
        for (std::size_t j = rows - keep; j < rows; ++j)
            tr.y.push_back(cluster_of(ca, seq[seq.size() - rows + j]));
        total += keep;
    }
    tr.x.resize(static_cast<Eigen::Index>(total), d);
    Eigen::Index at = 0;
    for (const auto& c : chunks) {
        tr.x.middleRows(at, c.rows()) = c;
        at += c.rows();
    }
    chunks.clear();
    for (UserIndex u : split.eligible_users) {
        VectorF f = backbone->encode_user_unprompted(train.sequences[u]);
        chunks.push_back(f.transpose());
        va.y.push_back(cluster_of(ca, split.valid_target[u]));
    }
    va.x.resize(static_cast<Eigen::Index>(chunks.size()), d);
    for (std::size_t i = 0; i < chunks.size(); ++i) va.x.row(static_cast<Eigen::Index>(i)) = chunks[i];
    h.report.examples = tr.y.size();
    if (k == 1 || tr.y.empty()) return h;

    // Mini-batch Adam on mean cross-entropy.
    MatrixF mw = MatrixF::Zero(h.weight.rows(), d), vw = mw, gw = mw;
    VectorF mb = VectorF::Zero(h.bias.size()), vb = mb, gb = mb;
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::size_t t = 0;
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(tr.y.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const bool has_valid = !va.y.empty();
    double best = has_valid ? mean_loglik(h, va) : -mean_loglik(h, tr);
    h.report.validation_loglik.push_back(has_valid ? best : 0.0);
    MatrixF best_w = h.weight;
    VectorF best_b = h.bias;
    std::vector<double> z;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double inv = 1.0 / static_cast<double>(end - start);
            gw.setZero();
            gb.setZero();
            for (std::size_t i = start; i < end; ++i) {
                const auto row = static_cast<Eigen::Index>(order[i]);
                const float* x = tr.x.row(row).data();
                logits(h, x, z);
                auto p = softmax(z);
                loss_sum -= std::log(std::max(p[tr.y[order[i]]], 1e-300));
                p[tr.y[order[i]]] -= 1.0;
                for (std::size_t c = 0; c < k; ++c) {
                    const auto g = static_cast<float>(p[c] * inv);
                    gb[static_cast<Eigen::Index>(c)] += g;
                    gw.row(static_cast<Eigen::Index>(c)) += g * tr.x.row(row);
                }
            }
            ++t;
            const double bc1 = 1 - std::pow(b1, static_cast<double>(t)), bc2 = 1 - std::pow(b2, static_cast<double>(t));
            const auto step = static_cast<float>(cfg.lr / bc1), sb = static_cast<float>(std::sqrt(bc2));
            mw = static_cast<float>(b1) * mw + static_cast<float>(1 - b1) * gw;
            vw = static_cast<float>(b2) * vw + static_cast<float>(1 - b2) * gw.cwiseAbs2();
            mb = static_cast<float>(b1) * mb + static_cast<float>(1 - b1) * gb;
            vb = static_cast<float>(b2) * vb + static_cast<float>(1 - b2) * gb.cwiseAbs2();
            h.weight.array() -= step * mw.array() / (vw.array().sqrt() / sb + static_cast<float>(eps));
            h.bias.array() -= step * mb.array() / (vb.array().sqrt() / sb + static_cast<float>(eps));
        }
        const double loss = loss_sum / static_cast<double>(order.size());
        if (!std::isfinite(loss) || !h.weight.allFinite()) throw DivergedError(t, "intent loss is not finite");
        h.report.epoch_loss.push_back(loss);
        const double metric = has_valid ? mean_loglik(h, va) : -loss;
        h.report.validation_loglik.push_back(has_valid ? metric : 0.0);
        if (metric > best) {
            best = metric;
            best_w = h.weight;
            best_b = h.bias;
            h.report.best_epoch = epoch;
        } else if (epoch - h.report.best_epoch >= cfg.patience) {
            break;
        }
    }
    h.weight = std::move(best_w);
    h.bias = std::move(best_b);
    return h;
}

std::vector<double> predict_intent_from_features(const IntentHead& h, const VectorF& features) {
    if (features.size() != h.weight.cols()) throw UsageError("predict_intent: feature dimension mismatch");
    std::vector<double> z;
    logits(h, features.data(), z);
    return softmax(z);
}

std::vector<double> predict_intent(const IntentHead& h, std::span<const ItemIndex> history) {
    if (!h.backbone) throw UsageError("predict_intent: head has no backbone");
    return predict_intent_from_features(h, h.backbone->encode_user_unprompted(history));
}

void save_intent(const IntentHead& h, const std::filesystem::path& path) {
    Checkpoint ck;
    ck.meta = {{"kind", "intent"},
               {"backbone", h.backbone_name},
               {"report",
                {{"epoch_loss", h.report.epoch_loss},
                 {"validation_loglik", h.report.validation_loglik},
                 {"best_epoch", h.report.best_epoch},
                 {"examples", h.report.examples}}}};
    ck.add("weight", h.weight);
    ck.add("bias", h.bias.transpose());
    save_checkpoint(ck, path);
}

IntentHead load_intent(const std::filesystem::path& path, std::shared_ptr<const TrainedModel> backbone) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.meta.value("kind", "") != "intent") throw InputError(path.string() + ": not an intent checkpoint");
    IntentHead h;
    h.weight = ck.matrix("weight");
    h.bias = ck.matrix("bias").row(0).transpose();
    h.backbone_name = ck.meta.value("backbone", "");
    const auto& r = ck.meta.at("report");
    h.report.epoch_loss = r.at("epoch_loss").get<std::vector<double>>();
    h.report.validation_loglik = r.at("validation_loglik").get<std::vector<double>>();
    h.report.best_epoch = r.at("best_epoch");
    h.report.examples = r.at("examples");
    if (!backbone && !h.backbone_name.empty()) {
        auto p = path.parent_path() / h.backbone_name;
        if (std::filesystem::exists(p)) backbone = std::make_shared<const TrainedModel>(load_model(p));
    }
    h.backbone = std::move(backbone);
    return h;
}

} // namespace ebr

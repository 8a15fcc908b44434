#include "ebr/mf.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "ebr/checkpoint.hpp"

namespace ebr {

namespace {

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Adam restricted to rows that received gradient in the current step.
class RowAdam {
public:
    RowAdam(Eigen::Index rows, Eigen::Index cols, const MFConfig& cfg)
        : m_(MatrixF::Zero(rows, cols)), v_(MatrixF::Zero(rows, cols)), grad_(MatrixF::Zero(rows, cols)),
          touched_flag_(static_cast<std::size_t>(rows), false), lr_(cfg.lr) {}

    auto grad_row(Eigen::Index r) {
        if (!touched_flag_[r]) {
            touched_flag_[r] = true;
            touched_.push_back(r);
        }
        return grad_.row(r);
    }

    void apply(MatrixF& params, std::size_t t) {
        constexpr float b1 = 0.9f, b2 = 0.98f, eps = 1e-8f;
        const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(0.98, static_cast<double>(t));
        const float step = static_cast<float>(lr_ / bc1);
        const float sqrt_bc2 = static_cast<float>(std::sqrt(bc2));
        for (Eigen::Index r : touched_) {
            auto g = grad_.row(r).array();
            m_.row(r).array() = b1 * m_.row(r).array() + (1 - b1) * g;
            v_.row(r).array() = b2 * v_.row(r).array() + (1 - b2) * g.square();
            params.row(r).array() -= step * m_.row(r).array() / (v_.row(r).array().sqrt() / sqrt_bc2 + eps);
            grad_.row(r).setZero();
            touched_flag_[r] = false;
        }
        touched_.clear();
    }

private:
    MatrixF m_, v_, grad_;
    std::vector<bool> touched_flag_;
    std::vector<Eigen::Index> touched_;
    double lr_;
};

double validation_recall(const MFParams& p, const Split& split, const std::vector<ItemSet>& seen, const MFConfig& cfg) {
    const auto& users = split.eligible_users;
    if (users.empty()) return 0;
    std::size_t count = users.size(), stride = 1;
    if (cfg.eval_users > 0 && cfg.eval_users < count) {
        stride = count / cfg.eval_users;
        count = cfg.eval_users;
    }
    std::size_t hits = 0;
    for (std::size_t k = 0; k < count; ++k) {
        UserIndex u = users[k * stride];
        VectorF e = p.user_table.row(u).transpose();
        hits += target_in_top_m(p.item_table, {e.data(), static_cast<std::size_t>(e.size())}, split.valid_target[u], {},
                                seen[u], cfg.eval_m);
    }
    return static_cast<double>(hits) / static_cast<double>(count);
}

} // namespace

void MFConfig::validate() const {
    if (dim < 1) throw ConfigError("mf: dim must be >= 1");
    if (!(lr >= 0)) throw ConfigError("mf: lr must be >= 0");
    if (batch_size < 1) throw ConfigError("mf: batch_size must be >= 1");
    if (eval_every < 1) throw ConfigError("mf: eval_every must be >= 1");
}

MFParams init_mf_params(std::size_t num_users, std::size_t num_items, const MFConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    std::normal_distribution<float> n(0.0f, static_cast<float>(cfg.init_std));
    MFParams p;
    p.config = cfg;
    p.user_table.resize(static_cast<Eigen::Index>(num_users), static_cast<Eigen::Index>(cfg.dim));
    p.item_table.resize(static_cast<Eigen::Index>(num_items), static_cast<Eigen::Index>(cfg.dim));
    for (Eigen::Index i = 0; i < p.user_table.size(); ++i) p.user_table.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < p.item_table.size(); ++i) p.item_table.data()[i] = n(rng);
    return p;
}

MFParams train_mf(const Split& split, const MFConfig& cfg) {
    const auto& train = split.train;
    if (train.num_users == 0 || train.num_items == 0) throw EmptyDatasetError("train_mf: empty dataset");
    MFParams p = init_mf_params(train.num_users, train.num_items, cfg);
    Rng rng(cfg.seed ^ 0x5851f42d4c957f2dULL);

    std::vector<ItemSet> seen;
    std::vector<std::pair<UserIndex, ItemIndex>> pairs;
    for (std::size_t u = 0; u < train.num_users; ++u) {
        seen.emplace_back(train.sequences[u]);
        for (ItemIndex i : train.sequences[u]) pairs.emplace_back(static_cast<UserIndex>(u), i);
    }

    RowAdam user_opt(p.user_table.rows(), p.user_table.cols(), cfg);
    RowAdam item_opt(p.item_table.rows(), p.item_table.cols(), cfg);
    TrainingMode global;
    TrainingReport& report = p.report;
    report.best_metric = validation_recall(p, split, seen, cfg);
    report.validation.emplace_back(0, report.best_metric);
    MFParams best = p;
    bool improved = false;
    std::size_t t = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(pairs.begin(), pairs.end(), rng);
        double loss_sum = 0;
        std::size_t loss_n = 0;
        for (std::size_t start = 0; start < pairs.size(); start += cfg.batch_size) {
            std::size_t end = std::min(pairs.size(), start + cfg.batch_size);
            std::size_t active = 0;
            double batch_loss = 0;
            struct Term {
                UserIndex u;
                ItemIndex pos, neg;
            };
            std::vector<Term> terms;
            for (std::size_t k = start; k < end; ++k) {
                auto [u, pos] = pairs[k];
                auto neg = sample_negative(global, pos, seen[u], train.num_items, nullptr, rng);
                if (!neg) continue;
                terms.push_back({u, pos, *neg});
            }
            active = terms.size();
            if (active == 0) continue;
            const float inv = 1.0f / static_cast<float>(active);
            for (const auto& term : terms) {
                auto eu = p.user_table.row(term.u);
                auto ep = p.item_table.row(term.pos);
                auto en = p.item_table.row(term.neg);
                double rp = eu.dot(ep), rn = eu.dot(en);
                batch_loss += softplus(-rp) + softplus(rn);
                float gp = static_cast<float>(sigmoid(rp) - 1.0) * inv;
                float gn = static_cast<float>(sigmoid(rn)) * inv;
                user_opt.grad_row(term.u) += gp * ep + gn * en;
                item_opt.grad_row(term.pos) += gp * eu;
                item_opt.grad_row(term.neg) += gn * eu;
            }
            batch_loss /= static_cast<double>(active);
            if (!std::isfinite(batch_loss)) throw DivergedError(t, "mf loss is not finite");
            ++t;
            user_opt.apply(p.user_table, t);
            item_opt.apply(p.item_table, t);
            loss_sum += batch_loss;
            ++loss_n;
        }
        report.epoch_loss.push_back(loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0);
        if (epoch % cfg.eval_every != 0 && epoch != cfg.epochs) continue;
        double metric = validation_recall(p, split, seen, cfg);
        report.validation.emplace_back(epoch, metric);
        if (metric > report.best_metric) {
            report.best_metric = metric;
            report.best_epoch = epoch;
            best.user_table = p.user_table;
            best.item_table = p.item_table;
            improved = true;
        } else if (epoch - report.best_epoch >= cfg.patience) {
            break;
        }
    }
    report.steps = t;
    report.validation_improved = improved || cfg.epochs == 0;
    if (improved) {
        p.user_table = std::move(best.user_table);
        p.item_table = std::move(best.item_table);
    } else if (cfg.epochs > 0) {
        std::cerr << "warning: mf validation recall never improved; returning the last checkpoint\n";
    }
    return p;
}

VectorF mf_user_vector(const MFParams& p, UserIndex user) {
    if (user >= static_cast<std::size_t>(p.user_table.rows()))
        throw IndexError("mf_user_vector: user " + std::to_string(user) + " out of range");
    return p.user_table.row(user).transpose();
}

void save_mf(const MFParams& p, const std::filesystem::path& path) {
    Checkpoint ck;
    ck.meta = {{"kind", "mf"},
               {"config",
                {{"dim", p.config.dim}, {"lr", p.config.lr}, {"epochs", p.config.epochs},
                 {"batch_size", p.config.batch_size}, {"seed", p.config.seed}}},
               {"report",
                {{"best_epoch", p.report.best_epoch}, {"best_metric", p.report.best_metric},
                 {"epoch_loss", p.report.epoch_loss}}}};
    ck.add("user_table", p.user_table);
    ck.add("item_table", p.item_table);
    save_checkpoint(ck, path);
}

MFParams load_mf(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.meta.value("kind", "") != "mf") throw InputError(path.string() + ": not an mf checkpoint");
    MFParams p;
    const auto& c = ck.meta.at("config");
    p.config.dim = c.at("dim");
    p.config.lr = c.at("lr");
    p.config.epochs = c.at("epochs");
    p.config.batch_size = c.at("batch_size");
    p.config.seed = c.at("seed");
    p.report.best_epoch = ck.meta.at("report").at("best_epoch");
    p.report.best_metric = ck.meta.at("report").at("best_metric");
    p.report.epoch_loss = ck.meta.at("report").at("epoch_loss").get<std::vector<double>>();
    p.user_table = ck.matrix("user_table");
    p.item_table = ck.matrix("item_table");
    return p;
}

} // namespace ebr

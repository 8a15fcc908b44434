#include "ebr/partition.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <limits>
#include <unordered_map>

namespace ebr {

namespace {

using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Assignment {
    std::vector<ClusterId> label;
    std::vector<double> dist; // squared distance to assigned centroid
};

Assignment assign_points(const MatrixD& x, const MatrixD& centroids) {
    const auto n = x.rows();
    Assignment a{std::vector<ClusterId>(n), std::vector<double>(n)};
    for (Eigen::Index i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        ClusterId arg = 0;
        for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
            double d2 = (x.row(i) - centroids.row(c)).squaredNorm();
            if (d2 < best) {
                best = d2;
                arg = static_cast<ClusterId>(c);
            }
        }
        a.label[i] = arg;
        a.dist[i] = best;
    }
    return a;
}

// Recomputes centroids; clusters left empty are repaired by moving the point
// farthest from its centroid into them.
MatrixD update_centroids(const MatrixD& x, Assignment& a, const MatrixD& old, std::size_t k) {
    MatrixD sums = MatrixD::Zero(static_cast<Eigen::Index>(k), x.cols());
    std::vector<std::size_t> counts(k, 0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        sums.row(a.label[i]) += x.row(i);
        ++counts[a.label[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] != 0) continue;
        std::size_t far = 0;
        double far_d = -1;
        for (std::size_t i = 0; i < a.dist.size(); ++i) {
            if (counts[a.label[i]] > 1 && a.dist[i] > far_d) {
                far_d = a.dist[i];
                far = i;
            }
        }
        if (far_d < 0) throw InputError("kmeans: cannot repair empty cluster");
        auto i = static_cast<Eigen::Index>(far);
        sums.row(a.label[far]) -= x.row(i);
        --counts[a.label[far]];
        a.label[far] = static_cast<ClusterId>(c);
        a.dist[far] = 0;
        sums.row(c) = x.row(i);
        counts[c] = 1;
    }
    MatrixD out = old;
    for (std::size_t c = 0; c < k; ++c) out.row(c) = sums.row(c) / static_cast<double>(counts[c]);
    return out;
}

double objective(const MatrixD& x, const Assignment& a, const MatrixD& centroids) {
    double j = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) j += (x.row(i) - centroids.row(a.label[i])).squaredNorm();
    return j;
}

} // namespace

ClusterAssignment::ClusterAssignment(std::size_t k, std::vector<ClusterId> assign)
    : assign_(std::move(assign)), members_(k) {
    for (std::size_t i = 0; i < assign_.size(); ++i) {
        if (assign_[i] >= k) throw InputError("cluster id out of range for item " + std::to_string(i));
        members_[assign_[i]].push_back(static_cast<ItemIndex>(i));
    }
    for (std::size_t c = 0; c < k; ++c)
        if (members_[c].empty()) throw InputError("cluster " + std::to_string(c) + " is empty");
}

ClusterId cluster_of(const ClusterAssignment& ca, ItemIndex item) {
    if (item >= ca.num_items())
        throw IndexError("item " + std::to_string(item) + " out of range (num_items " +
                         std::to_string(ca.num_items()) + ")");
    return ca.assign()[item];
}

void KMeansConfig::validate(std::size_t rows) const {
    if (k < 1) throw ConfigError("kmeans: k must be >= 1");
    if (k > rows) throw ConfigError("kmeans: k=" + std::to_string(k) + " exceeds " + std::to_string(rows) + " items");
    if (max_iters < 1) throw ConfigError("kmeans: max_iters must be >= 1");
    if (!(tol > 0)) throw ConfigError("kmeans: tol must be > 0");
}

KMeansResult kmeans_detailed(const EmbeddingMatrix& emb, const KMeansConfig& cfg) {
    cfg.validate(emb.rows());
    if (!emb.all_finite()) throw InputError("kmeans: embedding contains non-finite entries");
    MatrixD x = emb.values.cast<double>();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double norm = x.row(i).norm();
        if (norm > 0) x.row(i) /= norm;
    }
    const std::size_t n = emb.rows();
    const std::size_t k = cfg.k;

    // k-means++ seeding.
    Rng rng(cfg.seed);
    MatrixD centroids(static_cast<Eigen::Index>(k), x.cols());
    std::vector<bool> chosen(n, false);
    std::size_t first = rng() % n;
    chosen[first] = true;
    centroids.row(0) = x.row(static_cast<Eigen::Index>(first));
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = (x.row(static_cast<Eigen::Index>(i)) - centroids.row(0)).squaredNorm();
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (!chosen[i]) total += d2[i];
        std::size_t pick = n;
        if (total > 0) {
            double r = std::uniform_real_distribution<double>(0.0, total)(rng);
            double acc = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (chosen[i] || d2[i] <= 0) continue;
                acc += d2[i];
                pick = i;
                if (acc > r) break;
            }
        }
        if (pick == n) {
            // All remaining points coincide with centroids; pick any unchosen one.
            std::vector<std::size_t> rest;
            for (std::size_t i = 0; i < n; ++i)
                if (!chosen[i]) rest.push_back(i);
            pick = rest[rng() % rest.size()];
        }
        chosen[pick] = true;
        centroids.row(static_cast<Eigen::Index>(c)) = x.row(static_cast<Eigen::Index>(pick));
        for (std::size_t i = 0; i < n; ++i)
            d2[i] = std::min(d2[i], (x.row(static_cast<Eigen::Index>(i)) - centroids.row(static_cast<Eigen::Index>(c))).squaredNorm());
    }

    KMeansResult res;
    Assignment a;
    for (std::size_t it = 0; it < cfg.max_iters; ++it) {
        a = assign_points(x, centroids);
        MatrixD next = update_centroids(x, a, centroids, k);
        double shift = (next - centroids).rowwise().norm().maxCoeff();
        centroids = std::move(next);
        res.objective.push_back(objective(x, a, centroids));
        res.iterations = it + 1;
        if (shift < cfg.tol) {
            res.converged = true;
            break;
        }
    }
    res.assignment = ClusterAssignment(k, a.label);
    res.centroids = centroids.cast<float>();
    return res;
}

ClusterAssignment kmeans(const EmbeddingMatrix& emb, const KMeansConfig& cfg) {
    return kmeans_detailed(emb, cfg).assignment;
}

ClusterAssignment assign_from_labels(const std::vector<std::optional<std::string>>& labels) {
    std::vector<std::size_t> missing;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (!labels[i]) missing.push_back(i);
    if (!missing.empty()) {
        std::string msg = std::to_string(missing.size()) + " item(s) without a label:";
        for (std::size_t j = 0; j < std::min<std::size_t>(missing.size(), 10); ++j) msg += " " + std::to_string(missing[j]);
        if (missing.size() > 10) msg += " ...";
        throw InputError(msg);
    }
    std::unordered_map<std::string, ClusterId> dense;
    std::vector<ClusterId> assign(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto [it, inserted] = dense.try_emplace(*labels[i], static_cast<ClusterId>(dense.size()));
        assign[i] = it->second;
    }
    return ClusterAssignment(dense.size(), std::move(assign));
}

void save_clusters(const ClusterAssignment& ca, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path.string());
    out << "item_internal_id,cluster_id\n";
    for (std::size_t i = 0; i < ca.num_items(); ++i) out << i << ',' << ca.assign()[i] << '\n';
}

ClusterAssignment load_clusters(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("item_internal_id,cluster_id", 0) != 0)
        throw ParseError(1, path.string() + ": expected header item_internal_id,cluster_id");
    std::vector<ClusterId> assign;
    std::vector<bool> seen;
    std::size_t k = 0;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto comma = line.find(',');
        std::size_t item = 0;
        ClusterId c = 0;
        if (comma == std::string::npos ||
            std::from_chars(line.data(), line.data() + comma, item).ec != std::errc() ||
            std::from_chars(line.data() + comma + 1, line.data() + line.size(), c).ec != std::errc())
            throw ParseError(line_no, "expected item_internal_id,cluster_id");
        if (item >= assign.size()) {
            assign.resize(item + 1, 0);
            seen.resize(item + 1, false);
        }
        if (seen[item]) throw ParseError(line_no, "duplicate item " + std::to_string(item));
        seen[item] = true;
        assign[item] = c;
        k = std::max<std::size_t>(k, c + 1);
    }
    for (std::size_t i = 0; i < seen.size(); ++i)
        if (!seen[i]) throw InputError(path.string() + ": item " + std::to_string(i) + " has no cluster");
    return ClusterAssignment(k, std::move(assign));
}

} // namespace ebr

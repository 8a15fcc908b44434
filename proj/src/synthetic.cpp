#include "ebr/synthetic.hpp"

#include <algorithm>
#include <numeric>

namespace ebr {

SyntheticCorpus make_synthetic(const SyntheticConfig& cfg) {
    if (cfg.clusters == 0 || cfg.items < cfg.clusters) throw ConfigError("synthetic: need items >= clusters >= 1");
    if (cfg.users == 0 || cfg.min_len == 0 || cfg.max_len < cfg.min_len) throw ConfigError("synthetic: bad lengths");
    Rng rng(cfg.seed);
    SyntheticCorpus out;
    out.item_cluster.resize(cfg.items);
    std::vector<std::vector<ItemIndex>> members(cfg.clusters);
    for (std::size_t i = 0; i < cfg.items; ++i) {
        ClusterId c = static_cast<ClusterId>(i * cfg.clusters / cfg.items);
        out.item_cluster[i] = c;
        members[c].push_back(static_cast<ItemIndex>(i));
    }

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<std::vector<ItemIndex>> seqs(cfg.users);
    std::vector<char> used(cfg.items, 0);
    out.home_cluster.resize(cfg.users);
    for (std::size_t u = 0; u < cfg.users; ++u) {
        std::vector<ClusterId> prefs;
        std::vector<double> weights;
        ClusterId home = static_cast<ClusterId>(rng() % cfg.clusters);
        out.home_cluster[u] = home;
        prefs.push_back(home);
        weights.push_back(cfg.home_weight);
        std::size_t extra = std::min(cfg.secondary_clusters, cfg.clusters - 1);
        for (std::size_t s = 0; s < extra; ++s) {
            ClusterId c;
            do {
                c = static_cast<ClusterId>(rng() % cfg.clusters);
            } while (std::find(prefs.begin(), prefs.end(), c) != prefs.end());
            prefs.push_back(c);
            weights.push_back((1.0 - cfg.home_weight) / static_cast<double>(extra));
        }
        std::discrete_distribution<std::size_t> pick_pref(weights.begin(), weights.end());

        std::size_t len = cfg.min_len + rng() % (cfg.max_len - cfg.min_len + 1);
        ClusterId cur = prefs[pick_pref(rng)];
        std::size_t pos = rng() % members[cur].size();
        auto& seq = seqs[u];
        seq.reserve(len);
        std::vector<std::size_t> left(cfg.clusters);
        for (std::size_t c = 0; c < cfg.clusters; ++c) left[c] = members[c].size();
        // Walks forward on the ring to the next unused item; false when the
        // cluster is exhausted.
        auto settle = [&]() {
            if (cfg.allow_repeats) return true;
            const auto& ring = members[cur];
            if (left[cur] == 0) return false;
            while (used[ring[pos]]) pos = (pos + 1) % ring.size();
            return true;
        };
        auto emit = [&]() {
            ItemIndex i = members[cur][pos];
            seq.push_back(i);
            if (!cfg.allow_repeats && !used[i]) {
                used[i] = 1;
                --left[cur];
            }
        };
        settle();
        emit();
        while (seq.size() < len) {
            if (unit(rng) < cfg.stay_prob) {
                const auto& ring = members[cur];
                if (unit(rng) < cfg.ring_walk_prob) {
                    std::size_t step = 1 + rng() % std::max<std::size_t>(cfg.max_step, 1);
                    pos = (pos + step) % ring.size();
                } else {
                    pos = rng() % ring.size();
                }
            } else {
                cur = prefs[pick_pref(rng)];
                pos = rng() % members[cur].size();
            }
            if (!settle()) {
                // Current cluster used up: fall back to any preferred cluster
                // with items left, else end the sequence.
                auto it = std::find_if(prefs.begin(), prefs.end(), [&](ClusterId c) { return left[c] > 0; });
                if (it == prefs.end()) break;
                cur = *it;
                pos = rng() % members[cur].size();
                settle();
            }
            emit();
        }
        for (ItemIndex i : seq) used[i] = 0;
    }
    // Items never drawn still exist in the catalog; from_sequences keeps them.
    out.data = Dataset::from_sequences(std::move(seqs), cfg.items);
    return out;
}

} // namespace ebr

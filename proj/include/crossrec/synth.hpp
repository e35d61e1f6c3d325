#pragma once

// Synthetic interaction-log generators for tests, demos, and desk-scale
// experiments. The clustered generator plants both signal families this
// framework exploits: item clusters shared across users (graph signal) and
// within-cluster successor chains (sequential signal). Every user's history
// spans the whole time axis so a global temporal split cuts each user's
// tail rather than dropping whole users.

#include <crossrec/data.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace crossrec::synth {

struct ClusteredConfig {
  int num_users{600};
  int num_items{400};
  int num_clusters{8};
  int min_len{24};
  int max_len{72};
  double p_in_cluster{0.85};  // stay in the home cluster
  double p_follow{0.65};      // follow the cluster's successor chain
  double zipf_s{0.8};         // popularity skew inside a cluster
  std::uint64_t seed{1};
};

inline InteractionLog clustered_log(const ClusteredConfig& cfg) {
  if (cfg.num_clusters < 1 || cfg.num_items % cfg.num_clusters != 0)
    throw std::invalid_argument("clustered_log: items must divide into clusters");
  std::mt19937_64 rng(cfg.seed);
  const int per_cluster = cfg.num_items / cfg.num_clusters;

  // Fixed successor permutation per cluster (a shuffled ring).
  std::vector<std::vector<int>> ring(cfg.num_clusters);
  for (int c = 0; c < cfg.num_clusters; ++c) {
    ring[c].resize(per_cluster);
    for (int k = 0; k < per_cluster; ++k) ring[c][k] = k;
    for (int k = per_cluster - 1; k > 0; --k) {
      std::uniform_int_distribution<int> pick(0, k);
      std::swap(ring[c][k], ring[c][pick(rng)]);
    }
  }
  std::vector<int> successor(cfg.num_items);
  for (int c = 0; c < cfg.num_clusters; ++c)
    for (int k = 0; k < per_cluster; ++k) {
      const int cur = c * per_cluster + ring[c][k];
      const int nxt = c * per_cluster + ring[c][(k + 1) % per_cluster];
      successor[cur] = nxt;
    }

  // Zipf weights over in-cluster ranks.
  std::vector<double> zipf(per_cluster);
  for (int k = 0; k < per_cluster; ++k)
    zipf[k] = 1.0 / std::pow(static_cast<double>(k + 1), cfg.zipf_s);
  std::discrete_distribution<int> zipf_pick(zipf.begin(), zipf.end());

  InteractionLog log;
  for (int u = 0; u < cfg.num_users; ++u) log.user_keys.push_back("u" + std::to_string(u));
  for (int i = 0; i < cfg.num_items; ++i) log.item_keys.push_back("i" + std::to_string(i));

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int> len_pick(cfg.min_len, cfg.max_len);
  std::uniform_int_distribution<int> cluster_pick(0, cfg.num_clusters - 1);

  for (int u = 0; u < cfg.num_users; ++u) {
    const int home = cluster_pick(rng);
    const int len = len_pick(rng);
    int prev = -1;
    for (int k = 0; k < len; ++k) {
      int item;
      if (prev >= 0 && prev / per_cluster == home && unif(rng) < cfg.p_follow) {
        item = successor[prev];
      } else {
        const int cluster =
            unif(rng) < cfg.p_in_cluster ? home : cluster_pick(rng);
        item = cluster * per_cluster + zipf_pick(rng);
      }
      // Histories cover [0, 1e6] uniformly so the split cuts every tail.
      const std::int64_t ts =
          static_cast<std::int64_t>((static_cast<double>(k) + 1.0) /
                                    static_cast<double>(len) * 1000000.0) +
          (u % 997);
      log.interactions.push_back({u, item, ts, 0.0});
      prev = item;
    }
  }
  return log;
}

// Deterministic planted transition: whenever the previous item is `trigger`,
// the next is `follower`. The trigger is injected often enough to dominate.
inline InteractionLog planted_rule_log(int num_users, int num_items, int len,
                                       int trigger, int follower, std::uint64_t seed,
                                       double trigger_boost = 0.25) {
  if (trigger == follower || trigger >= num_items || follower >= num_items)
    throw std::invalid_argument("planted_rule_log: bad trigger/follower");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  InteractionLog log;
  for (int u = 0; u < num_users; ++u) log.user_keys.push_back("u" + std::to_string(u));
  for (int i = 0; i < num_items; ++i) log.item_keys.push_back("i" + std::to_string(i));
  for (int u = 0; u < num_users; ++u) {
    int prev = -1;
    for (int k = 0; k < len; ++k) {
      int item;
      if (prev == trigger) {
        item = follower;
      } else if (unif(rng) < trigger_boost) {
        item = trigger;
      } else {
        item = static_cast<int>(rng() % num_items);
      }
      log.interactions.push_back(
          {u, item, static_cast<std::int64_t>(k) * 1000 + u, 0.0});
      prev = item;
    }
  }
  return log;
}

// Writes a log back out as a raw user / item / timestamp TSV.
inline void write_tsv(const InteractionLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out.is_open()) throw std::runtime_error("write_tsv: cannot open " + path);
  for (const auto& r : log.interactions)
    out << log.user_keys[r.user] << '\t' << log.item_keys[r.item] << '\t' << r.timestamp
        << '\n';
}

}  // namespace crossrec::synth

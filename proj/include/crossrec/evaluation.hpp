#pragma once

// Ranking-quality evaluation under the global temporal split. Users are
// scored with the sequential branch only; user embeddings are never read at
// inference, and evaluate() enforces that with a lookup-count guard.

#include <crossrec/data.hpp>
#include <crossrec/model.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace crossrec {

struct EvalConfig {
  std::vector<int> ks{10, 100};
  bool filter_seen{true};
  bool all_successive{false};  // evaluate every test interaction, not just the first

  void validate() const {
    if (ks.empty()) throw std::invalid_argument("EvalConfig: ks must not be empty");
    for (int k : ks)
      if (k < 1) throw std::invalid_argument("EvalConfig: cutoffs must be positive");
  }
};

struct RankedList {
  int user{0};
  std::vector<int> items;  // top-k item ids, best first
  int k{0};
};

struct MetricsReport {
  std::map<std::string, double> metrics;  // percentages
  std::int64_t num_eval_users{0};
  std::int64_t num_eval_cases{0};
  std::int64_t num_skipped_users{0};   // empty history
  std::int64_t num_dropped_targets{0};  // out-of-vocabulary test items
  std::uint64_t seed{0};
  std::string config_hash;
  std::string label;
};

// Single-target metric forms: the ideal DCG is 1, so NDCG@k collapses to the
// discount at the hit rank. rank is 1-based; rank <= 0 encodes a miss.
inline double ndcg_at_k(int rank, int k) {
  if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  return rank >= 1 && rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

inline double recall_at_k(int rank, int k) {
  if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
  return rank >= 1 && rank <= k ? 1.0 : 0.0;
}

inline double coverage_at_k(const std::vector<RankedList>& lists, int k, int catalog_size) {
  std::vector<char> seen(catalog_size, 0);
  for (const auto& l : lists)
    for (int idx = 0; idx < std::min<int>(k, static_cast<int>(l.items.size())); ++idx)
      seen[l.items[idx]] = 1;
  std::int64_t covered = std::count(seen.begin(), seen.end(), char(1));
  return static_cast<double>(covered) / static_cast<double>(catalog_size);
}

// Top-k ids from a score row, ties broken by ascending item id; seen items
// (sorted) are excluded when filtering. Returns all remaining candidates if
// fewer than k survive.
inline std::vector<int> top_k_from_scores(const Eigen::Ref<const Eigen::RowVectorXd>& scores,
                                          int k, const std::vector<int>* seen_sorted) {
  std::vector<int> ids;
  ids.reserve(scores.size());
  for (int i = 0; i < scores.size(); ++i) {
    if (seen_sorted &&
        std::binary_search(seen_sorted->begin(), seen_sorted->end(), i))
      continue;
    ids.push_back(i);
  }
  const int keep = std::min<int>(k, static_cast<int>(ids.size()));
  std::partial_sort(ids.begin(), ids.begin() + keep, ids.end(), [&](int a, int b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return a < b;
  });
  ids.resize(keep);
  return ids;
}

// 1-based rank of the target under the same ordering; misses return 0 when
// the target itself is filtered out (never the case for unseen targets).
inline int rank_of_target(const Eigen::Ref<const Eigen::RowVectorXd>& scores, int target,
                          const std::vector<int>* seen_sorted) {
  if (seen_sorted && std::binary_search(seen_sorted->begin(), seen_sorted->end(), target))
    return 0;
  int rank = 1;
  const double ts = scores(target);
  for (int i = 0; i < scores.size(); ++i) {
    if (i == target) continue;
    if (seen_sorted && std::binary_search(seen_sorted->begin(), seen_sorted->end(), i))
      continue;
    if (scores(i) > ts || (scores(i) == ts && i < target)) ++rank;
  }
  return rank;
}

// Top-k recommendation for one user through the sequential branch.
inline RankedList recommend(Model& model, int user, const std::vector<int>& history, int k,
                            bool filter_seen) {
  if (history.empty()) throw std::invalid_argument("recommend: empty history");
  Mat scores = model.score_histories({history});
  std::vector<int> seen = history;
  std::sort(seen.begin(), seen.end());
  seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
  RankedList out;
  out.user = user;
  out.k = k;
  out.items = top_k_from_scores(scores.row(0), k, filter_seen ? &seen : nullptr);
  return out;
}

namespace detail {

struct EvalCase {
  int user;
  std::vector<int> history;
  int target;
};

struct CaseOutcome {
  int user;
  int rank;                 // against the full filtered catalog
  std::vector<int> top;     // top-max(ks) list for coverage
};

inline MetricsReport aggregate_cases(const std::vector<CaseOutcome>& outcomes,
                                     const EvalConfig& cfg, int catalog_size) {
  MetricsReport rep;
  rep.num_eval_cases = static_cast<std::int64_t>(outcomes.size());
  std::vector<char> user_seen;
  for (int k : cfg.ks) {
    double ndcg = 0.0, recall = 0.0;
    std::vector<RankedList> lists;
    lists.reserve(outcomes.size());
    for (const auto& oc : outcomes) {
      ndcg += ndcg_at_k(oc.rank, k);
      recall += recall_at_k(oc.rank, k);
      lists.push_back(RankedList{oc.user, oc.top, k});
    }
    const double n = std::max<double>(1.0, static_cast<double>(outcomes.size()));
    rep.metrics["NDCG@" + std::to_string(k)] = 100.0 * ndcg / n;
    rep.metrics["Recall@" + std::to_string(k)] = 100.0 * recall / n;
    rep.metrics["Cov@" + std::to_string(k)] =
        100.0 * coverage_at_k(lists, k, catalog_size);
  }
  return rep;
}

}  // namespace detail

// Builds evaluation cases for the given target split: per user the first
// in-window interaction, or every successive one with a growing history.
inline std::vector<detail::EvalCase> build_eval_cases(
    const DatasetBundle& bundle, const std::vector<Interaction>& targets,
    bool all_successive, std::int64_t* skipped_users = nullptr) {
  std::vector<std::vector<std::pair<std::int64_t, int>>> per_user(bundle.num_users);
  for (const auto& r : targets) per_user[r.user].emplace_back(r.timestamp, r.item);
  std::vector<detail::EvalCase> cases;
  std::int64_t skipped = 0;
  for (int u = 0; u < bundle.num_users; ++u) {
    if (per_user[u].empty()) continue;
    if (bundle.user_sequences[u].empty()) {
      ++skipped;
      continue;
    }
    std::stable_sort(per_user[u].begin(), per_user[u].end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<int> history = bundle.user_sequences[u];
    for (const auto& [ts, item] : per_user[u]) {
      cases.push_back(detail::EvalCase{u, history, item});
      if (!all_successive) break;
      history.push_back(item);
    }
  }
  if (skipped_users) *skipped_users = skipped;
  return cases;
}

// Evaluates the model on the given target split. Chunked batched forward;
// deterministic aggregation in user order.
inline MetricsReport evaluate_split(Model& model, const DatasetBundle& bundle,
                                    const std::vector<Interaction>& targets,
                                    const EvalConfig& cfg, int chunk_size = 256) {
  cfg.validate();
  const std::size_t user_reads_before = model.tables().user_lookup_count();

  std::int64_t skipped = 0;
  auto cases = build_eval_cases(bundle, targets, cfg.all_successive, &skipped);
  if (cases.empty()) throw std::runtime_error("evaluate: no evaluable users");
  const int max_k = *std::max_element(cfg.ks.begin(), cfg.ks.end());

  auto seen_sets = user_item_sets(bundle);
  std::vector<detail::CaseOutcome> outcomes;
  outcomes.reserve(cases.size());
  for (size_t begin = 0; begin < cases.size(); begin += chunk_size) {
    const size_t end = std::min(cases.size(), begin + chunk_size);
    std::vector<std::vector<int>> histories;
    for (size_t c = begin; c < end; ++c) histories.push_back(cases[c].history);
    Mat scores = model.score_histories(histories);
    for (size_t c = begin; c < end; ++c) {
      const auto& cs = cases[c];
      // In all-successive mode earlier targets become part of the history
      // and must be filtered alongside training items.
      std::vector<int> seen = cs.history;
      std::sort(seen.begin(), seen.end());
      seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
      const std::vector<int>* filter = cfg.filter_seen ? &seen : nullptr;
      detail::CaseOutcome oc;
      oc.user = cs.user;
      oc.rank = rank_of_target(scores.row(static_cast<Eigen::Index>(c - begin)),
                               cs.target, filter);
      oc.top = top_k_from_scores(scores.row(static_cast<Eigen::Index>(c - begin)), max_k,
                                 filter);
      outcomes.push_back(std::move(oc));
    }
  }

  MetricsReport rep = detail::aggregate_cases(outcomes, cfg, bundle.num_items);
  std::vector<char> users_hit(bundle.num_users, 0);
  for (const auto& oc : outcomes) users_hit[oc.user] = 1;
  rep.num_eval_users = std::count(users_hit.begin(), users_hit.end(), char(1));
  rep.num_skipped_users = skipped;
  rep.num_dropped_targets = bundle.dropped_test;

  if (model.tables().user_lookup_count() != user_reads_before)
    throw std::logic_error("evaluate: inference read the user table");
  return rep;
}

// Test-split evaluation, the headline entry point.
inline MetricsReport evaluate(Model& model, const DatasetBundle& bundle,
                              const EvalConfig& cfg) {
  MetricsReport rep = evaluate_split(model, bundle, bundle.test, cfg);
  return rep;
}

// Mean validation NDCG@10 used for early stopping during tuning.
inline double validation_ndcg10(Model& model, const DatasetBundle& bundle,
                                bool filter_seen) {
  EvalConfig cfg;
  cfg.ks = {10};
  cfg.filter_seen = filter_seen;
  cfg.all_successive = false;
  MetricsReport rep = evaluate_split(model, bundle, bundle.validation, cfg);
  return rep.metrics.at("NDCG@10") / 100.0;
}

// ---------------------------------------------------------------------------
// Non-personalized baselines
// ---------------------------------------------------------------------------

enum class BaselineKind { random, poprnd };

// Random: k distinct items uniformly. PopRnd: k distinct items sampled with
// probability proportional to training popularity (weighted reservoir keys).
inline std::vector<int> baseline_list(BaselineKind kind, int k, int num_items,
                                      const std::vector<double>& popularity,
                                      std::mt19937_64& rng) {
  if (k > num_items) throw std::invalid_argument("baseline_list: k exceeds catalog");
  if (kind == BaselineKind::random) {
    std::vector<int> ids(num_items);
    for (int i = 0; i < num_items; ++i) ids[i] = i;
    for (int i = 0; i < k; ++i) {
      std::uniform_int_distribution<int> pick(i, num_items - 1);
      std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(k);
    return ids;
  }
  // Efraimidis-Spirakis: top-k by u^(1/w) over items with positive weight.
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::pair<double, int>> keys;
  keys.reserve(num_items);
  for (int i = 0; i < num_items; ++i) {
    const double w = popularity[i];
    const double u = unif(rng);
    if (w > 0.0) keys.emplace_back(std::pow(u, 1.0 / w), i);
  }
  const int keep = std::min<int>(k, static_cast<int>(keys.size()));
  std::partial_sort(keys.begin(), keys.begin() + keep, keys.end(),
                    [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second < b.second;
                    });
  std::vector<int> out;
  for (int i = 0; i < keep; ++i) out.push_back(keys[i].second);
  return out;
}

inline std::vector<double> train_popularity(const DatasetBundle& bundle) {
  std::vector<double> pop(bundle.num_items, 0.0);
  for (const auto& r : bundle.train) pop[r.item] += 1.0;
  return pop;
}

// Evaluates a non-personalized baseline on the same cases as the model.
inline MetricsReport evaluate_baseline(BaselineKind kind, const DatasetBundle& bundle,
                                       const EvalConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::int64_t skipped = 0;
  auto cases = build_eval_cases(bundle, bundle.test, cfg.all_successive, &skipped);
  if (cases.empty()) throw std::runtime_error("evaluate_baseline: no evaluable users");
  const int max_k = *std::max_element(cfg.ks.begin(), cfg.ks.end());
  auto pop = train_popularity(bundle);
  std::mt19937_64 rng(ad::derive_seed(seed, kind == BaselineKind::random ? "random" : "poprnd"));

  std::vector<detail::CaseOutcome> outcomes;
  for (const auto& cs : cases) {
    detail::CaseOutcome oc;
    oc.user = cs.user;
    oc.top = baseline_list(kind, std::min(max_k, bundle.num_items), bundle.num_items, pop, rng);
    auto it = std::find(oc.top.begin(), oc.top.end(), cs.target);
    oc.rank = it == oc.top.end() ? 0 : static_cast<int>(it - oc.top.begin()) + 1;
    outcomes.push_back(std::move(oc));
  }
  MetricsReport rep = detail::aggregate_cases(outcomes, cfg, bundle.num_items);
  std::vector<char> users_hit(bundle.num_users, 0);
  for (const auto& oc : outcomes) users_hit[oc.user] = 1;
  rep.num_eval_users = std::count(users_hit.begin(), users_hit.end(), char(1));
  rep.num_skipped_users = skipped;
  rep.num_dropped_targets = bundle.dropped_test;
  rep.seed = seed;
  rep.label = kind == BaselineKind::random ? "Random" : "PopRnd";
  return rep;
}

}  // namespace crossrec

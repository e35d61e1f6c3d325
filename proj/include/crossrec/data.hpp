#pragma once

// Raw-log ingestion, the global temporal split, per-user chronological
// sequences, and the bipartite interaction graph.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace crossrec {

struct Interaction {
  int user{0};
  int item{0};
  std::int64_t timestamp{0};
  double weight{0.0};  // optional rating; unused by the default pipeline
};

struct InteractionLog {
  std::vector<Interaction> interactions;
  std::vector<std::string> user_keys;  // dense id -> original string
  std::vector<std::string> item_keys;
  int num_users() const { return static_cast<int>(user_keys.size()); }
  int num_items() const { return static_cast<int>(item_keys.size()); }
};

struct IngestOptions {
  char delimiter{'\t'};
  bool has_header{false};
  // File column order; allowed names: user, item, timestamp, rating, skip.
  std::vector<std::string> columns{"user", "item", "timestamp"};
};

struct DatasetBundle {
  std::vector<Interaction> train;
  std::vector<Interaction> validation;
  std::vector<Interaction> test;
  int num_users{0};  // all users in the raw log
  int num_items{0};  // items in the vocabulary (train, or train+val when final)
  std::int64_t t_val{0};
  std::int64_t t_test{0};
  bool vocab_includes_val{false};
  std::vector<std::string> user_keys;
  std::vector<std::string> item_keys;  // vocabulary id -> original string
  // Interactions dropped because their item is outside the vocabulary.
  std::int64_t dropped_val{0};
  std::int64_t dropped_test{0};
  // Per-user chronological training items (stable order).
  std::vector<std::vector<int>> user_sequences;
};

struct BipartiteGraph {
  int num_users{0};
  int num_items{0};
  std::vector<std::pair<int, int>> edges;  // deduplicated (user, item)
  std::vector<int> user_degree;
  std::vector<int> item_degree;
  std::vector<double> norm_coefficients;  // 1/sqrt(deg(u)*deg(i)) per edge
};

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

inline InteractionLog ingest(const std::string& path, const IngestOptions& opt = {}) {
  std::ifstream in(path);
  if (!in.is_open()) throw std::runtime_error("ingest: cannot open file: " + path);

  int col_user = -1, col_item = -1, col_ts = -1, col_rating = -1;
  for (int i = 0; i < static_cast<int>(opt.columns.size()); ++i) {
    const std::string& c = opt.columns[i];
    if (c == "user") col_user = i;
    else if (c == "item") col_item = i;
    else if (c == "timestamp") col_ts = i;
    else if (c == "rating") col_rating = i;
    else if (c != "skip")
      throw std::invalid_argument("ingest: unknown column name: " + c);
  }
  if (col_user < 0 || col_item < 0 || col_ts < 0)
    throw std::invalid_argument("ingest: columns must include user, item, timestamp");

  InteractionLog log;
  std::unordered_map<std::string, int> user_ids, item_ids;
  std::string line;
  std::int64_t line_no = 0;
  bool skipped_header = false;

  auto fail = [&](const std::string& what) {
    throw std::runtime_error("ingest: " + path + ":" + std::to_string(line_no) + ": " + what);
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (opt.has_header && !skipped_header) {
      skipped_header = true;
      continue;
    }
    if (line.empty()) continue;

    std::vector<std::string> fields;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, opt.delimiter)) fields.push_back(field);
    if (static_cast<int>(fields.size()) < static_cast<int>(opt.columns.size()))
      fail("expected " + std::to_string(opt.columns.size()) + " fields, got " +
           std::to_string(fields.size()));

    Interaction rec;
    const std::string& user_key = fields[col_user];
    const std::string& item_key = fields[col_item];
    if (user_key.empty() || item_key.empty()) fail("empty user or item id");

    try {
      size_t pos = 0;
      rec.timestamp = std::stoll(fields[col_ts], &pos);
      if (pos != fields[col_ts].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      fail("non-integer timestamp '" + fields[col_ts] + "'");
    }
    if (rec.timestamp < 0) fail("negative timestamp");

    if (col_rating >= 0 && !fields[col_rating].empty()) {
      try {
        rec.weight = std::stod(fields[col_rating]);
      } catch (const std::exception&) {
        fail("non-numeric rating '" + fields[col_rating] + "'");
      }
    }

    auto [uit, unew] = user_ids.try_emplace(user_key, static_cast<int>(log.user_keys.size()));
    if (unew) log.user_keys.push_back(user_key);
    rec.user = uit->second;
    auto [iit, inew] = item_ids.try_emplace(item_key, static_cast<int>(log.item_keys.size()));
    if (inew) log.item_keys.push_back(item_key);
    rec.item = iit->second;

    log.interactions.push_back(rec);
  }
  if (log.interactions.empty()) throw std::runtime_error("ingest: empty file: " + path);
  return log;
}

// ---------------------------------------------------------------------------
// temporal split
// ---------------------------------------------------------------------------

// Timestamp at global quantile q: element floor(q*n) of the sorted timestamps.
inline std::int64_t timestamp_quantile(std::vector<std::int64_t> ts, double q) {
  std::sort(ts.begin(), ts.end());
  auto idx = static_cast<size_t>(std::floor(q * static_cast<double>(ts.size())));
  idx = std::min(idx, ts.size() - 1);
  return ts[idx];
}

// Splits the log by global time. Train takes timestamp < t_val, validation
// [t_val, t_test), test >= t_test. The item vocabulary covers train only, or
// train+validation when final_retrain is set; out-of-vocabulary validation
// and test interactions are dropped and counted. All users stay in the
// vocabulary regardless of which split their activity lands in.
inline DatasetBundle temporal_split(const InteractionLog& log, double val_quantile,
                                    double test_quantile, bool final_retrain = false) {
  if (log.interactions.empty()) throw std::invalid_argument("temporal_split: empty log");
  if (!(val_quantile > 0.0 && val_quantile < 1.0) ||
      !(test_quantile > 0.0 && test_quantile < 1.0))
    throw std::invalid_argument("temporal_split: quantiles must lie in (0,1)");
  if (!(val_quantile < test_quantile))
    throw std::invalid_argument("temporal_split: val_quantile must be < test_quantile");

  std::vector<std::int64_t> ts;
  ts.reserve(log.interactions.size());
  for (const auto& r : log.interactions) ts.push_back(r.timestamp);
  const std::int64_t t_val = timestamp_quantile(ts, val_quantile);
  const std::int64_t t_test = timestamp_quantile(ts, test_quantile);

  DatasetBundle b;
  b.t_val = t_val;
  b.t_test = t_test;
  b.vocab_includes_val = final_retrain;
  b.num_users = log.num_users();
  b.user_keys = log.user_keys;

  // Vocabulary pass: items appearing before the relevant boundary.
  const std::int64_t vocab_boundary = final_retrain ? t_test : t_val;
  std::vector<int> item_map(log.num_items(), -1);
  for (const auto& r : log.interactions) {
    if (r.timestamp < vocab_boundary && item_map[r.item] < 0) {
      item_map[r.item] = static_cast<int>(b.item_keys.size());
      b.item_keys.push_back(log.item_keys[r.item]);
    }
  }
  b.num_items = static_cast<int>(b.item_keys.size());

  for (const auto& r : log.interactions) {
    Interaction m = r;
    m.item = item_map[r.item];
    if (r.timestamp < t_val) {
      b.train.push_back(m);  // always in vocabulary by construction
    } else if (r.timestamp < t_test) {
      if (m.item < 0) {
        ++b.dropped_val;
        continue;
      }
      if (final_retrain)
        b.train.push_back(m);
      else
        b.validation.push_back(m);
    } else {
      if (m.item < 0) {
        ++b.dropped_test;
        continue;
      }
      b.test.push_back(m);
    }
  }

  if (b.train.empty()) throw std::runtime_error("temporal_split: train split is empty");
  if (!final_retrain && b.validation.empty())
    throw std::runtime_error("temporal_split: validation split is empty");
  if (b.test.empty()) throw std::runtime_error("temporal_split: test split is empty");

  // Chronological per-user training sequences; stable sort keeps input order
  // for equal timestamps.
  std::vector<std::vector<std::pair<std::int64_t, int>>> seq(b.num_users);
  for (const auto& r : b.train) seq[r.user].emplace_back(r.timestamp, r.item);
  b.user_sequences.resize(b.num_users);
  for (int u = 0; u < b.num_users; ++u) {
    std::stable_sort(seq[u].begin(), seq[u].end(),
                     [](const auto& a, const auto& c) { return a.first < c.first; });
    b.user_sequences[u].reserve(seq[u].size());
    for (const auto& [t, i] : seq[u]) b.user_sequences[u].push_back(i);
  }
  return b;
}

// ---------------------------------------------------------------------------
// sequences and graph
// ---------------------------------------------------------------------------

// Most recent max_len items per user; always a suffix of the full history.
inline std::vector<std::vector<int>> build_sequences(const DatasetBundle& bundle,
                                                     int max_len) {
  if (max_len < 1) throw std::invalid_argument("build_sequences: max_len must be >= 1");
  std::vector<std::vector<int>> out(bundle.user_sequences.size());
  for (size_t u = 0; u < bundle.user_sequences.size(); ++u) {
    const auto& h = bundle.user_sequences[u];
    const size_t keep = std::min<size_t>(h.size(), static_cast<size_t>(max_len));
    out[u].assign(h.end() - static_cast<std::ptrdiff_t>(keep), h.end());
  }
  return out;
}

// Bipartite graph over the ceil(fraction * |H_u|) most recent training
// interactions of each user, with (user, item) pairs deduplicated and
// symmetric square-root degree normalization per edge.
inline BipartiteGraph build_graph(const DatasetBundle& bundle, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("build_graph: fraction must lie in (0,1]");

  BipartiteGraph g;
  g.num_users = bundle.num_users;
  g.num_items = bundle.num_items;
  g.user_degree.assign(bundle.num_users, 0);
  g.item_degree.assign(bundle.num_items, 0);

  for (int u = 0; u < bundle.num_users; ++u) {
    const auto& h = bundle.user_sequences[u];
    if (h.empty()) continue;
    const auto keep = static_cast<size_t>(
        std::ceil(fraction * static_cast<double>(h.size())));
    std::unordered_set<int> seen;
    for (size_t k = h.size() - keep; k < h.size(); ++k) {
      if (seen.insert(h[k]).second) g.edges.emplace_back(u, h[k]);
    }
  }
  if (g.edges.empty()) throw std::runtime_error("build_graph: graph is empty");

  std::sort(g.edges.begin(), g.edges.end());
  for (const auto& [u, i] : g.edges) {
    ++g.user_degree[u];
    ++g.item_degree[i];
  }
  g.norm_coefficients.reserve(g.edges.size());
  for (const auto& [u, i] : g.edges)
    g.norm_coefficients.push_back(
        1.0 / std::sqrt(static_cast<double>(g.user_degree[u]) *
                        static_cast<double>(g.item_degree[i])));
  return g;
}

// Sorted training-item sets, used for negative-sampling rejection and for
// masking already-seen items at recommendation time.
inline std::vector<std::vector<int>> user_item_sets(const DatasetBundle& bundle) {
  std::vector<std::vector<int>> sets(bundle.num_users);
  for (size_t u = 0; u < bundle.user_sequences.size(); ++u) {
    sets[u] = bundle.user_sequences[u];
    std::sort(sets[u].begin(), sets[u].end());
    sets[u].erase(std::unique(sets[u].begin(), sets[u].end()), sets[u].end());
  }
  return sets;
}

}  // namespace crossrec

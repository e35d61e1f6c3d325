#pragma once

// Global user/item representations from the bipartite interaction graph.
// LightGCN mode propagates the shared tables through the normalized
// adjacency and scores BPR on the propagated outputs; UltraGCN mode is
// propagation-free and couples the raw tables through degree-weighted
// link-prediction constraints plus an item-item co-occurrence term.

#include <crossrec/autodiff.hpp>
#include <crossrec/data.hpp>
#include <crossrec/embedding.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <vector>

namespace crossrec {

enum class GraphMode { lightgcn, ultragcn };

struct GraphEncoderConfig {
  GraphMode mode{GraphMode::lightgcn};
  int num_layers{2};       // propagation depth K (lightgcn)
  int num_negatives{1};    // negatives per positive
  double lambda_reg{0.0};  // BPR L2 weight
  double lambda_c{1.0};    // UltraGCN constraint weight
  double gamma_i{1.0};     // UltraGCN item-item weight
  int ii_topk{10};         // UltraGCN item-item neighborhood size
  bool score_raw{false};   // BPR on raw tables instead of propagated outputs

  void validate() const {
    if (num_layers < 0) throw std::invalid_argument("GraphEncoderConfig: K must be >= 0");
    if (num_negatives < 1)
      throw std::invalid_argument("GraphEncoderConfig: num_negatives must be positive");
    if (lambda_reg < 0 || lambda_c < 0 || gamma_i < 0)
      throw std::invalid_argument("GraphEncoderConfig: weights must be non-negative");
    if (ii_topk < 1) throw std::invalid_argument("GraphEncoderConfig: ii_topk must be positive");
  }
};

// Propagated embeddings as one stacked Var: rows [0, M) are users, rows
// [M, M+N) are items.
struct GraphState {
  Var stacked;
  int num_users{0};
  int num_items{0};

  Var users(Tape& tape) const { return tape.slice_rows(stacked, 0, num_users); }
  Var items(Tape& tape) const { return tape.slice_rows(stacked, num_users, num_items); }
};

namespace detail {

// One application of the symmetric-normalized bipartite adjacency to a
// stacked (M+N) x d matrix. The operator is symmetric, so backward reuses it.
inline Mat adjacency_apply(const BipartiteGraph& g, const Mat& x) {
  Mat out = Mat::Zero(x.rows(), x.cols());
  for (size_t e = 0; e < g.edges.size(); ++e) {
    const auto& [u, i] = g.edges[e];
    const double w = g.norm_coefficients[e];
    out.row(u) += w * x.row(g.num_users + i);
    out.row(g.num_users + i) += w * x.row(u);
  }
  return out;
}

inline Mat propagate_forward(const BipartiteGraph& g, const Mat& x, int k) {
  if (k == 0) return x;
  Mat acc = x;
  Mat cur = x;
  for (int l = 1; l <= k; ++l) {
    cur = adjacency_apply(g, cur);
    acc += cur;
  }
  return acc / static_cast<double>(k + 1);
}

}  // namespace detail

// Mean of propagation layers 0..K applied to a stacked embedding Var.
// K = 0 is the bit-exact identity. The graph must outlive the tape.
inline Var propagate(Tape& tape, Var stacked, const BipartiteGraph& graph, int k) {
  const Mat& x = tape.val(stacked);
  if (x.rows() != graph.num_users + graph.num_items)
    throw std::invalid_argument("propagate: stacked rows != M + N");
  if (k == 0) return stacked;
  Mat y = detail::propagate_forward(graph, x, k);
  // The mean of adjacency powers is symmetric, so the adjoint is the same
  // propagation applied to the incoming gradient.
  return tape.custom_linear_symmetric(
      stacked, std::move(y),
      [gp = &graph, k](const Mat& grad) { return detail::propagate_forward(*gp, grad, k); });
}

// LightGCN propagation over the shared tables (item padding row excluded).
inline GraphState propagate_tables(Tape& tape, EmbeddingTables& tables,
                                   const BipartiteGraph& graph, int k) {
  Var users = tape.use(tables.user_table);
  Var items = tape.slice_rows(tape.use(tables.item_table), 1, tables.num_items());
  Var stacked = tape.concat_rows(users, items);
  return GraphState{propagate(tape, stacked, graph, k), graph.num_users, graph.num_items};
}

// ---------------------------------------------------------------------------
// Negative sampling
// ---------------------------------------------------------------------------

// Uniform over the catalog with rejection against the user's training set.
// Users whose history covers the whole catalog yield no sample.
inline bool sample_negative(int num_items, const std::vector<int>& sorted_user_items,
                            std::mt19937_64& rng, int* out) {
  if (static_cast<int>(sorted_user_items.size()) >= num_items) return false;
  std::uniform_int_distribution<int> pick(0, num_items - 1);
  for (;;) {
    const int j = pick(rng);
    if (!std::binary_search(sorted_user_items.begin(), sorted_user_items.end(), j)) {
      *out = j;
      return true;
    }
  }
}

struct GraphBatch {
  std::vector<int> users;      // per positive
  std::vector<int> pos_items;  // per positive
  std::vector<int> neg_items;  // num_negatives per positive, flattened
  int num_negatives{1};
};

inline GraphBatch sample_graph_batch(const std::vector<std::pair<int, int>>& positives,
                                     const std::vector<std::vector<int>>& user_items,
                                     int num_items, int num_negatives,
                                     std::mt19937_64& rng) {
  GraphBatch b;
  b.num_negatives = num_negatives;
  for (const auto& [u, i] : positives) {
    std::vector<int> negs;
    bool ok = true;
    for (int n = 0; n < num_negatives; ++n) {
      int j;
      if (!sample_negative(num_items, user_items[u], rng, &j)) {
        ok = false;  // saturated user: skip the positive entirely
        break;
      }
      negs.push_back(j);
    }
    if (!ok) continue;
    b.users.push_back(u);
    b.pos_items.push_back(i);
    b.neg_items.insert(b.neg_items.end(), negs.begin(), negs.end());
  }
  return b;
}

// ---------------------------------------------------------------------------
// BPR
// ---------------------------------------------------------------------------

// Mean over (u, i, j) triples of -ln sigma(s_ui - s_uj), plus
// lambda_reg * mean squared L2 of the batch's raw user and positive-item
// embedding rows. Scores use the propagated state unless score_raw is set.
inline Var bpr_loss(Tape& tape, EmbeddingTables& tables, const GraphState& state,
                    const GraphBatch& batch, const GraphEncoderConfig& cfg) {
  if (batch.users.empty()) throw std::invalid_argument("bpr_loss: empty batch");
  const Var user_src = cfg.score_raw ? tape.use(tables.user_table) : state.users(tape);
  const Var item_src = cfg.score_raw
                           ? tape.slice_rows(tape.use(tables.item_table), 1, tables.num_items())
                           : state.items(tape);

  // Expand users per negative so one dot_rows call covers all triples.
  std::vector<int> users_rep, pos_rep;
  for (size_t p = 0; p < batch.users.size(); ++p)
    for (int n = 0; n < batch.num_negatives; ++n) {
      users_rep.push_back(batch.users[p]);
      pos_rep.push_back(batch.pos_items[p]);
    }
  Var u_rows = tape.gather_rows(user_src, users_rep);
  Var i_rows = tape.gather_rows(item_src, pos_rep);
  Var j_rows = tape.gather_rows(item_src, batch.neg_items);
  Var diff = tape.sub(tape.dot_rows(u_rows, i_rows), tape.dot_rows(u_rows, j_rows));
  Var loss = tape.mean_all(tape.softplus(tape.scale(diff, -1.0)));

  if (cfg.lambda_reg > 0.0) {
    Var raw_users = tape.gather_rows(tape.use(tables.user_table), batch.users);
    std::vector<int> pos_tokens;
    for (int i : batch.pos_items) pos_tokens.push_back(EmbeddingTables::token_of(i));
    Var raw_items = tape.gather_rows(tape.use(tables.item_table), pos_tokens);
    Var reg = tape.add(tape.mean_row_sqnorm(raw_users), tape.mean_row_sqnorm(raw_items));
    loss = tape.add(loss, tape.scale(reg, cfg.lambda_reg));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// UltraGCN
// ---------------------------------------------------------------------------

struct ItemItemGraph {
  // Per item: up to topk (neighbor, weight) pairs, by descending weight.
  std::vector<std::vector<std::pair<int, double>>> neighbors;
};

// Co-occurrence graph G = A^T A over training interactions with the
// normalized weight omega(i,j) = (G_ij / (g_i - G_ii)) * sqrt(g_i / g_j),
// g_i the co-occurrence row sum; keeps the topk heaviest neighbors per item.
inline ItemItemGraph build_ii_graph(const BipartiteGraph& graph, int topk) {
  if (topk < 1) throw std::invalid_argument("build_ii_graph: topk must be positive");
  std::vector<std::vector<int>> items_of_user(graph.num_users);
  for (const auto& [u, i] : graph.edges) items_of_user[u].push_back(i);

  // Sparse G = A^T A accumulated pairwise; desk-scale histories keep this
  // quadratic blow-up small.
  std::vector<std::map<int, double>> g(graph.num_items);
  for (const auto& items : items_of_user)
    for (int a : items)
      for (int b : items) g[a][b] += 1.0;

  std::vector<double> row_sum(graph.num_items, 0.0);
  for (int i = 0; i < graph.num_items; ++i)
    for (const auto& [j, w] : g[i]) row_sum[i] += w;

  ItemItemGraph ii;
  ii.neighbors.resize(graph.num_items);
  for (int i = 0; i < graph.num_items; ++i) {
    const double self = g[i].count(i) ? g[i][i] : 0.0;
    const double denom = row_sum[i] - self;
    if (denom <= 0.0) continue;  // no co-occurrences beyond itself
    std::vector<std::pair<int, double>> weighted;
    for (const auto& [j, w] : g[i]) {
      if (j == i || row_sum[j] <= 0.0) continue;
      weighted.emplace_back(j, (w / denom) * std::sqrt(row_sum[i] / row_sum[j]));
    }
    std::sort(weighted.begin(), weighted.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    if (static_cast<int>(weighted.size()) > topk) weighted.resize(topk);
    ii.neighbors[i] = std::move(weighted);
  }
  return ii;
}

// Degree coefficient from the infinite-layer limit of message passing.
inline double ultragcn_beta(int deg_u, int deg_i) {
  return (1.0 / std::max(1.0, static_cast<double>(deg_u))) *
         std::sqrt(static_cast<double>(deg_u + 1) / static_cast<double>(deg_i + 1));
}

// L = L_O + lambda_c * L_C + gamma_i * L_I over the raw shared tables.
//  L_O: mean binary cross-entropy with logits over positives and sampled
//       negatives; L_C: the same terms weighted by the degree coefficients;
//  L_I: mean over (positive, item-neighbor) pairs of
//       -omega(i,j) * ln sigma(<e_u, e_j>).
inline Var ultragcn_loss(Tape& tape, EmbeddingTables& tables, const GraphBatch& batch,
                         const ItemItemGraph& ii, const BipartiteGraph& graph,
                         const GraphEncoderConfig& cfg) {
  if (batch.users.empty()) throw std::invalid_argument("ultragcn_loss: empty batch");
  Var users_tbl = tape.use(tables.user_table);
  Var items_tbl = tape.use(tables.item_table);

  auto item_rows = [&](const std::vector<int>& items) {
    std::vector<int> tokens;
    tokens.reserve(items.size());
    for (int i : items) tokens.push_back(EmbeddingTables::token_of(i));
    return tape.gather_rows(items_tbl, tokens);
  };

  const size_t p = batch.users.size();
  Var u_pos = tape.gather_rows(users_tbl, batch.users);
  Var s_pos = tape.dot_rows(u_pos, item_rows(batch.pos_items));

  std::vector<int> users_rep;
  for (size_t k = 0; k < p; ++k)
    for (int n = 0; n < batch.num_negatives; ++n) users_rep.push_back(batch.users[k]);
  Var u_neg = tape.gather_rows(users_tbl, users_rep);
  Var s_neg = tape.dot_rows(u_neg, item_rows(batch.neg_items));

  // L_O: -ln sigma(s_pos) and -ln sigma(-s_neg), mean over each side.
  Var l_o = tape.add(tape.mean_all(tape.softplus(tape.scale(s_pos, -1.0))),
                     tape.mean_all(tape.softplus(s_neg)));
  Var total = l_o;

  if (cfg.lambda_c > 0.0) {
    Mat beta_pos(p, 1);
    for (size_t k = 0; k < p; ++k)
      beta_pos(k, 0) = ultragcn_beta(graph.user_degree[batch.users[k]],
                                     graph.item_degree[batch.pos_items[k]]);
    Mat beta_neg(batch.neg_items.size(), 1);
    for (size_t k = 0; k < batch.neg_items.size(); ++k)
      beta_neg(k, 0) = ultragcn_beta(graph.user_degree[users_rep[k]],
                                     graph.item_degree[batch.neg_items[k]]);
    Var l_c = tape.add(
        tape.mean_all(tape.hadamard_const(tape.softplus(tape.scale(s_pos, -1.0)), beta_pos)),
        tape.mean_all(tape.hadamard_const(tape.softplus(s_neg), beta_neg)));
    total = tape.add(total, tape.scale(l_c, cfg.lambda_c));
  }

  if (cfg.gamma_i > 0.0) {
    std::vector<int> ii_users, ii_items;
    std::vector<double> ii_w;
    for (size_t k = 0; k < p; ++k)
      for (const auto& [j, w] : ii.neighbors[batch.pos_items[k]]) {
        ii_users.push_back(batch.users[k]);
        ii_items.push_back(j);
        ii_w.push_back(w);
      }
    if (!ii_users.empty()) {
      Var u_rows = tape.gather_rows(users_tbl, ii_users);
      Var s_ii = tape.dot_rows(u_rows, item_rows(ii_items));
      Mat w(ii_w.size(), 1);
      for (size_t k = 0; k < ii_w.size(); ++k) w(k, 0) = ii_w[k];
      Var l_i =
          tape.mean_all(tape.hadamard_const(tape.softplus(tape.scale(s_ii, -1.0)), w));
      total = tape.add(total, tape.scale(l_i, cfg.gamma_i));
    }
  }
  return total;
}

// Global user representation per batch user: propagated rows for LightGCN,
// raw user-table rows for the propagation-free UltraGCN.
inline Var global_user_repr(Tape& tape, EmbeddingTables& tables, const GraphState* state,
                            const std::vector<int>& users, const GraphEncoderConfig& cfg,
                            bool align_propagated = true) {
  for (int u : users)
    if (u < 0 || u >= tables.num_users())
      throw std::out_of_range("global_user_repr: unknown user " + std::to_string(u));
  if (cfg.mode == GraphMode::lightgcn && align_propagated) {
    if (state == nullptr)
      throw std::invalid_argument("global_user_repr: propagated state required");
    return tape.gather_rows(state->users(tape), users);
  }
  return tape.gather_rows(tape.use(tables.user_table), users);
}

}  // namespace crossrec

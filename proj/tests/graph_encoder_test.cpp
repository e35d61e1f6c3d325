#include <crossrec/graph_encoder.hpp>

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "oracles.hpp"

using namespace crossrec;
using oracles::max_abs_diff;
using oracles::max_rel_err;
using oracles::mat_eq;

namespace {

BipartiteGraph graph_from_edges(int m, int n, std::vector<std::pair<int, int>> edges) {
  BipartiteGraph g;
  g.num_users = m;
  g.num_items = n;
  std::sort(edges.begin(), edges.end());
  g.edges = std::move(edges);
  g.user_degree.assign(m, 0);
  g.item_degree.assign(n, 0);
  for (const auto& [u, i] : g.edges) {
    ++g.user_degree[u];
    ++g.item_degree[i];
  }
  for (const auto& [u, i] : g.edges)
    g.norm_coefficients.push_back(1.0 / std::sqrt(double(g.user_degree[u]) *
                                                  double(g.item_degree[i])));
  return g;
}

// Dense oracle: stack A_hat = D^-1/2 A D^-1/2 into the (M+N) square
// adjacency, average the powers 0..K, apply to the stacked embeddings.
Mat dense_propagate(const BipartiteGraph& g, const Mat& x, int k) {
  const int n = g.num_users + g.num_items;
  Mat a = Mat::Zero(n, n);
  for (size_t e = 0; e < g.edges.size(); ++e) {
    const auto& [u, i] = g.edges[e];
    a(u, g.num_users + i) = g.norm_coefficients[e];
    a(g.num_users + i, u) = g.norm_coefficients[e];
  }
  Mat acc = Mat::Identity(n, n);
  Mat power = Mat::Identity(n, n);
  for (int l = 1; l <= k; ++l) {
    power = power * a;
    acc += power;
  }
  return (acc / double(k + 1)) * x;
}

Mat random_mat(int r, int c, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

TEST(Propagate, KZeroIsBitIdentical) {
  auto g = graph_from_edges(2, 2, {{0, 0}, {1, 1}, {0, 1}});
  Mat x = random_mat(4, 3, 1);
  Tape t;
  Var in = t.leaf(x);
  Var out = propagate(t, in, g, 0);
  EXPECT_EQ(in.id, out.id);
  EXPECT_TRUE(mat_eq(t.val(out), x));
}

TEST(Propagate, SingleEdgeHandCase) {
  // One edge (u0, i0), K=1: both endpoints average their own embedding with
  // the neighbor's (norm coefficient 1).
  auto g = graph_from_edges(1, 1, {{0, 0}});
  Mat x = random_mat(2, 4, 2);
  Tape t;
  Var out = propagate(t, t.leaf(x), g, 1);
  Mat expect(2, 4);
  expect.row(0) = 0.5 * (x.row(0) + x.row(1));
  expect.row(1) = 0.5 * (x.row(1) + x.row(0));
  EXPECT_LT(max_abs_diff(t.val(out), expect), 1e-12);
}

TEST(Propagate, PathGraphMatchesDenseOracle) {
  // 2 users / 2 items in a path: u0-i0, u1-i0, u1-i1.
  auto g = graph_from_edges(2, 2, {{0, 0}, {1, 0}, {1, 1}});
  Mat x = random_mat(4, 5, 3);
  for (int k : {0, 1, 2, 3}) {
    Tape t;
    Var out = propagate(t, t.leaf(x), g, k);
    EXPECT_LT(max_abs_diff(t.val(out), dense_propagate(g, x, k)), 1e-6) << "K=" << k;
  }
}

TEST(Propagate, LinearityAndGradient) {
  auto g = graph_from_edges(3, 3, {{0, 0}, {0, 1}, {1, 1}, {2, 2}, {1, 2}});
  Mat x = random_mat(6, 4, 4);
  {
    Tape t;
    Var a = propagate(t, t.leaf(x), g, 2);
    Var b = propagate(t, t.leaf(Mat(2.5 * x)), g, 2);
    EXPECT_LT(max_abs_diff(t.val(b), 2.5 * t.val(a)), 1e-9);
  }
  // Backward equals the dense-oracle adjoint.
  auto fn = [&](const std::vector<Mat>& xs) {
    Tape t;
    return t.val(t.mean_all(propagate(t, t.leaf(xs[0]), g, 2)))(0, 0);
  };
  Tape t;
  Var in = t.leaf(x);
  Var loss = t.mean_all(propagate(t, in, g, 2));
  t.backward(loss);
  auto fd = oracles::fd_gradients(fn, {x});
  EXPECT_LT(max_rel_err(t.grad(in), fd[0]), 1e-6);
}

TEST(Propagate, PermutationEquivariance) {
  auto g = graph_from_edges(2, 3, {{0, 0}, {0, 2}, {1, 1}, {1, 2}});
  Mat x = random_mat(5, 4, 5);
  // Relabel items by the permutation p: new id = p[old id].
  std::vector<int> p{2, 0, 1};
  std::vector<std::pair<int, int>> edges;
  for (auto [u, i] : g.edges) edges.emplace_back(u, p[i]);
  auto g2 = graph_from_edges(2, 3, edges);
  Mat x2 = x;
  for (int i = 0; i < 3; ++i) x2.row(2 + p[i]) = x.row(2 + i);

  Tape t;
  Mat out = t.val(propagate(t, t.leaf(x), g, 2));
  Mat out2 = t.val(propagate(t, t.leaf(x2), g2, 2));
  for (int i = 0; i < 3; ++i)
    EXPECT_LT(max_abs_diff(out.row(2 + i), out2.row(2 + p[i])), 1e-12);
  for (int u = 0; u < 2; ++u)
    EXPECT_LT(max_abs_diff(out.row(u), out2.row(u)), 1e-12);
}

TEST(Propagate, IsolatedNodeKeepsScaledEmbedding) {
  // Item 2 has no edges: higher layers contribute nothing, so the output is
  // e / (K+1) exactly.
  auto g = graph_from_edges(2, 3, {{0, 0}, {1, 1}});
  Mat x = random_mat(5, 4, 6);
  for (int k : {1, 2, 4}) {
    Tape t;
    Var out = propagate(t, t.leaf(x), g, k);
    EXPECT_LT(max_abs_diff(t.val(out).row(4), x.row(4) / double(k + 1)), 1e-12) << k;
  }
}

TEST(PropagateTables, MatchesManualStack) {
  EmbeddingTables tables(2, 2, 4, 6);
  tables.init(7);
  auto g = graph_from_edges(2, 2, {{0, 0}, {1, 0}, {1, 1}});
  Tape t;
  auto state = propagate_tables(t, tables, g, 2);
  Mat stacked(4, 6);
  stacked.topRows(2) = tables.user_table.value;
  stacked.bottomRows(2) = tables.item_table.value.middleRows(1, 2);
  EXPECT_LT(max_abs_diff(t.val(state.stacked), dense_propagate(g, stacked, 2)), 1e-9);
}

GraphBatch tiny_batch(std::vector<int> users, std::vector<int> pos, std::vector<int> neg,
                      int num_neg = 1) {
  GraphBatch b;
  b.users = std::move(users);
  b.pos_items = std::move(pos);
  b.neg_items = std::move(neg);
  b.num_negatives = num_neg;
  return b;
}

TEST(Bpr, EqualScoresGiveLnTwo) {
  EmbeddingTables tables(2, 3, 4, 4);
  tables.init(8);
  // With zeroed tables every score is 0, so each triple contributes ln 2.
  tables.user_table.value.setZero();
  tables.item_table.value.setZero();
  auto g = graph_from_edges(2, 3, {{0, 0}, {1, 1}});
  GraphEncoderConfig cfg;
  cfg.num_layers = 0;
  Tape t;
  auto state = propagate_tables(t, tables, g, 0);
  Var loss = bpr_loss(t, tables, state, tiny_batch({0, 1}, {0, 1}, {2, 2}), cfg);
  EXPECT_NEAR(t.val(loss)(0, 0), std::log(2.0), 1e-12);
}

TEST(Bpr, LargeMarginDrivesLossToZero) {
  EmbeddingTables tables(1, 2, 4, 2);
  tables.init(9);
  tables.user_table.value << 10.0, 0.0;
  tables.item_table.value.row(1) << 10.0, 0.0;   // positive, score 100
  tables.item_table.value.row(2) << -10.0, 0.0;  // negative, score -100
  auto g = graph_from_edges(1, 2, {{0, 0}});
  GraphEncoderConfig cfg;
  Tape t;
  auto state = propagate_tables(t, tables, g, 0);
  Var loss = bpr_loss(t, tables, state, tiny_batch({0}, {0}, {1}), cfg);
  EXPECT_LT(t.val(loss)(0, 0), 1e-12);
}

TEST(Bpr, SigmaComplement) {
  // sigma(x) + sigma(-x) = 1 numerically: swapping the roles of positive
  // and negative complements the per-triple probability.
  for (double x : {-3.0, -0.5, 0.0, 0.7, 4.0}) {
    const double a = std::exp(-(std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x)))));
    const double b = std::exp(-(std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)))));
    // a = sigma(x) via -softplus(-x), b = sigma(-x).
    EXPECT_NEAR(a + b, 1.0, 1e-12);
  }
}

TEST(Bpr, GradientMatchesFiniteDifferences) {
  // 3 users / 4 items, propagated scoring with the L2 term enabled.
  EmbeddingTables tables(3, 4, 4, 5);
  tables.init(10);
  auto g = graph_from_edges(3, 4, {{0, 0}, {0, 1}, {1, 1}, {1, 2}, {2, 3}});
  GraphEncoderConfig cfg;
  cfg.num_layers = 2;
  cfg.lambda_reg = 0.1;
  auto batch = tiny_batch({0, 1, 2}, {0, 2, 3}, {3, 0, 1});

  auto eval = [&]() {
    Tape t;
    auto state = propagate_tables(t, tables, g, cfg.num_layers);
    return bpr_loss(t, tables, state, batch, cfg);
  };
  Tape t;
  auto state = propagate_tables(t, tables, g, cfg.num_layers);
  Var loss = bpr_loss(t, tables, state, batch, cfg);
  t.backward(loss);
  Mat gu = tables.user_table.grad, gi = tables.item_table.grad;

  auto fn = [&](const std::vector<Mat>& xs) {
    Mat su = tables.user_table.value, si = tables.item_table.value;
    tables.user_table.value = xs[0];
    tables.item_table.value = xs[1];
    Tape t2;
    auto st = propagate_tables(t2, tables, g, cfg.num_layers);
    const double out = t2.val(bpr_loss(t2, tables, st, batch, cfg))(0, 0);
    tables.user_table.value = su;
    tables.item_table.value = si;
    return out;
  };
  auto fd = oracles::fd_gradients(fn, {tables.user_table.value, tables.item_table.value});
  EXPECT_LT(max_rel_err(gu, fd[0], 1e-4), 1e-4);
  EXPECT_LT(max_rel_err(gi, fd[1], 1e-4), 1e-4);
}

TEST(IiGraph, ForcedNeighborhood) {
  // Two items always co-consumed and nothing else: each is the other's
  // sole neighbor.
  auto g = graph_from_edges(3, 2, {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {2, 0}, {2, 1}});
  auto ii = build_ii_graph(g, 5);
  ASSERT_EQ(ii.neighbors[0].size(), 1u);
  ASSERT_EQ(ii.neighbors[1].size(), 1u);
  EXPECT_EQ(ii.neighbors[0][0].first, 1);
  EXPECT_EQ(ii.neighbors[1][0].first, 0);
}

TEST(IiGraph, DisjointCommunitiesHaveNoCrossEdges) {
  auto g = graph_from_edges(4, 4, {{0, 0}, {0, 1}, {1, 0}, {1, 1},
                                   {2, 2}, {2, 3}, {3, 2}, {3, 3}});
  auto ii = build_ii_graph(g, 5);
  for (int i : {0, 1})
    for (const auto& [j, w] : ii.neighbors[i]) EXPECT_LT(j, 2);
  for (int i : {2, 3})
    for (const auto& [j, w] : ii.neighbors[i]) EXPECT_GE(j, 2);
}

TEST(IiGraph, FiveItemBruteForceOracle) {
  std::mt19937_64 rng(11);
  std::vector<std::pair<int, int>> edges;
  std::set<std::pair<int, int>> seen;
  for (int k = 0; k < 14; ++k) {
    std::pair<int, int> e{static_cast<int>(rng() % 4), static_cast<int>(rng() % 5)};
    if (seen.insert(e).second) edges.push_back(e);
  }
  auto g = graph_from_edges(4, 5, edges);
  auto ii = build_ii_graph(g, 3);

  // Dense A^T A and the weight formula.
  Mat a = Mat::Zero(4, 5);
  for (auto [u, i] : g.edges) a(u, i) = 1.0;
  Mat gmat = a.transpose() * a;
  for (int i = 0; i < 5; ++i) {
    const double gi = gmat.row(i).sum();
    const double denom = gi - gmat(i, i);
    std::vector<std::pair<int, double>> expect;
    if (denom > 0) {
      for (int j = 0; j < 5; ++j) {
        const double gj = gmat.row(j).sum();
        if (j == i || gmat(i, j) == 0.0 || gj <= 0.0) continue;
        expect.emplace_back(j, gmat(i, j) / denom * std::sqrt(gi / gj));
      }
      std::sort(expect.begin(), expect.end(), [](const auto& x, const auto& y) {
        if (x.second != y.second) return x.second > y.second;
        return x.first < y.first;
      });
      if (expect.size() > 3) expect.resize(3);
    }
    ASSERT_EQ(ii.neighbors[i].size(), expect.size()) << "item " << i;
    for (size_t k = 0; k < expect.size(); ++k) {
      EXPECT_EQ(ii.neighbors[i][k].first, expect[k].first);
      EXPECT_NEAR(ii.neighbors[i][k].second, expect[k].second, 1e-12);
    }
  }
}

TEST(UltraGcn, ZeroWeightsReduceToPlainBce) {
  EmbeddingTables tables(2, 3, 4, 4);
  tables.init(12);
  auto g = graph_from_edges(2, 3, {{0, 0}, {1, 1}, {1, 2}});
  auto ii = build_ii_graph(g, 3);
  GraphEncoderConfig cfg;
  cfg.mode = GraphMode::ultragcn;
  cfg.lambda_c = 0.0;
  cfg.gamma_i = 0.0;
  auto batch = tiny_batch({0, 1}, {0, 1}, {2, 0});
  Tape t;
  Var loss = ultragcn_loss(t, tables, batch, ii, g, cfg);

  // Oracle: mean softplus(-s_pos) + mean softplus(s_neg).
  auto score = [&](int u, int i) {
    return tables.user_table.value.row(u).dot(tables.item_table.value.row(i + 1));
  };
  auto sp = [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); };
  const double expect = 0.5 * (sp(-score(0, 0)) + sp(-score(1, 1))) +
                        0.5 * (sp(score(0, 2)) + sp(score(1, 0)));
  EXPECT_NEAR(t.val(loss)(0, 0), expect, 1e-12);
}

TEST(UltraGcn, AllZeroScoresGiveLnTwoPerPair) {
  EmbeddingTables tables(2, 3, 4, 4);
  tables.init(13);
  tables.user_table.value.setZero();
  auto g = graph_from_edges(2, 3, {{0, 0}, {1, 1}});
  auto ii = build_ii_graph(g, 3);
  GraphEncoderConfig cfg;
  cfg.mode = GraphMode::ultragcn;
  cfg.lambda_c = 0.0;
  cfg.gamma_i = 0.0;
  Tape t;
  Var loss = ultragcn_loss(t, tables, tiny_batch({0, 1}, {0, 1}, {2, 2}), ii, g, cfg);
  EXPECT_NEAR(t.val(loss)(0, 0), 2.0 * std::log(2.0), 1e-12);  // pos side + neg side
}

TEST(UltraGcn, GradientMatchesFiniteDifferences) {
  EmbeddingTables tables(3, 4, 4, 5);
  tables.init(14);
  auto g = graph_from_edges(3, 4, {{0, 0}, {0, 1}, {1, 1}, {1, 2}, {2, 3}, {2, 1}});
  auto ii = build_ii_graph(g, 2);
  GraphEncoderConfig cfg;
  cfg.mode = GraphMode::ultragcn;
  cfg.lambda_c = 0.7;
  cfg.gamma_i = 0.3;
  auto batch = tiny_batch({0, 1, 2}, {1, 2, 3}, {3, 0, 0});

  Tape t;
  Var loss = ultragcn_loss(t, tables, batch, ii, g, cfg);
  t.backward(loss);
  Mat gu = tables.user_table.grad, gi = tables.item_table.grad;

  auto fn = [&](const std::vector<Mat>& xs) {
    Mat su = tables.user_table.value, si = tables.item_table.value;
    tables.user_table.value = xs[0];
    tables.item_table.value = xs[1];
    Tape t2;
    const double out = t2.val(ultragcn_loss(t2, tables, batch, ii, g, cfg))(0, 0);
    tables.user_table.value = su;
    tables.item_table.value = si;
    return out;
  };
  auto fd = oracles::fd_gradients(fn, {tables.user_table.value, tables.item_table.value});
  EXPECT_LT(max_rel_err(gu, fd[0], 1e-4), 1e-4);
  EXPECT_LT(max_rel_err(gi, fd[1], 1e-4), 1e-4);
}

TEST(GlobalUserRepr, ModesAndLoopOracle) {
  EmbeddingTables tables(4, 3, 4, 6);
  tables.init(15);
  auto g = graph_from_edges(4, 3, {{0, 0}, {1, 1}, {2, 2}, {3, 0}});
  GraphEncoderConfig lgn;
  lgn.mode = GraphMode::lightgcn;
  lgn.num_layers = 0;
  Tape t;
  auto state = propagate_tables(t, tables, g, 0);
  // K=0 equals the raw user embedding.
  Var r = global_user_repr(t, tables, &state, {2, 0}, lgn);
  EXPECT_TRUE(mat_eq(t.val(r).row(0), tables.user_table.value.row(2)));
  EXPECT_TRUE(mat_eq(t.val(r).row(1), tables.user_table.value.row(0)));

  GraphEncoderConfig ugn;
  ugn.mode = GraphMode::ultragcn;
  Var r2 = global_user_repr(t, tables, nullptr, {1, 3}, ugn);
  EXPECT_TRUE(mat_eq(t.val(r2).row(0), tables.user_table.value.row(1)));
  EXPECT_TRUE(mat_eq(t.val(r2).row(1), tables.user_table.value.row(3)));

  // Batched equals per-user loop.
  GraphEncoderConfig deep;
  deep.num_layers = 2;
  Tape t3;
  auto st3 = propagate_tables(t3, tables, g, 2);
  Var batch = global_user_repr(t3, tables, &st3, {0, 1, 2, 3}, deep);
  for (int u = 0; u < 4; ++u) {
    Tape t4;
    auto st4 = propagate_tables(t4, tables, g, 2);
    Var one = global_user_repr(t4, tables, &st4, {u}, deep);
    EXPECT_TRUE(mat_eq(t3.val(batch).row(u), t4.val(one).row(0)));
  }

  EXPECT_THROW(global_user_repr(t, tables, &state, {9}, lgn), std::out_of_range);
}

TEST(NegativeSampling, RejectsSeenItemsAndSaturation) {
  std::mt19937_64 rng(16);
  std::vector<int> seen{0, 2, 4};
  for (int k = 0; k < 200; ++k) {
    int j = -1;
    ASSERT_TRUE(sample_negative(6, seen, rng, &j));
    EXPECT_TRUE(j == 1 || j == 3 || j == 5);
  }
  std::vector<int> all{0, 1, 2};
  int j;
  EXPECT_FALSE(sample_negative(3, all, rng, &j));
}

}  // namespace

#include <crossrec/training.hpp>

#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"

using namespace crossrec;
using oracles::mat_eq;
using oracles::max_rel_err;

namespace {

// Small synthetic world: users prefer items from their own block with a
// planted successor rule inside the block, split by global time.
DatasetBundle synthetic_bundle(int num_users, int num_items, int len, unsigned seed) {
  InteractionLog log;
  for (int u = 0; u < num_users; ++u) log.user_keys.push_back("u" + std::to_string(u));
  for (int i = 0; i < num_items; ++i) log.item_keys.push_back("i" + std::to_string(i));
  std::mt19937_64 rng(seed);
  for (int step = 0; step < len; ++step)
    for (int u = 0; u < num_users; ++u) {
      int item;
      if (step > 0 && !log.interactions.empty() &&
          static_cast<int>(rng() % 4) == 0) {
        item = static_cast<int>(rng() % num_items);
      } else {
        const int block = u % 4;
        item = block * (num_items / 4) + static_cast<int>(rng() % (num_items / 4));
      }
      log.interactions.push_back(
          {u, item, static_cast<std::int64_t>(step * 1000 + u), 0.0});
    }
  return temporal_split(log, 0.8, 0.9);
}

ModelConfig small_model_config(SeqMode seq_mode = SeqMode::causal,
                               GraphMode graph_mode = GraphMode::lightgcn) {
  ModelConfig cfg;
  cfg.dim = 16;
  cfg.seq.mode = seq_mode;
  cfg.seq.dim = 16;
  cfg.seq.num_layers = 1;
  cfg.seq.num_heads = 2;
  cfg.seq.ffn_dim = 32;
  cfg.seq.dropout = 0.0;
  cfg.seq.max_len = 8;
  cfg.graph.mode = graph_mode;
  cfg.graph.num_layers = 1;
  cfg.graph.num_negatives = graph_mode == GraphMode::ultragcn ? 4 : 1;
  cfg.graph.ii_topk = 4;
  return cfg;
}

TrainConfig small_train_config(int warmup, int epochs) {
  TrainConfig tc;
  tc.n_warmup = warmup;
  tc.epochs = epochs;
  tc.batch_size = 16;
  tc.lr = 2e-3;
  tc.seed = 11;
  tc.early_stop_patience = 100;
  tc.w_global = 1.0;
  tc.w_bt = 0.2;
  return tc;
}

std::uint64_t params_hash(Model& model) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto* p : model.parameters())
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      std::uint64_t bits;
      const double v = p->value.data()[i];
      std::memcpy(&bits, &v, sizeof(bits));
      h ^= bits;
      h *= 1099511628211ull;
    }
  return h;
}

std::uint64_t seq_params_hash(Model& model) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto* p : model.parameters()) {
    if (p->name == "user_table") continue;  // graph-only parameter
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      std::uint64_t bits;
      const double v = p->value.data()[i];
      std::memcpy(&bits, &v, sizeof(bits));
      h ^= bits;
      h *= 1099511628211ull;
    }
  }
  return h;
}

std::uint64_t transformer_hash(Model& model) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto* p : model.parameters()) {
    if (p->name.rfind("layer", 0) != 0 && p->name.rfind("final_ln", 0) != 0) continue;
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      std::uint64_t bits;
      const double v = p->value.data()[i];
      std::memcpy(&bits, &v, sizeof(bits));
      h ^= bits;
      h *= 1099511628211ull;
    }
  }
  return h;
}

TEST(Training, WarmupLeavesTransformerUntouchedButMovesItems) {
  auto bundle = synthetic_bundle(24, 16, 12, 3);
  auto graph = build_graph(bundle, 1.0);
  Model model(bundle.num_users, bundle.num_items, small_model_config());
  TrainConfig tc = small_train_config(1, 1);  // a single warm-up epoch
  Trainer trainer(model, bundle, graph, tc, AlignmentConfig{});

  model.init(tc.seed);
  const auto t_before = transformer_hash(model);
  Mat items_before = model.tables().item_table.value;

  auto log = trainer.fit();
  ASSERT_GE(log.epochs.size(), 1u);
  EXPECT_EQ(log.epochs[0].phase, "warmup");
  EXPECT_EQ(transformer_hash(model), t_before);
  EXPECT_GT((model.tables().item_table.value - items_before).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Training, ZeroWarmupSkipsPhase) {
  auto bundle = synthetic_bundle(24, 16, 12, 4);
  auto graph = build_graph(bundle, 1.0);
  Model model(bundle.num_users, bundle.num_items, small_model_config());
  TrainConfig tc = small_train_config(0, 2);
  Trainer trainer(model, bundle, graph, tc, AlignmentConfig{});
  auto log = trainer.fit();
  for (const auto& rec : log.epochs) EXPECT_EQ(rec.phase, "joint");
}

TEST(Training, PhaseDiscipline) {
  auto bundle = synthetic_bundle(24, 16, 12, 5);
  auto graph = build_graph(bundle, 1.0);
  Model model(bundle.num_users, bundle.num_items, small_model_config());
  TrainConfig tc = small_train_config(2, 4);
  Trainer trainer(model, bundle, graph, tc, AlignmentConfig{});
  auto log = trainer.fit();
  ASSERT_EQ(log.epochs.size(), 4u);
  for (int e = 0; e < 4; ++e) {
    EXPECT_EQ(log.epochs[e].phase, e < 2 ? "warmup" : "joint");
    if (log.epochs[e].phase == "joint") EXPECT_GT(log.epochs[e].l_local, 0.0);
  }
}

TEST(Training, DegenerateWeightsMatchSequentialOnlyBitwise) {
  auto bundle = synthetic_bundle(24, 16, 12, 6);
  auto graph = build_graph(bundle, 1.0);
  TrainConfig tc = small_train_config(0, 3);
  tc.w_global = 0.0;
  tc.w_bt = 0.0;

  Model joint(bundle.num_users, bundle.num_items, small_model_config());
  Trainer jt(joint, bundle, graph, tc, AlignmentConfig{});
  auto log_joint = jt.fit();

  Model seq(bundle.num_users, bundle.num_items, small_model_config());
  Trainer st(seq, bundle, graph, tc, AlignmentConfig{});
  auto log_seq = st.fit_sequential_only();

  EXPECT_EQ(seq_params_hash(joint), seq_params_hash(seq));
  ASSERT_EQ(log_joint.epochs.size(), log_seq.epochs.size());
  for (size_t e = 0; e < log_joint.epochs.size(); ++e)
    EXPECT_EQ(log_joint.epochs[e].l_local, log_seq.epochs[e].l_local);
}

TEST(Training, ZeroBtWeightEqualTrajectoriesUnderBothFlagSettings) {
  auto bundle = synthetic_bundle(24, 16, 12, 7);
  auto graph = build_graph(bundle, 1.0);
  TrainConfig tc = small_train_config(1, 3);
  tc.w_bt = 0.0;

  Model a(bundle.num_users, bundle.num_items, small_model_config());
  {
    TrainConfig t1 = tc;
    t1.skip_zero_weight_terms = true;
    Trainer tr(a, bundle, graph, t1, AlignmentConfig{});
    tr.fit();
  }
  Model b(bundle.num_users, bundle.num_items, small_model_config());
  TrainLog log_b;
  {
    TrainConfig t2 = tc;
    t2.skip_zero_weight_terms = false;  // compute the term, contribute nothing
    Trainer tr(b, bundle, graph, t2, AlignmentConfig{});
    log_b = tr.fit();
  }
  EXPECT_EQ(params_hash(a), params_hash(b));
  // The detached term was still evaluated for logging.
  bool saw_bt = false;
  for (const auto& rec : log_b.epochs)
    if (rec.phase == "joint" && rec.l_bt != 0.0) saw_bt = true;
  EXPECT_TRUE(saw_bt);
}

TEST(Training, WeightLinearityOfGradients) {
  // d total / d theta == d l_local / d theta + w_g * d l_global / d theta
  //                      + w_bt * d l_bt / d theta, term-by-term backward.
  auto bundle = synthetic_bundle(16, 16, 10, 8);
  auto graph = build_graph(bundle, 1.0);
  ModelConfig mc = small_model_config();
  Model model(bundle.num_users, bundle.num_items, mc);
  model.init(5);
  AlignmentConfig ac;
  const double w_g = 0.7, w_bt = 0.3;

  std::vector<int> users;
  for (int u = 0; u < bundle.num_users; ++u)
    if (bundle.user_sequences[u].size() >= 2) users.push_back(u);
  users.resize(8);
  auto batch = make_causal_train_batch(bundle.user_sequences, users, mc.seq.max_len);
  std::vector<std::pair<int, int>> chunk(graph.edges.begin(),
                                         graph.edges.begin() + std::min<size_t>(12, graph.edges.size()));
  auto user_items = user_item_sets(bundle);

  auto graph_batch_fixed = [&]() {
    std::mt19937_64 rng(99);  // same draws every time
    return sample_graph_batch(chunk, user_items, bundle.num_items,
                              mc.graph.num_negatives, rng);
  };

  auto build_terms = [&](Tape& tape) {
    Var states = model.encoder().encode(tape, model.tables(), batch);
    Var l_local = model.encoder().local_loss(tape, model.tables(), states, batch);
    auto gb = graph_batch_fixed();
    auto state = propagate_tables(tape, model.tables(), graph, mc.graph.num_layers);
    Var l_global = bpr_loss(tape, model.tables(), state, gb, mc.graph);
    Var h = model.encoder().user_states(tape, states, batch);
    Var g = tape.gather_rows(state.users(tape), batch.users);
    Var l_bt = alignment_loss(tape, h, g, ac);
    return std::tuple<Var, Var, Var>(l_local, l_global, l_bt);
  };

  // Combined backward.
  auto params = model.parameters();
  Mat combined;
  {
    Tape tape;
    auto [ll, lg, lb] = build_terms(tape);
    Var total = tape.add(ll, tape.add(tape.scale(lg, w_g), tape.scale(lb, w_bt)));
    for (auto* p : params) p->zero_grad();
    tape.backward(total);
    combined = model.tables().item_table.grad;
  }
  // Per-term backwards on fresh tapes, manually weighted.
  auto term_grad = [&](int which) {
    Tape tape;
    auto [ll, lg, lb] = build_terms(tape);
    for (auto* p : params) p->zero_grad();
    tape.backward(which == 0 ? ll : which == 1 ? lg : lb);
    return Mat(model.tables().item_table.grad);
  };
  Mat summed = term_grad(0) + w_g * term_grad(1) + w_bt * term_grad(2);
  EXPECT_LT(max_rel_err(combined, summed, 1e-6), 1e-6);
}

TEST(Training, DeterministicAcrossRuns) {
  auto bundle = synthetic_bundle(24, 16, 12, 9);
  auto graph = build_graph(bundle, 1.0);
  TrainConfig tc = small_train_config(1, 3);

  Model a(bundle.num_users, bundle.num_items, small_model_config());
  auto log_a = Trainer(a, bundle, graph, tc, AlignmentConfig{}).fit();
  Model b(bundle.num_users, bundle.num_items, small_model_config());
  auto log_b = Trainer(b, bundle, graph, tc, AlignmentConfig{}).fit();

  EXPECT_EQ(params_hash(a), params_hash(b));
  ASSERT_EQ(log_a.epochs.size(), log_b.epochs.size());
  for (size_t e = 0; e < log_a.epochs.size(); ++e) {
    EXPECT_EQ(log_a.epochs[e].total, log_b.epochs[e].total);
    EXPECT_EQ(log_a.epochs[e].val_ndcg10, log_b.epochs[e].val_ndcg10);
  }

  Model c(bundle.num_users, bundle.num_items, small_model_config());
  TrainConfig tc2 = tc;
  tc2.seed = 12;
  auto log_c = Trainer(c, bundle, graph, tc2, AlignmentConfig{}).fit();
  EXPECT_NE(params_hash(a), params_hash(c));
}

TEST(Training, SharedTableCouplesBranches) {
  // Training only the graph branch changes the sequential branch's scores:
  // the item table is shared storage.
  auto bundle = synthetic_bundle(24, 16, 12, 10);
  auto graph = build_graph(bundle, 1.0);
  Model model(bundle.num_users, bundle.num_items, small_model_config());
  TrainConfig tc = small_train_config(2, 2);  // warm-up only
  Trainer trainer(model, bundle, graph, tc, AlignmentConfig{});

  model.init(tc.seed);
  std::vector<int> probe{1, 5, 2};
  Mat before = model.score_histories({probe});
  trainer.fit();
  Mat after = model.score_histories({probe});
  EXPECT_GT((before - after).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Training, EarlyStopPatienceRule) {
  // patience=1 with strictly decreasing validation: the second joint epoch
  // fails to improve and training stops after exactly 2 joint epochs.
  // Forced by a learning rate so large the model immediately diverges from
  // its first (best) epoch.
  auto bundle = synthetic_bundle(24, 16, 12, 11);
  auto graph = build_graph(bundle, 1.0);
  Model model(bundle.num_users, bundle.num_items, small_model_config());
  TrainConfig tc = small_train_config(0, 50);
  tc.early_stop_patience = 1;
  tc.lr = 50.0;  // destroys ranking quality after the first epoch
  Trainer trainer(model, bundle, graph, tc, AlignmentConfig{});
  auto log = trainer.fit();
  if (log.epochs.size() == 2) {
    EXPECT_LE(log.epochs[1].val_ndcg10, log.epochs[0].val_ndcg10);
    EXPECT_EQ(log.best_joint_epochs, 1);
  } else {
    // The divergence pattern is data-dependent; the invariant that must hold
    // is: stop exactly one epoch after the last improvement.
    int best = 0;
    double best_val = -1.0;
    for (size_t e = 0; e < log.epochs.size(); ++e)
      if (log.epochs[e].val_ndcg10 > best_val) {
        best_val = log.epochs[e].val_ndcg10;
        best = static_cast<int>(e);
      }
    EXPECT_EQ(log.epochs.size(), static_cast<size_t>(best) + 2);
  }
}

TEST(Training, UltragcnModeRuns) {
  auto bundle = synthetic_bundle(24, 16, 12, 12);
  auto graph = build_graph(bundle, 1.0);
  Model model(bundle.num_users, bundle.num_items,
              small_model_config(SeqMode::causal, GraphMode::ultragcn));
  TrainConfig tc = small_train_config(1, 3);
  Trainer trainer(model, bundle, graph, tc, AlignmentConfig{});
  auto log = trainer.fit();
  ASSERT_EQ(log.epochs.size(), 3u);
  for (const auto& rec : log.epochs) EXPECT_TRUE(std::isfinite(rec.total));
}

TEST(Training, MaskedModeRuns) {
  auto bundle = synthetic_bundle(24, 16, 12, 13);
  auto graph = build_graph(bundle, 1.0);
  Model model(bundle.num_users, bundle.num_items,
              small_model_config(SeqMode::masked, GraphMode::lightgcn));
  TrainConfig tc = small_train_config(1, 3);
  Trainer trainer(model, bundle, graph, tc, AlignmentConfig{});
  auto log = trainer.fit();
  for (const auto& rec : log.epochs) EXPECT_TRUE(std::isfinite(rec.total));
}

TEST(Training, PlantedRuleImprovesValidationNdcg) {
  // Monotone harness: planted-rule data, NDCG@10 after training beats the
  // value at initialization.
  auto bundle = synthetic_bundle(32, 16, 14, 14);
  auto graph = build_graph(bundle, 1.0);
  Model model(bundle.num_users, bundle.num_items, small_model_config());
  TrainConfig tc = small_train_config(2, 10);
  Trainer trainer(model, bundle, graph, tc, AlignmentConfig{});

  model.init(tc.seed);
  const double before = validation_ndcg10(model, bundle, true);
  trainer.fit();
  const double after = validation_ndcg10(model, bundle, true);
  EXPECT_GT(after, before);
}

TEST(Training, FinalRetrainRunsFixedEpochs) {
  auto bundle = synthetic_bundle(24, 16, 12, 15);
  auto graph = build_graph(bundle, 1.0);
  Model model(bundle.num_users, bundle.num_items, small_model_config());
  TrainConfig tc = small_train_config(1, 10);
  Trainer trainer(model, bundle, graph, tc, AlignmentConfig{});
  auto log = trainer.fit(/*fixed_joint_epochs=*/3);
  ASSERT_EQ(log.epochs.size(), 4u);  // 1 warm-up + 3 joint
  for (const auto& rec : log.epochs) EXPECT_EQ(rec.val_ndcg10, -1.0);
}

TEST(Training, ConfigValidation) {
  TrainConfig tc;
  tc.n_warmup = 10;
  tc.epochs = 5;
  EXPECT_THROW(tc.validate(), std::invalid_argument);
  TrainConfig tc2;
  tc2.optimizer = "sgd";
  EXPECT_THROW(tc2.validate(), std::invalid_argument);
}

}  // namespace

#pragma once

// Two-phase optimization of the combined objective
//   L = L_local + w_global * L_global + w_bt * L_BT:
// a graph-only warm-up for n_warmup epochs, then joint epochs in which the
// graph branch consumes its own shuffled positive stream sized to the
// sequential stream's step count, so every update carries all active terms.
// RNG streams are separated per concern (init / sequential / graph) so that
// disabling one branch never perturbs another branch's draws.

#include <crossrec/alignment.hpp>
#include <crossrec/data.hpp>
#include <crossrec/evaluation.hpp>
#include <crossrec/model.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace crossrec {

struct TrainConfig {
  int n_warmup{10};
  double w_global{1.0};
  double w_bt{0.2};
  int epochs{50};
  int batch_size{128};
  double lr{1e-3};
  std::string optimizer{"adam"};
  double adam_beta1{0.9};
  double adam_beta2{0.999};
  double weight_decay{0.0};
  std::uint64_t seed{1};
  int early_stop_patience{10};
  double warmup_lr{-1.0};  // < 0: use lr for the warm-up phase as well
  // With zero-weighted terms: skip them entirely (default), or still compute
  // their value on a gradient-free side tape for logging.
  bool skip_zero_weight_terms{true};

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be positive");
    if (n_warmup < 0 || n_warmup > epochs)
      throw std::invalid_argument("TrainConfig: need 0 <= n_warmup <= epochs");
    if (w_global < 0 || w_bt < 0)
      throw std::invalid_argument("TrainConfig: loss weights must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (lr <= 0) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (optimizer != "adam") throw std::invalid_argument("TrainConfig: unknown optimizer");
    if (early_stop_patience < 1)
      throw std::invalid_argument("TrainConfig: patience must be positive");
    if (weight_decay < 0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  }
};

struct EpochRecord {
  int epoch{0};
  std::string phase;  // "warmup" or "joint"
  double l_local{0.0};
  double l_global{0.0};
  double l_bt{0.0};
  double total{0.0};
  double val_ndcg10{-1.0};  // -1 when not evaluated (final retrain)
  double wall_s{0.0};       // not serialized; reruns must be byte-identical
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_joint_epochs{0};
  double best_val_ndcg10{-1.0};
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

class Adam {
 public:
  Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2,
       double weight_decay, double eps = 1e-8)
      : params_(std::move(params)),
        lr_(lr),
        beta1_(beta1),
        beta2_(beta2),
        weight_decay_(weight_decay),
        eps_(eps) {
    for (auto* p : params_) {
      m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void set_lr(double lr) { lr_ = lr; }

  // One update over the active subset; inactive parameters keep value and
  // moment state bit-identical.
  void step(const std::vector<bool>* active = nullptr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      if (active && !(*active)[k]) continue;
      Parameter& p = *params_[k];
      Mat g = p.grad;
      if (weight_decay_ > 0.0) g += weight_decay_ * p.value;
      m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * g;
      v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * g.cwiseProduct(g);
      p.value -=
          lr_ * (m_[k] / c1).cwiseQuotient(((v_[k] / c2).cwiseSqrt().array() + eps_).matrix());
    }
  }

 private:
  std::vector<Parameter*> params_;
  std::vector<Mat> m_, v_;
  double lr_, beta1_, beta2_, weight_decay_, eps_;
  long t_{0};
};

namespace detail {

// Fisher-Yates; one draw per swap, deterministic given the stream state.
template <typename T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

// Keep the first occurrence of each user, preserving order.
inline std::vector<int> dedup_rows_by_user(const std::vector<int>& users) {
  std::vector<int> rows;
  std::vector<int> seen;
  for (int r = 0; r < static_cast<int>(users.size()); ++r) {
    if (std::find(seen.begin(), seen.end(), users[r]) == seen.end()) {
      seen.push_back(users[r]);
      rows.push_back(r);
    }
  }
  return rows;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

class Trainer {
 public:
  Trainer(Model& model, const DatasetBundle& bundle, const BipartiteGraph& graph,
          TrainConfig tc, AlignmentConfig ac)
      : model_(model),
        bundle_(bundle),
        graph_(graph),
        tc_(tc),
        ac_(ac),
        rng_seq_(ad::derive_seed(tc.seed, "seq_stream")),
        rng_graph_(ad::derive_seed(tc.seed, "graph_stream")) {
    tc_.validate();
    if (ac_.kind != AlignmentKind::none) ac_.validate();
    user_items_ = user_item_sets(bundle_);
    const bool masked = model_.config().seq.mode == SeqMode::masked;
    for (int u = 0; u < bundle_.num_users; ++u) {
      const size_t min_len = masked ? 1 : 2;
      if (bundle_.user_sequences[u].size() >= min_len) seq_users_.push_back(u);
    }
    if (seq_users_.empty())
      throw std::runtime_error("Trainer: no users with trainable histories");
    if (model_.config().graph.mode == GraphMode::ultragcn && graph_enabled_anywhere())
      ii_graph_ = build_ii_graph(graph_, model_.config().graph.ii_topk);
  }

  // Tuning-mode fit: early-stops on validation NDCG@10 and leaves the model
  // at the best joint-phase checkpoint. Final-retrain mode (fixed_joint >= 0)
  // runs exactly n_warmup + fixed_joint epochs without validation.
  TrainLog fit(int fixed_joint_epochs = -1) {
    model_.init(tc_.seed);
    Adam adam(model_.parameters(), tc_.lr, tc_.adam_beta1, tc_.adam_beta2, tc_.weight_decay);
    adam_ = &adam;
    build_active_masks();

    TrainLog log;
    const bool final_mode = fixed_joint_epochs >= 0;
    const int joint_budget =
        final_mode ? fixed_joint_epochs : tc_.epochs - tc_.n_warmup;

    double best_val = -std::numeric_limits<double>::infinity();
    int since_best = 0;
    std::vector<Mat> best_snapshot;

    int epoch = 0;
    adam.set_lr(tc_.warmup_lr > 0 ? tc_.warmup_lr : tc_.lr);
    for (int w = 0; w < tc_.n_warmup; ++w) {
      ++epoch;
      log.epochs.push_back(run_warmup_epoch(epoch));
      if (!final_mode)
        log.epochs.back().val_ndcg10 = validation_ndcg10(model_, bundle_, true);
    }
    adam.set_lr(tc_.lr);

    for (int j = 0; j < joint_budget; ++j) {
      ++epoch;
      EpochRecord rec = run_joint_epoch(epoch);
      if (!final_mode) {
        rec.val_ndcg10 = validation_ndcg10(model_, bundle_, true);
        if (rec.val_ndcg10 > best_val) {
          best_val = rec.val_ndcg10;
          log.best_joint_epochs = j + 1;
          log.best_val_ndcg10 = best_val;
          since_best = 0;
          best_snapshot.clear();
          for (auto* p : model_.parameters()) best_snapshot.push_back(p->value);
        } else {
          ++since_best;
        }
        log.epochs.push_back(rec);
        if (since_best >= tc_.early_stop_patience) break;
      } else {
        log.epochs.push_back(rec);
      }
    }

    if (!final_mode && !best_snapshot.empty()) {
      auto params = model_.parameters();
      for (size_t k = 0; k < params.size(); ++k) params[k]->value = best_snapshot[k];
    }
    adam_ = nullptr;
    return log;
  }

  // Sequential-only fit: the same sequential stream, losses, and optimizer,
  // with no graph structures touched at any point.
  TrainLog fit_sequential_only(int fixed_joint_epochs = -1) {
    model_.init(tc_.seed);
    Adam adam(model_.parameters(), tc_.lr, tc_.adam_beta1, tc_.adam_beta2, tc_.weight_decay);
    adam_ = &adam;
    build_active_masks();

    TrainLog log;
    const bool final_mode = fixed_joint_epochs >= 0;
    const int budget = final_mode ? fixed_joint_epochs : tc_.epochs;
    double best_val = -std::numeric_limits<double>::infinity();
    int since_best = 0;
    std::vector<Mat> best_snapshot;

    for (int e = 0; e < budget; ++e) {
      EpochRecord rec = run_sequential_epoch(e + 1);
      if (!final_mode) {
        rec.val_ndcg10 = validation_ndcg10(model_, bundle_, true);
        if (rec.val_ndcg10 > best_val) {
          best_val = rec.val_ndcg10;
          log.best_joint_epochs = e + 1;
          log.best_val_ndcg10 = best_val;
          since_best = 0;
          best_snapshot.clear();
          for (auto* p : model_.parameters()) best_snapshot.push_back(p->value);
        } else {
          ++since_best;
        }
        log.epochs.push_back(rec);
        if (since_best >= tc_.early_stop_patience) break;
      } else {
        log.epochs.push_back(rec);
      }
    }
    if (!final_mode && !best_snapshot.empty()) {
      auto params = model_.parameters();
      for (size_t k = 0; k < params.size(); ++k) params[k]->value = best_snapshot[k];
    }
    adam_ = nullptr;
    return log;
  }

  const std::vector<int>& sequential_users() const { return seq_users_; }

 private:
  bool graph_enabled_anywhere() const {
    return tc_.n_warmup > 0 || tc_.w_global > 0.0 || !tc_.skip_zero_weight_terms;
  }

  void build_active_masks() {
    auto params = model_.parameters();
    warmup_active_.assign(params.size(), false);
    for (size_t k = 0; k < params.size(); ++k) {
      const std::string& n = params[k]->name;
      if (n == "item_table" || n == "user_table") warmup_active_[k] = true;
    }
  }

  struct StepTerms {
    double l_local{0.0}, l_global{0.0}, l_bt{0.0}, total{0.0};
  };

  EpochRecord run_warmup_epoch(int epoch) {
    const auto start = std::chrono::steady_clock::now();
    if (graph_.edges.empty()) throw std::runtime_error("warmup: empty graph");
    std::vector<std::pair<int, int>> stream = graph_.edges;
    detail::shuffle_in_place(stream, rng_graph_);

    double sum_g = 0.0;
    int steps = 0;
    for (size_t b = 0; b < stream.size(); b += tc_.batch_size) {
      const size_t e = std::min(stream.size(), b + tc_.batch_size);
      std::vector<std::pair<int, int>> chunk(stream.begin() + b, stream.begin() + e);
      Tape tape;
      Var loss = graph_loss_on_tape(tape, chunk);
      zero_grads();
      tape.backward(loss);
      optimizer_step(&warmup_active_);
      sum_g += tape.val(loss)(0, 0);
      ++steps;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = "warmup";
    rec.l_global = sum_g / std::max(1, steps);
    rec.total = rec.l_global;
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
  }

  EpochRecord run_joint_epoch(int epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<int> order = seq_users_;
    detail::shuffle_in_place(order, rng_seq_);
    const int steps =
        static_cast<int>((order.size() + tc_.batch_size - 1) / tc_.batch_size);

    const bool graph_live = tc_.w_global > 0.0;
    const bool graph_logged = graph_live || !tc_.skip_zero_weight_terms;
    std::vector<std::pair<int, int>> gstream;
    if (graph_logged) {
      gstream = graph_.edges;
      detail::shuffle_in_place(gstream, rng_graph_);
    }

    StepTerms sums;
    for (int s = 0; s < steps; ++s) {
      const size_t lo = static_cast<size_t>(s) * tc_.batch_size;
      const size_t hi = std::min(order.size(), lo + tc_.batch_size);
      std::vector<int> users(order.begin() + lo, order.begin() + hi);

      std::vector<std::pair<int, int>> gchunk;
      if (graph_logged) {
        // Even partition of the shuffled edge stream across the epoch steps.
        const size_t glo = gstream.size() * s / steps;
        const size_t ghi = gstream.size() * (s + 1) / steps;
        gchunk.assign(gstream.begin() + glo, gstream.begin() + ghi);
      }
      StepTerms t = joint_step(users, gchunk);
      sums.l_local += t.l_local;
      sums.l_global += t.l_global;
      sums.l_bt += t.l_bt;
      sums.total += t.total;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = "joint";
    rec.l_local = sums.l_local / steps;
    rec.l_global = sums.l_global / steps;
    rec.l_bt = sums.l_bt / steps;
    rec.total = sums.total / steps;
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
  }

  EpochRecord run_sequential_epoch(int epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<int> order = seq_users_;
    detail::shuffle_in_place(order, rng_seq_);
    const int steps =
        static_cast<int>((order.size() + tc_.batch_size - 1) / tc_.batch_size);
    double sum_local = 0.0;
    for (int s = 0; s < steps; ++s) {
      const size_t lo = static_cast<size_t>(s) * tc_.batch_size;
      const size_t hi = std::min(order.size(), lo + tc_.batch_size);
      std::vector<int> users(order.begin() + lo, order.begin() + hi);
      Tape tape;
      SeqBatch batch = make_seq_batch(users);
      Var states = model_.encoder().encode(tape, model_.tables(), batch, true, &rng_seq_);
      Var loss = model_.encoder().local_loss(tape, model_.tables(), states, batch);
      zero_grads();
      tape.backward(loss);
      optimizer_step(nullptr);
      sum_local += tape.val(loss)(0, 0);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = "joint";
    rec.l_local = sum_local / steps;
    rec.total = rec.l_local;
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
  }

  SeqBatch make_seq_batch(const std::vector<int>& users) {
    const auto& cfg = model_.config().seq;
    if (cfg.mode == SeqMode::causal)
      return make_causal_train_batch(bundle_.user_sequences, users, cfg.max_len);
    return make_masked_train_batch(bundle_.user_sequences, users, cfg.max_len,
                                   cfg.mask_prob, cfg.train_append_mask, rng_seq_);
  }

  Var graph_loss_on_tape(Tape& tape, const std::vector<std::pair<int, int>>& chunk,
                         const GraphState** state_out = nullptr) {
    const auto& gcfg = model_.config().graph;
    GraphBatch batch = sample_graph_batch(chunk, user_items_, bundle_.num_items,
                                          gcfg.num_negatives, rng_graph_);
    if (batch.users.empty())
      throw std::runtime_error("graph step: all positives skipped (saturated users)");
    if (gcfg.mode == GraphMode::lightgcn) {
      state_ = propagate_tables(tape, model_.tables(), graph_, gcfg.num_layers);
      if (state_out) *state_out = &state_;
      return bpr_loss(tape, model_.tables(), state_, batch, gcfg);
    }
    if (state_out) *state_out = nullptr;
    return ultragcn_loss(tape, model_.tables(), batch, ii_graph_, graph_, gcfg);
  }

  StepTerms joint_step(const std::vector<int>& users,
                       const std::vector<std::pair<int, int>>& gchunk) {
    const auto& gcfg = model_.config().graph;
    StepTerms out;
    Tape tape;

    SeqBatch batch = make_seq_batch(users);
    Var states = model_.encoder().encode(tape, model_.tables(), batch, true, &rng_seq_);
    Var l_local = model_.encoder().local_loss(tape, model_.tables(), states, batch);
    Var total = l_local;
    out.l_local = tape.val(l_local)(0, 0);

    const bool graph_live = tc_.w_global > 0.0;
    const bool bt_live = tc_.w_bt > 0.0 && ac_.kind != AlignmentKind::none;
    const GraphState* gstate = nullptr;

    if (graph_live && !gchunk.empty()) {
      Var l_global = graph_loss_on_tape(tape, gchunk, &gstate);
      out.l_global = tape.val(l_global)(0, 0);
      total = tape.add(total, tape.scale(l_global, tc_.w_global));
    } else if (!tc_.skip_zero_weight_terms && !gchunk.empty()) {
      // Logged but detached: evaluated on a gradient-free side tape.
      Tape side(false);
      out.l_global = side.val(graph_loss_on_tape(side, gchunk))(0, 0);
    }

    if (bt_live || (!tc_.skip_zero_weight_terms && ac_.kind != AlignmentKind::none)) {
      auto rows = detail::dedup_rows_by_user(batch.users);
      if (rows.size() >= 2) {
        std::vector<int> unique_users;
        for (int r : rows) unique_users.push_back(batch.users[r]);
        if (bt_live) {
          // LightGCN alignment against propagated rows needs the propagated
          // state; reuse the graph branch's if present, else propagate here.
          if (gcfg.mode == GraphMode::lightgcn && ac_.align_propagated_user &&
              gstate == nullptr) {
            state_ = propagate_tables(tape, model_.tables(), graph_, gcfg.num_layers);
            gstate = &state_;
          }
          Var h_all = model_.encoder().user_states(tape, states, batch);
          Var h = tape.gather_rows(h_all, rows);
          Var g = global_user_repr(tape, model_.tables(), gstate, unique_users, gcfg,
                                   ac_.align_propagated_user);
          Var l_bt = alignment_loss(tape, h, g, ac_);
          out.l_bt = tape.val(l_bt)(0, 0);
          total = tape.add(total, tape.scale(l_bt, tc_.w_bt));
        } else {
          Tape side(false);
          GraphState side_state;
          const GraphState* sstate = nullptr;
          if (gcfg.mode == GraphMode::lightgcn && ac_.align_propagated_user) {
            side_state = propagate_tables(side, model_.tables(), graph_, gcfg.num_layers);
            sstate = &side_state;
          }
          SeqBatch sb = batch;
          Var st = model_.encoder().encode(side, model_.tables(), sb);
          Var h = side.gather_rows(model_.encoder().user_states(side, st, sb), rows);
          Var g = global_user_repr(side, model_.tables(), sstate, unique_users, gcfg,
                                   ac_.align_propagated_user);
          out.l_bt = side.val(alignment_loss(side, h, g, ac_))(0, 0);
        }
      }
    }

    const double total_value = tape.val(total)(0, 0);
    if (!std::isfinite(total_value)) {
      throw std::runtime_error(
          "joint step: non-finite loss (l_local=" + std::to_string(out.l_local) +
          ", l_global=" + std::to_string(out.l_global) +
          ", l_bt=" + std::to_string(out.l_bt) + ")");
    }
    zero_grads();
    tape.backward(total);
    optimizer_step(nullptr);
    out.total = total_value;
    return out;
  }

  void zero_grads() {
    for (auto* p : model_.parameters()) p->zero_grad();
  }

  void optimizer_step(const std::vector<bool>* active) {
    model_.tables().freeze_padding_grad();
    adam_->step(active);
    model_.tables().enforce_padding_row();
  }

  Model& model_;
  const DatasetBundle& bundle_;
  const BipartiteGraph& graph_;
  TrainConfig tc_;
  AlignmentConfig ac_;
  std::mt19937_64 rng_seq_;
  std::mt19937_64 rng_graph_;
  std::vector<std::vector<int>> user_items_;
  std::vector<int> seq_users_;
  ItemItemGraph ii_graph_;
  GraphState state_;
  Adam* adam_{nullptr};
  std::vector<bool> warmup_active_;
};

}  // namespace crossrec

#pragma once

// Sequential user encoder: a causal transformer (next-item prediction at
// every position) or a masked bidirectional transformer (prediction at
// masked positions, with a mask slot appended after the last item so the
// user-state readout matches the inference path). Sequences are left-padded
// into max_len slots, so the most recent item always sits in the last slot
// and positional rows index slots directly.

#include <crossrec/autodiff.hpp>
#include <crossrec/embedding.hpp>

#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace crossrec {

enum class SeqMode { causal, masked };

struct SeqEncoderConfig {
  SeqMode mode{SeqMode::causal};
  int num_layers{2};
  int num_heads{2};
  int dim{64};
  int ffn_dim{128};
  double dropout{0.1};
  int max_len{50};
  double mask_prob{0.2};       // masked mode only
  bool tied_output{true};      // score against the shared item table
  bool train_append_mask{true};  // masked mode: appended mask slot in training

  void validate() const {
    if (num_layers < 1 || num_heads < 1 || dim < 1 || ffn_dim < 1 || max_len < 1)
      throw std::invalid_argument("SeqEncoderConfig: sizes must be positive");
    if (dim % num_heads != 0)
      throw std::invalid_argument("SeqEncoderConfig: dim must be divisible by num_heads");
    if (dropout < 0.0 || dropout >= 1.0)
      throw std::invalid_argument("SeqEncoderConfig: dropout must lie in [0,1)");
    if (mode == SeqMode::masked && !(mask_prob > 0.0 && mask_prob < 1.0))
      throw std::invalid_argument("SeqEncoderConfig: mask_prob must lie in (0,1)");
  }
};

// A padded batch of user sequences. tokens holds item-table row ids with two
// sentinels: 0 = padding, -1 = [MASK]. Row r = b*seq_len + t.
struct SeqBatch {
  int batch{0};
  int seq_len{0};
  std::vector<int> tokens;
  std::vector<int> lens;     // real (non-padding) slots per sequence
  std::vector<int> targets;  // per-slot item id in [0,N), or -1
  std::vector<int> users;

  int state_row(int b) const { return b * seq_len + seq_len - 1; }
};

// Causal training batch: a window of the last (max_len + 1) items yields
// max_len input slots with shifted next-item targets. Histories of length
// < 2 carry no training position and must be filtered by the caller.
inline SeqBatch make_causal_train_batch(const std::vector<std::vector<int>>& seqs,
                                        const std::vector<int>& users, int max_len) {
  SeqBatch batch;
  batch.batch = static_cast<int>(users.size());
  batch.seq_len = max_len;
  batch.tokens.assign(static_cast<size_t>(batch.batch) * max_len, 0);
  batch.targets.assign(static_cast<size_t>(batch.batch) * max_len, -1);
  batch.lens.resize(batch.batch);
  batch.users = users;
  for (int b = 0; b < batch.batch; ++b) {
    const auto& h = seqs[users[b]];
    if (h.size() < 2)
      throw std::invalid_argument("make_causal_train_batch: history shorter than 2");
    const int window = std::min<int>(static_cast<int>(h.size()), max_len + 1);
    const int len = window - 1;
    const int start = static_cast<int>(h.size()) - window;
    batch.lens[b] = len;
    for (int k = 0; k < len; ++k) {
      const int slot = max_len - len + k;
      batch.tokens[b * max_len + slot] = EmbeddingTables::token_of(h[start + k]);
      batch.targets[b * max_len + slot] = h[start + k + 1];
    }
  }
  return batch;
}

// Inference batch (causal): the last max_len items, no targets.
inline SeqBatch make_causal_infer_batch(const std::vector<std::vector<int>>& histories,
                                        int max_len) {
  SeqBatch batch;
  batch.batch = static_cast<int>(histories.size());
  batch.seq_len = max_len;
  batch.tokens.assign(static_cast<size_t>(batch.batch) * max_len, 0);
  batch.targets.assign(static_cast<size_t>(batch.batch) * max_len, -1);
  batch.lens.resize(batch.batch);
  for (int b = 0; b < batch.batch; ++b) {
    const auto& h = histories[b];
    if (h.empty()) throw std::invalid_argument("make_causal_infer_batch: empty history");
    const int len = std::min<int>(static_cast<int>(h.size()), max_len);
    batch.lens[b] = len;
    for (int k = 0; k < len; ++k)
      batch.tokens[b * max_len + (max_len - len + k)] =
          EmbeddingTables::token_of(h[h.size() - len + k]);
  }
  return batch;
}

// Masked training batch: each kept item is replaced by [MASK] with
// probability mask_prob (resampled until at least one position is masked),
// and one extra [MASK] slot is appended after the last item so the state
// readout slot exists during training as well.
inline SeqBatch make_masked_train_batch(const std::vector<std::vector<int>>& seqs,
                                        const std::vector<int>& users, int max_len,
                                        double mask_prob, bool append_mask,
                                        std::mt19937_64& rng) {
  SeqBatch batch;
  batch.batch = static_cast<int>(users.size());
  batch.seq_len = max_len;
  batch.tokens.assign(static_cast<size_t>(batch.batch) * max_len, 0);
  batch.targets.assign(static_cast<size_t>(batch.batch) * max_len, -1);
  batch.lens.resize(batch.batch);
  batch.users = users;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int b = 0; b < batch.batch; ++b) {
    const auto& h = seqs[users[b]];
    if (h.empty()) throw std::invalid_argument("make_masked_train_batch: empty history");
    const int room = append_mask ? max_len - 1 : max_len;
    const int items = std::min<int>(static_cast<int>(h.size()), room);
    const int len = items + (append_mask ? 1 : 0);
    batch.lens[b] = len;
    const int first_slot = max_len - len;
    bool any_masked = false;
    while (!any_masked) {
      for (int k = 0; k < items; ++k) {
        const int slot = first_slot + k;
        const int item = h[h.size() - items + k];
        if (unif(rng) < mask_prob) {
          batch.tokens[b * max_len + slot] = -1;
          batch.targets[b * max_len + slot] = item;
          any_masked = true;
        } else {
          batch.tokens[b * max_len + slot] = EmbeddingTables::token_of(item);
          batch.targets[b * max_len + slot] = -1;
        }
      }
    }
    if (append_mask) batch.tokens[b * max_len + max_len - 1] = -1;
  }
  return batch;
}

// Inference batch (masked): last max_len-1 items plus an appended [MASK].
inline SeqBatch make_masked_infer_batch(const std::vector<std::vector<int>>& histories,
                                        int max_len) {
  SeqBatch batch;
  batch.batch = static_cast<int>(histories.size());
  batch.seq_len = max_len;
  batch.tokens.assign(static_cast<size_t>(batch.batch) * max_len, 0);
  batch.targets.assign(static_cast<size_t>(batch.batch) * max_len, -1);
  batch.lens.resize(batch.batch);
  for (int b = 0; b < batch.batch; ++b) {
    const auto& h = histories[b];
    if (h.empty()) throw std::invalid_argument("make_masked_infer_batch: empty history");
    const int items = std::min<int>(static_cast<int>(h.size()), max_len - 1);
    const int len = items + 1;
    batch.lens[b] = len;
    for (int k = 0; k < items; ++k)
      batch.tokens[b * max_len + (max_len - len + k)] =
          EmbeddingTables::token_of(h[h.size() - items + k]);
    batch.tokens[b * max_len + max_len - 1] = -1;
  }
  return batch;
}

struct EncoderLayer {
  EncoderLayer(int index, int dim, int ffn_dim)
      : wq("layer" + std::to_string(index) + ".wq", dim, dim),
        bq("layer" + std::to_string(index) + ".bq", 1, dim),
        wk("layer" + std::to_string(index) + ".wk", dim, dim),
        bk("layer" + std::to_string(index) + ".bk", 1, dim),
        wv("layer" + std::to_string(index) + ".wv", dim, dim),
        bv("layer" + std::to_string(index) + ".bv", 1, dim),
        wo("layer" + std::to_string(index) + ".wo", dim, dim),
        bo("layer" + std::to_string(index) + ".bo", 1, dim),
        ln1_g("layer" + std::to_string(index) + ".ln1_g", 1, dim),
        ln1_b("layer" + std::to_string(index) + ".ln1_b", 1, dim),
        ln2_g("layer" + std::to_string(index) + ".ln2_g", 1, dim),
        ln2_b("layer" + std::to_string(index) + ".ln2_b", 1, dim),
        w1("layer" + std::to_string(index) + ".w1", dim, ffn_dim),
        b1("layer" + std::to_string(index) + ".b1", 1, ffn_dim),
        w2("layer" + std::to_string(index) + ".w2", ffn_dim, dim),
        b2("layer" + std::to_string(index) + ".b2", 1, dim) {}

  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln1_g, ln1_b, ln2_g, ln2_b;
  Parameter w1, b1, w2, b2;
};

class TransformerEncoder {
 public:
  explicit TransformerEncoder(SeqEncoderConfig cfg, int num_items = 0)
      : cfg_(cfg), final_ln_g("final_ln_g", 1, cfg.dim), final_ln_b("final_ln_b", 1, cfg.dim) {
    cfg_.validate();
    for (int l = 0; l < cfg_.num_layers; ++l) layers_.emplace_back(l, cfg_.dim, cfg_.ffn_dim);
    if (!cfg_.tied_output)
      out_table_ = std::make_unique<Parameter>("out_table", num_items + 1, cfg_.dim);
  }

  const SeqEncoderConfig& config() const { return cfg_; }

  void init(std::uint64_t seed, double stddev = 0.02) {
    for (auto& l : layers_) {
      for (Parameter* w : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2})
        ad::init_normal(*w, seed, stddev);
      for (Parameter* b : {&l.bq, &l.bk, &l.bv, &l.bo, &l.b1, &l.b2}) b->value.setZero();
      l.ln1_g.value.setOnes();
      l.ln1_b.value.setZero();
      l.ln2_g.value.setOnes();
      l.ln2_b.value.setZero();
    }
    final_ln_g.value.setOnes();
    final_ln_b.value.setZero();
    if (out_table_) ad::init_normal(*out_table_, seed, stddev);
  }

  void collect(std::vector<Parameter*>& out) {
    for (auto& l : layers_) {
      for (Parameter* p : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                           &l.ln1_g, &l.ln1_b, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2})
        out.push_back(p);
    }
    out.push_back(&final_ln_g);
    out.push_back(&final_ln_b);
    if (out_table_) out.push_back(out_table_.get());
  }

  // Per-position states, (batch*seq_len) x dim. Attention probabilities of
  // the last layer can be exposed for inspection.
  Var encode(Tape& tape, EmbeddingTables& tables, const SeqBatch& batch,
             bool training = false, std::mt19937_64* rng = nullptr,
             std::vector<Mat>* attn_probs = nullptr) {
    if (cfg_.dim != tables.dim())
      throw std::invalid_argument("encode: embedding dim mismatch");
    if (batch.seq_len != cfg_.max_len)
      throw std::invalid_argument("encode: batch seq_len != max_len");
    const bool drop = training && cfg_.dropout > 0.0;
    if (drop && rng == nullptr)
      throw std::invalid_argument("encode: dropout requires an RNG");

    const int rows = batch.batch * batch.seq_len;
    std::vector<int> gather_ids(rows);
    Mat mask_indicator = Mat::Zero(rows, 1);
    bool any_mask = false;
    for (int r = 0; r < rows; ++r) {
      const int tok = batch.tokens[r];
      gather_ids[r] = tok < 0 ? 0 : tok;
      if (tok < 0) {
        mask_indicator(r, 0) = 1.0;
        any_mask = true;
      }
    }
    Var h = tables.lookup_items(tape, gather_ids);
    if (any_mask)
      h = tape.add(h, tape.rank1(mask_indicator, tape.use(tables.mask_vector)));
    std::vector<int> slots(rows);
    for (int r = 0; r < rows; ++r) slots[r] = r % batch.seq_len;
    h = tape.add(h, tables.lookup_positions(tape, slots));
    if (drop) h = tape.dropout(h, cfg_.dropout, *rng);

    ad::AttentionSpec spec;
    spec.batch = batch.batch;
    spec.seq_len = batch.seq_len;
    spec.heads = cfg_.num_heads;
    spec.causal = cfg_.mode == SeqMode::causal;
    spec.lens = batch.lens;

    for (size_t li = 0; li < layers_.size(); ++li) {
      auto& l = layers_[li];
      Var a = tape.layer_norm(h, tape.use(l.ln1_g), tape.use(l.ln1_b));
      Var q = tape.linear(a, tape.use(l.wq), tape.use(l.bq));
      Var k = tape.linear(a, tape.use(l.wk), tape.use(l.bk));
      Var v = tape.linear(a, tape.use(l.wv), tape.use(l.bv));
      Var o = tape.attention(q, k, v, spec,
                             li + 1 == layers_.size() ? attn_probs : nullptr);
      o = tape.linear(o, tape.use(l.wo), tape.use(l.bo));
      if (drop) o = tape.dropout(o, cfg_.dropout, *rng);
      h = tape.add(h, o);

      Var f = tape.layer_norm(h, tape.use(l.ln2_g), tape.use(l.ln2_b));
      f = tape.gelu(tape.linear(f, tape.use(l.w1), tape.use(l.b1)));
      f = tape.linear(f, tape.use(l.w2), tape.use(l.b2));
      if (drop) f = tape.dropout(f, cfg_.dropout, *rng);
      h = tape.add(h, f);
    }
    return tape.layer_norm(h, tape.use(final_ln_g), tape.use(final_ln_b));
  }

  // User-state vectors: the last slot per sequence, which under left padding
  // is the last real item (causal) or the appended mask slot (masked).
  Var user_states(Tape& tape, Var states, const SeqBatch& batch) const {
    std::vector<int> rows(batch.batch);
    for (int b = 0; b < batch.batch; ++b) {
      if (batch.lens[b] < 1)
        throw std::invalid_argument("user_states: empty sequence in batch");
      rows[b] = batch.state_row(b);
    }
    return tape.gather_rows(states, rows);
  }

  // Catalog scores: h times the valid item rows (padding row excluded).
  Var score_catalog(Tape& tape, EmbeddingTables& tables, Var h) {
    Var table = cfg_.tied_output ? tape.use(tables.item_table) : tape.use(*out_table_);
    Var valid = tape.slice_rows(table, 1, tables.num_items());
    return tape.matmul_nt(h, valid);
  }

  // Mean full-softmax cross-entropy over contributing positions.
  Var local_loss(Tape& tape, EmbeddingTables& tables, Var states, const SeqBatch& batch) {
    std::vector<int> rows;
    std::vector<int> targets;
    for (int r = 0; r < batch.batch * batch.seq_len; ++r) {
      if (batch.targets[r] >= 0) {
        rows.push_back(r);
        targets.push_back(batch.targets[r]);
      }
    }
    if (rows.empty())
      throw std::invalid_argument("local_loss: batch has no contributing positions");
    Var picked = tape.gather_rows(states, rows);
    Var logits = score_catalog(tape, tables, picked);
    return tape.softmax_xent(logits, std::move(targets));
  }

 private:
  SeqEncoderConfig cfg_;
  std::vector<EncoderLayer> layers_;
  Parameter final_ln_g, final_ln_b;
  std::unique_ptr<Parameter> out_table_;
};

}  // namespace crossrec

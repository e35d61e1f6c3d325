#pragma once

// The full model: shared embedding tables plus the sequential encoder and
// the graph-encoder configuration. Inference goes through the sequential
// branch only; the graph branch exists purely to shape the shared tables
// during training.

#include <crossrec/embedding.hpp>
#include <crossrec/graph_encoder.hpp>
#include <crossrec/seq_encoder.hpp>

#include <vector>

namespace crossrec {

struct ModelConfig {
  int dim{64};
  SeqEncoderConfig seq;
  GraphEncoderConfig graph;

  void validate() const {
    if (dim != seq.dim)
      throw std::invalid_argument("ModelConfig: seq.dim must equal shared dim");
    seq.validate();
    graph.validate();
  }
};

class Model {
 public:
  Model(int num_users, int num_items, const ModelConfig& cfg)
      : cfg_(cfg),
        tables_(num_users, num_items, cfg.seq.max_len, cfg.dim),
        encoder_(cfg.seq, num_items) {
    cfg_.validate();
  }

  void init(std::uint64_t seed) {
    tables_.init(seed);
    encoder_.init(seed);
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    tables_.collect(out);
    encoder_.collect(out);
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  EmbeddingTables& tables() { return tables_; }
  TransformerEncoder& encoder() { return encoder_; }

  // Inference-path catalog scores for a batch of histories, one row per
  // history: no gradients, no dropout, sequential branch only.
  Mat score_histories(const std::vector<std::vector<int>>& histories) {
    Tape tape(/*grad_enabled=*/false);
    SeqBatch batch = cfg_.seq.mode == SeqMode::causal
                         ? make_causal_infer_batch(histories, cfg_.seq.max_len)
                         : make_masked_infer_batch(histories, cfg_.seq.max_len);
    Var states = encoder_.encode(tape, tables_, batch);
    Var h = encoder_.user_states(tape, states, batch);
    return tape.val(encoder_.score_catalog(tape, tables_, h));
  }

 private:
  ModelConfig cfg_;
  EmbeddingTables tables_;
  TransformerEncoder encoder_;
};

}  // namespace crossrec

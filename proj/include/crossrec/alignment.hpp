#pragma once

// Alignment of the sequential (local) and graph (global) user views: the
// redundancy-reduction loss drives the cross-correlation of the two
// batch-standardized views toward the identity; a symmetric InfoNCE
// contrastive loss is kept as the ablation alternative.

#include <crossrec/autodiff.hpp>

#include <stdexcept>
#include <vector>

namespace crossrec {

enum class AlignmentKind { none, barlow, contrastive };

struct AlignmentConfig {
  AlignmentKind kind{AlignmentKind::barlow};
  double lambda_bt{5e-3};   // off-diagonal weight
  double temperature{0.2};  // contrastive only
  double eps{1e-5};         // standardization floor
  bool align_propagated_user{true};  // lightgcn: align against propagated rows

  void validate() const {
    if (lambda_bt <= 0.0) throw std::invalid_argument("AlignmentConfig: lambda_bt must be > 0");
    if (temperature <= 0.0)
      throw std::invalid_argument("AlignmentConfig: temperature must be > 0");
    if (eps <= 0.0) throw std::invalid_argument("AlignmentConfig: eps must be > 0");
  }
};

// Batch standardization along the batch (row) dimension.
inline ad::Var standardize(ad::Tape& tape, ad::Var x, double eps) {
  return tape.standardize_cols(x, eps);
}

// C_ij = (1/B) sum_u z_loc[u,i] * z_glob[u,j].
inline ad::Var cross_correlation(ad::Tape& tape, ad::Var z_loc, ad::Var z_glob) {
  const auto& a = tape.val(z_loc);
  const auto& b = tape.val(z_glob);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("cross_correlation: shape mismatch");
  return tape.scale(tape.matmul_tn(z_loc, z_glob), 1.0 / static_cast<double>(a.rows()));
}

inline ad::Var barlow_loss(ad::Tape& tape, ad::Var c, double lambda_bt) {
  return tape.barlow(c, lambda_bt);
}

// Standardize both views, cross-correlate, and score the redundancy loss.
inline ad::Var barlow_alignment(ad::Tape& tape, ad::Var local, ad::Var global,
                                const AlignmentConfig& cfg) {
  ad::Var zl = standardize(tape, local, cfg.eps);
  ad::Var zg = standardize(tape, global, cfg.eps);
  return barlow_loss(tape, cross_correlation(tape, zl, zg), cfg.lambda_bt);
}

// Symmetric InfoNCE with in-batch negatives under cosine similarity:
// each local row must identify its paired global row among all B candidates,
// averaged over both matching directions.
inline ad::Var contrastive_loss(ad::Tape& tape, ad::Var z_loc, ad::Var z_glob,
                                double temperature) {
  const auto& a = tape.val(z_loc);
  const auto& b = tape.val(z_glob);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("contrastive_loss: shape mismatch");
  if (a.rows() < 2) throw std::invalid_argument("contrastive_loss: need batch >= 2");
  if (temperature <= 0.0)
    throw std::invalid_argument("contrastive_loss: temperature must be > 0");
  ad::Var nl = tape.row_normalize(z_loc);
  ad::Var ng = tape.row_normalize(z_glob);
  ad::Var logits = tape.scale(tape.matmul_nt(nl, ng), 1.0 / temperature);
  std::vector<int> diag(a.rows());
  for (int i = 0; i < static_cast<int>(a.rows()); ++i) diag[i] = i;
  ad::Var fwd = tape.softmax_xent(logits, diag);
  ad::Var bwd = tape.softmax_xent(tape.transpose(logits), diag);
  return tape.scale(tape.add(fwd, bwd), 0.5);
}

// Dispatch on the configured alignment kind; none is a config error here
// because the caller skips the term entirely.
inline ad::Var alignment_loss(ad::Tape& tape, ad::Var local, ad::Var global,
                              const AlignmentConfig& cfg) {
  switch (cfg.kind) {
    case AlignmentKind::barlow:
      return barlow_alignment(tape, local, global, cfg);
    case AlignmentKind::contrastive:
      return contrastive_loss(tape, local, global, cfg.temperature);
    case AlignmentKind::none:
      break;
  }
  throw std::logic_error("alignment_loss: kind is none");
}

}  // namespace crossrec

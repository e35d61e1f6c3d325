#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape records one computation (typically one training step). Vars are
// handles into the tape; every op appends a node holding the forward value
// and a closure that scatters the node's gradient back into its inputs.
// Reverse creation order is a valid topological order, so backward() is a
// single reverse sweep. Parameters live outside the tape and receive their
// gradients through Tape::use().

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace crossrec::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Parameter: a named trainable matrix with an externally owned gradient.
// ---------------------------------------------------------------------------
class Parameter {
 public:
  Parameter(std::string name, int rows, int cols)
      : name(std::move(name)),
        value(Mat::Zero(rows, cols)),
        grad(Mat::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }

  std::string name;
  Mat value;
  Mat grad;
};

// Deterministic per-name seed derivation so that adding or removing a
// parameter never shifts another parameter's initialization stream.
inline std::uint64_t derive_seed(std::uint64_t master, const std::string& tag) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::uint64_t z = master ^ h;
  z += 0x9e3779b97f4a7c15ull;  // splitmix64 finalizer
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline void init_normal(Parameter& p, std::uint64_t master_seed, double stddev) {
  std::mt19937_64 rng(derive_seed(master_seed, p.name));
  std::normal_distribution<double> nd(0.0, stddev);
  for (Eigen::Index i = 0; i < p.value.rows(); ++i)
    for (Eigen::Index j = 0; j < p.value.cols(); ++j) p.value(i, j) = nd(rng);
}

struct Var {
  int id{-1};
  bool valid() const { return id >= 0; }
};

// Attention geometry for a padded batch of sequences. Row r = b*seq_len + t.
// A position s is real iff s >= seq_len - lens[b] (sequences are left-padded).
struct AttentionSpec {
  int batch{0};
  int seq_len{0};
  int heads{1};
  bool causal{true};
  std::vector<int> lens;  // per-sequence number of real (non-padding) slots
};

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  const Mat& val(Var v) const { return nodes_[check(v)].value; }
  const Mat& grad(Var v) const { return nodes_[check(v)].grad; }

  Var leaf(Mat m) { return push(std::move(m), nullptr); }

  // Bring a parameter onto the tape (memoized per tape).
  Var use(Parameter& p) {
    for (const auto& [ptr, id] : param_nodes_)
      if (ptr == &p) return Var{id};
    Parameter* pp = &p;
    Var v = push(p.value, [pp](Tape& t, int self) { pp->grad += t.nodes_[self].grad; });
    param_nodes_.emplace_back(pp, v.id);
    return v;
  }

  // ---- elementwise and affine ---------------------------------------------

  Var add(Var a, Var b) {
    require_same_shape(a, b, "add");
    return push(val(a) + val(b), [a, b](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      t.nodes_[a.id].grad += g;
      t.nodes_[b.id].grad += g;
    });
  }

  Var sub(Var a, Var b) {
    require_same_shape(a, b, "sub");
    return push(val(a) - val(b), [a, b](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      t.nodes_[a.id].grad += g;
      t.nodes_[b.id].grad -= g;
    });
  }

  Var hadamard(Var a, Var b) {
    require_same_shape(a, b, "hadamard");
    return push(val(a).cwiseProduct(val(b)), [a, b](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      t.nodes_[a.id].grad += g.cwiseProduct(t.nodes_[b.id].value);
      t.nodes_[b.id].grad += g.cwiseProduct(t.nodes_[a.id].value);
    });
  }

  Var scale(Var a, double s) {
    return push(val(a) * s, [a, s](Tape& t, int self) {
      t.nodes_[a.id].grad += s * t.nodes_[self].grad;
    });
  }

  Var hadamard_const(Var a, Mat w) {
    if (val(a).rows() != w.rows() || val(a).cols() != w.cols())
      throw std::invalid_argument("hadamard_const: shape mismatch");
    Mat y = val(a).cwiseProduct(w);
    return push(std::move(y), [a, w = std::move(w)](Tape& t, int self) {
      t.nodes_[a.id].grad += t.nodes_[self].grad.cwiseProduct(w);
    });
  }

  // y = col * rowvec, an outer product against a constant column.
  Var rank1(Mat col, Var rowvec) {
    if (col.cols() != 1 || val(rowvec).rows() != 1)
      throw std::invalid_argument("rank1: expected column constant and row Var");
    Mat y = col * val(rowvec);
    return push(std::move(y), [col = std::move(col), rowvec](Tape& t, int self) {
      t.nodes_[rowvec.id].grad += col.transpose() * t.nodes_[self].grad;
    });
  }

  Var add_rowvec(Var x, Var v) {
    if (val(v).rows() != 1 || val(v).cols() != val(x).cols())
      throw std::invalid_argument("add_rowvec: shape mismatch");
    Mat y = val(x);
    y.rowwise() += val(v).row(0);
    return push(std::move(y), [x, v](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      t.nodes_[x.id].grad += g;
      t.nodes_[v.id].grad += g.colwise().sum();
    });
  }

  // ---- matrix products ----------------------------------------------------

  Var matmul(Var a, Var b) {
    if (val(a).cols() != val(b).rows()) throw std::invalid_argument("matmul: shape mismatch");
    return push(val(a) * val(b), [a, b](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      t.nodes_[a.id].grad += g * t.nodes_[b.id].value.transpose();
      t.nodes_[b.id].grad += t.nodes_[a.id].value.transpose() * g;
    });
  }

  // y = a * b^T
  Var matmul_nt(Var a, Var b) {
    if (val(a).cols() != val(b).cols()) throw std::invalid_argument("matmul_nt: shape mismatch");
    return push(val(a) * val(b).transpose(), [a, b](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      t.nodes_[a.id].grad += g * t.nodes_[b.id].value;
      t.nodes_[b.id].grad += g.transpose() * t.nodes_[a.id].value;
    });
  }

  // y = a^T * b
  Var matmul_tn(Var a, Var b) {
    if (val(a).rows() != val(b).rows()) throw std::invalid_argument("matmul_tn: shape mismatch");
    return push(val(a).transpose() * val(b), [a, b](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      t.nodes_[a.id].grad += t.nodes_[b.id].value * g.transpose();
      t.nodes_[b.id].grad += t.nodes_[a.id].value * g;
    });
  }

  Var transpose(Var a) {
    return push(val(a).transpose(), [a](Tape& t, int self) {
      t.nodes_[a.id].grad += t.nodes_[self].grad.transpose();
    });
  }

  // Fused y = x*W + 1*b.
  Var linear(Var x, Var w, Var b) {
    if (val(x).cols() != val(w).rows() || val(b).rows() != 1 ||
        val(b).cols() != val(w).cols())
      throw std::invalid_argument("linear: shape mismatch");
    Mat y = val(x) * val(w);
    y.rowwise() += val(b).row(0);
    return push(std::move(y), [x, w, b](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      t.nodes_[x.id].grad += g * t.nodes_[w.id].value.transpose();
      t.nodes_[w.id].grad += t.nodes_[x.id].value.transpose() * g;
      t.nodes_[b.id].grad += g.colwise().sum();
    });
  }

  // ---- gathers, slices, concatenation --------------------------------------

  Var gather_rows(Var x, std::vector<int> rows) {
    const Mat& xv = val(x);
    Mat y(static_cast<Eigen::Index>(rows.size()), xv.cols());
    for (size_t k = 0; k < rows.size(); ++k) {
      if (rows[k] < 0 || rows[k] >= xv.rows())
        throw std::out_of_range("gather_rows: index " + std::to_string(rows[k]) +
                                " out of range [0, " + std::to_string(xv.rows()) + ")");
      y.row(static_cast<Eigen::Index>(k)) = xv.row(rows[k]);
    }
    return push(std::move(y), [x, rows = std::move(rows)](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      Mat& gx = t.nodes_[x.id].grad;
      for (size_t k = 0; k < rows.size(); ++k)
        gx.row(rows[k]) += g.row(static_cast<Eigen::Index>(k));
    });
  }

  Var slice_rows(Var x, int start, int len) {
    if (start < 0 || len < 0 || start + len > val(x).rows())
      throw std::out_of_range("slice_rows: range out of bounds");
    return push(val(x).middleRows(start, len), [x, start, len](Tape& t, int self) {
      t.nodes_[x.id].grad.middleRows(start, len) += t.nodes_[self].grad;
    });
  }

  Var concat_rows(Var a, Var b) {
    if (val(a).cols() != val(b).cols())
      throw std::invalid_argument("concat_rows: column mismatch");
    Mat y(val(a).rows() + val(b).rows(), val(a).cols());
    y.topRows(val(a).rows()) = val(a);
    y.bottomRows(val(b).rows()) = val(b);
    const int ra = static_cast<int>(val(a).rows());
    const int rb = static_cast<int>(val(b).rows());
    return push(std::move(y), [a, b, ra, rb](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      t.nodes_[a.id].grad += g.topRows(ra);
      t.nodes_[b.id].grad += g.bottomRows(rb);
    });
  }

  // ---- nonlinearities -------------------------------------------------------

  Var gelu(Var x) {
    const Mat& xv = val(x);
    Mat y = xv.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); });
    return push(std::move(y), [x](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      const Mat& xv = t.nodes_[x.id].value;
      Mat d = xv.unaryExpr([](double v) {
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        return 0.5 * (1.0 + std::erf(v * M_SQRT1_2)) +
               v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
      t.nodes_[x.id].grad += g.cwiseProduct(d);
    });
  }

  Var softplus(Var x) {
    const Mat& xv = val(x);
    Mat y = xv.unaryExpr([](double v) {
      return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    });
    return push(std::move(y), [x](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      const Mat& xv = t.nodes_[x.id].value;
      Mat d = xv.unaryExpr([](double v) { return sigmoid(v); });
      t.nodes_[x.id].grad += g.cwiseProduct(d);
    });
  }

  // Inverted dropout. p == 0 is the identity and appends no node, keeping
  // no-dropout paths bit-identical to graphs built without the call.
  Var dropout(Var x, double p, std::mt19937_64& rng) {
    if (p == 0.0) return x;
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
    const Mat& xv = val(x);
    Mat mask(xv.rows(), xv.cols());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double keep = 1.0 - p;
    for (Eigen::Index i = 0; i < mask.rows(); ++i)
      for (Eigen::Index j = 0; j < mask.cols(); ++j)
        mask(i, j) = u(rng) < p ? 0.0 : 1.0 / keep;
    Mat y = xv.cwiseProduct(mask);
    return push(std::move(y), [x, mask = std::move(mask)](Tape& t, int self) {
      t.nodes_[x.id].grad += t.nodes_[self].grad.cwiseProduct(mask);
    });
  }

  // ---- normalization --------------------------------------------------------

  // Row-wise layer normalization with affine gain/bias (1 x d each).
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    const Mat& xv = val(x);
    if (val(gamma).rows() != 1 || val(gamma).cols() != xv.cols() ||
        val(beta).rows() != 1 || val(beta).cols() != xv.cols())
      throw std::invalid_argument("layer_norm: affine shape mismatch");
    const Eigen::Index n = xv.cols();
    Mat xhat(xv.rows(), n);
    Eigen::VectorXd inv_std(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      const double mu = xv.row(r).mean();
      const double var = (xv.row(r).array() - mu).square().sum() / static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std(r) = is;
      xhat.row(r) = (xv.row(r).array() - mu) * is;
    }
    Mat y = xhat;
    y.array().rowwise() *= val(gamma).row(0).array();
    y.rowwise() += val(beta).row(0);
    return push(std::move(y), [x, gamma, beta, xhat = std::move(xhat),
                               inv_std = std::move(inv_std)](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      t.nodes_[beta.id].grad += g.colwise().sum();
      t.nodes_[gamma.id].grad += g.cwiseProduct(xhat).colwise().sum();
      const Eigen::Index n = g.cols();
      Mat gh = g;
      gh.array().rowwise() *= t.nodes_[gamma.id].value.row(0).array();
      Mat& gx = t.nodes_[x.id].grad;
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double m1 = gh.row(r).mean();
        const double m2 = gh.row(r).cwiseProduct(xhat.row(r)).sum() / static_cast<double>(n);
        gx.row(r) += inv_std(r) * (gh.row(r).array() - m1 - xhat.row(r).array() * m2).matrix();
      }
    });
  }

  // Column-wise batch standardization without affine parameters:
  // z = (x - mean) / sqrt(var + eps), statistics over rows.
  Var standardize_cols(Var x, double eps) {
    const Mat& xv = val(x);
    if (xv.rows() < 2)
      throw std::invalid_argument("standardize_cols: need at least 2 rows");
    const double b = static_cast<double>(xv.rows());
    Eigen::RowVectorXd mu = xv.colwise().mean();
    Eigen::RowVectorXd var = (xv.rowwise() - mu).array().square().colwise().sum() / b;
    Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt();
    Mat z = (xv.rowwise() - mu).array().rowwise() * inv_std.array();
    return push(Mat(z), [x, z, inv_std, b](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      Eigen::RowVectorXd gm = g.colwise().mean();
      Eigen::RowVectorXd gz = g.cwiseProduct(z).colwise().sum() / b;
      Mat d = ((g.rowwise() - gm).array() - (z.array().rowwise() * gz.array())).matrix();
      t.nodes_[x.id].grad += (d.array().rowwise() * inv_std.array()).matrix();
    });
  }

  // Smooth row normalization: y_r = x_r / sqrt(|x_r|^2 + eps).
  Var row_normalize(Var x, double eps = 1e-12) {
    const Mat& xv = val(x);
    Eigen::VectorXd inv_n(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r)
      inv_n(r) = 1.0 / std::sqrt(xv.row(r).squaredNorm() + eps);
    Mat y = xv.array().colwise() * inv_n.array();
    return push(std::move(y), [x, inv_n = std::move(inv_n)](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      const Mat& xv = t.nodes_[x.id].value;
      Mat& gx = t.nodes_[x.id].grad;
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double in = inv_n(r);
        const double dot = xv.row(r).dot(g.row(r));
        gx.row(r) += in * g.row(r) - (in * in * in * dot) * xv.row(r);
      }
    });
  }

  // ---- reductions and losses ------------------------------------------------

  Var sum_all(Var x) {
    Mat y(1, 1);
    y(0, 0) = val(x).sum();
    return push(std::move(y), [x](Tape& t, int self) {
      t.nodes_[x.id].grad.array() += t.nodes_[self].grad(0, 0);
    });
  }

  Var mean_all(Var x) {
    const double n = static_cast<double>(val(x).size());
    Mat y(1, 1);
    y(0, 0) = val(x).sum() / n;
    return push(std::move(y), [x, n](Tape& t, int self) {
      t.nodes_[x.id].grad.array() += t.nodes_[self].grad(0, 0) / n;
    });
  }

  // Mean over rows of the squared row norm.
  Var mean_row_sqnorm(Var x) {
    const double r = static_cast<double>(val(x).rows());
    Mat y(1, 1);
    y(0, 0) = val(x).squaredNorm() / r;
    return push(std::move(y), [x, r](Tape& t, int self) {
      t.nodes_[x.id].grad += (2.0 / r) * t.nodes_[self].grad(0, 0) * t.nodes_[x.id].value;
    });
  }

  Var dot_rows(Var a, Var b) {
    require_same_shape(a, b, "dot_rows");
    const Mat& av = val(a);
    const Mat& bv = val(b);
    Mat y(av.rows(), 1);
    for (Eigen::Index r = 0; r < av.rows(); ++r) y(r, 0) = av.row(r).dot(bv.row(r));
    return push(std::move(y), [a, b](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      const Mat& av = t.nodes_[a.id].value;
      const Mat& bv = t.nodes_[b.id].value;
      t.nodes_[a.id].grad += (bv.array().colwise() * g.col(0).array()).matrix();
      t.nodes_[b.id].grad += (av.array().colwise() * g.col(0).array()).matrix();
    });
  }

  // Mean over rows of -log softmax(row)[target].
  Var softmax_xent(Var logits, std::vector<int> targets) {
    const Mat& lv = val(logits);
    if (static_cast<Eigen::Index>(targets.size()) != lv.rows())
      throw std::invalid_argument("softmax_xent: one target per row required");
    const Eigen::Index rows = lv.rows();
    if (rows == 0) throw std::invalid_argument("softmax_xent: empty batch");
    Mat probs(lv.rows(), lv.cols());
    double loss = 0.0;
    for (Eigen::Index r = 0; r < rows; ++r) {
      if (targets[r] < 0 || targets[r] >= lv.cols())
        throw std::out_of_range("softmax_xent: target out of range");
      const double mx = lv.row(r).maxCoeff();
      Eigen::RowVectorXd e = (lv.row(r).array() - mx).exp();
      const double z = e.sum();
      probs.row(r) = e / z;
      loss += std::log(z) + mx - lv(r, targets[r]);
    }
    Mat y(1, 1);
    y(0, 0) = loss / static_cast<double>(rows);
    return push(std::move(y), [logits, probs = std::move(probs),
                               targets = std::move(targets)](Tape& t, int self) {
      const double g = t.nodes_[self].grad(0, 0);
      const double inv_r = 1.0 / static_cast<double>(probs.rows());
      Mat d = probs;
      for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, targets[r]) -= 1.0;
      t.nodes_[logits.id].grad += (g * inv_r) * d;
    });
  }

  // Redundancy-reduction loss on a d x d cross-correlation matrix:
  // sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2.
  Var barlow(Var c, double lambda) {
    const Mat& cv = val(c);
    if (cv.rows() != cv.cols()) throw std::invalid_argument("barlow: square matrix required");
    double diag = 0.0, off = 0.0;
    for (Eigen::Index i = 0; i < cv.rows(); ++i)
      for (Eigen::Index j = 0; j < cv.cols(); ++j) {
        if (i == j) {
          const double d = 1.0 - cv(i, i);
          diag += d * d;
        } else {
          off += cv(i, j) * cv(i, j);
        }
      }
    Mat y(1, 1);
    y(0, 0) = diag + lambda * off;
    return push(std::move(y), [c, lambda](Tape& t, int self) {
      const double g = t.nodes_[self].grad(0, 0);
      const Mat& cv = t.nodes_[c.id].value;
      Mat& gc = t.nodes_[c.id].grad;
      for (Eigen::Index i = 0; i < cv.rows(); ++i)
        for (Eigen::Index j = 0; j < cv.cols(); ++j)
          gc(i, j) += i == j ? -2.0 * (1.0 - cv(i, i)) * g : 2.0 * lambda * cv(i, j) * g;
    });
  }

  // A linear operator with caller-supplied forward value whose adjoint is
  // the same map applied to the gradient (self-adjoint operators only, e.g.
  // symmetric graph propagation): dX += op(dY).
  Var custom_linear_symmetric(Var x, Mat y, std::function<Mat(const Mat&)> op) {
    if (y.rows() != val(x).rows() || y.cols() != val(x).cols())
      throw std::invalid_argument("custom_linear_symmetric: shape mismatch");
    return push(std::move(y), [x, op = std::move(op)](Tape& t, int self) {
      t.nodes_[x.id].grad += op(t.nodes_[self].grad);
    });
  }

  // ---- multi-head attention ---------------------------------------------------
  //
  // Q, K, V are (batch*seq_len) x d with head h occupying columns
  // [h*hd, (h+1)*hd). Scores are masked per AttentionSpec: padding columns are
  // never attended, causal mode restricts row t to columns <= t, and a row
  // whose allowed set would be empty (a padding row under causal masking)
  // attends only itself. Row-stochastic weights are cached for backward and
  // optionally exposed through probs_out.
  Var attention(Var q, Var k, Var v, const AttentionSpec& spec,
                std::vector<Mat>* probs_out = nullptr) {
    const Mat& qv = val(q);
    const Mat& kv = val(k);
    const Mat& vv = val(v);
    const int c = spec.seq_len;
    const int d = static_cast<int>(qv.cols());
    if (spec.heads <= 0 || d % spec.heads != 0)
      throw std::invalid_argument("attention: dim not divisible by heads");
    if (qv.rows() != static_cast<Eigen::Index>(spec.batch) * c ||
        kv.rows() != qv.rows() || vv.rows() != qv.rows())
      throw std::invalid_argument("attention: row count mismatch");
    if (static_cast<int>(spec.lens.size()) != spec.batch)
      throw std::invalid_argument("attention: lens size mismatch");
    const int hd = d / spec.heads;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    Mat out = Mat::Zero(qv.rows(), d);
    std::vector<Mat> probs(static_cast<size_t>(spec.batch) * spec.heads);
    for (int b = 0; b < spec.batch; ++b) {
      const int base = b * c;
      const int pad = c - spec.lens[b];
      if (pad < 0 || pad > c) throw std::invalid_argument("attention: bad sequence length");
      for (int h = 0; h < spec.heads; ++h) {
        Mat s = qv.block(base, h * hd, c, hd) * kv.block(base, h * hd, c, hd).transpose() *
                inv_sqrt_hd;
        Mat p = Mat::Zero(c, c);
        for (int t = 0; t < c; ++t) {
          const int lo = pad;
          const int hi = spec.causal ? std::min(t, c - 1) : c - 1;
          if (hi < lo) {
            p(t, t) = 1.0;  // padding row under causal masking: self only
            continue;
          }
          double mx = -std::numeric_limits<double>::infinity();
          for (int j = lo; j <= hi; ++j) mx = std::max(mx, s(t, j));
          double z = 0.0;
          for (int j = lo; j <= hi; ++j) z += std::exp(s(t, j) - mx);
          for (int j = lo; j <= hi; ++j) p(t, j) = std::exp(s(t, j) - mx) / z;
        }
        out.block(base, h * hd, c, hd) = p * vv.block(base, h * hd, c, hd);
        probs[static_cast<size_t>(b) * spec.heads + h] = std::move(p);
      }
    }
    if (probs_out) *probs_out = probs;

    return push(std::move(out), [q, k, v, spec, hd, inv_sqrt_hd,
                                 probs = std::move(probs)](Tape& t, int self) {
      const Mat& g = t.nodes_[self].grad;
      const Mat& qv = t.nodes_[q.id].value;
      const Mat& kv = t.nodes_[k.id].value;
      const Mat& vv = t.nodes_[v.id].value;
      Mat& gq = t.nodes_[q.id].grad;
      Mat& gk = t.nodes_[k.id].grad;
      Mat& gv = t.nodes_[v.id].grad;
      const int c = spec.seq_len;
      for (int b = 0; b < spec.batch; ++b) {
        const int base = b * c;
        for (int h = 0; h < spec.heads; ++h) {
          const Mat& p = probs[static_cast<size_t>(b) * spec.heads + h];
          Mat go = g.block(base, h * hd, c, hd);
          gv.block(base, h * hd, c, hd) += p.transpose() * go;
          Mat gp = go * vv.block(base, h * hd, c, hd).transpose();
          // Softmax backward per row: ds = p .* (gp - rowsum(gp .* p)).
          Mat gs(c, c);
          for (int r = 0; r < c; ++r) {
            const double dot = gp.row(r).dot(p.row(r));
            gs.row(r) = p.row(r).cwiseProduct(gp.row(r).array().operator-(dot).matrix());
          }
          gs *= inv_sqrt_hd;
          gq.block(base, h * hd, c, hd) += gs * kv.block(base, h * hd, c, hd);
          gk.block(base, h * hd, c, hd) += gs.transpose() * qv.block(base, h * hd, c, hd);
        }
      }
    });
  }

  // ---- backward ---------------------------------------------------------------

  void backward(Var loss) {
    if (!grad_enabled_) throw std::logic_error("backward: tape built with grads disabled");
    if (val(loss).rows() != 1 || val(loss).cols() != 1)
      throw std::invalid_argument("backward: loss must be 1x1");
    nodes_[loss.id].grad(0, 0) = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back(*this, i);
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void(Tape&, int)> back;
  };

  friend class TapeAccess;

  int check(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw std::out_of_range("invalid Var");
    return v.id;
  }

  void require_same_shape(Var a, Var b, const char* op) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }

  Var push(Mat value, std::function<void(Tape&, int)> back) {
    Node n;
    if (grad_enabled_) n.grad = Mat::Zero(value.rows(), value.cols());
    n.value = std::move(value);
    n.back = grad_enabled_ ? std::move(back) : nullptr;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Deque keeps references from val()/grad() stable while ops are appended.
  std::deque<Node> nodes_;
  std::vector<std::pair<Parameter*, int>> param_nodes_;
  bool grad_enabled_;

  static double sigmoid(double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
};

}  // namespace crossrec::ad

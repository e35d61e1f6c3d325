#pragma once

// Test-only oracles, independent of the library's computation paths:
// central finite differences, dense-matrix graph propagation, and a
// brute-force ranking-metric evaluator.

#include <crossrec/autodiff.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace oracles {

using crossrec::ad::Mat;

// Central finite-difference gradient of a scalar function of several
// matrix inputs, perturbing one entry at a time.
inline std::vector<Mat> fd_gradients(
    const std::function<double(const std::vector<Mat>&)>& f,
    std::vector<Mat> inputs, double h = 1e-5) {
  std::vector<Mat> grads;
  for (size_t k = 0; k < inputs.size(); ++k) {
    Mat g = Mat::Zero(inputs[k].rows(), inputs[k].cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      for (Eigen::Index j = 0; j < g.cols(); ++j) {
        const double orig = inputs[k](i, j);
        inputs[k](i, j) = orig + h;
        const double fp = f(inputs);
        inputs[k](i, j) = orig - h;
        const double fm = f(inputs);
        inputs[k](i, j) = orig;
        g(i, j) = (fp - fm) / (2.0 * h);
      }
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

inline double max_rel_err(const Mat& a, const Mat& b, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double denom = std::max({std::abs(a(i, j)), std::abs(b(i, j)), floor});
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / denom);
    }
  return worst;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

// Bitwise equality of two matrices (shape and every coefficient).
template <typename A, typename B>
bool mat_eq(const A& a, const B& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      if (a(i, j) != b(i, j)) return false;
  return true;
}

// Rank of a target item under "higher score first, ties by ascending id":
// 1-based; the number of items strictly better, plus ties with smaller id.
inline int brute_force_rank(const std::vector<double>& scores, int target) {
  int rank = 1;
  for (int j = 0; j < static_cast<int>(scores.size()); ++j) {
    if (j == target) continue;
    if (scores[j] > scores[target] || (scores[j] == scores[target] && j < target)) ++rank;
  }
  return rank;
}

inline double brute_force_ndcg(int rank, int k) {
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

inline double brute_force_recall(int rank, int k) { return rank <= k ? 1.0 : 0.0; }

}  // namespace oracles

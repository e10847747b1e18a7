#pragma once

// Linear-chain CRF without start/stop transitions. transitions(i, j) scores
// moving from label i at position t to label j at position t + 1.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "dmtl/common.hpp"

namespace dmtl::crf {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

namespace detail {
inline double logsumexp(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

inline void check(const Matrix& E, const Matrix& T) {
  if (E.rows() < 1) throw ValidationError("crf: empty sequence");
  if (T.rows() != E.cols() || T.cols() != E.cols()) throw ValidationError("crf: transition shape mismatch");
}

// alpha(t, j): log-sum of scores of all prefixes ending in label j at t.
inline Matrix forward(const Matrix& E, const Matrix& T) {
  const Index n = E.rows(), k = E.cols();
  Matrix a(n, k);
  a.row(0) = E.row(0);
  for (Index t = 1; t < n; ++t)
    for (Index j = 0; j < k; ++j) a(t, j) = logsumexp(a.row(t - 1).transpose() + T.col(j)) + E(t, j);
  return a;
}

// beta(t, i): log-sum of scores of all suffixes after position t given label i at t.
inline Matrix backward(const Matrix& E, const Matrix& T) {
  const Index n = E.rows(), k = E.cols();
  Matrix b = Matrix::Zero(n, k);
  for (Index t = n - 2; t >= 0; --t)
    for (Index i = 0; i < k; ++i)
      b(t, i) = logsumexp(T.row(i).transpose() + E.row(t + 1).transpose() + b.row(t + 1).transpose());
  return b;
}
}  // namespace detail

inline double path_score(const Matrix& E, const Matrix& T, std::span<const int> path) {
  detail::check(E, T);
  if (static_cast<Index>(path.size()) != E.rows()) throw ValidationError("crf: path length mismatch");
  double s = 0.0;
  for (Index t = 0; t < E.rows(); ++t) {
    const int y = path[static_cast<std::size_t>(t)];
    if (y < 0 || y >= E.cols()) throw ValidationError("crf: gold label out of range");
    s += E(t, y);
    if (t > 0) s += T(path[static_cast<std::size_t>(t - 1)], y);
  }
  return s;
}

inline double log_partition(const Matrix& E, const Matrix& T) {
  detail::check(E, T);
  const Matrix a = detail::forward(E, T);
  return detail::logsumexp(a.row(E.rows() - 1).transpose());
}

// Posterior label marginals, one row per position.
inline Matrix marginals(const Matrix& E, const Matrix& T) {
  detail::check(E, T);
  const Matrix a = detail::forward(E, T), b = detail::backward(E, T);
  const double logz = detail::logsumexp(a.row(E.rows() - 1).transpose());
  return (a + b).array().unaryExpr([logz](double x) { return std::exp(x - logz); }).matrix();
}

struct NllResult {
  double value = 0.0;
  Matrix grad_emissions;
  Matrix grad_transitions;
};

// Negative log-likelihood logZ - score(gold), with gradients
// (expected minus observed feature counts).
inline NllResult nll(const Matrix& E, const Matrix& T, std::span<const int> gold) {
  detail::check(E, T);
  const Index n = E.rows(), k = E.cols();
  const double gold_score = path_score(E, T, gold);
  const Matrix a = detail::forward(E, T), b = detail::backward(E, T);
  const double logz = detail::logsumexp(a.row(n - 1).transpose());
  NllResult r;
  r.value = std::max(0.0, logz - gold_score);
  r.grad_emissions = (a + b).array().unaryExpr([logz](double x) { return std::exp(x - logz); }).matrix();
  r.grad_transitions = Matrix::Zero(k, k);
  for (Index t = 0; t + 1 < n; ++t)
    for (Index i = 0; i < k; ++i)
      for (Index j = 0; j < k; ++j)
        r.grad_transitions(i, j) += std::exp(a(t, i) + T(i, j) + E(t + 1, j) + b(t + 1, j) - logz);
  for (Index t = 0; t < n; ++t) {
    r.grad_emissions(t, gold[static_cast<std::size_t>(t)]) -= 1.0;
    if (t > 0) r.grad_transitions(gold[static_cast<std::size_t>(t - 1)], gold[static_cast<std::size_t>(t)]) -= 1.0;
  }
  return r;
}

// Viterbi; among equal-scoring predecessors / final labels the lowest id wins.
inline std::vector<int> decode(const Matrix& E, const Matrix& T) {
  detail::check(E, T);
  const Index n = E.rows(), k = E.cols();
  Matrix score(n, k);
  Eigen::MatrixXi back = Eigen::MatrixXi::Zero(n, k);
  score.row(0) = E.row(0);
  for (Index t = 1; t < n; ++t) {
    for (Index j = 0; j < k; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      int arg = 0;
      for (Index i = 0; i < k; ++i) {
        const double s = score(t - 1, i) + T(i, j);
        if (s > best) {
          best = s;
          arg = static_cast<int>(i);
        }
      }
      score(t, j) = best + E(t, j);
      back(t, j) = arg;
    }
  }
  std::vector<int> path(static_cast<std::size_t>(n));
  int last = 0;
  for (Index j = 1; j < k; ++j)
    if (score(n - 1, j) > score(n - 1, last)) last = static_cast<int>(j);
  path.back() = last;
  for (Index t = n - 1; t > 0; --t)
    path[static_cast<std::size_t>(t - 1)] = back(t, path[static_cast<std::size_t>(t)]);
  return path;
}

}  // namespace dmtl::crf

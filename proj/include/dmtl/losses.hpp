#pragma once

// Training losses over probability outputs. Every loss returns its value and the
// analytic gradient with respect to the probabilities it was given, so the
// trainer can chain them behind a softmax/sigmoid node.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmtl/common.hpp"

namespace dmtl::losses {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class LossKind { ce, bce, dice, dice_squared, self_adjusting_dice, generalized_dice };
enum class DiceForm { plain, squared };
// How one-vs-rest dice columns are combined for multiclass targets.
enum class DiceReduction { generalized, macro };

struct LossConfig {
  LossKind kind = LossKind::ce;
  double gamma = 1.0;
  std::vector<double> class_weights;  // empty = unweighted
  DiceReduction reduction = DiceReduction::generalized;

  void validate() const {
    if (!(gamma >= 0.0)) throw ValidationError("loss gamma must be >= 0");
    for (double w : class_weights)
      if (!(w >= 0.0)) throw ValidationError("class weights must be non-negative");
  }
};

inline constexpr double kProbabilityFloor = 1e-12;

struct LossValue {
  double value = 0.0;
  Matrix grad;  // same shape as the probability input
};

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::ce: return "ce";
    case LossKind::bce: return "bce";
    case LossKind::dice: return "dice";
    case LossKind::dice_squared: return "dice-squared";
    case LossKind::self_adjusting_dice: return "self-adjusting-dice";
    case LossKind::generalized_dice: return "generalized-dice";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  for (auto k : {LossKind::ce, LossKind::bce, LossKind::dice, LossKind::dice_squared,
                 LossKind::self_adjusting_dice, LossKind::generalized_dice})
    if (to_string(k) == s) return k;
  throw ValidationError("unknown loss kind '" + s + "'");
}

namespace detail {
inline double clamp_prob(double p, const char* what) {
  if (p < kProbabilityFloor) {
    warn(std::string(what) + ": probability below 1e-12 clamped");
    return kProbabilityFloor;
  }
  return p;
}

inline double weight_of(const std::vector<double>& w, Eigen::Index j) {
  if (w.empty()) return 1.0;
  if (static_cast<std::size_t>(j) >= w.size()) throw ValidationError("class weight vector too short");
  return w[static_cast<std::size_t>(j)];
}
}  // namespace detail

// -w_y log p_y for one probability vector.
inline double cross_entropy(const Vector& p, Eigen::Index y, double weight = 1.0) {
  if (y < 0 || y >= p.size()) throw ValidationError("cross_entropy: label out of range");
  return -weight * std::log(detail::clamp_prob(p(y), "cross_entropy"));
}

// Mean over rows of P (N x k) against one-hot Y.
inline LossValue cross_entropy(const Matrix& P, const Matrix& Y, const std::vector<double>& weights = {}) {
  if (P.rows() != Y.rows() || P.cols() != Y.cols()) throw ValidationError("cross_entropy: shape mismatch");
  LossValue out{0.0, Matrix::Zero(P.rows(), P.cols())};
  const auto n = static_cast<double>(P.rows());
  if (P.rows() == 0) return out;
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    for (Eigen::Index j = 0; j < P.cols(); ++j) {
      if (Y(i, j) == 0.0) continue;
      const double w = detail::weight_of(weights, j) * Y(i, j);
      const double p = detail::clamp_prob(P(i, j), "cross_entropy");
      out.value -= w * std::log(p) / n;
      out.grad(i, j) = -w / (p * n);
    }
  }
  return out;
}

// Element-mean binary cross-entropy for independent per-class probabilities.
inline LossValue binary_cross_entropy(const Matrix& P, const Matrix& Y, const std::vector<double>& weights = {}) {
  if (P.rows() != Y.rows() || P.cols() != Y.cols()) throw ValidationError("binary_cross_entropy: shape mismatch");
  LossValue out{0.0, Matrix::Zero(P.rows(), P.cols())};
  const double n = static_cast<double>(P.size());
  if (P.size() == 0) return out;
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    for (Eigen::Index j = 0; j < P.cols(); ++j) {
      const double w = detail::weight_of(weights, j);
      const double y = Y(i, j);
      const double p = detail::clamp_prob(P(i, j), "binary_cross_entropy");
      const double q = detail::clamp_prob(1.0 - P(i, j), "binary_cross_entropy");
      out.value -= w * (y * std::log(p) + (1.0 - y) * std::log(q)) / n;
      out.grad(i, j) = -w * (y / p - (1.0 - y) / q) / n;
    }
  }
  return out;
}

// Binary dice loss over a batch of N datapoints:
//   1 - (2 sum(p y) + N gamma) / (sum(p^e) + sum(y^e) + N gamma),  e = 1 (plain) or 2 (squared)
inline LossValue dice_loss(const Vector& p, const Vector& y, double gamma, DiceForm form = DiceForm::plain) {
  if (p.size() == 0) throw ValidationError("dice_loss: empty input");
  if (p.size() != y.size()) throw ValidationError("dice_loss: size mismatch");
  const double ng = static_cast<double>(p.size()) * gamma;
  const double num = 2.0 * p.dot(y) + ng;
  double den = ng;
  if (form == DiceForm::plain)
    den += p.sum() + y.sum();
  else
    den += p.squaredNorm() + y.squaredNorm();
  LossValue out;
  out.value = 1.0 - num / den;
  out.grad = Matrix(p.size(), 1);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double dden = form == DiceForm::plain ? 1.0 : 2.0 * p(i);
    out.grad(i, 0) = -(2.0 * y(i) * den - num * dden) / (den * den);
  }
  return out;
}

// Self-adjusting dice: per datum 1 - (2(1-p)p y + gamma) / ((1-p)p + y + gamma), mean over the batch.
inline LossValue self_adjusting_dice(const Vector& p, const Vector& y, double gamma) {
  if (p.size() == 0) throw ValidationError("self_adjusting_dice: empty input");
  if (p.size() != y.size()) throw ValidationError("self_adjusting_dice: size mismatch");
  const double n = static_cast<double>(p.size());
  LossValue out{0.0, Matrix(p.size(), 1)};
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double a = (1.0 - p(i)) * p(i);
    const double da = 1.0 - 2.0 * p(i);
    const double num = 2.0 * a * y(i) + gamma;
    const double den = a + y(i) + gamma;
    out.value += (1.0 - num / den) / n;
    out.grad(i, 0) = -((2.0 * y(i) * den - num) * da) / (den * den) / n;
  }
  return out;
}

// One binary dice variant applied to a single column.
inline LossValue binary_dice(LossKind kind, const Vector& p, const Vector& y, double gamma) {
  switch (kind) {
    case LossKind::dice:
    case LossKind::generalized_dice: return dice_loss(p, y, gamma, DiceForm::plain);
    case LossKind::dice_squared: return dice_loss(p, y, gamma, DiceForm::squared);
    case LossKind::self_adjusting_dice: return self_adjusting_dice(p, y, gamma);
    default: throw ValidationError("not a dice loss: " + to_string(kind));
  }
}

// Sum over class columns of DL(p_j, y_j) / N_j^2, skipping classes with no positives.
// `kind` selects the per-column variant (plain dice by default).
inline LossValue generalized_dice(const Matrix& P, const Matrix& Y, double gamma, LossKind kind = LossKind::dice) {
  if (P.rows() != Y.rows() || P.cols() != Y.cols()) throw ValidationError("generalized_dice: shape mismatch");
  LossValue out{0.0, Matrix::Zero(P.rows(), P.cols())};
  bool any = false;
  for (Eigen::Index j = 0; j < P.cols(); ++j) {
    const double nj = Y.col(j).sum();
    if (nj == 0.0) continue;
    any = true;
    const double w = 1.0 / (nj * nj);
    const LossValue col = binary_dice(kind, P.col(j), Y.col(j), gamma);
    out.value += w * col.value;
    out.grad.col(j) = w * col.grad.col(0);
  }
  if (!any) throw ValidationError("generalized_dice: every class has zero support");
  return out;
}

// Weighted mean over class columns of a binary dice variant.
inline LossValue macro_dice(const Matrix& P, const Matrix& Y, double gamma, LossKind kind,
                            const std::vector<double>& weights = {}) {
  if (P.rows() != Y.rows() || P.cols() != Y.cols()) throw ValidationError("macro_dice: shape mismatch");
  LossValue out{0.0, Matrix::Zero(P.rows(), P.cols())};
  double total_w = 0.0;
  for (Eigen::Index j = 0; j < P.cols(); ++j) total_w += detail::weight_of(weights, j);
  if (total_w <= 0.0) throw ValidationError("macro_dice: class weights sum to zero");
  for (Eigen::Index j = 0; j < P.cols(); ++j) {
    const double w = detail::weight_of(weights, j) / total_w;
    const LossValue col = binary_dice(kind, P.col(j), Y.col(j), gamma);
    out.value += w * col.value;
    out.grad.col(j) = w * col.grad.col(0);
  }
  return out;
}

// Dispatch on a task's loss configuration. Y is an indicator matrix: one-hot rows
// for multiclass targets, multi-hot rows for multilabel targets.
inline LossValue evaluate(const LossConfig& cfg, const Matrix& P, const Matrix& Y) {
  switch (cfg.kind) {
    case LossKind::ce: return cross_entropy(P, Y, cfg.class_weights);
    case LossKind::bce: return binary_cross_entropy(P, Y, cfg.class_weights);
    case LossKind::generalized_dice: return generalized_dice(P, Y, cfg.gamma, LossKind::dice);
    case LossKind::dice:
    case LossKind::dice_squared:
    case LossKind::self_adjusting_dice:
      if (cfg.reduction == DiceReduction::generalized) return generalized_dice(P, Y, cfg.gamma, cfg.kind);
      return macro_dice(P, Y, cfg.gamma, cfg.kind, cfg.class_weights);
  }
  throw ValidationError("unsupported loss");
}

}  // namespace dmtl::losses

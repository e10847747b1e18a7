#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dmtl/autograd.hpp"

namespace dmtl {

struct OptimizerConfig {
  std::string kind = "adam";  // adam | sgd
  double lr_embedder = 2e-5;
  double lr_shared = 1e-3;
  double lr_heads = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables

  double lr_for(ag::ParamGroup g) const {
    switch (g) {
      case ag::ParamGroup::embedder: return lr_embedder;
      case ag::ParamGroup::shared: return lr_shared;
      case ag::ParamGroup::head: return lr_heads;
    }
    return lr_shared;
  }
};

// Adam / SGD over named parameters. Frozen parameters are skipped entirely, so
// their values stay bit-identical.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.kind != "adam" && cfg_.kind != "sgd") throw ValidationError("unknown optimizer '" + cfg_.kind + "'");
  }

  void step(const std::vector<ag::Parameter*>& params) {
    ++t_;
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (auto* p : params)
        if (p->trainable() && p->grad().size() != 0) sq += p->grad().squaredNorm();
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto* p : params) {
      if (!p->trainable() || p->grad().size() == 0) {
        p->zero_grad();
        continue;
      }
      const double lr = cfg_.lr_for(p->group());
      const ag::Matrix g = p->grad() * scale;
      if (cfg_.kind == "sgd") {
        p->mutable_value() -= lr * g;
      } else {
        auto& st = state_[p->name()];
        if (st.m.size() == 0) {
          st.m = ag::Matrix::Zero(g.rows(), g.cols());
          st.v = ag::Matrix::Zero(g.rows(), g.cols());
        }
        st.m = cfg_.beta1 * st.m + (1.0 - cfg_.beta1) * g;
        st.v = cfg_.beta2 * st.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        p->mutable_value().array() -=
            lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + cfg_.epsilon);
      }
      p->zero_grad();
    }
  }

  long steps() const { return t_; }

 private:
  struct Moments {
    ag::Matrix m, v;
  };
  OptimizerConfig cfg_;
  std::map<std::string, Moments> state_;
  long t_ = 0;
};

}  // namespace dmtl

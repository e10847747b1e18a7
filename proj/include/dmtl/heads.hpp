#pragma once

// Task-specific classification heads on top of the shared contextual encoder.

#include <algorithm>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "dmtl/autograd.hpp"
#include "dmtl/corpus.hpp"
#include "dmtl/crf.hpp"
#include "dmtl/losses.hpp"

namespace dmtl::heads {

using ag::Matrix;
using ag::Var;

enum class HeadKind { ffnn_multiclass, ffnn_multilabel, crf, hierarchical_two_level, hierarchical_flat };

inline std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::ffnn_multiclass: return "ffnn-multiclass";
    case HeadKind::ffnn_multilabel: return "ffnn-multilabel";
    case HeadKind::crf: return "crf";
    case HeadKind::hierarchical_two_level: return "hierarchical-2level";
    case HeadKind::hierarchical_flat: return "hierarchical-flat-multilabel";
  }
  return "?";
}

inline HeadKind head_kind_from_string(const std::string& s) {
  for (auto k : {HeadKind::ffnn_multiclass, HeadKind::ffnn_multilabel, HeadKind::crf, HeadKind::hierarchical_two_level,
                 HeadKind::hierarchical_flat})
    if (to_string(k) == s) return k;
  throw ValidationError("unknown head kind '" + s + "'");
}

inline HeadKind default_head_kind(TaskKind k) {
  return k == TaskKind::multiclass ? HeadKind::ffnn_multiclass : HeadKind::ffnn_multilabel;
}

struct Cluster {
  std::string name;
  std::vector<int> labels;  // label ids, in block order
};

// Partition of a label vocabulary into clusters of related labels.
struct LabelHierarchy {
  std::vector<Cluster> clusters;

  void validate(std::size_t k) const {
    if (clusters.empty()) throw ValidationError("label hierarchy has no clusters");
    std::vector<int> seen(k, 0);
    for (const auto& c : clusters) {
      if (c.labels.empty()) throw ValidationError("cluster '" + c.name + "' is empty");
      for (int l : c.labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= k)
          throw ValidationError("cluster '" + c.name + "' holds an unknown label id " + std::to_string(l));
        if (seen[static_cast<std::size_t>(l)]++) throw ValidationError("label id " + std::to_string(l) + " is in two clusters");
      }
    }
    for (std::size_t l = 0; l < k; ++l)
      if (!seen[l]) throw ValidationError("label id " + std::to_string(l) + " is in no cluster");
  }

  std::size_t cluster_count() const { return clusters.size(); }

  std::size_t flat_width() const {
    std::size_t w = clusters.size();
    for (const auto& c : clusters) w += c.labels.size();
    return w;
  }

  // Column where cluster c's label block starts in the flat vector.
  std::size_t block_offset(std::size_t c) const {
    std::size_t off = clusters.size();
    for (std::size_t i = 0; i < c; ++i) off += clusters[i].labels.size();
    return off;
  }

  // (cluster, position within the cluster) of a label.
  std::pair<std::size_t, std::size_t> locate(int label) const {
    for (std::size_t c = 0; c < clusters.size(); ++c)
      for (std::size_t i = 0; i < clusters[c].labels.size(); ++i)
        if (clusters[c].labels[i] == label) return {c, i};
    throw ValidationError("label id " + std::to_string(label) + " is not in any cluster");
  }

  static LabelHierarchy from_json(const json& j, const TaskSpec& task) {
    LabelHierarchy h;
    for (const auto& cj : j) {
      Cluster c;
      c.name = cj.at("name").get<std::string>();
      for (const auto& l : cj.at("labels").get<std::vector<std::string>>()) {
        auto id = task.label_id(l);
        if (!id) throw ValidationError("hierarchy cluster '" + c.name + "' names unknown label '" + l + "'");
        c.labels.push_back(*id);
      }
      h.clusters.push_back(std::move(c));
    }
    h.validate(task.size());
    return h;
  }
};

// Cluster one-hot followed by every cluster's label block; exactly two ones.
inline Eigen::VectorXd build_hierarchical_labels(int y, const LabelHierarchy& h) {
  const auto [c, pos] = h.locate(y);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(h.flat_width()));
  v(static_cast<Eigen::Index>(c)) = 1.0;
  v(static_cast<Eigen::Index>(h.block_offset(c) + pos)) = 1.0;
  return v;
}

// Decision rule shared by both hierarchical modes: argmax over the cluster block
// picks a cluster, argmax inside that cluster's label block picks the label.
// Ties go to the lowest index.
inline int hierarchical_classify(const Eigen::VectorXd& flat, const LabelHierarchy& h) {
  if (static_cast<std::size_t>(flat.size()) != h.flat_width()) throw ValidationError("hierarchical_classify: width mismatch");
  Eigen::Index c = 0;
  for (Eigen::Index i = 1; i < static_cast<Eigen::Index>(h.cluster_count()); ++i)
    if (flat(i) > flat(c)) c = i;
  const auto off = static_cast<Eigen::Index>(h.block_offset(static_cast<std::size_t>(c)));
  const auto& labels = h.clusters[static_cast<std::size_t>(c)].labels;
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < static_cast<Eigen::Index>(labels.size()); ++i)
    if (flat(off + i) > flat(off + best)) best = i;
  return labels[static_cast<std::size_t>(best)];
}

// Two-level form: cluster distribution plus one distribution per cluster sub-head.
inline int hierarchical_classify(const Eigen::VectorXd& cluster_probs, const std::vector<Eigen::VectorXd>& sub_probs,
                                 const LabelHierarchy& h) {
  if (sub_probs.size() != h.cluster_count() || static_cast<std::size_t>(cluster_probs.size()) != h.cluster_count())
    throw ValidationError("hierarchical_classify: cluster count mismatch");
  Eigen::VectorXd flat(static_cast<Eigen::Index>(h.flat_width()));
  flat.head(cluster_probs.size()) = cluster_probs;
  for (std::size_t c = 0; c < sub_probs.size(); ++c) {
    if (sub_probs[c].size() != static_cast<Eigen::Index>(h.clusters[c].labels.size()))
      throw ValidationError("hierarchical_classify: sub-head width mismatch");
    flat.segment(static_cast<Eigen::Index>(h.block_offset(c)), sub_probs[c].size()) = sub_probs[c];
  }
  return hierarchical_classify(flat, h);
}

struct HeadConfig {
  std::string task;
  HeadKind kind = HeadKind::ffnn_multiclass;
  std::size_t hidden_layers = 0;
  std::size_t hidden_width = 0;  // 0 = input width
  bool frozen = false;
  LabelHierarchy hierarchy;  // hierarchical kinds only
};

// Contextual rows of one document plus per-sentence gold (null = not covered).
struct DocTarget {
  Var contextual;
  std::vector<const LabelSet*> gold;
};

struct SentencePrediction {
  LabelSet labels;
  std::vector<double> probs;
};

// Affine layers with tanh between them.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& prefix, std::size_t in, std::size_t hidden_layers, std::size_t hidden_width,
      std::uint64_t seed) {
    std::size_t width = in;
    const std::size_t hw = hidden_width == 0 ? in : hidden_width;
    for (std::size_t l = 0; l < hidden_layers; ++l) {
      add_layer(prefix + ".hidden" + std::to_string(l), width, hw, seed);
      width = hw;
    }
    out_width_ = width;
  }

  std::size_t output_width() const { return out_width_; }

  Var operator()(Var x) const {
    for (std::size_t l = 0; l < weights_.size(); ++l)
      x = ag::tanh(ag::add_row(ag::matmul(x, weights_[l].var()), biases_[l].var()));
    return x;
  }

  void append_parameters(std::vector<ag::Parameter*>& out) {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.push_back(&weights_[l]);
      out.push_back(&biases_[l]);
    }
  }

 private:
  void add_layer(const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed) {
    weights_.emplace_back(name + ".weight",
                          ag::xavier_init(static_cast<ag::Index>(in), static_cast<ag::Index>(out),
                                          derive_seed(seed, name + ".weight")),
                          ag::ParamGroup::head);
    biases_.emplace_back(name + ".bias", Matrix::Zero(1, static_cast<ag::Index>(out)), ag::ParamGroup::head);
  }

  std::vector<ag::Parameter> weights_, biases_;
  std::size_t out_width_ = 0;
};

// Output affine map w -> k.
struct Affine {
  ag::Parameter weight, bias;

  Affine() = default;
  Affine(const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed)
      : weight(name + ".weight",
               ag::xavier_init(static_cast<ag::Index>(in), static_cast<ag::Index>(out), derive_seed(seed, name + ".weight")),
               ag::ParamGroup::head),
        bias(name + ".bias", Matrix::Zero(1, static_cast<ag::Index>(out)), ag::ParamGroup::head) {}

  Var operator()(const Var& x) const { return ag::add_row(ag::matmul(x, weight.var()), bias.var()); }
};

class Head {
 public:
  Head(HeadConfig cfg, const TaskSpec& task, std::size_t input_width, std::uint64_t seed)
      : cfg_(std::move(cfg)), task_(task), input_width_(input_width) {
    trunk_ = Mlp("head." + task_.name, input_width, cfg_.hidden_layers, cfg_.hidden_width, seed);
  }
  virtual ~Head() = default;
  Head(const Head&) = delete;
  Head& operator=(const Head&) = delete;

  const HeadConfig& config() const { return cfg_; }
  const TaskSpec& task() const { return task_; }
  std::size_t input_width() const { return input_width_; }

  // Per-row class probabilities (simplex rows for multiclass, independent
  // probabilities for multilabel).
  virtual Var probabilities(const Var& contextual) const = 0;
  // Mean loss over the covered sentences of a batch of documents.
  virtual Var loss(const std::vector<DocTarget>& batch) const = 0;
  virtual std::vector<SentencePrediction> predict(const Var& contextual) const = 0;

  std::vector<ag::Parameter*> parameters() {
    std::vector<ag::Parameter*> out;
    trunk_.append_parameters(out);
    append_output_parameters(out);
    return out;
  }

  void set_frozen(bool frozen) {
    cfg_.frozen = frozen;
    for (auto* p : parameters()) p->set_trainable(!frozen);
  }

 protected:
  virtual void append_output_parameters(std::vector<ag::Parameter*>& out) = 0;

  void check_width(const Var& contextual) const {
    if (static_cast<std::size_t>(contextual.cols()) != input_width_)
      throw ValidationError("head '" + task_.name + "' expects width " + std::to_string(input_width_) + ", got " +
                            std::to_string(contextual.cols()));
  }

  // Covered rows of every document stacked, with their gold label sets.
  std::pair<Var, std::vector<const LabelSet*>> covered_rows(const std::vector<DocTarget>& batch) const {
    std::vector<Var> parts;
    std::vector<const LabelSet*> gold;
    for (const auto& d : batch) {
      check_width(d.contextual);
      std::vector<ag::Index> idx;
      for (std::size_t j = 0; j < d.gold.size(); ++j)
        if (d.gold[j]) {
          idx.push_back(static_cast<ag::Index>(j));
          gold.push_back(d.gold[j]);
        }
      if (!idx.empty()) parts.push_back(ag::gather_rows(d.contextual, std::move(idx)));
    }
    if (parts.empty()) return {Var(), {}};
    return {parts.size() == 1 ? parts[0] : ag::concat_rows(parts), std::move(gold)};
  }

  Matrix indicator(const std::vector<const LabelSet*>& gold, std::size_t k) const {
    Matrix Y = Matrix::Zero(static_cast<ag::Index>(gold.size()), static_cast<ag::Index>(k));
    for (std::size_t i = 0; i < gold.size(); ++i)
      for (int id : *gold[i]) Y(static_cast<ag::Index>(i), id) = 1.0;
    return Y;
  }

  static Var zero_loss() { return ag::constant(Matrix::Zero(1, 1)); }

  Var scored_loss(const Var& probs, const Matrix& Y, const losses::LossConfig& cfg) const {
    auto lv = losses::evaluate(cfg, probs.value(), Y);
    return ag::external_loss(probs, lv.value, std::move(lv.grad));
  }

  HeadConfig cfg_;
  TaskSpec task_;
  std::size_t input_width_;
  Mlp trunk_;
};

namespace detail {
inline int argmax(const Eigen::RowVectorXd& r) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < r.size(); ++i)
    if (r(i) > r(best)) best = i;
  return static_cast<int>(best);
}

inline std::vector<double> to_vec(const Eigen::RowVectorXd& r) { return {r.data(), r.data() + r.size()}; }
}  // namespace detail

class FfnnHead final : public Head {
 public:
  FfnnHead(HeadConfig cfg, const TaskSpec& task, std::size_t input_width, std::uint64_t seed)
      : Head(std::move(cfg), task, input_width, seed),
        out_("head." + task.name + ".output", trunk_.output_width(), task.size(), seed),
        multilabel_(cfg_.kind == HeadKind::ffnn_multilabel) {}

  Var logits(const Var& contextual) const {
    check_width(contextual);
    return out_(trunk_(contextual));
  }

  Var probabilities(const Var& contextual) const override {
    return multilabel_ ? ag::sigmoid(logits(contextual)) : ag::softmax_rows(logits(contextual));
  }

  Var loss(const std::vector<DocTarget>& batch) const override {
    auto [rows, gold] = covered_rows(batch);
    if (gold.empty()) return zero_loss();
    return scored_loss(probabilities(rows), indicator(gold, task_.size()), task_.loss);
  }

  std::vector<SentencePrediction> predict(const Var& contextual) const override {
    ag::NoGradGuard ng;
    const Matrix P = probabilities(contextual).value();
    std::vector<SentencePrediction> out(static_cast<std::size_t>(P.rows()));
    for (ag::Index i = 0; i < P.rows(); ++i) {
      auto& p = out[static_cast<std::size_t>(i)];
      p.probs = detail::to_vec(P.row(i));
      if (multilabel_) {
        for (ag::Index j = 0; j < P.cols(); ++j)
          if (P(i, j) >= 0.5) p.labels.push_back(static_cast<int>(j));
      } else {
        p.labels.push_back(detail::argmax(P.row(i)));
      }
    }
    return out;
  }

  Affine& output() { return out_; }

 protected:
  void append_output_parameters(std::vector<ag::Parameter*>& out) override {
    out.push_back(&out_.weight);
    out.push_back(&out_.bias);
  }

 private:
  Affine out_;
  bool multilabel_;
};

class CrfHead final : public Head {
 public:
  CrfHead(HeadConfig cfg, const TaskSpec& task, std::size_t input_width, std::uint64_t seed)
      : Head(std::move(cfg), task, input_width, seed),
        emit_("head." + task.name + ".emission", trunk_.output_width(), task.size(), seed),
        transitions_("head." + task.name + ".transitions",
                     Matrix::Zero(static_cast<ag::Index>(task.size()), static_cast<ag::Index>(task.size())),
                     ag::ParamGroup::head) {}

  Var emissions(const Var& contextual) const {
    check_width(contextual);
    return emit_(trunk_(contextual));
  }

  // Posterior marginals per sentence.
  Var probabilities(const Var& contextual) const override {
    return ag::constant(crf::marginals(emissions(contextual).value(), transitions_.value()));
  }

  // Each maximal run of covered sentences is one sequence; mean NLL over runs.
  Var loss(const std::vector<DocTarget>& batch) const override {
    std::vector<Var> terms;
    for (const auto& d : batch) {
      Var em = emissions(d.contextual);
      std::size_t j = 0;
      while (j < d.gold.size()) {
        if (!d.gold[j]) {
          ++j;
          continue;
        }
        std::vector<ag::Index> rows;
        std::vector<int> path;
        for (; j < d.gold.size() && d.gold[j]; ++j) {
          rows.push_back(static_cast<ag::Index>(j));
          path.push_back(d.gold[j]->at(0));
        }
        Var run = ag::gather_rows(em, std::move(rows));
        auto r = crf::nll(run.value(), transitions_.value(), path);
        Matrix v(1, 1);
        v(0, 0) = r.value;
        terms.push_back(ag::make_op(std::move(v), {run, transitions_.var()},
                                    [ge = std::move(r.grad_emissions), gt = std::move(r.grad_transitions)](ag::Node& s) {
                                      ag::detail::push(s, 0, ge * s.grad(0, 0));
                                      ag::detail::push(s, 1, gt * s.grad(0, 0));
                                    }));
      }
    }
    if (terms.empty()) return zero_loss();
    return ag::scale(ag::sum(ag::concat_rows(terms)), 1.0 / static_cast<double>(terms.size()));
  }

  std::vector<SentencePrediction> predict(const Var& contextual) const override {
    ag::NoGradGuard ng;
    const Matrix E = emissions(contextual).value();
    const Matrix M = crf::marginals(E, transitions_.value());
    const auto path = crf::decode(E, transitions_.value());
    std::vector<SentencePrediction> out(path.size());
    for (std::size_t i = 0; i < path.size(); ++i) {
      out[i].labels = {path[i]};
      out[i].probs = detail::to_vec(M.row(static_cast<ag::Index>(i)));
    }
    return out;
  }

  ag::Parameter& transitions() { return transitions_; }

 protected:
  void append_output_parameters(std::vector<ag::Parameter*>& out) override {
    out.push_back(&emit_.weight);
    out.push_back(&emit_.bias);
    out.push_back(&transitions_);
  }

 private:
  Affine emit_;
  ag::Parameter transitions_;
};

// Two-level (cluster head + per-cluster sub-heads) or flat multilabel over the
// concatenated cluster/label indicator vector.
class HierarchicalHead final : public Head {
 public:
  HierarchicalHead(HeadConfig cfg, const TaskSpec& task, std::size_t input_width, std::uint64_t seed)
      : Head(std::move(cfg), task, input_width, seed), two_level_(cfg_.kind == HeadKind::hierarchical_two_level) {
    const auto& h = cfg_.hierarchy;
    h.validate(task.size());
    const std::string base = "head." + task.name;
    if (two_level_) {
      outputs_.emplace_back(base + ".cluster", trunk_.output_width(), h.cluster_count(), seed);
      for (std::size_t c = 0; c < h.cluster_count(); ++c)
        outputs_.emplace_back(base + ".sub" + std::to_string(c), trunk_.output_width(), h.clusters[c].labels.size(),
                              seed);
    } else {
      outputs_.emplace_back(base + ".flat", trunk_.output_width(), h.flat_width(), seed);
    }
  }

  // Flat score vector per row: cluster block followed by label blocks.
  Var flat_scores(const Var& contextual) const {
    check_width(contextual);
    Var z = trunk_(contextual);
    if (!two_level_) return ag::sigmoid(outputs_[0](z));
    std::vector<Var> parts;
    for (const auto& o : outputs_) parts.push_back(ag::softmax_rows(o(z)));
    return ag::concat_cols(parts);
  }

  // Label-level scores: p(cluster) * p(label | cluster) for two-level, the
  // product of the two sigmoid scores for flat.
  Var probabilities(const Var& contextual) const override {
    const Matrix F = flat_scores(contextual).value();
    const auto& h = cfg_.hierarchy;
    Matrix P(F.rows(), static_cast<ag::Index>(task_.size()));
    for (ag::Index i = 0; i < F.rows(); ++i)
      for (std::size_t c = 0; c < h.cluster_count(); ++c)
        for (std::size_t j = 0; j < h.clusters[c].labels.size(); ++j)
          P(i, h.clusters[c].labels[j]) = F(i, static_cast<ag::Index>(c)) * F(i, static_cast<ag::Index>(h.block_offset(c) + j));
    return ag::constant(P);
  }

  Var loss(const std::vector<DocTarget>& batch) const override {
    auto [rows, gold] = covered_rows(batch);
    if (gold.empty()) return zero_loss();
    const auto& h = cfg_.hierarchy;
    Var z = trunk_(rows);
    if (!two_level_) {
      Matrix Y(static_cast<ag::Index>(gold.size()), static_cast<ag::Index>(h.flat_width()));
      for (std::size_t i = 0; i < gold.size(); ++i)
        Y.row(static_cast<ag::Index>(i)) = build_hierarchical_labels(gold[i]->at(0), h).transpose();
      losses::LossConfig bce;
      bce.kind = losses::LossKind::bce;
      return scored_loss(ag::sigmoid(outputs_[0](z)), Y, bce);
    }
    // Cluster loss over every covered row, plus each sub-head's loss over the rows
    // of its cluster weighted by that cluster's share of rows.
    const double m = static_cast<double>(gold.size());
    Matrix Yc = Matrix::Zero(static_cast<ag::Index>(gold.size()), static_cast<ag::Index>(h.cluster_count()));
    std::vector<std::vector<ag::Index>> members(h.cluster_count());
    std::vector<std::vector<std::size_t>> positions(h.cluster_count());
    for (std::size_t i = 0; i < gold.size(); ++i) {
      const auto [c, pos] = h.locate(gold[i]->at(0));
      Yc(static_cast<ag::Index>(i), static_cast<ag::Index>(c)) = 1.0;
      members[c].push_back(static_cast<ag::Index>(i));
      positions[c].push_back(pos);
    }
    std::vector<Var> terms{scored_loss(ag::softmax_rows(outputs_[0](z)), Yc, task_.loss)};
    for (std::size_t c = 0; c < h.cluster_count(); ++c) {
      if (members[c].empty()) continue;
      Matrix Ys = Matrix::Zero(static_cast<ag::Index>(members[c].size()),
                               static_cast<ag::Index>(h.clusters[c].labels.size()));
      for (std::size_t i = 0; i < positions[c].size(); ++i)
        Ys(static_cast<ag::Index>(i), static_cast<ag::Index>(positions[c][i])) = 1.0;
      Var sub = ag::softmax_rows(outputs_[c + 1](ag::gather_rows(z, members[c])));
      terms.push_back(ag::scale(scored_loss(sub, Ys, task_.loss), static_cast<double>(members[c].size()) / m));
    }
    return ag::sum(ag::concat_rows(terms));
  }

  std::vector<SentencePrediction> predict(const Var& contextual) const override {
    ag::NoGradGuard ng;
    const Matrix F = flat_scores(contextual).value();
    const Matrix P = probabilities(contextual).value();
    std::vector<SentencePrediction> out(static_cast<std::size_t>(F.rows()));
    for (ag::Index i = 0; i < F.rows(); ++i) {
      out[static_cast<std::size_t>(i)].labels = {hierarchical_classify(Eigen::VectorXd(F.row(i).transpose()), cfg_.hierarchy)};
      out[static_cast<std::size_t>(i)].probs = detail::to_vec(P.row(i));
    }
    return out;
  }

 protected:
  void append_output_parameters(std::vector<ag::Parameter*>& out) override {
    for (auto& o : outputs_) {
      out.push_back(&o.weight);
      out.push_back(&o.bias);
    }
  }

 private:
  bool two_level_;
  std::vector<Affine> outputs_;
};

inline std::unique_ptr<Head> make_head(const HeadConfig& cfg, const TaskSpec& task, std::size_t input_width,
                                       std::uint64_t seed) {
  if (cfg.task != task.name) throw ValidationError("head config for '" + cfg.task + "' bound to task '" + task.name + "'");
  const bool mc = task.kind == TaskKind::multiclass;
  if (cfg.kind == HeadKind::ffnn_multilabel ? mc : !mc)
    throw ValidationError("head kind " + to_string(cfg.kind) + " is incompatible with " + to_string(task.kind) +
                          " task '" + task.name + "'");
  if (!mc && task.loss.kind == losses::LossKind::ce)
    throw ValidationError("multilabel task '" + task.name + "' cannot use cross-entropy; use bce or a dice loss");
  std::unique_ptr<Head> h;
  switch (cfg.kind) {
    case HeadKind::ffnn_multiclass:
    case HeadKind::ffnn_multilabel: h = std::make_unique<FfnnHead>(cfg, task, input_width, seed); break;
    case HeadKind::crf: h = std::make_unique<CrfHead>(cfg, task, input_width, seed); break;
    case HeadKind::hierarchical_two_level:
    case HeadKind::hierarchical_flat: h = std::make_unique<HierarchicalHead>(cfg, task, input_width, seed); break;
  }
  if (cfg.frozen) h->set_frozen(true);
  return h;
}

}  // namespace dmtl::heads

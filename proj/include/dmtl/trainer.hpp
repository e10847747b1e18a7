#pragma once

// Multitask training loop: uniform task sampling, alpha-weighted losses, early
// stopping on the primary task, and RunRecord serialization.

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dmtl/corpus.hpp"
#include "dmtl/encoder.hpp"
#include "dmtl/heads.hpp"
#include "dmtl/metrics.hpp"
#include "dmtl/optim.hpp"

namespace dmtl {

struct TaskWeighting {
  std::map<std::string, double> alpha;
  double c = 1.0;

  double of(const std::string& task) const {
    auto it = alpha.find(task);
    return it == alpha.end() ? 0.0 : it->second;
  }

  // Tasks with a positive weight, in map (name) order.
  std::vector<std::string> active() const {
    std::vector<std::string> out;
    for (const auto& [t, a] : alpha)
      if (a > 0.0) out.push_back(t);
    return out;
  }

  void validate() const {
    if (alpha.empty()) throw ValidationError("task weighting is empty");
    double s = 0.0;
    for (const auto& [t, a] : alpha) {
      if (!(a >= 0.0) || !std::isfinite(a)) throw ValidationError("alpha for task '" + t + "' must be finite and >= 0");
      s += a;
    }
    if (std::abs(s - c) > 1e-9)
      throw ValidationError("alpha sums to " + std::to_string(s) + " but c = " + std::to_string(c));
    if (active().empty()) throw ValidationError("no task has a positive alpha");
  }

  static TaskWeighting one_hot(const std::string& task, double c = 1.0) { return {{{task, c}}, c}; }

  TaskWeighting scaled(double s) const {
    TaskWeighting w{alpha, c * s};
    for (auto& [t, a] : w.alpha) a *= s;
    return w;
  }
};

inline json to_json(const TaskWeighting& w) { return {{"alpha", w.alpha}, {"c", w.c}}; }

inline TaskWeighting weighting_from_json(const json& j) {
  TaskWeighting w;
  if (j.contains("alpha")) {
    w.alpha = j.at("alpha").get<std::map<std::string, double>>();
    w.c = j.value("c", 1.0);
  } else {
    w.alpha = j.get<std::map<std::string, double>>();
    w.c = 0.0;
    for (const auto& [t, a] : w.alpha) w.c += a;
  }
  return w;
}

// Sum over tasks of alpha_t * L_t.
inline double joint_loss(const std::map<std::string, double>& task_losses, const TaskWeighting& w) {
  double s = 0.0;
  for (const auto& [t, l] : task_losses) {
    if (!w.alpha.count(t)) throw ValidationError("joint_loss: task '" + t + "' has no weight");
    s += w.alpha.at(t) * l;
  }
  return s;
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t steps_per_epoch = 0;  // 0 = number of train documents over active tasks
  std::size_t batch_size = 1;
  std::optional<std::uint64_t> seed;
  OptimizerConfig optimizer;
  std::vector<bool> embedder_trainable;  // per embedder block; empty = all trainable
  bool freeze_contextualizer = false;
  bool freeze_all = false;
  std::set<std::string> frozen_heads;  // auxiliary heads only
  std::string early_stop_metric = "macro_f1";  // macro_f1 | micro_f1 of the primary task on dev
  std::size_t patience = 3;  // 0 disables early stopping
  Split eval_split = Split::test;

  void validate() const {
    if (!seed) throw ValidationError("train config: seed is mandatory");
    if (batch_size == 0) throw ValidationError("train config: batch_size must be positive");
    if (early_stop_metric != "macro_f1" && early_stop_metric != "micro_f1")
      throw ValidationError("train config: unknown early-stop metric '" + early_stop_metric + "'");
    if (optimizer.kind != "adam" && optimizer.kind != "sgd")
      throw ValidationError("train config: unknown optimizer '" + optimizer.kind + "'");
  }
};

inline json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"steps_per_epoch", c.steps_per_epoch},
          {"batch_size", c.batch_size},
          {"seed", c.seed ? json(*c.seed) : json()},
          {"optimizer",
           {{"kind", c.optimizer.kind},
            {"lr_embedder", c.optimizer.lr_embedder},
            {"lr_shared", c.optimizer.lr_shared},
            {"lr_heads", c.optimizer.lr_heads},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"epsilon", c.optimizer.epsilon},
            {"clip_norm", c.optimizer.clip_norm}}},
          {"embedder_trainable", c.embedder_trainable},
          {"freeze_contextualizer", c.freeze_contextualizer},
          {"freeze_all", c.freeze_all},
          {"frozen_heads", c.frozen_heads},
          {"early_stop_metric", c.early_stop_metric},
          {"patience", c.patience},
          {"eval_split", to_string(c.eval_split)}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("seed") && !j.at("seed").is_null()) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.optimizer.kind = o.value("kind", c.optimizer.kind);
    c.optimizer.lr_embedder = o.value("lr_embedder", c.optimizer.lr_embedder);
    c.optimizer.lr_shared = o.value("lr_shared", c.optimizer.lr_shared);
    c.optimizer.lr_heads = o.value("lr_heads", c.optimizer.lr_heads);
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.epsilon = o.value("epsilon", c.optimizer.epsilon);
    c.optimizer.clip_norm = o.value("clip_norm", c.optimizer.clip_norm);
  }
  c.embedder_trainable = j.value("embedder_trainable", c.embedder_trainable);
  c.freeze_contextualizer = j.value("freeze_contextualizer", c.freeze_contextualizer);
  c.freeze_all = j.value("freeze_all", c.freeze_all);
  c.frozen_heads = j.value("frozen_heads", c.frozen_heads);
  c.early_stop_metric = j.value("early_stop_metric", c.early_stop_metric);
  c.patience = j.value("patience", c.patience);
  const auto split = split_from_string(j.value("eval_split", std::string("test")));
  if (!split) throw ValidationError("train config: unknown eval_split");
  c.eval_split = *split;
  return c;
}

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, json diagnostic) : Error(what), diagnostic_(std::move(diagnostic)) {}
  const json& diagnostic() const { return diagnostic_; }

 private:
  json diagnostic_;
};

// ---- model -------------------------------------------------------------------------

struct ModelConfig {
  encoder::EncoderConfig encoder;
  std::vector<heads::HeadConfig> heads;  // tasks without an entry get a default head
  std::string primary;
};

// Shared encoder plus one head per modelled task. Every component seeds from its
// own name, so adding or removing heads never changes the others' initial values.
class MultitaskModel {
 public:
  MultitaskModel(const ModelConfig& cfg, const std::vector<TaskSpec>& tasks, std::uint64_t seed)
      : primary_(cfg.primary), encoder_(cfg.encoder, seed) {
    bool have_primary = false;
    for (const auto& t : tasks) {
      heads::HeadConfig hc;
      hc.task = t.name;
      hc.kind = heads::default_head_kind(t.kind);
      for (const auto& h : cfg.heads)
        if (h.task == t.name) hc = h;
      heads_.push_back(heads::make_head(hc, t, encoder_.output_width(), seed));
      have_primary |= t.name == primary_;
    }
    if (!have_primary) throw ValidationError("primary task '" + primary_ + "' has no head");
  }

  encoder::SentenceEncoder& encoder() { return encoder_; }
  const std::string& primary() const { return primary_; }

  heads::Head& head(const std::string& task) {
    for (auto& h : heads_)
      if (h->task().name == task) return *h;
    throw ValidationError("no head for task '" + task + "'");
  }

  std::vector<heads::Head*> heads() {
    std::vector<heads::Head*> out;
    for (auto& h : heads_) out.push_back(h.get());
    return out;
  }

  std::vector<ag::Parameter*> parameters() {
    auto out = encoder_.parameters();
    for (auto& h : heads_)
      for (auto* p : h->parameters()) out.push_back(p);
    return out;
  }

 private:
  std::string primary_;
  encoder::SentenceEncoder encoder_;
  std::vector<std::unique_ptr<heads::Head>> heads_;
};

// Auxiliary-head freezing. The primary head may not be frozen.
inline void freeze_auxiliary_heads(MultitaskModel& model, const std::set<std::string>& flags) {
  for (const auto& t : flags)
    if (t == model.primary()) throw ValidationError("cannot freeze the primary head '" + t + "'");
  for (const auto& t : flags) model.head(t).set_frozen(true);
}

inline void apply_freezing(MultitaskModel& model, const TrainConfig& cfg) {
  if (!cfg.embedder_trainable.empty())
    encoder::apply_freeze_policy(model.encoder().embedder(), {cfg.embedder_trainable});
  if (cfg.freeze_contextualizer)
    for (auto* p : model.encoder().shared_parameters()) p->set_trainable(false);
  freeze_auxiliary_heads(model, cfg.frozen_heads);
  if (cfg.freeze_all)
    for (auto* p : model.parameters()) p->set_trainable(false);
}

// ---- sampling ----------------------------------------------------------------------

struct StepDraw {
  std::string task;
  std::vector<std::size_t> documents;  // indices into corpus.documents
};

// Task drawn uniformly among tasks with alpha > 0; documents drawn uniformly
// without replacement within the step from that task's train pool. Each task has
// its own document stream, so a one-hot weighting replays single-task training.
class TaskSampler {
 public:
  TaskSampler(const Corpus& corpus, const TaskWeighting& w, std::size_t batch, std::uint64_t seed)
      : active_(w.active()), batch_(batch), task_rng_(derive_seed(seed, "sampler.task")) {
    if (active_.empty()) throw ValidationError("no task has a positive alpha");
    for (const auto& t : active_) {
      auto& pool = pools_[t];
      for (std::size_t i = 0; i < corpus.documents.size(); ++i)
        if (corpus.documents[i].split == Split::train && corpus.documents[i].covers(t)) pool.push_back(i);
      if (pool.empty()) throw ValidationError("task '" + t + "' has no training documents");
      doc_rngs_.emplace(t, std::mt19937_64(derive_seed(seed, "sampler.docs." + t)));
    }
  }

  const std::vector<std::string>& active() const { return active_; }
  std::size_t pool_size(const std::string& t) const { return pools_.at(t).size(); }

  StepDraw next() {
    StepDraw d;
    if (active_.size() == 1) {
      d.task = active_[0];
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, active_.size() - 1);
      d.task = active_[pick(task_rng_)];
    }
    auto pool = pools_.at(d.task);
    auto& rng = doc_rngs_.at(d.task);
    const std::size_t m = std::min(batch_, pool.size());
    for (std::size_t i = 0; i < m; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
      d.documents.push_back(pool[i]);
    }
    return d;
  }

 private:
  std::vector<std::string> active_;
  std::size_t batch_;
  std::mt19937_64 task_rng_;
  std::map<std::string, std::vector<std::size_t>> pools_;
  std::map<std::string, std::mt19937_64> doc_rngs_;
};

inline StepDraw sample_step(TaskSampler& sampler) { return sampler.next(); }

// ---- run records -------------------------------------------------------------------

struct HeadOutput {
  LabelSet pred;
  std::vector<double> probs;
  std::optional<LabelSet> gold;
};

struct PredictionRow {
  std::string doc_id;
  std::size_t sentence = 0;
  std::map<std::string, HeadOutput> heads;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_metric = 0.0;
};

struct RunRecord {
  json config;  // snapshot of tasks, model, training settings
  TaskWeighting weighting;
  std::vector<TaskSpec> tasks;  // modelled tasks, in head order
  std::string primary;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  json metrics;  // task -> metric report on the evaluation split
  std::vector<PredictionRow> predictions;
  ag::Snapshot parameters;
};

// Per-task metric reports recomputed from a prediction dump (covered sentences only).
inline json metrics_from_predictions(const std::vector<PredictionRow>& rows, const std::vector<TaskSpec>& tasks) {
  json out = json::object();
  for (const auto& t : tasks) {
    std::vector<LabelSet> gold, pred;
    for (const auto& r : rows) {
      auto it = r.heads.find(t.name);
      if (it == r.heads.end() || !it->second.gold) continue;
      gold.push_back(*it->second.gold);
      pred.push_back(it->second.pred);
    }
    eval::MetricReport rep;
    if (t.kind == TaskKind::multiclass) {
      std::vector<int> g, p;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        g.push_back(gold[i].at(0));
        p.push_back(pred[i].at(0));
      }
      rep = eval::metric_report(g, p, t.size());
    } else {
      rep = eval::multilabel_report(gold, pred, t.size());
    }
    out[t.name] = eval::to_json(rep, t.vocabulary);
  }
  return out;
}

inline json to_json(const PredictionRow& r, const std::vector<TaskSpec>& tasks) {
  json heads = json::object();
  for (const auto& t : tasks) {
    auto it = r.heads.find(t.name);
    if (it == r.heads.end()) continue;
    const auto& h = it->second;
    auto names = [&](const LabelSet& ls) {
      json a = json::array();
      for (int id : ls) a.push_back(t.vocabulary.at(static_cast<std::size_t>(id)));
      return a;
    };
    heads[t.name] = {{"pred", names(h.pred)}, {"probs", h.probs}, {"gold", h.gold ? names(*h.gold) : json()}};
  }
  return {{"doc_id", r.doc_id}, {"sentence", r.sentence}, {"heads", heads}};
}

inline PredictionRow prediction_from_json(const json& j, const std::vector<TaskSpec>& tasks, std::size_t line) {
  PredictionRow r;
  try {
    r.doc_id = j.at("doc_id").get<std::string>();
    r.sentence = j.at("sentence").get<std::size_t>();
    for (const auto& [name, hj] : j.at("heads").items()) {
      const TaskSpec* t = nullptr;
      for (const auto& tt : tasks)
        if (tt.name == name) t = &tt;
      if (!t) throw ParseError(line, "prediction for unknown head '" + name + "'");
      auto ids = [&](const json& a) {
        LabelSet ls;
        for (const auto& l : a) {
          auto id = t->label_id(l.get<std::string>());
          if (!id) throw ParseError(line, "unknown label '" + l.get<std::string>() + "' for head '" + name + "'");
          ls.push_back(*id);
        }
        std::sort(ls.begin(), ls.end());
        return ls;
      };
      HeadOutput h;
      h.pred = ids(hj.at("pred"));
      h.probs = hj.at("probs").get<std::vector<double>>();
      if (!hj.at("gold").is_null()) h.gold = ids(hj.at("gold"));
      r.heads.emplace(name, std::move(h));
    }
  } catch (const json::exception& e) {
    throw ParseError(line, e.what());
  }
  return r;
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_run(const RunRecord& r, const fs::path& dir) {
  fs::create_directories(dir);
  json cfg = r.config;
  cfg["alpha"] = to_json(r.weighting);
  cfg["primary_task"] = r.primary;
  json tj = json::array();
  for (const auto& t : r.tasks) tj.push_back(task_to_json(t));
  cfg["tasks"] = tj;
  write_text(dir / "config.json", cfg.dump(2) + "\n");
  json hist = json::array();
  for (const auto& e : r.history)
    hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"dev_metric", e.dev_metric}});
  json m = {{"history", hist}, {"best_epoch", r.best_epoch}, {"test", r.metrics}};
  write_text(dir / "metrics.json", m.dump(2) + "\n");
  std::ostringstream pj;
  for (const auto& row : r.predictions) pj << to_json(row, r.tasks).dump() << '\n';
  write_text(dir / "predictions.jsonl", pj.str());
  ag::write_archive((dir / "checkpoint.bin").string(), r.parameters);
}

inline json read_json_file(const fs::path& p) {
  const std::string s = read_text(p);
  try {
    return json::parse(s);
  } catch (const json::exception& e) {
    throw Error(p.string() + ": " + e.what());
  }
}

inline RunRecord load_run(const fs::path& dir, bool with_checkpoint = false) {
  for (const char* f : {"config.json", "metrics.json", "predictions.jsonl"})
    if (!fs::exists(dir / f)) throw Error("run directory " + dir.string() + " is missing " + f);
  RunRecord r;
  r.config = read_json_file(dir / "config.json");
  try {
    r.weighting = weighting_from_json(r.config.at("alpha"));
    r.primary = r.config.at("primary_task").get<std::string>();
    r.tasks = tasks_from_json(r.config.at("tasks"));
  } catch (const json::exception& e) {
    throw Error((dir / "config.json").string() + ": " + e.what());
  }
  const json m = read_json_file(dir / "metrics.json");
  try {
    for (const auto& e : m.at("history"))
      r.history.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(), e.at("dev_metric").get<double>()});
    r.best_epoch = m.at("best_epoch").get<std::size_t>();
    r.metrics = m.at("test");
  } catch (const json::exception& e) {
    throw Error((dir / "metrics.json").string() + ": " + e.what());
  }
  std::istringstream in(read_text(dir / "predictions.jsonl"));
  std::string line;
  std::size_t n = 0;
  try {
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw ParseError(n, e.what());
      }
      r.predictions.push_back(prediction_from_json(j, r.tasks, n));
    }
  } catch (const ParseError& e) {
    throw Error((dir / "predictions.jsonl").string() + ": " + e.what());
  }
  if (with_checkpoint) r.parameters = ag::read_archive((dir / "checkpoint.bin").string());
  return r;
}

// ---- training ----------------------------------------------------------------------

// Head outputs for every sentence of the documents in `split` that some modelled
// task covers.
inline std::vector<PredictionRow> predict_split(MultitaskModel& model, const Corpus& corpus, Split split) {
  ag::NoGradGuard ng;
  std::vector<PredictionRow> rows;
  auto hs = model.heads();
  for (const auto& d : corpus.documents) {
    if (d.split != split) continue;
    const bool relevant = std::any_of(hs.begin(), hs.end(), [&](heads::Head* h) { return d.covers(h->task().name); });
    if (!relevant) continue;
    const auto enc = model.encoder().encode(d);
    std::vector<std::vector<heads::SentencePrediction>> per_head;
    for (auto* h : hs) per_head.push_back(h->predict(enc.contextual));
    for (std::size_t j = 0; j < d.sentences.size(); ++j) {
      PredictionRow r{d.doc_id, d.sentences[j].index, {}};
      for (std::size_t k = 0; k < hs.size(); ++k) {
        const auto& name = hs[k]->task().name;
        HeadOutput o{per_head[k][j].labels, per_head[k][j].probs, std::nullopt};
        if (const auto* g = d.sentences[j].find(name)) o.gold = *g;
        r.heads.emplace(name, std::move(o));
      }
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

inline double primary_metric(const json& metrics, const std::string& primary, const std::string& metric) {
  return metrics.at(primary).at(metric).get<double>();
}

// Model heads cover the primary task plus every task with alpha > 0.
inline std::vector<TaskSpec> modelled_tasks(const Corpus& corpus, const TaskWeighting& w, const std::string& primary) {
  std::vector<TaskSpec> out;
  for (const auto& t : corpus.tasks)
    if (t.name == primary || w.of(t.name) > 0.0) out.push_back(t);
  return out;
}

inline void validate_training_inputs(const Corpus& corpus, const TaskWeighting& w, const ModelConfig& mc,
                                     const TrainConfig& tc) {
  w.validate();
  tc.validate();
  corpus.task(mc.primary);
  for (const auto& [t, a] : w.alpha) corpus.task(t);
  for (const auto& t : tc.frozen_heads) {
    if (t == mc.primary) throw ValidationError("cannot freeze the primary head '" + t + "'");
    if (w.of(t) <= 0.0) throw ValidationError("frozen head '" + t + "' is not an active task");
  }
  for (const auto& h : mc.heads) corpus.task(h.task);
}

// Trains and evaluates one configuration. `model_out`, when given, receives the
// trained model (best dev parameters restored).
inline RunRecord train(const Corpus& corpus, const TaskWeighting& weighting, const ModelConfig& mc, const TrainConfig& tc,
                       std::unique_ptr<MultitaskModel>* model_out = nullptr) {
  validate_training_inputs(corpus, weighting, mc, tc);
  const std::uint64_t seed = *tc.seed;
  RunRecord rec;
  rec.weighting = weighting;
  rec.primary = mc.primary;
  rec.tasks = modelled_tasks(corpus, weighting, mc.primary);
  rec.config = {{"train", to_json(tc)}};

  auto model = std::make_unique<MultitaskModel>(mc, rec.tasks, seed);
  apply_freezing(*model, tc);
  auto params = model->parameters();
  Optimizer opt(tc.optimizer);
  TaskSampler sampler(corpus, weighting, tc.batch_size, seed);
  std::size_t steps = tc.steps_per_epoch;
  if (steps == 0)
    for (const auto& t : sampler.active()) steps += sampler.pool_size(t);

  auto dev_score = [&] {
    auto rows = predict_split(*model, corpus, Split::dev);
    const auto m = metrics_from_predictions(rows, rec.tasks);
    return primary_metric(m, mc.primary, tc.early_stop_metric);
  };
  const bool have_dev = corpus.covered_sentences(mc.primary, Split::dev) > 0;

  ag::Snapshot best = ag::snapshot(params);
  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const StepDraw draw = sample_step(sampler);
      heads::Head& head = model->head(draw.task);
      std::vector<heads::DocTarget> batch;
      for (std::size_t di : draw.documents) {
        const auto& d = corpus.documents[di];
        heads::DocTarget t{model->encoder().encode(d).contextual, {}};
        for (const auto& sen : d.sentences) t.gold.push_back(sen.find(draw.task));
        batch.push_back(std::move(t));
      }
      ag::Var loss = ag::scale(head.loss(batch), weighting.of(draw.task));
      const double lv = loss.value()(0, 0);
      if (!std::isfinite(lv)) {
        json diag = {{"epoch", epoch}, {"step", s}, {"task", draw.task}, {"loss", std::isnan(lv) ? "nan" : "inf"}};
        json docs = json::array();
        for (std::size_t di : draw.documents) docs.push_back(corpus.documents[di].doc_id);
        diag["documents"] = docs;
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(s) +
                                  " (task '" + draw.task + "')",
                              diag);
      }
      loss_sum += lv;
      if (loss.requires_grad()) ag::backward(loss);
      opt.step(params);
    }
    EpochRecord er{epoch, steps ? loss_sum / static_cast<double>(steps) : 0.0, 0.0};
    if (have_dev) {
      er.dev_metric = dev_score();
      if (er.dev_metric > best_score) {
        best_score = er.dev_metric;
        best = ag::snapshot(params);
        rec.best_epoch = epoch;
        since_best = 0;
      } else if (tc.patience > 0 && ++since_best >= tc.patience) {
        rec.history.push_back(er);
        break;
      }
    } else {
      best = ag::snapshot(params);
      rec.best_epoch = epoch;
    }
    rec.history.push_back(er);
  }
  ag::restore(params, best);

  rec.predictions = predict_split(*model, corpus, tc.eval_split);
  rec.metrics = metrics_from_predictions(rec.predictions, rec.tasks);
  rec.parameters = ag::snapshot(params);
  if (model_out) *model_out = std::move(model);
  return rec;
}

}  // namespace dmtl

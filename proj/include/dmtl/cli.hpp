#pragma once

// Config-driven pipeline commands: prepare, train, gridsearch, augment, analyze.

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dmtl/adapters.hpp"
#include "dmtl/augment.hpp"
#include "dmtl/corpus.hpp"
#include "dmtl/eval.hpp"
#include "dmtl/trainer.hpp"

namespace dmtl::cli {

// ---- config ------------------------------------------------------------------------

// Sets `path` (dotted) in `j`; the value is parsed as JSON when it can be,
// otherwise it is taken as a string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ValidationError("override key '" + key + "' has an empty component");
    if (!node->is_object()) {
      if (!node->is_null()) throw ValidationError("override key '" + key + "' descends into a non-object");
      *node = json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

struct ExperimentConfig {
  json raw;
  fs::path base;  // relative paths resolve against the config file's directory
  std::uint64_t seed = 0;
  fs::path out;

  fs::path path(const std::string& p) const {
    const fs::path q(p);
    return q.is_absolute() ? q : base / q;
  }

  const json& section(const char* name) const {
    static const json empty = json::object();
    return raw.contains(name) ? raw.at(name) : empty;
  }
};

inline ExperimentConfig load_config(const fs::path& file, const std::vector<std::string>& overrides,
                                    std::optional<std::uint64_t> seed, const std::optional<std::string>& out) {
  if (!fs::exists(file)) throw ValidationError("config file not found: " + file.string());
  ExperimentConfig c;
  try {
    c.raw = json::parse(read_text(file));
  } catch (const json::exception& e) {
    throw ValidationError(file.string() + ": " + e.what());
  }
  if (!c.raw.is_object()) throw ValidationError(file.string() + ": top level must be an object");
  for (const auto& o : overrides) apply_override(c.raw, o);
  c.base = fs::absolute(file).parent_path();
  if (seed) c.raw["seed"] = *seed;
  if (out) c.raw["out"] = *out;
  if (!c.raw.contains("seed") || !c.raw.at("seed").is_number_unsigned())
    throw ValidationError("config needs a non-negative integer 'seed'");
  c.seed = c.raw.at("seed").get<std::uint64_t>();
  c.out = c.path(c.raw.value("out", std::string("out")));
  return c;
}

template <typename F>
auto with_context(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const ValidationError& e) {
    throw ValidationError(what + ": " + e.what());
  } catch (const ParseError& e) {
    throw ValidationError(what + ": " + e.what());
  } catch (const json::exception& e) {
    throw ValidationError(what + ": " + e.what());
  }
}

// ---- prepare -----------------------------------------------------------------------

struct DatasetSpec {
  std::string name, kind, task;
  fs::path path, documents, annotations, tag_map;
  std::size_t min_sentences = 0;
  bool downsample = false;
  std::size_t max_documents = 0;
};

inline std::vector<DatasetSpec> dataset_specs(const ExperimentConfig& c) {
  std::vector<DatasetSpec> out;
  const json& ds = c.section("datasets");
  if (!ds.is_array() || ds.empty()) throw ValidationError("config: 'datasets' must be a non-empty list");
  for (const auto& d : ds) {
    DatasetSpec s;
    s.name = d.at("name").get<std::string>();
    s.kind = d.value("kind", std::string("corpus"));
    auto need = [&](const char* key) {
      if (!d.contains(key)) throw ValidationError("dataset '" + s.name + "' needs '" + key + "'");
      const fs::path p = c.path(d.at(key).get<std::string>());
      if (!fs::exists(p)) throw ValidationError("dataset '" + s.name + "': missing input " + p.string());
      return p;
    };
    if (s.kind == "corpus") {
      s.path = need("path");
    } else if (s.kind == "rst" || s.kind == "pdtb" || s.kind == "events") {
      s.task = d.at("task").get<std::string>();
      s.documents = need("documents");
      s.annotations = need("annotations");
      if (s.kind == "rst") s.tag_map = need("tag_map");
    } else {
      throw ValidationError("dataset '" + s.name + "': unknown kind '" + s.kind + "'");
    }
    s.min_sentences = d.value("min_sentences", std::size_t{0});
    s.downsample = d.value("downsample", false);
    s.max_documents = d.value("max_documents", std::size_t{0});
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<Document> read_raw_documents(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot read " + p.string());
  std::vector<Document> docs;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(n, e.what());
    }
    docs.push_back(document_from_json(j, {}, n));
  }
  return docs;
}

template <typename Reader>
auto read_records(const fs::path& p, Reader r) {
  std::ifstream in(p);
  if (!in) throw Error("cannot read " + p.string());
  return r(in);
}

// Builds one auxiliary corpus from raw documents plus relation / nugget records.
inline Corpus adapt_dataset(const DatasetSpec& s) {
  Corpus c;
  TaskSpec task;
  task.name = s.task;
  task.kind = TaskKind::multilabel;
  task.loss.kind = losses::LossKind::bce;
  auto docs = read_raw_documents(s.documents);
  std::map<std::string, adapters::SentenceLabels> labels;
  if (s.kind == "events") {
    task.vocabulary = adapters::event_types();
    const auto nuggets = adapters::group_by_document(read_records(s.annotations, adapters::parse_event_nuggets));
    for (const auto& d : docs) {
      auto it = nuggets.find(d.doc_id);
      labels[d.doc_id] = adapters::project_event_nuggets(d, it == nuggets.end() ? std::vector<adapters::EventNugget>{} : it->second);
    }
  } else {
    auto relations = read_records(s.annotations, adapters::parse_relations);
    std::optional<adapters::TagMap> map;
    if (s.kind == "pdtb") {
      std::tie(relations, docs) = adapters::filter_pdtb_temporal(relations, docs);
      task.vocabulary = adapters::pdtb_temporal_whitelist();
    } else {
      map = adapters::load_tag_map(s.tag_map);
      task.vocabulary = map->targets();
    }
    const auto grouped = adapters::group_by_document(relations);
    for (const auto& d : docs) {
      auto it = grouped.find(d.doc_id);
      auto l = adapters::project_relations_to_sentences(d, it == grouped.end() ? std::vector<adapters::RelationRecord>{} : it->second);
      labels[d.doc_id] = map ? adapters::map_tags(l, *map) : l;
    }
  }
  for (auto& d : docs) {
    adapters::assign_labels(d, task, labels.at(d.doc_id));
    if (d.source.empty()) d.source = s.name;
  }
  c.tasks = {task};
  c.documents = std::move(docs);
  return c;
}

struct TaskStats {
  std::string task;
  std::size_t documents = 0, sentences = 0, tags = 0;
  std::optional<double> imbalance;
};

inline std::vector<TaskStats> corpus_stats(const Corpus& c) {
  std::vector<TaskStats> out;
  for (const auto& t : c.tasks) {
    TaskStats s{t.name, 0, 0, t.size(), std::nullopt};
    for (const auto& d : c.documents)
      if (d.covers(t.name)) ++s.documents;
    s.sentences = c.covered_sentences(t.name);
    try {
      const auto counts = class_counts(c, t.name, Split::train);
      if (!counts.empty_split) s.imbalance = imbalance_ratio(counts);
    } catch (const ValidationError&) {
      // degenerate distribution; left empty
    }
    out.push_back(s);
  }
  return out;
}

inline void cmd_prepare(const ExperimentConfig& c, std::ostream& log) {
  const auto specs = with_context("config", [&] { return dataset_specs(c); });
  const DatasetSpec* target = nullptr;
  for (const auto& s : specs)
    if (s.kind == "corpus") {
      target = &s;
      break;
    }
  Corpus merged;
  std::optional<Corpus> primary;
  if (target) {
    primary = with_context("dataset '" + target->name + "'", [&] { return load_corpus(target->path); });
  }
  for (const auto& s : specs) {
    Corpus part = with_context("dataset '" + s.name + "'", [&]() -> Corpus {
      if (&s == target) return *primary;
      Corpus p = s.kind == "corpus" ? load_corpus(s.path) : adapt_dataset(s);
      if (s.min_sentences > 0)
        for (const auto& t : p.tasks) p = adapters::filter_rare_tags(p, t.name, s.min_sentences);
      if (s.downsample) {
        if (!primary) throw ValidationError("downsampling needs a primary corpus dataset");
        auto r = adapters::downsample_to_length_distribution(p, *primary, derive_seed(c.seed, "downsample." + s.name),
                                                             s.max_documents);
        p = std::move(r.corpus);
      }
      p.validate();
      return p;
    });
    for (const auto& t : part.tasks) {
      if (merged.find_task(t.name)) throw ValidationError("dataset '" + s.name + "': task '" + t.name + "' defined twice");
      merged.tasks.push_back(t);
    }
    for (auto& d : part.documents) merged.documents.push_back(std::move(d));
  }
  std::set<std::string> ids;
  for (const auto& d : merged.documents)
    if (!ids.insert(d.doc_id).second) throw ValidationError("document id '" + d.doc_id + "' appears in two datasets");
  merged.validate();

  fs::create_directories(c.out);
  save_corpus(merged, c.out / "corpus");
  json stats = json::array();
  std::ostringstream csv;
  csv << "task,documents,sentences,tags,imbalance\n";
  for (const auto& s : corpus_stats(merged)) {
    stats.push_back({{"task", s.task},
                     {"documents", s.documents},
                     {"sentences", s.sentences},
                     {"tags", s.tags},
                     {"imbalance", s.imbalance ? json(*s.imbalance) : json()}});
    csv << s.task << ',' << s.documents << ',' << s.sentences << ',' << s.tags << ',' << eval::fmt(s.imbalance, 4) << '\n';
  }
  write_text(c.out / "stats.json", stats.dump(2) + "\n");
  write_text(c.out / "stats.csv", csv.str());
  log << "prepared " << merged.documents.size() << " documents, " << merged.tasks.size() << " tasks -> "
      << (c.out / "corpus").string() << '\n';
}

// ---- train -------------------------------------------------------------------------

inline fs::path corpus_path(const ExperimentConfig& c) {
  const fs::path p = c.raw.contains("corpus") ? c.path(c.raw.at("corpus").get<std::string>()) : c.out / "corpus";
  if (!fs::exists(p)) throw ValidationError("corpus not found: " + p.string() + " (run prepare first?)");
  return p;
}

// Loads the corpus and applies per-task loss overrides from the "losses" section.
inline Corpus load_experiment_corpus(const ExperimentConfig& c) {
  Corpus corpus = with_context("corpus", [&] { return load_corpus(corpus_path(c)); });
  with_context("losses", [&] {
    for (const auto& [task, lj] : c.section("losses").items()) {
      bool found = false;
      for (auto& t : corpus.tasks)
        if (t.name == task) {
          t.loss = loss_from_json(lj);
          t.validate();
          found = true;
        }
      if (!found) throw ValidationError("unknown task '" + task + "'");
    }
    return 0;
  });
  return corpus;
}

inline ModelConfig model_config(const ExperimentConfig& c, const Corpus& corpus) {
  return with_context("config", [&] {
    ModelConfig m;
    if (!c.raw.contains("primary_task")) throw ValidationError("'primary_task' is required");
    m.primary = c.raw.at("primary_task").get<std::string>();
    corpus.task(m.primary);
    const json& e = c.section("encoder");
    if (e.contains("embedder")) {
      const json& em = e.at("embedder");
      if (em.value("kind", std::string("toy")) != "toy")
        throw ValidationError("unknown embedder '" + em.at("kind").get<std::string>() + "'");
      m.encoder.embedder.dim = em.value("dim", m.encoder.embedder.dim);
      m.encoder.embedder.buckets = em.value("buckets", m.encoder.embedder.buckets);
      m.encoder.embedder.blocks = em.value("blocks", m.encoder.embedder.blocks);
      m.encoder.embedder.max_tokens = em.value("max_tokens", m.encoder.embedder.max_tokens);
    }
    if (e.contains("mask")) m.encoder.mask = encoder::AugmentationMask::parse(e.at("mask").get<std::vector<std::string>>());
    m.encoder.positional_dim = e.value("positional_dim", m.encoder.positional_dim);
    m.encoder.lstm_hidden = e.value("lstm_hidden", m.encoder.lstm_hidden);
    for (const auto& hj : c.section("heads")) {
      heads::HeadConfig h;
      h.task = hj.at("task").get<std::string>();
      const TaskSpec& t = corpus.task(h.task);
      h.kind = hj.contains("kind") ? heads::head_kind_from_string(hj.at("kind").get<std::string>())
                                   : heads::default_head_kind(t.kind);
      h.hidden_layers = hj.value("hidden_layers", std::size_t{0});
      h.hidden_width = hj.value("hidden_width", std::size_t{0});
      h.frozen = hj.value("frozen", false);
      if (hj.contains("hierarchy")) {
        const json& hh = hj.at("hierarchy");
        h.hierarchy = heads::LabelHierarchy::from_json(
            hh.is_string() ? json::parse(read_text(c.path(hh.get<std::string>()))) : hh, t);
      } else if (h.kind == heads::HeadKind::hierarchical_two_level || h.kind == heads::HeadKind::hierarchical_flat) {
        throw ValidationError("head '" + h.task + "' needs a 'hierarchy'");
      }
      m.heads.push_back(std::move(h));
    }
    return m;
  });
}

inline TrainConfig train_config(const ExperimentConfig& c, const ModelConfig& m) {
  return with_context("config", [&] {
    TrainConfig t = train_config_from_json(c.section("train"));
    t.seed = c.seed;
    const json& f = c.section("encoder").contains("freeze") ? c.section("encoder").at("freeze") : json::object();
    const std::size_t blocks = m.encoder.embedder.blocks + 1;
    if (f.contains("unfreeze_last"))
      t.embedder_trainable = encoder::FreezePolicy::unfreeze_last(blocks, f.at("unfreeze_last").get<std::size_t>()).trainable;
    if (f.contains("trainable")) t.embedder_trainable = f.at("trainable").get<std::vector<bool>>();
    if (!t.embedder_trainable.empty() && t.embedder_trainable.size() != blocks)
      throw ValidationError("encoder.freeze lists " + std::to_string(t.embedder_trainable.size()) +
                            " blocks but the embedder has " + std::to_string(blocks));
    t.freeze_contextualizer = f.value("contextualizer", t.freeze_contextualizer);
    return t;
  });
}

inline TaskWeighting weighting(const ExperimentConfig& c, const ModelConfig& m) {
  if (!c.raw.contains("weighting")) return TaskWeighting::one_hot(m.primary);
  return with_context("weighting", [&] { return weighting_from_json(c.raw.at("weighting")); });
}

inline std::unique_ptr<augment::Augmenter> make_augmenter(const ExperimentConfig& c) {
  const json& a = c.section("augment");
  const double temp = a.value("temperature", 1.0);
  const std::uint64_t seed = derive_seed(c.seed, "augment");
  const std::string kind = a.value("kind", std::string("mock"));
  if (kind == "mock") return std::make_unique<augment::MockAugmenter>(seed, temp);
  if (kind == "external")
    return std::make_unique<augment::ProcessAugmenter>(a.value("translate_out", std::string()),
                                                       a.value("translate_back", std::string()), seed, temp);
  throw ValidationError("augment: unknown kind '" + kind + "'");
}

// Corpus used for training: optionally expanded with paraphrase copies.
inline Corpus training_corpus(const ExperimentConfig& c, Corpus corpus) {
  const json& a = c.section("augment");
  if (!a.value("apply_in_train", false)) return corpus;
  auto aug = make_augmenter(c);
  return augment::expand_training_set(corpus, *aug, a.value("copies", std::size_t{10}));
}

inline json config_snapshot(const ExperimentConfig& c) {
  json j = c.raw;
  j.erase("out");
  return j;
}

inline void cmd_train(const ExperimentConfig& c, std::ostream& log) {
  Corpus corpus = load_experiment_corpus(c);
  const ModelConfig m = model_config(c, corpus);
  const TrainConfig t = train_config(c, m);
  const TaskWeighting w = weighting(c, m);
  with_context("config", [&] {
    validate_training_inputs(corpus, w, m, t);
    return 0;
  });
  corpus = training_corpus(c, std::move(corpus));
  RunRecord r = train(corpus, w, m, t);
  r.config["experiment"] = config_snapshot(c);
  save_run(r, c.out / "run");
  log << "trained; " << m.primary << " macro F1 " << eval::fmt(r.metrics.at(m.primary).at("macro_f1").get<double>(), 4)
      << ", micro F1 " << eval::fmt(r.metrics.at(m.primary).at("micro_f1").get<double>(), 4) << " -> "
      << (c.out / "run").string() << '\n';
}

inline std::vector<TaskWeighting> grid_points(const ExperimentConfig& c, const Corpus& corpus) {
  return with_context("grid", [&] {
    const json& g = c.section("grid");
    std::vector<TaskWeighting> out;
    std::vector<std::string> tasks = g.value("tasks", std::vector<std::string>{});
    if (tasks.empty())
      for (const auto& t : corpus.tasks) tasks.push_back(t.name);
    for (const auto& t : tasks) corpus.task(t);
    if (g.value("simplex", true)) out = eval::simplex_grid(tasks, g.value("resolution", std::size_t{10}));
    for (const auto& e : g.value("explicit", json::array())) out.push_back(weighting_from_json(e));
    if (out.empty()) throw ValidationError("grid is empty");
    return out;
  });
}

inline void cmd_gridsearch(const ExperimentConfig& c, std::ostream& log) {
  Corpus corpus = load_experiment_corpus(c);
  const ModelConfig m = model_config(c, corpus);
  const TrainConfig t = train_config(c, m);
  const auto grid = grid_points(c, corpus);
  corpus = training_corpus(c, std::move(corpus));
  const fs::path dir = c.out / "grid";
  fs::create_directories(dir);
  const auto g = eval::grid_search(corpus, grid, m, t, dir);
  log << "grid search: " << g.trials.size() << " trials";
  if (g.best_macro) log << ", best macro F1 " << eval::fmt(g.trials[*g.best_macro].macro_f1, 4);
  log << " -> " << dir.string() << '\n';
}

inline void cmd_augment(const ExperimentConfig& c, std::ostream& log) {
  const Corpus corpus = load_experiment_corpus(c);
  auto aug = with_context("augment", [&] { return make_augmenter(c); });
  augment::ExpansionStats st;
  const Corpus out = augment::expand_training_set(corpus, *aug, c.section("augment").value("copies", std::size_t{10}), &st);
  save_corpus(out, c.out / "augmented");
  log << "added " << st.added_documents << " documents (" << st.failed_copies << " failed) -> "
      << (c.out / "augmented").string() << '\n';
}

// ---- analyze -----------------------------------------------------------------------

inline std::string safe_name(std::string s) {
  for (auto& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
  return s;
}

inline std::string csv_field(const std::string& s) { return eval::csv_escape(s); }

// Report bundle for one run directory, derived from predictions.jsonl.
inline json analyze_run(const fs::path& run_dir, const fs::path& report) {
  const RunRecord r = load_run(run_dir);
  fs::create_directories(report);
  json summary = {{"primary_task", r.primary}, {"sentences", r.predictions.size()}};
  const json recomputed = metrics_from_predictions(r.predictions, r.tasks);
  summary["metrics_consistent"] = recomputed == r.metrics;
  json tasks = json::object();
  std::ostringstream kl;
  kl << "task,kl_pred_vs_gold,smoothed\n";
  for (const auto& t : r.tasks) {
    const json& m = recomputed.at(t.name);
    write_text(report / ("metrics_" + safe_name(t.name) + ".csv"), eval::metric_csv(m));
    if (m.contains("confusion")) write_text(report / ("confusion_" + safe_name(t.name) + ".csv"), eval::confusion_csv(m));
    tasks[t.name] = {{"macro_f1", m.at("macro_f1")}, {"micro_f1", m.at("micro_f1")}, {"count", m.at("count")}};
    const auto dist = eval::class_distribution(r.predictions, t);
    double total = 0.0;
    for (double v : dist.gold) total += v;
    if (t.kind == TaskKind::multiclass && total > 0.0) {
      const auto k = eval::prediction_distribution_kl(dist.predicted, dist.gold);
      tasks[t.name]["kl_pred_vs_gold"] = k.value;
      kl << csv_field(t.name) << ',' << eval::fmt(k.value) << ',' << (k.smoothed ? "true" : "false") << '\n';
    }
  }
  summary["tasks"] = tasks;
  write_text(report / "kl.csv", kl.str());

  json corr = json::array();
  const TaskSpec* primary = nullptr;
  for (const auto& t : r.tasks)
    if (t.name == r.primary) primary = &t;
  if (r.tasks.size() < 2 || !primary) {
    summary["correlation"] = "not applicable (single head)";
  } else {
    for (const auto& t : r.tasks) {
      if (&t == primary) continue;
      const auto table = eval::cross_head_correlation(r.predictions, *primary, t);
      const std::string stem = "correlation_" + safe_name(primary->name) + "_" + safe_name(t.name);
      write_text(report / (stem + ".csv"), eval::correlation_csv(table));
      write_text(report / (stem + ".svg"), eval::heatmap_svg(table.tags_a, table.tags_b, table.rho, 0.1));
      corr.push_back(stem + ".csv");
    }
    summary["correlation"] = corr;
  }
  write_text(report / "summary.json", summary.dump(2) + "\n");
  return summary;
}

inline json analyze_grid(const fs::path& grid_dir, const fs::path& report) {
  const json tj = read_json_file(grid_dir / "trials.json");
  eval::GridResult g;
  try {
    for (const auto& t : tj.at("trials")) g.trials.push_back(eval::trial_from_json(t));
  } catch (const json::exception& e) {
    throw Error((grid_dir / "trials.json").string() + ": " + e.what());
  }
  if (g.trials.empty()) throw Error((grid_dir / "trials.json").string() + ": no trials");
  // Recompute each trial from its own prediction dump.
  std::optional<TaskSpec> primary;
  for (auto& t : g.trials) {
    if (t.failed || t.run_dir.empty()) continue;
    const RunRecord r = load_run(grid_dir / t.run_dir);
    const json m = metrics_from_predictions(r.predictions, r.tasks);
    RunRecord tmp = r;
    tmp.metrics = m;
    const auto fresh = eval::trial_from_run(tmp);
    t.macro_f1 = fresh.macro_f1;
    t.micro_f1 = fresh.micro_f1;
    t.class_f1 = fresh.class_f1;
    if (!primary)
      for (const auto& tk : r.tasks)
        if (tk.name == r.primary) primary = tk;
  }
  if (!primary) throw Error((grid_dir / "trials.json").string() + ": no successful trial with a run directory");
  eval::finish_grid(g, *primary);
  fs::create_directories(report);

  std::vector<std::string> tasks;
  for (const auto& [k, a] : g.trials[0].alpha.alpha) tasks.push_back(k);
  std::ostringstream csv;
  csv << "trial";
  for (const auto& k : tasks) csv << ",alpha_" << csv_field(k);
  csv << ",macro_f1,micro_f1,failed\n";
  std::vector<std::string> row_names;
  std::vector<std::vector<std::optional<double>>> heat;
  for (std::size_t i = 0; i < g.trials.size(); ++i) {
    const auto& t = g.trials[i];
    csv << eval::trial_name(i);
    std::string label;
    for (const auto& k : tasks) {
      csv << ',' << eval::fmt(t.alpha.of(k), 2);
      label += (label.empty() ? "" : " ") + eval::fmt(t.alpha.of(k), 1);
    }
    csv << ',' << eval::fmt(t.macro_f1) << ',' << eval::fmt(t.micro_f1) << ',' << (t.failed ? "true" : "false") << '\n';
    row_names.push_back(label);
    std::vector<std::optional<double>> cells;
    for (double f : t.class_f1) cells.push_back(t.failed ? std::nullopt : std::optional<double>(f));
    cells.push_back(t.failed ? std::nullopt : std::optional<double>(t.macro_f1));
    cells.push_back(t.failed ? std::nullopt : std::optional<double>(t.micro_f1));
    heat.push_back(cells);
  }
  write_text(report / "trials.csv", csv.str());
  auto cols = primary->vocabulary;
  cols.push_back("macro");
  cols.push_back("micro");
  write_text(report / "trials_heatmap.svg", eval::heatmap_svg(row_names, cols, heat));

  std::ostringstream tag;
  tag << "tag,trial,f1";
  for (const auto& k : tasks) tag << ",alpha_" << csv_field(k);
  tag << '\n';
  for (std::size_t c = 0; c < g.tags.size(); ++c) {
    tag << csv_field(g.tags[c]);
    const auto& b = g.best_by_tag[c];
    if (b) {
      tag << ',' << eval::trial_name(*b) << ',' << eval::fmt(g.trials[*b].class_f1[c]);
      for (const auto& k : tasks) tag << ',' << eval::fmt(g.trials[*b].alpha.of(k), 2);
    }
    tag << '\n';
  }
  write_text(report / "best_alpha_by_tag.csv", tag.str());

  json summary = eval::to_json(g);
  json reg = json::object();
  for (auto [name, target] : {std::pair{"macro", eval::Target::macro}, std::pair{"micro", eval::Target::micro}}) {
    try {
      const auto r = eval::regress_alpha_to_f1(g.trials, target, true);
      json beta = json::object();
      for (std::size_t i = 0; i < r.tasks.size(); ++i) beta[r.tasks[i]] = r.beta[i];
      reg[name] = {{"beta", beta}, {"intercept", r.intercept}, {"method", "min-norm least squares on centered data"}};
    } catch (const ValidationError& e) {
      reg[name] = {{"error", e.what()}};
    }
  }
  summary["regression"] = reg;
  write_text(report / "grid_summary.json", summary.dump(2) + "\n");
  return summary;
}

inline void cmd_analyze(const ExperimentConfig& c, const std::optional<std::string>& target, std::ostream& log) {
  std::vector<fs::path> inputs;
  if (target) {
    inputs.push_back(fs::path(*target));
  } else {
    for (const char* d : {"run", "grid"})
      if (fs::exists(c.out / d)) inputs.push_back(c.out / d);
  }
  if (inputs.empty()) throw ValidationError("analyze: nothing to analyze under " + c.out.string());
  for (const auto& in : inputs) {
    if (!fs::is_directory(in)) throw ValidationError("analyze: not a directory: " + in.string());
    const fs::path report = in / "report";
    if (fs::exists(in / "trials.json"))
      analyze_grid(in, report);
    else
      analyze_run(in, report);
    log << "report -> " << report.string() << '\n';
  }
}

// ---- entry point -------------------------------------------------------------------

// Exit codes: 0 success, 1 validation error, 2 runtime error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"multitask discourse tagging pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::vector<std::string> overrides;
  std::optional<std::string> analyze_target;
  app.add_option("--config", config_path, "experiment config (JSON)")->required();
  app.add_option("--seed", seed, "override the top-level seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--override", overrides, "key=value override (dotted key); repeatable");
  app.fallthrough();
  auto* prepare = app.add_subcommand("prepare", "build the merged corpus and statistics");
  auto* train_cmd = app.add_subcommand("train", "train one configuration");
  auto* grid = app.add_subcommand("gridsearch", "train every alpha of the grid");
  auto* aug = app.add_subcommand("augment", "write a paraphrase-expanded corpus");
  auto* analyze = app.add_subcommand("analyze", "write report tables for a run or grid directory");
  analyze->add_option("dir", analyze_target, "run or grid directory (default: <out>/run and <out>/grid)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  try {
    const auto cfg = load_config(config_path, overrides, seed, out_dir);
    if (prepare->parsed()) cmd_prepare(cfg, out);
    if (train_cmd->parsed()) cmd_train(cfg, out);
    if (grid->parsed()) cmd_gridsearch(cfg, out);
    if (aug->parsed()) cmd_augment(cfg, out);
    if (analyze->parsed()) cmd_analyze(cfg, analyze_target, out);
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << '\n';
    return 1;
  } catch (const ParseError& e) {
    err << "validation error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace dmtl::cli

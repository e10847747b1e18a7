#pragma once

// Multi-task sentence-labelled document corpora and their on-disk JSONL form.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "dmtl/common.hpp"
#include "dmtl/losses.hpp"

namespace dmtl {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum class Split { train, dev, test };
enum class TaskKind { multiclass, multilabel };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "?";
}

inline std::optional<Split> split_from_string(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  return std::nullopt;
}

inline std::string to_string(TaskKind k) { return k == TaskKind::multiclass ? "multiclass" : "multilabel"; }

// Sorted, duplicate-free label ids. Multiclass assignments hold exactly one id.
using LabelSet = std::vector<int>;

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::multiclass;
  std::vector<std::string> vocabulary;
  losses::LossConfig loss;
  double alpha_default = 1.0;

  std::size_t size() const { return vocabulary.size(); }

  std::optional<int> label_id(std::string_view label) const {
    for (std::size_t i = 0; i < vocabulary.size(); ++i)
      if (vocabulary[i] == label) return static_cast<int>(i);
    return std::nullopt;
  }

  void validate() const {
    if (name.empty()) throw ValidationError("task with empty name");
    if (vocabulary.size() < 2) throw ValidationError("task '" + name + "' needs at least 2 labels");
    std::set<std::string> seen;
    for (const auto& v : vocabulary)
      if (!seen.insert(v).second) throw ValidationError("task '" + name + "' has duplicate label '" + v + "'");
    if (!(alpha_default >= 0.0)) throw ValidationError("task '" + name + "' has negative alpha_default");
    loss.validate();
  }
};

struct Sentence {
  std::string text;
  std::size_t index = 0;
  std::map<std::string, LabelSet> labels;  // task name -> assignment; absent = not covered

  const LabelSet* find(const std::string& task) const {
    auto it = labels.find(task);
    return it == labels.end() ? nullptr : &it->second;
  }
};

struct Document {
  std::string doc_id;
  std::optional<std::string> headline;
  std::vector<Sentence> sentences;
  std::string source;
  Split split = Split::train;

  bool covers(const std::string& task) const {
    return std::any_of(sentences.begin(), sentences.end(), [&](const Sentence& s) { return s.find(task); });
  }
};

struct Corpus {
  std::vector<TaskSpec> tasks;
  std::vector<Document> documents;

  const TaskSpec* find_task(std::string_view name) const {
    for (const auto& t : tasks)
      if (t.name == name) return &t;
    return nullptr;
  }

  const TaskSpec& task(std::string_view name) const {
    if (const auto* t = find_task(name)) return *t;
    throw ValidationError("unknown task '" + std::string(name) + "'");
  }

  std::size_t sentence_count() const {
    std::size_t n = 0;
    for (const auto& d : documents) n += d.sentences.size();
    return n;
  }

  // Number of sentences carrying an assignment for `task` in `split`.
  std::size_t covered_sentences(const std::string& task, std::optional<Split> split = std::nullopt) const {
    std::size_t n = 0;
    for (const auto& d : documents) {
      if (split && d.split != *split) continue;
      for (const auto& s : d.sentences)
        if (s.find(task)) ++n;
    }
    return n;
  }

  void validate() const;
};

namespace detail {

inline std::string sentence_ref(const std::string& task, const Document& d, std::size_t j) {
  return "task '" + task + "', document '" + d.doc_id + "', sentence " + std::to_string(j);
}

}  // namespace detail

inline void Corpus::validate() const {
  std::set<std::string> names;
  for (const auto& t : tasks) {
    t.validate();
    if (!names.insert(t.name).second) throw ValidationError("duplicate task '" + t.name + "'");
  }
  std::unordered_set<std::string> ids;
  for (const auto& d : documents) {
    if (!ids.insert(d.doc_id).second) throw ValidationError("duplicate doc_id '" + d.doc_id + "'");
    if (d.sentences.empty()) throw ValidationError("document '" + d.doc_id + "' has no sentences");
    for (std::size_t j = 0; j < d.sentences.size(); ++j) {
      const auto& s = d.sentences[j];
      if (s.index != j) throw ValidationError("document '" + d.doc_id + "' has non-contiguous sentence indices");
      for (const auto& [task, ids_] : s.labels) {
        const TaskSpec* t = find_task(task);
        if (!t) throw ValidationError("undeclared task '" + task + "' in document '" + d.doc_id + "'");
        if (t->kind == TaskKind::multiclass && ids_.size() != 1)
          throw ValidationError("multiclass " + detail::sentence_ref(task, d, j) + " needs exactly one label");
        for (std::size_t i = 0; i < ids_.size(); ++i) {
          if (ids_[i] < 0 || static_cast<std::size_t>(ids_[i]) >= t->size())
            throw ValidationError("label id out of range for " + detail::sentence_ref(task, d, j));
          if (i > 0 && ids_[i] <= ids_[i - 1])
            throw ValidationError("label set not sorted/unique for " + detail::sentence_ref(task, d, j));
        }
      }
    }
  }
}

// ---- JSON conversions -------------------------------------------------------

inline json loss_to_json(const losses::LossConfig& c) {
  return json{{"kind", losses::to_string(c.kind)},
              {"gamma", c.gamma},
              {"class_weights", c.class_weights},
              {"reduction", c.reduction == losses::DiceReduction::generalized ? "generalized" : "macro"}};
}

inline losses::LossConfig loss_from_json(const json& j) {
  losses::LossConfig c;
  if (j.is_string()) {
    c.kind = losses::loss_kind_from_string(j.get<std::string>());
    return c;
  }
  c.kind = losses::loss_kind_from_string(j.value("kind", std::string("ce")));
  c.gamma = j.value("gamma", 1.0);
  if (j.contains("class_weights")) c.class_weights = j.at("class_weights").get<std::vector<double>>();
  const auto red = j.value("reduction", std::string("generalized"));
  if (red == "generalized")
    c.reduction = losses::DiceReduction::generalized;
  else if (red == "macro")
    c.reduction = losses::DiceReduction::macro;
  else
    throw ValidationError("unknown dice reduction '" + red + "'");
  c.validate();
  return c;
}

inline json task_to_json(const TaskSpec& t) {
  return json{{"name", t.name},
              {"kind", to_string(t.kind)},
              {"vocabulary", t.vocabulary},
              {"loss", loss_to_json(t.loss)},
              {"alpha_default", t.alpha_default}};
}

inline TaskSpec task_from_json(const json& j) {
  TaskSpec t;
  t.name = j.at("name").get<std::string>();
  const auto kind = j.value("kind", std::string("multiclass"));
  if (kind == "multiclass")
    t.kind = TaskKind::multiclass;
  else if (kind == "multilabel")
    t.kind = TaskKind::multilabel;
  else
    throw ValidationError("task '" + t.name + "': unknown kind '" + kind + "'");
  t.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  if (j.contains("loss"))
    t.loss = loss_from_json(j.at("loss"));
  else
    t.loss.kind = t.kind == TaskKind::multiclass ? losses::LossKind::ce : losses::LossKind::bce;
  t.alpha_default = j.value("alpha_default", 1.0);
  t.validate();
  return t;
}

inline std::vector<TaskSpec> tasks_from_json(const json& j) {
  std::vector<TaskSpec> out;
  for (const auto& t : j) out.push_back(task_from_json(t));
  return out;
}

inline json document_to_json(const Document& d, const std::vector<TaskSpec>& tasks) {
  json sentences = json::array();
  for (const auto& s : d.sentences) {
    json labels = json::object();
    for (const auto& [task, ids] : s.labels) {
      const TaskSpec* t = nullptr;
      for (const auto& cand : tasks)
        if (cand.name == task) t = &cand;
      if (!t) throw ValidationError("undeclared task '" + task + "'");
      if (t->kind == TaskKind::multiclass) {
        labels[task] = t->vocabulary.at(static_cast<std::size_t>(ids.at(0)));
      } else {
        json arr = json::array();
        for (int id : ids) arr.push_back(t->vocabulary.at(static_cast<std::size_t>(id)));
        labels[task] = std::move(arr);
      }
    }
    sentences.push_back(json{{"text", s.text}, {"labels", std::move(labels)}});
  }
  return json{{"doc_id", d.doc_id},
              {"headline", d.headline ? json(*d.headline) : json(nullptr)},
              {"source", d.source},
              {"split", to_string(d.split)},
              {"sentences", std::move(sentences)}};
}

// Parses one JSONL record. Errors carry the 1-based line number.
inline Document document_from_json(const json& j, const std::vector<TaskSpec>& tasks, std::size_t line) {
  auto fail = [line](const std::string& msg) { throw ParseError(line, msg); };
  if (!j.is_object()) fail("record is not a JSON object");
  Document d;
  try {
    d.doc_id = j.at("doc_id").get<std::string>();
    if (j.contains("headline") && !j.at("headline").is_null()) d.headline = j.at("headline").get<std::string>();
    d.source = j.value("source", std::string());
    const auto split = split_from_string(j.at("split").get<std::string>());
    if (!split) fail("invalid split '" + j.at("split").get<std::string>() + "'");
    d.split = *split;
    const auto& sents = j.at("sentences");
    if (!sents.is_array()) fail("'sentences' is not an array");
    for (std::size_t idx = 0; idx < sents.size(); ++idx) {
      const auto& sj = sents[idx];
      Sentence s;
      s.index = idx;
      s.text = sj.at("text").get<std::string>();
      if (sj.contains("labels")) {
        for (const auto& [task, value] : sj.at("labels").items()) {
          const TaskSpec* t = nullptr;
          for (const auto& cand : tasks)
            if (cand.name == task) t = &cand;
          const std::string where = detail::sentence_ref(task, d, idx);
          if (!t) throw ValidationError("undeclared " + where);
          std::vector<std::string> names;
          if (value.is_string())
            names.push_back(value.get<std::string>());
          else if (value.is_array())
            names = value.get<std::vector<std::string>>();
          else
            fail("label value for " + where + " must be a string or list");
          LabelSet ids;
          for (const auto& n : names) {
            auto id = t->label_id(n);
            if (!id) throw ValidationError("unknown label '" + n + "' for " + where);
            ids.push_back(*id);
          }
          std::sort(ids.begin(), ids.end());
          ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
          if (t->kind == TaskKind::multiclass && ids.size() != 1)
            throw ValidationError("multiclass " + where + " needs exactly one label");
          s.labels[task] = std::move(ids);
        }
      }
      d.sentences.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    fail(e.what());
  }
  return d;
}

// ---- load / save ------------------------------------------------------------

inline Corpus parse_corpus(std::istream& in, std::vector<TaskSpec> tasks) {
  Corpus c;
  c.tasks = std::move(tasks);
  for (const auto& t : c.tasks) t.validate();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(lineno, e.what());
    }
    c.documents.push_back(document_from_json(j, c.tasks, lineno));
  }
  c.validate();
  return c;
}

inline std::vector<TaskSpec> load_tasks(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open task file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(1, path.string() + ": " + e.what());
  }
  return tasks_from_json(j);
}

inline Corpus load_corpus(const fs::path& jsonl, std::vector<TaskSpec> tasks) {
  std::ifstream in(jsonl);
  if (!in) throw ValidationError("cannot open corpus file " + jsonl.string());
  return parse_corpus(in, std::move(tasks));
}

// A corpus on disk is a directory holding tasks.json and documents.jsonl. A path
// to a .jsonl file is also accepted; its tasks.json is looked up alongside it.
inline Corpus load_corpus(const fs::path& path) {
  if (fs::is_directory(path)) return load_corpus(path / "documents.jsonl", load_tasks(path / "tasks.json"));
  return load_corpus(path, load_tasks(path.parent_path() / "tasks.json"));
}

inline void write_documents(std::ostream& out, const Corpus& c) {
  for (const auto& d : c.documents) out << document_to_json(d, c.tasks).dump() << '\n';
}

inline void save_corpus(const Corpus& c, const fs::path& dir) {
  c.validate();
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "tasks.json", std::ios::binary);
    json arr = json::array();
    for (const auto& t : c.tasks) arr.push_back(task_to_json(t));
    out << arr.dump(2) << '\n';
  }
  std::ofstream out(dir / "documents.jsonl", std::ios::binary);
  write_documents(out, c);
}

// ---- statistics -------------------------------------------------------------

struct LabelCount {
  std::string label;
  std::size_t count = 0;
  bool operator==(const LabelCount&) const = default;
};

struct ClassCounts {
  std::vector<LabelCount> counts;  // descending by count, ties in vocabulary order
  bool empty_split = false;        // no document of the split covers the task
};

inline ClassCounts class_counts(const Corpus& c, const std::string& task, Split split) {
  const TaskSpec& t = c.task(task);
  std::vector<std::size_t> n(t.size(), 0);
  bool any = false;
  for (const auto& d : c.documents) {
    if (d.split != split) continue;
    for (const auto& s : d.sentences) {
      if (const auto* ids = s.find(task)) {
        any = true;
        for (int id : *ids) ++n[static_cast<std::size_t>(id)];
      }
    }
  }
  ClassCounts out;
  if (!any) {
    out.empty_split = true;
    return out;
  }
  std::vector<std::size_t> order(t.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return n[a] > n[b]; });
  for (auto i : order) out.counts.push_back({t.vocabulary[i], n[i]});
  return out;
}

// Mean of the top floor(k/2) counts over (sum of the remaining counts) / (floor(k/2) + 1).
// For even k the bottom group holds floor(k/2) classes yet is still divided by floor(k/2) + 1.
inline double imbalance_ratio(std::span<const double> counts) {
  const std::size_t k = counts.size();
  if (k < 2) throw ValidationError("imbalance_ratio needs at least 2 classes");
  for (std::size_t i = 1; i < k; ++i)
    if (counts[i] > counts[i - 1]) throw ValidationError("imbalance_ratio expects counts sorted descending");
  const std::size_t half = k / 2;
  double top = 0.0, bottom = 0.0;
  for (std::size_t i = 0; i < half; ++i) top += counts[i];
  for (std::size_t i = half; i < k; ++i) bottom += counts[i];
  if (bottom == 0.0) throw ValidationError("imbalance_ratio: bottom classes have zero total count");
  return (top / static_cast<double>(half)) / (bottom / static_cast<double>(half + 1));
}

inline double imbalance_ratio(const ClassCounts& counts) {
  if (counts.empty_split) throw ValidationError("imbalance_ratio: empty split");
  std::vector<double> v;
  for (const auto& c : counts.counts) v.push_back(static_cast<double>(c.count));
  return imbalance_ratio(v);
}

}  // namespace dmtl

#pragma once

// Projection of relation / event annotations onto sentence-level label sets, tag
// mapping and filtering, and length-matched downsampling of auxiliary corpora.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmtl/common.hpp"
#include "dmtl/corpus.hpp"

namespace dmtl::adapters {

// Inclusive range of sentence indices.
struct SentenceSpan {
  std::size_t first = 0;
  std::size_t last = 0;
};

struct RelationRecord {
  std::string doc_id;
  std::string label;
  SentenceSpan span_a;
  SentenceSpan span_b;
};

struct EventNugget {
  std::string doc_id;
  std::size_t sentence = 0;
  std::size_t begin = 0;  // byte offsets of the trigger inside the sentence text
  std::size_t end = 0;
  std::string event_type;
};

using SentenceLabels = std::vector<std::set<std::string>>;

inline const std::vector<std::string>& pdtb_temporal_whitelist() {
  static const std::vector<std::string> tags{"Temporal", "Asynchronous", "Precedence", "Synchrony", "Succession"};
  return tags;
}

inline const std::vector<std::string>& event_types() {
  static const std::vector<std::string> tags{"Actual Event", "Generic Event", "Event Mention", "Other"};
  return tags;
}

// ---- relation projection ------------------------------------------------------

// Sentence s receives label r iff some relation labelled r touches s. Relations
// spanning several sentences label every sentence they cover.
inline SentenceLabels project_relations_to_sentences(const Document& doc, const std::vector<RelationRecord>& relations) {
  SentenceLabels out(doc.sentences.size());
  const std::size_t n = doc.sentences.size();
  for (const auto& r : relations) {
    if (r.doc_id != doc.doc_id)
      throw ValidationError("relation '" + r.label + "' belongs to document '" + r.doc_id + "', not '" + doc.doc_id + "'");
    if (r.label.empty()) throw ValidationError("relation with empty label in document '" + doc.doc_id + "'");
    for (const auto& span : {r.span_a, r.span_b}) {
      if (span.first > span.last || span.last >= n)
        throw ValidationError("relation '" + r.label + "' in document '" + doc.doc_id + "' spans sentences " +
                              std::to_string(span.first) + ".." + std::to_string(span.last) +
                              " outside a document of " + std::to_string(n) + " sentences");
      for (std::size_t s = span.first; s <= span.last; ++s) out[s].insert(r.label);
    }
  }
  return out;
}

inline SentenceLabels project_event_nuggets(const Document& doc, const std::vector<EventNugget>& nuggets) {
  SentenceLabels out(doc.sentences.size());
  const auto& types = event_types();
  for (const auto& g : nuggets) {
    if (g.doc_id != doc.doc_id)
      throw ValidationError("event nugget belongs to document '" + g.doc_id + "', not '" + doc.doc_id + "'");
    if (std::find(types.begin(), types.end(), g.event_type) == types.end())
      throw ValidationError("unknown event type '" + g.event_type + "' in document '" + doc.doc_id + "'");
    if (g.sentence >= doc.sentences.size() || g.begin >= g.end || g.end > doc.sentences[g.sentence].text.size())
      throw ValidationError("event trigger outside document '" + doc.doc_id + "' (sentence " +
                            std::to_string(g.sentence) + ", bytes " + std::to_string(g.begin) + ".." +
                            std::to_string(g.end) + ")");
    out[g.sentence].insert(g.event_type);
  }
  return out;
}

// ---- tag maps -----------------------------------------------------------------

struct TagMap {
  std::map<std::string, std::string> mapping;  // source tag -> target class
  std::set<std::string> drop;

  bool is_target(const std::string& tag) const {
    for (const auto& [src, dst] : mapping)
      if (dst == tag) return true;
    return false;
  }

  std::vector<std::string> targets() const {
    std::set<std::string> t;
    for (const auto& [src, dst] : mapping) t.insert(dst);
    return {t.begin(), t.end()};
  }
};

// Two-column TSV: source-tag <TAB> target-class. A source with an empty or "-"
// target goes on the drop-list. '#' starts a comment line.
inline TagMap parse_tag_map(std::istream& in) {
  TagMap m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    const std::string src = line.substr(0, tab);
    const std::string dst = tab == std::string::npos ? std::string() : line.substr(tab + 1);
    if (src.empty()) throw ParseError(lineno, "tag map row with empty source tag");
    if (dst.find('\t') != std::string::npos) throw ParseError(lineno, "tag map row has more than two columns");
    if (m.mapping.count(src) || m.drop.count(src)) throw ParseError(lineno, "duplicate source tag '" + src + "'");
    if (dst.empty() || dst == "-")
      m.drop.insert(src);
    else
      m.mapping[src] = dst;
  }
  return m;
}

inline TagMap load_tag_map(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open tag map " + path.string());
  return parse_tag_map(in);
}

// Target classes map to themselves, which keeps map_tags idempotent.
inline SentenceLabels map_tags(const SentenceLabels& labels, const TagMap& map) {
  SentenceLabels out(labels.size());
  std::set<std::string> unknown;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    for (const auto& tag : labels[s]) {
      if (auto it = map.mapping.find(tag); it != map.mapping.end())
        out[s].insert(it->second);
      else if (map.is_target(tag))
        out[s].insert(tag);
      else if (!map.drop.count(tag))
        unknown.insert(tag);
    }
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& t : unknown) list += (list.empty() ? "" : ", ") + t;
    throw ValidationError("tags neither mapped nor dropped: " + list);
  }
  return out;
}

// ---- filters ------------------------------------------------------------------

// Keeps only tags of `task` that occur in more than `min_sentences` training
// sentences; ids are re-interned in the original vocabulary order. The result is
// not validated: an emptied vocabulary surfaces when the corpus is next validated.
inline Corpus filter_rare_tags(const Corpus& corpus, const std::string& task, std::size_t min_sentences) {
  const TaskSpec& spec = corpus.task(task);
  std::vector<std::size_t> n(spec.size(), 0);
  for (const auto& d : corpus.documents) {
    if (d.split != Split::train) continue;
    for (const auto& s : d.sentences)
      if (const auto* ids = s.find(task))
        for (int id : *ids) ++n[static_cast<std::size_t>(id)];
  }
  std::vector<int> remap(spec.size(), -1);
  std::vector<std::string> vocab;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    if (n[i] > min_sentences) {
      remap[i] = static_cast<int>(vocab.size());
      vocab.push_back(spec.vocabulary[i]);
    }
  }
  Corpus out = corpus;
  for (auto& t : out.tasks)
    if (t.name == task) t.vocabulary = vocab;
  for (auto& d : out.documents) {
    for (auto& s : d.sentences) {
      auto it = s.labels.find(task);
      if (it == s.labels.end()) continue;
      LabelSet kept;
      for (int id : it->second)
        if (remap[static_cast<std::size_t>(id)] >= 0) kept.push_back(remap[static_cast<std::size_t>(id)]);
      if (spec.kind == TaskKind::multiclass && kept.empty())
        s.labels.erase(it);
      else
        it->second = std::move(kept);
    }
  }
  return out;
}

// Splits a hierarchical sense such as "Temporal.Asynchronous.Precedence" and keeps
// every whitelisted level of the path as its own relation label.
inline std::pair<std::vector<RelationRecord>, std::vector<Document>> filter_pdtb_temporal(
    const std::vector<RelationRecord>& relations, const std::vector<Document>& docs) {
  const auto& white = pdtb_temporal_whitelist();
  std::vector<RelationRecord> kept;
  std::set<std::string> docs_with_relations;
  for (const auto& r : relations) {
    std::set<std::string> seen;
    std::stringstream ss(r.label);
    std::string part;
    while (std::getline(ss, part, '.')) {
      if (std::find(white.begin(), white.end(), part) == white.end() || !seen.insert(part).second) continue;
      RelationRecord copy = r;
      copy.label = part;
      kept.push_back(std::move(copy));
      docs_with_relations.insert(r.doc_id);
    }
  }
  std::vector<Document> kept_docs;
  for (const auto& d : docs)
    if (docs_with_relations.count(d.doc_id)) kept_docs.push_back(d);
  std::erase_if(kept, [&](const RelationRecord& r) {
    return std::none_of(kept_docs.begin(), kept_docs.end(), [&](const Document& d) { return d.doc_id == r.doc_id; });
  });
  return {std::move(kept), std::move(kept_docs)};
}

// Writes per-sentence label sets into `doc` as a multilabel assignment of `task`.
// Every sentence becomes covered; sentences without tags get the empty set.
inline void assign_labels(Document& doc, const TaskSpec& task, const SentenceLabels& labels) {
  if (labels.size() != doc.sentences.size())
    throw ValidationError("label projection size mismatch for document '" + doc.doc_id + "'");
  for (std::size_t s = 0; s < labels.size(); ++s) {
    LabelSet ids;
    for (const auto& tag : labels[s]) {
      auto id = task.label_id(tag);
      if (!id) throw ValidationError("unknown label '" + tag + "' for task '" + task.name + "'");
      ids.push_back(*id);
    }
    std::sort(ids.begin(), ids.end());
    doc.sentences[s].labels[task.name] = std::move(ids);
  }
}

// ---- length-matched downsampling ----------------------------------------------

// Decile bins over document lengths (in sentences) of a reference corpus.
struct LengthBins {
  std::size_t min_length = 0;
  std::vector<std::size_t> upper;  // inclusive upper edge per bin, strictly increasing

  // -1 for lengths outside the reference support.
  int bin_of(std::size_t len) const {
    if (upper.empty() || len < min_length || len > upper.back()) return -1;
    return static_cast<int>(std::lower_bound(upper.begin(), upper.end(), len) - upper.begin());
  }
};

inline LengthBins decile_bins(const std::vector<Document>& reference) {
  std::vector<std::size_t> lens;
  for (const auto& d : reference) lens.push_back(d.sentences.size());
  LengthBins b;
  if (lens.empty()) return b;
  std::sort(lens.begin(), lens.end());
  b.min_length = lens.front();
  const std::size_t n = lens.size();
  for (std::size_t i = 1; i <= 10; ++i) {
    const std::size_t rank = (i * n + 9) / 10;  // nearest-rank quantile
    const std::size_t edge = lens[std::min(n, std::max<std::size_t>(rank, 1)) - 1];
    if (b.upper.empty() || edge > b.upper.back()) b.upper.push_back(edge);
  }
  return b;
}

inline std::vector<double> bin_proportions(const LengthBins& bins, const std::vector<Document>& docs) {
  std::vector<double> p(bins.upper.size(), 0.0);
  std::size_t total = 0;
  for (const auto& d : docs) {
    const int b = bins.bin_of(d.sentences.size());
    if (b >= 0) {
      p[static_cast<std::size_t>(b)] += 1.0;
      ++total;
    }
  }
  if (total > 0)
    for (auto& x : p) x /= static_cast<double>(total);
  return p;
}

struct DownsampleResult {
  Corpus corpus;
  std::vector<std::string> warnings;
};

// Selects the largest subset of `aux` whose per-bin proportions follow the
// target's decile histogram; bins are sampled uniformly without replacement.
inline DownsampleResult downsample_to_length_distribution(const Corpus& aux, const Corpus& target, std::uint64_t seed,
                                                          std::size_t max_documents = 0) {
  if (aux.documents.empty() || target.documents.empty())
    throw ValidationError("downsample_to_length_distribution: both corpora must be non-empty");
  DownsampleResult res;
  res.corpus.tasks = aux.tasks;
  auto note = [&](std::string msg) {
    warn(msg);
    res.warnings.push_back(std::move(msg));
  };

  const LengthBins bins = decile_bins(target.documents);
  const std::vector<double> want = bin_proportions(bins, target.documents);
  std::vector<std::vector<std::size_t>> members(want.size());
  for (std::size_t i = 0; i < aux.documents.size(); ++i) {
    const int b = bins.bin_of(aux.documents[i].sentences.size());
    if (b >= 0) members[static_cast<std::size_t>(b)].push_back(i);
  }

  double capacity = std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t b = 0; b < want.size(); ++b) {
    if (want[b] <= 0.0) continue;
    if (members[b].empty()) {
      note("auxiliary corpus has no documents for length bin " + std::to_string(b) + "; bin left unfilled");
      continue;
    }
    any = true;
    capacity = std::min(capacity, static_cast<double>(members[b].size()) / want[b]);
  }
  if (!any) {
    note("auxiliary and target document-length supports do not intersect; nothing retained");
    return res;
  }
  if (max_documents > 0) capacity = std::min(capacity, static_cast<double>(max_documents));

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  for (std::size_t b = 0; b < want.size(); ++b) {
    if (want[b] <= 0.0 || members[b].empty()) continue;
    const auto take = std::min(members[b].size(), static_cast<std::size_t>(std::llround(capacity * want[b])));
    auto pool = members[b];
    std::shuffle(pool.begin(), pool.end(), rng);
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(chosen.begin(), chosen.end());
  for (auto i : chosen) res.corpus.documents.push_back(aux.documents[i]);
  return res;
}

// ---- JSONL readers for relation / nugget inputs --------------------------------

inline std::vector<RelationRecord> parse_relations(std::istream& in) {
  std::vector<RelationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  auto span = [](const json& j) {
    const auto v = j.get<std::vector<std::size_t>>();
    if (v.size() != 2) throw std::invalid_argument("span must be [first, last]");
    return SentenceSpan{v[0], v[1]};
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("doc_id").get<std::string>(), j.at("label").get<std::string>(), span(j.at("span_a")),
                     span(j.at("span_b"))});
    } catch (const std::exception& e) {
      throw ParseError(lineno, std::string("relation record: ") + e.what());
    }
  }
  return out;
}

inline std::vector<EventNugget> parse_event_nuggets(std::istream& in) {
  std::vector<EventNugget> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("doc_id").get<std::string>(), j.at("sentence").get<std::size_t>(),
                     j.at("begin").get<std::size_t>(), j.at("end").get<std::size_t>(),
                     j.at("event_type").get<std::string>()});
    } catch (const std::exception& e) {
      throw ParseError(lineno, std::string("event nugget record: ") + e.what());
    }
  }
  return out;
}

template <typename Record>
std::map<std::string, std::vector<Record>> group_by_document(const std::vector<Record>& records) {
  std::map<std::string, std::vector<Record>> out;
  for (const auto& r : records) out[r.doc_id].push_back(r);
  return out;
}

}  // namespace dmtl::adapters

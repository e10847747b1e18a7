#pragma once

// Per-class precision/recall/F1, macro and micro F1, confusion matrices.

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

#include "dmtl/common.hpp"

namespace dmtl::eval {

using json = nlohmann::json;

struct ClassScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
  std::size_t predicted = 0;
  std::size_t true_positive = 0;
};

struct MetricReport {
  std::vector<ClassScore> classes;
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
  std::size_t count = 0;
  // rows = gold, columns = predicted; empty for multilabel reports
  std::vector<std::vector<std::size_t>> confusion;
};

namespace detail {
inline double safe_div(double a, double b) { return b == 0.0 ? 0.0 : a / b; }
// p == r short-circuits so single-label micro F1 is bit-identical to accuracy.
inline double f1_of(double p, double r) {
  if (p == r) return p;
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

inline void finish(MetricReport& r, std::size_t tp, std::size_t fp, std::size_t fn) {
  double macro = 0.0;
  for (auto& c : r.classes) {
    c.precision = safe_div(static_cast<double>(c.true_positive), static_cast<double>(c.predicted));
    c.recall = safe_div(static_cast<double>(c.true_positive), static_cast<double>(c.support));
    c.f1 = f1_of(c.precision, c.recall);
    macro += c.f1;
  }
  r.macro_f1 = r.classes.empty() ? 0.0 : macro / static_cast<double>(r.classes.size());
  const double p = safe_div(static_cast<double>(tp), static_cast<double>(tp + fp));
  const double rc = safe_div(static_cast<double>(tp), static_cast<double>(tp + fn));
  r.micro_f1 = f1_of(p, rc);
}
}  // namespace detail

// Zero-support classes keep F1 = 0 and still count toward the macro average.
inline MetricReport metric_report(const std::vector<int>& gold, const std::vector<int>& pred, std::size_t k) {
  if (gold.size() != pred.size())
    throw ValidationError("metric_report: " + std::to_string(gold.size()) + " gold labels vs " +
                          std::to_string(pred.size()) + " predictions");
  MetricReport r;
  r.classes.resize(k);
  r.count = gold.size();
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::size_t tp = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const int g = gold[i], p = pred[i];
    if (g < 0 || p < 0 || static_cast<std::size_t>(g) >= k || static_cast<std::size_t>(p) >= k)
      throw ValidationError("metric_report: label out of range at position " + std::to_string(i));
    ++r.confusion[static_cast<std::size_t>(g)][static_cast<std::size_t>(p)];
    ++r.classes[static_cast<std::size_t>(g)].support;
    ++r.classes[static_cast<std::size_t>(p)].predicted;
    if (g == p) {
      ++r.classes[static_cast<std::size_t>(g)].true_positive;
      ++tp;
    }
  }
  const std::size_t n = gold.size();
  detail::finish(r, tp, n - tp, n - tp);
  return r;
}

inline MetricReport multilabel_report(const std::vector<std::vector<int>>& gold, const std::vector<std::vector<int>>& pred,
                                      std::size_t k) {
  if (gold.size() != pred.size()) throw ValidationError("multilabel_report: length mismatch");
  MetricReport r;
  r.classes.resize(k);
  r.count = gold.size();
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    std::vector<char> g(k, 0), p(k, 0);
    for (int l : gold[i]) {
      if (l < 0 || static_cast<std::size_t>(l) >= k) throw ValidationError("multilabel_report: label out of range");
      g[static_cast<std::size_t>(l)] = 1;
    }
    for (int l : pred[i]) {
      if (l < 0 || static_cast<std::size_t>(l) >= k) throw ValidationError("multilabel_report: label out of range");
      p[static_cast<std::size_t>(l)] = 1;
    }
    for (std::size_t c = 0; c < k; ++c) {
      r.classes[c].support += g[c];
      r.classes[c].predicted += p[c];
      if (g[c] && p[c]) {
        ++r.classes[c].true_positive;
        ++tp;
      } else if (p[c]) {
        ++fp;
      } else if (g[c]) {
        ++fn;
      }
    }
  }
  detail::finish(r, tp, fp, fn);
  return r;
}

// Mean F1 over a chosen subset of classes (e.g. the rarest ones).
inline double mean_f1(const MetricReport& r, const std::vector<int>& classes) {
  if (classes.empty()) return 0.0;
  double s = 0.0;
  for (int c : classes) s += r.classes.at(static_cast<std::size_t>(c)).f1;
  return s / static_cast<double>(classes.size());
}

inline json to_json(const MetricReport& r, const std::vector<std::string>& vocabulary) {
  json per = json::array();
  for (std::size_t c = 0; c < r.classes.size(); ++c) {
    const auto& s = r.classes[c];
    per.push_back({{"label", c < vocabulary.size() ? vocabulary[c] : std::to_string(c)},
                   {"precision", s.precision},
                   {"recall", s.recall},
                   {"f1", s.f1},
                   {"support", s.support},
                   {"predicted", s.predicted}});
  }
  json j = {{"count", r.count}, {"macro_f1", r.macro_f1}, {"micro_f1", r.micro_f1}, {"per_class", per}};
  if (!r.confusion.empty()) j["confusion"] = r.confusion;
  return j;
}

}  // namespace dmtl::eval

#pragma once

// Analysis battery: rank correlation, cross-head tables, alpha regression,
// prediction-distribution KL, Cohen's kappa, and the alpha grid search.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dmtl/metrics.hpp"
#include "dmtl/trainer.hpp"

namespace dmtl::eval {

// ---- rank correlation ------------------------------------------------------------

// 1-based ranks; tied values share the mean of their positions.
inline std::vector<double> midranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = mid;
    i = j + 1;
  }
  return r;
}

inline std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ValidationError("correlation: length mismatch");
  const auto n = static_cast<double>(a.size());
  if (a.size() < 2) return std::nullopt;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

// Spearman rho; missing when either input is constant.
inline std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ValidationError("spearman: length mismatch");
  return pearson(midranks(a), midranks(b));
}

struct CorrelationTable {
  std::string head_a, head_b;
  std::vector<std::string> tags_a, tags_b;
  std::vector<std::vector<std::optional<double>>> rho;  // [tag_a][tag_b]
};

// Per-sentence score of `tag` from one head: predicted indicator, or the
// predicted probability when `probabilistic`.
inline double head_signal(const HeadOutput& h, int tag, bool probabilistic) {
  if (probabilistic) return h.probs.at(static_cast<std::size_t>(tag));
  return std::find(h.pred.begin(), h.pred.end(), tag) != h.pred.end() ? 1.0 : 0.0;
}

inline CorrelationTable cross_head_correlation(const std::vector<PredictionRow>& rows, const TaskSpec& a,
                                               const TaskSpec& b, bool probabilistic = false) {
  CorrelationTable t{a.name, b.name, a.vocabulary, b.vocabulary, {}};
  std::vector<const HeadOutput*> ha, hb;
  for (const auto& r : rows) {
    auto ia = r.heads.find(a.name), ib = r.heads.find(b.name);
    if (ia == r.heads.end() || ib == r.heads.end())
      throw ValidationError("cross_head_correlation: sentence " + r.doc_id + "/" + std::to_string(r.sentence) +
                            " lacks a prediction from both heads");
    ha.push_back(&ia->second);
    hb.push_back(&ib->second);
  }
  t.rho.assign(a.size(), std::vector<std::optional<double>>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::vector<double> va;
    for (const auto* h : ha) va.push_back(head_signal(*h, static_cast<int>(i), probabilistic));
    for (std::size_t j = 0; j < b.size(); ++j) {
      std::vector<double> vb;
      for (const auto* h : hb) vb.push_back(head_signal(*h, static_cast<int>(j), probabilistic));
      t.rho[i][j] = spearman(va, vb);
    }
  }
  return t;
}

// ---- regression ------------------------------------------------------------------

struct AlphaTrial {
  TaskWeighting alpha;
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
  bool failed = false;
  std::string error;
  std::vector<double> class_f1;  // primary task, vocabulary order
  std::string run_dir;
};

enum class Target { macro, micro };

struct Regression {
  std::vector<std::string> tasks;
  std::vector<double> beta;
  double intercept = 0.0;
  std::vector<double> residuals;
  bool min_norm = false;
};

// OLS with intercept. With `min_norm`, rank-deficient designs (for instance
// alpha vectors constrained to the simplex) get the minimum-norm slope on
// centered data instead of an error.
inline Regression regress_alpha_to_f1(const std::vector<AlphaTrial>& all, Target target, bool min_norm = false) {
  std::vector<const AlphaTrial*> trials;
  for (const auto& t : all)
    if (!t.failed) trials.push_back(&t);
  if (trials.empty()) throw ValidationError("regression: no successful trials");
  Regression r;
  r.min_norm = min_norm;
  for (const auto& [task, a] : trials[0]->alpha.alpha) r.tasks.push_back(task);
  for (const auto* t : trials)
    for (const auto& [task, a] : t->alpha.alpha)
      if (std::find(r.tasks.begin(), r.tasks.end(), task) == r.tasks.end()) r.tasks.push_back(task);
  std::sort(r.tasks.begin(), r.tasks.end());
  const auto n = static_cast<Eigen::Index>(trials.size());
  const auto m = static_cast<Eigen::Index>(r.tasks.size());
  if (!min_norm && n < m + 1)
    throw ValidationError("regression needs at least " + std::to_string(m + 1) + " trials, got " + std::to_string(n));
  Eigen::MatrixXd A(n, m);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) A(i, j) = trials[static_cast<std::size_t>(i)]->alpha.of(r.tasks[static_cast<std::size_t>(j)]);
    y(i) = target == Target::macro ? trials[static_cast<std::size_t>(i)]->macro_f1 : trials[static_cast<std::size_t>(i)]->micro_f1;
  }
  Eigen::VectorXd beta;
  if (min_norm) {
    const Eigen::RowVectorXd mean = A.colwise().mean();
    const double ybar = y.mean();
    const Eigen::MatrixXd Ac = A.rowwise() - mean;
    const Eigen::VectorXd yc = y.array() - ybar;
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(Ac);
    beta = cod.solve(yc);
    r.intercept = ybar - mean.dot(beta);
  } else {
    Eigen::MatrixXd X(n, m + 1);
    X.col(0).setOnes();
    X.rightCols(m) = A;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeFullV);
    const auto& s = svd.singularValues();
    const double tol = std::max(1e-10, s(0) * 1e-10 * static_cast<double>(std::max(n, m + 1)));
    std::vector<std::string> collinear;
    for (Eigen::Index k = 0; k < m + 1; ++k) {
      if (k < s.size() && s(k) > tol) continue;
      const Eigen::VectorXd v = svd.matrixV().col(k);
      for (Eigen::Index j = 0; j < m + 1; ++j)
        if (std::abs(v(j)) > 1e-8) {
          const std::string name = j == 0 ? "intercept" : r.tasks[static_cast<std::size_t>(j - 1)];
          if (std::find(collinear.begin(), collinear.end(), name) == collinear.end()) collinear.push_back(name);
        }
    }
    if (!collinear.empty()) {
      std::string names;
      for (const auto& c : collinear) names += (names.empty() ? "" : ", ") + c;
      throw ValidationError("regression design is rank deficient; collinear terms: " + names);
    }
    const Eigen::VectorXd coef = X.colPivHouseholderQr().solve(y);
    r.intercept = coef(0);
    beta = coef.tail(m);
  }
  r.beta.assign(beta.data(), beta.data() + beta.size());
  const Eigen::VectorXd res = y - (A * beta).array().matrix() - Eigen::VectorXd::Constant(n, r.intercept);
  r.residuals.assign(res.data(), res.data() + res.size());
  return r;
}

// ---- distributions -------------------------------------------------------------

struct KlResult {
  double value = 0.0;
  bool smoothed = false;
};

inline constexpr double kKlEpsilon = 1e-9;

// KL(p || q) in nats over normalized counts. Where q is zero but p is not, q is
// smoothed by kKlEpsilon and renormalized; the result is flagged.
inline KlResult prediction_distribution_kl(const std::vector<double>& p_counts, const std::vector<double>& q_counts) {
  if (p_counts.size() != q_counts.size() || p_counts.empty()) throw ValidationError("KL: distributions differ in size");
  const double sp = std::accumulate(p_counts.begin(), p_counts.end(), 0.0);
  double sq = std::accumulate(q_counts.begin(), q_counts.end(), 0.0);
  if (!(sp > 0.0) || !(sq > 0.0)) throw ValidationError("KL: empty distribution");
  std::vector<double> q = q_counts;
  KlResult r;
  for (std::size_t i = 0; i < q.size(); ++i)
    if (q[i] == 0.0 && p_counts[i] > 0.0) r.smoothed = true;
  if (r.smoothed) {
    for (auto& v : q) v = v / sq + kKlEpsilon;
    sq = std::accumulate(q.begin(), q.end(), 0.0);
  }
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double pi = p_counts[i] / sp;
    if (pi == 0.0) continue;
    r.value += pi * std::log(pi / (q[i] / sq));
  }
  return r;
}

// Missing when chance agreement is 1.
inline std::optional<double> cohens_kappa(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw ValidationError("cohens_kappa: length mismatch");
  if (a.empty()) throw ValidationError("cohens_kappa: empty input");
  std::map<int, double> ma, mb;
  double agree = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma[a[i]] += 1.0;
    mb[b[i]] += 1.0;
    if (a[i] == b[i]) agree += 1.0;
  }
  const double n = static_cast<double>(a.size());
  double pe = 0.0;
  for (const auto& [label, c] : ma) {
    auto it = mb.find(label);
    if (it != mb.end()) pe += (c / n) * (it->second / n);
  }
  if (pe >= 1.0) return std::nullopt;
  return (agree / n - pe) / (1.0 - pe);
}

// Per-class predicted and gold counts of a multiclass head over covered sentences.
struct ClassDistribution {
  std::vector<double> predicted, gold;
};

inline ClassDistribution class_distribution(const std::vector<PredictionRow>& rows, const TaskSpec& task) {
  ClassDistribution d{std::vector<double>(task.size(), 0.0), std::vector<double>(task.size(), 0.0)};
  for (const auto& r : rows) {
    auto it = r.heads.find(task.name);
    if (it == r.heads.end() || !it->second.gold) continue;
    for (int l : it->second.pred) d.predicted[static_cast<std::size_t>(l)] += 1.0;
    for (int l : *it->second.gold) d.gold[static_cast<std::size_t>(l)] += 1.0;
  }
  return d;
}

// ---- grid search ---------------------------------------------------------------

// Every alpha on the simplex over `tasks` with the given resolution (steps per
// unit), in lexicographic order of the step counts.
inline std::vector<TaskWeighting> simplex_grid(const std::vector<std::string>& tasks, std::size_t resolution = 10,
                                               double c = 1.0) {
  if (tasks.empty() || resolution == 0) throw ValidationError("simplex_grid: need tasks and a positive resolution");
  std::vector<TaskWeighting> out;
  std::vector<std::size_t> k(tasks.size(), 0);
  auto rec = [&](auto&& self, std::size_t i, std::size_t left) -> void {
    if (i + 1 == tasks.size()) {
      k[i] = left;
      TaskWeighting w;
      w.c = c;
      for (std::size_t t = 0; t < tasks.size(); ++t)
        w.alpha[tasks[t]] = c * static_cast<double>(k[t]) / static_cast<double>(resolution);
      out.push_back(std::move(w));
      return;
    }
    for (std::size_t v = 0; v <= left; ++v) {
      k[i] = v;
      self(self, i + 1, left - v);
    }
  };
  rec(rec, 0, resolution);
  return out;
}

inline bool alpha_less(const TaskWeighting& a, const TaskWeighting& b) {
  return std::lexicographical_compare(a.alpha.begin(), a.alpha.end(), b.alpha.begin(), b.alpha.end());
}

struct GridResult {
  std::vector<AlphaTrial> trials;
  std::optional<std::size_t> best_macro, best_micro;
  std::vector<std::optional<std::size_t>> best_by_tag;  // primary vocabulary order
  std::vector<std::string> tags;
};

// Index of the best successful trial; ties go to the lexicographically smallest alpha.
template <class Score>
std::optional<std::size_t> argmax_trial(const std::vector<AlphaTrial>& trials, Score score) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    if (trials[i].failed) continue;
    if (!best) {
      best = i;
      continue;
    }
    const double s = score(trials[i]), bs = score(trials[*best]);
    if (s > bs || (s == bs && alpha_less(trials[i].alpha, trials[*best].alpha))) best = i;
  }
  return best;
}

inline void finish_grid(GridResult& g, const TaskSpec& primary) {
  g.tags = primary.vocabulary;
  g.best_macro = argmax_trial(g.trials, [](const AlphaTrial& t) { return t.macro_f1; });
  g.best_micro = argmax_trial(g.trials, [](const AlphaTrial& t) { return t.micro_f1; });
  g.best_by_tag.clear();
  for (std::size_t c = 0; c < primary.size(); ++c)
    g.best_by_tag.push_back(argmax_trial(g.trials, [c](const AlphaTrial& t) { return t.class_f1.at(c); }));
}

inline AlphaTrial trial_from_run(const RunRecord& r) {
  AlphaTrial t;
  t.alpha = r.weighting;
  const auto& m = r.metrics.at(r.primary);
  t.macro_f1 = m.at("macro_f1").get<double>();
  t.micro_f1 = m.at("micro_f1").get<double>();
  for (const auto& c : m.at("per_class")) t.class_f1.push_back(c.at("f1").get<double>());
  return t;
}

inline json to_json(const AlphaTrial& t) {
  json j = {{"alpha", t.alpha.alpha}, {"macro_f1", t.macro_f1}, {"micro_f1", t.micro_f1}, {"failed", t.failed},
            {"class_f1", t.class_f1}, {"run_dir", t.run_dir}};
  if (t.failed) j["error"] = t.error;
  return j;
}

inline AlphaTrial trial_from_json(const json& j) {
  AlphaTrial t;
  t.alpha.alpha = j.at("alpha").get<std::map<std::string, double>>();
  t.alpha.c = 0.0;
  for (const auto& [k, a] : t.alpha.alpha) t.alpha.c += a;
  t.macro_f1 = j.at("macro_f1").get<double>();
  t.micro_f1 = j.at("micro_f1").get<double>();
  t.failed = j.at("failed").get<bool>();
  t.class_f1 = j.at("class_f1").get<std::vector<double>>();
  t.run_dir = j.value("run_dir", "");
  t.error = j.value("error", "");
  return t;
}

inline std::string trial_name(std::size_t i) {
  std::ostringstream s;
  s << "trial_" << std::setw(3) << std::setfill('0') << i;
  return s.str();
}

inline json to_json(const GridResult& g) {
  json trials = json::array();
  for (const auto& t : g.trials) trials.push_back(to_json(t));
  auto idx = [](const std::optional<std::size_t>& i) { return i ? json(*i) : json(); };
  json per_tag = json::array();
  for (std::size_t c = 0; c < g.tags.size(); ++c) {
    const auto& b = g.best_by_tag[c];
    per_tag.push_back({{"tag", g.tags[c]},
                       {"trial", idx(b)},
                       {"alpha", b ? json(g.trials[*b].alpha.alpha) : json()},
                       {"f1", b ? json(g.trials[*b].class_f1[c]) : json()}});
  }
  return {{"trials", trials}, {"best_macro", idx(g.best_macro)}, {"best_micro", idx(g.best_micro)}, {"best_by_tag", per_tag}};
}

// One train() per grid point, same seed for all. Diverged trials are recorded as
// failed and excluded from every argmax.
inline GridResult grid_search(const Corpus& corpus, const std::vector<TaskWeighting>& grid, const ModelConfig& mc,
                              const TrainConfig& tc, const std::optional<fs::path>& out_dir = std::nullopt) {
  if (grid.empty()) throw ValidationError("grid_search: empty grid");
  for (const auto& w : grid) validate_training_inputs(corpus, w, mc, tc);
  GridResult g;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    AlphaTrial t;
    t.alpha = grid[i];
    try {
      const RunRecord r = train(corpus, grid[i], mc, tc);
      t = trial_from_run(r);
      if (out_dir) {
        t.run_dir = trial_name(i);
        save_run(r, *out_dir / t.run_dir);
      }
    } catch (const DivergenceError& e) {
      t.failed = true;
      t.error = e.what();
      t.class_f1.assign(corpus.task(mc.primary).size(), 0.0);
    }
    g.trials.push_back(std::move(t));
  }
  finish_grid(g, corpus.task(mc.primary));
  if (out_dir) write_text(*out_dir / "trials.json", to_json(g).dump(2) + "\n");
  return g;
}

// ---- report writers --------------------------------------------------------------

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

inline std::string fmt(const std::optional<double>& v, int precision = 6) { return v ? fmt(*v, precision) : "NA"; }

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string o = "\"";
  for (char c : s) o += c == '"' ? std::string("\"\"") : std::string(1, c);
  return o + "\"";
}

inline std::string metric_csv(const json& report) {
  std::ostringstream s;
  s << "label,precision,recall,f1,support,predicted\n";
  for (const auto& c : report.at("per_class"))
    s << csv_escape(c.at("label").get<std::string>()) << ',' << fmt(c.at("precision").get<double>()) << ','
      << fmt(c.at("recall").get<double>()) << ',' << fmt(c.at("f1").get<double>()) << ','
      << c.at("support").get<std::size_t>() << ',' << c.at("predicted").get<std::size_t>() << '\n';
  s << "macro,,," << fmt(report.at("macro_f1").get<double>()) << ",,\n";
  s << "micro,,," << fmt(report.at("micro_f1").get<double>()) << ",,\n";
  return s.str();
}

inline std::string confusion_csv(const json& report) {
  std::ostringstream s;
  s << "gold\\pred";
  for (const auto& c : report.at("per_class")) s << ',' << csv_escape(c.at("label").get<std::string>());
  s << '\n';
  const auto& conf = report.at("confusion");
  std::size_t i = 0;
  for (const auto& c : report.at("per_class")) {
    s << csv_escape(c.at("label").get<std::string>());
    for (const auto& v : conf.at(i)) s << ',' << v.get<std::size_t>();
    s << '\n';
    ++i;
  }
  return s.str();
}

inline std::string correlation_csv(const CorrelationTable& t) {
  std::ostringstream s;
  s << t.head_a << '\\' << t.head_b;
  for (const auto& b : t.tags_b) s << ',' << csv_escape(b);
  s << '\n';
  for (std::size_t i = 0; i < t.tags_a.size(); ++i) {
    s << csv_escape(t.tags_a[i]);
    for (const auto& v : t.rho[i]) s << ',' << fmt(v, 4);
    s << '\n';
  }
  return s.str();
}

inline std::string xml_escape(const std::string& in) {
  std::string o;
  for (char c : in) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

// Green-intensity heatmap; cells with |value| below `mask` are left blank.
inline std::string heatmap_svg(const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                               const std::vector<std::vector<std::optional<double>>>& values, double mask = 0.0) {
  const int cell = 48, left = 140, top = 100;
  const int w = left + cell * static_cast<int>(cols.size()) + 10;
  const int h = top + cell * static_cast<int>(rows.size()) + 10;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  for (std::size_t j = 0; j < cols.size(); ++j)
    s << "<text transform=\"translate(" << left + cell * static_cast<int>(j) + cell / 2 << "," << top - 6
      << ") rotate(-60)\">" << xml_escape(cols[j]) << "</text>\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int y = top + cell * static_cast<int>(i);
    s << "<text x=\"4\" y=\"" << y + cell / 2 + 4 << "\">" << xml_escape(rows[i]) << "</text>\n";
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const int x = left + cell * static_cast<int>(j);
      const auto& v = values[i][j];
      const bool shown = v && std::abs(*v) >= mask;
      const int g = shown ? static_cast<int>(255 - std::min(1.0, std::abs(*v)) * 155) : 255;
      s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb("
        << g << ",255," << g << ")\" stroke=\"#999\"/>";
      if (shown) s << "<text x=\"" << x + 6 << "\" y=\"" << y + cell / 2 + 4 << "\">" << fmt(*v, 2) << "</text>";
      s << '\n';
    }
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace dmtl::eval

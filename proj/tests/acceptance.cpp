// One line per criterion; exit status is the number of failures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dmtl/adapters.hpp"
#include "dmtl/augment.hpp"
#include "dmtl/crf.hpp"
#include "dmtl/eval.hpp"
#include "dmtl/losses.hpp"
#include "dmtl/trainer.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/models.hpp"
#include "support/synthetic.hpp"

using namespace dmtl;
using namespace dmtl::adapters;
using Matrix = Eigen::MatrixXd;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects failed checks; the first few messages end up in the report line.
struct Checks {
  int failed = 0;
  std::vector<std::string> notes;
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    if (++failed <= 3) notes.push_back(what);
  }
  Outcome done(std::string summary) const {
    Outcome o{failed == 0, std::move(summary)};
    for (const auto& n : notes) o.detail += "; " + n;
    if (failed > 3) o.detail += "; +" + std::to_string(failed - 3) + " more";
    return o;
  }
};

std::string num(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- 1 --------------------------------------------------------------------------

Outcome loss_gradients() {
  using losses::LossKind;
  Checks c;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (LossKind kind : {LossKind::ce, LossKind::bce, LossKind::dice, LossKind::dice_squared,
                        LossKind::self_adjusting_dice, LossKind::generalized_dice}) {
    std::mt19937_64 rng(1000 + static_cast<unsigned>(kind));
    for (int trial = 0; trial < 100; ++trial) {
      const int n = 1 + trial % 7, k = 2 + trial % 5;
      losses::LossConfig cfg;
      cfg.kind = kind;
      cfg.gamma = 0.25 + 0.25 * (trial % 4);
      if (trial % 2) cfg.reduction = losses::DiceReduction::macro;
      const bool multi = kind == LossKind::bce;
      const Matrix p = multi ? gc::random_probs(rng, n, k) : gc::random_simplex(rng, n, k);
      const Matrix y = multi ? gc::random_multihot(rng, n, k) : gc::random_onehot(rng, n, k);
      const auto lv = losses::evaluate(cfg, p, y);
      const double e = gc::max_rel_error([&](const Matrix& x) { return losses::evaluate(cfg, x, y).value; }, p, lv.grad);
      worst = std::max(worst, e);
      c.expect(e <= 1e-4, losses::to_string(kind) + " trial " + std::to_string(trial) + " rel " + num(e));
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.expect(secs < 60.0, "took " + num(secs) + " s");
  return c.done("6 losses x 100 instances, worst rel error " + num(worst, 3) + ", " + num(secs, 3) + " s");
}

// ---- 2 --------------------------------------------------------------------------

// Every label sequence of length n over k labels.
std::vector<std::vector<int>> all_paths(int n, int k) {
  std::vector<std::vector<int>> out;
  std::vector<int> p(static_cast<std::size_t>(n), 0);
  for (;;) {
    out.push_back(p);
    int i = n - 1;
    while (i >= 0 && p[static_cast<std::size_t>(i)] == k - 1) p[static_cast<std::size_t>(i--)] = 0;
    if (i < 0) return out;
    ++p[static_cast<std::size_t>(i)];
  }
}

Outcome crf_oracle() {
  Checks c;
  std::mt19937_64 rng(77);
  std::normal_distribution<double> g(0.0, 1.5);
  int instances = 0;
  double worst = 0.0, worst_sum = 0.0;
  for (int n = 1; n <= 5; ++n)
    for (int k = 1; k <= 4; ++k)
      for (int rep = 0; rep < 20; ++rep) {
        Matrix E(n, k), T(k, k);
        for (int i = 0; i < E.size(); ++i) E.data()[i] = g(rng);
        for (int i = 0; i < T.size(); ++i) T.data()[i] = g(rng);
        const auto paths = all_paths(n, k);
        std::vector<double> s;
        for (const auto& p : paths) s.push_back(crf::path_score(E, T, p));
        const double m = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (double v : s) z += std::exp(v - m);
        const double logz = m + std::log(z);
        const auto best = static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
        std::uniform_int_distribution<std::size_t> pick(0, paths.size() - 1);
        const auto& gold = paths[pick(rng)];
        const double d = std::abs(crf::nll(E, T, gold).value - (logz - crf::path_score(E, T, gold)));
        worst = std::max(worst, d);
        c.expect(d <= 1e-6, "nll n=" + std::to_string(n) + " k=" + std::to_string(k) + " diff " + num(d));
        c.expect(crf::decode(E, T) == paths[best], "decode n=" + std::to_string(n) + " k=" + std::to_string(k));
        if (n <= 4 && k <= 3) {
          double total = 0.0;
          for (const auto& p : paths) total += std::exp(-crf::nll(E, T, p).value);
          worst_sum = std::max(worst_sum, std::abs(total - 1.0));
          c.expect(std::abs(total - 1.0) <= 1e-9, "probability mass " + num(total, 12));
        }
        ++instances;
      }
  return c.done(std::to_string(instances) + " instances, max |dNLL| " + num(worst, 3) + ", max |sum-1| " +
                num(worst_sum, 3));
}

// ---- 3 --------------------------------------------------------------------------

Outcome adapter_fidelity() {
  Checks c;
  // tag map against the table transcription
  const TagMap m = load_tag_map(fx::data_dir() / "rst_tagmap.tsv");
  const json table = read_json_file(fx::data_dir() / "rst_tagmap_table.json");
  std::set<std::string> classes, tags;
  for (const auto& row : table.at("rows")) {
    const std::string cls = row.at("class");
    classes.insert(cls);
    for (const auto& t : row.at("tags")) {
      tags.insert(t.get<std::string>());
      const auto out = map_tags({{t.get<std::string>()}}, m);
      c.expect(out[0] == std::set<std::string>{cls}, "tag " + t.get<std::string>() + " does not map to " + cls);
    }
  }
  const auto targets = m.targets();
  c.expect(std::set<std::string>(targets.begin(), targets.end()) == classes, "target class set differs");
  for (const auto& [src, dst] : m.mapping)
    c.expect(tags.count(src) > 0, "map has a row absent from the table: " + src);

  // pdtb filter: docs kept iff some relation carries a whitelisted sense level
  std::mt19937_64 rng(5);
  const std::vector<std::string> senses = {"Temporal.Asynchronous.Precedence", "Temporal.Synchronous",
                                           "Temporal.Asynchronous.Succession", "Contingency.Cause.Reason",
                                           "Comparison.Contrast", "Expansion.Conjunction", "Expansion.Instantiation"};
  const auto& white = pdtb_temporal_whitelist();
  std::vector<Document> docs;
  std::vector<RelationRecord> rels;
  std::set<std::string> expected;
  for (int i = 0; i < 200; ++i) {
    const std::string id = "p" + std::to_string(i);
    docs.push_back(fx::plain_doc(id, 4));
    const int nrel = static_cast<int>(rng() % 4);
    for (int r = 0; r < nrel; ++r) {
      const std::string sense = senses[rng() % senses.size()];
      rels.push_back({id, sense, {0, 0}, {1, 1}});
      std::stringstream ss(sense);
      std::string part;
      while (std::getline(ss, part, '.'))
        if (std::find(white.begin(), white.end(), part) != white.end()) expected.insert(id);
    }
  }
  const auto [kept_rels, kept_docs] = filter_pdtb_temporal(rels, docs);
  std::set<std::string> got;
  for (const auto& d : kept_docs) got.insert(d.doc_id);
  c.expect(got == expected, "pdtb kept " + std::to_string(got.size()) + " docs, expected " +
                                std::to_string(expected.size()));
  for (const auto& r : kept_rels)
    c.expect(std::find(white.begin(), white.end(), r.label) != white.end(), "non-whitelisted label kept: " + r.label);

  // length-matched downsampling on 1,000 synthetic documents
  auto corpus_of = [](const std::string& prefix, const std::vector<std::size_t>& lens) {
    Corpus k;
    k.tasks = {fx::multiclass("T", {"a", "b"})};
    for (std::size_t i = 0; i < lens.size(); ++i) k.documents.push_back(fx::plain_doc(prefix + std::to_string(i), lens[i]));
    return k;
  };
  std::mt19937 lr(11);
  std::vector<std::size_t> tl, al;
  for (int i = 0; i < 300; ++i) tl.push_back(3 + lr() % 30);
  for (int i = 0; i < 1000; ++i) al.push_back(3 + (lr() % 2 ? lr() % 30 : 15 + lr() % 18));
  const Corpus target = corpus_of("t", tl), aux = corpus_of("a", al);
  const auto ds = downsample_to_length_distribution(aux, target, 42);
  const auto bins = decile_bins(target.documents);
  const auto want = bin_proportions(bins, target.documents), got_p = bin_proportions(bins, ds.corpus.documents);
  double worst = 0.0;
  for (std::size_t b = 0; b < want.size(); ++b) worst = std::max(worst, std::abs(want[b] - got_p[b]));
  c.expect(worst <= 0.05, "bin proportion off by " + num(worst));
  return c.done(std::to_string(tags.size()) + " source tags / " + std::to_string(classes.size()) +
                " classes; pdtb kept " + std::to_string(got.size()) + "/200 docs; downsample kept " +
                std::to_string(ds.corpus.documents.size()) + "/1000, max bin error " + num(worst, 3));
}

// ---- 4 --------------------------------------------------------------------------

double brute_spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto rank = [](const std::vector<double>& x) {
    std::vector<double> r;
    for (double v : x) {
      double less = 0, eq = 0;
      for (double w : x) less += w < v, eq += w == v;
      r.push_back(less + (eq + 1) / 2.0);
    }
    return r;
  };
  const auto ra = rank(a), rb = rank(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0, sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) ma += ra[i] / n, mb += rb[i] / n;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

Outcome metric_oracles() {
  Checks c;
  std::mt19937_64 rng(21);
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t k = 2 + rng() % 8, n = 1 + rng() % 60;
    std::vector<int> g(n), p(n);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = static_cast<int>(rng() % k);
      p[i] = rng() % 3 ? g[i] : static_cast<int>(rng() % k);
      hit += g[i] == p[i];
    }
    const double acc = static_cast<double>(hit) / static_cast<double>(n);
    c.expect(eval::metric_report(g, p, k).micro_f1 == acc, "micro != accuracy on instance " + std::to_string(inst));
  }

  double worst_rho = 0.0;
  std::uniform_int_distribution<int> small(0, 6);
  for (int inst = 0; inst < 200; ++inst) {
    std::vector<double> a(40), b(40);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = small(rng), b[i] = small(rng) + 0.3 * a[i];
    const auto rho = eval::spearman(a, b);
    if (!rho) continue;
    worst_rho = std::max(worst_rho, std::abs(*rho - brute_spearman(a, b)));
  }
  c.expect(worst_rho <= 1e-10, "spearman off by " + num(worst_rho));

  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::map<std::string, double> planted = {{"A", 0.4}, {"B", -1.3}, {"C", 0.05}, {"D", 2.0}};
  std::vector<eval::AlphaTrial> trials;
  for (int i = 0; i < 30; ++i) {
    eval::AlphaTrial t;
    double y = 0.37;
    for (const auto& [k, b] : planted) {
      t.alpha.alpha[k] = u(rng);
      y += b * t.alpha.alpha[k];
    }
    t.macro_f1 = y;
    trials.push_back(t);
  }
  const auto r = eval::regress_alpha_to_f1(trials, eval::Target::macro);
  double worst_beta = std::abs(r.intercept - 0.37);
  for (std::size_t j = 0; j < r.tasks.size(); ++j) worst_beta = std::max(worst_beta, std::abs(r.beta[j] - planted.at(r.tasks[j])));
  c.expect(worst_beta <= 1e-8, "ols off by " + num(worst_beta));

  std::vector<double> support{460, 77, 1149, 284, 406, 174, 1224, 540, 396};
  std::sort(support.begin(), support.end(), std::greater<>());
  const double ir = imbalance_ratio(support);
  c.expect(std::abs(ir - 843.25 / 267.4) <= 1e-6, "imbalance ratio " + num(ir, 10));
  return c.done("micro=accuracy on 1000 instances; spearman max diff " + num(worst_rho, 3) + "; ols max diff " +
                num(worst_beta, 3) + "; imbalance " + num(ir, 6));
}

// ---- 5 and 6 --------------------------------------------------------------------

struct ArmResult {
  double macro = 0, rare = 0, kl = 0;
};

struct Study {
  double imbalance = 0;
  std::vector<double> aux_rho;
  std::map<std::string, std::vector<ArmResult>> arms;  // ST, MT, TDA
  double seconds = 0;
};

ModelConfig study_model() {
  ModelConfig mc;
  mc.primary = synth::kPrimary;
  mc.encoder.embedder.dim = 32;
  mc.encoder.embedder.buckets = 2048;
  mc.encoder.embedder.blocks = 1;
  mc.encoder.positional_dim = 8;
  mc.encoder.lstm_hidden = 24;
  return mc;
}

TrainConfig study_train(std::uint64_t seed) {
  TrainConfig tc;
  tc.seed = seed;
  tc.epochs = 40;
  tc.patience = 5;
  tc.optimizer.lr_embedder = 1e-2;
  tc.optimizer.lr_shared = 3e-3;
  tc.optimizer.lr_heads = 3e-3;
  return tc;
}

ArmResult score(const RunRecord& r, const TaskSpec& nd) {
  const auto& m = r.metrics.at(nd.name);
  ArmResult a;
  a.macro = m.at("macro_f1").get<double>();
  for (int cls : synth::rare_classes()) a.rare += m.at("per_class").at(static_cast<std::size_t>(cls)).at("f1").get<double>();
  a.rare /= static_cast<double>(synth::rare_classes().size());
  const auto dist = eval::class_distribution(r.predictions, nd);
  a.kl = eval::prediction_distribution_kl(dist.predicted, dist.gold).value;
  return a;
}

const Study& study() {
  static const Study s = [] {
    Study st;
    const auto t0 = std::chrono::steady_clock::now();
    synth::Spec spec;
    spec.seed = 101;
    const Corpus corpus = synth::make(spec);
    const TaskSpec& nd = corpus.task(synth::kPrimary);
    st.imbalance = imbalance_ratio(class_counts(corpus, synth::kPrimary, Split::train));
    // aux gold vs rare-class indicators on held-out primary documents
    for (std::size_t r = 0; r < synth::rare_classes().size(); ++r) {
      std::vector<double> a, b;
      for (const auto& d : corpus.documents)
        for (const auto& sen : d.sentences) {
          const auto* p = sen.find(synth::kPrimary);
          const auto* x = sen.find(synth::kAux);
          if (!p || !x) continue;
          a.push_back((*p)[0] == synth::rare_classes()[r]);
          b.push_back((*x)[0] == static_cast<int>(r));
        }
      st.aux_rho.push_back(eval::spearman(a, b).value_or(0.0));
    }
    const ModelConfig mc = study_model();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const TrainConfig tc = study_train(seed);
      st.arms["ST"].push_back(score(train(corpus, TaskWeighting::one_hot(synth::kPrimary), mc, tc), nd));
      st.arms["MT"].push_back(
          score(train(corpus, TaskWeighting{{{synth::kPrimary, 0.7}, {synth::kAux, 0.3}}, 1.0}, mc, tc), nd));
      augment::MockAugmenter aug(seed, 1.0);
      const Corpus tda = augment::expand_training_set(corpus, aug, 10);
      st.arms["TDA"].push_back(score(train(tda, TaskWeighting::one_hot(synth::kPrimary), mc, tc), nd));
    }
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return st;
  }();
  return s;
}

double arm_median(const std::string& arm, double ArmResult::*field) {
  std::vector<double> v;
  for (const auto& r : study().arms.at(arm)) v.push_back(r.*field);
  return median(v);
}

Outcome multitask_claim() {
  Checks c;
  const auto& s = study();
  c.expect(s.imbalance >= 3.0, "imbalance ratio " + num(s.imbalance));
  for (double r : s.aux_rho) c.expect(r >= 0.6, "aux indicator rho " + num(r));
  const double st_rare = arm_median("ST", &ArmResult::rare), mt_rare = arm_median("MT", &ArmResult::rare);
  const double st_macro = arm_median("ST", &ArmResult::macro), mt_macro = arm_median("MT", &ArmResult::macro);
  c.expect(mt_rare > st_rare, "MT rare F1 not above ST");
  c.expect(mt_macro >= st_macro, "MT macro F1 below ST");
  c.expect(s.seconds < 600.0, "study took " + num(s.seconds) + " s");
  return c.done("imbalance " + num(s.imbalance, 3) + ", aux rho " + num(s.aux_rho[0], 3) + "/" + num(s.aux_rho[1], 3) +
                "; median rare F1 ST " + num(st_rare, 3) + " MT " + num(mt_rare, 3) + "; median macro F1 ST " +
                num(st_macro, 3) + " MT " + num(mt_macro, 3) + "; " + num(s.seconds, 3) + " s");
}

Outcome augmentation_ablation() {
  Checks c;
  const double tda_kl = arm_median("TDA", &ArmResult::kl), mt_kl = arm_median("MT", &ArmResult::kl);
  const double tda_rare = arm_median("TDA", &ArmResult::rare), st_rare = arm_median("ST", &ArmResult::rare);
  c.expect(tda_kl > mt_kl, "TDA KL not above MT");
  c.expect(tda_rare <= st_rare, "TDA improved rare F1 over ST");
  return c.done("median KL TDA " + num(tda_kl, 3) + " MT " + num(mt_kl, 3) + "; median rare F1 TDA " +
                num(tda_rare, 3) + " ST " + num(st_rare, 3));
}

// ---- 7 --------------------------------------------------------------------------

synth::Spec small_spec() {
  synth::Spec s;
  s.seed = 5;
  s.train_docs = 10;
  s.dev_docs = 4;
  s.test_docs = 4;
  s.aux_docs = 10;
  s.sentences = 5;
  return s;
}

// Primary task only: aux task, aux documents and aux labels removed.
Corpus primary_only(Corpus c) {
  std::erase_if(c.tasks, [](const TaskSpec& t) { return t.name != synth::kPrimary; });
  std::erase_if(c.documents, [](const Document& d) { return !d.covers(synth::kPrimary); });
  for (auto& d : c.documents)
    for (auto& s : d.sentences) s.labels.erase(synth::kAux);
  return c;
}

std::map<std::string, std::string> files_of(const fs::path& dir) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) m[fs::relative(e.path(), dir).string()] = read_text(e.path());
  return m;
}

Outcome weighting_equivalence() {
  Checks c;
  const Corpus mt = synth::make(small_spec());
  const Corpus st = primary_only(mt);
  const auto mc = fx::tiny_model(synth::kPrimary);
  const auto tc = fx::quick_train(12, 3);
  const auto w = TaskWeighting::one_hot(synth::kPrimary);
  const RunRecord a = train(mt, w, mc, tc);
  const RunRecord b = train(st, w, mc, tc);

  // every primary-side field of the record matches exactly
  for (const auto& [name, v] : b.parameters)
    c.expect(a.parameters.count(name) && a.parameters.at(name) == v, "parameter " + name + " differs");
  c.expect(a.metrics.at(synth::kPrimary) == b.metrics.at(synth::kPrimary), "primary metrics differ");
  c.expect(a.best_epoch == b.best_epoch && a.history.size() == b.history.size(), "history differs");
  for (std::size_t e = 0; e < std::min(a.history.size(), b.history.size()); ++e)
    c.expect(a.history[e].train_loss == b.history[e].train_loss && a.history[e].dev_metric == b.history[e].dev_metric,
             "epoch " + std::to_string(e) + " differs");
  std::map<std::pair<std::string, std::size_t>, const HeadOutput*> pb;
  for (const auto& r : b.predictions) pb[{r.doc_id, r.sentence}] = &r.heads.at(synth::kPrimary);
  std::size_t compared = 0;
  for (const auto& r : a.predictions) {
    auto it = r.heads.find(synth::kPrimary);
    if (it == r.heads.end()) continue;
    auto jt = pb.find({r.doc_id, r.sentence});
    c.expect(jt != pb.end() && jt->second->pred == it->second.pred && jt->second->probs == it->second.probs,
             "prediction differs at " + r.doc_id);
    ++compared;
  }
  c.expect(compared == b.predictions.size(), "prediction counts differ");

  // the single-task record itself replays byte for byte
  fx::TempDir d1("dmtl-acc7a"), d2("dmtl-acc7b");
  save_run(b, d1.path());
  save_run(train(st, w, mc, tc), d2.path());
  c.expect(files_of(d1.path()) == files_of(d2.path()), "saved single-task runs differ");

  // joint loss is linear in alpha
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::map<std::string, double> l = {{"X", u(rng)}, {"Y", u(rng)}, {"Z", u(rng)}};
    const TaskWeighting w1{{{"X", u(rng)}, {"Y", u(rng)}, {"Z", u(rng)}}, 0.0};
    const TaskWeighting w2{{{"X", u(rng)}, {"Y", u(rng)}, {"Z", u(rng)}}, 0.0};
    const double s = u(rng), t = u(rng);
    TaskWeighting mix{{}, 0.0};
    for (const auto& [k, v] : w1.alpha) mix.alpha[k] = s * v + t * w2.alpha.at(k);
    worst = std::max(worst, std::abs(joint_loss(l, mix) - (s * joint_loss(l, w1) + t * joint_loss(l, w2))));
    TaskWeighting onehot{{{"X", 0.0}, {"Y", 1.0}, {"Z", 0.0}}, 1.0};
    worst = std::max(worst, std::abs(joint_loss(l, onehot) - l.at("Y")));
  }
  c.expect(worst <= 1e-12, "joint loss linearity off by " + num(worst));
  return c.done(std::to_string(b.parameters.size()) + " shared parameters and " + std::to_string(compared) +
                " predictions identical; single-task run files byte-identical; linearity max error " + num(worst, 3));
}

// ---- 8 --------------------------------------------------------------------------

Outcome freezing_semantics() {
  Checks c;
  const Corpus corpus = primary_only(synth::make(small_spec()));
  auto mc = fx::tiny_model(synth::kPrimary);
  mc.encoder.embedder.blocks = 3;
  mc.encoder.mask = encoder::AugmentationMask::from_bits(31);  // every encoder parameter in use
  std::size_t changed_total = 0;
  for (bool freeze_ctx : {false, true}) {
    auto tc = fx::quick_train(4, 1);
    tc.steps_per_epoch = 1;
    tc.patience = 0;
    tc.embedder_trainable = {false, false, false, true};  // embedding, block0, block1 frozen
    tc.freeze_contextualizer = freeze_ctx;
    const auto rec = train(corpus, TaskWeighting::one_hot(synth::kPrimary), mc, tc);
    MultitaskModel fresh(mc, rec.tasks, 4);
    const auto init = ag::snapshot(fresh.parameters());
    for (const auto& [name, v] : init) {
      const bool declared = name.rfind("embedder.block2.", 0) == 0 || name.rfind("head.", 0) == 0 ||
                            (!freeze_ctx && name.rfind("encoder.", 0) == 0);
      const bool changed = rec.parameters.at(name) != v;
      changed_total += changed;
      c.expect(changed == declared, name + (changed ? " changed" : " unchanged") +
                                        (freeze_ctx ? " (contextualizer frozen)" : ""));
    }
  }

  const Corpus mt = synth::make(small_spec());
  auto tc = fx::quick_train(6, 1);
  tc.steps_per_epoch = 4;
  tc.frozen_heads = {synth::kAux};
  const auto rec = train(mt, TaskWeighting{{{synth::kPrimary, 0.5}, {synth::kAux, 0.5}}, 1.0}, mc, tc);
  MultitaskModel fresh(mc, rec.tasks, 6);
  std::size_t aux_params = 0, shared_moved = 0, shared = 0;
  for (const auto& [name, v] : ag::snapshot(fresh.parameters())) {
    const bool changed = rec.parameters.at(name) != v;
    if (name.rfind("head.AUX.", 0) == 0) {
      ++aux_params;
      c.expect(!changed, name + " changed while frozen");
    }
    if (name.rfind("encoder.", 0) == 0) shared_moved += changed, ++shared;
  }
  c.expect(aux_params > 0, "no auxiliary head parameters found");
  c.expect(shared_moved > 0, "shared encoder did not move");
  return c.done("one-step diff matched declared blocks (" + std::to_string(changed_total) +
                " tensors moved); frozen aux head unchanged over " + std::to_string(aux_params) +
                " tensors, " + std::to_string(shared_moved) + "/" + std::to_string(shared) + " shared tensors moved");
}

// ---- 9 --------------------------------------------------------------------------

int sh(const std::string& cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); }

Outcome end_to_end() {
  Checks c;
  std::vector<std::map<std::string, std::string>> reports;
  for (int rep = 0; rep < 2; ++rep) {
    fx::TempDir d("dmtl-acc9");
    fs::copy(fx::data_dir() / "demo", d / "demo", fs::copy_options::recursive);
    fs::copy_file(fx::data_dir() / "rst_tagmap.tsv", d / "rst_tagmap.tsv");
    const std::string base = std::string("\"") + DMTL_CLI + "\" ";
    const std::string cfg = " --config \"" + (d / "demo" / "config.json").string() + "\"";
    for (const char* cmd : {"prepare", "train", "gridsearch", "analyze"})
      c.expect(sh(base + cmd + cfg) == 0, std::string(cmd) + " failed on pass " + std::to_string(rep + 1));
    std::map<std::string, std::string> all;
    for (const char* sub : {"run/report", "grid/report"}) {
      const fs::path p = d / "demo" / "out" / sub;
      if (!fs::exists(p)) continue;
      for (const auto& [k, v] : files_of(p)) all[std::string(sub) + "/" + k] = v;
    }
    reports.push_back(std::move(all));
  }
  c.expect(!reports[0].empty(), "no report files written");
  c.expect(reports[0] == reports[1], "reports differ between passes");
  return c.done(std::to_string(reports[0].size()) + " report files byte-identical across two runs");
}

}  // namespace

int main() {
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, loss_gradients},   {2, crf_oracle},         {3, adapter_fidelity},
      {4, metric_oracles},   {5, multitask_claim},    {6, augmentation_ablation},
      {7, weighting_equivalence}, {8, freezing_semantics}, {9, end_to_end}};
  int failures = 0;
  for (const auto& [id, fn] : criteria) {
    Outcome o;
    try {
      ScopedWarningSink quiet([](std::string_view) {});
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
  }
  return failures;
}

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dmtl/augment.hpp"
#include "dmtl/trainer.hpp"
#include "support/fixtures.hpp"
#include "support/models.hpp"
#include "support/synthetic.hpp"

using namespace dmtl;

namespace {

synth::Spec small_spec(std::uint64_t seed = 5) {
  synth::Spec s;
  s.seed = seed;
  s.train_docs = 8;
  s.dev_docs = 4;
  s.test_docs = 4;
  s.aux_docs = 8;
  s.sentences = 5;
  return s;
}

Corpus three_tasks() {
  Corpus c;
  c.tasks = {fx::multiclass("A", {"x", "y"}), fx::multiclass("B", {"x", "y"}), fx::multiclass("Z", {"x", "y"})};
  for (const char* t : {"A", "B", "Z"})
    for (int i = 0; i < 6; ++i) {
      Document d = fx::plain_doc(std::string(t) + std::to_string(i), 2);
      for (auto& s : d.sentences) s.labels[t] = {i % 2};
      c.documents.push_back(std::move(d));
    }
  return c;
}

std::map<std::string, ag::Matrix> initial_parameters(const ModelConfig& mc, const std::vector<TaskSpec>& tasks,
                                                     std::uint64_t seed) {
  MultitaskModel m(mc, tasks, seed);
  return ag::snapshot(m.parameters());
}

bool same(const ag::Snapshot& a, const ag::Snapshot& b, const std::string& prefix) {
  for (const auto& [k, v] : a)
    if (k.rfind(prefix, 0) == 0 && !(b.count(k) && b.at(k) == v)) return false;
  return true;
}

}  // namespace

// ---- weighting ----

TEST(TaskWeighting, Validation) {
  EXPECT_NO_THROW((TaskWeighting{{{"a", 0.7}, {"b", 0.3}}, 1.0}).validate());
  EXPECT_THROW((TaskWeighting{{{"a", 0.7}, {"b", 0.2}}, 1.0}).validate(), ValidationError);
  EXPECT_THROW((TaskWeighting{{{"a", 1.2}, {"b", -0.2}}, 1.0}).validate(), ValidationError);
  EXPECT_THROW((TaskWeighting{{{"a", 0.0}}, 0.0}).validate(), ValidationError);
  EXPECT_THROW(TaskWeighting{}.validate(), ValidationError);
  EXPECT_EQ((TaskWeighting{{{"b", 0.5}, {"a", 0.0}, {"c", 0.5}}, 1.0}).active(), (std::vector<std::string>{"b", "c"}));
}

TEST(TaskWeighting, JsonForms) {
  const auto w = weighting_from_json(json::parse(R"({"a":0.25,"b":0.75})"));
  EXPECT_EQ(w.c, 1.0);
  EXPECT_EQ(w.of("b"), 0.75);
  EXPECT_EQ(w.of("missing"), 0.0);
  const auto v = weighting_from_json(to_json(w.scaled(2.0)));
  EXPECT_EQ(v.c, 2.0);
  EXPECT_EQ(v.of("a"), 0.5);
}

TEST(JointLoss, Examples) {
  const TaskWeighting w{{{"p", 0.7}, {"q", 0.3}}, 1.0};
  EXPECT_NEAR(joint_loss({{"p", 2.0}, {"q", 4.0}}, w), 2.6, 1e-12);
  EXPECT_EQ(joint_loss({{"p", 2.0}, {"q", 4.0}}, TaskWeighting{{{"p", 1.0}, {"q", 0.0}}, 1.0}), 2.0);
  EXPECT_THROW(joint_loss({{"r", 1.0}}, w), ValidationError);
}

TEST(JointLoss, LinearInWeightsAndLosses) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int t = 0; t < 100; ++t) {
    const double a = u(rng) / 5.0;
    const TaskWeighting w{{{"p", a}, {"q", 1.0 - a}}, 1.0};
    const std::map<std::string, double> L{{"p", u(rng)}, {"q", u(rng)}}, M{{"p", u(rng)}, {"q", u(rng)}};
    const double s = u(rng);
    EXPECT_NEAR(joint_loss(L, w.scaled(s)), s * joint_loss(L, w), 1e-12);
    std::map<std::string, double> LM;
    for (const auto& [k, v] : L) LM[k] = v + s * M.at(k);
    EXPECT_NEAR(joint_loss(LM, w), joint_loss(L, w) + s * joint_loss(M, w), 1e-12);
  }
}

// ---- sampling ----

TEST(SampleStep, SingleActiveTaskAlwaysDrawn) {
  const Corpus c = three_tasks();
  TaskSampler s(c, TaskWeighting::one_hot("B"), 1, 3);
  for (int i = 0; i < 200; ++i) EXPECT_EQ(sample_step(s).task, "B");
}

TEST(SampleStep, UniformOverActiveTasks) {
  const Corpus c = three_tasks();
  TaskSampler s(c, TaskWeighting{{{"A", 0.9}, {"B", 0.1}, {"Z", 0.0}}, 1.0}, 1, 4);
  std::map<std::string, int> n;
  for (int i = 0; i < 10000; ++i) ++n[sample_step(s).task];
  EXPECT_EQ(n.count("Z"), 0u);
  EXPECT_NEAR(n["A"] / 10000.0, 0.5, 0.02);
  EXPECT_NEAR(n["B"] / 10000.0, 0.5, 0.02);
}

TEST(SampleStep, BatchIsDistinctDocumentsOfTheTask) {
  const Corpus c = three_tasks();
  TaskSampler s(c, TaskWeighting{{{"A", 0.5}, {"Z", 0.5}}, 1.0}, 4, 5);
  for (int i = 0; i < 100; ++i) {
    const auto d = sample_step(s);
    ASSERT_EQ(d.documents.size(), 4u);
    EXPECT_EQ(std::set<std::size_t>(d.documents.begin(), d.documents.end()).size(), 4u);
    for (auto idx : d.documents) EXPECT_TRUE(c.documents[idx].covers(d.task));
  }
  TaskSampler big(c, TaskWeighting::one_hot("A"), 50, 5);
  EXPECT_EQ(sample_step(big).documents.size(), 6u);
}

TEST(SampleStep, EmptyPoolIsAnError) {
  Corpus c = three_tasks();
  for (auto& d : c.documents)
    if (d.covers("Z")) d.split = Split::dev;
  EXPECT_THROW(TaskSampler(c, TaskWeighting{{{"A", 0.5}, {"Z", 0.5}}, 1.0}, 1, 1), ValidationError);
}

// ---- configuration ----

TEST(TrainConfig, SeedMandatoryAndJsonRoundTrip) {
  TrainConfig t;
  EXPECT_THROW(t.validate(), ValidationError);
  t = fx::quick_train(9, 4);
  t.frozen_heads = {"AUX"};
  t.embedder_trainable = {false, true};
  t.eval_split = Split::dev;
  const TrainConfig u = train_config_from_json(to_json(t));
  EXPECT_EQ(to_json(u), to_json(t));
  EXPECT_THROW(train_config_from_json(json::parse(R"({"seed":1,"early_stop_metric":"loss"})")).validate(),
               ValidationError);
}

// ---- training ----

TEST(Train, ZeroEpochsKeepsInitialParameters) {
  const Corpus c = synth::make(small_spec());
  const auto mc = fx::tiny_model("ND");
  const auto rec = train(c, TaskWeighting::one_hot("ND"), mc, fx::quick_train(3, 0));
  EXPECT_TRUE(rec.history.empty());
  EXPECT_EQ(rec.parameters, initial_parameters(mc, rec.tasks, 3));
  EXPECT_EQ(rec.predictions.size(), c.covered_sentences("ND", Split::test));
  EXPECT_TRUE(rec.metrics.contains("ND"));
}

TEST(Train, FreezeAllLeavesParametersUnchanged) {
  const Corpus c = synth::make(small_spec());
  const auto mc = fx::tiny_model("ND");
  auto tc = fx::quick_train(3, 2);
  tc.freeze_all = true;
  const TaskWeighting w{{{"ND", 0.6}, {"AUX", 0.4}}, 1.0};
  const auto rec = train(c, w, mc, tc);
  EXPECT_EQ(rec.history.size(), 2u);
  EXPECT_EQ(rec.parameters, initial_parameters(mc, rec.tasks, 3));
}

TEST(Train, DeterministicUnderSeed) {
  const Corpus c = synth::make(small_spec());
  const auto mc = fx::tiny_model("ND");
  const TaskWeighting w{{{"ND", 0.6}, {"AUX", 0.4}}, 1.0};
  const auto a = train(c, w, mc, fx::quick_train(8)), b = train(c, w, mc, fx::quick_train(8));
  EXPECT_EQ(a.parameters, b.parameters);
  EXPECT_EQ(a.metrics, b.metrics);
  const auto other = train(c, w, mc, fx::quick_train(9));
  EXPECT_NE(a.parameters, other.parameters);
}

TEST(Train, SeparableTaskIsLearned) {
  auto spec = small_spec(17);
  spec.with_aux = false;
  spec.train_docs = 30;
  spec.dev_docs = 10;
  spec.frequent_pool = 1;
  spec.rare_pool = 1;
  spec.filler_vocab = 10;
  spec.proportions = {1, 1, 1, 1, 1, 1};
  const Corpus c = synth::make(spec);
  // margin check: every sentence holds exactly one signal token and it names its class
  for (const auto& d : c.documents)
    for (const auto& s : d.sentences) {
      int found = -1, count = 0;
      for (const auto& tok : encoder::tokenize(s.text))
        for (int k = 0; k < 6; ++k)
          if (tok == encoder::tokenize(synth::signal_token(k, 0))[0]) {
            found = k;
            ++count;
          }
      ASSERT_EQ(count, 1);
      ASSERT_EQ(s.find("ND")->at(0), found);
    }
  auto tc = fx::quick_train(2, 20);
  tc.patience = 0;
  tc.eval_split = Split::dev;
  auto mc = fx::tiny_model("ND");
  mc.encoder.embedder.dim = 32;
  const auto rec = train(c, TaskWeighting::one_hot("ND"), mc, tc);
  EXPECT_GE(rec.metrics["ND"]["micro_f1"].get<double>(), 0.95);
}

TEST(Train, EarlyStoppingRestoresBestEpoch) {
  const Corpus c = synth::make(small_spec());
  auto tc = fx::quick_train(4, 12);
  tc.patience = 1;
  const auto rec = train(c, TaskWeighting::one_hot("ND"), fx::tiny_model("ND"), tc);
  ASSERT_FALSE(rec.history.empty());
  EXPECT_GE(rec.best_epoch, 1u);
  EXPECT_LE(rec.best_epoch, rec.history.size());
  double best = -1.0;
  for (const auto& e : rec.history) best = std::max(best, e.dev_metric);
  EXPECT_EQ(rec.history[rec.best_epoch - 1].dev_metric, best);
  // the run stops once one epoch fails to improve
  if (rec.history.size() < 12) {
    EXPECT_LT(rec.history.back().dev_metric, best + 1e-15);
  }
}

TEST(Train, DivergenceCarriesDiagnostic) {
  Corpus c = synth::make(small_spec());
  c.tasks[0].loss.class_weights = std::vector<double>(6, std::numeric_limits<double>::infinity());
  try {
    train(c, TaskWeighting::one_hot("ND"), fx::tiny_model("ND"), fx::quick_train(1));
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.diagnostic()["task"], "ND");
    EXPECT_EQ(e.diagnostic()["epoch"], 1);
    EXPECT_EQ(e.diagnostic()["documents"].size(), 1u);
  }
}

TEST(Train, UnknownPrimaryOrFrozenPrimaryRejected) {
  const Corpus c = synth::make(small_spec());
  EXPECT_THROW(train(c, TaskWeighting::one_hot("ND"), fx::tiny_model("XX"), fx::quick_train(1)), ValidationError);
  auto tc = fx::quick_train(1);
  tc.frozen_heads = {"ND"};
  EXPECT_THROW(train(c, TaskWeighting::one_hot("ND"), fx::tiny_model("ND"), tc), ValidationError);
}

TEST(FreezeAuxiliaryHeads, FrozenHeadUnchangedEncoderMoves) {
  const Corpus c = synth::make(small_spec());
  const auto mc = fx::tiny_model("ND");
  auto tc = fx::quick_train(6, 1);
  tc.frozen_heads = {"AUX"};
  tc.steps_per_epoch = 4;
  const TaskWeighting w{{{"ND", 0.5}, {"AUX", 0.5}}, 1.0};
  const auto rec = train(c, w, mc, tc);
  const auto init = initial_parameters(mc, rec.tasks, 6);
  EXPECT_TRUE(same(init, rec.parameters, "head.AUX."));
  EXPECT_FALSE(same(init, rec.parameters, "encoder.bilstm"));
  EXPECT_FALSE(same(init, rec.parameters, "head.ND."));
  // frozen head still predicts
  for (const auto& r : rec.predictions) EXPECT_TRUE(r.heads.count("AUX"));
}

TEST(FreezeAuxiliaryHeads, PrimaryAndNoFlags) {
  const Corpus c = synth::make(small_spec());
  MultitaskModel m(fx::tiny_model("ND"), c.tasks, 1);
  EXPECT_THROW(freeze_auxiliary_heads(m, {"ND"}), ValidationError);
  freeze_auxiliary_heads(m, {});
  for (auto* p : m.parameters()) EXPECT_TRUE(p->trainable());
  freeze_auxiliary_heads(m, {"AUX"});
  for (auto* p : m.head("AUX").parameters()) EXPECT_FALSE(p->trainable());
  for (auto* p : m.head("ND").parameters()) EXPECT_TRUE(p->trainable());
}

TEST(Model, HeadSeedsIndependentOfOtherHeads) {
  const Corpus c = synth::make(small_spec());
  const auto mc = fx::tiny_model("ND");
  const auto both = initial_parameters(mc, c.tasks, 3);
  const auto alone = initial_parameters(mc, {c.tasks[0]}, 3);
  for (const auto& [k, v] : alone) EXPECT_EQ(both.at(k), v) << k;
}

// ---- run records ----

TEST(RunRecord, DumpCoversEvaluationSentencesAndMetricsRecompute) {
  const Corpus c = synth::make(small_spec());
  const TaskWeighting w{{{"ND", 0.6}, {"AUX", 0.4}}, 1.0};
  const auto rec = train(c, w, fx::tiny_model("ND"), fx::quick_train(2));
  std::size_t eval_sentences = 0;
  for (const auto& d : c.documents)
    if (d.split == Split::test && (d.covers("ND") || d.covers("AUX"))) eval_sentences += d.sentences.size();
  EXPECT_EQ(rec.predictions.size(), eval_sentences);
  EXPECT_EQ(metrics_from_predictions(rec.predictions, rec.tasks), rec.metrics);
}

TEST(RunRecord, SaveLoadRoundTrip) {
  fx::TempDir dir;
  const Corpus c = synth::make(small_spec());
  const TaskWeighting w{{{"ND", 0.6}, {"AUX", 0.4}}, 1.0};
  const auto rec = train(c, w, fx::tiny_model("ND"), fx::quick_train(2));
  save_run(rec, dir.path());
  for (const char* f : {"config.json", "metrics.json", "predictions.jsonl", "checkpoint.bin"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto back = load_run(dir.path(), true);
  EXPECT_EQ(back.metrics, rec.metrics);
  EXPECT_EQ(back.parameters, rec.parameters);
  EXPECT_EQ(back.best_epoch, rec.best_epoch);
  ASSERT_EQ(back.predictions.size(), rec.predictions.size());
  EXPECT_EQ(metrics_from_predictions(back.predictions, back.tasks), rec.metrics);
  EXPECT_EQ(to_json(back.weighting), to_json(w));

  fs::remove(dir / "predictions.jsonl");
  try {
    load_run(dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("predictions.jsonl"), std::string::npos);
  }
}

// ---- augmentation ----

TEST(MockAugmenter, TenDeterministicVariants) {
  augment::MockAugmenter a(3, 1.0), b(3, 1.0);
  const auto ra = augment::augment_sentence("the quick brown fox jumps over the dog", a, 10);
  const auto rb = augment::augment_sentence("the quick brown fox jumps over the dog", b, 10);
  EXPECT_EQ(ra.paraphrases.size(), 10u);
  EXPECT_FALSE(ra.incomplete());
  EXPECT_EQ(ra.paraphrases, rb.paraphrases);
  for (const auto& p : ra.paraphrases) EXPECT_FALSE(p.empty());
  EXPECT_THROW(augment::augment_sentence("x", a, 0), ValidationError);
}

TEST(MockAugmenter, ZeroTemperatureReturnsInput) {
  augment::MockAugmenter a(3, 0.0);
  const std::string s = "nothing should change here";
  for (const auto& p : augment::augment_sentence(s, a, 10).paraphrases) EXPECT_EQ(p, s);
}

TEST(MockAugmenter, DistinctSeedsGiveDistinctMultisets) {
  std::set<std::vector<std::string>> seen;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    augment::MockAugmenter a(seed, 1.0);
    auto p = augment::augment_sentence("markets fell sharply on tuesday after the report", a, 10).paraphrases;
    std::sort(p.begin(), p.end());
    EXPECT_TRUE(seen.insert(p).second) << seed;
  }
}

TEST(ExpandTrainingSet, IdentityAtZero) {
  const Corpus c = synth::make(small_spec());
  augment::MockAugmenter a(1, 1.0);
  const Corpus e = augment::expand_training_set(c, a, 0);
  ASSERT_EQ(e.documents.size(), c.documents.size());
  for (std::size_t i = 0; i < c.documents.size(); ++i)
    EXPECT_EQ(document_to_json(e.documents[i], e.tasks), document_to_json(c.documents[i], c.tasks));
}

TEST(ExpandTrainingSet, OneCopyOfThreeSentenceDoc) {
  Corpus c;
  c.tasks = {fx::multiclass("T", {"a", "b"})};
  Document d = fx::plain_doc("doc", 3);
  for (std::size_t j = 0; j < 3; ++j) d.sentences[j].labels["T"] = {static_cast<int>(j % 2)};
  c.documents.push_back(d);
  augment::MockAugmenter a(1, 1.0);
  const Corpus e = augment::expand_training_set(c, a, 1);
  ASSERT_EQ(e.documents.size(), 2u);
  const auto& copy = e.documents[1];
  EXPECT_EQ(copy.doc_id, "doc#aug0");
  ASSERT_EQ(copy.sentences.size(), 3u);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(copy.sentences[j].labels, d.sentences[j].labels);
    EXPECT_EQ(copy.sentences[j].index, j);
  }
}

TEST(ExpandTrainingSet, TenCopiesElevenfoldTrainAndHeldOutUntouched) {
  const Corpus c = synth::make(small_spec());
  augment::MockAugmenter a(1, 1.0);
  augment::ExpansionStats st;
  const Corpus e = augment::expand_training_set(c, a, 10, &st);
  auto count = [](const Corpus& k, Split s) {
    std::size_t n = 0;
    for (const auto& d : k.documents)
      if (d.split == s) n += d.sentences.size();
    return n;
  };
  EXPECT_EQ(count(e, Split::train), 11 * count(c, Split::train));
  EXPECT_EQ(st.failed_copies, 0u);
  auto held_out = [](const Corpus& k) {
    std::string out;
    for (const auto& d : k.documents)
      if (d.split != Split::train) out += document_to_json(d, k.tasks).dump() + "\n";
    return out;
  };
  EXPECT_EQ(held_out(e), held_out(c));
  EXPECT_EQ(e.covered_sentences("ND", Split::train), 11 * c.covered_sentences("ND", Split::train));
  EXPECT_NO_THROW(e.validate());
}

TEST(ProcessAugmenter, ExternalFilters) {
  augment::ProcessAugmenter p("sed 's/a/o/g'", "tr 'a-z' 'A-Z'", 1, 1.0);
  EXPECT_EQ(p.paraphrase({"banana", "cab"}, 0), (std::vector<std::string>{"BONONO", "COB"}));
  augment::ProcessAugmenter env("cat", "while read l; do echo \"$l $DMTL_SEED $DMTL_SAMPLE\"; done", 42, 1.0);
  EXPECT_EQ(env.paraphrase({"x"}, 3), (std::vector<std::string>{"x 42 3"}));
}

TEST(ProcessAugmenter, FailuresAreSkippedWithWarning) {
  std::vector<std::string> msgs;
  ScopedWarningSink sink([&](std::string_view m) { msgs.emplace_back(m); });
  augment::ProcessAugmenter drop("cat", "head -n 0", 1, 1.0);
  const auto r = augment::augment_sentence("some text", drop, 3);
  EXPECT_TRUE(r.paraphrases.empty());
  EXPECT_EQ(r.failed, 3u);
  EXPECT_TRUE(r.incomplete());
  EXPECT_EQ(msgs.size(), 3u);

  augment::ProcessAugmenter broken("exit 3", "cat", 1, 1.0);
  EXPECT_THROW(broken.paraphrase({"a"}, 0), augment::AugmentError);
}

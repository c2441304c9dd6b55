#include <gtest/gtest.h>

#include "ceg/datagen.hpp"
#include "ceg/trainer.hpp"
#include "support/oracles.hpp"

namespace ceg {
namespace {

struct Toy {
  DomainSplit split;

  explicit Toy(std::size_t classes = 3) {
    DomainSpec s;
    s.num_classes = classes;
    s.samples_per_domain = 60;
    s.seed = 3;
    split = leave_one_domain_out(generate(s), 3);
  }
};

TrainConfig toy_config() {
  TrainConfig c;
  c.budget = 9;
  c.initial_budget = 4;
  c.pretrain_epochs = 2;
  c.learn_epochs = 5;
  c.hidden_width = 16;
  c.seed = 21;
  return c;
}

std::vector<std::vector<SampleId>> query_ids(const RunReport& r) {
  std::vector<std::vector<SampleId>> out;
  for (const auto& q : r.queries) out.push_back(q.ids);
  return out;
}

TEST(Config, Validation) {
  TrainConfig c = toy_config();
  c.pretrain_epochs = 5;
  EXPECT_THROW(c.validate(180), Error);
  c = toy_config();
  c.budget = 181;
  EXPECT_THROW(c.validate(180), Error);
  c = toy_config();
  c.initial_budget = 10;
  EXPECT_THROW(c.validate(180), Error);
  c = toy_config();
  c.lr_head = 0.0;
  EXPECT_THROW(c.validate(180), Error);
  c = toy_config();
  c.strategy = "random";
  EXPECT_THROW(c.validate(180), Error);
  EXPECT_NO_THROW(toy_config().validate(180));
}

TEST(Components, ParseAndName) {
  for (const char* n : {"S_u", "S_r", "S_d", "L_ac", "L_eg", "M_intra", "M_inter", "dynamicT"}) {
    EXPECT_EQ(to_string(parse_component(n)), n);
  }
  EXPECT_THROW(parse_component("S_x"), Error);
}

TEST(Evaluate, ConstantPredictorAndErrors) {
  Classifier g{init_mlp({2, 3, 3}, 1)};
  g.net.b2 = {0.0, 50.0, 0.0};
  std::vector<Sample> ones;
  for (int i = 0; i < 10; ++i) ones.push_back({i, Vec{0.1 * i, -0.2 * i}, 0, 1});
  EXPECT_EQ(evaluate(g, ones), 1.0);
  try {
    evaluate(g, std::vector<Sample>{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Evaluation);
  }
}

TEST(Evaluate, ChanceLevelForUniformPredictions) {
  Classifier g{init_mlp({2, 3, 4}, 1)};
  g.net.w2.data.assign(g.net.w2.data.size(), 0.0);  // all-equal logits; argmax ties resolve to class 0
  std::vector<Sample> data;
  RngStream rng(2, "chance");
  for (int i = 0; i < 10000; ++i) data.push_back({i, oracle::random_vec(2, rng), 0, static_cast<std::size_t>(i % 4)});
  EXPECT_NEAR(evaluate(g, data), 0.25, 0.05);
}

TEST(Evaluate, MatchesPerSampleOracle) {
  RngStream rng(3, "eval");
  for (int t = 0; t < 20; ++t) {
    Classifier g{oracle::random_mlp({3, 5, 3}, rng)};
    std::vector<Sample> data;
    for (int i = 0; i < 200; ++i) data.push_back({i, oracle::random_vec(3, rng, -3, 3), 0, rng.index(3)});
    std::size_t hits = 0;
    for (const auto& s : data) {
      const auto p = oracle::naive_probs(g.net, s.features);
      std::size_t best = 0;
      for (std::size_t c = 1; c < p.size(); ++c) best = p[c] > p[best] ? c : best;
      hits += best == s.hidden_class ? 1 : 0;
    }
    EXPECT_DOUBLE_EQ(evaluate(g, data), static_cast<double>(hits) / 200.0);
  }
}

TEST(Run, ToyReplayIsIdentical) {
  const Toy toy;
  const auto a = run_ceg(toy_config(), toy.split.sources, toy.split.target);
  const auto b = run_ceg(toy_config(), toy.split.sources, toy.split.target);
  EXPECT_EQ(a.epochs.size(), 5u);
  EXPECT_EQ(query_ids(a), query_ids(b));
  EXPECT_EQ(a.final_target_accuracy, b.final_target_accuracy);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  std::string la, lb;
  for (const auto& q : a.queries) la += to_json_line(q) + "\n";
  for (const auto& q : b.queries) lb += to_json_line(q) + "\n";
  EXPECT_EQ(la, lb);

  TrainConfig other = toy_config();
  other.seed = 22;
  EXPECT_NE(query_ids(run_ceg(other, toy.split.sources, toy.split.target)), query_ids(a));
}

TEST(Run, QueriesStartAfterPretrainingAndSpendExactly) {
  const Toy toy;
  const auto r = run_ceg(toy_config(), toy.split.sources, toy.split.target);
  ASSERT_EQ(r.queries.size(), 3u);
  EXPECT_EQ(r.queries[0].epoch, 3u);
  EXPECT_EQ(r.queries[0].ids.size(), 2u);
  EXPECT_EQ(r.queries[1].ids.size(), 2u);
  EXPECT_EQ(r.queries[2].ids.size(), 1u);
  EXPECT_EQ(r.budget_spent, 9u);
  EXPECT_TRUE(r.epochs[0].query_ids.empty());
  EXPECT_TRUE(r.epochs[1].query_ids.empty());
  for (std::size_t i = 1; i < r.epochs.size(); ++i) {
    EXPECT_GE(r.epochs[i].labeled, r.epochs[i - 1].labeled);
    EXPECT_LE(r.epochs[i].unlabeled, r.epochs[i - 1].unlabeled);
    EXPECT_EQ(r.epochs[i].labeled + r.epochs[i].unlabeled, 180u);
  }
  std::set<SampleId> seen;
  for (const auto& q : r.queries) {
    for (SampleId id : q.ids) EXPECT_TRUE(seen.insert(id).second);
  }
}

TEST(Run, ExhaustedInitialBudgetNeverQueries) {
  const Toy toy;
  TrainConfig c = toy_config();
  c.budget = 4;
  const auto r = run_ceg(c, toy.split.sources, toy.split.target);
  EXPECT_TRUE(r.queries.empty());
  for (const auto& e : r.epochs) EXPECT_EQ(e.labeled, 4u);
  EXPECT_EQ(r.budget_spent, 4u);
}

TEST(Run, RejectsSingleSourceDomain) {
  const Toy toy;
  std::vector<Sample> one;
  for (const auto& s : toy.split.sources) {
    if (s.domain == 0) one.push_back(s);
  }
  EXPECT_THROW(run_ceg(toy_config(), one, toy.split.target), Error);
}

TEST(Run, UniformBaselineReplays) {
  const Toy toy;
  TrainConfig c = toy_config();
  c.strategy = "uniform";
  c.training_loss = TrainingLoss::SupervisedOnly;
  const auto a = run_baseline(c, toy.split.sources, toy.split.target);
  const auto b = run_baseline(c, toy.split.sources, toy.split.target);
  EXPECT_EQ(query_ids(a), query_ids(b));
  EXPECT_EQ(a.variant, "uniform+ce");
  for (const auto& e : a.epochs) {
    EXPECT_EQ(e.loss_ac, 0.0);
    EXPECT_EQ(e.loss_eg, 0.0);
  }
  c.strategy = "ceg";
  EXPECT_THROW(run_baseline(c, toy.split.sources, toy.split.target), Error);
}

TEST(Run, EntropyEqualsBvsbForTwoClasses) {
  const Toy toy(2);
  TrainConfig c = toy_config();
  c.strategy = "entropy";
  const auto e = run_baseline(c, toy.split.sources, toy.split.target);
  c.strategy = "bvsb";
  const auto b = run_baseline(c, toy.split.sources, toy.split.target);
  EXPECT_EQ(query_ids(e), query_ids(b));
  EXPECT_EQ(e.final_target_accuracy, b.final_target_accuracy);
}

TEST(Run, UncertaintyOnlyAblationEqualsBvsb) {
  const Toy toy;
  const auto ab = run_ablation(toy_config(), toy.split.sources, toy.split.target,
                               {Component::Representativeness, Component::Diversity});
  TrainConfig c = toy_config();
  c.strategy = "bvsb";
  c.training_loss = TrainingLoss::SemiSupervised;
  const auto b = run_baseline(c, toy.split.sources, toy.split.target);
  EXPECT_EQ(query_ids(ab), query_ids(b));
  EXPECT_EQ(ab.variant, "ceg w/o S_r S_d");
}

TEST(Run, CoresetMatchesStandaloneSelection) {
  const Toy toy;
  TrainConfig with_query = toy_config();
  with_query.strategy = "coreset";
  with_query.pretrain_epochs = 4;
  with_query.learn_epochs = 5;
  with_query.disabled = {Component::DynamicThreshold};
  const auto r = CollaborativeRun(with_query, toy.split.sources, toy.split.target).run();
  ASSERT_EQ(r.queries.size(), 1u);

  // The same loop stopped one epoch earlier with no query budget holds the
  // model and pool that the fifth epoch selected from.
  TrainConfig before = with_query;
  before.budget = 4;
  before.pretrain_epochs = 3;
  before.learn_epochs = 4;
  CollaborativeRun prefix(before, toy.split.sources, toy.split.target);
  const auto pr = prefix.run();
  for (std::size_t e = 0; e < 4; ++e) EXPECT_EQ(pr.epochs[e].target_accuracy, r.epochs[e].target_accuracy);

  std::vector<SampleId> ids;
  std::vector<Vec> emb, covered;
  for (const auto& s : toy.split.sources) {
    if (prefix.pool().is_unlabeled(s.id)) {
      ids.push_back(s.id);
      emb.push_back(features(prefix.classifier(), s.features));
    } else {
      covered.push_back(features(prefix.classifier(), s.features));
    }
  }
  EXPECT_EQ(coreset_select(ids, emb, covered, 5), r.queries[0].ids);
}

TEST(Run, StaticThresholdAblation) {
  const Toy toy;
  const auto r = run_ablation(toy_config(), toy.split.sources, toy.split.target, {Component::DynamicThreshold});
  for (const auto& e : r.epochs) EXPECT_EQ(e.threshold, 0.5);
  const auto full = run_ceg(toy_config(), toy.split.sources, toy.split.target);
  EXPECT_EQ(full.epochs.front().threshold, 0.25);
  EXPECT_EQ(full.epochs.back().threshold, 0.5);
}

TEST(Run, NoExtraLossesLeavesOnlyCrossEntropy) {
  const Toy toy;
  const auto r = run_ablation(toy_config(), toy.split.sources, toy.split.target,
                              {Component::Consistency, Component::Expansion});
  for (const auto& e : r.epochs) {
    EXPECT_EQ(e.loss_ss, e.loss_ce);
    EXPECT_EQ(e.reliable, 0u);
  }
}

TEST(Run, AllScoresDisabledFallsBackToUniform) {
  const Toy toy;
  const auto r = run_ablation(toy_config(), toy.split.sources, toy.split.target,
                              {Component::Uncertainty, Component::Representativeness, Component::Diversity});
  EXPECT_EQ(r.budget_spent, 9u);
  ASSERT_EQ(r.notes.size(), 3u);
  EXPECT_NE(r.notes[0].find("uniform"), std::string::npos);
}

TEST(Run, ReportJsonShape) {
  const Toy toy;
  const auto r = run_ceg(toy_config(), toy.split.sources, toy.split.target);
  const auto j = to_json(r);
  EXPECT_FALSE(j.contains("wall_clock_seconds"));
  EXPECT_TRUE(to_json(r, true).contains("wall_clock_seconds"));
  EXPECT_EQ(j.at("epochs").size(), 5u);
  EXPECT_EQ(j.at("budget_spent"), 9);
  const auto line = nlohmann::json::parse(training_log_line(r.epochs.back()));
  EXPECT_TRUE(line.contains("U"));
  EXPECT_TRUE(line.contains("L_ss"));
}

TEST(Run, RetrainedDiscriminatorIsRunnable) {
  const Toy toy;
  TrainConfig c = toy_config();
  c.retrain_discriminator = true;
  const auto r = run_ceg(c, toy.split.sources, toy.split.target);
  EXPECT_EQ(r.budget_spent, 9u);
}

}  // namespace
}  // namespace ceg

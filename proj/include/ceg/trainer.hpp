#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ceg/core_math.hpp"
#include "ceg/error.hpp"
#include "ceg/exploration.hpp"
#include "ceg/generalization.hpp"
#include "ceg/model.hpp"
#include "ceg/pools.hpp"
#include "ceg/sample.hpp"

namespace ceg {

/// Parts of the method that an ablation can switch off.
enum class Component { Uncertainty, Representativeness, Diversity, Consistency, Expansion, MixIntra, MixInter, DynamicThreshold };

inline Component parse_component(const std::string& name) {
  if (name == "S_u") return Component::Uncertainty;
  if (name == "S_r") return Component::Representativeness;
  if (name == "S_d") return Component::Diversity;
  if (name == "L_ac") return Component::Consistency;
  if (name == "L_eg") return Component::Expansion;
  if (name == "M_intra") return Component::MixIntra;
  if (name == "M_inter") return Component::MixInter;
  if (name == "dynamicT") return Component::DynamicThreshold;
  throw Error(ErrorKind::Configuration, "unknown ablation component '" + name + "'");
}

inline std::string to_string(Component c) {
  switch (c) {
    case Component::Uncertainty: return "S_u";
    case Component::Representativeness: return "S_r";
    case Component::Diversity: return "S_d";
    case Component::Consistency: return "L_ac";
    case Component::Expansion: return "L_eg";
    case Component::MixIntra: return "M_intra";
    case Component::MixInter: return "M_inter";
    case Component::DynamicThreshold: return "dynamicT";
  }
  return "unknown";
}

enum class TrainingLoss { SemiSupervised, SupervisedOnly };

struct TrainConfig {
  std::size_t pretrain_epochs = 15;
  std::size_t learn_epochs = 30;
  std::size_t budget = 0;
  std::optional<std::size_t> initial_budget;  // defaults to budget / 2
  double gamma1 = 3.0;
  double gamma2 = 1.0;
  double delta = 0.3;
  double threshold_final = 0.5;
  double alpha = 0.2;
  double tau = 0.95;
  double lr_feature = 0.003;
  double lr_head = 0.01;
  std::size_t batch_size = 16;
  std::size_t hidden_width = 64;
  double sigma_weak = 0.05;
  double sigma_strong = 0.2;
  double mask_prob = 0.3;
  std::uint64_t seed = 0;
  std::string strategy = "ceg";  // "ceg" or a baseline name
  TrainingLoss training_loss = TrainingLoss::SemiSupervised;
  std::set<Component> disabled;
  bool retrain_discriminator = false;
  std::size_t discriminator_epochs = 1;
  double validation_fraction = 0.1;
  std::size_t num_classes = 0;  // 0: infer from the source samples

  std::size_t resolved_initial_budget() const { return initial_budget.value_or(budget / 2); }
  bool enabled(Component c) const { return disabled.count(c) == 0; }

  void validate(std::size_t pool_size) const {
    auto fail = [](const std::string& what) { throw Error(ErrorKind::Configuration, "invalid train config: " + what); };
    if (pretrain_epochs >= learn_epochs) fail("pretraining epochs must be fewer than learning epochs");
    if (budget > pool_size) fail("budget " + std::to_string(budget) + " exceeds pool size " + std::to_string(pool_size));
    if (resolved_initial_budget() > budget) fail("initial budget exceeds budget");
    if (!(lr_feature > 0.0) || !(lr_head > 0.0)) fail("learning rates must be positive");
    if (!(alpha > 0.0)) fail("alpha must be positive");
    if (!(tau > 0.0 && tau <= 1.0)) fail("tau must lie in (0, 1]");
    if (!(delta >= 0.0)) fail("delta must be non-negative");
    if (!(gamma1 >= 0.0) || !(gamma2 >= 0.0)) fail("gamma weights must be non-negative");
    if (!(threshold_final >= 0.0 && threshold_final <= 1.0)) fail("threshold must lie in [0, 1]");
    if (batch_size == 0 || hidden_width == 0) fail("batch size and hidden width must be positive");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) fail("validation fraction must lie in [0, 1)");
    if (strategy != "ceg") parse_baseline(strategy);
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double threshold = 0.0;
  std::size_t reliable = 0;
  double pseudo_label_accuracy = std::numeric_limits<double>::quiet_NaN();
  std::size_t labeled = 0;
  std::size_t unlabeled = 0;
  std::vector<SampleId> query_ids;
  std::size_t steps = 0;
  std::size_t consistency_active = 0;
  std::size_t mixed_intra = 0;
  std::size_t mixed_inter = 0;
  double loss_ce = 0.0;
  double loss_ac = 0.0;
  double loss_eg = 0.0;
  double loss_ss = 0.0;
  double discriminator_loss = std::numeric_limits<double>::quiet_NaN();
  double validation_accuracy = std::numeric_limits<double>::quiet_NaN();
  double target_accuracy = 0.0;
};

struct RunReport {
  std::string variant;
  std::string strategy;
  TrainingLoss training_loss = TrainingLoss::SemiSupervised;
  std::vector<std::string> disabled;
  std::uint64_t seed = 0;
  std::size_t budget = 0;
  std::size_t initial_budget = 0;
  std::size_t budget_spent = 0;
  std::vector<EpochRecord> epochs;
  std::vector<QueryRecord> queries;
  std::vector<std::string> notes;
  double final_target_accuracy = 0.0;
  double wall_clock_seconds = 0.0;
};

/// Fraction of samples whose argmax prediction (lowest index on ties) equals
/// the hidden class.
inline double evaluate(const Classifier& g, std::span<const Sample> samples) {
  if (samples.empty()) throw Error(ErrorKind::Evaluation, "evaluation on an empty sample list");
  std::size_t correct = 0;
  for (const auto& s : samples) {
    if (argmax(predict_class(g, s.features)) == s.hidden_class) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

namespace detail {

inline nlohmann::ordered_json number_or_null(double v) {
  if (std::isnan(v)) return nullptr;
  return v;
}

/// Cycles through a shuffled index set, reshuffling at each wrap.
class BatchCycler {
 public:
  BatchCycler(std::size_t n, RngStream rng) : order_(n), rng_(std::move(rng)) {
    std::iota(order_.begin(), order_.end(), 0);
    rng_.shuffle(order_);
  }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    if (order_.empty()) return out;
    count = std::min(count, order_.size());
    while (out.size() < count) {
      if (pos_ == order_.size()) {
        rng_.shuffle(order_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  RngStream rng_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Runs the collaborative query/train loop (or a baseline variant of it) on
/// the source samples and evaluates on the held-out target every epoch.
class CollaborativeRun {
 public:
  CollaborativeRun(TrainConfig config, std::span<const Sample> sources, std::span<const Sample> target)
      : cfg_(std::move(config)), sources_(sources), target_(target) {}

  RunReport run();

  const Classifier& classifier() const { return g_; }
  const DomainDiscriminator& discriminator() const { return h_; }
  const PoolState& pool() const { return pool_; }
  const BudgetLedger& ledger() const { return ledger_; }
  const LabelOracle& oracle() const { return *oracle_; }

 private:
  std::vector<const Sample*> unlabeled_samples() const {
    std::vector<const Sample*> out;
    out.reserve(pool_.num_unlabeled());
    for (SampleId id : pool_.unlabeled()) out.push_back(by_id_.at(id));
    return out;
  }

  std::vector<KnownSample> labeled_samples() const {
    std::vector<KnownSample> out;
    out.reserve(pool_.num_labeled());
    for (const auto& [id, cls] : pool_.labeled()) out.push_back({by_id_.at(id), cls});
    return out;
  }

  std::vector<SampleId> select(std::size_t epoch, std::size_t quota, const CentroidSet& centroids, RunReport& report);
  void train_epoch(std::size_t epoch, const CentroidSet& centroids, EpochRecord& rec);

  TrainConfig cfg_;
  std::span<const Sample> sources_;
  std::span<const Sample> target_;
  std::unordered_map<SampleId, const Sample*> by_id_;
  std::size_t num_domains_ = 0;
  std::size_t num_classes_ = 0;
  Classifier g_;
  DomainDiscriminator h_;
  PoolState pool_;
  BudgetLedger ledger_;
  std::optional<LabelOracle> oracle_;
  FeatureAugmentation aug_;
  std::optional<ThresholdSchedule> schedule_;
};

inline std::vector<SampleId> CollaborativeRun::select(std::size_t epoch, std::size_t quota, const CentroidSet& centroids,
                                                      RunReport& report) {
  const auto candidates = unlabeled_samples();
  RngStream query_rng(cfg_.seed, "query/" + std::to_string(epoch));
  QueryRecord record;
  record.epoch = epoch;
  std::vector<SampleId> ids;
  if (cfg_.strategy == "ceg") {
    const FusionWeights w{cfg_.enabled(Component::Uncertainty) ? 1.0 : 0.0,
                          cfg_.enabled(Component::Representativeness) ? cfg_.gamma1 : 0.0,
                          cfg_.enabled(Component::Diversity) ? cfg_.gamma2 : 0.0};
    if (w.uncertainty == 0.0 && w.representativeness == 0.0 && w.diversity == 0.0) {
      report.notes.push_back("epoch " + std::to_string(epoch) + ": all query scores disabled, uniform selection");
      ids = baseline_select(BaselineStrategy::Uniform, g_, candidates, {}, quota, query_rng);
    } else {
      QueryScores scores = score_candidates(g_, h_, centroids, candidates);
      fuse_ranks(scores, w);
      ids = select_query_batch(scores, quota, ledger_.remaining());
      std::unordered_map<SampleId, std::size_t> pos;
      for (std::size_t i = 0; i < scores.size(); ++i) pos[scores.ids[i]] = i;
      for (SampleId id : ids) {
        const std::size_t i = pos.at(id);
        record.scores.push_back({id, scores.uncertainty[i], scores.representativeness[i], scores.diversity[i], scores.fused[i]});
      }
    }
  } else {
    std::vector<const Sample*> labeled;
    for (const auto& ks : labeled_samples()) labeled.push_back(ks.sample);
    ids = baseline_select(parse_baseline(cfg_.strategy), g_, candidates, labeled, quota, query_rng);
  }
  query_oracle(pool_, ids, ledger_, *oracle_);
  record.ids = ids;
  record.spent = ledger_.spent;
  report.queries.push_back(record);
  return ids;
}

inline void CollaborativeRun::train_epoch(std::size_t epoch, const CentroidSet& centroids, EpochRecord& rec) {
  const bool semi = cfg_.training_loss == TrainingLoss::SemiSupervised;
  LossWeights weights{cfg_.delta, cfg_.tau, semi && cfg_.enabled(Component::Consistency),
                      semi && cfg_.enabled(Component::Expansion)};

  // Labeled split: a diagnostic validation slice never used for training.
  std::vector<KnownSample> labeled = labeled_samples();
  std::vector<KnownSample> validation;
  {
    RngStream vrng(cfg_.seed, "validation/" + std::to_string(epoch));
    vrng.shuffle(labeled);
    const std::size_t n_val = static_cast<std::size_t>(std::floor(cfg_.validation_fraction * static_cast<double>(labeled.size())));
    validation.assign(labeled.end() - static_cast<std::ptrdiff_t>(n_val), labeled.end());
    labeled.resize(labeled.size() - n_val);
  }
  const auto unlabeled = unlabeled_samples();

  rec.threshold = cfg_.enabled(Component::DynamicThreshold) ? schedule_->current(epoch - 1) : cfg_.threshold_final;
  std::vector<ReliableSample> reliable;
  if (weights.use_eg && !centroids.empty() && !unlabeled.empty()) {
    reliable = build_reliable_set(g_, centroids, unlabeled, rec.threshold);
  }
  rec.reliable = reliable.size();
  if (!reliable.empty()) {
    std::size_t correct = 0;
    for (const auto& r : reliable) correct += r.pseudo_class == r.sample->hidden_class ? 1 : 0;
    rec.pseudo_label_accuracy = static_cast<double>(correct) / static_cast<double>(reliable.size());
  }
  const bool intra_ok = cfg_.enabled(Component::MixIntra) && mix_mode_available(reliable, MixMode::Intra);
  const bool inter_ok = cfg_.enabled(Component::MixInter) && mix_mode_available(reliable, MixMode::Inter);

  const std::size_t bs = cfg_.batch_size;
  const std::size_t pass = std::max(labeled.size(), unlabeled.size());
  const std::size_t steps = (pass + bs - 1) / bs;
  detail::BatchCycler labeled_cycle(labeled.size(), RngStream(cfg_.seed, "train/labeled/" + std::to_string(epoch)));
  detail::BatchCycler unlabeled_cycle(unlabeled.size(), RngStream(cfg_.seed, "train/unlabeled/" + std::to_string(epoch)));
  RngStream aug_rng(cfg_.seed, "augment/" + std::to_string(epoch));
  RngStream mix_rng(cfg_.seed, "mix/" + std::to_string(epoch));

  for (std::size_t step = 0; step < steps; ++step) {
    SemiSupervisedBatch batch;
    for (std::size_t i : labeled_cycle.next(bs)) batch.labeled.push_back(labeled[i]);
    if (weights.use_ac) {
      std::vector<const Sample*> ub;
      for (std::size_t i : unlabeled_cycle.next(bs)) ub.push_back(unlabeled[i]);
      batch.consistency = build_consistency_batch(g_, ub, weights.tau, aug_, aug_rng);
      for (const auto& e : batch.consistency) rec.consistency_active += e.active ? 1 : 0;
    }
    if (weights.use_eg && (intra_ok || inter_ok)) {
      const std::size_t m = batch.labeled.empty() ? bs : batch.labeled.size();
      const std::size_t n_intra = intra_ok && inter_ok ? (m + 1) / 2 : (intra_ok ? m : 0);
      for (std::size_t i = 0; i < m; ++i) {
        const MixMode mode = i < n_intra ? MixMode::Intra : MixMode::Inter;
        if (auto mixed = sample_mix_pair(reliable, mode, cfg_.alpha, num_classes_, mix_rng)) {
          batch.mixed.push_back(std::move(*mixed));
          (mode == MixMode::Intra ? rec.mixed_intra : rec.mixed_inter) += 1;
        }
      }
    }
    if (batch.labeled.empty() && batch.consistency.empty() && batch.mixed.empty()) continue;
    const SemiSupervisedLoss loss = loss_ss(g_, batch, weights);
    sgd_step(g_.net, loss.grads, cfg_.lr_feature, cfg_.lr_head);
    rec.loss_ce += loss.ce;
    rec.loss_ac += loss.ac;
    rec.loss_eg += loss.eg;
    rec.loss_ss += loss.total;
    ++rec.steps;
  }
  if (rec.steps > 0) {
    const double n = static_cast<double>(rec.steps);
    rec.loss_ce /= n;
    rec.loss_ac /= n;
    rec.loss_eg /= n;
    rec.loss_ss /= n;
  }
  if (!validation.empty()) {
    std::size_t correct = 0;
    for (const auto& v : validation) correct += argmax(predict_class(g_, v.sample->features)) == v.label ? 1 : 0;
    rec.validation_accuracy = static_cast<double>(correct) / static_cast<double>(validation.size());
  }
}

inline RunReport CollaborativeRun::run() {
  const auto started = std::chrono::steady_clock::now();
  cfg_.validate(sources_.size());
  if (target_.empty()) throw Error(ErrorKind::Configuration, "empty target domain");

  std::set<std::size_t> domains;
  std::size_t max_class = 0;
  for (const auto& s : sources_) {
    if (!by_id_.emplace(s.id, &s).second) throw Error(ErrorKind::Configuration, "duplicate sample id " + std::to_string(s.id));
    domains.insert(s.domain);
    max_class = std::max(max_class, s.hidden_class);
  }
  num_domains_ = domains.size();
  if (num_domains_ < 2) throw Error(ErrorKind::Configuration, "at least two source domains required");
  if (*domains.rbegin() != num_domains_ - 1) throw Error(ErrorKind::Configuration, "source domains must be numbered 0..K-1");
  num_classes_ = cfg_.num_classes != 0 ? cfg_.num_classes : max_class + 1;
  if (num_classes_ < 2) throw Error(ErrorKind::Configuration, "at least two classes required");

  const std::size_t dim = sources_.front().features.size();
  g_.net = init_mlp({dim, cfg_.hidden_width, num_classes_}, splitmix64(cfg_.seed ^ 0x1111));
  h_.net = init_mlp({dim, cfg_.hidden_width, num_domains_}, splitmix64(cfg_.seed ^ 0x2222));
  ledger_ = BudgetLedger::make(cfg_.budget, cfg_.resolved_initial_budget());
  oracle_.emplace(sources_);
  RngStream init_rng(cfg_.seed, "pool-init");
  pool_ = init_labeled_pool(sources_, ledger_, *oracle_, init_rng);

  std::vector<const Sample*> all_sources;
  for (const auto& s : sources_) all_sources.push_back(&s);
  aug_ = FeatureAugmentation{cfg_.sigma_weak, cfg_.sigma_strong, cfg_.mask_prob, feature_std(all_sources)};
  schedule_ = ThresholdSchedule::from_final(cfg_.threshold_final, cfg_.learn_epochs - 1);

  RunReport report;
  report.strategy = cfg_.strategy;
  report.training_loss = cfg_.training_loss;
  for (Component c : cfg_.disabled) report.disabled.push_back(to_string(c));
  report.seed = cfg_.seed;
  report.budget = ledger_.total;
  report.initial_budget = ledger_.initial;

  const std::vector<std::size_t> quotas = round_quotas(ledger_.total - ledger_.initial, cfg_.learn_epochs - cfg_.pretrain_epochs);
  const DiscriminatorTraining disc_cfg{cfg_.discriminator_epochs, cfg_.batch_size, cfg_.lr_feature, cfg_.lr_head};

  for (std::size_t n = 1; n <= cfg_.learn_epochs; ++n) {
    EpochRecord rec;
    rec.epoch = n;
    const auto labeled = labeled_samples();
    const CentroidSet centroids = labeled.empty() ? CentroidSet{} : compute_centroids(g_, labeled);

    if (n > cfg_.pretrain_epochs) {
      std::size_t quota = quotas[n - cfg_.pretrain_epochs - 1];
      quota = std::min({quota, pool_.num_unlabeled(), ledger_.remaining()});
      if (quota > 0) rec.query_ids = select(n, quota, centroids, report);
    }

    const auto unlabeled = unlabeled_samples();
    if (!unlabeled.empty()) {
      if (cfg_.retrain_discriminator) h_.net = init_mlp(h_.net.dims, splitmix64(cfg_.seed ^ 0x2222 ^ n));
      RngStream disc_rng(cfg_.seed, "discriminator/" + std::to_string(n));
      rec.discriminator_loss = train_domain_discriminator(h_, unlabeled, disc_cfg, disc_rng).loss_after;
    }

    train_epoch(n, centroids, rec);
    rec.labeled = pool_.num_labeled();
    rec.unlabeled = pool_.num_unlabeled();
    rec.target_accuracy = evaluate(g_, target_);
    report.epochs.push_back(std::move(rec));
  }

  if (ledger_.spent > ledger_.total) throw Error(ErrorKind::Budget, "budget overrun");
  report.budget_spent = ledger_.spent;
  report.final_target_accuracy = report.epochs.back().target_accuracy;
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

inline RunReport run_ceg(TrainConfig config, std::span<const Sample> sources, std::span<const Sample> target) {
  config.strategy = "ceg";
  config.training_loss = TrainingLoss::SemiSupervised;
  RunReport r = CollaborativeRun(config, sources, target).run();
  r.variant = config.disabled.empty() ? "ceg" : "ceg-ablation";
  return r;
}

inline RunReport run_baseline(TrainConfig config, std::span<const Sample> sources, std::span<const Sample> target) {
  if (config.strategy == "ceg") throw Error(ErrorKind::Configuration, "baseline run needs a baseline strategy");
  parse_baseline(config.strategy);
  RunReport r = CollaborativeRun(config, sources, target).run();
  r.variant = config.strategy + (config.training_loss == TrainingLoss::SupervisedOnly ? "+ce" : "+ss");
  return r;
}

inline RunReport run_ablation(TrainConfig config, std::span<const Sample> sources, std::span<const Sample> target,
                              const std::set<Component>& disable) {
  config.disabled = disable;
  config.strategy = "ceg";
  config.training_loss = TrainingLoss::SemiSupervised;
  RunReport r = CollaborativeRun(config, sources, target).run();
  std::string label = "ceg w/o";
  for (Component c : disable) label += " " + to_string(c);
  r.variant = disable.empty() ? "ceg" : label;
  return r;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const EpochRecord& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["T"] = e.threshold;
  j["reliable"] = e.reliable;
  j["pseudo_label_accuracy"] = detail::number_or_null(e.pseudo_label_accuracy);
  j["labeled"] = e.labeled;
  j["unlabeled"] = e.unlabeled;
  j["query_ids"] = e.query_ids;
  j["steps"] = e.steps;
  j["consistency_active"] = e.consistency_active;
  j["mixed_intra"] = e.mixed_intra;
  j["mixed_inter"] = e.mixed_inter;
  j["L_ce"] = e.loss_ce;
  j["L_ac"] = e.loss_ac;
  j["L_eg"] = e.loss_eg;
  j["L_ss"] = e.loss_ss;
  j["discriminator_loss"] = detail::number_or_null(e.discriminator_loss);
  j["validation_accuracy"] = detail::number_or_null(e.validation_accuracy);
  j["target_accuracy"] = e.target_accuracy;
  return j;
}

/// Wall-clock time is left out unless asked for, so identical runs serialize
/// to identical bytes.
inline nlohmann::ordered_json to_json(const RunReport& r, bool include_timing = false) {
  nlohmann::ordered_json j;
  j["variant"] = r.variant;
  j["strategy"] = r.strategy;
  j["training_loss"] = r.training_loss == TrainingLoss::SemiSupervised ? "L_ss" : "L_ce";
  j["disabled"] = r.disabled;
  j["seed"] = r.seed;
  j["budget"] = r.budget;
  j["initial_budget"] = r.initial_budget;
  j["budget_spent"] = r.budget_spent;
  j["final_target_accuracy"] = r.final_target_accuracy;
  auto epochs = nlohmann::ordered_json::array();
  for (const auto& e : r.epochs) epochs.push_back(to_json(e));
  j["epochs"] = std::move(epochs);
  j["notes"] = r.notes;
  if (include_timing) j["wall_clock_seconds"] = r.wall_clock_seconds;
  return j;
}

/// Per-epoch training log line: {epoch, T, |U|, pseudo-label accuracy, losses}.
inline std::string training_log_line(const EpochRecord& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["T"] = e.threshold;
  j["U"] = e.reliable;
  j["pseudo_label_accuracy"] = detail::number_or_null(e.pseudo_label_accuracy);
  j["L_ce"] = e.loss_ce;
  j["L_ac"] = e.loss_ac;
  j["L_eg"] = e.loss_eg;
  j["L_ss"] = e.loss_ss;
  return j.dump();
}

}  // namespace ceg

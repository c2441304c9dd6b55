#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "ceg/core_math.hpp"
#include "ceg/error.hpp"
#include "ceg/exploration.hpp"
#include "ceg/model.hpp"
#include "ceg/sample.hpp"

namespace ceg {

// ---------------------------------------------------------------------------
// Expansion threshold
// ---------------------------------------------------------------------------

/// Linear schedule from `initial` to `final` over `total_epochs`. Values are
/// fractions of the unlabeled pool.
struct ThresholdSchedule {
  double initial = 0.25;
  double final = 0.5;
  std::size_t total_epochs = 1;

  static ThresholdSchedule from_final(double final, std::size_t total_epochs) {
    return {final / 2.0, final, total_epochs};
  }

  void validate() const {
    if (!(0.0 <= initial && initial <= final && final <= 1.0)) {
      throw Error(ErrorKind::Schedule, "threshold needs 0 <= initial <= final <= 1");
    }
  }

  double current(std::size_t epoch) const {
    validate();
    if (epoch > total_epochs) {
      throw Error(ErrorKind::Schedule, "epoch " + std::to_string(epoch) + " beyond schedule of " +
                                           std::to_string(total_epochs));
    }
    if (total_epochs == 0) return final;
    if (epoch == total_epochs) return final;
    return initial + (final - initial) * static_cast<double>(epoch) / static_cast<double>(total_epochs);
  }
};

// ---------------------------------------------------------------------------
// Reliable set
// ---------------------------------------------------------------------------

struct ReliableSample {
  const Sample* sample = nullptr;
  std::size_t pseudo_class = 0;
  double distance = 0.0;
};

inline std::size_t fraction_count(double fraction, std::size_t n) {
  if (!(fraction >= 0.0) || fraction > 1.0) {
    throw Error(ErrorKind::Schedule, "threshold fraction must lie in [0, 1], got " + format_double17(fraction));
  }
  return std::min(n, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9)));
}

/// The floor(fraction * N) unlabeled samples closest (in feature space) to
/// their nearest centroid, pseudo-labeled with that centroid's class. Ordered
/// by (distance, id).
inline std::vector<ReliableSample> build_reliable_set(const Classifier& g, const CentroidSet& centroids,
                                                      std::span<const Sample* const> unlabeled, double fraction) {
  if (centroids.empty()) throw Error(ErrorKind::EmptyKnowledge, "reliable set needs at least one centroid");
  const std::size_t keep = fraction_count(fraction, unlabeled.size());
  std::vector<ReliableSample> all;
  all.reserve(unlabeled.size());
  for (const Sample* s : unlabeled) {
    const NearestCentroid nc = nearest_centroid(centroids, features(g, s->features));
    all.push_back({s, nc.cell.second, nc.distance});
  }
  std::sort(all.begin(), all.end(), [](const ReliableSample& a, const ReliableSample& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.sample->id < b.sample->id;
  });
  all.resize(keep);
  return all;
}

// ---------------------------------------------------------------------------
// MixUp
// ---------------------------------------------------------------------------

enum class MixMode { Intra, Inter };

struct MixedSample {
  Vec features;
  Vec soft_label;
  double lambda = 1.0;
  std::size_t first_domain = 0;
  std::size_t second_domain = 0;
};

/// lambda * a + (1 - lambda) * b on both features and one-hot labels.
inline MixedSample mix_pair(const ReliableSample& a, const ReliableSample& b, double lambda, std::size_t num_classes) {
  if (a.sample->features.size() != b.sample->features.size()) throw Error(ErrorKind::Shape, "mixing vectors of different length");
  MixedSample m;
  m.lambda = lambda;
  m.first_domain = a.sample->domain;
  m.second_domain = b.sample->domain;
  m.features.resize(a.sample->features.size());
  for (std::size_t i = 0; i < m.features.size(); ++i) {
    m.features[i] = lambda * a.sample->features[i] + (1.0 - lambda) * b.sample->features[i];
  }
  m.soft_label.assign(num_classes, 0.0);
  m.soft_label.at(a.pseudo_class) += lambda;
  m.soft_label.at(b.pseudo_class) += 1.0 - lambda;
  return m;
}

/// Reliable samples grouped by domain (domains in ascending order).
inline std::map<std::size_t, std::vector<const ReliableSample*>> group_by_domain(std::span<const ReliableSample> set) {
  std::map<std::size_t, std::vector<const ReliableSample*>> groups;
  for (const auto& r : set) groups[r.sample->domain].push_back(&r);
  return groups;
}

inline bool mix_mode_available(std::span<const ReliableSample> set, MixMode mode) {
  const auto groups = group_by_domain(set);
  if (mode == MixMode::Intra) {
    return std::any_of(groups.begin(), groups.end(), [](const auto& g) { return g.second.size() >= 2; });
  }
  return groups.size() >= 2;
}

/// Draws one mixed pair. Intra: a domain uniformly among those with two or
/// more reliable samples, then two distinct members. Inter: an ordered pair
/// of distinct domains, then one member of each. Returns nullopt if the mode
/// has no eligible pair.
inline std::optional<MixedSample> sample_mix_pair(std::span<const ReliableSample> set, MixMode mode, double alpha,
                                                  std::size_t num_classes, RngStream& rng) {
  const auto groups = group_by_domain(set);
  std::vector<const std::vector<const ReliableSample*>*> eligible;
  for (const auto& [domain, members] : groups) {
    if (mode == MixMode::Inter || members.size() >= 2) eligible.push_back(&members);
  }
  if (mode == MixMode::Intra && eligible.empty()) return std::nullopt;
  if (mode == MixMode::Inter && eligible.size() < 2) return std::nullopt;

  const double lambda = sample_beta(alpha, rng);
  if (mode == MixMode::Intra) {
    const auto& members = *eligible[rng.index(eligible.size())];
    const std::size_t i = rng.index(members.size());
    std::size_t j = rng.index(members.size() - 1);
    if (j >= i) ++j;
    return mix_pair(*members[i], *members[j], lambda, num_classes);
  }
  const std::size_t m = rng.index(eligible.size());
  std::size_t n = rng.index(eligible.size() - 1);
  if (n >= m) ++n;
  const auto& first = *eligible[m];
  const auto& second = *eligible[n];
  return mix_pair(*first[rng.index(first.size())], *second[rng.index(second.size())], lambda, num_classes);
}

// ---------------------------------------------------------------------------
// Feature-space augmentation
// ---------------------------------------------------------------------------

template <class A>
concept Augmenter = requires(const A& a, std::span<const double> x, RngStream& rng) {
  { a.weak(x, rng) } -> std::convertible_to<Vec>;
  { a.strong(x, rng) } -> std::convertible_to<Vec>;
};

/// Weak view: Gaussian jitter scaled per dimension. Strong view: larger jitter
/// followed by independent coordinate dropout.
struct FeatureAugmentation {
  double sigma_weak = 0.05;
  double sigma_strong = 0.2;
  double mask_prob = 0.3;
  Vec dim_scale;  // per-dimension std of the training features

  Vec weak(std::span<const double> x, RngStream& rng) const {
    Vec out(x.begin(), x.end());
    if (sigma_weak == 0.0) return out;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += rng.normal(0.0, sigma_weak * scale(i));
    return out;
  }

  Vec strong(std::span<const double> x, RngStream& rng) const {
    Vec out(x.begin(), x.end());
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (sigma_strong != 0.0) out[i] += rng.normal(0.0, sigma_strong * scale(i));
      if (mask_prob > 0.0 && rng.bernoulli(mask_prob)) out[i] = 0.0;
    }
    return out;
  }

 private:
  double scale(std::size_t i) const { return dim_scale.empty() ? 1.0 : dim_scale.at(i); }
};

/// Per-dimension population standard deviation.
inline Vec feature_std(std::span<const Sample* const> samples) {
  if (samples.empty()) return {};
  const std::size_t d = samples.front()->features.size();
  Vec mean(d, 0.0), sq(d, 0.0);
  for (const Sample* s : samples) {
    for (std::size_t i = 0; i < d; ++i) mean[i] += s->features[i];
  }
  for (double& m : mean) m /= static_cast<double>(samples.size());
  for (const Sample* s : samples) {
    for (std::size_t i = 0; i < d; ++i) sq[i] += (s->features[i] - mean[i]) * (s->features[i] - mean[i]);
  }
  for (double& v : sq) v = std::sqrt(v / static_cast<double>(samples.size()));
  return sq;
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// One unlabeled sample's contribution to the consistency loss: the strong
/// view supervised by the weak view's argmax when the weak confidence reaches
/// tau. The pseudo-label is fixed (not differentiated through).
struct ConsistencyEntry {
  Vec strong_view;
  std::size_t pseudo_class = 0;
  double confidence = 0.0;
  bool active = false;
};

template <Augmenter Aug>
std::vector<ConsistencyEntry> build_consistency_batch(const Classifier& g, std::span<const Sample* const> unlabeled,
                                                      double tau, const Aug& aug, RngStream& rng) {
  std::vector<ConsistencyEntry> out;
  out.reserve(unlabeled.size());
  for (const Sample* s : unlabeled) {
    const Vec weak = aug.weak(s->features, rng);
    const Vec strong = aug.strong(s->features, rng);
    const Vec p = predict_class(g, weak);
    const std::size_t q = argmax(p);
    out.push_back({strong, q, p[q], p[q] >= tau});
  }
  return out;
}

inline std::vector<WeightedExample> ce_examples(std::span<const KnownSample> labeled, std::size_t num_classes, double scale = 1.0) {
  std::vector<WeightedExample> out;
  if (labeled.empty()) return out;
  const double w = scale / static_cast<double>(labeled.size());
  for (const auto& ks : labeled) out.push_back({ks.sample->features, one_hot(ks.label, num_classes), w});
  return out;
}

inline std::vector<WeightedExample> eg_examples(std::span<const MixedSample> mixed, double scale = 1.0) {
  std::vector<WeightedExample> out;
  if (mixed.empty()) return out;
  const double w = scale / static_cast<double>(mixed.size());
  for (const auto& m : mixed) out.push_back({m.features, m.soft_label, w});
  return out;
}

/// Inactive entries keep weight 0 but still count in the batch mean.
inline std::vector<WeightedExample> ac_examples(std::span<const ConsistencyEntry> batch, std::size_t num_classes,
                                                double scale = 1.0) {
  std::vector<WeightedExample> out;
  if (batch.empty()) return out;
  const double w = scale / static_cast<double>(batch.size());
  for (const auto& e : batch) out.push_back({e.strong_view, one_hot(e.pseudo_class, num_classes), e.active ? w : 0.0});
  return out;
}

/// Mean cross-entropy on revealed labels.
inline LossAndGradients loss_ce(const Classifier& g, std::span<const KnownSample> labeled) {
  if (labeled.empty()) throw Error(ErrorKind::EmptyBatch, "classification loss over an empty labeled batch");
  return weighted_loss_gradients(g.net, ce_examples(labeled, g.net.dims.output));
}

/// Mean soft-target cross-entropy over mixed samples; 0 for an empty batch.
inline LossAndGradients loss_eg(const Classifier& g, std::span<const MixedSample> mixed) {
  return weighted_loss_gradients(g.net, eg_examples(mixed));
}

inline LossAndGradients loss_ac(const Classifier& g, std::span<const ConsistencyEntry> batch) {
  return weighted_loss_gradients(g.net, ac_examples(batch, g.net.dims.output));
}

struct LossWeights {
  double delta = 0.3;
  double tau = 0.95;
  bool use_ac = true;
  bool use_eg = true;
};

struct SemiSupervisedBatch {
  std::vector<KnownSample> labeled;
  std::vector<ConsistencyEntry> consistency;
  std::vector<MixedSample> mixed;
};

struct SemiSupervisedLoss {
  double ce = 0.0;
  double ac = 0.0;
  double eg = 0.0;
  double total = 0.0;
  Gradients grads;
};

/// L_ss = L_ce + L_ac + delta * L_eg with the matching gradient. Empty
/// component batches contribute 0.
inline SemiSupervisedLoss loss_ss(const Classifier& g, const SemiSupervisedBatch& batch, const LossWeights& w) {
  const std::size_t h = g.net.dims.output;
  SemiSupervisedLoss out;
  out.grads = Gradients::zeros(g.net.dims);
  if (!batch.labeled.empty()) {
    const auto lg = weighted_loss_gradients(g.net, ce_examples(batch.labeled, h));
    out.ce = lg.loss;
    out.grads.add_scaled(lg.grads, 1.0);
  }
  if (w.use_ac && !batch.consistency.empty()) {
    const auto lg = weighted_loss_gradients(g.net, ac_examples(batch.consistency, h));
    out.ac = lg.loss;
    out.grads.add_scaled(lg.grads, 1.0);
  }
  if (w.use_eg && !batch.mixed.empty()) {
    const auto lg = weighted_loss_gradients(g.net, eg_examples(batch.mixed));
    out.eg = lg.loss;
    out.grads.add_scaled(lg.grads, w.delta);
  }
  out.total = out.ce + (w.use_ac ? out.ac : 0.0) + (w.use_eg ? w.delta * out.eg : 0.0);
  return out;
}

}  // namespace ceg

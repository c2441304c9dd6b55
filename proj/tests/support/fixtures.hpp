#pragma once

// Random instances and brute-force checks shared by the unit tests and the
// acceptance binary. The reference side only uses the naive routines in
// oracles.hpp.

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ceg/exploration.hpp"
#include "ceg/generalization.hpp"
#include "support/oracles.hpp"

namespace ceg::fixture {

// ---------------------------------------------------------------------------
// Loss gradients
// ---------------------------------------------------------------------------

struct GradientInstance {
  Classifier g;
  std::vector<Sample> samples;  // backing store for batch.labeled
  SemiSupervisedBatch batch;
  double delta = 0.3;
};

inline double min_abs_preactivation(const MlpParams& m, const Vec& x) {
  double worst = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < m.dims.hidden; ++j) {
    double s = m.b1[j];
    for (std::size_t i = 0; i < m.dims.input; ++i) s += m.w1.data[j * m.dims.input + i] * x[i];
    worst = std::min(worst, std::abs(s));
  }
  return worst;
}

/// A random network and batch. Instances with an input within `kink_margin`
/// of a ReLU kink are redrawn: central differences straddling the kink do
/// not estimate the one-sided derivative.
inline std::unique_ptr<GradientInstance> make_gradient_instance(RngStream& rng, MlpDims dims = {5, 8, 3},
                                                                std::size_t batch = 4, double kink_margin = 1e-3) {
  for (;;) {
    auto inst = std::make_unique<GradientInstance>();
    inst->g.net = oracle::random_mlp(dims, rng, 1.0);
    inst->delta = rng.uniform(0.1, 1.0);
    inst->samples.reserve(batch);
    std::vector<Vec> inputs;
    for (std::size_t i = 0; i < batch; ++i) {
      Sample s{static_cast<SampleId>(i), oracle::random_vec(dims.input, rng, -2, 2), 0, rng.index(dims.output)};
      inputs.push_back(s.features);
      inst->samples.push_back(std::move(s));
    }
    for (const auto& s : inst->samples) inst->batch.labeled.push_back({&s, s.hidden_class});
    for (std::size_t i = 0; i < batch; ++i) {
      ConsistencyEntry e;
      e.strong_view = oracle::random_vec(dims.input, rng, -2, 2);
      e.pseudo_class = rng.index(dims.output);
      e.confidence = rng.uniform();
      e.active = i == 0 || rng.bernoulli(0.6);
      inputs.push_back(e.strong_view);
      inst->batch.consistency.push_back(std::move(e));
    }
    for (std::size_t i = 0; i < batch; ++i) {
      MixedSample m;
      m.features = oracle::random_vec(dims.input, rng, -2, 2);
      m.lambda = rng.uniform();
      m.soft_label.assign(dims.output, 0.0);
      m.soft_label[rng.index(dims.output)] += m.lambda;
      m.soft_label[rng.index(dims.output)] += 1.0 - m.lambda;
      inputs.push_back(m.features);
      inst->batch.mixed.push_back(std::move(m));
    }
    bool clear = true;
    for (const auto& x : inputs) clear = clear && min_abs_preactivation(inst->g.net, x) > kink_margin;
    if (clear) return inst;
  }
}

inline double naive_ce_term(const MlpParams& m, const GradientInstance& inst) {
  double l = 0.0;
  for (const auto& ks : inst.batch.labeled) {
    l += oracle::naive_ce(oracle::naive_probs(m, ks.sample->features), one_hot(ks.label, m.dims.output));
  }
  return l / static_cast<double>(inst.batch.labeled.size());
}

inline double naive_ac_term(const MlpParams& m, const GradientInstance& inst) {
  double l = 0.0;
  for (const auto& e : inst.batch.consistency) {
    if (e.active) l += oracle::naive_ce(oracle::naive_probs(m, e.strong_view), one_hot(e.pseudo_class, m.dims.output));
  }
  return l / static_cast<double>(inst.batch.consistency.size());
}

inline double naive_eg_term(const MlpParams& m, const GradientInstance& inst) {
  double l = 0.0;
  for (const auto& x : inst.batch.mixed) l += oracle::naive_ce(oracle::naive_probs(m, x.features), x.soft_label);
  return l / static_cast<double>(inst.batch.mixed.size());
}

struct GradientCheck {
  double ce = 0.0;
  double eg = 0.0;
  double ac = 0.0;
  double ss = 0.0;
  double loss_mismatch = 0.0;  // |analytic loss - naive loss|, worst of the four

  double worst() const { return std::max({ce, eg, ac, ss}); }
};

/// Worst relative error between analytic and finite-difference gradients for
/// each loss term.
inline GradientCheck check_gradients(const GradientInstance& inst, double step = 1e-5) {
  const auto& g = inst.g;
  GradientCheck out;
  auto compare = [&](const LossAndGradients& lg, const std::function<double(const MlpParams&)>& naive) {
    out.loss_mismatch = std::max(out.loss_mismatch, std::abs(lg.loss - naive(g.net)));
    return oracle::max_relative_error(lg.grads.flatten(), oracle::finite_difference(g.net, naive, step));
  };
  out.ce = compare(loss_ce(g, inst.batch.labeled), [&](const MlpParams& m) { return naive_ce_term(m, inst); });
  out.eg = compare(loss_eg(g, inst.batch.mixed), [&](const MlpParams& m) { return naive_eg_term(m, inst); });
  out.ac = compare(loss_ac(g, inst.batch.consistency), [&](const MlpParams& m) { return naive_ac_term(m, inst); });

  const LossWeights w{inst.delta, 0.95, true, true};
  const auto ss = loss_ss(g, inst.batch, w);
  auto naive_ss = [&](const MlpParams& m) {
    return naive_ce_term(m, inst) + naive_ac_term(m, inst) + inst.delta * naive_eg_term(m, inst);
  };
  out.loss_mismatch = std::max(out.loss_mismatch, std::abs(ss.total - naive_ss(g.net)));
  out.ss = oracle::max_relative_error(ss.grads.flatten(), oracle::finite_difference(g.net, naive_ss, step));
  return out;
}

// ---------------------------------------------------------------------------
// Query scores
// ---------------------------------------------------------------------------

/// Random networks, a labeled pool and an unlabeled candidate set.
struct ScoreState {
  Classifier g;
  DomainDiscriminator h;
  std::vector<Sample> samples;
  std::vector<KnownSample> labeled;
  std::vector<const Sample*> unlabeled;
  std::size_t quota = 0;
};

inline std::unique_ptr<ScoreState> make_score_state(RngStream& rng, std::size_t max_unlabeled = 50) {
  auto st = std::make_unique<ScoreState>();
  const std::size_t d = 2 + rng.index(6);
  const std::size_t hidden = 2 + rng.index(10);
  const std::size_t classes = 2 + rng.index(4);
  const std::size_t domains = 2 + rng.index(3);
  st->g.net = oracle::random_mlp({d, hidden, classes}, rng, 1.5);
  st->h.net = oracle::random_mlp({d, hidden, domains}, rng, 1.5);
  const std::size_t n_lab = 1 + rng.index(20);
  const std::size_t n_unl = 1 + rng.index(max_unlabeled);
  st->samples.reserve(n_lab + n_unl);
  // Ids are shuffled so id order and insertion order disagree.
  std::vector<SampleId> ids(n_lab + n_unl);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<SampleId>(3 * i + 7);
  rng.shuffle(ids);
  for (std::size_t i = 0; i < n_lab + n_unl; ++i) {
    st->samples.push_back({ids[i], oracle::random_vec(d, rng, -2, 2), rng.index(domains), rng.index(classes)});
  }
  for (std::size_t i = 0; i < n_lab; ++i) st->labeled.push_back({&st->samples[i], st->samples[i].hidden_class});
  for (std::size_t i = n_lab; i < n_lab + n_unl; ++i) st->unlabeled.push_back(&st->samples[i]);
  st->quota = rng.index(n_unl + 1);
  return st;
}

/// Group-by-average of naive hidden activations.
inline std::map<CellKey, Vec> naive_centroids(const MlpParams& g, const std::vector<KnownSample>& labeled) {
  std::map<CellKey, Vec> sum;
  std::map<CellKey, double> count;
  for (const auto& ks : labeled) {
    const auto f = oracle::naive_hidden(g, ks.sample->features);
    auto& acc = sum[{ks.sample->domain, ks.label}];
    if (acc.empty()) acc.assign(f.size(), 0.0);
    for (std::size_t i = 0; i < f.size(); ++i) acc[i] += f[i];
    count[{ks.sample->domain, ks.label}] += 1.0;
  }
  for (auto& [k, v] : sum) {
    for (double& x : v) x /= count[k];
  }
  return sum;
}

/// Exhaustive nearest centroid: every centroid visited, strict improvement
/// only, so the first (smallest key) wins ties.
inline std::pair<CellKey, double> naive_nearest(const std::map<CellKey, Vec>& centroids, const Vec& f) {
  std::pair<CellKey, double> best{{0, 0}, std::numeric_limits<double>::infinity()};
  for (const auto& [k, mu] : centroids) {
    const double d = oracle::naive_cosine_distance(f, mu);
    if (d < best.second) best = {k, d};
  }
  return best;
}

struct NaiveScores {
  std::vector<long long> ids;
  std::vector<double> su, sr, sd;
  std::vector<std::size_t> ru, rr, rd;
  std::vector<double> fused;
  std::vector<long long> selected;
};

inline NaiveScores naive_scores(const ScoreState& st, double w_u, double g1, double g2) {
  NaiveScores n;
  const auto centroids = naive_centroids(st.g.net, st.labeled);
  for (const Sample* s : st.unlabeled) {
    n.ids.push_back(s->id);
    auto p = oracle::naive_probs(st.g.net, s->features);
    std::sort(p.begin(), p.end(), std::greater<>());
    n.su.push_back(1.0 - (p[0] - p[1]));
    const auto q = oracle::naive_probs(st.h.net, s->features);
    n.sr.push_back(*std::max_element(q.begin(), q.end()));
    n.sd.push_back(naive_nearest(centroids, oracle::naive_hidden(st.g.net, s->features)).second);
  }
  n.ru = oracle::brute_rank(n.ids, n.su);
  n.rr = oracle::brute_rank(n.ids, n.sr);
  n.rd = oracle::brute_rank(n.ids, n.sd);
  for (std::size_t i = 0; i < n.ids.size(); ++i) {
    n.fused.push_back(w_u * static_cast<double>(n.ru[i]) + g1 * static_cast<double>(n.rr[i]) +
                      g2 * static_cast<double>(n.rd[i]));
  }
  n.selected = oracle::brute_select_min(n.ids, n.fused, st.quota);
  return n;
}

/// Empty string on agreement, otherwise the first mismatch. Raw scores are
/// checked against the naive recomputation; ranks, R and the batch are then
/// brute-forced from those checked values, since geometric ties (collinear
/// ReLU features, repeated distances) round differently in the two paths.
inline std::string compare_scores(const ScoreState& st, double tol = 1e-12) {
  const FusionWeights w{1.0, 3.0, 1.0};
  const CentroidSet cs = compute_centroids(st.g, st.labeled);
  QueryScores s = score_candidates(st.g, st.h, cs, st.unlabeled);
  fuse_ranks(s, w);
  const auto picked = select_query_batch(s, st.quota, st.quota);
  const NaiveScores n = naive_scores(st, w.uncertainty, w.representativeness, w.diversity);
  if (s.ids.size() != n.ids.size()) return "candidate count";
  for (std::size_t i = 0; i < n.ids.size(); ++i) {
    if (s.ids[i] != n.ids[i]) return "id order";
    if (std::abs(s.uncertainty[i] - n.su[i]) > tol) return "S_u";
    if (std::abs(s.representativeness[i] - n.sr[i]) > tol) return "S_r";
    if (std::abs(s.diversity[i] - n.sd[i]) > tol) return "S_d";
  }
  const auto ru = oracle::brute_rank(n.ids, s.uncertainty);
  const auto rr = oracle::brute_rank(n.ids, s.representativeness);
  const auto rd = oracle::brute_rank(n.ids, s.diversity);
  std::vector<double> fused;
  for (std::size_t i = 0; i < n.ids.size(); ++i) {
    if (s.uncertainty_rank[i] != ru[i]) return "rank S_u";
    if (s.representativeness_rank[i] != rr[i]) return "rank S_r";
    if (s.diversity_rank[i] != rd[i]) return "rank S_d";
    fused.push_back(w.uncertainty * static_cast<double>(ru[i]) + w.representativeness * static_cast<double>(rr[i]) +
                    w.diversity * static_cast<double>(rd[i]));
    if (s.fused[i] != fused[i]) return "fused R";
  }
  if (std::vector<long long>(picked.begin(), picked.end()) != oracle::brute_select_min(n.ids, fused, st.quota)) {
    return "selected batch";
  }
  return {};
}

/// Applies x -> x^3 + x to one raw score stream and reports whether the
/// selected batch changed.
inline bool selection_invariant_under_cubic(const ScoreState& st, int stream) {
  const FusionWeights w{1.0, 3.0, 1.0};
  const CentroidSet cs = compute_centroids(st.g, st.labeled);
  QueryScores base = score_candidates(st.g, st.h, cs, st.unlabeled);
  QueryScores warped = base;
  Vec& v = stream == 0 ? warped.uncertainty : stream == 1 ? warped.representativeness : warped.diversity;
  for (double& x : v) x = x * x * x + x;
  fuse_ranks(base, w);
  fuse_ranks(warped, w);
  return select_query_batch(base, st.quota, st.quota) == select_query_batch(warped, st.quota, st.quota);
}

// ---------------------------------------------------------------------------
// Centroids and reliable set
// ---------------------------------------------------------------------------

/// Empty string on agreement with the group-by-average and exhaustive
/// nearest-centroid references.
inline std::string compare_centroids_and_reliable(const ScoreState& st, std::span<const double> fractions) {
  const CentroidSet cs = compute_centroids(st.g, st.labeled);
  const auto ref = naive_centroids(st.g.net, st.labeled);
  if (cs.centroids.size() != ref.size()) return "centroid cell count";
  for (const auto& [k, mu] : ref) {
    auto it = cs.centroids.find(k);
    if (it == cs.centroids.end()) return "missing cell";
    for (std::size_t i = 0; i < mu.size(); ++i) {
      if (std::abs(it->second[i] - mu[i]) > 1e-9) return "centroid value";
    }
  }
  struct Row {
    long long id;
    double dist;
    std::size_t cls;
  };
  std::vector<Row> rows;
  for (const Sample* s : st.unlabeled) {
    const Vec f = oracle::naive_hidden(st.g.net, s->features);
    const auto nn = naive_nearest(ref, f);
    const auto got = nearest_centroid(cs, features(st.g, s->features));
    if (std::abs(got.distance - nn.second) > 1e-12) return "nearest distance";
    if (got.cell.second != nn.first.second) {
      bool tied = false;
      for (const auto& [k, mu] : ref) {
        tied = tied || (k.second == got.cell.second && std::abs(oracle::naive_cosine_distance(f, mu) - nn.second) <= 1e-12);
      }
      if (!tied) return "nearest class";
    }
    rows.push_back({s->id, got.distance, got.cell.second});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.dist != b.dist ? a.dist < b.dist : a.id < b.id;
  });
  for (double t : fractions) {
    const auto keep = static_cast<std::size_t>(std::floor(t * static_cast<double>(rows.size()) + 1e-9));
    const auto got = build_reliable_set(st.g, cs, st.unlabeled, t);
    if (got.size() != keep) return "reliable size at T=" + std::to_string(t);
    std::map<long long, std::size_t> expected, actual;
    for (std::size_t i = 0; i < keep; ++i) expected[rows[i].id] = rows[i].cls;
    for (const auto& r : got) actual[r.sample->id] = r.pseudo_class;
    if (expected != actual) return "reliable membership or pseudo-label at T=" + std::to_string(t);
  }
  return {};
}

}  // namespace ceg::fixture

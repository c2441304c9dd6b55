#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ceg/core_math.hpp"
#include "ceg/error.hpp"
#include "ceg/model.hpp"
#include "ceg/sample.hpp"

namespace ceg {

// ---------------------------------------------------------------------------
// Per-sample scores
// ---------------------------------------------------------------------------

/// 1 - (top1 - top2) of a class distribution. In [0, 1].
inline double uncertainty_score(std::span<const double> probs) {
  if (probs.size() < 2) throw Error(ErrorKind::Configuration, "uncertainty needs at least two classes");
  double top1 = -1.0, top2 = -1.0;
  for (double p : probs) {
    if (p > top1) {
      top2 = top1;
      top1 = p;
    } else if (p > top2) {
      top2 = p;
    }
  }
  return std::clamp(1.0 - (top1 - top2), 0.0, 1.0);
}

inline double uncertainty_score(const Classifier& g, std::span<const double> x) {
  return uncertainty_score(predict_class(g, x));
}

/// Highest domain probability. In [1/K, 1].
inline double representativeness_score(std::span<const double> domain_probs) {
  if (domain_probs.empty()) throw Error(ErrorKind::Shape, "empty domain prediction");
  return *std::max_element(domain_probs.begin(), domain_probs.end());
}

inline double representativeness_score(const DomainDiscriminator& h, std::span<const double> x) {
  return representativeness_score(predict_domain(h, x));
}

/// -sum p log p.
inline double entropy_score(std::span<const double> probs) {
  double e = 0.0;
  for (double p : probs) {
    if (p > 0.0) e -= p * std::log(p);
  }
  return e;
}

inline double confidence_score(std::span<const double> probs) {
  return 1.0 - *std::max_element(probs.begin(), probs.end());
}

// ---------------------------------------------------------------------------
// Knowledge centroids
// ---------------------------------------------------------------------------

/// A labeled sample together with its revealed class.
struct KnownSample {
  const Sample* sample = nullptr;
  std::size_t label = 0;
};

/// (domain, class) cell key. Map order is lexicographic, which is also the
/// tie-break order for nearest-centroid queries.
using CellKey = std::pair<std::size_t, std::size_t>;

/// Mean feature embedding per (domain, class) cell that has labeled data.
struct CentroidSet {
  std::map<CellKey, Vec> centroids;
  std::map<CellKey, std::size_t> counts;

  bool empty() const { return centroids.empty(); }
  std::size_t size() const { return centroids.size(); }
};

inline CentroidSet compute_centroids(const Classifier& g, std::span<const KnownSample> labeled) {
  if (labeled.empty()) throw Error(ErrorKind::EmptyKnowledge, "no labeled samples to build centroids from");
  CentroidSet out;
  for (const auto& ks : labeled) {
    const Vec f = features(g, ks.sample->features);
    const CellKey key{ks.sample->domain, ks.label};
    auto [it, inserted] = out.centroids.try_emplace(key, Vec(f.size(), 0.0));
    for (std::size_t i = 0; i < f.size(); ++i) it->second[i] += f[i];
    ++out.counts[key];
  }
  for (auto& [key, sum] : out.centroids) {
    const double n = static_cast<double>(out.counts[key]);
    for (double& v : sum) v /= n;
  }
  return out;
}

/// Cosine distance where a zero vector (a fully inactive ReLU layer) sits at
/// distance 1 from everything.
inline double feature_distance(std::span<const double> a, std::span<const double> b) {
  if (norm(a) == 0.0 || norm(b) == 0.0) return 1.0;
  return cosine_distance(a, b);
}

struct NearestCentroid {
  CellKey cell;
  double distance = 0.0;
};

/// Nearest centroid to an embedding; equal distances resolve to the
/// lexicographically smallest (domain, class).
inline NearestCentroid nearest_centroid(const CentroidSet& cs, std::span<const double> embedding) {
  if (cs.empty()) throw Error(ErrorKind::EmptyKnowledge, "empty centroid set");
  NearestCentroid best{cs.centroids.begin()->first, std::numeric_limits<double>::infinity()};
  for (const auto& [key, mu] : cs.centroids) {
    const double d = feature_distance(embedding, mu);
    if (d < best.distance) best = {key, d};
  }
  return best;
}

/// Min cosine distance from F(x) to any centroid. In [0, 2].
inline double diversity_score(const Classifier& g, const CentroidSet& cs, std::span<const double> x) {
  return nearest_centroid(cs, features(g, x)).distance;
}

// ---------------------------------------------------------------------------
// Rank fusion and selection
// ---------------------------------------------------------------------------

/// Ranks 1..n with rank 1 for the highest score; equal scores rank by
/// ascending id.
inline std::vector<std::size_t> rank_descending(std::span<const SampleId> ids, std::span<const double> scores) {
  if (ids.size() != scores.size()) throw Error(ErrorKind::Consistency, "ids and scores differ in length");
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  std::vector<std::size_t> rank(ids.size());
  for (std::size_t pos = 0; pos < order.size(); ++pos) rank[order[pos]] = pos + 1;
  return rank;
}

/// Weights of the three rank terms. The uncertainty weight is 1 in the
/// method; ablations zero individual terms.
struct FusionWeights {
  double uncertainty = 1.0;
  double representativeness = 3.0;  // gamma1
  double diversity = 1.0;           // gamma2
};

struct QueryScores {
  std::vector<SampleId> ids;
  Vec uncertainty;
  Vec representativeness;
  Vec diversity;
  std::vector<std::size_t> uncertainty_rank;
  std::vector<std::size_t> representativeness_rank;
  std::vector<std::size_t> diversity_rank;
  Vec fused;

  std::size_t size() const { return ids.size(); }
};

/// Fills the three rankings and R = w_u S_u' + gamma1 S_r' + gamma2 S_d'.
/// Smaller R is better.
inline void fuse_ranks(QueryScores& s, const FusionWeights& w) {
  const std::size_t n = s.ids.size();
  if (s.uncertainty.size() != n || s.representativeness.size() != n || s.diversity.size() != n) {
    throw Error(ErrorKind::Consistency, "score vectors do not cover the same samples");
  }
  s.uncertainty_rank = rank_descending(s.ids, s.uncertainty);
  s.representativeness_rank = rank_descending(s.ids, s.representativeness);
  s.diversity_rank = rank_descending(s.ids, s.diversity);
  s.fused.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    s.fused[i] = w.uncertainty * static_cast<double>(s.uncertainty_rank[i]) +
                 w.representativeness * static_cast<double>(s.representativeness_rank[i]) +
                 w.diversity * static_cast<double>(s.diversity_rank[i]);
  }
}

/// Raw scores for every candidate. Without centroids the diversity term is 0
/// for all candidates, leaving its ranking to the id tie-break.
inline QueryScores score_candidates(const Classifier& g, const DomainDiscriminator& h, const CentroidSet& centroids,
                                    std::span<const Sample* const> candidates) {
  QueryScores s;
  s.ids.reserve(candidates.size());
  for (const Sample* c : candidates) {
    const ForwardPass f = forward(g.net, c->features);
    s.ids.push_back(c->id);
    s.uncertainty.push_back(uncertainty_score(f.probs));
    s.representativeness.push_back(representativeness_score(h, c->features));
    s.diversity.push_back(centroids.empty() ? 0.0 : nearest_centroid(centroids, f.features).distance);
  }
  return s;
}

/// The `quota` ids with smallest key; ties by ascending id. Output is sorted by
/// (key, id).
inline std::vector<SampleId> take_smallest(std::span<const SampleId> ids, std::span<const double> key, std::size_t quota) {
  if (ids.size() != key.size()) throw Error(ErrorKind::Consistency, "ids and keys differ in length");
  if (quota > ids.size()) throw Error(ErrorKind::Budget, "quota exceeds the number of candidates");
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  auto less = [&](std::size_t a, std::size_t b) {
    if (key[a] != key[b]) return key[a] < key[b];
    return ids[a] < ids[b];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(quota), order.end(), less);
  std::vector<SampleId> out;
  out.reserve(quota);
  for (std::size_t i = 0; i < quota; ++i) out.push_back(ids[order[i]]);
  return out;
}

/// Picks the `quota` candidates with smallest fused R.
inline std::vector<SampleId> select_query_batch(const QueryScores& s, std::size_t quota, std::size_t remaining_budget) {
  if (quota > remaining_budget) {
    throw Error(ErrorKind::Budget, "quota " + std::to_string(quota) + " exceeds remaining budget " +
                                       std::to_string(remaining_budget));
  }
  if (s.fused.size() != s.ids.size()) throw Error(ErrorKind::Consistency, "ranks have not been fused");
  return take_smallest(s.ids, s.fused, quota);
}

/// Per-round quotas: `remaining` split over `rounds`, earlier rounds taking
/// the remainder.
inline std::vector<std::size_t> round_quotas(std::size_t remaining, std::size_t rounds) {
  std::vector<std::size_t> q(rounds, 0);
  if (rounds == 0) return q;
  for (std::size_t r = 0; r < rounds; ++r) q[r] = remaining / rounds + (r < remaining % rounds ? 1 : 0);
  return q;
}

/// Optional per-round dump: id,s_u,s_r,s_d,rank_u,rank_r,rank_d,r,selected
inline void write_score_csv(const std::string& path, const QueryScores& s, std::span<const SampleId> selected) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path);
  const std::set<SampleId> chosen(selected.begin(), selected.end());
  out << "id,s_u,s_r,s_d,rank_u,rank_r,rank_d,r,selected\n";
  for (std::size_t i = 0; i < s.size(); ++i) {
    out << s.ids[i] << ',' << format_double17(s.uncertainty[i]) << ',' << format_double17(s.representativeness[i])
        << ',' << format_double17(s.diversity[i]) << ',' << s.uncertainty_rank[i] << ','
        << s.representativeness_rank[i] << ',' << s.diversity_rank[i] << ',' << format_double17(s.fused[i]) << ','
        << (chosen.count(s.ids[i]) ? 1 : 0) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Baseline query strategies
// ---------------------------------------------------------------------------

enum class BaselineStrategy { Uniform, Entropy, Bvsb, Confidence, Coreset };

inline BaselineStrategy parse_baseline(const std::string& name) {
  if (name == "uniform") return BaselineStrategy::Uniform;
  if (name == "entropy") return BaselineStrategy::Entropy;
  if (name == "bvsb") return BaselineStrategy::Bvsb;
  if (name == "confidence") return BaselineStrategy::Confidence;
  if (name == "coreset") return BaselineStrategy::Coreset;
  throw Error(ErrorKind::Configuration, "unknown query strategy '" + name + "'");
}

inline std::string to_string(BaselineStrategy s) {
  switch (s) {
    case BaselineStrategy::Uniform: return "uniform";
    case BaselineStrategy::Entropy: return "entropy";
    case BaselineStrategy::Bvsb: return "bvsb";
    case BaselineStrategy::Confidence: return "confidence";
    case BaselineStrategy::Coreset: return "coreset";
  }
  return "unknown";
}

inline double squared_euclidean(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

/// Greedy k-center (farthest-first) over embeddings. Each pick maximises the
/// distance to the nearest already-covered point, starting from `covered`;
/// ties go to the lowest id. With nothing covered the first pick is the
/// lowest id.
inline std::vector<SampleId> coreset_select(std::span<const SampleId> candidate_ids,
                                            std::span<const Vec> candidate_embeddings,
                                            std::span<const Vec> covered_embeddings, std::size_t quota) {
  if (candidate_ids.size() != candidate_embeddings.size()) {
    throw Error(ErrorKind::Consistency, "candidate ids and embeddings differ in length");
  }
  if (quota > candidate_ids.size()) throw Error(ErrorKind::Budget, "quota exceeds the number of candidates");
  const std::size_t n = candidate_ids.size();
  Vec min_dist(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& c : covered_embeddings) min_dist[i] = std::min(min_dist[i], squared_euclidean(candidate_embeddings[i], c));
  }
  std::vector<bool> taken(n, false);
  std::vector<SampleId> picks;
  for (std::size_t round = 0; round < quota; ++round) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (!best || min_dist[i] > min_dist[*best] ||
          (min_dist[i] == min_dist[*best] && candidate_ids[i] < candidate_ids[*best])) {
        best = i;
      }
    }
    taken[*best] = true;
    picks.push_back(candidate_ids[*best]);
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], squared_euclidean(candidate_embeddings[i], candidate_embeddings[*best]));
    }
  }
  return picks;
}

/// Selection for one of the classic strategies. Score-based strategies take
/// the `quota` highest scores (ties by ascending id).
inline std::vector<SampleId> baseline_select(BaselineStrategy strategy, const Classifier& g,
                                             std::span<const Sample* const> candidates,
                                             std::span<const Sample* const> labeled, std::size_t quota,
                                             RngStream& rng) {
  if (quota > candidates.size()) throw Error(ErrorKind::Budget, "quota exceeds the number of candidates");
  std::vector<SampleId> ids;
  ids.reserve(candidates.size());
  for (const Sample* c : candidates) ids.push_back(c->id);

  if (strategy == BaselineStrategy::Uniform) {
    std::sort(ids.begin(), ids.end());
    rng.shuffle(ids);
    ids.resize(quota);
    return ids;
  }
  if (strategy == BaselineStrategy::Coreset) {
    std::vector<Vec> cand_emb, covered;
    cand_emb.reserve(candidates.size());
    for (const Sample* c : candidates) cand_emb.push_back(features(g, c->features));
    for (const Sample* l : labeled) covered.push_back(features(g, l->features));
    return coreset_select(ids, cand_emb, covered, quota);
  }
  Vec negated;
  negated.reserve(candidates.size());
  for (const Sample* c : candidates) {
    const Vec p = predict_class(g, c->features);
    double score = 0.0;
    switch (strategy) {
      case BaselineStrategy::Entropy: score = entropy_score(p); break;
      case BaselineStrategy::Bvsb: score = uncertainty_score(p); break;
      case BaselineStrategy::Confidence: score = confidence_score(p); break;
      default: break;
    }
    negated.push_back(-score);
  }
  return take_smallest(ids, negated, quota);
}

}  // namespace ceg

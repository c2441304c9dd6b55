#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ceg/core_math.hpp"
#include "ceg/error.hpp"
#include "ceg/sample.hpp"

namespace ceg {

/// Annotation budget in sample counts.
struct BudgetLedger {
  std::size_t total = 0;
  std::size_t initial = 0;
  std::size_t spent = 0;

  std::size_t remaining() const { return total - spent; }

  static BudgetLedger make(std::size_t total, std::size_t initial) {
    if (initial > total) {
      throw Error(ErrorKind::Budget, "initial budget " + std::to_string(initial) + " exceeds total " +
                                         std::to_string(total));
    }
    return {total, initial, 0};
  }

  /// Half the budget, floored.
  static BudgetLedger with_default_initial(std::size_t total) { return make(total, total / 2); }
};

/// Converts a budget fraction of `pool_size` samples to a count (floored).
inline std::size_t budget_from_fraction(double fraction, std::size_t pool_size) {
  if (!(fraction >= 0.0) || fraction > 1.0) {
    throw Error(ErrorKind::Configuration, "budget fraction must lie in [0, 1], got " + format_double17(fraction));
  }
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(pool_size) + 1e-9));
}

/// Simulated annotator. Reveals hidden classes and remembers every id it was
/// asked about, so evaluation can audit that nothing leaked.
class LabelOracle {
 public:
  explicit LabelOracle(std::span<const Sample> samples) {
    for (const auto& s : samples) {
      if (!classes_.emplace(s.id, s.hidden_class).second) {
        throw Error(ErrorKind::Configuration, "duplicate sample id " + std::to_string(s.id));
      }
    }
  }

  bool knows(SampleId id) const { return classes_.count(id) != 0; }

  std::size_t reveal(SampleId id) {
    auto it = classes_.find(id);
    if (it == classes_.end()) throw Error(ErrorKind::Configuration, "oracle has no sample " + std::to_string(id));
    revealed_.insert(id);
    return it->second;
  }

  const std::set<SampleId>& revealed() const { return revealed_; }

 private:
  std::unordered_map<SampleId, std::size_t> classes_;
  std::set<SampleId> revealed_;
};

/// Disjoint labeled / unlabeled id sets. Ordered containers keep every
/// iteration deterministic.
class PoolState {
 public:
  PoolState() = default;
  explicit PoolState(std::set<SampleId> unlabeled) : unlabeled_(std::move(unlabeled)) {}

  const std::map<SampleId, std::size_t>& labeled() const { return labeled_; }
  const std::set<SampleId>& unlabeled() const { return unlabeled_; }
  std::size_t num_labeled() const { return labeled_.size(); }
  std::size_t num_unlabeled() const { return unlabeled_.size(); }
  std::size_t size() const { return labeled_.size() + unlabeled_.size(); }
  bool is_labeled(SampleId id) const { return labeled_.count(id) != 0; }
  bool is_unlabeled(SampleId id) const { return unlabeled_.count(id) != 0; }

  std::vector<SampleId> unlabeled_ids() const { return {unlabeled_.begin(), unlabeled_.end()}; }

 private:
  friend void query_oracle(PoolState&, std::span<const SampleId>, BudgetLedger&, LabelOracle&);

  std::map<SampleId, std::size_t> labeled_;
  std::set<SampleId> unlabeled_;
};

/// Moves `ids` from unlabeled to labeled, revealing their classes. All checks
/// run before any mutation; on error nothing changes.
inline void query_oracle(PoolState& pool, std::span<const SampleId> ids, BudgetLedger& ledger, LabelOracle& oracle) {
  std::set<SampleId> seen;
  for (SampleId id : ids) {
    if (pool.is_labeled(id) || !seen.insert(id).second) {
      throw Error(ErrorKind::DoubleQuery, "sample " + std::to_string(id) + " is already labeled");
    }
    if (!pool.is_unlabeled(id)) throw Error(ErrorKind::Configuration, "sample " + std::to_string(id) + " is not in the pool");
    if (!oracle.knows(id)) throw Error(ErrorKind::Configuration, "oracle has no sample " + std::to_string(id));
  }
  if (ids.size() > ledger.remaining()) {
    throw Error(ErrorKind::Budget, "query of " + std::to_string(ids.size()) + " samples exceeds remaining budget " +
                                       std::to_string(ledger.remaining()));
  }
  for (SampleId id : ids) {
    pool.labeled_.emplace(id, oracle.reveal(id));
    pool.unlabeled_.erase(id);
  }
  ledger.spent += ids.size();
}

/// Uniform draw without replacement of `ledger.initial` ids over all samples,
/// labeled through the oracle. Spends the initial budget.
inline PoolState init_labeled_pool(std::span<const Sample> samples, BudgetLedger& ledger, LabelOracle& oracle,
                                   RngStream& rng) {
  if (ledger.initial > samples.size()) {
    throw Error(ErrorKind::Budget, "initial budget " + std::to_string(ledger.initial) + " exceeds dataset size " +
                                       std::to_string(samples.size()));
  }
  if (ledger.initial > ledger.remaining()) throw Error(ErrorKind::Budget, "initial budget exceeds remaining budget");
  std::set<SampleId> all;
  for (const auto& s : samples) all.insert(s.id);
  PoolState pool(all);
  std::vector<SampleId> ids(all.begin(), all.end());
  rng.shuffle(ids);
  ids.resize(ledger.initial);
  std::sort(ids.begin(), ids.end());
  query_oracle(pool, ids, ledger, oracle);
  return pool;
}

// ---------------------------------------------------------------------------
// Query log (JSON lines)
// ---------------------------------------------------------------------------

struct ScoreSnapshot {
  SampleId id = 0;
  double uncertainty = 0.0;
  double representativeness = 0.0;
  double diversity = 0.0;
  double fused = 0.0;
};

struct QueryRecord {
  std::size_t epoch = 0;
  std::vector<SampleId> ids;
  std::vector<ScoreSnapshot> scores;
  std::size_t spent = 0;
};

/// {"epoch":n,"ids":[...],"scores":[{"id","s_u","s_r","s_d","r"}...],"spent":n}
inline std::string to_json_line(const QueryRecord& r) {
  std::string out = "{\"epoch\":" + std::to_string(r.epoch) + ",\"ids\":[";
  for (std::size_t i = 0; i < r.ids.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(r.ids[i]);
  }
  out += "],\"scores\":[";
  for (std::size_t i = 0; i < r.scores.size(); ++i) {
    const auto& s = r.scores[i];
    if (i) out += ',';
    out += "{\"id\":" + std::to_string(s.id) + ",\"s_u\":" + format_double17(s.uncertainty) +
           ",\"s_r\":" + format_double17(s.representativeness) + ",\"s_d\":" + format_double17(s.diversity) +
           ",\"r\":" + format_double17(s.fused) + "}";
  }
  out += "],\"spent\":" + std::to_string(r.spent) + "}";
  return out;
}

inline void append_query_log(const std::string& path, const QueryRecord& r) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open query log " + path);
  out << to_json_line(r) << '\n';
}

}  // namespace ceg

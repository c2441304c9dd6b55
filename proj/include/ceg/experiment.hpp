#pragma once

#include <algorithm>
#include <cctype>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ceg/datagen.hpp"
#include "ceg/error.hpp"
#include "ceg/pools.hpp"
#include "ceg/trainer.hpp"

namespace ceg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Strategy labels
//   "ceg"                      full method
//   "<baseline>[+ce|+ss]"      classic query strategy; training loss L_ce or L_ss
//   "ceg-wo[A+B]"              ablation with components A, B disabled
// ---------------------------------------------------------------------------

struct StrategySpec {
  std::string label;
  std::string query = "ceg";
  TrainingLoss loss = TrainingLoss::SemiSupervised;
  std::set<Component> disabled;
};

inline std::string ablation_label(const std::set<Component>& disabled) {
  if (disabled.empty()) return "ceg";
  std::string label = "ceg-wo[";
  bool first = true;
  for (Component c : disabled) {
    if (!first) label += '+';
    label += to_string(c);
    first = false;
  }
  return label + "]";
}

inline StrategySpec parse_strategy_label(const std::string& label, TrainingLoss default_baseline_loss) {
  StrategySpec s;
  s.label = label;
  if (label == "ceg") return s;
  if (label.rfind("ceg-wo[", 0) == 0 && label.back() == ']') {
    std::string inner = label.substr(7, label.size() - 8);
    std::stringstream ss(inner);
    std::string part;
    while (std::getline(ss, part, '+')) s.disabled.insert(parse_component(part));
    if (s.disabled.empty()) throw Error(ErrorKind::Configuration, "ablation label '" + label + "' disables nothing");
    s.label = ablation_label(s.disabled);
    return s;
  }
  std::string name = label;
  s.loss = default_baseline_loss;
  if (auto plus = label.find('+'); plus != std::string::npos) {
    name = label.substr(0, plus);
    const std::string suffix = label.substr(plus + 1);
    if (suffix == "ce") s.loss = TrainingLoss::SupervisedOnly;
    else if (suffix == "ss") s.loss = TrainingLoss::SemiSupervised;
    else throw Error(ErrorKind::Configuration, "unknown training-loss suffix in '" + label + "'");
  }
  parse_baseline(name);
  s.query = name;
  s.label = name + (s.loss == TrainingLoss::SupervisedOnly ? "+ce" : "+ss");
  return s;
}

/// The ablation grid: one score or loss term removed at a time, both losses,
/// each MixUp mode, the static threshold, and uniform selection.
inline std::vector<std::string> default_ablation_labels() {
  return {"ceg",
          "uniform+ss",
          "ceg-wo[S_u]",
          "ceg-wo[S_r]",
          "ceg-wo[S_d]",
          "ceg-wo[L_ac+L_eg]",
          "ceg-wo[L_ac]",
          "ceg-wo[L_eg]",
          "ceg-wo[M_intra]",
          "ceg-wo[M_inter]",
          "ceg-wo[dynamicT]"};
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct ExperimentManifest {
  std::string dataset_name = "synthetic";
  std::optional<std::string> dataset_path;
  std::optional<DomainSpec> generate_spec;
  std::vector<std::string> strategies{"ceg"};
  std::vector<double> budgets{0.05};
  std::vector<std::size_t> targets;  // empty: every domain
  std::vector<std::uint64_t> seeds{0};
  nlohmann::json config = nlohmann::json::object();
  TrainingLoss baseline_loss = TrainingLoss::SupervisedOnly;
  std::string output_dir = "out";
  std::size_t jobs = 0;  // 0: hardware concurrency

  void validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorKind::Configuration, "invalid manifest: " + what); };
    if (strategies.empty()) fail("at least one strategy required");
    if (seeds.empty()) fail("at least one seed required");
    if (budgets.empty()) fail("at least one budget required");
    if (dataset_path && generate_spec) fail("give either \"dataset\" or \"generate\", not both");
    for (double b : budgets) {
      if (!(b >= 0.0 && b <= 1.0)) fail("budget fractions must lie in [0, 1]");
    }
    for (const auto& s : strategies) parse_strategy_label(s, baseline_loss);
  }
};

inline ExperimentManifest manifest_from_json(const nlohmann::json& j, const fs::path& base_dir = {}) {
  ExperimentManifest m;
  try {
    if (j.contains("dataset")) {
      fs::path p = j.at("dataset").get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      m.dataset_path = p.string();
      m.dataset_name = fs::path(*m.dataset_path).stem().string();
    }
    if (j.contains("generate")) m.generate_spec = domain_spec_from_json(j.at("generate"));
    m.dataset_name = j.value("name", m.dataset_name);
    m.strategies = j.value("strategies", m.strategies);
    m.budgets = j.value("budgets", m.budgets);
    if (j.contains("targets")) {
      const auto& t = j.at("targets");
      if (t.is_string()) {
        if (t.get<std::string>() != "all") throw Error(ErrorKind::Configuration, "targets must be \"all\" or a list");
      } else {
        m.targets = t.get<std::vector<std::size_t>>();
      }
    }
    m.seeds = j.value("seeds", m.seeds);
    if (j.contains("config")) m.config = j.at("config");
    if (j.contains("baseline_loss")) {
      const auto v = j.at("baseline_loss").get<std::string>();
      if (v == "ce") m.baseline_loss = TrainingLoss::SupervisedOnly;
      else if (v == "ss") m.baseline_loss = TrainingLoss::SemiSupervised;
      else throw Error(ErrorKind::Configuration, "baseline_loss must be \"ce\" or \"ss\"");
    }
    if (j.contains("output_dir")) {
      fs::path p = j.at("output_dir").get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      m.output_dir = p.string();
    }
    m.jobs = j.value("jobs", m.jobs);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("manifest: ") + e.what());
  }
  return m;
}

inline ExperimentManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open manifest " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, "manifest " + path + ": " + e.what());
  }
  return manifest_from_json(j, fs::path(path).parent_path());
}

/// Applies JSON overrides to a config. Unknown keys are rejected.
inline void apply_overrides(TrainConfig& c, const nlohmann::json& o) {
  if (o.is_null()) return;
  if (!o.is_object()) throw Error(ErrorKind::Configuration, "config overrides must be an object");
  for (const auto& [key, v] : o.items()) {
    try {
      if (key == "pretrain_epochs") c.pretrain_epochs = v.get<std::size_t>();
      else if (key == "learn_epochs") c.learn_epochs = v.get<std::size_t>();
      else if (key == "gamma1") c.gamma1 = v.get<double>();
      else if (key == "gamma2") c.gamma2 = v.get<double>();
      else if (key == "delta") c.delta = v.get<double>();
      else if (key == "threshold" || key == "T") c.threshold_final = v.get<double>();
      else if (key == "alpha") c.alpha = v.get<double>();
      else if (key == "tau") c.tau = v.get<double>();
      else if (key == "lr_feature") c.lr_feature = v.get<double>();
      else if (key == "lr_head") c.lr_head = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "hidden_width") c.hidden_width = v.get<std::size_t>();
      else if (key == "sigma_weak") c.sigma_weak = v.get<double>();
      else if (key == "sigma_strong") c.sigma_strong = v.get<double>();
      else if (key == "mask_prob") c.mask_prob = v.get<double>();
      else if (key == "retrain_discriminator") c.retrain_discriminator = v.get<bool>();
      else if (key == "discriminator_epochs") c.discriminator_epochs = v.get<std::size_t>();
      else if (key == "validation_fraction") c.validation_fraction = v.get<double>();
      else throw Error(ErrorKind::Configuration, "unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Configuration, "config key '" + key + "': " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------
// Results CSV
// ---------------------------------------------------------------------------

struct ResultRow {
  std::string dataset;
  std::size_t target = 0;
  std::string strategy;
  double budget = 0.0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

inline std::string format_number(double v, int digits = 10) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline constexpr const char* kResultsHeader = "dataset,target,strategy,budget,seed,accuracy";

inline std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string out = std::string(kResultsHeader) + "\n";
  for (const auto& r : rows) {
    out += r.dataset + ',' + std::to_string(r.target) + ',' + r.strategy + ',' + format_number(r.budget) + ',' +
           std::to_string(r.seed) + ',' + format_number(r.accuracy) + '\n';
  }
  return out;
}

inline std::vector<ResultRow> parse_results_csv(std::istream& in) {
  std::vector<ResultRow> rows;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line) || line != kResultsHeader) throw Error(ErrorKind::Parse, "line 1: expected header '" + std::string(kResultsHeader) + "'");
  ++line_no;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw Error(ErrorKind::Parse, "line " + std::to_string(line_no) + ": expected 6 fields");
    try {
      rows.push_back({f[0], std::stoul(f[1]), f[2], std::stod(f[3]), std::stoull(f[4]), std::stod(f[5])});
    } catch (const std::exception&) {
      throw Error(ErrorKind::Parse, "line " + std::to_string(line_no) + ": malformed number");
    }
  }
  return rows;
}

inline std::vector<ResultRow> load_results_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  return parse_results_csv(in);
}

struct Summary {
  std::size_t runs = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single run
};

inline Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.runs = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

/// One line per (dataset, target, strategy, budget): runs, mean, std over seeds.
inline std::string aggregate_csv(const std::vector<ResultRow>& rows) {
  std::map<std::tuple<std::string, std::size_t, std::string, double>, std::vector<double>> groups;
  std::vector<std::tuple<std::string, std::size_t, std::string, double>> order;
  for (const auto& r : rows) {
    auto key = std::make_tuple(r.dataset, r.target, r.strategy, r.budget);
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(r.accuracy);
  }
  std::string out = "dataset,target,strategy,budget,runs,mean,std\n";
  for (const auto& key : order) {
    const Summary s = summarize(groups[key]);
    out += std::get<0>(key) + ',' + std::to_string(std::get<1>(key)) + ',' + std::get<2>(key) + ',' +
           format_number(std::get<3>(key)) + ',' + std::to_string(s.runs) + ',' + format_number(s.mean) + ',' +
           format_number(s.std) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Comparison table
// ---------------------------------------------------------------------------

struct ComparisonTable {
  std::vector<std::string> rows;     // strategy (with @budget when several)
  std::vector<std::string> columns;  // target indices, then "Average"
  // cells[r][c]; nullopt marks a gap
  std::vector<std::vector<std::optional<Summary>>> cells;
  std::vector<std::vector<bool>> best;
};

/// Pivots strategies x targets. The Average column averages a row's
/// per-target results seed by seed (its spread is the std of those per-seed
/// averages); it is a gap if any target is missing.
inline ComparisonTable compare_results(const std::vector<ResultRow>& rows) {
  ComparisonTable t;
  std::set<double> budgets;
  std::set<std::size_t> targets;
  for (const auto& r : rows) {
    budgets.insert(r.budget);
    targets.insert(r.target);
  }
  auto row_label = [&](const ResultRow& r) {
    return budgets.size() > 1 ? r.strategy + "@" + format_number(r.budget) : r.strategy;
  };
  std::map<std::pair<std::string, std::size_t>, std::map<std::uint64_t, std::vector<double>>> values;
  for (const auto& r : rows) {
    const std::string label = row_label(r);
    if (std::find(t.rows.begin(), t.rows.end(), label) == t.rows.end()) t.rows.push_back(label);
    values[{label, r.target}][r.seed].push_back(r.accuracy);
  }
  for (std::size_t target : targets) t.columns.push_back(std::to_string(target));
  t.columns.push_back("Average");

  for (const auto& label : t.rows) {
    std::vector<std::optional<Summary>> line;
    std::map<std::uint64_t, std::vector<double>> per_seed;
    std::vector<double> target_means;
    bool complete = true;
    for (std::size_t target : targets) {
      auto it = values.find({label, target});
      if (it == values.end()) {
        line.push_back(std::nullopt);
        complete = false;
        continue;
      }
      std::vector<double> all;
      for (const auto& [seed, accs] : it->second) {
        all.insert(all.end(), accs.begin(), accs.end());
        per_seed[seed].push_back(summarize(accs).mean);
      }
      line.push_back(summarize(all));
      target_means.push_back(line.back()->mean);
    }
    if (!complete) {
      line.push_back(std::nullopt);
    } else {
      std::vector<double> seed_averages;
      bool aligned = true;
      for (const auto& [seed, means] : per_seed) {
        if (means.size() != targets.size()) aligned = false;
        seed_averages.push_back(summarize(means).mean);
      }
      Summary avg = aligned ? summarize(seed_averages) : summarize(target_means);
      if (!aligned) avg.std = 0.0;
      line.push_back(avg);
    }
    t.cells.push_back(std::move(line));
  }
  t.best.assign(t.rows.size(), std::vector<bool>(t.columns.size(), false));
  for (std::size_t c = 0; c < t.columns.size(); ++c) {
    std::optional<double> top;
    for (const auto& line : t.cells) {
      if (line[c] && (!top || line[c]->mean > *top)) top = line[c]->mean;
    }
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      if (t.cells[r][c] && top && std::abs(t.cells[r][c]->mean - *top) <= 1e-12) t.best[r][c] = true;
    }
  }
  return t;
}

inline std::string format_cell(const std::optional<Summary>& s, bool best) {
  if (!s) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f%s", 100.0 * s->mean, 100.0 * s->std, best ? "*" : "");
  return buf;
}

inline std::string comparison_csv(const ComparisonTable& t) {
  std::string out = "strategy";
  for (const auto& c : t.columns) out += ',' + c;
  out += '\n';
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out += t.rows[r];
    for (std::size_t c = 0; c < t.columns.size(); ++c) out += ',' + format_cell(t.cells[r][c], t.best[r][c]);
    out += '\n';
  }
  return out;
}

/// Accuracies in percent, mean±std, '*' marks the best entry of a column.
inline std::string comparison_text(const ComparisonTable& t) {
  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> header{"strategy"};
  for (const auto& c : t.columns) header.push_back(c == "Average" ? c : "target " + c);
  grid.push_back(header);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    std::vector<std::string> line{t.rows[r]};
    for (std::size_t c = 0; c < t.columns.size(); ++c) line.push_back(format_cell(t.cells[r][c], t.best[r][c]));
    grid.push_back(line);
  }
  std::vector<std::size_t> width(header.size(), 0);
  auto display_width = [](const std::string& s) {
    // '±' is two bytes in UTF-8
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80 ? 1 : 0;
    return n;
  };
  for (const auto& line : grid) {
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], display_width(line[c]));
  }
  std::string out;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    for (std::size_t c = 0; c < grid[i].size(); ++c) {
      if (c) out += " | ";
      out += grid[i][c] + std::string(width[c] - display_width(grid[i][c]), ' ');
    }
    out += '\n';
    if (i == 0) {
      for (std::size_t c = 0; c < width.size(); ++c) {
        if (c) out += "-+-";
        out += std::string(width[c], '-');
      }
      out += '\n';
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct SweepCell {
  StrategySpec strategy;
  std::size_t target = 0;
  double budget = 0.0;
  std::uint64_t seed = 0;
};

struct SweepOutcome {
  std::vector<ResultRow> rows;
  std::vector<std::string> failures;
  std::size_t cells = 0;
  int exit_code() const { return failures.empty() ? 0 : 2; }
};

inline std::string cell_directory(const SweepCell& c) {
  std::string name;
  for (char ch : c.strategy.label) name += std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' ? ch : '_';
  return name + "/target" + std::to_string(c.target) + "/budget" + format_number(c.budget) + "/seed" + std::to_string(c.seed);
}

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

inline GeneratedDataset resolve_dataset(const ExperimentManifest& m) {
  if (m.dataset_path) return load_dataset(*m.dataset_path);
  return generate(m.generate_spec.value_or(DomainSpec{}));
}

/// Runs one cell and writes report.json, queries.jsonl and train_log.jsonl
/// under `<output>/cells/...`.
inline ResultRow run_cell(const ExperimentManifest& m, const GeneratedDataset& ds, const SweepCell& cell) {
  const DomainSplit split = leave_one_domain_out(ds, cell.target);
  TrainConfig cfg;
  apply_overrides(cfg, m.config);
  cfg.seed = cell.seed;
  cfg.num_classes = ds.spec.num_classes;
  cfg.budget = budget_from_fraction(cell.budget, split.sources.size());
  cfg.strategy = cell.strategy.query;
  cfg.training_loss = cell.strategy.loss;
  RunReport report;
  if (cell.strategy.query == "ceg") {
    report = cell.strategy.disabled.empty() ? run_ceg(cfg, split.sources, split.target)
                                            : run_ablation(cfg, split.sources, split.target, cell.strategy.disabled);
  } else {
    report = run_baseline(cfg, split.sources, split.target);
  }
  report.variant = cell.strategy.label;

  const fs::path dir = fs::path(m.output_dir) / "cells" / cell_directory(cell);
  write_text(dir / "report.json", to_json(report).dump(2) + "\n");
  std::string queries, log;
  for (const auto& q : report.queries) queries += to_json_line(q) + "\n";
  for (const auto& e : report.epochs) log += training_log_line(e) + "\n";
  write_text(dir / "queries.jsonl", queries);
  write_text(dir / "train_log.jsonl", log);
  return {m.dataset_name, cell.target, cell.strategy.label, cell.budget, cell.seed, report.final_target_accuracy};
}

inline std::vector<SweepCell> enumerate_cells(const ExperimentManifest& m, std::size_t num_domains) {
  std::vector<std::size_t> targets = m.targets;
  if (targets.empty()) {
    for (std::size_t k = 0; k < num_domains; ++k) targets.push_back(k);
  }
  std::vector<SweepCell> cells;
  for (const auto& label : m.strategies) {
    const StrategySpec spec = parse_strategy_label(label, m.baseline_loss);
    for (std::size_t t : targets) {
      for (double b : m.budgets) {
        for (std::uint64_t s : m.seeds) cells.push_back({spec, t, b, s});
      }
    }
  }
  return cells;
}

/// Runs every cell on a worker pool and writes results.csv, aggregate.csv and
/// (on failure) failures.txt. Rows keep manifest order regardless of which
/// worker finished first.
inline SweepOutcome run_sweep(const ExperimentManifest& m) {
  m.validate();
  const GeneratedDataset ds = resolve_dataset(m);
  for (std::size_t t : m.targets) {
    if (t >= ds.spec.num_domains) throw Error(ErrorKind::Configuration, "target " + std::to_string(t) + " out of range");
  }
  const std::vector<SweepCell> cells = enumerate_cells(m, ds.spec.num_domains);
  std::vector<std::optional<ResultRow>> rows(cells.size());
  std::vector<std::string> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        rows[i] = run_cell(m, ds, cells[i]);
      } catch (const std::exception& e) {
        errors[i] = cell_directory(cells[i]) + ": " + e.what();
      }
    }
  };
  std::size_t jobs = m.jobs != 0 ? m.jobs : std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min(jobs, std::max<std::size_t>(1, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  SweepOutcome out;
  out.cells = cells.size();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (rows[i]) out.rows.push_back(*rows[i]);
    if (!errors[i].empty()) out.failures.push_back(errors[i]);
  }
  const fs::path dir(m.output_dir);
  write_text(dir / "results.csv", results_csv(out.rows));
  write_text(dir / "aggregate.csv", aggregate_csv(out.rows));
  if (!out.failures.empty()) {
    std::string text;
    for (const auto& f : out.failures) text += f + "\n";
    write_text(dir / "failures.txt", text);
  } else if (fs::exists(dir / "failures.txt")) {
    fs::remove(dir / "failures.txt");
  }
  return out;
}

}  // namespace ceg

// ceg: dataset generation, leave-one-domain-out sweeps, comparison tables and
// ablation suites.
//
//   ceg generate --spec spec.json --out data.jsonl
//   ceg run      --manifest manifest.json [--out DIR] [--jobs N] [--seed S]
//   ceg compare  --results out/results.csv [--out DIR]
//   ceg ablate   --manifest manifest.json [--out DIR] [--jobs N] [--seed S]
//
// Exit codes: 0 success, 1 validation failure, 2 some sweep cells failed.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ceg/datagen.hpp"
#include "ceg/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;

struct RunOptions {
  std::string manifest;
  std::string out;
  std::size_t jobs = 0;
  std::optional<std::uint64_t> seed;
  std::vector<double> budgets;
  std::vector<std::string> strategies;
  std::vector<std::size_t> targets;
};

ceg::ExperimentManifest resolve_manifest(const RunOptions& opt) {
  ceg::ExperimentManifest m = ceg::load_manifest(opt.manifest);
  if (const char* env = std::getenv("CEG_SEED")) {
    try {
      m.seeds = {std::stoull(env)};
    } catch (const std::exception&) {
      throw ceg::Error(ceg::ErrorKind::Configuration, std::string("CEG_SEED is not an integer: ") + env);
    }
  }
  // Flags win over both the manifest and the environment.
  if (opt.seed) m.seeds = {*opt.seed};
  if (!opt.out.empty()) m.output_dir = opt.out;
  if (opt.jobs != 0) m.jobs = opt.jobs;
  if (!opt.budgets.empty()) m.budgets = opt.budgets;
  if (!opt.strategies.empty()) m.strategies = opt.strategies;
  if (!opt.targets.empty()) m.targets = opt.targets;
  return m;
}

int report_sweep(const ceg::ExperimentManifest& m, const ceg::SweepOutcome& outcome) {
  const auto table = ceg::compare_results(outcome.rows);
  const ceg::fs::path dir(m.output_dir);
  ceg::write_text(dir / "comparison.csv", ceg::comparison_csv(table));
  ceg::write_text(dir / "comparison.txt", ceg::comparison_text(table));
  std::cout << ceg::comparison_text(table);
  std::cout << outcome.rows.size() << "/" << outcome.cells << " cells succeeded; results in "
            << (dir / "results.csv").string() << "\n";
  for (const auto& f : outcome.failures) std::cerr << "failed: " << f << "\n";
  return outcome.exit_code();
}

int cmd_generate(const std::string& spec_path, const std::string& out, const std::optional<std::uint64_t>& seed) {
  ceg::DomainSpec spec;
  if (!spec_path.empty()) {
    std::ifstream in(spec_path);
    if (!in) throw ceg::Error(ceg::ErrorKind::Io, "cannot open " + spec_path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ceg::Error(ceg::ErrorKind::Parse, spec_path + ": " + e.what());
    }
    spec = ceg::domain_spec_from_json(j.contains("spec") ? j.at("spec") : j);
  }
  if (seed) spec.seed = *seed;
  const auto ds = ceg::generate(spec);
  if (const auto parent = ceg::fs::path(out).parent_path(); !parent.empty()) ceg::fs::create_directories(parent);
  ceg::save_dataset(ds, out);
  std::cout << "wrote " << ds.samples.size() << " samples (" << spec.num_domains << " domains x "
            << spec.samples_per_domain << ") to " << out << "\n";
  return kOk;
}

void add_run_options(CLI::App* cmd, RunOptions& opt) {
  cmd->add_option("-m,--manifest", opt.manifest, "Experiment manifest (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", opt.out, "Output directory (overrides the manifest)");
  cmd->add_option("-j,--jobs", opt.jobs, "Worker threads (default: CPU count)");
  cmd->add_option("--seed", opt.seed, "Run a single seed (overrides manifest and CEG_SEED)");
  cmd->add_option("--budget", opt.budgets, "Budget fractions of the source pool");
  cmd->add_option("--strategy", opt.strategies, "Strategy labels, e.g. ceg, uniform+ce, ceg-wo[L_ac]");
  cmd->add_option("--target", opt.targets, "Held-out target domains");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Collaborative exploration and generalization for label-efficient domain generalization"};
  app.require_subcommand(1);

  std::string spec_path, gen_out;
  std::optional<std::uint64_t> gen_seed;
  auto* gen = app.add_subcommand("generate", "Generate a synthetic multi-domain dataset");
  gen->add_option("-s,--spec", spec_path, "Domain spec (JSON); defaults are used for missing keys");
  gen->add_option("-o,--out", gen_out, "Output JSON-lines file")->required();
  gen->add_option("--seed", gen_seed, "Override the spec seed");

  RunOptions run_opt;
  auto* run = app.add_subcommand("run", "Run a leave-one-domain-out sweep from a manifest");
  add_run_options(run, run_opt);

  RunOptions ablate_opt;
  auto* ablate = app.add_subcommand("ablate", "Run the ablation grid from a manifest");
  add_run_options(ablate, ablate_opt);

  std::string results_path, compare_out;
  auto* compare = app.add_subcommand("compare", "Pivot a results CSV into a strategy x target table");
  compare->add_option("-r,--results", results_path, "results.csv from run/ablate")->required()->check(CLI::ExistingFile);
  compare->add_option("-o,--out", compare_out, "Output directory (default: next to the results)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*gen) return cmd_generate(spec_path, gen_out, gen_seed);

    if (*run || *ablate) {
      const bool is_ablation = static_cast<bool>(*ablate);
      const RunOptions& opt = is_ablation ? ablate_opt : run_opt;
      ceg::ExperimentManifest m;
      try {
        m = resolve_manifest(opt);
        if (is_ablation && opt.strategies.empty()) {
          std::ifstream in(opt.manifest);
          const auto j = nlohmann::json::parse(in);
          m.strategies = j.value("ablations", ceg::default_ablation_labels());
        }
        m.validate();
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
      }
      return report_sweep(m, ceg::run_sweep(m));
    }

    if (*compare) {
      const auto rows = ceg::load_results_csv(results_path);
      const auto table = ceg::compare_results(rows);
      const ceg::fs::path dir = compare_out.empty() ? ceg::fs::path(results_path).parent_path() : ceg::fs::path(compare_out);
      ceg::write_text(dir / "comparison.csv", ceg::comparison_csv(table));
      ceg::write_text(dir / "comparison.txt", ceg::comparison_text(table));
      std::cout << ceg::comparison_text(table);
      return kOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  }
  return kOk;
}

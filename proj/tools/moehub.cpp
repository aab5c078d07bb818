// moehub: MoE layer communication simulator driver.
//
//   moehub run <config.json>      single point or full grid from the config
//   moehub sweep <config.json>    same, but requires at least one sweep axis
//   moehub ablate <config.json>   hub knob grid vs the pipelined baseline
//   moehub validate <config.json> quick invariant run on a shrunken instance
//
// Exit codes: 0 ok, 1 assertion/trend failure, 2 config error, 3 I/O error.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "moehub/report.hpp"

namespace {

using namespace moehub;

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool trace = false;
  int jobs = 1;
};

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("config", o.config_path, "experiment config (JSON)")->required();
  sub->add_option("--seed", o.seed, "override the config seed");
  sub->add_option("--out", o.out, "output directory (overrides config out_dir)");
  sub->add_flag("--trace", o.trace, "emit the NDJSON event trace");
  sub->add_option("--jobs", o.jobs, "worker threads for grid cells")
      ->check(CLI::PositiveNumber);
}

ExperimentConfig load_and_resolve(const CommonOpts& o) {
  ExperimentConfig cfg = load_config(o.config_path);
  if (const char* env = std::getenv("MOEHUB_SIM_SEED")) {
    try {
      cfg.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError("MOEHUB_SIM_SEED is not an integer: " + std::string(env));
    }
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out_dir = *o.out;
  if (o.trace) cfg.trace = true;
  cfg.validate();
  return cfg;
}

int run_and_emit(const ExperimentConfig& cfg, int jobs) {
  const std::vector<CellResult> cells = run_grid(cfg, jobs);
  const Json report = build_report(cfg, cells);
  const std::vector<std::string> files = emit_outputs(report, cells, cfg, cfg.out_dir);
  int failed = 0;
  for (const CellResult& c : cells) {
    if (c.ok) continue;
    ++failed;
    std::cerr << "cell failed: " << cell_key_json(c.key).dump() << ": " << c.error
              << "\n";
  }
  for (const std::string& f : files) std::cout << "wrote " << f << "\n";
  std::cout << cells.size() - std::size_t(failed) << "/" << cells.size()
            << " cells ok\n";
  return failed ? 1 : 0;
}

int cmd_run(const CommonOpts& o) { return run_and_emit(load_and_resolve(o), o.jobs); }

int cmd_sweep(const CommonOpts& o) {
  ExperimentConfig cfg = load_and_resolve(o);
  if (cfg.sweep_seq_len_per_gpu.empty() && cfg.sweep_target_std.empty() &&
      cfg.sweep_seeds.empty())
    throw ConfigError("sweep requires at least one sweep axis in the config");
  return run_and_emit(cfg, o.jobs);
}

int cmd_ablate(const CommonOpts& o) {
  ExperimentConfig cfg = load_and_resolve(o);
  cfg.pipelines = {Pipeline::kMoeHubBase, Pipeline::kMoeHubPkt, Pipeline::kMoeHubDep,
                   Pipeline::kMoeHub, Pipeline::kMediatedPipelined};
  return run_and_emit(cfg, o.jobs);
}

// Shrinks the config to one small point and checks the core invariants:
// report determinism, token conservation, and the pipeline span ordering.
int cmd_validate(const CommonOpts& o) {
  ExperimentConfig cfg = load_and_resolve(o);
  cfg.sweep_seq_len_per_gpu.clear();
  cfg.sweep_target_std.clear();
  cfg.sweep_seeds.clear();
  cfg.seq_len_per_gpu = std::min(cfg.seq_len_per_gpu, 128);
  cfg.pipelines = {Pipeline::kIdeal, Pipeline::kMoeHub, Pipeline::kMoeHubBase,
                   Pipeline::kMediatedNonoverlap};
  int bad = 0;
  auto check = [&](bool ok, const std::string& what) {
    std::cout << (ok ? "ok   " : "FAIL ") << what << "\n";
    if (!ok) ++bad;
  };

  const std::vector<CellResult> a = run_grid(cfg, o.jobs);
  const std::vector<CellResult> b = run_grid(cfg, 1);
  for (const CellResult& c : a)
    check(c.ok, std::string(pipeline_name(c.key.pipeline)) + " completes" +
                    (c.ok ? "" : " (" + c.error + ")"));
  if (bad) return 1;
  check(build_report(cfg, a).dump() == build_report(cfg, b).dump(),
        "report identical across reruns and job counts");

  SimTime span[4];
  for (int i = 0; i < 4; ++i) span[i] = a[std::size_t(i)].res.span;
  check(span[0] <= span[1], "ideal span <= moehub span");
  check(span[1] <= span[2], "moehub span <= moehub_base span");
  check(span[2] <= span[3], "moehub_base span <= mediated_nonoverlap span");
  const std::int64_t want =
      std::int64_t(cfg.seq_len_per_gpu) * cfg.n_gpus * cfg.model.top_k;
  check(a[1].res.rows_delivered == want, "all routed token rows delivered");
  return bad ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoE layer communication simulator"};
  app.require_subcommand(1);

  CommonOpts run_o, sweep_o, ablate_o, validate_o;
  add_common(app.add_subcommand("run", "run the configured grid"), run_o);
  add_common(app.add_subcommand("sweep", "run a sweep (requires sweep axes)"), sweep_o);
  add_common(app.add_subcommand("ablate", "hub knob ablation grid"), ablate_o);
  add_common(app.add_subcommand("validate", "invariant checks on a small instance"),
             validate_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) ? 2 : 0;
  }

  try {
    if (app.got_subcommand("run")) return cmd_run(run_o);
    if (app.got_subcommand("sweep")) return cmd_sweep(sweep_o);
    if (app.got_subcommand("ablate")) return cmd_ablate(ablate_o);
    return cmd_validate(validate_o);
  } catch (const moehub::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const moehub::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

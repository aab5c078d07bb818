#pragma once

// Experiment driving and serialization. A config (optionally with sweep axes)
// expands into a grid of cells keyed (seq_len_per_gpu, target_std, seed,
// pipeline); cells run on a bounded worker pool and merge back by index, so
// the report is identical whether the grid ran serially or concurrently.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "moehub/config.hpp"
#include "moehub/pipeline.hpp"

namespace moehub {

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct CellKey {
  int seq_len_per_gpu = 0;
  double target_std = 0.0;
  std::uint64_t seed = 0;
  Pipeline pipeline{};
};

struct CellResult {
  CellKey key;
  bool ok = false;
  std::string error;
  LayerResult res;
};

inline std::vector<CellKey> build_grid(const ExperimentConfig& cfg) {
  const std::vector<int> seqs = cfg.sweep_seq_len_per_gpu.empty()
                                    ? std::vector<int>{cfg.seq_len_per_gpu}
                                    : cfg.sweep_seq_len_per_gpu;
  const std::vector<double> stds = cfg.sweep_target_std.empty()
                                       ? std::vector<double>{cfg.target_std}
                                       : cfg.sweep_target_std;
  const std::vector<std::uint64_t> seeds =
      cfg.sweep_seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : cfg.sweep_seeds;
  std::vector<CellKey> grid;
  for (int seq : seqs)
    for (double sd : stds)
      for (std::uint64_t seed : seeds)
        for (Pipeline p : cfg.pipelines) grid.push_back({seq, sd, seed, p});
  return grid;
}

inline CellResult run_cell(const ExperimentConfig& base, const CellKey& key) {
  CellResult out;
  out.key = key;
  ExperimentConfig cfg = base;
  cfg.seq_len_per_gpu = key.seq_len_per_gpu;
  cfg.target_std = key.target_std;
  cfg.seed = key.seed;
  try {
    cfg.validate();
    out.res = simulate_layer(cfg, key.pipeline);
    out.ok = true;
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

inline std::vector<CellResult> run_grid(const ExperimentConfig& cfg, int jobs) {
  const std::vector<CellKey> grid = build_grid(cfg);
  std::vector<CellResult> cells(grid.size());
  if (jobs < 1) jobs = 1;
  jobs = std::min<int>(jobs, int(grid.size()));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < grid.size(); ++i) cells[i] = run_cell(cfg, grid[i]);
    return cells;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= grid.size()) return;
      cells[i] = run_cell(cfg, grid[i]);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return cells;
}

// ---------------------------------------------------------------------------
// JSON report (schema v1). The resolved config is embedded so every number in
// the report is reproducible from the report alone.

inline Json cell_key_json(const CellKey& k) {
  return Json{{"seq_len_per_gpu", k.seq_len_per_gpu},
              {"target_std", k.target_std},
              {"seed", k.seed},
              {"pipeline", pipeline_name(k.pipeline)}};
}

inline Json layer_result_json(const LayerResult& r) {
  Json j;
  j["span_ps"] = r.span;
  j["critical_gpu"] = r.critical_gpu;
  j["breakdown_ps"] = Json{{"routing", r.routing},
                           {"exposed_dispatch", r.exposed_dispatch},
                           {"compute", r.compute},
                           {"exposed_combine", r.exposed_combine},
                           {"scaling", r.scaling},
                           {"mediation", r.mediation},
                           {"polling", r.polling}};
  j["gpu_done_ps"] = r.gpu_done;
  j["events"] = r.events;
  j["fabric"] = Json{{"packets_delivered", r.fabric_packets},
                     {"flits_delivered", r.fabric_flits},
                     {"min_downlink_util", r.min_downlink_util},
                     {"mean_downlink_util", r.mean_downlink_util}};
  j["rpm"] = Json{{"inserts", r.rpm_inserts},
                  {"merges", r.rpm_merges},
                  {"emissions", r.rpm_emissions},
                  {"bypass_emissions", r.rpm_bypass}};
  j["rat"] = Json{{"evictions", r.rat_evictions}, {"recoveries", r.rat_recoveries}};
  j["dam"] = Json{{"deallocated_tiles", r.dealloc_tiles}, {"forced_tiles", r.forced_tiles}};
  j["rows_delivered"] = r.rows_delivered;
  j["sm_busy_us"] = r.sm_busy_us;
  j["realized_std"] = r.realized_std;
  Json marks = Json::object();
  for (const auto& [k, v] : r.marks) marks[k] = v;
  j["marks_ps"] = marks;
  j["util_bucket_ps"] = r.util_bucket;
  j["util_timeline"] = r.util_timeline;
  return j;
}

inline Json build_report(const ExperimentConfig& cfg, const std::vector<CellResult>& cells) {
  Json rep;
  rep["schema_version"] = 1;
  rep["config"] = config_to_json(cfg);

  Json jc = Json::array();
  std::uint64_t events = 0, trace_records = 0;
  int failed = 0;
  for (const CellResult& c : cells) {
    Json e;
    e["key"] = cell_key_json(c.key);
    e["ok"] = c.ok;
    if (c.ok) {
      e["result"] = layer_result_json(c.res);
      events += c.res.events;
      trace_records += c.res.trace.size();
    } else {
      e["error"] = c.error;
      ++failed;
    }
    jc.push_back(e);
  }
  rep["cells"] = jc;

  // Speedup tables: baseline span / variant span per (seq, std, seed) point.
  // speedup of the baseline over itself is exactly 1.
  Pipeline base = cfg.pipelines.front();
  for (Pipeline p : cfg.pipelines)
    if (p == Pipeline::kMediatedNonoverlap) base = p;
  std::map<std::tuple<int, double, std::uint64_t>, SimTime> base_span;
  for (const CellResult& c : cells)
    if (c.ok && c.key.pipeline == base)
      base_span[{c.key.seq_len_per_gpu, c.key.target_std, c.key.seed}] = c.res.span;
  Json sp = Json::array();
  for (const CellResult& c : cells) {
    if (!c.ok) continue;
    auto it = base_span.find({c.key.seq_len_per_gpu, c.key.target_std, c.key.seed});
    if (it == base_span.end() || c.res.span <= 0) continue;
    Json e;
    e["key"] = cell_key_json(c.key);
    e["baseline"] = pipeline_name(base);
    e["speedup"] = c.key.pipeline == base ? 1.0 : double(it->second) / double(c.res.span);
    sp.push_back(e);
  }
  rep["speedup"] = sp;

  rep["summary"] = Json{{"cells", cells.size()},
                        {"failed", failed},
                        {"events", events},
                        {"trace_records", trace_records}};
  return rep;
}

// ---------------------------------------------------------------------------
// File emission: JSON report, CSV tables, plot-ready two-column data, and the
// newline-delimited JSON event trace.

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  return f;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace detail

inline std::vector<std::string> emit_outputs(const Json& report,
                                             const std::vector<CellResult>& cells,
                                             const ExperimentConfig& cfg,
                                             const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output dir " + out_dir + ": " + ec.message());
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, auto&& body) {
    const fs::path p = fs::path(out_dir) / name;
    std::ofstream f = detail::open_out(p);
    body(f);
    if (!f) throw IoError("write failed: " + p.string());
    written.push_back(p.string());
  };

  emit("report.json", [&](std::ofstream& f) { f << report.dump(2) << "\n"; });

  // spans.csv: one row per cell.
  emit("spans.csv", [&](std::ofstream& f) {
    f << "seq_len_per_gpu,target_std,seed,pipeline,ok,span_us,events\n";
    for (const CellResult& c : cells)
      f << c.key.seq_len_per_gpu << ',' << detail::fmt(c.key.target_std) << ','
        << c.key.seed << ',' << pipeline_name(c.key.pipeline) << ',' << (c.ok ? 1 : 0)
        << ',' << detail::fmt(double(c.res.span) / kMicrosecond) << ',' << c.res.events
        << "\n";
  });

  // speedup.csv mirrors the report's speedup table.
  emit("speedup.csv", [&](std::ofstream& f) {
    f << "seq_len_per_gpu,target_std,seed,pipeline,baseline,speedup\n";
    for (const auto& e : report.at("speedup"))
      f << e["key"]["seq_len_per_gpu"].get<int>() << ','
        << detail::fmt(e["key"]["target_std"].get<double>()) << ','
        << e["key"]["seed"].get<std::uint64_t>() << ','
        << e["key"]["pipeline"].get<std::string>() << ','
        << e["baseline"].get<std::string>() << ','
        << detail::fmt(e["speedup"].get<double>()) << "\n";
  });

  // Mean span per grid point, averaged over seeds.
  auto mean_span = [&](int seq, double sd, Pipeline p, double& out) {
    double sum = 0;
    int n = 0;
    for (const CellResult& c : cells)
      if (c.ok && c.key.seq_len_per_gpu == seq && c.key.target_std == sd &&
          c.key.pipeline == p) {
        sum += double(c.res.span);
        ++n;
      }
    if (!n) return false;
    out = sum / n;
    return true;
  };
  const std::vector<int> seqs = cfg.sweep_seq_len_per_gpu.empty()
                                    ? std::vector<int>{cfg.seq_len_per_gpu}
                                    : cfg.sweep_seq_len_per_gpu;
  std::vector<double> stds = cfg.sweep_target_std.empty()
                                 ? std::vector<double>{cfg.target_std}
                                 : cfg.sweep_target_std;
  Pipeline base = cfg.pipelines.front();
  for (Pipeline p : cfg.pipelines)
    if (p == Pipeline::kMediatedNonoverlap) base = p;

  // speedup vs total tokens, one column per pipeline, monotone token axis.
  if (seqs.size() > 1) {
    std::vector<int> sorted = seqs;
    std::sort(sorted.begin(), sorted.end());
    emit("speedup_vs_tokens.dat", [&](std::ofstream& f) {
      f << "# total_tokens";
      for (Pipeline p : cfg.pipelines) f << ' ' << pipeline_name(p);
      f << "\n";
      for (int seq : sorted) {
        double b;
        if (!mean_span(seq, stds.front(), base, b)) continue;
        f << std::int64_t(seq) * cfg.n_gpus;
        for (Pipeline p : cfg.pipelines) {
          double v;
          f << ' ' << (mean_span(seq, stds.front(), p, v) ? detail::fmt(b / v) : "nan");
        }
        f << "\n";
      }
    });
  }

  // span vs imbalance std.
  if (stds.size() > 1) {
    std::sort(stds.begin(), stds.end());
    emit("span_vs_std.dat", [&](std::ofstream& f) {
      f << "# target_std";
      for (Pipeline p : cfg.pipelines) f << " " << pipeline_name(p) << "_span_us";
      f << "\n";
      for (double sd : stds) {
        f << detail::fmt(sd);
        for (Pipeline p : cfg.pipelines) {
          double v;
          f << ' ' << (mean_span(seqs.front(), sd, p, v) ? detail::fmt(v / kMicrosecond)
                                                         : "nan");
        }
        f << "\n";
      }
    });
  }

  // Downlink utilization timeline of the first completed cell per pipeline.
  emit("link_util_timeline.dat", [&](std::ofstream& f) {
    f << "# t_us mean_downlink_util pipeline\n";
    std::set<Pipeline> seen;
    for (const CellResult& c : cells) {
      if (!c.ok || c.res.util_timeline.empty() || seen.count(c.key.pipeline)) continue;
      seen.insert(c.key.pipeline);
      for (std::size_t i = 0; i < c.res.util_timeline.size(); ++i)
        f << detail::fmt(double(i) * c.res.util_bucket / kMicrosecond + 0.5) << ' '
          << detail::fmt(c.res.util_timeline[i]) << ' ' << pipeline_name(c.key.pipeline)
          << "\n";
      f << "\n";
    }
  });

  // Ablation bars: mean span per pipeline (averaged over the whole grid).
  emit("ablation_bars.dat", [&](std::ofstream& f) {
    f << "# pipeline mean_span_us\n";
    for (Pipeline p : cfg.pipelines) {
      double sum = 0;
      int n = 0;
      for (const CellResult& c : cells)
        if (c.ok && c.key.pipeline == p) {
          sum += double(c.res.span) / kMicrosecond;
          ++n;
        }
      if (n) f << pipeline_name(p) << ' ' << detail::fmt(sum / n) << "\n";
    }
  });

  if (cfg.trace) {
    emit("trace.ndjson", [&](std::ofstream& f) {
      for (const CellResult& c : cells) {
        if (!c.ok) continue;
        for (const TraceRec& t : c.res.trace) {
          Json line{{"t_ps", t.t},
                    {"component", "gpu" + std::to_string(t.gpu)},
                    {"kind", t.kind},
                    {"seq_len_per_gpu", c.key.seq_len_per_gpu},
                    {"target_std", c.key.target_std},
                    {"seed", c.key.seed},
                    {"pipeline", pipeline_name(c.key.pipeline)}};
          if (!t.detail.empty()) line["detail"] = t.detail;
          f << line.dump() << "\n";
        }
      }
    });
  }

  return written;
}

}  // namespace moehub

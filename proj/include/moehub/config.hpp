#pragma once

// Experiment configuration: JSON schema, preset models, validation and unit
// conversion (ns -> ps, GB/s -> bytes/ps). A resolved config has every
// default materialized so a report embedding it is reproducible on its own.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "moehub/sim.hpp"

namespace moehub {

using Json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct MoeConfig {
  std::string name = "custom";
  int hidden_size = 4096;
  int ffn_hidden_size = 14336;
  int n_experts = 8;
  int top_k = 2;
  int n_layers = 32;  // reporting only
  int dtype_bytes = 2;

  int row_bytes() const { return hidden_size * dtype_bytes; }
};

inline std::optional<MoeConfig> preset_model(const std::string& name) {
  if (name == "mixtral-8x7b") return MoeConfig{name, 4096, 14336, 8, 2, 32, 2};
  if (name == "qwen2-moe-2.7b") return MoeConfig{name, 2048, 1408, 64, 4, 24, 2};
  if (name == "phi-3.5-moe") return MoeConfig{name, 4096, 6400, 16, 2, 32, 2};
  return std::nullopt;
}

enum class RoutePolicy { kHashed, kRoundRobin };

struct FabricConfig {
  int n_switches = 4;
  double gpu_bandwidth_gbs = 400.0;  // aggregate per GPU, split across uplinks
  SimTime link_latency = ns(250);    // per hop, unidirectional
  int flit_bytes = 16;
  int link_queue_packets = 256;
  SimTime crossbar_latency = ns(500);  // local loopback store path
  RoutePolicy route_policy = RoutePolicy::kHashed;
  bool cost_acks = true;  // write acks ride back as 1-flit packets
  double congestion_highwater = 0.75;
  SimTime util_bucket = us(1);

  // Serialization time of one flit on one GPU<->switch link.
  SimTime flit_time() const {
    const double link_bw = gpu_bandwidth_gbs * 1e9 / n_switches;  // bytes/s
    return static_cast<SimTime>(flit_bytes * 1e12 / link_bw + 0.5);
  }
};

struct GpuConfig {
  int n_sms = 132;
  SimTime kernel_launch_latency = us(5);
  // SM store path: sub-requests released at this rate toward the local hub.
  double store_issue_rate = 2e9;   // sub-requests per second per GPU
  int store_request_bytes = 64;    // granularity of one issued sub-request
  double local_store_gbs = 1000.0; // loopback stores ride the memory path
  double compute_tflops = 700.0;   // aggregate effective, roofline-calibrated
  double mem_bandwidth_gbs = 3000.0;
  int tile_m = 128;
  int tile_n = 128;
  int scaling_tile_rows = 8;
  SimTime poll_interval = us(1);
  SimTime routing_topk_overhead = us(2);

  SimTime store_issue_interval() const {
    return static_cast<SimTime>(1e12 / store_issue_rate + 0.5);
  }
  SimTime local_store_interval(int bytes) const {
    return static_cast<SimTime>(bytes * 1e12 / (local_store_gbs * 1e9) + 0.5);
  }
  double compute_flops_per_ps_per_sm() const {
    return compute_tflops * 1e12 / 1e12 / n_sms;
  }
  double mem_bytes_per_ps_per_sm() const {
    return mem_bandwidth_gbs * 1e9 / 1e12 / n_sms;
  }
};

struct HubConfig {
  int rat_capacity = 4096;
  int rat_banks = 16;  // recorded; bank conflicts are not modeled
  double hub_clock_ghz = 1.6;
  SimTime spill_penalty = ns(600);
  SimTime mmio_latency = us(2);
  int rpm_partition_entries = 64;
  SimTime bypass_threshold = us(2);
  SimTime egress_slot = ps(640);  // one hub egress transaction per slot
  SimTime dam_signal_latency = ns(100);
  SimTime mem_write_latency = ns(500);
  bool prefer_rowid_over_mask = false;  // flips levels 2/3 of the comparator

  SimTime ingress_cycle() const {
    return static_cast<SimTime>(1000.0 / hub_clock_ghz + 0.5);
  }
};

struct BaselineConfig {
  SimTime host_roundtrip = us(15);
  int pipeline_chunks = 4;
  // Mediated transfers run as explicit copy kernels; this many SMs are held
  // for the duration of each bulk transfer.
  int copy_kernel_sms = 40;
};

enum class Pipeline {
  kIdeal,
  kMoeHub,       // pkt on, dep on
  kMoeHubPkt,    // pkt on, dep off
  kMoeHubDep,    // pkt off, dep on
  kMoeHubBase,   // pkt off, dep off
  kMediatedNonoverlap,
  kMediatedPipelined,
};

inline const char* pipeline_name(Pipeline p) {
  switch (p) {
    case Pipeline::kIdeal: return "ideal";
    case Pipeline::kMoeHub: return "moehub";
    case Pipeline::kMoeHubPkt: return "moehub_pkt";
    case Pipeline::kMoeHubDep: return "moehub_dep";
    case Pipeline::kMoeHubBase: return "moehub_base";
    case Pipeline::kMediatedNonoverlap: return "mediated_nonoverlap";
    case Pipeline::kMediatedPipelined: return "mediated_pipelined";
  }
  return "?";
}

inline std::optional<Pipeline> pipeline_from_name(const std::string& s) {
  for (Pipeline p : {Pipeline::kIdeal, Pipeline::kMoeHub, Pipeline::kMoeHubPkt,
                     Pipeline::kMoeHubDep, Pipeline::kMoeHubBase,
                     Pipeline::kMediatedNonoverlap, Pipeline::kMediatedPipelined}) {
    if (s == pipeline_name(p)) return p;
  }
  return std::nullopt;
}

struct ExperimentConfig {
  int schema_version = 1;
  MoeConfig model;
  int n_gpus = 8;
  int seq_len_per_gpu = 1024;
  double target_std = 0.032;
  std::uint64_t seed = 1;
  std::vector<Pipeline> pipelines = {Pipeline::kMoeHub, Pipeline::kMediatedNonoverlap,
                                     Pipeline::kIdeal};
  // Sweep axes (empty -> single point from the scalar fields above).
  std::vector<int> sweep_seq_len_per_gpu;
  std::vector<double> sweep_target_std;
  std::vector<std::uint64_t> sweep_seeds;

  FabricConfig fabric;
  GpuConfig gpu;
  HubConfig hub;
  BaselineConfig baseline;

  std::uint64_t event_budget = 1000ULL * 1000 * 1000;
  bool trace = false;
  bool shadow_checks = false;  // byte-coverage bitmap + token-routing shadow model
  std::string out_dir = "out";

  int total_tokens() const { return seq_len_per_gpu * n_gpus; }

  void validate() const {
    if (model.hidden_size <= 0 || model.ffn_hidden_size <= 0)
      throw ConfigError("model dims must be positive");
    if (model.top_k <= 0 || model.top_k > model.n_experts)
      throw ConfigError("top_k must be in [1, n_experts]");
    if (n_gpus <= 0) throw ConfigError("n_gpus must be positive");
    if (model.n_experts % n_gpus != 0)
      throw ConfigError("n_experts not divisible by n_gpus (" +
                        std::to_string(model.n_experts) + " experts, " +
                        std::to_string(n_gpus) + " GPUs)");
    if (seq_len_per_gpu <= 0) throw ConfigError("seq_len_per_gpu must be positive");
    if (target_std < 0.0 || target_std > 0.05)
      throw ConfigError("target_std out of supported range [0, 0.05]");
    if (fabric.n_switches <= 0) throw ConfigError("n_switches must be positive");
    if (fabric.flit_bytes <= 0) throw ConfigError("flit_bytes must be positive");
    if (gpu.store_request_bytes <= 0 || gpu.store_request_bytes % fabric.flit_bytes != 0 ||
        gpu.store_request_bytes > 128)
      throw ConfigError("store_request_bytes must be a multiple of flit_bytes, <= 128");
    if (gpu.tile_m <= 0 || gpu.tile_n <= 0) throw ConfigError("tile dims must be positive");
    if (gpu.scaling_tile_rows % model.top_k != 0)
      throw ConfigError("scaling_tile_rows must be a multiple of top_k");
    if (hub.rat_capacity <= 0) throw ConfigError("rat_capacity must be positive");
    if (baseline.pipeline_chunks <= 0) throw ConfigError("pipeline_chunks must be positive");
    if (model.row_bytes() % 128 != 0)
      throw ConfigError("hidden_size * dtype_bytes must be a multiple of 128");
  }
};

// ---------------------------------------------------------------------------
// JSON (de)serialization. Strict: unknown keys are rejected with their paths.

namespace detail {

inline void check_keys(const Json& j, const std::set<std::string>& allowed,
                       const std::string& path) {
  std::vector<std::string> unknown;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) unknown.push_back(path + it.key());
  }
  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
}

template <typename T>
void get_to(const Json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

inline void get_time_ns(const Json& j, const char* key, SimTime& out) {
  if (j.contains(key)) out = ns(j.at(key).get<std::int64_t>());
}

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig cfg;
  detail::check_keys(
      j,
      {"schema_version", "model", "n_gpus", "seq_len_per_gpu", "target_std", "seed",
       "pipelines", "sweep", "fabric", "gpu", "hub", "baseline", "event_budget",
       "trace", "shadow_checks", "out_dir"},
      "");
  detail::get_to(j, "schema_version", cfg.schema_version);
  if (cfg.schema_version != 1) throw ConfigError("unsupported schema_version");

  if (j.contains("model")) {
    const Json& m = j.at("model");
    if (m.is_string()) {
      auto p = preset_model(m.get<std::string>());
      if (!p) throw ConfigError("unknown model preset: " + m.get<std::string>());
      cfg.model = *p;
    } else {
      detail::check_keys(m,
                         {"name", "hidden_size", "ffn_hidden_size", "n_experts",
                          "top_k", "n_layers", "dtype_bytes"},
                         "model.");
      detail::get_to(m, "name", cfg.model.name);
      detail::get_to(m, "hidden_size", cfg.model.hidden_size);
      detail::get_to(m, "ffn_hidden_size", cfg.model.ffn_hidden_size);
      detail::get_to(m, "n_experts", cfg.model.n_experts);
      detail::get_to(m, "top_k", cfg.model.top_k);
      detail::get_to(m, "n_layers", cfg.model.n_layers);
      detail::get_to(m, "dtype_bytes", cfg.model.dtype_bytes);
    }
  }
  detail::get_to(j, "n_gpus", cfg.n_gpus);
  detail::get_to(j, "seq_len_per_gpu", cfg.seq_len_per_gpu);
  detail::get_to(j, "target_std", cfg.target_std);
  detail::get_to(j, "seed", cfg.seed);
  if (j.contains("pipelines")) {
    cfg.pipelines.clear();
    for (const auto& name : j.at("pipelines")) {
      auto p = pipeline_from_name(name.get<std::string>());
      if (!p) throw ConfigError("unknown pipeline: " + name.get<std::string>());
      cfg.pipelines.push_back(*p);
    }
    if (cfg.pipelines.empty()) throw ConfigError("pipelines may not be empty");
  }
  if (j.contains("sweep")) {
    const Json& s = j.at("sweep");
    detail::check_keys(s, {"seq_len_per_gpu", "target_std", "seeds"}, "sweep.");
    detail::get_to(s, "seq_len_per_gpu", cfg.sweep_seq_len_per_gpu);
    detail::get_to(s, "target_std", cfg.sweep_target_std);
    detail::get_to(s, "seeds", cfg.sweep_seeds);
  }
  if (j.contains("fabric")) {
    const Json& f = j.at("fabric");
    detail::check_keys(f,
                       {"n_switches", "gpu_bandwidth_gbs", "link_latency_ns",
                        "flit_bytes", "link_queue_packets", "crossbar_latency_ns",
                        "route_policy", "cost_acks", "congestion_highwater",
                        "util_bucket_ns"},
                       "fabric.");
    detail::get_to(f, "n_switches", cfg.fabric.n_switches);
    detail::get_to(f, "gpu_bandwidth_gbs", cfg.fabric.gpu_bandwidth_gbs);
    detail::get_time_ns(f, "link_latency_ns", cfg.fabric.link_latency);
    detail::get_to(f, "flit_bytes", cfg.fabric.flit_bytes);
    detail::get_to(f, "link_queue_packets", cfg.fabric.link_queue_packets);
    detail::get_time_ns(f, "crossbar_latency_ns", cfg.fabric.crossbar_latency);
    if (f.contains("route_policy")) {
      const std::string rp = f.at("route_policy").get<std::string>();
      if (rp == "hashed") cfg.fabric.route_policy = RoutePolicy::kHashed;
      else if (rp == "round_robin") cfg.fabric.route_policy = RoutePolicy::kRoundRobin;
      else throw ConfigError("route_policy must be hashed or round_robin");
    }
    detail::get_to(f, "cost_acks", cfg.fabric.cost_acks);
    detail::get_to(f, "congestion_highwater", cfg.fabric.congestion_highwater);
    detail::get_time_ns(f, "util_bucket_ns", cfg.fabric.util_bucket);
  }
  if (j.contains("gpu")) {
    const Json& g = j.at("gpu");
    detail::check_keys(g,
                       {"n_sms", "kernel_launch_latency_ns", "store_issue_rate",
                        "store_request_bytes", "local_store_gbs", "compute_tflops",
                        "mem_bandwidth_gbs", "tile_m", "tile_n", "scaling_tile_rows",
                        "poll_interval_ns", "routing_topk_overhead_ns"},
                       "gpu.");
    detail::get_to(g, "n_sms", cfg.gpu.n_sms);
    detail::get_time_ns(g, "kernel_launch_latency_ns", cfg.gpu.kernel_launch_latency);
    detail::get_to(g, "store_issue_rate", cfg.gpu.store_issue_rate);
    detail::get_to(g, "store_request_bytes", cfg.gpu.store_request_bytes);
    detail::get_to(g, "local_store_gbs", cfg.gpu.local_store_gbs);
    detail::get_to(g, "compute_tflops", cfg.gpu.compute_tflops);
    detail::get_to(g, "mem_bandwidth_gbs", cfg.gpu.mem_bandwidth_gbs);
    detail::get_to(g, "tile_m", cfg.gpu.tile_m);
    detail::get_to(g, "tile_n", cfg.gpu.tile_n);
    detail::get_to(g, "scaling_tile_rows", cfg.gpu.scaling_tile_rows);
    detail::get_time_ns(g, "poll_interval_ns", cfg.gpu.poll_interval);
    detail::get_time_ns(g, "routing_topk_overhead_ns", cfg.gpu.routing_topk_overhead);
  }
  if (j.contains("hub")) {
    const Json& h = j.at("hub");
    detail::check_keys(h,
                       {"rat_capacity", "rat_banks", "hub_clock_ghz", "spill_penalty_ns",
                        "mmio_latency_ns", "rpm_partition_entries", "bypass_threshold_ns",
                        "egress_slot_ps", "dam_signal_latency_ns", "mem_write_latency_ns",
                        "prefer_rowid_over_mask"},
                       "hub.");
    detail::get_to(h, "rat_capacity", cfg.hub.rat_capacity);
    detail::get_to(h, "rat_banks", cfg.hub.rat_banks);
    detail::get_to(h, "hub_clock_ghz", cfg.hub.hub_clock_ghz);
    detail::get_time_ns(h, "spill_penalty_ns", cfg.hub.spill_penalty);
    detail::get_time_ns(h, "mmio_latency_ns", cfg.hub.mmio_latency);
    detail::get_to(h, "rpm_partition_entries", cfg.hub.rpm_partition_entries);
    detail::get_time_ns(h, "bypass_threshold_ns", cfg.hub.bypass_threshold);
    if (h.contains("egress_slot_ps"))
      cfg.hub.egress_slot = h.at("egress_slot_ps").get<std::int64_t>();
    detail::get_time_ns(h, "dam_signal_latency_ns", cfg.hub.dam_signal_latency);
    detail::get_time_ns(h, "mem_write_latency_ns", cfg.hub.mem_write_latency);
    detail::get_to(h, "prefer_rowid_over_mask", cfg.hub.prefer_rowid_over_mask);
  }
  if (j.contains("baseline")) {
    const Json& b = j.at("baseline");
    detail::check_keys(b, {"host_roundtrip_ns", "pipeline_chunks", "copy_kernel_sms"},
                       "baseline.");
    detail::get_time_ns(b, "host_roundtrip_ns", cfg.baseline.host_roundtrip);
    detail::get_to(b, "pipeline_chunks", cfg.baseline.pipeline_chunks);
    detail::get_to(b, "copy_kernel_sms", cfg.baseline.copy_kernel_sms);
  }
  detail::get_to(j, "event_budget", cfg.event_budget);
  detail::get_to(j, "trace", cfg.trace);
  detail::get_to(j, "shadow_checks", cfg.shadow_checks);
  detail::get_to(j, "out_dir", cfg.out_dir);

  cfg.validate();
  return cfg;
}

inline Json config_to_json(const ExperimentConfig& cfg) {
  Json j;
  j["schema_version"] = cfg.schema_version;
  j["model"] = {{"name", cfg.model.name},
                {"hidden_size", cfg.model.hidden_size},
                {"ffn_hidden_size", cfg.model.ffn_hidden_size},
                {"n_experts", cfg.model.n_experts},
                {"top_k", cfg.model.top_k},
                {"n_layers", cfg.model.n_layers},
                {"dtype_bytes", cfg.model.dtype_bytes}};
  j["n_gpus"] = cfg.n_gpus;
  j["seq_len_per_gpu"] = cfg.seq_len_per_gpu;
  j["target_std"] = cfg.target_std;
  j["seed"] = cfg.seed;
  Json pl = Json::array();
  for (Pipeline p : cfg.pipelines) pl.push_back(pipeline_name(p));
  j["pipelines"] = pl;
  if (!cfg.sweep_seq_len_per_gpu.empty() || !cfg.sweep_target_std.empty() ||
      !cfg.sweep_seeds.empty()) {
    Json s;
    if (!cfg.sweep_seq_len_per_gpu.empty()) s["seq_len_per_gpu"] = cfg.sweep_seq_len_per_gpu;
    if (!cfg.sweep_target_std.empty()) s["target_std"] = cfg.sweep_target_std;
    if (!cfg.sweep_seeds.empty()) s["seeds"] = cfg.sweep_seeds;
    j["sweep"] = s;
  }
  j["fabric"] = {
      {"n_switches", cfg.fabric.n_switches},
      {"gpu_bandwidth_gbs", cfg.fabric.gpu_bandwidth_gbs},
      {"link_latency_ns", cfg.fabric.link_latency / kNanosecond},
      {"flit_bytes", cfg.fabric.flit_bytes},
      {"link_queue_packets", cfg.fabric.link_queue_packets},
      {"crossbar_latency_ns", cfg.fabric.crossbar_latency / kNanosecond},
      {"route_policy",
       cfg.fabric.route_policy == RoutePolicy::kHashed ? "hashed" : "round_robin"},
      {"cost_acks", cfg.fabric.cost_acks},
      {"congestion_highwater", cfg.fabric.congestion_highwater},
      {"util_bucket_ns", cfg.fabric.util_bucket / kNanosecond}};
  j["gpu"] = {{"n_sms", cfg.gpu.n_sms},
              {"kernel_launch_latency_ns", cfg.gpu.kernel_launch_latency / kNanosecond},
              {"store_issue_rate", cfg.gpu.store_issue_rate},
              {"store_request_bytes", cfg.gpu.store_request_bytes},
              {"local_store_gbs", cfg.gpu.local_store_gbs},
              {"compute_tflops", cfg.gpu.compute_tflops},
              {"mem_bandwidth_gbs", cfg.gpu.mem_bandwidth_gbs},
              {"tile_m", cfg.gpu.tile_m},
              {"tile_n", cfg.gpu.tile_n},
              {"scaling_tile_rows", cfg.gpu.scaling_tile_rows},
              {"poll_interval_ns", cfg.gpu.poll_interval / kNanosecond},
              {"routing_topk_overhead_ns", cfg.gpu.routing_topk_overhead / kNanosecond}};
  j["hub"] = {{"rat_capacity", cfg.hub.rat_capacity},
              {"rat_banks", cfg.hub.rat_banks},
              {"hub_clock_ghz", cfg.hub.hub_clock_ghz},
              {"spill_penalty_ns", cfg.hub.spill_penalty / kNanosecond},
              {"mmio_latency_ns", cfg.hub.mmio_latency / kNanosecond},
              {"rpm_partition_entries", cfg.hub.rpm_partition_entries},
              {"bypass_threshold_ns", cfg.hub.bypass_threshold / kNanosecond},
              {"egress_slot_ps", cfg.hub.egress_slot},
              {"dam_signal_latency_ns", cfg.hub.dam_signal_latency / kNanosecond},
              {"mem_write_latency_ns", cfg.hub.mem_write_latency / kNanosecond},
              {"prefer_rowid_over_mask", cfg.hub.prefer_rowid_over_mask}};
  j["baseline"] = {{"host_roundtrip_ns", cfg.baseline.host_roundtrip / kNanosecond},
                   {"pipeline_chunks", cfg.baseline.pipeline_chunks},
                   {"copy_kernel_sms", cfg.baseline.copy_kernel_sms}};
  j["event_budget"] = cfg.event_budget;
  j["trace"] = cfg.trace;
  j["shadow_checks"] = cfg.shadow_checks;
  j["out_dir"] = cfg.out_dir;
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return config_from_json(j);
}

}  // namespace moehub

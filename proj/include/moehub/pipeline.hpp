#pragma once

// Layer-level orchestration: one expert-parallel MoE layer simulated end to
// end under one of several pipelines.
//
//   ideal                only the essential operators, loads already local
//   moehub               destination-agnostic stores, merge stage on,
//                        availability-gated (hardware-tracked) consumers
//   moehub_pkt           merge stage on, poll-gated consumers
//   moehub_dep           merge stage off, availability-gated consumers
//   moehub_base          merge stage off, poll-gated consumers
//   mediated_nonoverlap  count exchange + host sync + bulk copy, serial
//   mediated_pipelined   same, post-mediation phases split into S chunks
//
// Mediated transfers run as explicit copy kernels that occupy SMs; the
// destination-agnostic paths issue stores inline from the producing kernels
// and pay no SM tax. All variants share the fabric, hub ingress, and GPU
// models, so differences between spans come only from the paradigm.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "moehub/config.hpp"
#include "moehub/dam.hpp"
#include "moehub/fabric.hpp"
#include "moehub/gpu.hpp"
#include "moehub/hub.hpp"
#include "moehub/sim.hpp"
#include "moehub/workload.hpp"

namespace moehub {

struct TraceRec {
  SimTime t = 0;
  int gpu = -1;
  std::string kind;
  std::string detail;
};

struct LayerResult {
  Pipeline pipeline{};
  SimTime span = 0;
  int critical_gpu = 0;
  // Wall-clock attribution on the critical GPU; the buckets sum to span.
  SimTime routing = 0;
  SimTime exposed_dispatch = 0;
  SimTime compute = 0;
  SimTime exposed_combine = 0;
  SimTime scaling = 0;
  SimTime mediation = 0;
  SimTime polling = 0;
  std::vector<SimTime> gpu_done;
  std::uint64_t events = 0;
  std::uint64_t fabric_packets = 0;
  std::uint64_t fabric_flits = 0;
  std::uint64_t rpm_inserts = 0;
  std::uint64_t rpm_merges = 0;
  std::uint64_t rpm_emissions = 0;
  std::uint64_t rpm_bypass = 0;
  std::int64_t rat_evictions = 0;
  std::int64_t rat_recoveries = 0;
  std::int64_t dealloc_tiles = 0;
  std::int64_t forced_tiles = 0;
  std::int64_t rows_delivered = 0;
  double min_downlink_util = 0.0;
  double mean_downlink_util = 0.0;
  double sm_busy_us = 0.0;
  double realized_std = 0.0;
  std::map<std::string, SimTime> marks;
  // mean downlink utilization per 1 us bucket across the span (non-ideal runs)
  std::vector<double> util_timeline;
  SimTime util_bucket = kMicrosecond;
  std::vector<TraceRec> trace;
};

// Control plane message codes.
constexpr std::uint32_t kCodeCounts = 10;
constexpr std::uint32_t kCodeAddrs = 11;
constexpr std::uint32_t kCodeDispatchFlag = 1000;  // + chunk
constexpr std::uint32_t kCodeCombineFlag = 2000;   // + chunk

class LayerSim {
 public:
  LayerSim(const ExperimentConfig& cfg, Pipeline pipe, RoutingResult rt)
      : cfg_(cfg), pipe_(pipe), rt_(std::move(rt)) {
    merge_ = pipe == Pipeline::kMoeHub || pipe == Pipeline::kMoeHubPkt;
    dep_ = pipe == Pipeline::kMoeHub || pipe == Pipeline::kMoeHubDep;
    mediated_ =
        pipe == Pipeline::kMediatedNonoverlap || pipe == Pipeline::kMediatedPipelined;
    ideal_ = pipe == Pipeline::kIdeal;
    mh_ = !mediated_ && !ideal_;
    chunks_ = pipe == Pipeline::kMediatedPipelined ? cfg_.baseline.pipeline_chunks : 1;
    eng_.set_event_budget(cfg_.event_budget);
  }

  LayerResult run() {
    build();
    eng_.run();
    return collect();
  }

 private:
  // ---- shorthand ---------------------------------------------------------

  int G() const { return cfg_.n_gpus; }
  int seq() const { return cfg_.seq_len_per_gpu; }
  int K() const { return cfg_.model.top_k; }
  int E() const { return cfg_.model.n_experts; }
  int epg() const { return E() / G(); }
  int row_bytes() const { return cfg_.model.row_bytes(); }
  int chunks_per_row() const { return row_bytes() / 128; }
  int sub_bytes() const { return cfg_.gpu.store_request_bytes; }
  int pkt_bytes() const { return merge_ ? 128 : sub_bytes(); }
  int tile_m() const { return cfg_.gpu.tile_m; }
  std::int64_t cap_rows() const { return std::int64_t(seq()) * G(); }  // worst case / expert
  int grid_n1() const {
    return (cfg_.model.ffn_hidden_size + cfg_.gpu.tile_n - 1) / cfg_.gpu.tile_n;
  }
  int grid_n2() const {
    return (cfg_.model.hidden_size + cfg_.gpu.tile_n - 1) / cfg_.gpu.tile_n;
  }
  std::int64_t rows_of(int e) const { return rt_.expert_tokens[std::size_t(e)]; }
  std::int64_t rows_in_tile(std::int64_t rows, std::int64_t tile) const {
    return std::clamp<std::int64_t>(rows - tile * tile_m(), 0, tile_m());
  }
  int slot_of(int t, int e) const {
    for (int j = 0; j < K(); ++j)
      if (rt_.expert_of(t, j) == e) return j;
    throw SimError("token does not route to expert");
  }

  std::uint64_t data_base(int le) const {
    return 0x100000000000ull + static_cast<std::uint64_t>(le) * data_stride_;
  }
  std::uint64_t meta_base(int le) const {
    return 0x400000000000ull + static_cast<std::uint64_t>(le) * meta_stride_;
  }
  static constexpr std::uint64_t kCombineBase = 0x700000000000ull;

  // ---- block durations ----------------------------------------------------

  SimTime gemm_tile_dur(std::int64_t rows, int kdim) const {
    const double flops = 2.0 * double(rows) * cfg_.gpu.tile_n * kdim;
    const double bytes = 3.0 * cfg_.model.dtype_bytes * double(rows) * cfg_.gpu.tile_n;
    return tb_duration(cfg_.gpu, flops, bytes);
  }
  SimTime scaling_tile_dur(std::int64_t rows) const {
    const double flops = 2.0 * double(rows) * cfg_.model.hidden_size;
    const double bytes =
        cfg_.model.dtype_bytes * double(cfg_.model.hidden_size) * (rows + double(rows) / K());
    return tb_duration(cfg_.gpu, flops, bytes);
  }
  SimTime routing_tb_dur() const {
    const int n = cfg_.gpu.n_sms;
    const double flops = 2.0 * seq() * cfg_.model.hidden_size * E() / n;
    const double bytes =
        double(seq()) * (cfg_.model.hidden_size * cfg_.model.dtype_bytes + 4.0 * E()) / n;
    return tb_duration(cfg_.gpu, flops, bytes);
  }
  // index permutation pass: read and rewrite one entry per (token, slot)
  SimTime shuffle_tb_dur() const {
    const int n = cfg_.gpu.n_sms;
    const double bytes = 8.0 * double(seq()) * K() / n;
    return tb_duration(cfg_.gpu, 0.0, bytes);
  }

  // ---- per-GPU state -------------------------------------------------------

  struct GpuCtx {
    std::unique_ptr<Gpu> gpu;
    std::unique_ptr<Hub> hub;
    std::unique_ptr<Dam> dispatch_dam;
    std::unique_ptr<Dam> combine_dam;
    std::vector<int> g1_kid, g2_kid;                 // per local expert (gated modes)
    std::vector<std::vector<int>> g1_left, g2_left;  // blocks left per row tile
    int scaling_kid = -1;
    int copy_disp_kid = -1, copy_comb_kid = -1;
    // flag-driven gating
    std::vector<int> disp_flags;        // per chunk
    std::vector<bool> local_disp_done;  // per chunk
    std::vector<bool> chunk_launched;
    int comb_flags = 0;
    int counts_recv = 0, addrs_recv = 0;
    // software-orchestrated hub modes: readiness seen before the consumer
    // kernels exist is replayed at launch
    bool polled_launched = false;
    std::vector<std::pair<int, int>> pending_g1;       // (local expert, tile)
    std::vector<int> pending_scaling;                  // combine tiles
    // mediated transfer-completion fences (issue done + write acks back)
    std::vector<std::int64_t> disp_ack_need;  // cumulative per chunk
    std::vector<bool> disp_chunk_issued;
    std::int64_t disp_acks = 0;
    int disp_next_fence = 0;
    std::vector<std::int64_t> chunk_g2_left;
    std::int64_t comb_acks = 0, comb_ack_need = 0;
    bool comb_fenced = false;
    int chunks_unlaunched = 0;         // consumer chunks not yet turned into kernels
    std::int64_t comb_tiles_left = 0;  // combine pushes still to come
    int comb_jobs_out = 0;
    bool comb_all_pushed = false;
    bool scaling_started = false;
    int gemms_done = 0;  // ideal / flag modes: completed second-stage kernels
    std::vector<ActInterval> extra;  // host-sync windows
    SimTime done = -1;
    std::map<std::string, SimTime> marks;
  };

  // ---- construction --------------------------------------------------------

  void build() {
    data_stride_ = ((cap_rows() * std::uint64_t(row_bytes())) / 4096 + 2) * 4096;
    meta_stride_ = ((cap_rows() * 128ull) / 4096 + 2) * 4096;
    build_layout();
    fab_ = std::make_unique<Fabric>(eng_, cfg_.fabric, G());
    ctx_.resize(std::size_t(G()));
    meta_have_.resize(std::size_t(G()));
    meta_waiters_.resize(std::size_t(G()));
    for (int g = 0; g < G(); ++g) {
      GpuCtx& c = ctx_[std::size_t(g)];
      c.gpu = std::make_unique<Gpu>(eng_, cfg_.gpu, g);
      c.disp_flags.assign(std::size_t(chunks_), 0);
      c.local_disp_done.assign(std::size_t(chunks_), false);
      c.chunk_launched.assign(std::size_t(chunks_), false);
      c.chunks_unlaunched = (mh_ || ideal_) ? 0 : chunks_;
      if (!ideal_) {
        c.hub = std::make_unique<Hub>(eng_, cfg_, *fab_, g, merge_);
        c.hub->set_on_control([this, g](const Packet& p) { on_control(g, p); });
        c.hub->set_on_meta(
            [this, g](int region, std::int64_t row) { on_meta(g, region, row); });
        if (mediated_) {
          c.hub->set_on_ack([this, g](const Packet& p) { on_mediated_ack(g, p); });
          const bool acked = cfg_.fabric.cost_acks;
          const int per_row = row_bytes() / sub_bytes();
          const int csz = (seq() + chunks_ - 1) / chunks_;
          c.disp_ack_need.assign(std::size_t(chunks_), 0);
          c.disp_chunk_issued.assign(std::size_t(chunks_), false);
          std::int64_t cum = 0;
          for (int ch = 0; ch < chunks_; ++ch) {
            if (acked) {
              const int lo = ch * csz, hi = std::min(seq(), (ch + 1) * csz);
              for (int ti = lo; ti < hi; ++ti)
                for (int j = 0; j < K(); ++j)
                  if (rt_.expert_gpu(rt_.expert_of(g * seq() + ti, j)) != g) cum += per_row;
            }
            c.disp_ack_need[std::size_t(ch)] = cum;
          }
          if (acked) {
            for (int le = 0; le < epg(); ++le) {
              const int e = g * epg() + le;
              for (int t : buf_tokens_[std::size_t(e)])
                if (t / seq() != g) c.comb_ack_need += per_row;
            }
          }
        }
      }
      if (mh_) bind_mh_regions(g);
      if (mediated_ && dep_) throw SimError("mediated pipelines have no availability unit");
    }
    for (int g = 0; g < G(); ++g) {
      if (mh_ && dep_) launch_gated_kernels(g);
      const int gg = g;
      eng_.schedule_at(cfg_.gpu.kernel_launch_latency, [this, gg] { launch_routing(gg); });
    }
  }

  // Consumer-side buffer order for the mediated flavors: rows grouped by
  // (chunk, source GPU, token). Precomputed because both endpoints must agree
  // on it for address-carrying stores.
  void build_layout() {
    if (!mediated_ && !ideal_) return;
    buf_tokens_.assign(std::size_t(E()), {});
    buf_slot_.assign(std::size_t(E()), {});
    chunk_begin_.assign(std::size_t(E()), std::vector<std::int64_t>(std::size_t(chunks_) + 1, 0));
    idx_in_buf_.assign(std::size_t(rt_.n_tokens) * K(), -1);
    const int csz = (seq() + chunks_ - 1) / chunks_;
    for (int e = 0; e < E(); ++e) {
      for (int c = 0; c < chunks_; ++c) {
        chunk_begin_[std::size_t(e)][std::size_t(c)] =
            static_cast<std::int64_t>(buf_tokens_[std::size_t(e)].size());
        for (int s = 0; s < G(); ++s) {
          const int lo = c * csz, hi = std::min(seq(), (c + 1) * csz);
          for (int ti = lo; ti < hi; ++ti) {
            const int t = s * seq() + ti;
            for (int j = 0; j < K(); ++j) {
              if (rt_.expert_of(t, j) != e) continue;
              idx_in_buf_[std::size_t(t) * K() + j] =
                  static_cast<std::int64_t>(buf_tokens_[std::size_t(e)].size());
              buf_tokens_[std::size_t(e)].push_back(t);
              buf_slot_[std::size_t(e)].push_back(static_cast<std::int8_t>(j));
            }
          }
        }
      }
      chunk_begin_[std::size_t(e)][std::size_t(chunks_)] =
          static_cast<std::int64_t>(buf_tokens_[std::size_t(e)].size());
    }
  }

  // Both consumer gating styles watch the same per-tile write-ack counts: the
  // hardware path signals from them, the software path polls counters that
  // advance with the same acks.
  void bind_mh_regions(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    c.dispatch_dam = std::make_unique<Dam>(
        [this, g](int table, int tile, bool forced) { on_disp_ready(g, table, tile, forced); },
        [this, g](int table, int tile) { on_disp_dealloc(g, table, tile); },
        cfg_.shadow_checks);
    c.combine_dam = std::make_unique<Dam>(
        [this, g](int, int tile, bool forced) { on_comb_ready(g, tile, forced); },
        [](int, int) { throw SimError("combine tile starved to zero"); },
        cfg_.shadow_checks);
    for (int le = 0; le < epg(); ++le) {
      RegionDesc rd;
      rd.name = "expert" + std::to_string(g * epg() + le);
      rd.base = data_base(le);
      rd.row_bytes = row_bytes();
      rd.capacity_rows = cap_rows();
      DamTableDesc td;
      td.name = rd.name;
      td.base = rd.base;
      td.row_bytes = rd.row_bytes;
      td.capacity_rows = rd.capacity_rows;
      td.tile_rows = tile_m();
      td.packet_bytes = pkt_bytes();
      const int table = c.dispatch_dam->add_table(td);
      c.hub->bind_rowsp_region(rd, c.dispatch_dam.get(), table);
    }
    for (int le = 0; le < epg(); ++le) {
      RegionDesc rd;
      rd.name = "meta" + std::to_string(g * epg() + le);
      rd.base = meta_base(le);
      rd.row_bytes = 128;
      rd.capacity_rows = cap_rows();
      c.hub->bind_rowsp_region(rd, nullptr, -1, /*meta=*/true);
    }
    DamTableDesc td;
    td.name = "combine" + std::to_string(g);
    td.base = kCombineBase;
    td.row_bytes = row_bytes();
    td.capacity_rows = std::int64_t(seq()) * K();
    td.tile_rows = cfg_.gpu.scaling_tile_rows;
    td.packet_bytes = pkt_bytes();
    const int ctable = c.combine_dam->add_table(td);
    c.combine_dam->set_global_target(std::int64_t(seq()) * K() * (row_bytes() / pkt_bytes()));
    c.hub->bind_plain_region(kCombineBase, row_bytes(), std::int64_t(seq()) * K(),
                             c.combine_dam.get(), ctable);
  }

  // Conservative, availability-gated kernel set: launched before any routing
  // information exists, sized for the worst case, trimmed by deallocation.
  void launch_gated_kernels(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    const std::int64_t tiles = (cap_rows() + tile_m() - 1) / tile_m();
    const SimTime d1 = gemm_tile_dur(tile_m(), cfg_.model.hidden_size);
    const SimTime d2 = gemm_tile_dur(tile_m(), cfg_.model.ffn_hidden_size);
    for (int le = 0; le < epg(); ++le) {
      const int e = g * epg() + le;
      c.g1_left.push_back(std::vector<int>(std::size_t(tiles), grid_n1()));
      c.g2_left.push_back(std::vector<int>(std::size_t(tiles), grid_n2()));
      c.g1_kid.push_back(c.gpu->launch(
          "gemm1_e" + std::to_string(e), Activity::kCompute,
          static_cast<int>(tiles) * grid_n1(), [d1](int) { return d1; }, GateMode::kSignal,
          nullptr, [this, g, le](int tb) { on_g1_tb_done(g, le, tb); }));
      c.g2_kid.push_back(c.gpu->launch(
          "gemm2_e" + std::to_string(e), Activity::kCompute,
          static_cast<int>(tiles) * grid_n2(), [d2](int) { return d2; }, GateMode::kSignal,
          nullptr, [this, g, le](int tb) { on_g2_tb_done(g, le, tb); }));
      c.comb_tiles_left += (rows_of(e) + tile_m() - 1) / tile_m();
    }
    const std::int64_t srows = std::int64_t(seq()) * K();
    const int trows = cfg_.gpu.scaling_tile_rows;
    const std::int64_t stiles = (srows + trows - 1) / trows;
    c.scaling_kid = c.gpu->launch(
        "scaling", Activity::kScaling, static_cast<int>(stiles),
        [this, srows, trows](int tb) {
          return scaling_tile_dur(std::min<std::int64_t>(trows, srows - std::int64_t(tb) * trows));
        },
        GateMode::kSignal, [this, g] { on_scaling_complete(g); });
  }

  // Software-orchestrated hub modes: once peer row counts are in, size the
  // consumer kernels exactly and let their blocks poll for data. A polling
  // block occupies an SM while it waits, so readiness checks compete with
  // useful compute; the hardware-signaled path avoids both the spin occupancy
  // and the poll-quantum start granularity.
  void on_mh_counts_ready(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    std::int64_t target = 0;
    for (int le = 0; le < epg(); ++le)
      target += rows_of(g * epg() + le) * (row_bytes() / pkt_bytes());
    c.dispatch_dam->set_global_target(target);
    eng_.schedule_in(cfg_.gpu.poll_interval + cfg_.gpu.kernel_launch_latency,
                     [this, g] { launch_polled_kernels(g); });
  }

  void launch_polled_kernels(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    c.polled_launched = true;
    for (int le = 0; le < epg(); ++le) {
      const int e = g * epg() + le;
      const std::int64_t rows = rows_of(e);
      const std::int64_t tiles = (rows + tile_m() - 1) / tile_m();
      c.g1_left.push_back(std::vector<int>(std::size_t(tiles), grid_n1()));
      c.g2_left.push_back(std::vector<int>(std::size_t(tiles), grid_n2()));
      if (tiles == 0) {
        c.g1_kid.push_back(-1);
        c.g2_kid.push_back(-1);
        continue;
      }
      auto dur1 = [this, rows](int tb) {
        return gemm_tile_dur(rows_in_tile(rows, tb / grid_n1()), cfg_.model.hidden_size);
      };
      auto dur2 = [this, rows](int tb) {
        return gemm_tile_dur(rows_in_tile(rows, tb / grid_n2()), cfg_.model.ffn_hidden_size);
      };
      c.g1_kid.push_back(c.gpu->launch(
          "gemm1_e" + std::to_string(e), Activity::kCompute,
          static_cast<int>(tiles) * grid_n1(), dur1, GateMode::kPoll, nullptr,
          [this, g, le](int tb) { on_g1_tb_done(g, le, tb); }));
      c.g2_kid.push_back(c.gpu->launch(
          "gemm2_e" + std::to_string(e), Activity::kCompute,
          static_cast<int>(tiles) * grid_n2(), dur2, GateMode::kSignal, nullptr,
          [this, g, le](int tb) { on_g2_tb_done(g, le, tb); }));
      c.comb_tiles_left += tiles;
    }
    for (auto [le, tile] : c.pending_g1)
      c.gpu->release(c.g1_kid[std::size_t(le)], tile * grid_n1(), (tile + 1) * grid_n1());
    c.pending_g1.clear();
    // the scaling kernel is stream-ordered behind the expert work, so its
    // polling blocks only occupy SMs once local combine pushes are queued
    if (c.comb_tiles_left == 0) launch_polled_scaling(g);
  }

  void launch_polled_scaling(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    const std::int64_t srows = std::int64_t(seq()) * K();
    const int trows = cfg_.gpu.scaling_tile_rows;
    const std::int64_t stiles = (srows + trows - 1) / trows;
    c.scaling_kid = c.gpu->launch(
        "scaling", Activity::kScaling, static_cast<int>(stiles),
        [this, srows, trows](int tb) {
          return scaling_tile_dur(std::min<std::int64_t>(trows, srows - std::int64_t(tb) * trows));
        },
        GateMode::kPoll, [this, g] { on_scaling_complete(g); });
    for (int tile : c.pending_scaling) c.gpu->release(c.scaling_kid, tile, tile + 1);
    c.pending_scaling.clear();
  }

  void launch_routing(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    const SimTime rd = routing_tb_dur();
    c.gpu->launch("routing", Activity::kRouting, cfg_.gpu.n_sms, [rd](int) { return rd; },
                  GateMode::kNone, [this, g] {
                    GpuCtx& cc = ctx_[std::size_t(g)];
                    const SimTime tk = cfg_.gpu.routing_topk_overhead;
                    cc.gpu->launch("topk", Activity::kRouting, 1, [tk](int) { return tk; },
                                   GateMode::kNone, [this, g] { on_routing_done(g); });
                  });
  }

  void on_routing_done(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    c.marks["routing_complete"] = eng_.now();
    if (ideal_) {
      launch_local_gemms(g);
      return;
    }
    if (mh_) {
      // software orchestration advertises per-expert row counts first, so
      // consumers can be sized; the tiny control packets ride ahead of data
      if (!dep_) c.hub->push_remote_job(flags_job(g, kCodeCounts));
      push_dispatch_jobs(g);
      if (dep_ && ++routing_done_ == G()) {
        for (int gg = 0; gg < G(); ++gg) {
          std::int64_t target = 0;
          for (int le = 0; le < epg(); ++le)
            target += rows_of(gg * epg() + le) * (row_bytes() / pkt_bytes());
          ctx_[std::size_t(gg)].dispatch_dam->set_global_target(target);
        }
      }
      if (!dep_ && G() == 1) on_mh_counts_ready(g);
      return;
    }
    // mediated: local permutation pass before anything can move
    const SimTime sd = shuffle_tb_dur();
    eng_.schedule_in(cfg_.gpu.kernel_launch_latency, [this, g, sd] {
      ctx_[std::size_t(g)].gpu->launch(
          "shuffle", Activity::kMediation, cfg_.gpu.n_sms, [sd](int) { return sd; },
          GateMode::kNone, [this, g] {
            ctx_[std::size_t(g)].marks["shuffle_complete"] = eng_.now();
            if (++shuffled_ == G()) {
              if (G() == 1) {
                host_sync(0);
              } else {
                for (int gg = 0; gg < G(); ++gg)
                  ctx_[std::size_t(gg)].hub->push_remote_job(flags_job(gg, kCodeCounts));
              }
            }
          });
    });
  }

  // ---- producer: dispatch ---------------------------------------------------

  void push_dispatch_jobs(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    c.marks["dispatch_start"] = eng_.now();
    for (int ch = 0; ch < chunks_; ++ch) {
      const int chv = ch;
      if (mediated_) {
        Hub::Job rj = mediated_dispatch_job(g, chv, /*remote=*/true);
        rj.on_done = [this, g, chv] { on_disp_job_done(g, chv, false); };
        c.hub->push_remote_job(std::move(rj));
        Hub::Job lj = mediated_dispatch_job(g, chv, /*remote=*/false);
        lj.on_done = [this, g, chv] { on_disp_job_done(g, chv, true); };
        c.hub->push_local_job(std::move(lj));
      } else {
        Hub::Job rj = mh_dispatch_job(g, /*remote=*/true);
        rj.on_done = [this, g] {
          ctx_[std::size_t(g)].marks["dispatch_issued"] = eng_.now();
        };
        c.hub->push_remote_job(std::move(rj));
        Hub::Job lj = mh_dispatch_job(g, /*remote=*/false);
        lj.on_done = [this, g] { on_disp_job_done(g, 0, true); };
        c.hub->push_local_job(std::move(lj));
      }
    }
  }

  Hub::Job mh_dispatch_job(int g, bool remote) {
    struct St {
      int ti = 0, j = 0, c = 0, h = 0;
      bool meta = false;
    };
    auto st = std::make_shared<St>();
    Hub::Job job;
    job.next = [this, g, remote, st](Packet& p) -> bool {
      const int sq = seq(), k = K();
      const int nchunks = chunks_per_row();
      const bool whole = merge_ && !remote;
      const int halves = whole ? 1 : 128 / sub_bytes();
      while (st->ti < sq) {
        const int t = g * sq + st->ti;
        const int e = rt_.expert_of(t, st->j);
        const int dst = rt_.expert_gpu(e);
        if ((dst == g) == remote) {  // not this stream's traffic
          st->c = st->h = 0;
          st->meta = false;
          if (++st->j >= k) {
            st->j = 0;
            ++st->ti;
          }
          continue;
        }
        const int le = e % epg();
        p = Packet{};
        p.dst = static_cast<std::int16_t>(dst);
        p.row_id = t;
        p.token_tag = std::uint64_t(t);
        if (!st->meta) {
          p.kind = PacketKind::kRowsp;
          p.region = le;
          p.chunk = st->c;
          if (whole) {
            p.payload_bytes = 128;
            p.subblock_mask = full_chunk_mask();
          } else {
            p.payload_bytes = static_cast<std::uint16_t>(sub_bytes());
            p.subblock_mask = subblock_mask_for(st->h * sub_bytes(), sub_bytes());
          }
          if (++st->h >= halves) {
            st->h = 0;
            if (++st->c >= nchunks) {
              st->c = 0;
              st->meta = true;
            }
          }
          return true;
        }
        p.kind = PacketKind::kRowspNop;
        p.region = epg() + le;
        p.chunk = 0;
        p.subblock_mask = full_chunk_mask();
        p.payload_bytes = 16;
        st->meta = false;
        if (++st->j >= k) {
          st->j = 0;
          ++st->ti;
        }
        return true;
      }
      return false;
    };
    return job;
  }

  Hub::Job mediated_dispatch_job(int g, int chunk, bool remote) {
    struct St {
      int ti, j = 0, c = 0, h = 0;
    };
    const int csz = (seq() + chunks_ - 1) / chunks_;
    auto st = std::make_shared<St>();
    st->ti = chunk * csz;
    const int hi = std::min(seq(), (chunk + 1) * csz);
    Hub::Job job;
    job.next = [this, g, remote, st, hi](Packet& p) -> bool {
      const int k = K();
      const int nchunks = chunks_per_row();
      const int halves = remote ? 128 / sub_bytes() : 1;
      while (st->ti < hi) {
        const int t = g * seq() + st->ti;
        const int e = rt_.expert_of(t, st->j);
        const int dst = rt_.expert_gpu(e);
        if ((dst == g) == remote) {
          st->c = st->h = 0;
          if (++st->j >= k) {
            st->j = 0;
            ++st->ti;
          }
          continue;
        }
        const std::int64_t idx = idx_in_buf_[std::size_t(t) * k + st->j];
        p = Packet{};
        p.dst = static_cast<std::int16_t>(dst);
        p.kind = PacketKind::kPlainStore;
        p.phys_addr = data_base(e % epg()) + std::uint64_t(idx) * row_bytes() +
                      std::uint64_t(st->c) * 128 + std::uint64_t(st->h) * sub_bytes();
        p.payload_bytes = static_cast<std::uint16_t>(remote ? sub_bytes() : 128);
        p.subblock_mask = remote ? subblock_mask_for(st->h * sub_bytes(), sub_bytes())
                                 : full_chunk_mask();
        p.row_id = idx;
        p.token_tag = std::uint64_t(t);
        if (++st->h >= halves) {
          st->h = 0;
          if (++st->c >= nchunks) {
            st->c = 0;
            if (++st->j >= k) {
              st->j = 0;
              ++st->ti;
            }
          }
        }
        return true;
      }
      return false;
    };
    return job;
  }

  Hub::Job flags_job(int g, std::uint32_t code) {
    auto next_dst = std::make_shared<int>(0);
    Hub::Job job;
    job.next = [this, g, code, next_dst](Packet& p) -> bool {
      while (*next_dst < G() && *next_dst == g) ++*next_dst;
      if (*next_dst >= G()) return false;
      p = Packet{};
      p.dst = static_cast<std::int16_t>(*next_dst);
      p.kind = PacketKind::kControl;
      p.control_code = code;
      p.payload_bytes = 16;
      p.row_id = std::int64_t(code) * 131 + *next_dst;
      ++*next_dst;
      return true;
    };
    return job;
  }

  void on_disp_job_done(int g, int chunk, bool local) {
    GpuCtx& c = ctx_[std::size_t(g)];
    if (local) {
      c.local_disp_done[std::size_t(chunk)] = true;
      maybe_chunk_ready(g, chunk);
      return;
    }
    if (mediated_) {
      c.disp_chunk_issued[std::size_t(chunk)] = true;
      maybe_disp_fence(g);
    }
  }

  // A chunk's transfer is complete when its stores are issued and their write
  // acks are back; only then can its readiness flag be raised. The copy kernel
  // holds its SMs until the whole phase is fenced.
  void maybe_disp_fence(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    while (c.disp_next_fence < chunks_ &&
           c.disp_chunk_issued[std::size_t(c.disp_next_fence)] &&
           c.disp_acks >= c.disp_ack_need[std::size_t(c.disp_next_fence)]) {
      c.hub->push_remote_job(flags_job(g, kCodeDispatchFlag + std::uint32_t(c.disp_next_fence)));
      ++c.disp_next_fence;
    }
    if (c.disp_next_fence == chunks_ && c.copy_disp_kid >= 0) {
      c.gpu->release(c.copy_disp_kid, 0, cfg_.baseline.copy_kernel_sms, 0);
      c.copy_disp_kid = -2;
    }
  }

  void maybe_comb_fence(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    if (c.comb_fenced || !c.comb_all_pushed || c.comb_jobs_out != 0) return;
    if (c.comb_acks < c.comb_ack_need) return;
    c.comb_fenced = true;
    for (int ch = 0; ch < chunks_; ++ch)
      c.hub->push_remote_job(flags_job(g, kCodeCombineFlag + std::uint32_t(ch)));
    if (c.copy_comb_kid >= 0) {
      c.gpu->release(c.copy_comb_kid, 0, cfg_.baseline.copy_kernel_sms, 0);
      c.copy_comb_kid = -2;
    }
    maybe_scale(g);
  }

  void on_mediated_ack(int g, const Packet& p) {
    GpuCtx& c = ctx_[std::size_t(g)];
    if (p.phys_addr >= kCombineBase) {
      ++c.comb_acks;
      maybe_comb_fence(g);
    } else {
      ++c.disp_acks;
      maybe_disp_fence(g);
    }
  }

  // ---- control plane ---------------------------------------------------------

  void on_control(int g, const Packet& p) {
    GpuCtx& c = ctx_[std::size_t(g)];
    const std::uint32_t code = p.control_code;
    if (code == kCodeCounts) {
      if (++c.counts_recv < G() - 1) return;
      if (mh_) {
        on_mh_counts_ready(g);
      } else if (++counts_done_ == G()) {
        host_sync(0);
      }
    } else if (code == kCodeAddrs) {
      if (++c.addrs_recv == G() - 1 && ++addrs_done_ == G()) host_sync(1);
    } else if (code >= kCodeCombineFlag) {
      ++c.comb_flags;
      maybe_scale(g);
    } else if (code >= kCodeDispatchFlag) {
      const int chunk = static_cast<int>(code - kCodeDispatchFlag);
      ++c.disp_flags[std::size_t(chunk)];
      maybe_chunk_ready(g, chunk);
    } else {
      throw SimError("unknown control code " + std::to_string(code));
    }
  }

  // Two host round-trips: counts up, buffer addresses back.
  void host_sync(int which) {
    const SimTime t0 = eng_.now();
    for (int g = 0; g < G(); ++g)
      ctx_[std::size_t(g)].extra.push_back({t0, t0 + cfg_.baseline.host_roundtrip,
                                            Activity::kMediation});
    eng_.schedule_in(cfg_.baseline.host_roundtrip, [this, which] {
      if (which == 0) {
        for (int g = 0; g < G(); ++g)
          ctx_[std::size_t(g)].hub->push_remote_job(flags_job(g, kCodeAddrs));
        if (G() == 1) host_sync(1);  // nothing to exchange, straight to phase 2
      } else {
        for (int g = 0; g < G(); ++g) start_mediated_dispatch(g);
      }
    });
  }

  void start_mediated_dispatch(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    c.marks["mediation_done"] = eng_.now();
    eng_.schedule_in(cfg_.gpu.kernel_launch_latency, [this, g] {
      GpuCtx& cc = ctx_[std::size_t(g)];
      cc.copy_disp_kid =
          cc.gpu->launch("copy_dispatch", Activity::kMediation, cfg_.baseline.copy_kernel_sms,
                         [](int) { return SimTime{0}; }, GateMode::kPoll);
      push_dispatch_jobs(g);
    });
  }

  // ---- consumer: flag-gated launches ------------------------------------------

  void maybe_chunk_ready(int g, int chunk) {
    if (mh_ || ideal_) return;
    GpuCtx& c = ctx_[std::size_t(g)];
    if (c.chunk_launched[std::size_t(chunk)]) return;
    if (c.disp_flags[std::size_t(chunk)] < G() - 1) return;
    if (!c.local_disp_done[std::size_t(chunk)]) return;
    c.chunk_launched[std::size_t(chunk)] = true;
    if (chunk == chunks_ - 1) c.marks["arrival_complete"] = eng_.now();
    // a poll quantum to observe the flags, then a host-driven launch
    eng_.schedule_in(cfg_.gpu.poll_interval + cfg_.gpu.kernel_launch_latency,
                     [this, g, chunk] { launch_chunk_gemms(g, chunk); });
  }

  void launch_chunk_gemms(int g, int chunk) {
    GpuCtx& c = ctx_[std::size_t(g)];
    --c.chunks_unlaunched;
    std::int64_t tiles_in_chunk = 0;
    std::int64_t push_units = 0;
    for (int le = 0; le < epg(); ++le) {
      const int e = g * epg() + le;
      const auto [r0, r1] = chunk_rows(e, chunk);
      const std::int64_t t = (r1 - r0 + tile_m() - 1) / tile_m();
      tiles_in_chunk += t;
      if (t > 0) push_units += mediated_ ? 1 : t;
    }
    if (tiles_in_chunk == 0) {
      on_chunk_combine_exhausted(g);  // nothing to compute, peers still need flags
      return;
    }
    if (mediated_) {
      if (c.chunk_g2_left.empty()) c.chunk_g2_left.assign(std::size_t(chunks_), 0);
      c.chunk_g2_left[std::size_t(chunk)] = tiles_in_chunk;
    }
    c.comb_tiles_left += push_units;
    for (int le = 0; le < epg(); ++le) {
      const int e = g * epg() + le;
      const auto [r0, r1] = chunk_rows(e, chunk);
      if (r1 == r0) continue;
      launch_gemm_pair(g, le, chunk, r0, r1);
    }
  }

  std::pair<std::int64_t, std::int64_t> chunk_rows(int e, int chunk) const {
    if (mediated_)
      return {chunk_begin_[std::size_t(e)][std::size_t(chunk)],
              chunk_begin_[std::size_t(e)][std::size_t(chunk) + 1]};
    return {0, rows_of(e)};  // flag-gated hub modes: one chunk, all realized rows
  }

  // Realized-size first and second stage for rows [r0, r1), chained with a
  // launch gap. With hub hardware the second-stage epilogue streams each row
  // tile straight into combine stores; the mediated flavors hand off only at
  // chunk boundaries (the copy kernel works from completed chunks).
  void launch_gemm_pair(int g, int le, int chunk, std::int64_t r0, std::int64_t r1) {
    GpuCtx& c = ctx_[std::size_t(g)];
    const std::int64_t rows = r1 - r0;
    const std::int64_t tiles = (rows + tile_m() - 1) / tile_m();
    const int e = g * epg() + le;
    auto dur1 = [this, rows](int tb) {
      return gemm_tile_dur(rows_in_tile(rows, tb / grid_n1()), cfg_.model.hidden_size);
    };
    c.gpu->launch(
        "gemm1_e" + std::to_string(e), Activity::kCompute, static_cast<int>(tiles) * grid_n1(),
        dur1, GateMode::kNone, [this, g, le, chunk, r0, rows, tiles] {
          eng_.schedule_in(cfg_.gpu.kernel_launch_latency, [this, g, le, chunk, r0, rows,
                                                            tiles] {
            GpuCtx& cc = ctx_[std::size_t(g)];
            const int ee = g * epg() + le;
            auto dur2 = [this, rows](int tb) {
              return gemm_tile_dur(rows_in_tile(rows, tb / grid_n2()),
                                   cfg_.model.ffn_hidden_size);
            };
            auto left = std::make_shared<std::vector<int>>(std::size_t(tiles), grid_n2());
            cc.gpu->launch("gemm2_e" + std::to_string(ee), Activity::kCompute,
                           static_cast<int>(tiles) * grid_n2(), dur2, GateMode::kNone, nullptr,
                           [this, g, le, chunk, r0, rows, left](int tb) {
                             const int tile = tb / grid_n2();
                             if (--(*left)[std::size_t(tile)] > 0) return;
                             if (mediated_) {
                               on_mediated_g2_tile(g, chunk);
                               return;
                             }
                             const std::int64_t a = r0 + std::int64_t(tile) * tile_m();
                             push_combine(g, le, a, a + rows_in_tile(rows, tile));
                           });
          });
        });
  }

  void on_mediated_g2_tile(int g, int chunk) {
    GpuCtx& c = ctx_[std::size_t(g)];
    if (--c.chunk_g2_left[std::size_t(chunk)] > 0) return;
    for (int le = 0; le < epg(); ++le) {
      const auto [r0, r1] = chunk_rows(g * epg() + le, chunk);
      if (r1 > r0) push_combine(g, le, r0, r1);
    }
  }

  // ---- availability-gated path ---------------------------------------------

  void on_disp_ready(int g, int le, int tile, bool forced) {
    GpuCtx& c = ctx_[std::size_t(g)];
    if (c.marks.find("first_tile_ready") == c.marks.end())
      c.marks["first_tile_ready"] = eng_.now();
    c.marks["last_tile_ready"] = eng_.now();
    if (!dep_) {
      // polled consumers see the counter move with the landing ack; the poll
      // quantum and spin occupancy are charged inside the GPU model
      if (!c.polled_launched) {
        c.pending_g1.emplace_back(le, tile);
        return;
      }
      c.gpu->release(c.g1_kid[std::size_t(le)], tile * grid_n1(), (tile + 1) * grid_n1());
      return;
    }
    const std::int64_t rows = rows_in_tile(rows_of(g * epg() + le), tile);
    const SimTime ovr = forced ? gemm_tile_dur(rows, cfg_.model.hidden_size) : SimTime{-1};
    eng_.schedule_in(cfg_.hub.dam_signal_latency, [this, g, le, tile, ovr] {
      GpuCtx& cc = ctx_[std::size_t(g)];
      cc.gpu->release(cc.g1_kid[std::size_t(le)], tile * grid_n1(), (tile + 1) * grid_n1(), ovr);
    });
  }

  void on_disp_dealloc(int g, int le, int tile) {
    if (!dep_) return;  // consumers were sized from real counts, nothing to trim
    GpuCtx& c = ctx_[std::size_t(g)];
    c.gpu->deallocate(c.g1_kid[std::size_t(le)], tile * grid_n1(), (tile + 1) * grid_n1());
    c.gpu->deallocate(c.g2_kid[std::size_t(le)], tile * grid_n2(), (tile + 1) * grid_n2());
    c.g1_left[std::size_t(le)][std::size_t(tile)] = -1;
    c.g2_left[std::size_t(le)][std::size_t(tile)] = -1;
  }

  void on_g1_tb_done(int g, int le, int tb) {
    GpuCtx& c = ctx_[std::size_t(g)];
    const int tile = tb / grid_n1();
    if (--c.g1_left[std::size_t(le)][std::size_t(tile)] > 0) return;
    if (!dep_) {  // stream-ordered handoff, second stage already sized right
      c.gpu->release(c.g2_kid[std::size_t(le)], tile * grid_n2(), (tile + 1) * grid_n2());
      return;
    }
    const std::int64_t rows = rows_in_tile(rows_of(g * epg() + le), tile);
    const SimTime ovr =
        rows < tile_m() ? gemm_tile_dur(rows, cfg_.model.ffn_hidden_size) : SimTime{-1};
    eng_.schedule_in(cfg_.hub.dam_signal_latency, [this, g, le, tile, ovr] {
      GpuCtx& cc = ctx_[std::size_t(g)];
      cc.gpu->release(cc.g2_kid[std::size_t(le)], tile * grid_n2(), (tile + 1) * grid_n2(), ovr);
    });
  }

  void on_g2_tb_done(int g, int le, int tb) {
    GpuCtx& c = ctx_[std::size_t(g)];
    const int tile = tb / grid_n2();
    if (--c.g2_left[std::size_t(le)][std::size_t(tile)] > 0) return;
    const std::int64_t a = std::int64_t(tile) * tile_m();
    push_combine(g, le, a, a + rows_in_tile(rows_of(g * epg() + le), tile));
  }

  void on_comb_ready(int g, int tile, bool /*forced*/) {
    if (!dep_) {
      GpuCtx& c = ctx_[std::size_t(g)];
      if (c.scaling_kid < 0) {
        c.pending_scaling.push_back(tile);
        return;
      }
      c.gpu->release(c.scaling_kid, tile, tile + 1);
      return;
    }
    eng_.schedule_in(cfg_.hub.dam_signal_latency, [this, g, tile] {
      GpuCtx& cc = ctx_[std::size_t(g)];
      cc.gpu->release(cc.scaling_kid, tile, tile + 1);
    });
  }

  // ---- combine -----------------------------------------------------------------

  // Expert-side rows [r0, r1) finished the second stage; send them home. In
  // the hub modes the destination comes from the metadata side channel, so the
  // push waits until those descriptor rows are readable.
  void push_combine(int g, int le, std::int64_t r0, std::int64_t r1) {
    if (!mh_) {
      do_push_combine(g, le, r0, r1);
      return;
    }
    GpuCtx& c = ctx_[std::size_t(g)];
    int missing = 0;
    auto wait = std::make_shared<MetaWait>();
    for (std::int64_t r = r0; r < r1; ++r) {
      const std::int64_t t = c.hub->aau().arrival_order(le)[std::size_t(r)];
      const std::int64_t key = meta_key(le, t);
      if (meta_have_[std::size_t(g)].count(key)) continue;
      ++missing;
      meta_waiters_[std::size_t(g)][key].push_back(wait);
    }
    if (missing == 0) {
      do_push_combine(g, le, r0, r1);
      return;
    }
    wait->le = le;
    wait->r0 = r0;
    wait->r1 = r1;
    wait->missing = missing;
  }

  void do_push_combine(int g, int le, std::int64_t r0, std::int64_t r1) {
    GpuCtx& c = ctx_[std::size_t(g)];
    if (mediated_ && c.copy_comb_kid < 0) {
      c.copy_comb_kid =
          c.gpu->launch("copy_combine", Activity::kMediation, cfg_.baseline.copy_kernel_sms,
                        [](int) { return SimTime{0}; }, GateMode::kPoll);
    }
    for (int pass = 0; pass < 2; ++pass) {
      const bool remote = pass == 0;
      Hub::Job job = combine_job(g, le, r0, r1, remote);
      if (!job.next) continue;
      ++c.comb_jobs_out;
      job.on_done = [this, g] { on_comb_job_done(g); };
      if (remote)
        c.hub->push_remote_job(std::move(job));
      else
        c.hub->push_local_job(std::move(job));
    }
    if (--c.comb_tiles_left == 0) on_chunk_combine_exhausted(g);
    maybe_scale(g);
  }

  // All combine pushes that will ever happen on this GPU are queued; peers can
  // be told, once the queued data is out.
  void on_chunk_combine_exhausted(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    if (c.comb_tiles_left != 0 || c.chunks_unlaunched != 0 || c.comb_all_pushed) return;
    c.comb_all_pushed = true;
    if (mh_) {  // consumers track combine arrivals directly
      if (!dep_ && c.scaling_kid < 0) launch_polled_scaling(g);
      return;
    }
    maybe_comb_fence(g);
  }

  void on_comb_job_done(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    --c.comb_jobs_out;
    if (mediated_) maybe_comb_fence(g);
    maybe_scale(g);
  }

  Hub::Job combine_job(int g, int le, std::int64_t r0, std::int64_t r1, bool remote) {
    // resolve row -> (token, slot)
    struct St {
      std::int64_t r;
      int c = 0, h = 0;
    };
    auto st = std::make_shared<St>();
    st->r = r0;
    Hub::Job job;
    job.next = [this, g, le, r1, st, remote](Packet& p) -> bool {
      const int nchunks = chunks_per_row();
      // local writes can be whole chunks, unless the availability tracker
      // counts at store granularity
      const bool whole = !remote && (mediated_ || merge_);
      const int halves = whole ? 1 : 128 / sub_bytes();
      while (st->r < r1) {
        int t, j;
        if (mh_) {
          t = static_cast<int>(
              ctx_[std::size_t(g)].hub->aau().arrival_order(le)[std::size_t(st->r)]);
          j = slot_of(t, g * epg() + le);
        } else {
          t = buf_tokens_[std::size_t(g * epg() + le)][std::size_t(st->r)];
          j = buf_slot_[std::size_t(g * epg() + le)][std::size_t(st->r)];
        }
        const int dst = t / seq();
        if ((dst == g) == remote) {
          st->c = st->h = 0;
          ++st->r;
          continue;
        }
        const std::int64_t idx = std::int64_t(t - dst * seq()) * K() + j;
        p = Packet{};
        p.dst = static_cast<std::int16_t>(dst);
        p.kind = PacketKind::kPlainStore;
        p.phys_addr = kCombineBase + std::uint64_t(idx) * row_bytes() +
                      std::uint64_t(st->c) * 128 + std::uint64_t(st->h) * sub_bytes();
        p.payload_bytes = static_cast<std::uint16_t>(whole ? 128 : sub_bytes());
        p.subblock_mask =
            whole ? full_chunk_mask() : subblock_mask_for(st->h * sub_bytes(), sub_bytes());
        p.row_id = idx;
        p.token_tag = std::uint64_t(t);
        if (++st->h >= halves) {
          st->h = 0;
          if (++st->c >= nchunks) {
            st->c = 0;
            ++st->r;
          }
        }
        return true;
      }
      return false;
    };
    return job;
  }

  // ---- scaling & completion ------------------------------------------------------

  void maybe_scale(int g) {
    if (mh_ || ideal_) return;  // gated / local paths handle this themselves
    GpuCtx& c = ctx_[std::size_t(g)];
    if (c.scaling_started) return;
    if (c.comb_flags < chunks_ * (G() - 1)) return;
    if (!c.comb_all_pushed || c.comb_jobs_out != 0) return;
    c.scaling_started = true;
    c.marks["combine_complete"] = eng_.now();
    eng_.schedule_in(cfg_.gpu.poll_interval + cfg_.gpu.kernel_launch_latency,
                     [this, g] { launch_scaling(g); });
  }

  void launch_scaling(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    const std::int64_t srows = std::int64_t(seq()) * K();
    const int trows = cfg_.gpu.scaling_tile_rows;
    const std::int64_t stiles = (srows + trows - 1) / trows;
    c.scaling_kid = c.gpu->launch(
        "scaling", Activity::kScaling, static_cast<int>(stiles),
        [this, srows, trows](int tb) {
          return scaling_tile_dur(std::min<std::int64_t>(trows, srows - std::int64_t(tb) * trows));
        },
        GateMode::kNone, [this, g] { on_scaling_complete(g); });
  }

  void on_scaling_complete(int g) {
    GpuCtx& c = ctx_[std::size_t(g)];
    c.done = eng_.now();
    c.marks["scaling_complete"] = eng_.now();
  }

  // ---- ideal -----------------------------------------------------------------

  void launch_local_gemms(int g) {
    int live = 0;
    for (int le = 0; le < epg(); ++le)
      if (rows_of(g * epg() + le) > 0) ++live;
    auto remaining = std::make_shared<int>(live);
    // lower bound: no launch or signaling cost anywhere past routing, and
    // second stage row tiles start the instant the first stage produces them
    auto finish = [this, g, remaining] {
      if (--*remaining > 0) return;
      launch_scaling(g);
    };
    if (live == 0) {
      launch_scaling(g);
      return;
    }
    eng_.schedule_in(0, [this, g, finish] {
      for (int le = 0; le < epg(); ++le) {
        const int e = g * epg() + le;
        const std::int64_t rows = rows_of(e);
        if (rows == 0) continue;
        const std::int64_t tiles = (rows + tile_m() - 1) / tile_m();
        GpuCtx& cc = ctx_[std::size_t(g)];
        auto dur1 = [this, rows](int tb) {
          return gemm_tile_dur(rows_in_tile(rows, tb / grid_n1()), cfg_.model.hidden_size);
        };
        auto dur2 = [this, rows](int tb) {
          return gemm_tile_dur(rows_in_tile(rows, tb / grid_n2()), cfg_.model.ffn_hidden_size);
        };
        const int kid2 = cc.gpu->launch("gemm2_e" + std::to_string(e), Activity::kCompute,
                                        static_cast<int>(tiles) * grid_n2(), dur2,
                                        GateMode::kSignal, finish);
        auto left = std::make_shared<std::vector<int>>(std::size_t(tiles), grid_n1());
        cc.gpu->launch(
            "gemm1_e" + std::to_string(e), Activity::kCompute,
            static_cast<int>(tiles) * grid_n1(), dur1, GateMode::kNone, nullptr,
            [this, g, kid2, left](int tb) {
              const int tile = tb / grid_n1();
              if (--(*left)[std::size_t(tile)] > 0) return;
              ctx_[std::size_t(g)].gpu->release(kid2, tile * grid_n2(), (tile + 1) * grid_n2());
            });
      }
    });
  }

  // ---- metadata side channel ----------------------------------------------------

  struct MetaWait {
    int le = 0;
    std::int64_t r0 = 0, r1 = 0;
    int missing = 0;
  };

  static std::int64_t meta_key(int le, std::int64_t row) {
    return (std::int64_t(le) << 42) | row;
  }

  void on_meta(int g, int region, std::int64_t row) {
    const int le = region - epg();
    const std::int64_t key = meta_key(le, row);
    meta_have_[std::size_t(g)].insert(key);
    auto it = meta_waiters_[std::size_t(g)].find(key);
    if (it == meta_waiters_[std::size_t(g)].end()) return;
    auto waiters = std::move(it->second);
    meta_waiters_[std::size_t(g)].erase(it);
    for (auto& w : waiters)
      if (--w->missing == 0) do_push_combine(g, w->le, w->r0, w->r1);
  }

  // ---- results --------------------------------------------------------------------

  LayerResult collect() {
    LayerResult r;
    r.pipeline = pipe_;
    r.realized_std = rt_.realized_std;
    r.events = eng_.events_fired();
    r.gpu_done.resize(std::size_t(G()));
    for (int g = 0; g < G(); ++g) {
      GpuCtx& c = ctx_[std::size_t(g)];
      if (c.done < 0) stall_report(g);
      r.gpu_done[std::size_t(g)] = c.done;
      if (c.done > r.span) {
        r.span = c.done;
        r.critical_gpu = g;
      }
      r.sm_busy_us += double(c.gpu->sm_busy_total()) / kMicrosecond;
      if (!c.hub) continue;
      const Rpm& rpm = c.hub->rpm();
      r.rpm_inserts += rpm.inserts();
      r.rpm_merges += rpm.merges();
      r.rpm_emissions += rpm.emissions();
      r.rpm_bypass += rpm.bypass_emissions();
      const Aau& aau = c.hub->aau();
      r.rat_evictions += aau.evictions();
      r.rat_recoveries += aau.recoveries();
      if (mh_)
        for (int le = 0; le < epg(); ++le) r.rows_delivered += aau.rows_seen(le);
      if (c.dispatch_dam) {
        r.dealloc_tiles += c.dispatch_dam->deallocated_tiles();
        r.forced_tiles += c.dispatch_dam->forced_tiles();
      }
      if (c.combine_dam) r.forced_tiles += c.combine_dam->forced_tiles();
    }
    if (mh_ && r.rows_delivered != std::int64_t(rt_.n_tokens) * K())
      throw SimError("row conservation broken: " + std::to_string(r.rows_delivered) + " != " +
                     std::to_string(std::int64_t(rt_.n_tokens) * K()));
    if (fab_) {
      r.fabric_packets = fab_->packets_delivered();
      r.fabric_flits = fab_->flits_delivered();
      if (r.span > 0) {
        const LinkReport lr = fab_->link_report(0, r.span);
        r.min_downlink_util = lr.min_downlink_util;
        r.mean_downlink_util = lr.mean_downlink_util;
        for (SimTime t = 0; t < r.span; t += r.util_bucket) {
          const SimTime hi = std::min(r.span, t + r.util_bucket);
          r.util_timeline.push_back(fab_->link_report(t, hi).mean_downlink_util);
        }
      }
    }
    attribute(r);
    r.marks = ctx_[std::size_t(r.critical_gpu)].marks;
    if (cfg_.trace) {
      for (int g = 0; g < G(); ++g) {
        for (const auto& [k, v] : ctx_[std::size_t(g)].marks)
          r.trace.push_back({v, g, k, {}});
        r.trace.push_back({ctx_[std::size_t(g)].done, g, "gpu_done", {}});
      }
      std::stable_sort(r.trace.begin(), r.trace.end(),
                       [](const TraceRec& a, const TraceRec& b) { return a.t < b.t; });
    }
    return r;
  }

  [[noreturn]] void stall_report(int g) {
    const GpuCtx& c = ctx_[std::size_t(g)];
    std::string msg = "layer stalled on gpu " + std::to_string(g) + " (" +
                      pipeline_name(pipe_) + "), marks:";
    for (auto& [k, v] : c.marks) msg += " " + k + "=" + std::to_string(v);
    if (c.hub)
      msg += "; hub emitted " + std::to_string(c.hub->stats().packets_emitted) +
             " ingressed " + std::to_string(c.hub->stats().packets_ingressed);
    throw SimError(msg);
  }

  // Wall-clock attribution on the critical GPU. A moment belongs to the
  // highest-precedence activity with at least one SM running it; uncovered
  // gaps are waiting on arrivals (before the last compute instant) or on the
  // combine round-trip (after it).
  void attribute(LayerResult& r) {
    const GpuCtx& c = ctx_[std::size_t(r.critical_gpu)];
    const SimTime end = c.done;
    struct Ev {
      SimTime t;
      int cat;
      int d;
    };
    std::vector<Ev> evs;
    auto add = [&](const ActInterval& iv) {
      const SimTime a = std::max<SimTime>(0, iv.begin), b = std::min(end, iv.end);
      if (a >= b) return;
      int cat;
      switch (iv.what) {
        case Activity::kCompute: cat = 0; break;
        case Activity::kRouting: cat = 1; break;
        case Activity::kScaling: cat = 2; break;
        case Activity::kMediation: cat = 3; break;
        default: cat = 4; break;
      }
      evs.push_back({a, cat, +1});
      evs.push_back({b, cat, -1});
    };
    SimTime last_compute = 0;
    for (const ActInterval& iv : c.gpu->activity()) {
      add(iv);
      if (iv.what == Activity::kCompute) last_compute = std::max(last_compute, iv.end);
    }
    for (const ActInterval& iv : c.extra) add(iv);
    std::sort(evs.begin(), evs.end(), [](const Ev& a, const Ev& b) { return a.t < b.t; });
    int active[5] = {0, 0, 0, 0, 0};
    SimTime cur = 0;
    std::size_t i = 0;
    SimTime buckets[7] = {0, 0, 0, 0, 0, 0, 0};  // cat 0..4, exp_dispatch, exp_combine
    while (cur < end) {
      SimTime nxt = end;
      while (i < evs.size() && evs[i].t == cur) active[evs[i].cat] += evs[i].d, ++i;
      if (i < evs.size()) nxt = std::min(nxt, evs[i].t);
      int cat = -1;
      for (int k = 0; k < 5; ++k)
        if (active[k] > 0) {
          cat = k;
          break;
        }
      if (cat < 0) cat = (last_compute > 0 && cur >= last_compute) ? 6 : 5;
      buckets[cat] += nxt - cur;
      cur = nxt;
    }
    r.compute = buckets[0];
    r.routing = buckets[1];
    r.scaling = buckets[2];
    r.mediation = buckets[3];
    r.polling = buckets[4];
    r.exposed_dispatch = buckets[5];
    r.exposed_combine = buckets[6];
  }

  ExperimentConfig cfg_;
  Pipeline pipe_;
  RoutingResult rt_;
  bool merge_ = false, dep_ = false, mediated_ = false, ideal_ = false, mh_ = false;
  int chunks_ = 1;
  std::uint64_t data_stride_ = 0, meta_stride_ = 0;
  Engine eng_;
  std::unique_ptr<Fabric> fab_;
  std::vector<GpuCtx> ctx_;
  // mediated consumer buffer layout
  std::vector<std::vector<int>> buf_tokens_;
  std::vector<std::vector<std::int8_t>> buf_slot_;
  std::vector<std::vector<std::int64_t>> chunk_begin_;
  std::vector<std::int64_t> idx_in_buf_;
  // metadata readiness
  std::vector<std::unordered_set<std::int64_t>> meta_have_;
  std::vector<std::unordered_map<std::int64_t, std::vector<std::shared_ptr<MetaWait>>>>
      meta_waiters_;
  // global barriers
  int routing_done_ = 0, shuffled_ = 0, counts_done_ = 0, addrs_done_ = 0;
};

inline LayerResult simulate_layer(const ExperimentConfig& cfg, Pipeline pipe,
                                  const RoutingResult& rt) {
  LayerSim sim(cfg, pipe, rt);
  return sim.run();
}

inline LayerResult simulate_layer(const ExperimentConfig& cfg, Pipeline pipe) {
  Rng rng(cfg.seed);
  const RoutingResult rt = generate_routing(cfg.model, cfg.n_gpus, cfg.seq_len_per_gpu,
                                            cfg.target_std, rng);
  return simulate_layer(cfg, pipe, rt);
}

}  // namespace moehub

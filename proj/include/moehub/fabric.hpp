#pragma once

// GPU <-> switch interconnect. Single-tier fabric: every GPU has one
// full-duplex link to every switch; a remote packet takes exactly
// GPU -> switch -> GPU. Links serialize at flit rate, add fixed propagation
// latency per hop, and carry finite queues whose exhaustion backpressures
// the upstream emitter.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <memory>
#include <functional>
#include <string>
#include <vector>

#include "moehub/config.hpp"
#include "moehub/sim.hpp"

namespace moehub {

enum class PacketKind : std::uint8_t {
  kRowsp,
  kRowspNop,
  kPlainStore,
  kWriteAck,
  kControl,
};

struct Packet {
  std::int16_t src = 0;
  std::int16_t dst = 0;
  PacketKind kind = PacketKind::kPlainStore;
  std::uint16_t payload_bytes = 0;
  // Logical destination (rowsp / rowsp_nop): consumer region + row + chunk.
  std::int32_t region = -1;
  std::int64_t row_id = -1;
  std::int32_t chunk = 0;           // 128 B chunk index within the row
  std::uint8_t subblock_mask = 0;   // 16 B sub-blocks present in this chunk
  std::uint64_t phys_addr = 0;      // plain stores: chunk-aligned byte address
  std::uint32_t control_code = 0;
  std::uint64_t token_tag = 0;      // shadow correctness tag
  SimTime issue_time = 0;
};

inline int packet_flits(const Packet& p, int flit_bytes) {
  return 1 + (p.payload_bytes + flit_bytes - 1) / flit_bytes;
}

struct LinkStats {
  SimTime busy_ps = 0;
  std::uint64_t flits = 0;
  std::uint64_t packets = 0;
  std::uint64_t bytes = 0;
  std::vector<SimTime> bucket_busy;  // per util_bucket window
};

// One direction of one physical link: a FIFO queue plus a serialization
// server. `next_hop` (uplinks only) yields the downlink a packet must be able
// to enter before serialization starts; that reservation is what turns
// consumer-side congestion into producer-visible backpressure.
class Link {
 public:
  Link(Engine& eng, const FabricConfig& fc, std::string name)
      : eng_(eng),
        flit_time_(fc.flit_time()),
        latency_(fc.link_latency),
        capacity_(fc.link_queue_packets),
        flit_bytes_(fc.flit_bytes),
        bucket_(fc.util_bucket),
        name_(std::move(name)) {}

  std::function<Link*(const Packet&)> next_hop;         // uplinks
  std::function<void(const Packet&)> sink;              // downlinks: hub ingress
  std::function<void()> on_drain;                       // upstream emitter kick

  bool has_space() const { return static_cast<int>(q_.size()) + reserved_ < capacity_; }
  int occupancy() const { return static_cast<int>(q_.size()) + reserved_; }
  int capacity() const { return capacity_; }
  const LinkStats& stats() const { return stats_; }
  const std::string& name() const { return name_; }

  void push(Packet&& p) {
    if (!has_space()) throw SimError("link overrun on " + name_);
    q_.push_back(std::move(p));
    try_start();
  }

  bool reserve() {
    if (!has_space()) return false;
    ++reserved_;
    return true;
  }

  void push_reserved(Packet&& p) {
    --reserved_;
    q_.push_back(std::move(p));
    try_start();
  }

  void add_waiter(Link* up) { waiters_.push_back(up); }

  // Utilization over [a, b): exact when the window spans whole buckets;
  // otherwise pro-rated within partially covered buckets.
  double utilization(SimTime a, SimTime b) const {
    if (b <= a) return 0.0;
    SimTime busy = 0;
    const std::size_t first = static_cast<std::size_t>(a / bucket_);
    const std::size_t last = static_cast<std::size_t>((b - 1) / bucket_);
    for (std::size_t i = first; i <= last && i < stats_.bucket_busy.size(); ++i) {
      const SimTime lo = std::max<SimTime>(a, static_cast<SimTime>(i) * bucket_);
      const SimTime hi = std::min<SimTime>(b, static_cast<SimTime>(i + 1) * bucket_);
      busy += stats_.bucket_busy[i] * (hi - lo) / bucket_;
    }
    return static_cast<double>(busy) / static_cast<double>(b - a);
  }

 private:
  void try_start() {
    if (busy_ || q_.empty()) return;
    Link* nh = next_hop ? next_hop(q_.front()) : nullptr;
    if (nh && !nh->reserve()) {
      if (!waiting_) {
        waiting_ = true;
        nh->add_waiter(this);
      }
      return;
    }
    waiting_ = false;
    busy_ = true;
    Packet p = std::move(q_.front());
    q_.pop_front();
    const SimTime now = eng_.now();
    const int flits = packet_flits(p, flit_bytes_);
    const SimTime ser = static_cast<SimTime>(flits) * flit_time_;
    account_busy(now, now + ser);
    stats_.flits += flits;
    stats_.packets += 1;
    stats_.bytes += p.payload_bytes;

    eng_.schedule_at(now + ser, [this] {
      busy_ = false;
      kick_waiters();
      if (on_drain) on_drain();
      try_start();
    });
    const SimTime arrive = now + ser + latency_;
    if (nh) {
      eng_.schedule_at(arrive, [nh, p = std::move(p)]() mutable {
        nh->push_reserved(std::move(p));
      });
    } else {
      eng_.schedule_at(arrive, [this, p = std::move(p)] { sink(p); });
    }
  }

  void kick_waiters() {
    if (waiters_.empty()) return;
    std::vector<Link*> w;
    w.swap(waiters_);
    for (Link* up : w) {
      up->waiting_ = false;
      up->try_start();
    }
  }

  void account_busy(SimTime a, SimTime b) {
    stats_.busy_ps += b - a;
    std::size_t i = static_cast<std::size_t>(a / bucket_);
    while (a < b) {
      if (stats_.bucket_busy.size() <= i) stats_.bucket_busy.resize(i + 1, 0);
      const SimTime hi = std::min<SimTime>(b, static_cast<SimTime>(i + 1) * bucket_);
      stats_.bucket_busy[i] += hi - a;
      a = hi;
      ++i;
    }
  }

  Engine& eng_;
  SimTime flit_time_;
  SimTime latency_;
  int capacity_;
  int flit_bytes_;
  SimTime bucket_;
  std::string name_;

  std::deque<Packet> q_;
  int reserved_ = 0;
  bool busy_ = false;
  bool waiting_ = false;
  std::vector<Link*> waiters_;
  LinkStats stats_;
};

struct LinkReportRow {
  std::string name;
  bool is_downlink = false;
  double utilization = 0.0;
  std::uint64_t flits = 0;
  std::uint64_t bytes = 0;
};

struct LinkReport {
  std::vector<LinkReportRow> rows;
  double min_downlink_util = 0.0;
  double mean_downlink_util = 0.0;
};

class Fabric {
 public:
  Fabric(Engine& eng, const FabricConfig& fc, int n_gpus)
      : eng_(eng), fc_(fc), n_gpus_(n_gpus), rr_cursor_(n_gpus, 0) {
    deliver_.resize(n_gpus);
    uplinks_.reserve(static_cast<std::size_t>(n_gpus) * fc.n_switches);
    downlinks_.reserve(static_cast<std::size_t>(n_gpus) * fc.n_switches);
    for (int g = 0; g < n_gpus; ++g) {
      for (int s = 0; s < fc.n_switches; ++s) {
        uplinks_.push_back(std::make_unique<Link>(
            eng, fc, "gpu" + std::to_string(g) + "->sw" + std::to_string(s)));
        downlinks_.push_back(std::make_unique<Link>(
            eng, fc, "sw" + std::to_string(s) + "->gpu" + std::to_string(g)));
      }
    }
    for (int g = 0; g < n_gpus; ++g) {
      for (int s = 0; s < fc.n_switches; ++s) {
        Link& up = uplink(g, s);
        up.next_hop = [this, s](const Packet& p) { return &downlink(s, p.dst); };
        Link& down = downlink(s, g);
        down.sink = [this, g](const Packet& p) {
          ++packets_delivered_;
          flits_delivered_ += packet_flits(p, fc_.flit_bytes);
          deliver_[g](p);
        };
      }
    }
  }

  void set_deliver(int gpu, std::function<void(const Packet&)> cb) {
    deliver_[std::size_t(gpu)] = std::move(cb);
  }
  void set_on_uplink_drain(int gpu, const std::function<void()>& cb) {
    for (int s = 0; s < fc_.n_switches; ++s) uplink(gpu, s).on_drain = cb;
  }

  int route(const Packet& p) {
    if (fc_.route_policy == RoutePolicy::kRoundRobin) {
      int& c = rr_cursor_[std::size_t(p.src)];
      const int s = c;
      c = (c + 1) % fc_.n_switches;
      return s;
    }
    const std::uint64_t key =
        p.row_id >= 0 ? static_cast<std::uint64_t>(p.row_id) : (p.phys_addr >> 7);
    std::uint64_t h = (static_cast<std::uint64_t>(p.src) << 48) ^
                      (static_cast<std::uint64_t>(p.dst) << 32) ^ key;
    return static_cast<int>(splitmix64(h) % static_cast<std::uint64_t>(fc_.n_switches));
  }

  // Source hub egress entrypoint: the caller must have verified space on the
  // routed uplink (peek_uplink / has_space) first.
  void inject(Packet&& p, int switch_id) {
    if (p.dst < 0 || p.dst >= n_gpus_)
      throw ConfigError("packet destination out of range");
    ++packets_injected_;
    flits_injected_ += packet_flits(p, fc_.flit_bytes);
    uplink(p.src, switch_id).push(std::move(p));
  }

  Link& uplink(int gpu, int sw) {
    return *uplinks_[std::size_t(gpu) * fc_.n_switches + sw];
  }
  Link& downlink(int sw, int gpu) {
    return *downlinks_[std::size_t(gpu) * fc_.n_switches + sw];
  }
  const Link& uplink(int gpu, int sw) const {
    return *uplinks_[std::size_t(gpu) * fc_.n_switches + sw];
  }
  const Link& downlink(int sw, int gpu) const {
    return *downlinks_[std::size_t(gpu) * fc_.n_switches + sw];
  }

  int n_gpus() const { return n_gpus_; }
  int n_switches() const { return fc_.n_switches; }
  std::uint64_t flits_injected() const { return flits_injected_; }
  std::uint64_t flits_delivered() const { return flits_delivered_; }
  std::uint64_t packets_injected() const { return packets_injected_; }
  std::uint64_t packets_delivered() const { return packets_delivered_; }

  LinkReport link_report(SimTime a, SimTime b) const {
    LinkReport rep;
    double min_down = 1.0, sum_down = 0.0;
    int n_down = 0;
    bool any = false;
    for (int g = 0; g < n_gpus_; ++g) {
      for (int s = 0; s < fc_.n_switches; ++s) {
        const Link& up = uplink(g, s);
        rep.rows.push_back({up.name(), false, up.utilization(a, b), up.stats().flits,
                            up.stats().bytes});
        const Link& down = downlink(s, g);
        const double u = down.utilization(a, b);
        rep.rows.push_back({down.name(), true, u, down.stats().flits, down.stats().bytes});
        min_down = std::min(min_down, u);
        sum_down += u;
        ++n_down;
        any = true;
      }
    }
    rep.min_downlink_util = any ? min_down : 0.0;
    rep.mean_downlink_util = n_down ? sum_down / n_down : 0.0;
    return rep;
  }

 private:
  Engine& eng_;
  FabricConfig fc_;
  int n_gpus_;
  std::vector<std::unique_ptr<Link>> uplinks_;    // [gpu * n_switches + sw]
  std::vector<std::unique_ptr<Link>> downlinks_;  // [gpu * n_switches + sw]
  std::vector<std::function<void(const Packet&)>> deliver_;
  std::vector<int> rr_cursor_;
  std::uint64_t flits_injected_ = 0;
  std::uint64_t flits_delivered_ = 0;
  std::uint64_t packets_injected_ = 0;
  std::uint64_t packets_delivered_ = 0;
};

}  // namespace moehub

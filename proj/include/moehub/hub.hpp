#pragma once

// Per-GPU hub: glues the SM store path, the producer-side merge stage, the
// fabric, and the consumer-side address/availability units together.
//
// Producer side: stores issue from kernels as fixed-size sub-requests, paced
// by the LSU issue rate (remote) or the memory system (loopback). Remote
// sub-requests land in the merge stage (or a plain FIFO when merging is
// disabled) and leave through one egress slot at a time. Consumer side: a
// serial ingress services one packet per hub cycle, runs logical-destination
// packets through address assignment, completes the memory write, raises the
// availability ack, and returns a one-flit write ack to the producer.

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <unordered_set>
#include <vector>

#include "moehub/aau.hpp"
#include "moehub/config.hpp"
#include "moehub/dam.hpp"
#include "moehub/fabric.hpp"
#include "moehub/rpm.hpp"
#include "moehub/sim.hpp"

namespace moehub {

constexpr int kPriStore = 0;
constexpr int kPriNop = 1;
constexpr int kPriControl = 2;

struct HubStats {
  std::uint64_t stores_issued_remote = 0;
  std::uint64_t stores_issued_local = 0;
  std::uint64_t packets_emitted = 0;
  std::uint64_t packets_ingressed = 0;
  std::uint64_t acks_sent = 0;
  std::uint64_t acks_received = 0;
  std::uint64_t controls_received = 0;
  SimTime last_egress = 0;
  SimTime last_ingress = 0;
};

class Hub {
 public:
  // A stream of store sub-requests, generated lazily. next() fills the
  // packet and returns false when the stream is exhausted.
  struct Job {
    std::function<bool(Packet&)> next;
    std::function<void()> on_done;
  };

  Hub(Engine& eng, const ExperimentConfig& cfg, Fabric& fab, int id, bool merge)
      : eng_(eng),
        cfg_(cfg),
        fab_(fab),
        id_(id),
        merge_(merge),
        rpm_(cfg.hub, cfg.n_gpus),
        aau_(cfg.hub) {
    fab_.set_deliver(id, [this](const Packet& p) { deliver(p); });
    fab_.set_on_uplink_drain(id, [this] {
      try_emit();
      flush_acks();
      egress_kick();
    });
  }

  Aau& aau() { return aau_; }
  Rpm& rpm() { return rpm_; }
  const HubStats& stats() const { return stats_; }
  int id() const { return id_; }

  void set_on_control(std::function<void(const Packet&)> cb) { on_control_ = std::move(cb); }
  // Fires when a write ack for one of our stores returns.
  void set_on_ack(std::function<void(const Packet&)> cb) { on_ack_ = std::move(cb); }
  // Fires when a metadata row becomes readable in local memory.
  void set_on_meta(std::function<void(int region, std::int64_t row)> cb) {
    on_meta_ = std::move(cb);
  }

  // ---- region bindings -----------------------------------------------

  struct Binding {
    int aau_region = -1;       // logical-destination regions
    std::uint64_t base = 0;    // plain regions: direct address range
    std::uint64_t end = 0;
    int row_bytes = 0;
    Dam* dam = nullptr;
    int table = -1;
    bool meta = false;  // metadata side-channel: tracked, no availability table
  };

  int bind_rowsp_region(const RegionDesc& desc, Dam* dam, int table, bool meta = false) {
    Binding b;
    b.aau_region = aau_.register_region(desc);
    b.row_bytes = desc.row_bytes;
    b.dam = dam;
    b.table = table;
    b.meta = meta;
    rowsp_bindings_.push_back(b);
    return static_cast<int>(rowsp_bindings_.size()) - 1;
  }

  int bind_plain_region(std::uint64_t base, int row_bytes, std::int64_t rows, Dam* dam,
                        int table) {
    Binding b;
    b.base = base;
    b.end = base + static_cast<std::uint64_t>(row_bytes) * static_cast<std::uint64_t>(rows);
    b.row_bytes = row_bytes;
    b.dam = dam;
    b.table = table;
    plain_bindings_.push_back(b);
    return static_cast<int>(plain_bindings_.size()) - 1;
  }

  bool meta_arrived(int binding, std::int64_t row) const {
    return meta_seen_.count((static_cast<std::uint64_t>(static_cast<std::uint32_t>(binding))
                             << 40) ^
                            static_cast<std::uint64_t>(row)) != 0;
  }

  // ---- producer side ---------------------------------------------------

  void push_remote_job(Job j) {
    remote_jobs_.push_back(std::move(j));
    remote_pump();
  }
  void push_local_job(Job j) {
    local_jobs_.push_back(std::move(j));
    local_pump();
  }
  bool remote_idle() const { return remote_jobs_.empty() && !remote_pending_ && !remote_busy_; }

 private:
  // One sub-request per LSU issue slot, stalled (not dropped) when the merge
  // stage cannot take the destination.
  void remote_pump() {
    if (remote_busy_) return;
    if (!remote_pending_) {
      while (!remote_jobs_.empty()) {
        Packet p;
        if (remote_jobs_.front().next(p)) {
          p.src = static_cast<std::int16_t>(id_);
          p.issue_time = eng_.now();
          remote_pending_ = std::move(p);
          break;
        }
        auto done = std::move(remote_jobs_.front().on_done);
        remote_jobs_.pop_front();
        if (done) done();
      }
      if (!remote_pending_) return;
    }
    if (merge_ && !rpm_.can_accept(*remote_pending_)) return;  // egress will re-kick
    remote_busy_ = true;
    eng_.schedule_in(cfg_.gpu.store_issue_interval(), [this] {
      remote_busy_ = false;
      Packet p = std::move(*remote_pending_);
      remote_pending_.reset();
      ++stats_.stores_issued_remote;
      accept_store(std::move(p));
      remote_pump();
    });
  }

  void local_pump() {
    if (local_busy_) return;
    Packet p;
    while (!local_jobs_.empty()) {
      if (local_jobs_.front().next(p)) break;
      auto done = std::move(local_jobs_.front().on_done);
      local_jobs_.pop_front();
      if (done) done();
    }
    if (local_jobs_.empty()) return;
    p.src = static_cast<std::int16_t>(id_);
    p.issue_time = eng_.now();
    local_busy_ = true;
    const SimTime pace = cfg_.gpu.local_store_interval(p.payload_bytes);
    eng_.schedule_in(pace, [this, p]() mutable {
      local_busy_ = false;
      ++stats_.stores_issued_local;
      // Loopback: straight to our own ingress through the crossbar.
      eng_.schedule_in(cfg_.fabric.crossbar_latency,
                       [this, p = std::move(p)] { deliver(p); });
      local_pump();
    });
  }

  void accept_store(Packet&& p) {
    if (merge_) {
      int pri = kPriStore;
      if (p.kind == PacketKind::kRowspNop) pri = kPriNop;
      if (p.kind == PacketKind::kControl) pri = kPriControl;
      // Descriptors and flags are complete messages, not partial chunks;
      // nothing further merges into them and the age gate must not hold them.
      if (p.kind != PacketKind::kRowsp && p.kind != PacketKind::kPlainStore)
        p.subblock_mask = full_chunk_mask();
      rpm_.insert(std::move(p), pri, eng_.now());
    } else {
      fifo_.push_back(std::move(p));
    }
    egress_kick();
  }

 public:
  // ---- egress ----------------------------------------------------------

  void egress_kick() {
    if (egress_busy_ || egress_out_) return;
    std::optional<Packet> out;
    if (merge_) {
      auto blocked = [this](const RpmEntry& e) {
        return !fab_.uplink(id_, fab_.route(e.pkt)).has_space();
      };
      auto congested = [this](const RpmEntry& e) {
        const Link& up = fab_.uplink(id_, fab_.route(e.pkt));
        return up.occupancy() >=
               static_cast<int>(cfg_.fabric.congestion_highwater * up.capacity());
      };
      auto entry = rpm_.select(eng_.now(), congested, blocked);
      if (!entry) {
        schedule_promotion_retry();
        return;
      }
      out = std::move(entry->pkt);
    } else {
      if (fifo_.empty()) return;
      if (!fab_.uplink(id_, fab_.route(fifo_.front())).has_space()) return;
      out = std::move(fifo_.front());
      fifo_.pop_front();
    }
    egress_busy_ = true;
    egress_out_ = std::move(out);
    eng_.schedule_in(cfg_.hub.egress_slot, [this] {
      egress_busy_ = false;
      try_emit();
    });
  }

  // An ack can grab the last uplink slot during the egress cycle, so space is
  // rechecked at emission; a full uplink parks the packet until a drain.
  void try_emit() {
    if (egress_busy_ || !egress_out_) return;
    if (!fab_.uplink(id_, fab_.route(*egress_out_)).has_space()) return;
    Packet p = std::move(*egress_out_);
    egress_out_.reset();
    ++stats_.packets_emitted;
    stats_.last_egress = eng_.now();
    fab_.inject(std::move(p), fab_.route(p));
    remote_pump();  // merge stage freed an entry
    egress_kick();
  }

 private:
  void schedule_promotion_retry() {
    if (!merge_ || rpm_.empty()) return;
    const SimTime due = rpm_.next_promotion(eng_.now());
    if (due < 0) return;  // everything eligible is link-blocked; drain kicks us
    if (promo_timer_at_ >= 0 && promo_timer_at_ <= due) return;
    promo_timer_at_ = due;
    eng_.schedule_at(due, [this, due] {
      if (promo_timer_at_ == due) promo_timer_at_ = -1;
      egress_kick();
    });
  }

  // ---- acks -------------------------------------------------------------

  void ack_to(const Packet& data) {
    if (!cfg_.fabric.cost_acks || data.src == id_) return;
    Packet a;
    a.src = static_cast<std::int16_t>(id_);
    a.dst = data.src;
    a.kind = PacketKind::kWriteAck;
    a.payload_bytes = 0;
    a.row_id = data.row_id;
    a.phys_addr = data.phys_addr;
    ack_q_.push_back(std::move(a));
    flush_acks();
  }

  void flush_acks() {
    while (!ack_q_.empty()) {
      const int sw = fab_.route(ack_q_.front());
      if (!fab_.uplink(id_, sw).has_space()) return;  // uplink drain re-kicks
      ++stats_.acks_sent;
      fab_.inject(std::move(ack_q_.front()), sw);
      ack_q_.pop_front();
    }
  }

  // ---- ingress -----------------------------------------------------------

  void deliver(const Packet& p) {
    inq_.push_back(p);
    ingress_kick();
  }

  void ingress_kick() {
    if (ingress_busy_ || inq_.empty()) return;
    ingress_busy_ = true;
    Packet p = std::move(inq_.front());
    inq_.pop_front();
    // One packet per hub cycle; address work that misses the resident table
    // spills in the background and delays only this packet's write, not the
    // ingress pipeline.
    SimTime extra = 0;
    std::uint64_t addr = 0;
    if (p.kind == PacketKind::kRowsp || p.kind == PacketKind::kRowspNop) {
      const Binding& b = rowsp_binding(p.region);
      const Translation tr =
          aau_.translate(b.aau_region, p.row_id, static_cast<std::int64_t>(p.chunk) * 128);
      extra = tr.extra_latency;
      addr = tr.addr;
    } else if (p.kind == PacketKind::kPlainStore) {
      addr = p.phys_addr;
    }
    eng_.schedule_in(cfg_.hub.ingress_cycle(), [this, p = std::move(p), addr, extra] {
      ingress_busy_ = false;
      ++stats_.packets_ingressed;
      stats_.last_ingress = eng_.now();
      complete_ingress(p, addr, extra);
      ingress_kick();
    });
  }

  void complete_ingress(const Packet& p, std::uint64_t addr, SimTime extra) {
    switch (p.kind) {
      case PacketKind::kWriteAck:
        ++stats_.acks_received;
        if (on_ack_) on_ack_(p);
        break;
      case PacketKind::kControl:
        ++stats_.controls_received;
        if (on_control_) on_control_(p);
        break;
      case PacketKind::kRowsp:
      case PacketKind::kRowspNop: {
        const int region = p.region;
        const int bytes = p.payload_bytes;
        eng_.schedule_in(cfg_.hub.mem_write_latency + extra, [this, region, p, addr, bytes] {
          const Binding& b = rowsp_bindings_[std::size_t(region)];
          if (b.meta) {
            meta_seen_.insert(
                (static_cast<std::uint64_t>(static_cast<std::uint32_t>(region)) << 40) ^
                static_cast<std::uint64_t>(p.row_id));
            if (on_meta_) on_meta_(region, p.row_id);
          }
          if (b.dam) b.dam->on_write_ack(b.table, addr, bytes);
          ack_to(p);
        });
        break;
      }
      case PacketKind::kPlainStore: {
        const Binding* b = plain_binding(addr);
        const int bytes = p.payload_bytes;
        eng_.schedule_in(cfg_.hub.mem_write_latency + extra, [this, b, p, addr, bytes] {
          if (b && b->dam) b->dam->on_write_ack(b->table, addr, bytes);
          ack_to(p);
        });
        break;
      }
    }
  }

  const Binding& rowsp_binding(int region) const {
    if (region < 0 || region >= static_cast<int>(rowsp_bindings_.size()))
      throw SimError("packet names an unbound region on gpu " + std::to_string(id_));
    return rowsp_bindings_[std::size_t(region)];
  }

  const Binding* plain_binding(std::uint64_t addr) const {
    for (const Binding& b : plain_bindings_) {
      if (addr >= b.base && addr < b.end) return &b;
    }
    return nullptr;  // unbound plain store: written, no availability tracking
  }

  Engine& eng_;
  const ExperimentConfig& cfg_;
  Fabric& fab_;
  int id_;
  bool merge_;
  Rpm rpm_;
  Aau aau_;
  std::deque<Packet> fifo_;  // no-merge emission path
  std::deque<Packet> inq_;
  std::deque<Packet> ack_q_;
  std::deque<Job> remote_jobs_, local_jobs_;
  std::optional<Packet> remote_pending_;
  std::optional<Packet> egress_out_;
  bool remote_busy_ = false, local_busy_ = false;
  bool egress_busy_ = false, ingress_busy_ = false;
  SimTime promo_timer_at_ = -1;
  std::vector<Binding> rowsp_bindings_;
  std::vector<Binding> plain_bindings_;
  std::unordered_set<std::uint64_t> meta_seen_;
  std::function<void(const Packet&)> on_control_;
  std::function<void(const Packet&)> on_ack_;
  std::function<void(int, std::int64_t)> on_meta_;
  HubStats stats_;
};

}  // namespace moehub

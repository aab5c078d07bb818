#pragma once

// Producer-side packet staging. Outbound sub-requests land in per-peer
// fully associative partitions where writes to the same 128 B chunk coalesce
// by OR-ing their 16 B sub-block masks. Partial packets wait for their
// missing sub-blocks; a timer bypass makes them eligible after a threshold
// age so nothing starves. A selector walks the partitions round-robin,
// skipping peers whose routed uplink is congested on the first pass, and
// picks within a partition by a fixed comparator: priority class, then
// full-mask packets, then smallest row id, then insertion order.
// Time-passive; the hub egress loop drives it.

#include <bit>
#include <cstdint>
#include <functional>
#include <optional>
#include <unordered_map>
#include <vector>

#include "moehub/config.hpp"
#include "moehub/fabric.hpp"
#include "moehub/sim.hpp"

namespace moehub {

struct RpmEntry {
  Packet pkt;           // accumulated packet; payload_bytes tracks the mask
  int priority = 2;     // lower = more urgent (0 control, 1 nop, 2 data)
  SimTime insert_time = 0;
  int merges = 0;
};

inline std::uint8_t full_chunk_mask() { return 0xFF; }

// Validity bits covering [offset, offset + bytes) within one 128 B chunk,
// one bit per 16 B sub-block.
inline std::uint8_t subblock_mask_for(int offset_in_chunk, int bytes) {
  const int first = offset_in_chunk / 16;
  const int last = (offset_in_chunk + bytes - 1) / 16;
  std::uint8_t m = 0;
  for (int b = first; b <= last; ++b) m |= static_cast<std::uint8_t>(1u << b);
  return m;
}

class Rpm {
 public:
  Rpm(const HubConfig& hc, int n_peers)
      : hc_(hc), parts_(static_cast<std::size_t>(n_peers)) {}

  // Merge key: every field that must match for two stores to share a packet.
  static std::uint64_t key_of(const Packet& p) {
    std::uint64_t h = 0x9e3779b97f4a7c15ULL * (static_cast<std::uint8_t>(p.kind) + 1);
    if (p.kind == PacketKind::kPlainStore) {
      h ^= p.phys_addr >> 7;
    } else {
      h ^= (static_cast<std::uint64_t>(static_cast<std::uint32_t>(p.region)) << 44) ^
           (static_cast<std::uint64_t>(p.row_id) << 12) ^
           static_cast<std::uint64_t>(static_cast<std::uint32_t>(p.chunk));
    }
    return h;
  }

  bool can_accept(const Packet& p) const {
    const Part& part = parts_[std::size_t(p.dst)];
    if (static_cast<int>(part.entries.size()) < hc_.rpm_partition_entries) return true;
    return mergeable(part, p) >= 0;
  }

  // Returns true if the store merged into an existing packet.
  bool insert(Packet&& p, int priority, SimTime now) {
    Part& part = parts_[std::size_t(p.dst)];
    const int idx = mergeable(part, p);
    if (idx >= 0) {
      RpmEntry& e = part.entries[std::size_t(idx)];
      e.pkt.subblock_mask |= p.subblock_mask;
      e.pkt.payload_bytes =
          static_cast<std::uint16_t>(std::popcount(e.pkt.subblock_mask) * 16);
      e.merges += 1;
      ++merges_;
      return true;
    }
    if (static_cast<int>(part.entries.size()) >= hc_.rpm_partition_entries)
      throw SimError("rpm partition overrun for peer " + std::to_string(p.dst));
    RpmEntry e;
    e.pkt = std::move(p);
    e.pkt.payload_bytes =
        static_cast<std::uint16_t>(std::popcount(e.pkt.subblock_mask) * 16);
    e.priority = priority;
    e.insert_time = now;
    part.index.emplace(key_of(e.pkt), part.entries.size());
    part.entries.push_back(std::move(e));
    ++inserts_;
    return false;
  }

  bool empty() const {
    for (const Part& p : parts_)
      if (!p.entries.empty()) return false;
    return true;
  }
  int occupancy(int peer) const {
    return static_cast<int>(parts_[std::size_t(peer)].entries.size());
  }
  int total_occupancy() const {
    int n = 0;
    for (const Part& p : parts_) n += static_cast<int>(p.entries.size());
    return n;
  }

  bool eligible(const RpmEntry& e, SimTime now) const {
    return e.pkt.subblock_mask == full_chunk_mask() ||
           now - e.insert_time >= hc_.bypass_threshold;
  }

  // Earliest future instant at which some currently ineligible entry gets
  // promoted by the timer bypass; -1 if nothing is waiting on the timer.
  SimTime next_promotion(SimTime now) const {
    SimTime t = -1;
    for (const Part& p : parts_) {
      for (const RpmEntry& e : p.entries) {
        if (eligible(e, now)) continue;
        const SimTime due = e.insert_time + hc_.bypass_threshold;
        if (t < 0 || due < t) t = due;
      }
    }
    return t;
  }

  // Pick the next packet to emit. `congested(entry)` marks peers to defer on
  // the first pass; `blocked(entry)` marks packets that cannot leave at all
  // (routed uplink has no queue slot) and applies to both passes.
  std::optional<RpmEntry> select(
      SimTime now, const std::function<bool(const RpmEntry&)>& congested,
      const std::function<bool(const RpmEntry&)>& blocked) {
    const int n = static_cast<int>(parts_.size());
    for (int pass = 0; pass < 2; ++pass) {
      for (int step = 1; step <= n; ++step) {
        const int peer = (rr_last_ + step) % n;
        Part& part = parts_[std::size_t(peer)];
        if (part.entries.empty()) continue;
        const int idx = best_entry(part, now);
        if (idx < 0) continue;  // only partials still inside the merge window
        const RpmEntry& cand = part.entries[std::size_t(idx)];
        if (blocked && blocked(cand)) continue;
        if (pass == 0 && congested && congested(cand)) continue;
        RpmEntry out = take(part, idx);
        rr_last_ = peer;
        ++emissions_;
        if (now - out.insert_time >= hc_.bypass_threshold &&
            out.pkt.subblock_mask != full_chunk_mask())
          ++bypass_emissions_;
        return out;
      }
    }
    return std::nullopt;
  }

  std::uint64_t inserts() const { return inserts_; }
  std::uint64_t merges() const { return merges_; }
  std::uint64_t emissions() const { return emissions_; }
  std::uint64_t bypass_emissions() const { return bypass_emissions_; }

  // Oldest resident entry's age, for starvation-bound checks.
  SimTime oldest_age(SimTime now) const {
    SimTime age = 0;
    for (const Part& p : parts_)
      for (const RpmEntry& e : p.entries) age = std::max(age, now - e.insert_time);
    return age;
  }

 private:
  struct Part {
    std::vector<RpmEntry> entries;
    std::unordered_map<std::uint64_t, std::size_t> index;
  };

  int mergeable(const Part& part, const Packet& p) const {
    auto it = part.index.find(key_of(p));
    if (it == part.index.end()) return -1;
    const RpmEntry& e = part.entries[it->second];
    if (e.pkt.kind != p.kind) return -1;
    return static_cast<int>(it->second);
  }

  // true if a ranks strictly before b
  bool ranks_before(const RpmEntry& a, const RpmEntry& b, SimTime now) const {
    if (a.priority != b.priority) return a.priority < b.priority;
    const bool fa =
        a.pkt.subblock_mask == full_chunk_mask() || now - a.insert_time >= hc_.bypass_threshold;
    const bool fb =
        b.pkt.subblock_mask == full_chunk_mask() || now - b.insert_time >= hc_.bypass_threshold;
    const auto rid = [](const RpmEntry& e) {
      return e.pkt.kind == PacketKind::kPlainStore
                 ? static_cast<std::int64_t>(e.pkt.phys_addr >> 7)
                 : e.pkt.row_id;
    };
    if (hc_.prefer_rowid_over_mask) {
      if (rid(a) != rid(b)) return rid(a) < rid(b);
      if (fa != fb) return fa;
    } else {
      if (fa != fb) return fa;
      if (rid(a) != rid(b)) return rid(a) < rid(b);
    }
    return a.insert_time < b.insert_time;
  }

  int best_entry(const Part& part, SimTime now) const {
    int best = -1;
    for (int i = 0; i < static_cast<int>(part.entries.size()); ++i) {
      const RpmEntry& e = part.entries[std::size_t(i)];
      if (!eligible(e, now)) continue;
      if (best < 0 || ranks_before(e, part.entries[std::size_t(best)], now)) best = i;
    }
    return best;
  }

  RpmEntry take(Part& part, int idx) {
    RpmEntry out = std::move(part.entries[std::size_t(idx)]);
    part.index.erase(key_of(out.pkt));
    const std::size_t last = part.entries.size() - 1;
    if (static_cast<std::size_t>(idx) != last) {
      part.entries[std::size_t(idx)] = std::move(part.entries[last]);
      part.index[key_of(part.entries[std::size_t(idx)].pkt)] = static_cast<std::size_t>(idx);
    }
    part.entries.pop_back();
    return out;
  }

  HubConfig hc_;
  std::vector<Part> parts_;
  int rr_last_ = -1;
  std::uint64_t inserts_ = 0, merges_ = 0, emissions_ = 0, bypass_emissions_ = 0;
};

}  // namespace moehub

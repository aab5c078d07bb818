#pragma once

// Consumer-side address assignment. Incoming logical-destination stores name
// a (region, row) pair; this unit assigns each distinct row the next dense
// local slot in arrival order and translates every later reference to a
// physical byte address. The translation cache (RAT) holds a bounded number
// of row entries with FIFO eviction; the full mapping lives in a per-region
// pointer table (APT) that evicted entries are spilled to and recovered from
// at a latency cost.
//
// This class is time-passive: callers pass the current time in and get
// latency deltas back, which keeps it directly unit-testable.

#include <cstdint>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "moehub/config.hpp"
#include "moehub/sim.hpp"

namespace moehub {

struct RegionDesc {
  std::string name;
  std::uint64_t base = 0;
  int row_bytes = 0;
  std::int64_t capacity_rows = 0;  // hard limit; overflow is a protocol bug
};

enum class TranslateOutcome : std::uint8_t {
  kHit,      // row already resident in the RAT
  kNew,      // first sighting: slot assigned, RAT entry created
  kRecover,  // mapping existed but had been evicted; reloaded from the APT
};

struct Translation {
  std::uint64_t addr = 0;
  std::int64_t local_row = 0;
  TranslateOutcome outcome = TranslateOutcome::kHit;
  SimTime extra_latency = 0;  // spill/recover penalty to charge the packet
};

class Aau {
 public:
  explicit Aau(const HubConfig& hc) : hc_(hc) {}

  int register_region(const RegionDesc& desc) {
    if (desc.row_bytes <= 0 || desc.row_bytes % 128 != 0)
      throw ConfigError("region row_bytes must be a positive multiple of 128");
    const std::uint64_t end = desc.base + static_cast<std::uint64_t>(desc.row_bytes) *
                                              static_cast<std::uint64_t>(desc.capacity_rows);
    for (const Region& r : regions_) {
      if (r.freed) continue;
      const std::uint64_t rend =
          r.desc.base + static_cast<std::uint64_t>(r.desc.row_bytes) *
                            static_cast<std::uint64_t>(r.desc.capacity_rows);
      if (desc.base < rend && r.desc.base < end)
        throw ConfigError("region overlap: " + desc.name + " vs " + r.desc.name);
    }
    Region region;
    region.desc = desc;
    regions_.push_back(std::move(region));
    return static_cast<int>(regions_.size()) - 1;
  }

  // Release a region and every RAT entry it still holds.
  void free_region(int region) {
    Region& r = region_at(region);
    r.freed = true;
    for (auto it = fifo_.begin(); it != fifo_.end();) {
      if (it->region == region) {
        rat_.erase(key_of(it->region, it->row_id));
        it = fifo_.erase(it);
      } else {
        ++it;
      }
    }
  }

  Translation translate(int region, std::int64_t row_id, std::int64_t row_offset) {
    Region& r = region_at(region);
    if (r.freed) throw SimError("store into freed region " + r.desc.name);
    if (row_offset < 0 || row_offset >= r.desc.row_bytes)
      throw SimError("row offset out of range in region " + r.desc.name);

    Translation out;
    const std::uint64_t key = key_of(region, row_id);
    auto rat_it = rat_.find(key);
    if (rat_it != rat_.end()) {
      out.outcome = TranslateOutcome::kHit;
      out.local_row = rat_it->second;
      ++hits_;
    } else {
      auto apt_it = r.apt.find(row_id);
      if (apt_it != r.apt.end()) {
        out.outcome = TranslateOutcome::kRecover;
        out.local_row = apt_it->second;
        out.extra_latency += hc_.spill_penalty;  // APT read to refill the entry
        ++recoveries_;
      } else {
        out.outcome = TranslateOutcome::kNew;
        out.local_row = r.next_slot++;
        if (out.local_row >= r.desc.capacity_rows)
          throw SimError("region " + r.desc.name + " row capacity exceeded");
        r.apt.emplace(row_id, out.local_row);
        r.arrival_order.push_back(row_id);
        ++fresh_;
      }
      out.extra_latency += install(region, row_id, out.local_row);
    }
    out.addr = r.desc.base +
               static_cast<std::uint64_t>(out.local_row) *
                   static_cast<std::uint64_t>(r.desc.row_bytes) +
               static_cast<std::uint64_t>(row_offset);
    return out;
  }

  // Full mapping (survives eviction); rows in arrival order.
  std::int64_t local_row_of(int region, std::int64_t row_id) const {
    const Region& r = regions_[std::size_t(region)];
    auto it = r.apt.find(row_id);
    return it == r.apt.end() ? -1 : it->second;
  }
  std::int64_t rows_seen(int region) const {
    return regions_[std::size_t(region)].next_slot;
  }
  const std::vector<std::int64_t>& arrival_order(int region) const {
    return regions_[std::size_t(region)].arrival_order;
  }
  const RegionDesc& region_desc(int region) const {
    return regions_[std::size_t(region)].desc;
  }

  int rat_occupancy() const { return static_cast<int>(fifo_.size()); }
  bool rat_resident(int region, std::int64_t row_id) const {
    return rat_.count(key_of(region, row_id)) != 0;
  }

  std::uint64_t hits() const { return hits_; }
  std::uint64_t fresh() const { return fresh_; }
  std::uint64_t recoveries() const { return recoveries_; }
  std::uint64_t evictions() const { return evictions_; }

 private:
  struct Region {
    RegionDesc desc;
    std::int64_t next_slot = 0;
    bool freed = false;
    std::unordered_map<std::int64_t, std::int64_t> apt;  // row_id -> local slot
    std::vector<std::int64_t> arrival_order;
  };
  struct FifoEnt {
    int region;
    std::int64_t row_id;
  };

  Region& region_at(int region) {
    if (region < 0 || region >= static_cast<int>(regions_.size()))
      throw SimError("unknown region id " + std::to_string(region));
    return regions_[std::size_t(region)];
  }

  static std::uint64_t key_of(int region, std::int64_t row_id) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(region)) << 40) ^
           static_cast<std::uint64_t>(row_id);
  }

  SimTime install(int region, std::int64_t row_id, std::int64_t local_row) {
    SimTime penalty = 0;
    if (static_cast<int>(fifo_.size()) >= hc_.rat_capacity) {
      const FifoEnt victim = fifo_.front();
      fifo_.pop_front();
      rat_.erase(key_of(victim.region, victim.row_id));
      penalty += hc_.mem_write_latency;  // spill the victim's mapping to memory
      ++evictions_;
    }
    fifo_.push_back(FifoEnt{region, row_id});
    rat_.emplace(key_of(region, row_id), local_row);
    return penalty;
  }

  HubConfig hc_;
  std::vector<Region> regions_;
  std::unordered_map<std::uint64_t, std::int64_t> rat_;  // resident entries
  std::deque<FifoEnt> fifo_;                             // eviction order
  std::uint64_t hits_ = 0, fresh_ = 0, recoveries_ = 0, evictions_ = 0;
};

}  // namespace moehub

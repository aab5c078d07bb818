#pragma once

// Consumer-side availability tracking. Each gated kernel gets a dependency
// table mapping row-tile address ranges to ack thresholds; every completed
// local write of an inbound store increments the matching tile counter and a
// global counter. A tile reaching its threshold releases its thread-block
// group. When the global counter hits the layer's expected total, tiles that
// never received data are deallocated and partially filled tiles are
// force-released so stragglers of a short final tile cannot wedge the layer.
//
// Counters are per 128 B packet ack. An optional shadow bitmap cross-checks
// that threshold-released tiles really had every byte written.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moehub/config.hpp"
#include "moehub/sim.hpp"

namespace moehub {

struct TileState {
  std::uint64_t range_start = 0;
  std::uint64_t range_end = 0;
  std::int64_t threshold = 0;
  std::int64_t counter = 0;
  bool released = false;
  bool forced = false;
  bool deallocated = false;
};

struct DamTableDesc {
  std::string name;
  std::uint64_t base = 0;
  int row_bytes = 0;
  std::int64_t capacity_rows = 0;
  int tile_rows = 0;
  int packet_bytes = 128;
};

class Dam {
 public:
  // ready(table, tile, forced): tile's TB group may run.
  // dealloc(table, tile): tile's TB group will never run.
  using ReadyFn = std::function<void(int, int, bool)>;
  using DeallocFn = std::function<void(int, int)>;

  Dam(ReadyFn ready, DeallocFn dealloc, bool shadow = false)
      : ready_(std::move(ready)), dealloc_(std::move(dealloc)), shadow_(shadow) {}

  int add_table(const DamTableDesc& d) {
    if (d.tile_rows <= 0 || d.row_bytes <= 0 || d.row_bytes % d.packet_bytes != 0)
      throw ConfigError("bad dependency table geometry for " + d.name);
    Table t;
    t.desc = d;
    const std::int64_t n_tiles = (d.capacity_rows + d.tile_rows - 1) / d.tile_rows;
    const std::int64_t packets_per_row = d.row_bytes / d.packet_bytes;
    t.tiles.resize(static_cast<std::size_t>(n_tiles));
    for (std::int64_t i = 0; i < n_tiles; ++i) {
      TileState& ts = t.tiles[std::size_t(i)];
      ts.range_start = d.base + static_cast<std::uint64_t>(i) * d.tile_rows * d.row_bytes;
      // Last tile absorbs the remainder range; its threshold is NOT cut down
      // (the realized row count is unknown until the layer's traffic ends).
      const std::int64_t rows_end = std::min<std::int64_t>((i + 1) * d.tile_rows,
                                                           d.capacity_rows);
      ts.range_end = d.base + static_cast<std::uint64_t>(rows_end) * d.row_bytes;
      ts.threshold = static_cast<std::int64_t>(d.tile_rows) * packets_per_row;
    }
    if (shadow_)
      t.coverage.assign(static_cast<std::size_t>(d.capacity_rows) *
                            static_cast<std::size_t>(d.row_bytes / d.packet_bytes),
                        false);
    tables_.push_back(std::move(t));
    return static_cast<int>(tables_.size()) - 1;
  }

  void set_global_target(std::int64_t target) { target_ = target; check_all_ready(); }
  std::int64_t global_target() const { return target_; }
  std::int64_t global_current() const { return current_; }
  bool all_ready_fired() const { return all_ready_fired_; }

  // One completed local write of an inbound store. `bytes` feeds only the
  // shadow bitmap; the counters advance one ack per packet regardless.
  void on_write_ack(int table, std::uint64_t addr, int bytes) {
    Table& t = table_at(table);
    const std::uint64_t off = addr - t.desc.base;
    const std::int64_t tile =
        static_cast<std::int64_t>(off) /
        (static_cast<std::int64_t>(t.desc.tile_rows) * t.desc.row_bytes);
    if (tile < 0 || tile >= static_cast<std::int64_t>(t.tiles.size()))
      throw SimError("ack outside dependency table " + t.desc.name);
    TileState& ts = t.tiles[std::size_t(tile)];
    if (ts.deallocated) {  // late ack for a dead group: ignore
      ++ignored_;
      return;
    }
    ++current_;
    ts.counter += 1;
    if (shadow_) {
      const std::size_t first = static_cast<std::size_t>(off) / t.desc.packet_bytes;
      const std::size_t last =
          static_cast<std::size_t>(off + std::max(bytes, 1) - 1) / t.desc.packet_bytes;
      for (std::size_t s = first; s <= last && s < t.coverage.size(); ++s)
        t.coverage[s] = true;
    }
    if (!ts.released && ts.counter >= ts.threshold) {
      if (shadow_) verify_tile_coverage(t, static_cast<int>(tile));
      ts.released = true;
      ready_(table, static_cast<int>(tile), false);
    }
    check_all_ready();
  }

  const TileState& tile(int table, int t) const {
    return tables_[std::size_t(table)].tiles[std::size_t(t)];
  }
  int n_tiles(int table) const {
    return static_cast<int>(tables_[std::size_t(table)].tiles.size());
  }
  std::int64_t sum_counters() const {
    std::int64_t s = 0;
    for (const Table& t : tables_)
      for (const TileState& ts : t.tiles) s += ts.counter;
    return s;
  }
  std::int64_t deallocated_tiles() const { return dealloc_count_; }
  std::int64_t forced_tiles() const { return forced_count_; }
  std::int64_t ignored_acks() const { return ignored_; }

 private:
  struct Table {
    DamTableDesc desc;
    std::vector<TileState> tiles;
    std::vector<bool> coverage;  // shadow: one bit per 128 B slot
  };

  Table& table_at(int i) {
    if (i < 0 || i >= static_cast<int>(tables_.size()))
      throw SimError("unknown dependency table " + std::to_string(i));
    return tables_[std::size_t(i)];
  }

  void verify_tile_coverage(const Table& t, int tile) const {
    const TileState& ts = t.tiles[std::size_t(tile)];
    const std::size_t first =
        static_cast<std::size_t>(ts.range_start - t.desc.base) / t.desc.packet_bytes;
    const std::size_t last =
        static_cast<std::size_t>(ts.range_end - t.desc.base) / t.desc.packet_bytes;
    for (std::size_t s = first; s < last; ++s) {
      if (!t.coverage[s])
        throw SimError("tile released before full byte coverage in " + t.desc.name);
    }
  }

  void check_all_ready() {
    if (target_ < 0 || current_ < target_) return;
    if (current_ > target_)
      throw SimError("ack count exceeded global target (" + std::to_string(current_) +
                     " > " + std::to_string(target_) + ")");
    if (all_ready_fired_) throw SimError("AllReady fired twice");
    all_ready_fired_ = true;
    for (int ti = 0; ti < static_cast<int>(tables_.size()); ++ti) {
      Table& t = tables_[std::size_t(ti)];
      for (int i = 0; i < static_cast<int>(t.tiles.size()); ++i) {
        TileState& ts = t.tiles[std::size_t(i)];
        if (ts.released || ts.deallocated) continue;
        if (ts.counter == 0) {
          ts.deallocated = true;
          ++dealloc_count_;
          if (dealloc_) dealloc_(ti, i);
        } else {
          ts.released = true;
          ts.forced = true;
          ++forced_count_;
          ready_(ti, i, true);
        }
      }
    }
  }

  ReadyFn ready_;
  DeallocFn dealloc_;
  bool shadow_;
  std::vector<Table> tables_;
  std::int64_t target_ = -1;
  std::int64_t current_ = 0;
  bool all_ready_fired_ = false;
  std::int64_t dealloc_count_ = 0;
  std::int64_t forced_count_ = 0;
  std::int64_t ignored_ = 0;
};

}  // namespace moehub

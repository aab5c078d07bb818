#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "moehub/dam.hpp"

using namespace moehub;

namespace {

struct Rig {
  std::vector<std::tuple<int, int, bool>> ready;  // table, tile, forced
  std::vector<std::pair<int, int>> dead;
  Dam dam;

  explicit Rig(bool shadow = false)
      : dam([this](int t, int i, bool f) { ready.push_back({t, i, f}); },
            [this](int t, int i) { dead.push_back({t, i}); }, shadow) {}
};

}  // namespace

TEST_CASE("table geometry and thresholds") {
  Rig rig;
  const int t = rig.dam.add_table({"gemm1_in", 0x10000, 8192, 16384, 128});
  CHECK(rig.dam.n_tiles(t) == 128);
  CHECK(rig.dam.tile(t, 0).threshold == 128 * 64);  // 64 packets per 8192 B row
  CHECK(rig.dam.tile(t, 3).range_start == 0x10000 + 3ull * 128 * 8192);
}

TEST_CASE("last tile covers the remainder but keeps the full threshold") {
  Rig rig;
  const int t = rig.dam.add_table({"x", 0, 128, 100, 32});
  CHECK(rig.dam.n_tiles(t) == 4);
  CHECK(rig.dam.tile(t, 3).range_end == 100ull * 128);
  CHECK(rig.dam.tile(t, 3).threshold == 32);
}

TEST_CASE("threshold release fires exactly once, on the crossing ack") {
  Rig rig;
  const int t = rig.dam.add_table({"x", 0, 128, 8, 4});  // threshold 4 per tile
  for (int i = 0; i < 3; ++i) rig.dam.on_write_ack(t, 0, 128);
  CHECK(rig.ready.empty());
  rig.dam.on_write_ack(t, 128, 128);
  REQUIRE(rig.ready.size() == 1);
  CHECK(rig.ready[0] == std::tuple<int, int, bool>{t, 0, false});
  rig.dam.on_write_ack(t, 256, 128);  // beyond threshold: counted, no re-fire
  CHECK(rig.ready.size() == 1);
  CHECK(rig.dam.tile(t, 0).counter == 5);
}

TEST_CASE("acks land in the tile that owns their address") {
  Rig rig;
  const int t = rig.dam.add_table({"x", 0x1000, 256, 64, 16});
  rig.dam.on_write_ack(t, 0x1000 + 17ull * 256, 128);  // row 17 -> tile 1
  CHECK(rig.dam.tile(t, 1).counter == 1);
  CHECK(rig.dam.tile(t, 0).counter == 0);
  CHECK_THROWS_AS(rig.dam.on_write_ack(t, 0x1000 + 64ull * 256, 128), SimError);
}

TEST_CASE("all-ready: zero tiles die, partial tiles are force-released") {
  Rig rig;
  const int t = rig.dam.add_table({"x", 0, 128, 12, 4});  // 3 tiles, threshold 4
  rig.dam.set_global_target(6);
  for (int i = 0; i < 4; ++i) rig.dam.on_write_ack(t, 0, 128);  // tile 0 full
  for (int i = 0; i < 2; ++i) rig.dam.on_write_ack(t, 4 * 128, 128);  // tile 1 partial
  CHECK(rig.dam.all_ready_fired());
  REQUIRE(rig.ready.size() == 2);
  CHECK(rig.ready[0] == std::tuple<int, int, bool>{t, 0, false});
  CHECK(rig.ready[1] == std::tuple<int, int, bool>{t, 1, true});
  REQUIRE(rig.dead.size() == 1);
  CHECK(rig.dead[0] == std::pair<int, int>{t, 2});
  CHECK(rig.dam.forced_tiles() == 1);
  CHECK(rig.dam.deallocated_tiles() == 1);
}

TEST_CASE("exact multiple of the tile size: all-ready is a no-op") {
  Rig rig;
  const int t = rig.dam.add_table({"x", 0, 128, 8, 4});
  rig.dam.set_global_target(8);
  for (int i = 0; i < 4; ++i) rig.dam.on_write_ack(t, 0, 128);
  for (int i = 0; i < 4; ++i) rig.dam.on_write_ack(t, 4 * 128, 128);
  CHECK(rig.ready.size() == 2);
  CHECK(rig.dead.empty());
  CHECK(rig.dam.forced_tiles() == 0);
}

TEST_CASE("late acks to deallocated tiles are ignored") {
  Rig rig;
  const int t = rig.dam.add_table({"x", 0, 128, 8, 4});
  rig.dam.set_global_target(4);
  for (int i = 0; i < 4; ++i) rig.dam.on_write_ack(t, 0, 128);
  CHECK(rig.dead.size() == 1);  // tile 1 never saw data
  rig.dam.on_write_ack(t, 4 * 128, 128);
  CHECK(rig.dam.ignored_acks() == 1);
  CHECK(rig.dam.tile(t, 1).counter == 0);
}

TEST_CASE("global counter conservation across tables") {
  Rig rig;
  const int a = rig.dam.add_table({"a", 0, 128, 16, 4});
  const int b = rig.dam.add_table({"b", 1 << 20, 128, 16, 4});
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    const int t = rng.below(2) ? a : b;
    const std::uint64_t base = (t == a) ? 0 : (1ull << 20);
    rig.dam.on_write_ack(t, base + rng.below(16) * 128, 128);
    CHECK(rig.dam.sum_counters() == rig.dam.global_current());
  }
}

TEST_CASE("overshooting the global target is a protocol error") {
  Rig rig;
  const int t = rig.dam.add_table({"x", 0, 128, 8, 4});
  rig.dam.set_global_target(2);
  rig.dam.on_write_ack(t, 0, 128);
  rig.dam.on_write_ack(t, 128, 128);
  CHECK(rig.dam.all_ready_fired());
  CHECK_THROWS_AS(rig.dam.on_write_ack(t, 256, 128), SimError);
}

TEST_CASE("shadow bitmap rejects threshold release without full byte coverage") {
  Rig rig(true);
  const int t = rig.dam.add_table({"x", 0, 128, 4, 4});  // 1 tile, threshold 4
  // Four acks, but all for the same slot: counter crosses the threshold while
  // three slots were never written.
  for (int i = 0; i < 3; ++i) rig.dam.on_write_ack(t, 0, 128);
  CHECK_THROWS_AS(rig.dam.on_write_ack(t, 0, 128), SimError);
}

TEST_CASE("shadow bitmap accepts a fully covered tile") {
  Rig rig(true);
  const int t = rig.dam.add_table({"x", 0, 128, 4, 4});
  for (int i = 0; i < 4; ++i) rig.dam.on_write_ack(t, i * 128ull, 128);
  CHECK(rig.ready.size() == 1);
}

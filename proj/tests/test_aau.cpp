#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <unordered_map>
#include <vector>

#include "moehub/aau.hpp"

using namespace moehub;

namespace {
HubConfig small_rat(int cap) {
  HubConfig hc;
  hc.rat_capacity = cap;
  return hc;
}
}  // namespace

TEST_CASE("dense arrival-order allocation and the address formula") {
  Aau aau{HubConfig{}};
  const int r = aau.register_region({"exp_in", 0x1000, 512, 1024});

  auto t1 = aau.translate(r, 42, 0);
  CHECK(t1.addr == 0x1000);
  CHECK(t1.local_row == 0);
  CHECK(t1.outcome == TranslateOutcome::kNew);

  auto t2 = aau.translate(r, 7, 128);
  CHECK(t2.addr == 0x1280);  // base + 1*512 + 128
  CHECK(t2.local_row == 1);

  auto t3 = aau.translate(r, 42, 256);
  CHECK(t3.addr == 0x1100);  // cached slot 0 reused
  CHECK(t3.outcome == TranslateOutcome::kHit);
  CHECK(t3.extra_latency == 0);

  CHECK(aau.rows_seen(r) == 2);
  CHECK(aau.arrival_order(r) == std::vector<std::int64_t>{42, 7});
}

TEST_CASE("second region gets its own id; overlap rejected") {
  Aau aau{HubConfig{}};
  const int a = aau.register_region({"a", 0x10000, 8192, 16384});
  const int b = aau.register_region({"b", 0x10000 + 8192ull * 16384, 8192, 16384});
  CHECK(a == 0);
  CHECK(b == 1);
  CHECK_THROWS_AS(aau.register_region({"c", 0x10000 + 128, 128, 4}), ConfigError);
}

TEST_CASE("fifo eviction spills the oldest, recovery restores the same slot") {
  Aau aau{small_rat(4)};
  const int r = aau.register_region({"exp_in", 0, 128, 64});
  for (std::int64_t row : {10, 11, 12, 13}) aau.translate(r, row, 0);
  CHECK(aau.rat_occupancy() == 4);
  CHECK(aau.rat_resident(r, 10));

  auto t = aau.translate(r, 14, 0);  // evicts row 10
  CHECK(t.extra_latency == HubConfig{}.mem_write_latency);
  CHECK_FALSE(aau.rat_resident(r, 10));
  CHECK(aau.evictions() == 1);

  auto back = aau.translate(r, 10, 64);  // recover from the pointer table
  CHECK(back.outcome == TranslateOutcome::kRecover);
  CHECK(back.local_row == 0);
  CHECK(back.addr == 64);
  CHECK(back.extra_latency >=
        HubConfig{}.spill_penalty);  // lookup, plus eviction of row 11
}

TEST_CASE("stability: every row resolves to one slot at any rat capacity") {
  for (int cap : {1, 4, 64}) {
    Aau aau{small_rat(cap)};
    const int r = aau.register_region({"exp_in", 0, 128, 12000});
    Rng rng(77);
    std::unordered_map<std::int64_t, std::int64_t> oracle;
    for (int i = 0; i < 10000; ++i) {
      const std::int64_t row = static_cast<std::int64_t>(rng.below(3000));
      const auto t = aau.translate(r, row, static_cast<std::int64_t>(rng.below(8)) * 16);
      auto [it, fresh] = oracle.emplace(row, t.local_row);
      CHECK(it->second == t.local_row);
      (void)fresh;
    }
    // Density: slots are exactly {0 .. distinct-1}.
    CHECK(aau.rows_seen(r) == static_cast<std::int64_t>(oracle.size()));
  }
}

TEST_CASE("regions do not interfere") {
  Aau both{HubConfig{}};
  Aau solo_a{HubConfig{}};
  const int ra = both.register_region({"a", 0, 128, 256});
  const int rb = both.register_region({"b", 1 << 20, 128, 256});
  const int sa = solo_a.register_region({"a", 0, 128, 256});
  Rng rng(5);
  std::vector<std::int64_t> rows_a;
  for (int i = 0; i < 500; ++i) {
    const std::int64_t row = static_cast<std::int64_t>(rng.below(100));
    if (rng.below(2)) {
      both.translate(rb, row, 0);
    } else {
      rows_a.push_back(row);
      both.translate(ra, row, 0);
    }
  }
  for (std::int64_t row : rows_a) solo_a.translate(sa, row, 0);
  CHECK(both.arrival_order(ra) == solo_a.arrival_order(sa));
}

TEST_CASE("capacity overflow is fatal") {
  Aau aau{HubConfig{}};
  const int r = aau.register_region({"tiny", 0, 128, 2});
  aau.translate(r, 1, 0);
  aau.translate(r, 2, 0);
  CHECK_THROWS_AS(aau.translate(r, 3, 0), SimError);
}

TEST_CASE("offset out of range and freed-region stores are protocol bugs") {
  Aau aau{HubConfig{}};
  const int r = aau.register_region({"x", 0, 128, 4});
  CHECK_THROWS_AS(aau.translate(r, 0, 128), SimError);
  aau.free_region(r);
  CHECK_THROWS_AS(aau.translate(r, 0, 0), SimError);
  CHECK(aau.rat_occupancy() == 0);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "moehub/workload.hpp"

using namespace moehub;

TEST_CASE("zero target: exact uniform round-robin") {
  const MoeConfig m = *preset_model("mixtral-8x7b");
  const RoutingResult r = generate_routing(m, 8, 1024, 0.0, Rng(1));
  CHECK(r.n_tokens == 8192);
  CHECK(r.realized_std == 0.0);
  CHECK(r.target_met);
  for (std::int64_t c : r.expert_tokens) CHECK(c == 2048);
}

TEST_CASE("tokens always pick top_k distinct experts with normalized gates") {
  const MoeConfig m = *preset_model("qwen2-moe-2.7b");
  const RoutingResult r = generate_routing(m, 8, 64, 0.02, Rng(5));
  for (int t = 0; t < r.n_tokens; ++t) {
    std::set<int> seen;
    double gsum = 0.0;
    for (int j = 0; j < r.top_k; ++j) {
      seen.insert(r.expert_of(t, j));
      CHECK(r.gate_of(t, j) > 0.0);
      gsum += r.gate_of(t, j);
    }
    CHECK(static_cast<int>(seen.size()) == r.top_k);
    CHECK(gsum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("realized imbalance lands within 10% of the target") {
  const MoeConfig m = *preset_model("mixtral-8x7b");
  for (double target : {0.01, 0.032, 0.05}) {
    for (std::uint64_t seed : {2ull, 3ull, 4ull}) {
      const RoutingResult r = generate_routing(m, 8, 1024, target, Rng(seed));
      INFO("target ", target, " seed ", seed, " realized ", r.realized_std);
      CHECK(r.target_met);
      CHECK(r.realized_std >= 0.9 * target);
      CHECK(r.realized_std <= 1.1 * target);
    }
  }
}

TEST_CASE("same seed reproduces the routing exactly") {
  const MoeConfig m = *preset_model("phi-3.5-moe");
  const RoutingResult a = generate_routing(m, 8, 256, 0.032, Rng(17));
  const RoutingResult b = generate_routing(m, 8, 256, 0.032, Rng(17));
  CHECK(a.experts == b.experts);
  CHECK(a.gates == b.gates);
  CHECK(a.realized_std == b.realized_std);
}

TEST_CASE("bookkeeping: conservation and shard mapping") {
  const MoeConfig m = *preset_model("mixtral-8x7b");
  const RoutingResult r = generate_routing(m, 4, 512, 0.032, Rng(9));
  std::int64_t total = 0;
  for (std::int64_t c : r.expert_tokens) total += c;
  CHECK(total == static_cast<std::int64_t>(r.n_tokens) * r.top_k);
  std::int64_t sends = 0;
  for (const auto& row : r.send_counts)
    for (std::int64_t c : row) sends += c;
  CHECK(sends == total);
  CHECK(r.src_gpu(0) == 0);
  CHECK(r.src_gpu(511) == 0);
  CHECK(r.src_gpu(512) == 1);
  CHECK(r.expert_gpu(0) == 0);
  CHECK(r.expert_gpu(7) == 3);  // 8 experts over 4 GPUs -> 2 per GPU
}

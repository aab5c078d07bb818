#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "moehub/config.hpp"

using namespace moehub;

TEST_CASE("model presets") {
  auto m = preset_model("mixtral-8x7b");
  REQUIRE(m.has_value());
  CHECK(m->hidden_size == 4096);
  CHECK(m->ffn_hidden_size == 14336);
  CHECK(m->n_experts == 8);
  CHECK(m->top_k == 2);
  CHECK(m->row_bytes() == 8192);

  auto q = preset_model("qwen2-moe-2.7b");
  REQUIRE(q.has_value());
  CHECK(q->n_experts == 64);
  CHECK(q->top_k == 4);

  auto p = preset_model("phi-3.5-moe");
  REQUIRE(p.has_value());
  CHECK(p->ffn_hidden_size == 6400);
  CHECK(p->n_experts == 16);

  CHECK_FALSE(preset_model("gpt-oss").has_value());
}

TEST_CASE("derived rates") {
  FabricConfig fc;
  // 400 GB/s across 4 links -> 100 GB/s per link -> 16 B flit every 160 ps.
  CHECK(fc.flit_time() == ps(160));

  GpuConfig gc;
  CHECK(gc.store_issue_interval() == ps(500));  // 2e9 sub-requests/s
  CHECK(gc.local_store_interval(128) == ps(128));

  HubConfig hc;
  CHECK(hc.ingress_cycle() == ps(625));  // 1.6 GHz
}

TEST_CASE("defaults validate and round-trip through json") {
  ExperimentConfig cfg;
  cfg.model = *preset_model("mixtral-8x7b");
  cfg.validate();
  const Json j = config_to_json(cfg);
  const ExperimentConfig back = config_from_json(j);
  CHECK(config_to_json(back) == j);
  CHECK(back.model.n_experts == 8);
  CHECK(back.fabric.link_latency == ns(250));
  CHECK(back.hub.egress_slot == ps(640));
}

TEST_CASE("model may be given as a preset string") {
  Json j = {{"model", "phi-3.5-moe"}, {"n_gpus", 8}};
  const ExperimentConfig cfg = config_from_json(j);
  CHECK(cfg.model.ffn_hidden_size == 6400);
  CHECK(cfg.model.n_experts == 16);
}

TEST_CASE("unknown keys are rejected with their path") {
  Json j = {{"model", "mixtral-8x7b"}, {"fabric", {{"n_swtiches", 4}}}};
  CHECK_THROWS_WITH_AS(config_from_json(j),
                       "unknown config keys: fabric.n_swtiches", ConfigError);
}

TEST_CASE("validation failures") {
  ExperimentConfig cfg;
  cfg.model = *preset_model("mixtral-8x7b");

  SUBCASE("experts must divide over gpus") {
    cfg.n_gpus = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("target_std range") {
    cfg.target_std = 0.2;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("store granularity") {
    cfg.gpu.store_request_bytes = 48;
    cfg.validate();  // multiple of 16, fits in a chunk
    cfg.gpu.store_request_bytes = 50;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.gpu.store_request_bytes = 256;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("scaling tile must hold whole tokens") {
    cfg.gpu.scaling_tile_rows = 7;  // top_k = 2
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("row must be chunk aligned") {
    cfg.model.hidden_size = 100;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("unknown pipeline name rejected") {
  Json j = {{"model", "mixtral-8x7b"}, {"pipelines", {"moehub", "warp_drive"}}};
  CHECK_THROWS_AS(config_from_json(j), ConfigError);
}

TEST_CASE("pipeline names round-trip") {
  for (Pipeline p : {Pipeline::kIdeal, Pipeline::kMoeHub, Pipeline::kMoeHubPkt,
                     Pipeline::kMoeHubDep, Pipeline::kMoeHubBase,
                     Pipeline::kMediatedNonoverlap, Pipeline::kMediatedPipelined}) {
    auto back = pipeline_from_name(pipeline_name(p));
    REQUIRE(back.has_value());
    CHECK(*back == p);
  }
}

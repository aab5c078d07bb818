#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "moehub/gpu.hpp"

using namespace moehub;

namespace {
GpuConfig tiny(int sms) {
  GpuConfig gc;
  gc.n_sms = sms;
  return gc;
}
auto fixed(SimTime d) {
  return [d](int) { return d; };
}
}  // namespace

TEST_CASE("roofline block duration") {
  GpuConfig gc;  // 700 TFLOPS / 132 SMs, 3000 GB/s / 132 SMs
  // One 128x128 output tile over a 4096-deep reduction:
  const double flops = 2.0 * 128 * 128 * 4096;
  const double bytes = (128.0 * 4096 / 112 + 4096.0 * 128 / 64 + 128.0 * 128) * 2;
  const SimTime d = tb_duration(gc, flops, bytes);
  CHECK(d == doctest::Approx(25309629).epsilon(0.001));  // ~25.3 us, compute bound

  // A memory-bound pass: 1 flop, 1 MB.
  const SimTime m = tb_duration(gc, 1.0, 1 << 20);
  CHECK(m == doctest::Approx(1048576.0 * 132 / 3).epsilon(0.001));
}

TEST_CASE("blocks fill free SMs and drain in waves") {
  Engine eng;
  Gpu gpu(eng, tiny(2), 0);
  SimTime done_at = -1;
  gpu.launch("k", Activity::kCompute, 5, fixed(ps(100)), GateMode::kNone,
             [&] { done_at = eng.now(); });
  eng.run();
  CHECK(done_at == ps(300));  // ceil(5/2) waves x 100 ps
  CHECK(gpu.stats(0).sm_busy == ps(500));
  CHECK(gpu.free_sms() == 2);
}

TEST_CASE("kernels dispatch in launch order, blocks in id order") {
  Engine eng;
  Gpu gpu(eng, tiny(1), 0);
  std::vector<std::pair<int, int>> finished;
  const int a = gpu.launch("a", Activity::kCompute, 2, fixed(ps(10)), GateMode::kNone,
                           nullptr, [&](int tb) { finished.push_back({0, tb}); });
  const int b = gpu.launch("b", Activity::kCompute, 2, fixed(ps(10)), GateMode::kNone,
                           nullptr, [&](int tb) { finished.push_back({1, tb}); });
  eng.run();
  CHECK(finished ==
        std::vector<std::pair<int, int>>{{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  CHECK(gpu.kernel_complete(a));
  CHECK(gpu.stats(b).complete == ps(40));
}

TEST_CASE("signal gating holds blocks off the SMs until release") {
  Engine eng;
  Gpu gpu(eng, tiny(4), 0);
  const int k = gpu.launch("g", Activity::kCompute, 4, fixed(ps(50)), GateMode::kSignal);
  eng.schedule_at(ps(1000), [&] { gpu.release(k, 0, 2); });
  eng.schedule_at(ps(2000), [&] { gpu.release(k, 2, 4); });
  eng.run();
  CHECK(gpu.stats(k).first_dispatch == ps(1000));
  CHECK(gpu.stats(k).complete == ps(2050));
  CHECK(gpu.stats(k).sm_polling == 0);
}

TEST_CASE("signal-gated blocks dispatch in release order, not id order") {
  Engine eng;
  Gpu gpu(eng, tiny(1), 0);
  const int k = gpu.launch("g", Activity::kCompute, 2, fixed(ps(10)), GateMode::kSignal);
  eng.schedule_at(ps(100), [&] { gpu.release(k, 1, 2); });  // block 1 first
  eng.schedule_at(ps(500), [&] { gpu.release(k, 0, 1); });
  eng.run();
  // Block 1 runs as soon as it is released; block 0 follows its own release.
  CHECK(gpu.stats(k).first_dispatch == ps(100));
  CHECK(gpu.stats(k).complete == ps(510));
}

TEST_CASE("poll gating spins on the SM and starts on a poll tick") {
  Engine eng;
  GpuConfig gc = tiny(2);  // poll_interval = 1 us
  Gpu gpu(eng, gc, 0);
  const int k = gpu.launch("p", Activity::kCompute, 1, fixed(ps(100)), GateMode::kPoll);
  eng.schedule_at(ns(1500), [&] { gpu.release(k, 0, 1); });
  eng.run();
  // Spinning from t=0; release at 1.5 us is noticed at the 2 us tick.
  CHECK(gpu.stats(k).sm_polling == us(2));
  CHECK(gpu.stats(k).complete == us(2) + ps(100));
  bool saw_poll = false;
  for (const ActInterval& iv : gpu.activity())
    if (iv.what == Activity::kPolling) {
      saw_poll = true;
      CHECK(iv.begin == 0);
      CHECK(iv.end == us(2));
    }
  CHECK(saw_poll);
}

TEST_CASE("poll-gated blocks occupy SMs and serialize successors") {
  Engine eng;
  Gpu gpu(eng, tiny(1), 0);
  const int p = gpu.launch("p", Activity::kCompute, 1, fixed(ps(100)), GateMode::kPoll);
  const int q = gpu.launch("q", Activity::kCompute, 1, fixed(ps(100)), GateMode::kNone);
  eng.schedule_at(us(3), [&] { gpu.release(p, 0, 1); });
  eng.run();
  // q could not start while p spun on the only SM.
  CHECK(gpu.stats(q).first_dispatch >= us(3));
}

TEST_CASE("release before dispatch still pays one poll quantum") {
  Engine eng;
  Gpu gpu(eng, tiny(1), 0);
  const int a = gpu.launch("a", Activity::kCompute, 1, fixed(us(3)), GateMode::kNone);
  const int p = gpu.launch("p", Activity::kCompute, 1, fixed(ps(100)), GateMode::kPoll);
  eng.schedule_at(us(1), [&] { gpu.release(p, 0, 1); });  // before p has an SM
  eng.run();
  CHECK(gpu.stats(a).complete == us(3));
  CHECK(gpu.stats(p).first_dispatch == us(3));
  CHECK(gpu.stats(p).complete == us(4) + ps(100));
  CHECK(gpu.stats(p).sm_polling == us(1));
}

TEST_CASE("deallocated blocks consume zero SM time") {
  Engine eng;
  Gpu gpu(eng, tiny(4), 0);
  SimTime done_at = -1;
  const int k = gpu.launch("g", Activity::kCompute, 4, fixed(ps(50)), GateMode::kSignal,
                           [&] { done_at = eng.now(); });
  eng.schedule_at(ps(10), [&] {
    gpu.release(k, 0, 1);
    gpu.deallocate(k, 1, 4);
  });
  eng.run();
  CHECK(gpu.stats(k).sm_busy == ps(50));
  CHECK(gpu.stats(k).deallocated == 3);
  CHECK(done_at == ps(60));
}

TEST_CASE("force-release override rescales the block duration") {
  Engine eng;
  Gpu gpu(eng, tiny(1), 0);
  const int k = gpu.launch("g", Activity::kCompute, 1, fixed(ps(1000)), GateMode::kSignal);
  eng.schedule_at(ps(5), [&] { gpu.release(k, 0, 1, ps(250)); });
  eng.run();
  CHECK(gpu.stats(k).complete == ps(255));
  CHECK(gpu.stats(k).sm_busy == ps(250));
}

TEST_CASE("deallocating a block that ran is a protocol error") {
  Engine eng;
  Gpu gpu(eng, tiny(1), 0);
  const int k = gpu.launch("g", Activity::kCompute, 1, fixed(ps(10)), GateMode::kNone);
  eng.run();
  CHECK_THROWS_AS(gpu.deallocate(k, 0, 1), SimError);
}

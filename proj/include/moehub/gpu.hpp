#pragma once

// SM-level execution model. A kernel is a list of thread blocks with
// per-block durations; blocks dispatch to free SMs across kernels in launch
// order, within a kernel in the order they became dispatchable. Blocks can be
// gated: either released explicitly (availability signals feed the block
// scheduler, so release order is dispatch order), or poll-gated, where the
// block occupies an SM immediately and burns poll cycles until its
// release, starting real work only at the next poll tick. Released-with-
// override supports force-released partial tiles running a rescaled
// duration. Deallocated blocks never touch an SM.

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "moehub/config.hpp"
#include "moehub/sim.hpp"

namespace moehub {

enum class Activity : std::uint8_t {
  kCompute,
  kRouting,
  kScaling,
  kMediation,
  kPolling,
};

inline const char* activity_name(Activity a) {
  switch (a) {
    case Activity::kCompute: return "compute";
    case Activity::kRouting: return "routing";
    case Activity::kScaling: return "scaling";
    case Activity::kMediation: return "mediation";
    case Activity::kPolling: return "polling";
  }
  return "?";
}

struct ActInterval {
  SimTime begin;
  SimTime end;
  Activity what;
};

enum class GateMode : std::uint8_t {
  kNone,     // dispatchable as soon as an SM frees up
  kSignal,   // held off-SM until release()
  kPoll,     // occupies an SM, spins until release(), starts on a poll tick
};

struct KernelStats {
  SimTime first_dispatch = -1;
  SimTime complete = -1;
  SimTime sm_busy = 0;     // sum over blocks of real work time
  SimTime sm_polling = 0;  // sum over blocks of on-SM wait time
  int done = 0;
  int deallocated = 0;
};

class Gpu {
 public:
  Gpu(Engine& eng, const GpuConfig& gc, int gpu_id)
      : eng_(eng), gc_(gc), id_(gpu_id), free_sms_(gc.n_sms) {}

  using DoneFn = std::function<void(int tb)>;
  using CompleteFn = std::function<void()>;

  int launch(std::string name, Activity what, int n_tbs,
             std::function<SimTime(int)> duration, GateMode gate,
             CompleteFn on_complete = nullptr, DoneFn on_tb_done = nullptr) {
    if (n_tbs <= 0) throw SimError("kernel " + name + " launched with no blocks");
    Kernel k;
    k.name = std::move(name);
    k.what = what;
    k.duration = std::move(duration);
    k.gate = gate;
    k.on_complete = std::move(on_complete);
    k.on_tb_done = std::move(on_tb_done);
    k.tb.assign(static_cast<std::size_t>(n_tbs),
                gate == GateMode::kSignal ? TbState::kHeld : TbState::kQueued);
    if (gate != GateMode::kSignal)
      for (int i = 0; i < n_tbs; ++i) k.ready.push_back(i);
    k.n_live = n_tbs;
    kernels_.push_back(std::move(k));
    const int kid = static_cast<int>(kernels_.size()) - 1;
    pump();
    return kid;
  }

  // Release gated blocks [from, to). A non-negative override replaces the
  // per-block duration (rescaled partial tiles).
  void release(int kid, int from, int to, SimTime override_duration = -1) {
    Kernel& k = kernel_at(kid);
    for (int i = from; i < to; ++i) {
      TbState& st = k.tb[std::size_t(i)];
      if (override_duration >= 0) {
        if (static_cast<int>(k.overrides.size()) < to) k.overrides.resize(std::size_t(to), -1);
        k.overrides[std::size_t(i)] = override_duration;
      }
      if (st == TbState::kHeld) {
        st = TbState::kQueued;
        k.ready.push_back(i);
      } else if (st == TbState::kSpinning) {
        st = TbState::kReleasedSpinning;
        start_after_poll(kid, i);
      } else if (st == TbState::kQueued && k.gate == GateMode::kPoll) {
        st = TbState::kReleasedQueued;  // released before it ever got an SM
      }
    }
    pump();
  }

  void deallocate(int kid, int from, int to) {
    Kernel& k = kernel_at(kid);
    for (int i = from; i < to; ++i) {
      TbState& st = k.tb[std::size_t(i)];
      if (st != TbState::kHeld && st != TbState::kQueued)
        throw SimError("deallocating a block that already ran in " + k.name);
      st = TbState::kDeallocated;
      ++k.stats.deallocated;
      --k.n_live;
    }
    finish_if_complete(kid);
  }

  bool kernel_complete(int kid) const {
    const Kernel& k = kernels_[std::size_t(kid)];
    return k.stats.done + k.stats.deallocated == static_cast<int>(k.tb.size());
  }
  const KernelStats& stats(int kid) const { return kernels_[std::size_t(kid)].stats; }
  const std::vector<ActInterval>& activity() const { return log_; }
  int free_sms() const { return free_sms_; }
  int id() const { return id_; }
  SimTime sm_busy_total() const { return busy_total_; }

 private:
  enum class TbState : std::uint8_t {
    kHeld,              // signal-gated, not yet released
    kQueued,            // waiting for an SM
    kReleasedQueued,    // poll-gated, released before dispatch
    kSpinning,          // poll-gated, on an SM, awaiting release
    kReleasedSpinning,  // released, waiting for its poll tick
    kRunning,
    kDone,
    kDeallocated,
  };

  struct Kernel {
    std::string name;
    Activity what;
    std::function<SimTime(int)> duration;
    GateMode gate = GateMode::kNone;
    CompleteFn on_complete;
    DoneFn on_tb_done;
    std::vector<TbState> tb;
    std::vector<SimTime> overrides;
    std::vector<SimTime> spin_start;  // poll mode: when the block hit the SM
    std::deque<int> ready;            // dispatchable blocks, in readiness order
    int n_live = 0;
    KernelStats stats;
  };

  Kernel& kernel_at(int kid) {
    if (kid < 0 || kid >= static_cast<int>(kernels_.size()))
      throw SimError("unknown kernel id " + std::to_string(kid));
    return kernels_[std::size_t(kid)];
  }

  SimTime duration_of(const Kernel& k, int tb) const {
    if (static_cast<std::size_t>(tb) < k.overrides.size() && k.overrides[std::size_t(tb)] >= 0)
      return k.overrides[std::size_t(tb)];
    return k.duration(tb);
  }

  void pump() {
    if (pumping_) return;
    pumping_ = true;
    while (free_sms_ > 0) {
      int kid = -1, tb = -1;
      for (std::size_t ki = 0; ki < kernels_.size() && kid < 0; ++ki) {
        Kernel& k = kernels_[ki];
        while (!k.ready.empty()) {
          const int cand = k.ready.front();
          const TbState st = k.tb[std::size_t(cand)];
          if (st == TbState::kQueued || st == TbState::kReleasedQueued) {
            kid = static_cast<int>(ki);
            tb = cand;
            break;
          }
          k.ready.pop_front();  // deallocated since it was queued
        }
      }
      if (kid < 0) break;
      kernels_[std::size_t(kid)].ready.pop_front();
      dispatch(kid, tb);
    }
    pumping_ = false;
  }

  void dispatch(int kid, int tb) {
    Kernel& k = kernels_[std::size_t(kid)];
    --free_sms_;
    if (k.stats.first_dispatch < 0) k.stats.first_dispatch = eng_.now();
    TbState& st = k.tb[std::size_t(tb)];
    if (k.gate == GateMode::kPoll && st == TbState::kQueued) {
      st = TbState::kSpinning;
      if (k.spin_start.size() < k.tb.size()) k.spin_start.resize(k.tb.size(), -1);
      k.spin_start[std::size_t(tb)] = eng_.now();
      return;  // holds the SM until release()
    }
    if (st == TbState::kReleasedQueued && k.gate == GateMode::kPoll) {
      // Released before it got an SM: still pays one poll quantum to notice.
      st = TbState::kRunning;
      const SimTime start = eng_.now() + gc_.poll_interval;
      log_.push_back({eng_.now(), start, Activity::kPolling});
      k.stats.sm_polling += gc_.poll_interval;
      run(kid, tb, start);
      return;
    }
    st = TbState::kRunning;
    run(kid, tb, eng_.now());
  }

  void start_after_poll(int kid, int tb) {
    Kernel& k = kernels_[std::size_t(kid)];
    const SimTime spun_since = k.spin_start[std::size_t(tb)];
    const SimTime elapsed = eng_.now() - spun_since;
    const SimTime ticks = (elapsed + gc_.poll_interval - 1) / gc_.poll_interval;
    const SimTime start = spun_since + std::max<SimTime>(ticks, 1) * gc_.poll_interval;
    log_.push_back({spun_since, start, Activity::kPolling});
    k.stats.sm_polling += start - spun_since;
    k.tb[std::size_t(tb)] = TbState::kRunning;
    run(kid, tb, start);
  }

  void run(int kid, int tb, SimTime start) {
    Kernel& k = kernels_[std::size_t(kid)];
    const SimTime dur = duration_of(k, tb);
    const SimTime end = start + dur;
    log_.push_back({start, end, k.what});
    k.stats.sm_busy += dur;
    busy_total_ += dur;
    eng_.schedule_at(end, [this, kid, tb] {
      Kernel& kk = kernels_[std::size_t(kid)];
      kk.tb[std::size_t(tb)] = TbState::kDone;
      ++kk.stats.done;
      --kk.n_live;
      ++free_sms_;
      if (kk.on_tb_done) kk.on_tb_done(tb);
      finish_if_complete(kid);
      pump();
    });
  }

  void finish_if_complete(int kid) {
    Kernel& k = kernels_[std::size_t(kid)];
    if (k.stats.complete < 0 &&
        k.stats.done + k.stats.deallocated == static_cast<int>(k.tb.size())) {
      k.stats.complete = eng_.now();
      if (k.on_complete) {
        auto cb = k.on_complete;
        eng_.schedule_at(eng_.now(), std::move(cb));
      }
    }
  }

  Engine& eng_;
  GpuConfig gc_;
  int id_;
  int free_sms_;
  bool pumping_ = false;
  std::vector<Kernel> kernels_;
  std::vector<ActInterval> log_;
  SimTime busy_total_ = 0;
};

// Roofline block duration: the slower of compute and memory for this block's
// work. Bytes should already account for on-chip reuse.
inline SimTime tb_duration(const GpuConfig& gc, double flops, double bytes) {
  const double t_c = flops / gc.compute_flops_per_ps_per_sm();
  const double t_m = bytes / gc.mem_bytes_per_ps_per_sm();
  return static_cast<SimTime>(std::max(t_c, t_m) + 0.5);
}

}  // namespace moehub

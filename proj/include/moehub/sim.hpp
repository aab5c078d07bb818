#pragma once

// Deterministic discrete-event simulation kernel. Single logical thread per
// engine instance; instances share nothing and may run in parallel.

#include <cmath>
#include <cstdint>
#include <functional>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

namespace moehub {

// Integer picoseconds since simulation start. 16 B flits at ~100 GB/s need
// sub-nanosecond resolution (160 ps/flit); integers keep runs reproducible.
using SimTime = std::int64_t;

constexpr SimTime kPicosecond = 1;
constexpr SimTime kNanosecond = 1000;
constexpr SimTime kMicrosecond = 1000 * 1000;
constexpr SimTime kMillisecond = 1000LL * 1000 * 1000;

inline constexpr SimTime ps(std::int64_t v) { return v; }
inline constexpr SimTime ns(std::int64_t v) { return v * kNanosecond; }
inline constexpr SimTime us(std::int64_t v) { return v * kMicrosecond; }

// Fatal simulation error: protocol deadlock, past-event scheduling, region
// overflow and friends. Aborts the run; the CLI maps it to a failed cell.
class SimError : public std::runtime_error {
 public:
  explicit SimError(const std::string& what) : std::runtime_error(what) {}
};

class Engine {
 public:
  using Callback = std::function<void()>;

  SimTime now() const { return now_; }

  void set_event_budget(std::uint64_t budget) { event_budget_ = budget; }

  void schedule_at(SimTime fire_at, Callback cb) {
    if (fire_at < now_) {
      throw SimError("past event: scheduled at t=" + std::to_string(fire_at) +
                     " while now=" + std::to_string(now_));
    }
    heap_.push(Ev{fire_at, next_seq_++, std::move(cb)});
    ++scheduled_;
  }

  void schedule_in(SimTime delay, Callback cb) {
    schedule_at(now_ + delay, std::move(cb));
  }

  // Runs until the queue drains. Returns the time of the last fired event.
  SimTime run() { return run_until_internal(false, 0); }

  // Fires every event with fire_at <= deadline.
  SimTime run_until(SimTime deadline) { return run_until_internal(true, deadline); }

  std::uint64_t events_scheduled() const { return scheduled_; }
  std::uint64_t events_fired() const { return fired_; }
  bool quiescent() const { return heap_.empty(); }

 private:
  struct Ev {
    SimTime t;
    std::uint64_t seq;  // tiebreak: equal-time events fire in schedule order
    mutable Callback cb;
  };
  struct Later {
    bool operator()(const Ev& a, const Ev& b) const {
      if (a.t != b.t) return a.t > b.t;
      return a.seq > b.seq;
    }
  };

  SimTime run_until_internal(bool bounded, SimTime deadline) {
    SimTime last = now_;
    while (!heap_.empty()) {
      const Ev& top = heap_.top();
      if (bounded && top.t > deadline) break;
      Callback cb = std::move(top.cb);
      now_ = top.t;
      heap_.pop();
      if (++fired_ > event_budget_) {
        throw SimError("event budget exceeded (" + std::to_string(event_budget_) +
                       " events fired, t=" + std::to_string(now_) +
                       "); likely protocol deadlock or livelock");
      }
      cb();
      last = now_;
    }
    return last;
  }

  std::priority_queue<Ev, std::vector<Ev>, Later> heap_;
  SimTime now_ = 0;
  std::uint64_t next_seq_ = 0;
  std::uint64_t scheduled_ = 0;
  std::uint64_t fired_ = 0;
  std::uint64_t event_budget_ = 1000ULL * 1000 * 1000;
};

// --------------------------------------------------------------------------
// Deterministic RNG. xoroshiro128++ seeded through splitmix64; stream forking
// hashes a text label into the parent seed so independent components never
// share a stream. Identical (seed, label path) gives identical draws on any
// platform; no std::distribution is used anywhere.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed) {
    std::uint64_t sm = seed ^ (stream * 0x9e3779b97f4a7c15ULL + 0x6a09e667f3bcc909ULL);
    s0_ = splitmix64(sm);
    s1_ = splitmix64(sm);
    if (s0_ == 0 && s1_ == 0) s1_ = 1;
  }

  Rng fork(const std::string& label) const {
    return Rng(seed_ ^ (fnv1a64(label) * 0xff51afd7ed558ccdULL), fnv1a64(label));
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t u64() {
    const std::uint64_t result = rotl(s0_ + s1_, 17) + s0_;
    const std::uint64_t t = s1_ ^ s0_;
    s0_ = rotl(s0_, 49) ^ t ^ (t << 21);
    s1_ = rotl(t, 28);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return (u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n ? u64() % n : 0; }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    have_spare_ = true;
    return u * m;
  }

  // Marsaglia-Tsang; valid for alpha > 0.
  double gamma(double alpha) {
    if (alpha < 1.0) {
      const double u = uniform();
      return gamma(alpha + 1.0) * std::pow(u <= 0 ? 1e-300 : u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  std::vector<double> dirichlet(std::size_t n, double alpha) {
    std::vector<double> p(n);
    double sum = 0.0;
    for (auto& v : p) {
      v = gamma(alpha);
      sum += v;
    }
    if (sum <= 0.0) sum = 1.0;
    for (auto& v : p) v /= sum;
    return p;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_;
  std::uint64_t s0_, s1_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace moehub

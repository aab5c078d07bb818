#pragma once

// Token routing with controlled expert-load imbalance. Expert-selection
// probabilities come from a symmetric Dirichlet; its concentration is bisected
// until the realized per-expert token-fraction standard deviation lands
// within 10% of the requested target. Per-token top-k experts are sampled
// without replacement via Gumbel perturbation. A target of exactly 0 uses a
// deterministic round-robin assignment instead.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "moehub/config.hpp"
#include "moehub/sim.hpp"

namespace moehub {

struct RoutingResult {
  int n_tokens = 0;
  int top_k = 0;
  int n_experts = 0;
  int n_gpus = 0;
  int seq_len_per_gpu = 0;
  std::vector<int> experts;    // [token * top_k + j]
  std::vector<double> gates;   // same shape; positive, sum to 1 per token
  std::vector<std::int64_t> expert_tokens;            // per expert
  std::vector<std::vector<std::int64_t>> send_counts; // [src gpu][expert]
  double requested_std = 0.0;
  double realized_std = 0.0;
  bool target_met = true;

  int src_gpu(int token) const { return token / seq_len_per_gpu; }
  int expert_gpu(int expert) const { return expert / (n_experts / n_gpus); }
  int expert_of(int token, int j) const { return experts[std::size_t(token) * top_k + j]; }
  double gate_of(int token, int j) const { return gates[std::size_t(token) * top_k + j]; }
};

namespace detail {

inline double load_std(const std::vector<std::int64_t>& counts, std::int64_t total) {
  double mean = 1.0 / static_cast<double>(counts.size());
  double var = 0.0;
  for (std::int64_t c : counts) {
    const double f = static_cast<double>(c) / static_cast<double>(total);
    var += (f - mean) * (f - mean);
  }
  return std::sqrt(var / static_cast<double>(counts.size()));
}

// One full sample of every token's expert set for a given concentration.
inline void sample_assignment(const MoeConfig& model, int n_tokens, double alpha,
                              Rng rng, std::vector<int>& experts,
                              std::vector<double>& gates,
                              std::vector<std::int64_t>& counts) {
  const int e = model.n_experts, k = model.top_k;
  const std::vector<double> p = rng.dirichlet(static_cast<std::size_t>(e), alpha);
  std::vector<double> logp(static_cast<std::size_t>(e));
  for (int i = 0; i < e; ++i) logp[std::size_t(i)] = std::log(std::max(p[std::size_t(i)], 1e-300));

  experts.assign(static_cast<std::size_t>(n_tokens) * k, 0);
  gates.assign(static_cast<std::size_t>(n_tokens) * k, 0.0);
  counts.assign(static_cast<std::size_t>(e), 0);
  std::vector<std::pair<double, int>> score(static_cast<std::size_t>(e));
  for (int t = 0; t < n_tokens; ++t) {
    for (int i = 0; i < e; ++i) {
      const double u = std::max(rng.uniform(), 1e-300);
      score[std::size_t(i)] = {logp[std::size_t(i)] - std::log(-std::log(u)), i};
    }
    std::partial_sort(score.begin(), score.begin() + k, score.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    double gsum = 0.0;
    for (int j = 0; j < k; ++j) gsum += p[std::size_t(score[std::size_t(j)].second)];
    for (int j = 0; j < k; ++j) {
      const int ex = score[std::size_t(j)].second;
      experts[std::size_t(t) * k + j] = ex;
      gates[std::size_t(t) * k + j] = p[std::size_t(ex)] / gsum;
      ++counts[std::size_t(ex)];
    }
  }
}

}  // namespace detail

inline RoutingResult generate_routing(const MoeConfig& model, int n_gpus,
                                      int seq_len_per_gpu, double target_std,
                                      const Rng& base_rng) {
  RoutingResult r;
  r.n_tokens = n_gpus * seq_len_per_gpu;
  r.top_k = model.top_k;
  r.n_experts = model.n_experts;
  r.n_gpus = n_gpus;
  r.seq_len_per_gpu = seq_len_per_gpu;
  r.requested_std = target_std;
  const int e = model.n_experts, k = model.top_k;
  const std::int64_t total = static_cast<std::int64_t>(r.n_tokens) * k;

  if (target_std == 0.0) {
    // Deterministic round-robin: exactly uniform whenever e divides M*k.
    r.experts.resize(static_cast<std::size_t>(total));
    r.gates.assign(static_cast<std::size_t>(total), 1.0 / k);
    r.expert_tokens.assign(static_cast<std::size_t>(e), 0);
    for (int t = 0; t < r.n_tokens; ++t) {
      for (int j = 0; j < k; ++j) {
        const int ex = static_cast<int>((static_cast<std::int64_t>(t) * k + j) % e);
        r.experts[std::size_t(t) * k + j] = ex;
        ++r.expert_tokens[std::size_t(ex)];
      }
    }
    r.realized_std = detail::load_std(r.expert_tokens, total);
    r.target_met = (total % e == 0);
  } else {
    // Bisect the Dirichlet concentration: larger alpha -> flatter loads.
    Rng rng = base_rng.fork("routing");
    double lo = 0.05, hi = 1e6;
    double best_err = 1e18;
    std::vector<int> experts;
    std::vector<double> gates;
    std::vector<std::int64_t> counts;
    r.target_met = false;
    for (int iter = 0; iter < 48; ++iter) {
      const double alpha = std::sqrt(lo * hi);
      detail::sample_assignment(model, r.n_tokens, alpha,
                                rng.fork("iter" + std::to_string(iter)), experts,
                                gates, counts);
      const double sd = detail::load_std(counts, total);
      const double err = std::abs(sd - target_std);
      if (err < best_err) {
        best_err = err;
        r.experts = experts;
        r.gates = gates;
        r.expert_tokens = counts;
        r.realized_std = sd;
      }
      if (err <= 0.1 * target_std) {
        r.target_met = true;
        break;
      }
      if (sd > target_std) lo = alpha;  // too lumpy: flatten
      else hi = alpha;
    }
  }

  r.send_counts.assign(static_cast<std::size_t>(n_gpus),
                       std::vector<std::int64_t>(static_cast<std::size_t>(e), 0));
  for (int t = 0; t < r.n_tokens; ++t) {
    for (int j = 0; j < k; ++j)
      ++r.send_counts[std::size_t(r.src_gpu(t))][std::size_t(r.expert_of(t, j))];
  }
  return r;
}

}  // namespace moehub

//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "dise/common.hpp"
#include "dise/edge_tensor.hpp"

namespace dise {

// Probabilities below this are treated as exact zeros.
inline constexpr double kProbabilityFloor = 1e-15;

// ---------------------------------------------------------------------------
// Prior edge distribution

class PriorK {
 public:
  PriorK() = default;

  // Normalizes `weights`; they must be non-negative with a positive sum and
  // NoBond first.
  explicit PriorK(std::vector<double> weights, std::string name = "custom")
      : probs_(std::move(weights)), name_(std::move(name)) {
    if (probs_.size() < 2)
      throw InvariantViolation("prior needs at least two bond classes");
    double total = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0) || !std::isfinite(p))
        throw InvariantViolation("prior weights must be finite and >= 0");
      total += p;
    }
    if (total <= 0.0) throw InvariantViolation("prior weights sum to zero");
    for (double &p : probs_) p /= total;
  }

  // Edge-type marginals of the QM9-NMR model (five classes).
  static PriorK qm9() {
    return PriorK({7.26e-1, 2.24e-1, 1.85e-2, 8.70e-3, 2.29e-2}, "qm9");
  }

  // Edge-type marginals of the PCQM4Mv2-NMR model (six classes).
  static PriorK pcqm() {
    return PriorK({8.50e-1, 9.72e-2, 8.63e-3, 8.98e-4, 4.28e-2, 8.28e-4},
                  "pcqm");
  }

  // Whitespace-separated weights, '#' starts a comment.
  static PriorK parse(std::string_view text, std::string name = "file") {
    std::istringstream in{std::string(text)};
    std::vector<double> w;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      std::istringstream fields(line);
      std::string tok;
      while (fields >> tok) {
        try {
          std::size_t used = 0;
          w.push_back(std::stod(tok, &used));
          if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::logic_error &) {
          throw ParseError(lineno, line.find(tok) + 1, "not a number: " + tok);
        }
      }
    }
    return PriorK(std::move(w), std::move(name));
  }

  static PriorK named(std::string_view name) {
    if (name == "qm9") return qm9();
    if (name == "pcqm") return pcqm();
    std::ifstream in{std::string(name)};
    if (!in)
      throw DataError("unknown prior '" + std::string(name) +
                      "' (expected qm9, pcqm or a file path)");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), std::string(name));
  }

  std::size_t classes() const noexcept { return probs_.size(); }
  const std::vector<double> &probs() const noexcept { return probs_; }
  double operator[](std::size_t c) const noexcept { return probs_[c]; }
  const std::string &name() const noexcept { return name_; }

 private:
  std::vector<double> probs_;
  std::string name_;
};

// ---------------------------------------------------------------------------
// Schedule

// Cosine schedule: alpha_bar(t) = f(t) / f(0),
// f(t) = cos^2(pi/2 * (t/T + s) / (1 + s)), beta_t = 1 - alpha_bar_t /
// alpha_bar_{t-1}.
struct NoiseSchedule {
  int t_max = 500;
  double s = 0.008;
  std::vector<double> alpha_bar;  // t = 0..t_max
  std::vector<double> beta;       // t = 0..t_max, beta[0] unused (0)

  double t_norm(int t) const { return static_cast<double>(t) / t_max; }
};

inline NoiseSchedule build_schedule(int t_max = 500, double s = 0.008) {
  if (t_max < 1) throw InvariantViolation("t_max must be >= 1");
  if (!(s > 0.0)) throw InvariantViolation("cosine offset s must be > 0");
  NoiseSchedule out;
  out.t_max = t_max;
  out.s = s;
  auto f = [&](int t) {
    const double c = std::cos(std::numbers::pi / 2.0 *
                              (static_cast<double>(t) / t_max + s) / (1.0 + s));
    return c * c;
  };
  const double f0 = f(0);
  out.alpha_bar.resize(t_max + 1);
  out.beta.assign(t_max + 1, 0.0);
  for (int t = 0; t <= t_max; ++t) {
    double a = f(t) / f0;
    if (a < kProbabilityFloor) a = 0.0;
    out.alpha_bar[t] = a;
  }
  out.alpha_bar[0] = 1.0;
  for (int t = 1; t <= t_max; ++t)
    out.beta[t] = 1.0 - out.alpha_bar[t] / out.alpha_bar[t - 1];
  return out;
}

// Named-schedule entry point; only the cosine family is defined.
inline NoiseSchedule build_schedule(std::string_view name, int t_max,
                                    double s) {
  if (name != "cosine")
    throw InvariantViolation("unsupported noise schedule '" +
                             std::string(name) + "'");
  return build_schedule(t_max, s);
}

// ---------------------------------------------------------------------------
// Transition matrices

// Row-stochastic K x K matrix; row = current class, column = next class.
struct TransitionMatrix {
  Eigen::MatrixXd q;
};

namespace detail {

// (keep) * I + (1 - keep) * 1 k^T with the probability floor applied.
inline TransitionMatrix mix_with_prior(double keep, const PriorK &k) {
  const Eigen::Index K = static_cast<Eigen::Index>(k.classes());
  TransitionMatrix m{Eigen::MatrixXd(K, K)};
  for (Eigen::Index r = 0; r < K; ++r) {
    double total = 0.0;
    for (Eigen::Index c = 0; c < K; ++c) {
      double v = (1.0 - keep) * k[c] + (r == c ? keep : 0.0);
      if (v < kProbabilityFloor) v = 0.0;
      m.q(r, c) = v;
      total += v;
    }
    m.q.row(r) /= total;
  }
  return m;
}

}  // namespace detail

// Q_t = (1 - beta_t) I + beta_t 1 k^T.
inline TransitionMatrix one_step_matrix(double beta_t, const PriorK &k) {
  if (beta_t < 0.0 || beta_t > 1.0)
    throw InvariantViolation("beta_t must lie in [0, 1]");
  return detail::mix_with_prior(1.0 - beta_t, k);
}

// Closed form of Q_1 Q_2 ... Q_t: alpha_bar_t I + (1 - alpha_bar_t) 1 k^T.
inline TransitionMatrix cumulative_matrix(int t, const NoiseSchedule &sched,
                                          const PriorK &k) {
  if (t < 0 || t > sched.t_max)
    throw InvariantViolation("timestep outside the schedule");
  return detail::mix_with_prior(sched.alpha_bar[t], k);
}

// ---------------------------------------------------------------------------
// Sampling

// Corrupts every pair i < j independently with row e0(i, j) of Qbar_t and
// mirrors the result. Pairs are visited row-major.
inline EdgeTensor forward_sample(const EdgeTensor &e0, int t,
                                 const NoiseSchedule &sched, const PriorK &k,
                                 Rng &rng) {
  if (t == 0) return e0;
  const auto qbar = cumulative_matrix(t, sched, k);
  const std::size_t K = k.classes();
  std::vector<std::vector<double>> rows(K, std::vector<double>(K));
  for (std::size_t r = 0; r < K; ++r)
    for (std::size_t c = 0; c < K; ++c)
      rows[r][c] = qbar.q(static_cast<Eigen::Index>(r),
                          static_cast<Eigen::Index>(c));
  EdgeTensor out(e0.size());
  for (std::size_t i = 0; i < e0.size(); ++i)
    for (std::size_t j = i + 1; j < e0.size(); ++j) {
      const auto cls = e0(i, j);
      if (cls >= K) throw ShapeMismatch("edge class outside the prior");
      out.set(i, j, static_cast<std::uint8_t>(rng.categorical(rows[cls])));
    }
  return out;
}

inline EdgeTensor forward_sample(const EdgeTensor &e0, int t,
                                 const NoiseSchedule &sched, const PriorK &k,
                                 std::uint64_t seed) {
  Rng rng(seed);
  return forward_sample(e0, t, sched, k, rng);
}

// p(e_{t-1} | e_t) = sum_{e0} p_hat(e0) q(e_{t-1} | e_t, e0), with
// q(e_{t-1} = c | e_t = a, e0) = Q_t[c, a] Qbar_{t-1}[e0, c] / Qbar_t[e0, a].
// Terms whose normalizer vanishes (e_t unreachable from e0) are dropped.
template <typename Probs>
void posterior_step_into(std::size_t e_t, const Probs &p_hat, int t,
                         const NoiseSchedule &sched, const PriorK &k,
                         std::span<double> out) {
  if (t < 1 || t > sched.t_max)
    throw InvariantViolation("posterior step needs 1 <= t <= t_max");
  const std::size_t K = k.classes();
  if (out.size() < K) throw ShapeMismatch("posterior output too small");
  const double keep_t = 1.0 - sched.beta[t];
  const double abar_prev = sched.alpha_bar[t - 1];
  const double abar_t = sched.alpha_bar[t];
  // likelihood of observing e_t from each c: Q_t[c, e_t]
  double like[kMaxBondClasses];
  for (std::size_t c = 0; c < K; ++c) {
    like[c] = (1.0 - keep_t) * k[e_t] + (c == e_t ? keep_t : 0.0);
    out[c] = 0.0;
  }
  for (std::size_t e0 = 0; e0 < K; ++e0) {
    const double w = static_cast<double>(p_hat[e0]);
    if (w <= 0.0) continue;
    const double norm = (1.0 - abar_t) * k[e_t] + (e0 == e_t ? abar_t : 0.0);
    if (norm < kProbabilityFloor) continue;
    const double scale = w / norm;
    for (std::size_t c = 0; c < K; ++c) {
      const double prior_c =
          (1.0 - abar_prev) * k[c] + (c == e0 ? abar_prev : 0.0);
      out[c] += scale * like[c] * prior_c;
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < K; ++c) total += out[c];
  if (!(total >= 1e-300))
    throw DegenerateNormalizer("posterior mass vanished at t=" +
                               std::to_string(t));
  for (std::size_t c = 0; c < K; ++c) out[c] /= total;
}

template <typename Probs>
std::vector<double> posterior_step_distribution(std::size_t e_t,
                                                const Probs &p_hat, int t,
                                                const NoiseSchedule &sched,
                                                const PriorK &k) {
  std::vector<double> out(k.classes(), 0.0);
  posterior_step_into(e_t, p_hat, t, sched, k, out);
  return out;
}

}  // namespace dise

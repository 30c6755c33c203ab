//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dise/denoiser.hpp"
#include "dise/diffusion.hpp"
#include "dise/molgraph.hpp"
#include "dise/spectra.hpp"

namespace dise {

// ---------------------------------------------------------------------------
// Edge predictors

// Anything that maps a batch of noisy states of one input to per-pair class
// probabilities. Output layout: ((b * n + i) * n + j) * K + c.
class EdgePredictor {
 public:
  virtual ~EdgePredictor() = default;
  virtual int classes() const = 0;
  virtual void predict(const ModelInput &input,
                       std::span<const EdgeTensor> states, int t,
                       const NoiseSchedule &sched,
                       std::vector<double> &probs) = 0;
};

// Trained denoiser evaluated in precision S.
template <typename S>
class DenoiserPredictor final : public EdgePredictor {
 public:
  explicit DenoiserPredictor(const Denoiser &model) : cfg_(model.config()) {
    params_.reserve(model.params().size());
    for (const auto &p : model.params()) params_.push_back(p.template cast<S>());
  }

  int classes() const override { return cfg_.k_classes; }

  void predict(const ModelInput &input, std::span<const EdgeTensor> states,
               int t, const NoiseSchedule &sched,
               std::vector<double> &probs) override {
    if (input.alphabet != cfg_.alphabet)
      throw ShapeMismatch("input alphabet does not match the model");
    const int n = static_cast<int>(input.size());
    const int B = static_cast<int>(states.size());
    const int K = cfg_.k_classes;
    fb_.resize(cfg_, B, n);
    const auto kinds = input.kinds();
    for (int b = 0; b < B; ++b)
      fill_features(fb_, cfg_, b, input, kinds, states[b], sched.t_norm(t));
    tape_.reset(false);
    const auto out = forward_batch<S>(tape_, cfg_, params_, fb_);
    const auto &logits = tape_.value(out);
    probs.resize(static_cast<std::size_t>(logits.rows()) * K);
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const S mx = logits.row(r).maxCoeff();
      double z = 0.0;
      for (int c = 0; c < K; ++c) {
        const double e = std::exp(static_cast<double>(logits(r, c) - mx));
        probs[r * K + c] = e;
        z += e;
      }
      for (int c = 0; c < K; ++c) probs[r * K + c] /= z;
    }
  }

 private:
  ModelConfig cfg_;
  std::vector<Mat<S>> params_;
  ad::Tape<S> tape_{false};
  FeatureBatch<S> fb_;
};

// Emits logits `margin` above zero on the true class of every pair,
// regardless of the noisy state.
class OraclePredictor final : public EdgePredictor {
 public:
  OraclePredictor(EdgeTensor truth, int k_classes, double margin = 50.0)
      : truth_(std::move(truth)), k_(k_classes), margin_(margin) {}

  int classes() const override { return k_; }

  void predict(const ModelInput &input, std::span<const EdgeTensor> states,
               int, const NoiseSchedule &, std::vector<double> &probs) override {
    const std::size_t n = input.size();
    if (truth_.size() != n) throw ShapeMismatch("oracle truth size mismatch");
    probs.assign(states.size() * n * n * k_, 0.0);
    const double hit = 1.0 / (1.0 + (k_ - 1) * std::exp(-margin_));
    const double miss = std::exp(-margin_) * hit;
    for (std::size_t b = 0; b < states.size(); ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t r = (b * n + i) * n + j;
          for (int c = 0; c < k_; ++c)
            probs[r * k_ + c] = c == truth_(i, j) ? hit : miss;
        }
  }

 private:
  EdgeTensor truth_;
  int k_;
  double margin_;
};

// ---------------------------------------------------------------------------
// Configuration and results

enum class SamplerMode : std::uint8_t { Posterior, PaperLiteral };

inline SamplerMode parse_sampler_mode(std::string_view s) {
  if (s == "posterior") return SamplerMode::Posterior;
  if (s == "paper-literal") return SamplerMode::PaperLiteral;
  throw InvariantViolation("unknown sampler mode '" + std::string(s) + "'");
}

inline std::string_view sampler_mode_name(SamplerMode m) {
  return m == SamplerMode::Posterior ? "posterior" : "paper-literal";
}

struct SamplerConfig {
  int n_runs = 100;
  SamplerMode mode = SamplerMode::Posterior;
  bool keep_invalid = false;
  std::uint64_t master_seed = 0;
  int trajectory_stride = 0;
  // paper-literal mode: take argmax of p_hat instead of sampling it
  bool argmax_x0 = false;
  // chains evaluated per forward call
  int chunk = 25;

  void validate() const {
    if (n_runs < 1) throw InvariantViolation("n_runs must be >= 1");
    if (trajectory_stride < 0)
      throw InvariantViolation("trajectory_stride must be >= 0");
    if (chunk < 1) throw InvariantViolation("chunk must be >= 1");
  }
};

struct Trajectory {
  std::size_t n = 0;
  std::size_t k = 0;
  int t_max = 0;
  std::vector<std::pair<int, EdgeTensor>> snapshots;  // t strictly decreasing
};

struct ChainResult {
  EdgeTensor final;
  std::optional<Trajectory> trajectory;
};

// Per-pair independent draw from k, mirrored; NoBond diagonal.
inline EdgeTensor init_noise(std::size_t n, const PriorK &k, Rng &rng) {
  if (n < 1) throw InvariantViolation("init_noise needs n >= 1");
  EdgeTensor e(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      e.set(i, j, static_cast<std::uint8_t>(rng.categorical(k.probs())));
  return e;
}

inline EdgeTensor init_noise(std::size_t n, const PriorK &k, std::uint64_t seed) {
  Rng rng(seed);
  return init_noise(n, k, rng);
}

namespace detail {

inline bool capture_at(int t, int t_max, int stride) {
  return stride > 0 && (t == 0 || (t_max - t) % stride == 0);
}

}  // namespace detail

// Runs the reverse chains with the given seeds, evaluating up to cfg.chunk
// chains per predictor call. Chain b draws only from Rng(seeds[b]) so its
// result does not depend on which other chains share its batch.
inline std::vector<ChainResult> denoise_chains(EdgePredictor &model,
                                               const ModelInput &input,
                                               const NoiseSchedule &sched,
                                               const PriorK &k,
                                               const SamplerConfig &cfg,
                                               std::span<const std::uint64_t> seeds) {
  cfg.validate();
  const std::size_t n = input.size();
  const std::size_t K = k.classes();
  if (n < 1) throw InvariantViolation("empty input");
  if (model.classes() != static_cast<int>(K))
    throw ShapeMismatch("model and prior disagree on the number of classes");
  std::vector<ChainResult> out(seeds.size());
  const int T = sched.t_max;

  std::vector<double> probs;
  std::vector<double> dist(K);
  std::vector<std::vector<double>> qbar_rows;
  for (std::size_t lo = 0; lo < seeds.size(); lo += cfg.chunk) {
    const std::size_t hi = std::min(seeds.size(), lo + cfg.chunk);
    const std::size_t B = hi - lo;
    std::vector<Rng> rngs;
    std::vector<EdgeTensor> states;
    for (std::size_t b = 0; b < B; ++b) {
      rngs.emplace_back(seeds[lo + b]);
      states.push_back(init_noise(n, k, rngs.back()));
      if (cfg.trajectory_stride > 0) {
        Trajectory tr{n, K, T, {}};
        tr.snapshots.emplace_back(T, states.back());
        out[lo + b].trajectory = std::move(tr);
      }
    }
    // A lone atom has no pairs; nothing to denoise.
    if (n > 1) {
      for (int t = T; t >= 1; --t) {
        model.predict(input, states, t, sched, probs);
        if (cfg.mode == SamplerMode::PaperLiteral && t > 1) {
          const auto qbar = cumulative_matrix(t - 1, sched, k);
          qbar_rows.assign(K, std::vector<double>(K));
          for (std::size_t r = 0; r < K; ++r)
            for (std::size_t c = 0; c < K; ++c)
              qbar_rows[r][c] = qbar.q(static_cast<Eigen::Index>(r),
                                       static_cast<Eigen::Index>(c));
        }
        for (std::size_t b = 0; b < B; ++b) {
          auto &rng = rngs[b];
          EdgeTensor next(n);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
              const std::span<const double> p_hat(
                  probs.data() + ((b * n + i) * n + j) * K, K);
              std::size_t cls;
              if (cfg.mode == SamplerMode::Posterior) {
                posterior_step_into(states[b](i, j), p_hat, t, sched, k, dist);
                cls = rng.categorical(dist);
              } else {
                const std::size_t x0 =
                    cfg.argmax_x0
                        ? static_cast<std::size_t>(
                              std::max_element(p_hat.begin(), p_hat.end()) -
                              p_hat.begin())
                        : rng.categorical(p_hat);
                cls = t > 1 ? rng.categorical(qbar_rows[x0]) : x0;
              }
              next.set(i, j, static_cast<std::uint8_t>(cls));
            }
          states[b] = std::move(next);
          if (detail::capture_at(t - 1, T, cfg.trajectory_stride))
            out[lo + b].trajectory->snapshots.emplace_back(t - 1, states[b]);
        }
      }
    } else if (cfg.trajectory_stride > 0) {
      for (std::size_t b = 0; b < B; ++b)
        if (out[lo + b].trajectory->snapshots.back().first != 0)
          out[lo + b].trajectory->snapshots.emplace_back(0, states[b]);
    }
    for (std::size_t b = 0; b < B; ++b) out[lo + b].final = std::move(states[b]);
  }
  return out;
}

inline ChainResult denoise_chain(EdgePredictor &model, const ModelInput &input,
                                 const NoiseSchedule &sched, const PriorK &k,
                                 const SamplerConfig &cfg, std::uint64_t seed) {
  const std::uint64_t seeds[1] = {seed};
  return std::move(denoise_chains(model, input, sched, k, cfg, seeds).front());
}

// ---------------------------------------------------------------------------
// Candidates

struct Candidate {
  std::string key;
  MolGraph graph;
  std::size_t count = 0;
  bool valid = false;
};

struct CandidateSet {
  std::vector<Candidate> entries;  // sorted by (count desc, key asc)
  std::size_t total_runs = 0;      // sum of entry counts
  std::size_t invalid_runs = 0;    // chains whose result failed validation
  std::string node_multiset;

  // 1-based rank of `key`, or nullopt.
  std::optional<std::size_t> rank_of(const std::string &key) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].key == key) return i + 1;
    return std::nullopt;
  }
};

namespace detail {

inline void sort_candidates(std::vector<Candidate> &v) {
  std::sort(v.begin(), v.end(), [](const Candidate &a, const Candidate &b) {
    if (a.count != b.count) return a.count > b.count;
    return a.key < b.key;
  });
}

}  // namespace detail

// Turns a final edge tensor into a candidate graph. Unobserved hydrogen
// counts are filled in from open valences when the formula allows it.
inline Candidate make_candidate(const ModelInput &input, const EdgeTensor &e) {
  auto kinds = input.kinds();
  bool valid = true;
  const bool unresolved = std::any_of(kinds.begin(), kinds.end(), [](AtomKind a) {
    return !a.known_hydrogens();
  });
  if (unresolved) {
    auto resolved = resolve_implicit_hydrogens(kinds, e, input.formula_hydrogens());
    if (resolved)
      kinds = std::move(*resolved);
    else
      valid = false;
  }
  std::vector<Node> nodes = input.nodes;
  for (std::size_t i = 0; i < nodes.size(); ++i) nodes[i].kind = kinds[i];
  MolGraph g(std::move(nodes), e, CosyMask(e.size()));
  if (valid) valid = is_valid_molecule(g).valid;
  Candidate c{canonical_key(g), std::move(g), 1, valid};
  return c;
}

inline CandidateSet collect_candidates(const ModelInput &input,
                                       std::span<const ChainResult> chains,
                                       bool keep_invalid) {
  CandidateSet set;
  set.node_multiset = node_multiset_key(input.kinds());
  std::map<std::string, std::size_t> index;
  for (const auto &chain : chains) {
    auto cand = make_candidate(input, chain.final);
    if (!cand.valid) {
      ++set.invalid_runs;
      if (!keep_invalid) continue;
    }
    auto it = index.find(cand.key);
    if (it == index.end()) {
      index.emplace(cand.key, set.entries.size());
      set.entries.push_back(std::move(cand));
    } else {
      ++set.entries[it->second].count;
    }
    ++set.total_runs;
  }
  detail::sort_candidates(set.entries);
  return set;
}

// Seeds of run r: stream_seed(master_seed, r).
inline std::vector<std::uint64_t> run_seeds(const SamplerConfig &cfg) {
  std::vector<std::uint64_t> seeds(cfg.n_runs);
  for (int r = 0; r < cfg.n_runs; ++r)
    seeds[r] = stream_seed(cfg.master_seed, static_cast<std::uint64_t>(r));
  return seeds;
}

inline CandidateSet aggregate_runs(EdgePredictor &model, const ModelInput &input,
                                   const NoiseSchedule &sched, const PriorK &k,
                                   const SamplerConfig &cfg) {
  const auto seeds = run_seeds(cfg);
  const auto chains = denoise_chains(model, input, sched, k, cfg, seeds);
  return collect_candidates(input, chains, cfg.keep_invalid);
}

// Sums counts per key over sets describing the same target.
inline CandidateSet ensemble(std::span<const CandidateSet> sets) {
  if (sets.empty()) throw InvariantViolation("ensemble of no candidate sets");
  CandidateSet out;
  out.node_multiset = sets.front().node_multiset;
  std::map<std::string, std::size_t> index;
  for (const auto &s : sets) {
    if (s.node_multiset != out.node_multiset)
      throw MixedTarget("candidate sets describe different node multisets");
    out.total_runs += s.total_runs;
    out.invalid_runs += s.invalid_runs;
    for (const auto &c : s.entries) {
      auto it = index.find(c.key);
      if (it == index.end()) {
        index.emplace(c.key, out.entries.size());
        out.entries.push_back(c);
      } else {
        out.entries[it->second].count += c.count;
      }
    }
  }
  detail::sort_candidates(out.entries);
  return out;
}

// "rank count valid|invalid key" per entry.
inline void write_candidate_report(std::ostream &os, const CandidateSet &set) {
  os << "# total_runs " << set.total_runs << " invalid_runs " << set.invalid_runs
     << '\n';
  for (std::size_t i = 0; i < set.entries.size(); ++i) {
    const auto &c = set.entries[i];
    os << (i + 1) << ' ' << c.count << ' ' << (c.valid ? "valid" : "invalid")
       << ' ' << c.key << '\n';
  }
}

// ---------------------------------------------------------------------------
// Trajectory files: "n K t_max" header, then "t c_01 c_02 ..." per snapshot
// with the upper triangle in row-major order.

inline void write_trajectory(std::ostream &os, const Trajectory &tr) {
  os << tr.n << ' ' << tr.k << ' ' << tr.t_max << '\n';
  for (const auto &[t, e] : tr.snapshots) {
    os << t;
    for (auto c : e.upper_triangle()) os << ' ' << static_cast<int>(c);
    os << '\n';
  }
}

inline Trajectory read_trajectory(std::istream &is) {
  Trajectory tr;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string &why) {
    throw ParseError(lineno, 1, why);
  };
  if (!std::getline(is, line)) fail("missing trajectory header");
  ++lineno;
  {
    std::istringstream h(line);
    if (!(h >> tr.n >> tr.k >> tr.t_max)) fail("bad trajectory header");
  }
  const std::size_t pairs = tr.n * (tr.n - (tr.n > 0 ? 1 : 0)) / 2;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream in(line);
    int t = 0;
    if (!(in >> t)) fail("bad timestep");
    std::vector<std::uint8_t> upper;
    int c = 0;
    while (in >> c) {
      if (c < 0 || c >= static_cast<int>(tr.k)) fail("class out of range");
      upper.push_back(static_cast<std::uint8_t>(c));
    }
    if (!in.eof()) fail("bad class entry");
    if (upper.size() != pairs) fail("wrong number of pair entries");
    if (!tr.snapshots.empty() && t >= tr.snapshots.back().first)
      fail("timesteps must strictly decrease");
    tr.snapshots.emplace_back(t, EdgeTensor::from_upper_triangle(tr.n, upper));
  }
  return tr;
}

inline void dump_trajectory(const Trajectory &tr, const std::string &path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  write_trajectory(os, tr);
}

inline Trajectory load_trajectory(const std::string &path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path);
  return read_trajectory(is);
}

}  // namespace dise

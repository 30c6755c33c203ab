//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <numbers>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dise/dataset.hpp"
#include "dise/denoiser.hpp"
#include "dise/diffusion.hpp"
#include "dise/sampler.hpp"
#include "dise/spectra.hpp"

namespace dise {

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  int steps = 1000;
  int batch_size = 32;
  std::uint64_t seed = 0;
  int t_max = 500;
  double s = 0.008;
  int eval_every = 250;       // validation cadence; 0 = only at the end
  int val_draws = 2;          // noise draws per validation molecule
  AdamWConfig optimizer{.clip_norm = 1.0};
  double lr_floor = 0.05;     // cosine decay to lr * lr_floor at the last step; 1 = constant
  std::function<void(std::int64_t step, double loss)> on_step;
  std::function<void(std::int64_t step, double val_loss)> on_eval;
};

struct TrainResult {
  TrainState best;  // lowest validation loss seen
  TrainState last;
};

// Molecules with at least one atom pair, prepared for `modality`.
inline std::vector<PreparedMolecule> prepare_all(
    const std::vector<DatasetRecord> &records, const ModalityConfig &modality) {
  std::vector<PreparedMolecule> out;
  for (const auto &r : records) {
    if (r.graph.size() < 2) continue;
    out.push_back(prepare_molecule(r.graph, r.spectra, modality));
  }
  return out;
}

// Fixed-seed examples grouped by node count, for deterministic loss
// estimates.
class FixedLossSet {
 public:
  FixedLossSet(const std::vector<PreparedMolecule> &mols, const NoiseSchedule &sched,
               const PriorK &k, int draws, std::uint64_t seed) {
    Rng rng(seed);
    for (int d = 0; d < draws; ++d)
      for (const auto &m : mols)
        groups_[m.input.size()].push_back(sample_training_example(m, sched, k, rng));
  }

  double mean_loss(const Denoiser &model, const NoiseSchedule &sched,
                   LossEvaluator &eval, std::size_t chunk = 64) const {
    double weighted = 0.0, pairs = 0.0;
    for (const auto &[n, exs] : groups_) {
      const double per = static_cast<double>(n * (n - 1) / 2);
      for (std::size_t lo = 0; lo < exs.size(); lo += chunk) {
        const std::size_t hi = std::min(exs.size(), lo + chunk);
        const std::span<const TrainingExample> part(exs.data() + lo, hi - lo);
        weighted += eval.loss(model, part, sched) * per * (hi - lo);
        pairs += per * (hi - lo);
      }
    }
    return pairs > 0 ? weighted / pairs : 0.0;
  }

  bool empty() const { return groups_.empty(); }

 private:
  std::map<std::size_t, std::vector<TrainingExample>> groups_;
};

// Trains `config` on `train`. Each step draws a node count with probability
// proportional to its share of molecules, then a batch of that size.
inline TrainResult train_model(const std::vector<DatasetRecord> &train,
                               const std::vector<DatasetRecord> &val,
                               const ModalityConfig &modality, const ModelConfig &config,
                               const PriorK &prior, const TrainOptions &opt) {
  if (static_cast<int>(prior.classes()) != config.k_classes)
    throw ShapeMismatch("prior and model disagree on the number of classes");
  if (config.alphabet != modality.alphabet())
    throw ShapeMismatch("model alphabet does not match the modality");
  const auto sched = build_schedule(opt.t_max, opt.s);
  const auto mols = prepare_all(train, modality);
  if (mols.empty()) throw DataError("no trainable molecules (need >= 2 atoms)");
  const auto val_mols = prepare_all(val, modality);

  std::map<std::size_t, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < mols.size(); ++i) buckets[mols[i].input.size()].push_back(i);
  std::vector<std::size_t> sizes;
  std::vector<double> weights;
  for (const auto &[n, idx] : buckets) {
    sizes.push_back(n);
    weights.push_back(static_cast<double>(idx.size()));
  }

  TrainState state(Denoiser(config, stream_seed(opt.seed, 0)), opt.seed);
  state.t_max = opt.t_max;
  state.s = opt.s;
  state.prior = prior;
  state.modality = modality_name(modality);
  state.optimizer = opt.optimizer;

  LossEvaluator eval;
  const FixedLossSet val_set(val_mols, sched, prior, opt.val_draws, stream_seed(opt.seed, 2));
  TrainResult result;
  bool have_best = false;
  auto validate = [&] {
    if (val_set.empty()) return;
    state.val_loss = val_set.mean_loss(state.model, sched, eval);
    if (opt.on_eval) opt.on_eval(state.step, state.val_loss);
    if (!have_best || state.val_loss < result.best.val_loss) {
      result.best = state;
      have_best = true;
    }
  };

  Rng rng(stream_seed(opt.seed, 1));
  std::vector<TrainingExample> batch;
  for (int step = 0; step < opt.steps; ++step) {
    const auto &bucket = buckets[sizes[rng.categorical(weights)]];
    batch.clear();
    for (int b = 0; b < opt.batch_size; ++b) {
      const auto idx = bucket[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(bucket.size()) - 1))];
      batch.push_back(sample_training_example(mols[idx], sched, prior, rng));
    }
    if (opt.lr_floor < 1.0) {
      const double frac = static_cast<double>(step) / static_cast<double>(opt.steps);
      state.optimizer.lr = opt.optimizer.lr *
                           (opt.lr_floor + (1.0 - opt.lr_floor) * 0.5 *
                                               (1.0 + std::cos(std::numbers::pi * frac)));
    }
    const double loss = train_step(state, eval, batch, sched);
    if (opt.on_step) opt.on_step(state.step, loss);
    if (opt.eval_every > 0 && state.step % opt.eval_every == 0) validate();
  }
  if (opt.eval_every <= 0 || state.step % opt.eval_every != 0) validate();
  if (!have_best) result.best = state;
  result.last = std::move(state);
  return result;
}

// ---------------------------------------------------------------------------
// Metrics

using Rank = std::optional<std::size_t>;  // nullopt = Fail

inline Rank rank_of_truth(const CandidateSet &cands, const MolGraph &truth) {
  return cands.rank_of(canonical_key(truth));
}

// k = nullopt means All.
inline double topk_accuracy(std::span<const Rank> ranks, std::optional<std::size_t> k) {
  if (ranks.empty()) throw InvariantViolation("no ranks to score");
  std::size_t hit = 0;
  for (const auto &r : ranks)
    if (r && (!k || *r <= *k)) ++hit;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(ranks.size());
}

inline constexpr std::array<std::optional<std::size_t>, 5> kTopK{
    std::optional<std::size_t>{1}, std::optional<std::size_t>{3},
    std::optional<std::size_t>{5}, std::optional<std::size_t>{10}, std::nullopt};

// Keeps (key, kinds) entries whose heavy atoms plus hydrogens equal `formula`.
struct KeyedCandidate {
  std::string key;
  std::vector<AtomKind> kinds;
};

inline std::vector<KeyedCandidate> filter_by_formula(
    const std::vector<KeyedCandidate> &cands, const Formula &formula) {
  auto strip = [](Formula f) {
    for (auto it = f.begin(); it != f.end();)
      it = it->second == 0 ? f.erase(it) : std::next(it);
    return f;
  };
  const auto want = strip(formula);
  std::vector<KeyedCandidate> out;
  for (const auto &c : cands)
    if (strip(formula_of(c.kinds)) == want) out.push_back(c);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct TargetAudit {
  std::string id;
  std::size_t n_atoms = 0;
  Rank rank;
  std::uint64_t sampler_seed = 0;
  std::uint64_t perturbation_seed = 0;
  double max_c_delta = 0.0;  // largest applied 13C displacement
  double max_h_delta = 0.0;
  std::size_t candidates = 0;
  std::size_t total_runs = 0;
  std::size_t invalid_runs = 0;
  std::size_t ambiguous_cosy = 0;
  std::size_t unmatched_cosy = 0;
  std::string top1_key;
  std::string truth_key;
};

struct EvalReport {
  std::string modality;
  std::string perturbation = "None";
  std::string mode = "posterior";
  int n_runs = 0;
  int t_max = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> models;
  std::vector<TargetAudit> targets;
  std::array<double, 5> topk{};  // K = 1, 3, 5, 10, All

  double top1() const { return topk[0]; }
  double top_all() const { return topk[4]; }
};

enum class Precision : std::uint8_t { F32, F64 };

inline std::unique_ptr<EdgePredictor> make_predictor(const Denoiser &model,
                                                     Precision p) {
  if (p == Precision::F32) return std::make_unique<DenoiserPredictor<float>>(model);
  return std::make_unique<DenoiserPredictor<double>>(model);
}

struct EvalOptions {
  SamplerConfig sampler;  // master_seed is replaced per target
  PerturbationLevel perturbation = kNoPerturbation;
  std::uint64_t seed = 0;
  Precision precision = Precision::F64;
  std::function<void(std::size_t done, std::size_t total)> on_target;
};

// Elucidates every target with each model and ranks the truth in the summed
// candidate set. Target i uses sampler seed stream_seed(seed, i) (shifted
// per model) and perturbation seed stream_seed(seed ^ 0x5045525455524221, i).
inline EvalReport evaluate(std::span<const TrainState *const> models,
                           const std::vector<DatasetRecord> &targets,
                           const ModalityConfig &modality, const EvalOptions &opt) {
  if (models.empty()) throw MissingModel("no model to evaluate");
  const auto &first = *models.front();
  for (const auto *m : models) {
    if (m->t_max != first.t_max || m->s != first.s ||
        m->prior.probs() != first.prior.probs())
      throw ModelError("ensembled models disagree on schedule or prior");
    if (m->model.config().alphabet != modality.alphabet())
      throw ShapeMismatch("model alphabet does not match the modality");
  }
  const auto sched = build_schedule(first.t_max, first.s);
  std::vector<std::unique_ptr<EdgePredictor>> predictors;
  for (const auto *m : models) predictors.push_back(make_predictor(m->model, opt.precision));

  EvalReport rep;
  rep.modality = modality_name(modality);
  rep.perturbation = std::string(opt.perturbation.name);
  rep.mode = std::string(sampler_mode_name(opt.sampler.mode));
  rep.n_runs = opt.sampler.n_runs;
  rep.t_max = first.t_max;
  rep.seed = opt.seed;
  for (const auto *m : models)
    rep.models.push_back(m->model.config().preset + "/" + m->modality + "/seed=" +
                         std::to_string(m->seed) + "/step=" + std::to_string(m->step));

  std::vector<Rank> ranks;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto &rec = targets[i];
    TargetAudit audit;
    audit.id = rec.id;
    audit.n_atoms = rec.graph.size();
    audit.sampler_seed = stream_seed(opt.seed, i);
    audit.perturbation_seed = stream_seed(opt.seed ^ 0x5045525455524221ULL, i);
    SpectralRecord spectra = rec.spectra;
    if (opt.perturbation.delta_c > 0 || opt.perturbation.delta_h > 0) {
      spectra = perturb(rec.spectra, opt.perturbation, audit.perturbation_seed);
      for (std::size_t c = 0; c < spectra.carbons.size(); ++c)
        audit.max_c_delta = std::max(
            audit.max_c_delta, std::abs(spectra.carbons[c].ppm - rec.spectra.carbons[c].ppm));
      for (std::size_t h = 0; h < spectra.protons.size(); ++h)
        audit.max_h_delta = std::max(
            audit.max_h_delta, std::abs(spectra.protons[h].ppm - rec.spectra.protons[h].ppm));
    }
    const auto input = build_model_input(spectra, modality);
    audit.ambiguous_cosy = input.ambiguous_cosy_peaks;
    audit.unmatched_cosy = input.unmatched_cosy_peaks;
    std::vector<CandidateSet> sets;
    for (std::size_t m = 0; m < predictors.size(); ++m) {
      SamplerConfig sc = opt.sampler;
      sc.master_seed = m == 0 ? audit.sampler_seed : stream_seed(audit.sampler_seed, m);
      sets.push_back(aggregate_runs(*predictors[m], input, sched, models[m]->prior, sc));
    }
    const auto cands = sets.size() == 1 ? std::move(sets.front()) : ensemble(sets);
    audit.truth_key = canonical_key(rec.graph);
    audit.rank = cands.rank_of(audit.truth_key);
    audit.candidates = cands.entries.size();
    audit.total_runs = cands.total_runs;
    audit.invalid_runs = cands.invalid_runs;
    if (!cands.entries.empty()) audit.top1_key = cands.entries.front().key;
    ranks.push_back(audit.rank);
    rep.targets.push_back(std::move(audit));
    if (opt.on_target) opt.on_target(i + 1, targets.size());
  }
  if (!ranks.empty())
    for (std::size_t k = 0; k < kTopK.size(); ++k) rep.topk[k] = topk_accuracy(ranks, kTopK[k]);
  return rep;
}

inline EvalReport evaluate(const TrainState &model, const std::vector<DatasetRecord> &targets,
                           const ModalityConfig &modality, const EvalOptions &opt) {
  const TrainState *const ms[1] = {&model};
  return evaluate(std::span<const TrainState *const>(ms), targets, modality, opt);
}

// Line-oriented report: header lines, one line per target, summary block.
inline void write_report(std::ostream &os, const EvalReport &r) {
  auto pct = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << v;
    return s.str();
  };
  os << "#dise-report v1\n";
  os << "modality " << r.modality << '\n';
  os << "perturbation " << r.perturbation << '\n';
  os << "mode " << r.mode << '\n';
  os << "n_runs " << r.n_runs << '\n';
  os << "t_max " << r.t_max << '\n';
  os << "seed " << r.seed << '\n';
  for (const auto &m : r.models) os << "model " << m << '\n';
  os << "# id n_atoms rank candidates total_runs invalid_runs sampler_seed "
        "perturbation_seed max_dc max_dh cosy_ambiguous cosy_unmatched top1_key truth_key\n";
  for (const auto &t : r.targets) {
    std::ostringstream dc, dh;
    dc << std::setprecision(6) << t.max_c_delta;
    dh << std::setprecision(6) << t.max_h_delta;
    os << "target " << t.id << ' ' << t.n_atoms << ' '
       << (t.rank ? std::to_string(*t.rank) : std::string("F")) << ' ' << t.candidates << ' '
       << t.total_runs << ' ' << t.invalid_runs << ' ' << t.sampler_seed << ' '
       << t.perturbation_seed << ' ' << dc.str() << ' ' << dh.str() << ' ' << t.ambiguous_cosy
       << ' ' << t.unmatched_cosy << ' ' << (t.top1_key.empty() ? "-" : t.top1_key) << ' '
       << t.truth_key << '\n';
  }
  os << "summary targets=" << r.targets.size() << " top1=" << pct(r.topk[0])
     << " top3=" << pct(r.topk[1]) << " top5=" << pct(r.topk[2]) << " top10=" << pct(r.topk[3])
     << " topall=" << pct(r.topk[4]) << '\n';
  // accuracy by heavy-atom count
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> by_size;
  for (const auto &t : r.targets) {
    auto &[hits, total] = by_size[t.n_atoms];
    ++total;
    if (t.rank && *t.rank == 1) ++hits;
  }
  for (const auto &[n, ht] : by_size)
    os << "by_atoms n=" << n << " targets=" << ht.second << " top1="
       << pct(100.0 * ht.first / ht.second) << '\n';
}

inline std::string report_string(const EvalReport &r) {
  std::ostringstream os;
  write_report(os, r);
  return os.str();
}

// ---------------------------------------------------------------------------
// Campaigns

struct AblationPlan {
  std::vector<std::string> modalities;
};

// The six input combinations in increasing order of information.
inline AblationPlan table_s4_plan() {
  AblationPlan plan;
  for (const auto &m : modality_table()) plan.modalities.emplace_back(m.name);
  return plan;
}

inline std::vector<EvalReport> run_ablation(
    const AblationPlan &plan, const std::map<std::string, const TrainState *> &registry,
    const std::vector<DatasetRecord> &targets, const EvalOptions &opt) {
  std::vector<EvalReport> out;
  for (const auto &name : plan.modalities) {
    auto it = registry.find(name);
    if (it == registry.end() || it->second == nullptr)
      throw MissingModel("no model trained for modality " + name);
    out.push_back(evaluate(*it->second, targets, modality_by_name(name), opt));
  }
  return out;
}

inline std::vector<EvalReport> run_perturbation_sweep(
    const TrainState &model, const std::vector<DatasetRecord> &targets,
    const ModalityConfig &modality, std::span<const PerturbationLevel> levels,
    EvalOptions opt) {
  std::vector<EvalReport> out;
  for (const auto &level : levels) {
    opt.perturbation = level;
    out.push_back(evaluate(model, targets, modality, opt));
  }
  return out;
}

}  // namespace dise

//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dise/autodiff.hpp"
#include "dise/chem.hpp"
#include "dise/common.hpp"
#include "dise/diffusion.hpp"
#include "dise/molgraph.hpp"
#include "dise/spectra.hpp"

namespace dise {

using ad::Mat;

// ---------------------------------------------------------------------------
// Configuration

struct ModelConfig {
  std::string preset = "desk";
  int n_layers = 4;
  int n_heads = 4;
  int dx = 64;
  int de = 32;
  int dy = 32;
  int ffx = 64;
  int ffe = 64;
  int ffy = 64;
  int k_classes = 5;
  AtomAlphabet alphabet = AtomAlphabet::SuperAtom;

  static constexpr int kGlobalIn = 11;

  // type one-hot, 2 shifts, 3 ring counts, largest-component flag,
  // 2 spectral weights, valence, charge
  int node_in() const noexcept { return alphabet_size(alphabet) + 10; }
  // bond one-hot + COSY flag + Fiedler projector entry
  int edge_in() const noexcept { return k_classes + 2; }

  void validate() const {
    if (n_layers < 0 || n_heads < 1 || dx < 1 || de < 1 || dy < 1 ||
        ffx < 1 || ffe < 1 || ffy < 1)
      throw ShapeMismatch("model dimensions must be positive");
    if (dx % n_heads != 0)
      throw ShapeMismatch("dx must be divisible by n_heads");
    if (k_classes < 2 || k_classes > kMaxBondClasses)
      throw ShapeMismatch("unsupported number of bond classes");
  }

  // Presets: "paper-qm9", "paper-pcqm", "desk".
  static ModelConfig named(std::string_view name, int k_classes,
                           AtomAlphabet alphabet) {
    ModelConfig c;
    if (name == "paper-qm9") {
      c = {std::string(name), 24, 8, 256, 64, 64, 256, 128, 128};
    } else if (name == "paper-pcqm") {
      c = {std::string(name), 20, 32, 1024, 256, 256, 1024, 512, 512};
    } else if (name == "desk") {
      c = {std::string(name), 4, 4, 64, 32, 32, 64, 64, 64};
    } else {
      throw ModelError("unknown model preset '" + std::string(name) + "'");
    }
    c.k_classes = k_classes;
    c.alphabet = alphabet;
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

// ---------------------------------------------------------------------------
// Parameters

enum class ParamRole : std::uint8_t { Weight, Bias, Gain };

struct ParamSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  ParamRole role = ParamRole::Weight;
};

// Parameter order is the order in which forward() consumes them.
inline std::vector<ParamSpec> param_layout(const ModelConfig &cfg) {
  std::vector<ParamSpec> out;
  auto lin = [&](const std::string &name, int in, int o) {
    out.push_back({name + ".w", in, o, ParamRole::Weight});
    out.push_back({name + ".b", 1, o, ParamRole::Bias});
  };
  auto mlp = [&](const std::string &name, int in, int hidden, int o) {
    lin(name + ".0", in, hidden);
    lin(name + ".1", hidden, o);
  };
  auto ln = [&](const std::string &name, int d) {
    out.push_back({name + ".g", 1, d, ParamRole::Gain});
    out.push_back({name + ".b", 1, d, ParamRole::Bias});
  };
  mlp("in_x", cfg.node_in(), cfg.ffx, cfg.dx);
  mlp("in_e", cfg.edge_in(), cfg.ffe, cfg.de);
  mlp("in_y", ModelConfig::kGlobalIn, cfg.ffy, cfg.dy);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    lin(p + "q", cfg.dx, cfg.dx);
    lin(p + "k", cfg.dx, cfg.dx);
    lin(p + "v", cfg.dx, cfg.dx);
    lin(p + "e_mul", cfg.de, cfg.dx);
    lin(p + "e_add", cfg.de, cfg.dx);
    lin(p + "y_mul", cfg.dy, cfg.dx);
    lin(p + "x_out", cfg.dx, cfg.dx);
    ln(p + "ln_x1", cfg.dx);
    mlp(p + "ff_x", cfg.dx, cfg.ffx, cfg.dx);
    ln(p + "ln_x2", cfg.dx);
    lin(p + "e_out", cfg.dx, cfg.de);
    ln(p + "ln_e1", cfg.de);
    mlp(p + "ff_e", cfg.de, cfg.ffe, cfg.de);
    ln(p + "ln_e2", cfg.de);
    lin(p + "y_self", cfg.dy, cfg.dy);
    lin(p + "y_x", cfg.dx, cfg.dy);
    lin(p + "y_e", cfg.de, cfg.dy);
    ln(p + "ln_y1", cfg.dy);
    mlp(p + "ff_y", cfg.dy, cfg.ffy, cfg.dy);
    ln(p + "ln_y2", cfg.dy);
  }
  mlp("out_e", cfg.de, cfg.ffe, cfg.k_classes);
  return out;
}

class Denoiser {
 public:
  Denoiser() = default;

  // Fan-in scaled uniform weights, zero biases, unit gains.
  Denoiser(ModelConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)), layout_(param_layout(cfg_)) {
    cfg_.validate();
    Rng rng(seed);
    params_.reserve(layout_.size());
    for (const auto &spec : layout_) {
      Mat<double> m(spec.rows, spec.cols);
      switch (spec.role) {
        case ParamRole::Weight: {
          const double a = 1.0 / std::sqrt(static_cast<double>(spec.rows));
          for (Eigen::Index i = 0; i < m.size(); ++i)
            m.data()[i] = rng.uniform(-a, a);
          break;
        }
        case ParamRole::Bias: m.setZero(); break;
        case ParamRole::Gain: m.setOnes(); break;
      }
      params_.push_back(std::move(m));
    }
  }

  Denoiser(ModelConfig cfg, std::vector<Mat<double>> params)
      : cfg_(std::move(cfg)), layout_(param_layout(cfg_)),
        params_(std::move(params)) {
    cfg_.validate();
    if (params_.size() != layout_.size())
      throw ShapeMismatch("parameter count does not match the layout");
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].rows() != layout_[i].rows ||
          params_[i].cols() != layout_[i].cols)
        throw ShapeMismatch("parameter " + layout_[i].name +
                            " has the wrong shape");
  }

  const ModelConfig &config() const noexcept { return cfg_; }
  const std::vector<ParamSpec> &layout() const noexcept { return layout_; }
  const std::vector<Mat<double>> &params() const noexcept { return params_; }
  std::vector<Mat<double>> &params() noexcept { return params_; }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto &p : params_) total += static_cast<std::size_t>(p.size());
    return total;
  }

 private:
  ModelConfig cfg_;
  std::vector<ParamSpec> layout_;
  std::vector<Mat<double>> params_;
};

// ---------------------------------------------------------------------------
// Features

// Dense inputs for `graphs` graphs of `n` nodes each.
template <typename S>
struct FeatureBatch {
  int graphs = 0;
  int n = 0;
  Mat<S> x;  // (graphs * n) x node_in
  Mat<S> e;  // (graphs * n * n) x edge_in
  Mat<S> y;  // graphs x kGlobalIn

  void resize(const ModelConfig &cfg, int g, int nodes) {
    graphs = g;
    n = nodes;
    x.setZero(g * nodes, cfg.node_in());
    e.setZero(g * nodes * nodes, cfg.edge_in());
    y.setZero(g, ModelConfig::kGlobalIn);
  }
};

// Fills graph slot `b` of `fb` from the fixed input and the current edges.
template <typename S>
void fill_features(FeatureBatch<S> &fb, const ModelConfig &cfg, int b,
                   const ModelInput &input, std::span<const AtomKind> kinds,
                   const EdgeTensor &e_t, double t_norm) {
  const int n = fb.n;
  if (static_cast<int>(input.size()) != n || static_cast<int>(e_t.size()) != n)
    throw ShapeMismatch("graph size does not match the feature batch");
  const auto sf = compute_structural_features(e_t, kinds);
  const int a = alphabet_size(cfg.alphabet);
  for (int i = 0; i < n; ++i) {
    auto row = fb.x.row(b * n + i);
    row.setZero();
    row(alphabet_index(cfg.alphabet, kinds[i])) = S(1);
    row(a + 0) = static_cast<S>(input.nodes[i].c_shift / 100.0);
    row(a + 1) = static_cast<S>(input.nodes[i].h_shift / 10.0);
    const auto &ns = sf.nodes[i];
    for (int r = 0; r < 3; ++r)
      row(a + 2 + r) = static_cast<S>(std::log1p(ns.ring_membership[r]));
    row(a + 5) = static_cast<S>(ns.in_largest_component);
    row(a + 6) = static_cast<S>(ns.spectral_weight[0]);
    row(a + 7) = static_cast<S>(ns.spectral_weight[1]);
    row(a + 8) = static_cast<S>(ns.valence / 4.0);
    row(a + 9) = static_cast<S>(ns.charge / 4.0);
  }
  const int K = cfg.k_classes;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      auto row = fb.e.row((b * n + i) * n + j);
      row.setZero();
      const auto cls = e_t(i, j);
      if (cls >= K) throw ShapeMismatch("edge class outside the model alphabet");
      if (i != j) row(cls) = S(1);
      row(K) = static_cast<S>(input.cosy(i, j));
      row(K + 1) = static_cast<S>(sf.fiedler_projector(i, j));
    }
  auto y = fb.y.row(b);
  const auto &g = sf.global;
  for (int c = 0; c < 4; ++c)
    y(c) = static_cast<S>(std::log1p(g.cycle_counts[c]));
  y(4) = static_cast<S>(std::log1p(g.n_components));
  for (int c = 0; c < 5; ++c) y(5 + c) = static_cast<S>(g.lap_eigvals[c]);
  y(10) = static_cast<S>(t_norm);
}

// ---------------------------------------------------------------------------
// Forward pass

// Returns symmetric edge logits, one row of K per ordered pair (b, i, j).
// Parameter leaves are appended to `param_vars` when given.
template <typename S>
ad::Var forward_batch(ad::Tape<S> &t, const ModelConfig &cfg,
                      std::span<const Mat<S>> params, const FeatureBatch<S> &fb,
                      std::vector<ad::Var> *param_vars = nullptr) {
  using ad::Var;
  if (fb.x.cols() != cfg.node_in() || fb.e.cols() != cfg.edge_in() ||
      fb.y.cols() != ModelConfig::kGlobalIn)
    throw ShapeMismatch("feature widths do not match the model config");
  const int n = fb.n;
  std::size_t cursor = 0;
  auto next = [&] {
    if (cursor >= params.size()) throw ShapeMismatch("too few parameters");
    Var v = t.parameter(params[cursor++]);
    if (param_vars) param_vars->push_back(v);
    return v;
  };
  auto lin = [&](Var a) {
    Var w = next();
    Var b = next();
    return ad::linear(t, a, w, b);
  };
  auto mlp = [&](Var a) { return lin(ad::silu(t, lin(a))); };
  auto ln = [&](Var a) {
    Var g = next();
    Var b = next();
    return ad::layer_norm(t, a, g, b);
  };

  const S scale = S(1) / std::sqrt(static_cast<S>(cfg.dx / cfg.n_heads));
  Var X = mlp(t.constant(fb.x));
  Var E = mlp(t.constant(fb.e));
  Var Y = mlp(t.constant(fb.y));
  for (int l = 0; l < cfg.n_layers; ++l) {
    Var q = lin(X);
    Var k = lin(X);
    Var v = lin(X);
    Var z = ad::pair_product(t, q, k, n, scale);
    Var e_mul = lin(E);
    Var e_add = lin(E);
    z = ad::add(t, ad::gate(t, z, e_mul), e_add);
    Var y_mul = lin(Y);
    z = ad::gate(t, z, ad::repeat_rows(t, y_mul, n * n));

    Var attn = ad::pair_softmax(t, ad::head_sum(t, z, cfg.n_heads), n);
    Var msg = ad::attend(t, attn, v, n);
    X = ln(ad::add(t, X, lin(msg)));
    X = ln(ad::add(t, X, mlp(X)));

    E = ln(ad::add(t, E, lin(z)));
    E = ln(ad::add(t, E, mlp(E)));

    Var y_self = lin(Y);
    Var y_x = lin(ad::group_mean(t, X, n));
    Var y_e = lin(ad::group_mean(t, E, n * n));
    Y = ln(ad::add(t, Y, ad::add(t, y_self, ad::add(t, y_x, y_e))));
    Y = ln(ad::add(t, Y, mlp(Y)));
  }
  Var logits = ad::symmetrize_pairs(t, mlp(E), n);
  if (cursor != params.size()) throw ShapeMismatch("unused parameters");
  return logits;
}

// n x n x K logits for a single graph.
struct EdgeLogits {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<double> values;  // (i * n + j) * k + c

  double operator()(std::size_t i, std::size_t j, std::size_t c) const {
    return values[(i * n + j) * k + c];
  }
};

// Single-graph forward in 64-bit.
inline EdgeLogits forward(const Denoiser &model, const ModelInput &input,
                          const EdgeTensor &e_t, double t_norm) {
  const auto &cfg = model.config();
  if (input.alphabet != cfg.alphabet)
    throw ShapeMismatch("input alphabet does not match the model");
  FeatureBatch<double> fb;
  const int n = static_cast<int>(input.size());
  fb.resize(cfg, 1, n);
  const auto kinds = input.kinds();
  fill_features(fb, cfg, 0, input, kinds, e_t, t_norm);
  ad::Tape<double> tape(false);
  const auto out = forward_batch<double>(tape, cfg, model.params(), fb);
  const auto &v = tape.value(out);
  EdgeLogits logits{static_cast<std::size_t>(n),
                    static_cast<std::size_t>(cfg.k_classes),
                    std::vector<double>(v.data(), v.data() + v.size())};
  return logits;
}

// ---------------------------------------------------------------------------
// Training examples

// A molecule as seen by the model: the fixed input derived from its spectra
// plus the clean edges expressed in the input's node order.
struct PreparedMolecule {
  ModelInput input;
  EdgeTensor target;
};

// Maps the truth graph onto the node order of `input`. Carbons are placed by
// record node id; heteroatoms are interchangeable given their features and
// are assigned in order among nodes of the matching kind.
inline EdgeTensor align_to_input(const MolGraph &truth, const ModelInput &input) {
  const std::size_t n = input.size();
  if (truth.size() != n) throw FormulaMismatch("input and truth differ in size");
  std::vector<std::size_t> map(n, ModelInput::kNoSource);
  std::vector<char> used(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = input.source[i];
    if (src == ModelInput::kNoSource) continue;
    if (src >= n || used[src]) throw FormulaMismatch("bad carbon source id");
    map[i] = src;
    used[src] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (map[i] != ModelInput::kNoSource) continue;
    const AtomKind want = input.nodes[i].kind;
    for (std::size_t g = 0; g < n; ++g) {
      if (used[g]) continue;
      const AtomKind have = truth.nodes()[g].kind;
      const bool match = want.known_hydrogens()
                             ? have == want
                             : have.element == want.element;
      if (!match) continue;
      map[i] = g;
      used[g] = 1;
      break;
    }
    if (map[i] == ModelInput::kNoSource)
      throw FormulaMismatch("no truth node for input node " + std::to_string(i));
  }
  EdgeTensor out(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      out.set(i, j, truth.edges()(map[i], map[j]));
  return out;
}

inline PreparedMolecule prepare_molecule(const MolGraph &truth,
                                         const SpectralRecord &rec,
                                         const ModalityConfig &modality) {
  PreparedMolecule out;
  out.input = build_model_input(rec, modality);
  out.target = align_to_input(truth, out.input);
  return out;
}

struct TrainingExample {
  const PreparedMolecule *molecule = nullptr;
  int t = 1;
  EdgeTensor noisy;
};

// t ~ U{1..t_max}, E_t ~ Qbar_t(E_0).
inline TrainingExample sample_training_example(const PreparedMolecule &mol,
                                               const NoiseSchedule &sched,
                                               const PriorK &k, Rng &rng) {
  TrainingExample ex;
  ex.molecule = &mol;
  ex.t = static_cast<int>(rng.uniform_int(1, sched.t_max));
  ex.noisy = forward_sample(mol.target, ex.t, sched, k, rng);
  return ex;
}

inline TrainingExample sample_training_example(const PreparedMolecule &mol,
                                               const NoiseSchedule &sched,
                                               const PriorK &k,
                                               std::uint64_t seed) {
  Rng rng(seed);
  return sample_training_example(mol, sched, k, rng);
}

// Features and per-pair targets for examples sharing one node count.
inline void build_training_batch(const ModelConfig &cfg,
                                 std::span<const TrainingExample> examples,
                                 const NoiseSchedule &sched,
                                 FeatureBatch<double> &fb,
                                 std::vector<std::uint8_t> &targets) {
  if (examples.empty()) throw ShapeMismatch("empty training batch");
  const int n = static_cast<int>(examples.front().molecule->input.size());
  fb.resize(cfg, static_cast<int>(examples.size()), n);
  targets.assign(examples.size() * n * n, 0);
  for (std::size_t b = 0; b < examples.size(); ++b) {
    const auto &ex = examples[b];
    const auto &in = ex.molecule->input;
    if (static_cast<int>(in.size()) != n)
      throw ShapeMismatch("training batch mixes graph sizes");
    if (in.alphabet != cfg.alphabet)
      throw ShapeMismatch("input alphabet does not match the model");
    const auto kinds = in.kinds();
    fill_features(fb, cfg, static_cast<int>(b), in, kinds, ex.noisy,
                  sched.t_norm(ex.t));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        targets[(b * n + i) * n + j] = ex.molecule->target(i, j);
  }
}

// Mean pair cross-entropy and its gradient with respect to every parameter.
struct LossGrad {
  double loss = 0.0;
  std::vector<Mat<double>> grads;
};

class LossEvaluator {
 public:
  double loss(const Denoiser &model, std::span<const TrainingExample> examples,
              const NoiseSchedule &sched) {
    build_training_batch(model.config(), examples, sched, fb_, targets_);
    tape_.reset(false);
    const auto logits =
        forward_batch<double>(tape_, model.config(), model.params(), fb_);
    const auto l = ad::pair_cross_entropy(tape_, logits, targets_, fb_.n);
    return tape_.value(l)(0, 0);
  }

  // Loss on explicit features/targets (used by gradient checks).
  double loss(const Denoiser &model, const FeatureBatch<double> &fb,
              std::span<const std::uint8_t> targets) {
    tape_.reset(false);
    const auto logits =
        forward_batch<double>(tape_, model.config(), model.params(), fb);
    const auto l = ad::pair_cross_entropy(tape_, logits, targets, fb.n);
    return tape_.value(l)(0, 0);
  }

  LossGrad gradients(const Denoiser &model,
                     std::span<const TrainingExample> examples,
                     const NoiseSchedule &sched) {
    build_training_batch(model.config(), examples, sched, fb_, targets_);
    return gradients(model, fb_, targets_);
  }

  LossGrad gradients(const Denoiser &model, const FeatureBatch<double> &fb,
                     std::span<const std::uint8_t> targets) {
    tape_.reset(true);
    vars_.clear();
    const auto logits =
        forward_batch<double>(tape_, model.config(), model.params(), fb, &vars_);
    const auto l = ad::pair_cross_entropy(tape_, logits, targets, fb.n);
    tape_.backward(l);
    LossGrad out;
    out.loss = tape_.value(l)(0, 0);
    out.grads.reserve(vars_.size());
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      if (tape_.has_grad(vars_[i]))
        out.grads.push_back(tape_.grad(vars_[i]));
      else
        out.grads.push_back(Mat<double>::Zero(model.params()[i].rows(),
                                              model.params()[i].cols()));
    }
    return out;
  }

 private:
  ad::Tape<double> tape_;
  FeatureBatch<double> fb_;
  std::vector<std::uint8_t> targets_;
  std::vector<ad::Var> vars_;
};

// ---------------------------------------------------------------------------
// Optimizer and training state

struct AdamWConfig {
  double lr = 2e-3;
  double weight_decay = 1e-12;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 = off
};

struct TrainState {
  Denoiser model;
  std::vector<Mat<double>> adam_m;
  std::vector<Mat<double>> adam_v;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  int t_max = 500;
  double s = 0.008;
  PriorK prior = PriorK::qm9();
  std::string modality = "full";
  double val_loss = std::numeric_limits<double>::infinity();
  AdamWConfig optimizer;

  TrainState() = default;
  TrainState(Denoiser m, std::uint64_t seed_)
      : model(std::move(m)), seed(seed_) {
    reset_moments();
  }

  void reset_moments() {
    adam_m.clear();
    adam_v.clear();
    for (const auto &p : model.params()) {
      adam_m.push_back(Mat<double>::Zero(p.rows(), p.cols()));
      adam_v.push_back(Mat<double>::Zero(p.rows(), p.cols()));
    }
  }
};

// Decoupled weight decay Adam update.
inline void adamw_update(TrainState &state, const std::vector<Mat<double>> &grads) {
  auto &params = state.model.params();
  if (grads.size() != params.size())
    throw ShapeMismatch("gradient count does not match parameters");
  for (const auto &g : grads)
    if (!g.allFinite()) throw NonFiniteGradient("non-finite gradient");
  const auto &o = state.optimizer;
  double scale = 1.0;
  if (o.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto &g : grads) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > o.clip_norm) scale = o.clip_norm / norm;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto &m = state.adam_m[i];
    auto &v = state.adam_v[i];
    m = o.beta1 * m + (1.0 - o.beta1) * scale * grads[i];
    v.array() = o.beta2 * v.array() + (1.0 - o.beta2) * (scale * grads[i].array()).square();
    params[i].array() -=
        o.lr * ((m.array() / c1) / ((v.array() / c2).sqrt() + o.eps) +
                o.weight_decay * params[i].array());
  }
}

// One optimizer step on a size-homogeneous batch; returns the batch loss.
inline double train_step(TrainState &state, LossEvaluator &eval,
                         std::span<const TrainingExample> examples,
                         const NoiseSchedule &sched) {
  auto lg = eval.gradients(state.model, examples, sched);
  if (!std::isfinite(lg.loss)) throw NonFiniteGradient("non-finite loss");
  adamw_update(state, lg.grads);
  return lg.loss;
}

}  // namespace dise

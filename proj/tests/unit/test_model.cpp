//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <numbers>

#include "../oracles.hpp"

using namespace dise;
using ad::Mat;
using ad::Tape;
using ad::Var;

namespace {

Mat<double> random_mat(int r, int c, Rng &rng, double scale = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
  return m;
}

// Checks reverse-mode gradients of a random linear read-out of `build`
// against central differences, for every entry of every input.
void check_op(std::vector<Mat<double>> inputs,
              const std::function<Var(Tape<double> &, const std::vector<Var> &)> &build,
              std::uint64_t seed = 1, double tol = 1e-7) {
  Rng rng(seed);
  Mat<double> w_col, w_row;
  auto scalar = [&](Tape<double> &t, std::vector<Var> &vars) {
    vars.clear();
    for (const auto &m : inputs) vars.push_back(t.parameter(m));
    Var out = build(t, vars);
    // copy the shape: adding nodes may move the tape's storage
    const int rows = static_cast<int>(t.value(out).rows());
    const int cols = static_cast<int>(t.value(out).cols());
    if (rows == 1 && cols == 1) return out;
    if (w_col.size() == 0) {
      w_col = random_mat(cols, 1, rng);
      w_row = random_mat(rows, 1, rng);
    }
    Var y = ad::matmul(t, out, t.constant(w_col));
    y = ad::gate(t, y, t.constant(w_row));
    return ad::group_mean(t, y, rows);
  };
  Tape<double> tape;
  std::vector<Var> vars;
  Var s = scalar(tape, vars);
  tape.backward(s);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Mat<double> analytic = tape.has_grad(vars[k])
                                     ? tape.grad(vars[k])
                                     : Mat<double>::Zero(inputs[k].rows(), inputs[k].cols());
    std::span<double> x(inputs[k].data(), static_cast<std::size_t>(inputs[k].size()));
    const auto numeric = oracle::numeric_gradient(
        [&] {
          Tape<double> t2(false);
          std::vector<Var> v2;
          return t2.value(scalar(t2, v2))(0, 0);
        },
        x, 1e-5);
    for (std::size_t i = 0; i < numeric.size(); ++i)
      EXPECT_NEAR(analytic.data()[i], numeric[i], tol) << "input " << k << " entry " << i;
  }
}

ModelInput input_for(const MolGraph &g, const char *modality = "full") {
  return build_model_input(make_spectral_record(g), modality_by_name(modality));
}

ModelConfig tiny_config(AtomAlphabet a = AtomAlphabet::SuperAtom) {
  ModelConfig c = ModelConfig::named("desk", 5, a);
  c.n_layers = 2;
  c.n_heads = 2;
  c.dx = 8;
  c.de = 6;
  c.dy = 5;
  c.ffx = 7;
  c.ffe = 6;
  c.ffy = 4;
  return c;
}

EdgeTensor connected_edges(std::size_t n, std::uint64_t seed) {
  Rng r(seed);
  for (;;) {
    auto e = oracle::random_edges(n, r, {0.5, 0.3, 0.1, 0.05, 0.05});
    if (count_components(e) == 1) return e;
  }
}

}  // namespace

// --- autodiff ops --------------------------------------------------------------

TEST(Autodiff, Linear) {
  Rng r(1);
  check_op({random_mat(3, 4, r), random_mat(4, 5, r), random_mat(1, 5, r)},
           [](Tape<double> &t, const std::vector<Var> &v) { return ad::linear(t, v[0], v[1], v[2]); });
}

TEST(Autodiff, MatmulAddGateSilu) {
  Rng r(2);
  check_op({random_mat(3, 4, r), random_mat(4, 2, r)},
           [](Tape<double> &t, const std::vector<Var> &v) { return ad::matmul(t, v[0], v[1]); });
  check_op({random_mat(3, 4, r), random_mat(3, 4, r)},
           [](Tape<double> &t, const std::vector<Var> &v) { return ad::add(t, v[0], v[1]); });
  check_op({random_mat(3, 4, r), random_mat(3, 4, r)},
           [](Tape<double> &t, const std::vector<Var> &v) { return ad::gate(t, v[0], v[1]); });
  check_op({random_mat(3, 4, r, 3.0)},
           [](Tape<double> &t, const std::vector<Var> &v) { return ad::silu(t, v[0]); });
}

TEST(Autodiff, LayerNorm) {
  Rng r(3);
  check_op({random_mat(4, 6, r), random_mat(1, 6, r), random_mat(1, 6, r)},
           [](Tape<double> &t, const std::vector<Var> &v) {
             return ad::layer_norm(t, v[0], v[1], v[2]);
           });
}

TEST(Autodiff, PairOps) {
  Rng r(4);
  const int B = 2, n = 3, d = 4, h = 2;
  check_op({random_mat(B * n, d, r), random_mat(B * n, d, r)},
           [&](Tape<double> &t, const std::vector<Var> &v) {
             return ad::pair_product(t, v[0], v[1], n, 0.5);
           });
  check_op({random_mat(B * n * n, d, r)}, [&](Tape<double> &t, const std::vector<Var> &v) {
    return ad::head_sum(t, v[0], h);
  });
  check_op({random_mat(B * n * n, h, r, 2.0)}, [&](Tape<double> &t, const std::vector<Var> &v) {
    return ad::pair_softmax(t, v[0], n);
  });
  check_op({random_mat(B * n * n, h, r), random_mat(B * n, d, r)},
           [&](Tape<double> &t, const std::vector<Var> &v) { return ad::attend(t, v[0], v[1], n); });
  check_op({random_mat(B * n * n, 5, r)}, [&](Tape<double> &t, const std::vector<Var> &v) {
    return ad::symmetrize_pairs(t, v[0], n);
  });
}

TEST(Autodiff, RowOps) {
  Rng r(5);
  check_op({random_mat(2, 3, r)}, [](Tape<double> &t, const std::vector<Var> &v) {
    return ad::repeat_rows(t, v[0], 4);
  });
  check_op({random_mat(6, 3, r)}, [](Tape<double> &t, const std::vector<Var> &v) {
    return ad::group_mean(t, v[0], 3);
  });
}

TEST(Autodiff, PairCrossEntropy) {
  Rng r(6);
  const int n = 3;
  std::vector<std::uint8_t> targets;
  for (int i = 0; i < 2 * n * n; ++i) targets.push_back(static_cast<std::uint8_t>(i % 5));
  check_op({random_mat(2 * n * n, 5, r, 2.0)}, [&](Tape<double> &t, const std::vector<Var> &v) {
    return ad::pair_cross_entropy(t, v[0], targets, n);
  });
  Tape<double> t;
  const std::vector<std::uint8_t> short_targets(3, 0);
  EXPECT_THROW(ad::pair_cross_entropy(t, t.constant(random_mat(2 * n * n, 5, r)), short_targets, n),
               ShapeMismatch);
}

TEST(Autodiff, CrossEntropyOfKnownLogits) {
  // one graph, n = 2: the only unordered pair (0,1) with logits (0, ln 3)
  Tape<double> t;
  Mat<double> logits = Mat<double>::Zero(4, 2);
  logits(1, 1) = std::log(3.0);
  logits(2, 1) = std::log(3.0);
  const std::vector<std::uint8_t> targets{0, 1, 1, 0};
  const auto l = ad::pair_cross_entropy(t, t.constant(logits), targets, 2);
  EXPECT_NEAR(t.value(l)(0, 0), -std::log(0.75), 1e-14);
}

// --- denoiser ------------------------------------------------------------------

TEST(Denoiser, ConfigsAndParameterCounts) {
  const auto a = ModelConfig::named("desk", 5, AtomAlphabet::SuperAtom);
  EXPECT_EQ(a.n_layers, 4);
  EXPECT_EQ(a.dx, 64);
  const auto q = ModelConfig::named("paper-qm9", 5, AtomAlphabet::SuperAtom);
  EXPECT_EQ(q.n_layers, 24);
  EXPECT_EQ(q.n_heads, 8);
  EXPECT_EQ(q.ffy, 128);
  const auto p = ModelConfig::named("paper-pcqm", 6, AtomAlphabet::SuperAtom);
  EXPECT_EQ(p.dx, 1024);
  EXPECT_EQ(p.n_heads, 32);
  EXPECT_THROW(ModelConfig::named("huge", 5, AtomAlphabet::SuperAtom), ModelError);
  auto bad = a;
  bad.dx = 30;
  EXPECT_THROW(bad.validate(), ShapeMismatch);

  // count is a function of the config only
  std::size_t from_layout = 0;
  for (const auto &s : param_layout(a)) from_layout += static_cast<std::size_t>(s.rows) * s.cols;
  EXPECT_EQ(Denoiser(a, 1).parameter_count(), from_layout);
  EXPECT_EQ(Denoiser(a, 2).parameter_count(), from_layout);
  const Denoiser d(a, 3);
  for (const auto &m : d.params()) EXPECT_TRUE(m.allFinite());
}

TEST(Denoiser, InitializationIsSeeded) {
  const auto c = tiny_config();
  const Denoiser a(c, 7), b(c, 7), d(c, 8);
  EXPECT_EQ(a.params(), b.params());
  EXPECT_NE(a.params(), d.params());
  for (std::size_t i = 0; i < a.layout().size(); ++i) {
    const auto &spec = a.layout()[i];
    if (spec.role == ParamRole::Bias) { EXPECT_TRUE(a.params()[i].isZero()); }
    if (spec.role == ParamRole::Gain) { EXPECT_TRUE(a.params()[i].isOnes()); }
    if (spec.role == ParamRole::Weight) {
      EXPECT_LE(a.params()[i].cwiseAbs().maxCoeff(), 1.0 / std::sqrt(spec.rows));
    }
  }
  auto params = a.params();
  params.pop_back();
  EXPECT_THROW(Denoiser(c, params), ShapeMismatch);
}

TEST(Denoiser, LogitsAreSymmetric) {
  const auto g = oracle::mol("CH3 CH2 CH1 OH1 CH3 NH2",
                             {{0, 1, 1}, {1, 2, 1}, {2, 3, 1}, {2, 4, 1}, {4, 5, 1}});
  const auto in = input_for(g);
  const Denoiser model(ModelConfig::named("desk", 5, AtomAlphabet::SuperAtom), 3);
  Rng r(1);
  const auto e = oracle::random_edges(6, r);
  const auto l = forward(model, in, e, 0.3);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(l(i, j, c), l(j, i, c));
}

TEST(Denoiser, PermutationEquivariance) {
  const auto g = oracle::mol("CH3 CH2 CH1 OH1 CH3 NH2",
                             {{0, 1, 1}, {1, 2, 1}, {2, 3, 1}, {2, 4, 1}, {4, 5, 1}});
  const auto in = input_for(g);
  const Denoiser model(ModelConfig::named("desk", 5, AtomAlphabet::SuperAtom), 5);
  Rng r(9);
  // noisy states include symmetric and disconnected graphs
  for (int rep = 0; rep < 12; ++rep) {
    const auto e = rep % 2 ? connected_edges(6, rep) : oracle::random_edges(6, r);
    const auto p = oracle::random_permutation(6, r);
    ModelInput ip = in;
    for (std::size_t i = 0; i < 6; ++i) ip.nodes[p[i]] = in.nodes[i];
    ip.cosy = in.cosy.permuted(p);
    const auto a = forward(model, in, e, 0.4);
    const auto b = forward(model, ip, e.permuted(p), 0.4);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j)
        for (std::size_t c = 0; c < 5; ++c)
          EXPECT_NEAR(b(p[i], p[j], c), a(i, j, c), 1e-10 * std::max(1.0, std::abs(a(i, j, c))));
  }
}

TEST(Denoiser, FloatPathAgreesWithDouble) {
  const auto g = oracle::mol("CH3 CH1 OH1 CH3", {{0, 1, 1}, {1, 2, 1}, {1, 3, 1}});
  const auto in = input_for(g);
  const Denoiser model(ModelConfig::named("desk", 5, AtomAlphabet::SuperAtom), 5);
  const auto sched = build_schedule(50);
  Rng r(2);
  const std::vector<EdgeTensor> states{oracle::random_edges(4, r), oracle::random_edges(4, r)};
  DenoiserPredictor<float> pf(model);
  DenoiserPredictor<double> pd(model);
  std::vector<double> a, b;
  pf.predict(in, states, 20, sched, a);
  pd.predict(in, states, 20, sched, b);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-4);
}

TEST(Denoiser, UniformLogitsGiveLnK) {
  const auto cfg = ModelConfig::named("desk", 5, AtomAlphabet::SuperAtom);
  Denoiser model(cfg, 1);
  model.params()[model.params().size() - 1].setZero();
  model.params()[model.params().size() - 2].setZero();
  const auto g = oracle::mol("CH3 CH1 OH1 CH3", {{0, 1, 1}, {1, 2, 1}, {1, 3, 1}});
  const auto prep = prepare_molecule(g, make_spectral_record(g), modality_by_name("full"));
  const auto sched = build_schedule(50);
  std::vector<TrainingExample> ex{sample_training_example(prep, sched, PriorK::qm9(), 1u),
                                  sample_training_example(prep, sched, PriorK::qm9(), 2u)};
  LossEvaluator eval;
  EXPECT_NEAR(eval.loss(model, ex, sched), std::log(5.0), 1e-12);
}

TEST(Denoiser, GradientsMatchFiniteDifferences) {
  const auto cfg = tiny_config();
  Denoiser model(cfg, 11);
  // perturb gains and biases away from their initial values so that every
  // tensor sees a generic point
  Rng r(3);
  for (auto &p : model.params())
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] += r.uniform(-0.1, 0.1);
  const auto g = oracle::mol("CH3 CH1 OH1 CH3", {{0, 1, 1}, {1, 2, 1}, {1, 3, 1}});
  const auto prep = prepare_molecule(g, make_spectral_record(g), modality_by_name("full"));
  const auto sched = build_schedule(20);
  std::vector<TrainingExample> ex{sample_training_example(prep, sched, PriorK::qm9(), 4u),
                                  sample_training_example(prep, sched, PriorK::qm9(), 5u)};
  LossEvaluator eval;
  const auto lg = eval.gradients(model, ex, sched);
  for (std::size_t k = 0; k < model.params().size(); ++k) {
    auto &p = model.params()[k];
    std::span<double> x(p.data(), static_cast<std::size_t>(p.size()));
    const auto num = oracle::numeric_gradient([&] { return eval.loss(model, ex, sched); }, x, 1e-5);
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double a = lg.grads[k].data()[i];
      EXPECT_LE(std::abs(a - num[i]) / std::max({std::abs(a), std::abs(num[i]), 1e-6}), 1e-4)
          << model.layout()[k].name << "[" << i << "] analytic " << a << " numeric " << num[i];
    }
  }
}

TEST(Denoiser, NoisyGraphFeaturesFeedTheModel) {
  const auto g = oracle::mol("CH3 CH1 OH1 CH3", {{0, 1, 1}, {1, 2, 1}, {1, 3, 1}});
  const auto in = input_for(g);
  const auto cfg = ModelConfig::named("desk", 5, AtomAlphabet::SuperAtom);
  FeatureBatch<double> a, b;
  a.resize(cfg, 1, 4);
  b.resize(cfg, 1, 4);
  EdgeTensor e1(4), e2(4);
  e1.set(0, 1, 1);
  e2.set(0, 1, 1);
  e2.set(2, 3, 1);
  e2.set(1, 3, 1);
  e2.set(1, 2, 1);
  const auto kinds = in.kinds();
  fill_features(a, cfg, 0, in, kinds, e1, 0.5);
  fill_features(b, cfg, 0, in, kinds, e2, 0.5);
  EXPECT_NE(a.y, b.y);  // component count / spectrum follow E_t
  EXPECT_EQ(a.y(0, ModelConfig::kGlobalIn - 1), 0.5);
  // spectral node inputs do not depend on E_t
  const int s = alphabet_size(cfg.alphabet);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(a.x(i, s), b.x(i, s));
    EXPECT_EQ(a.x(i, s + 1), b.x(i, s + 1));
  }
}

// --- optimizer and training ------------------------------------------------------

TEST(Optimizer, FirstAdamWStepMatchesHandComputation) {
  TrainState st(Denoiser(tiny_config(), 1), 0);
  const auto before = st.model.params();
  Rng r(2);
  std::vector<Mat<double>> grads;
  for (const auto &p : before) grads.push_back(random_mat(p.rows(), p.cols(), r));
  adamw_update(st, grads);
  const auto &o = st.optimizer;
  for (std::size_t k = 0; k < before.size(); ++k)
    for (Eigen::Index i = 0; i < before[k].size(); ++i) {
      const double g = grads[k].data()[i], p = before[k].data()[i];
      const double want = p - o.lr * (g / (std::abs(g) + o.eps) + o.weight_decay * p);
      EXPECT_NEAR(st.model.params()[k].data()[i], want, 1e-15);
    }
  EXPECT_EQ(st.step, 1);
  grads[0](0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(adamw_update(st, grads), NonFiniteGradient);
}

TEST(Optimizer, ClippingScalesTheGlobalGradient) {
  TrainState st(Denoiser(tiny_config(), 1), 0);
  st.optimizer.clip_norm = 0.5;
  Rng r(4);
  std::vector<Mat<double>> grads;
  double sq = 0.0;
  for (const auto &p : st.model.params()) {
    grads.push_back(random_mat(p.rows(), p.cols(), r));
    sq += grads.back().squaredNorm();
  }
  const double scale = 0.5 / std::sqrt(sq);
  ASSERT_LT(scale, 1.0);
  adamw_update(st, grads);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    EXPECT_LT((st.adam_m[k] - 0.1 * scale * grads[k]).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((st.adam_v[k].array() - 0.001 * (scale * grads[k].array()).square())
                  .abs()
                  .maxCoeff(),
              1e-15);
  }
}

TEST(Training, LearningRateDecaysToTheFloor) {
  const auto built = generate_dataset(20, 4, ElementWeights{}, 2);
  TrainOptions opt;
  opt.steps = 8;
  opt.batch_size = 2;
  opt.t_max = 10;
  opt.lr_floor = 0.1;
  const auto res = train_model(built.records, {}, modality_by_name("full"), tiny_config(),
                               PriorK::qm9(), opt);
  // the last step runs at the cosine value for step 7 of 8
  const double want =
      opt.optimizer.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * 7.0 / 8.0)));
  EXPECT_NEAR(res.last.optimizer.lr, want, 1e-15);
  EXPECT_DOUBLE_EQ(res.last.optimizer.clip_norm, 1.0);
}

TEST(Training, DeterministicAndDecreasing) {
  const auto built = generate_dataset(60, 5, ElementWeights{}, 2);
  const auto modality = modality_by_name("full");
  TrainOptions opt;
  opt.steps = 60;
  opt.batch_size = 8;
  opt.seed = 3;
  opt.t_max = 20;
  opt.eval_every = 30;
  const auto cfg = tiny_config();
  std::vector<double> losses;
  opt.on_step = [&](std::int64_t, double l) { losses.push_back(l); };
  const auto a = train_model(built.records, built.records, modality, cfg, PriorK::qm9(), opt);
  opt.on_step = nullptr;
  const auto b = train_model(built.records, built.records, modality, cfg, PriorK::qm9(), opt);
  EXPECT_EQ(a.last.model.params(), b.last.model.params());
  EXPECT_EQ(a.best.val_loss, b.best.val_loss);
  ASSERT_EQ(losses.size(), 60u);
  const double head = std::accumulate(losses.begin(), losses.begin() + 10, 0.0);
  const double tail = std::accumulate(losses.end() - 10, losses.end(), 0.0);
  EXPECT_LT(tail, head);
  EXPECT_LE(a.best.val_loss, a.last.val_loss);
}

TEST(Training, InterchangeableNodeFloor) {
  const auto sched = build_schedule(50);
  const auto full = modality_by_name("full");
  auto prep = [&](const MolGraph &g) {
    return std::vector{prepare_molecule(g, make_spectral_record(g), full)};
  };
  // every node distinguishable: a memorizing model can reach zero
  const auto ethanol = oracle::mol("CH3 CH2 OH1", {{0, 1, 1}, {1, 2, 1}});
  EXPECT_EQ(oracle::interchangeable_node_floor(prep(ethanol), sched, PriorK::qm9(), 200, 1), 0.0);
  // methyl formate: the two OH0 look alike, so which one is the carbonyl is a guess
  // whenever E_t hides it; at worst a fair coin on the two C-O pairs
  const auto formate =
      oracle::mol("CH3 OH0 CH1 OH0", {{0, 1, 1}, {1, 2, 1}, {2, 3, 2}});
  const double floor =
      oracle::interchangeable_node_floor(prep(formate), sched, PriorK::qm9(), 4000, 1);
  EXPECT_GT(floor, 0.01);
  EXPECT_LT(floor, 4.0 * std::log(2.0) / 6.0);
}

TEST(Training, RejectsMismatchedPriorAndAlphabet) {
  const auto built = generate_dataset(10, 4, ElementWeights{}, 2);
  TrainOptions opt;
  opt.steps = 1;
  EXPECT_THROW(train_model(built.records, {}, modality_by_name("full"),
                           ModelConfig::named("desk", 6, AtomAlphabet::SuperAtom),
                           PriorK::qm9(), opt),
               ShapeMismatch);
  EXPECT_THROW(train_model(built.records, {}, modality_by_name("ms-1d"),
                           ModelConfig::named("desk", 5, AtomAlphabet::SuperAtom),
                           PriorK::qm9(), opt),
               ShapeMismatch);
}

// --- checkpoints -----------------------------------------------------------------

namespace {

TrainState trained_state() {
  const auto built = generate_dataset(30, 5, ElementWeights{}, 2);
  TrainOptions opt;
  opt.steps = 5;
  opt.batch_size = 4;
  opt.t_max = 20;
  opt.seed = 17;
  return train_model(built.records, built.records, modality_by_name("ms-1d"),
                     tiny_config(AtomAlphabet::Plain), PriorK::qm9(), opt)
      .last;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto st = trained_state();
  const auto bytes = serialize_checkpoint(st);
  const auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.model.config(), st.model.config());
  EXPECT_EQ(back.model.params(), st.model.params());
  EXPECT_EQ(back.adam_m, st.adam_m);
  EXPECT_EQ(back.adam_v, st.adam_v);
  EXPECT_EQ(back.step, st.step);
  EXPECT_EQ(back.seed, st.seed);
  EXPECT_EQ(back.t_max, st.t_max);
  EXPECT_EQ(back.s, st.s);
  EXPECT_EQ(back.prior.probs(), st.prior.probs());
  EXPECT_EQ(back.modality, st.modality);
  EXPECT_EQ(back.val_loss, st.val_loss);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "DISEKPT1");
}

TEST(Checkpoint, EveryCorruptedByteIsDetected) {
  const auto bytes = serialize_checkpoint(trained_state());
  Rng r(4);
  const std::size_t stride = std::max<std::size_t>(1, bytes.size() / 400);
  for (std::size_t pos = 0; pos < bytes.size(); pos += stride) {
    auto bad = bytes;
    bad[pos] ^= static_cast<unsigned char>(1 + r.uniform_int(0, 254));
    EXPECT_THROW(deserialize_checkpoint(bad), ModelError) << "byte " << pos;
  }
}

TEST(Checkpoint, SpecificFailureModes) {
  const auto bytes = serialize_checkpoint(trained_state());
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(magic), BadMagic);
  auto version = bytes;
  version[8] = 9;
  EXPECT_THROW(deserialize_checkpoint(version), VersionMismatch);
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  EXPECT_THROW(deserialize_checkpoint(truncated), ModelError);
  auto crc = bytes;
  crc.back() ^= 0x10;
  EXPECT_THROW(deserialize_checkpoint(crc), ChecksumMismatch);
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), MissingModel);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto st = trained_state();
  const auto path = (std::filesystem::temp_directory_path() / "dise_test_rt.ckpt").string();
  save_checkpoint(st, path);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(st));
  std::remove(path.c_str());
}

//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dise/dise.hpp"

namespace fs = std::filesystem;
using namespace dise;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitModel = 4;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_csv(const std::string &s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

Precision parse_precision(const std::string &s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw UsageError("--precision must be f32 or f64");
}

void write_text(const std::string &path, const std::string &text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  os << text;
}

std::vector<DatasetRecord> split_part(const std::vector<DatasetRecord> &records,
                                      const std::string &part, std::uint64_t split_seed) {
  SplitSpec spec;
  spec.seed = split_seed;
  auto s = split(records, spec);
  if (part == "train") return s.train;
  if (part == "val") return s.val;
  if (part == "test") return s.test;
  if (part == "all") return records;
  throw UsageError("--split must be train, val, test or all");
}

std::vector<DatasetRecord> limited(std::vector<DatasetRecord> v, int limit) {
  if (limit > 0 && static_cast<std::size_t>(limit) < v.size()) v.resize(limit);
  return v;
}

void log_line(const std::string &s) { std::cerr << s << std::endl; }

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::size_t n = 1000;
  int max_heavy = 7;
  std::uint64_t seed = 0;
  std::string out;
  std::string weights = "0.7,0.15,0.15";
  std::string constants;
};

int run_gen_data(const GenDataArgs &a) {
  const auto w = split_csv(a.weights);
  if (w.size() != 3) throw UsageError("--weights expects c,o,n");
  ElementWeights ew{std::stod(w[0]), std::stod(w[1]), std::stod(w[2])};
  const auto k = a.constants.empty() ? SurrogateConstants::defaults()
                                     : SurrogateConstants::load(a.constants);
  const auto built = generate_dataset(a.n, a.max_heavy, ew, a.seed, k);
  save_records(a.out, built.records);
  log_line("wrote " + std::to_string(built.records.size()) + " records to " + a.out +
           " (" + std::to_string(built.dropped) + " dropped for shift range)");
  return kExitOk;
}

struct TrainArgs {
  std::string data;
  std::string preset = "desk";
  std::string modality = "full";
  int steps = 1000;
  int batch = 32;
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  int t_max = 500;
  int eval_every = 250;
  std::string prior = "qm9";
  std::string out_ckpt;
  std::string last_ckpt;
};

int run_train(const TrainArgs &a) {
  const auto records = load_records(a.data);
  SplitSpec spec;
  spec.seed = a.split_seed;
  const auto parts = split(records, spec);
  const auto modality = modality_by_name(a.modality);
  const auto prior = PriorK::named(a.prior);
  const auto cfg = ModelConfig::named(a.preset, static_cast<int>(prior.classes()),
                                      modality.alphabet());
  TrainOptions opt;
  opt.steps = a.steps;
  opt.batch_size = a.batch;
  opt.seed = a.seed;
  opt.t_max = a.t_max;
  opt.eval_every = a.eval_every;
  double acc = 0.0;
  int count = 0;
  opt.on_step = [&](std::int64_t step, double loss) {
    acc += loss;
    ++count;
    if (step % 100 == 0) {
      log_line("step " + std::to_string(step) + " loss " + std::to_string(acc / count));
      acc = 0.0;
      count = 0;
    }
  };
  opt.on_eval = [](std::int64_t step, double v) {
    log_line("step " + std::to_string(step) + " val_loss " + std::to_string(v));
  };
  const auto res = train_model(parts.train, parts.val, modality, cfg, prior, opt);
  save_checkpoint(res.best, a.out_ckpt);
  if (!a.last_ckpt.empty()) save_checkpoint(res.last, a.last_ckpt);
  log_line("best val_loss " + std::to_string(res.best.val_loss) + " at step " +
           std::to_string(res.best.step) + " -> " + a.out_ckpt);
  return kExitOk;
}

struct SampleArgs {
  std::string ckpt;
  std::string ckpt2;
  int runs = 100;
  std::string mode = "posterior";
  std::uint64_t seed = 0;
  std::string precision = "f64";
  bool keep_invalid = false;
  bool argmax = false;
};

SamplerConfig sampler_config(const SampleArgs &a) {
  SamplerConfig sc;
  sc.n_runs = a.runs;
  sc.mode = parse_sampler_mode(a.mode);
  sc.keep_invalid = a.keep_invalid;
  sc.argmax_x0 = a.argmax;
  sc.validate();
  return sc;
}

std::vector<TrainState> load_models(const SampleArgs &a) {
  std::vector<TrainState> out;
  out.push_back(load_checkpoint(a.ckpt));
  if (!a.ckpt2.empty()) out.push_back(load_checkpoint(a.ckpt2));
  return out;
}

struct ElucidateArgs : SampleArgs {
  std::string record;
  std::string data;
  int stride = 0;
  std::string out;
};

int run_elucidate(const ElucidateArgs &a) {
  DatasetRecord target;
  if (fs::exists(a.record)) {
    const auto recs = load_records(a.record);
    if (recs.empty()) throw DataError("no records in " + a.record);
    target = recs.front();
  } else {
    if (a.data.empty()) throw UsageError("--record is not a file; give --data to look up ids");
    bool found = false;
    for (auto &r : load_records(a.data))
      if (r.id == a.record) {
        target = std::move(r);
        found = true;
        break;
      }
    if (!found) throw DataError("record id '" + a.record + "' not found in " + a.data);
  }
  auto models = load_models(a);
  const auto modality = modality_by_name(models.front().modality);
  const auto input = build_model_input(target.spectra, modality);
  auto sc = sampler_config(a);
  sc.master_seed = a.seed;
  sc.trajectory_stride = a.stride;
  std::vector<CandidateSet> sets;
  for (std::size_t m = 0; m < models.size(); ++m) {
    const auto &st = models[m];
    if (st.model.config().alphabet != modality.alphabet() || st.modality != models.front().modality)
      throw ModelError("ensembled checkpoints were trained on different modalities");
    const auto sched = build_schedule(st.t_max, st.s);
    auto pred = make_predictor(st.model, parse_precision(a.precision));
    auto cfg = sc;
    if (m > 0) cfg.master_seed = stream_seed(a.seed, m);
    const auto seeds = run_seeds(cfg);
    const auto chains = denoise_chains(*pred, input, sched, st.prior, cfg, seeds);
    sets.push_back(collect_candidates(input, chains, cfg.keep_invalid));
    if (a.stride > 0 && m == 0 && !chains.empty() && chains.front().trajectory)
      dump_trajectory(*chains.front().trajectory, a.out + ".traj");
  }
  const auto cands = sets.size() == 1 ? sets.front() : ensemble(sets);
  std::ostringstream os;
  os << "# record " << target.id << " formula " << formula_string(target.spectra.formula)
     << " modality " << models.front().modality << " mode " << a.mode << " runs " << a.runs
     << " seed " << a.seed << '\n';
  const auto rank = cands.rank_of(canonical_key(target.graph));
  os << "# truth_rank " << (rank ? std::to_string(*rank) : std::string("F")) << '\n';
  write_candidate_report(os, cands);
  write_text(a.out, os.str());
  log_line("wrote " + std::to_string(cands.entries.size()) + " candidates to " + a.out);
  return kExitOk;
}

struct EvaluateArgs : SampleArgs {
  std::string data;
  std::string split = "test";
  std::uint64_t split_seed = 0;
  int limit = 0;
  std::string perturb = "none";
  std::string out_report;
};

EvalOptions eval_options(const SampleArgs &a) {
  EvalOptions eo;
  eo.sampler = sampler_config(a);
  eo.seed = a.seed;
  eo.precision = parse_precision(a.precision);
  eo.on_target = [](std::size_t done, std::size_t total) {
    if (done % 10 == 0 || done == total)
      log_line("evaluated " + std::to_string(done) + "/" + std::to_string(total));
  };
  return eo;
}

int run_evaluate(const EvaluateArgs &a) {
  const auto targets = limited(split_part(load_records(a.data), a.split, a.split_seed), a.limit);
  const auto models = load_models(a);
  std::vector<const TrainState *> ptrs;
  for (const auto &m : models) ptrs.push_back(&m);
  auto eo = eval_options(a);
  eo.perturbation = perturbation_by_name(a.perturb);
  const auto rep = evaluate(ptrs, targets, modality_by_name(models.front().modality), eo);
  write_text(a.out_report, report_string(rep));
  std::cout << "top1=" << rep.top1() << " topall=" << rep.top_all() << '\n';
  return kExitOk;
}

struct AblateArgs {
  std::string data;
  std::string plan = "table-s4";
  std::string out_dir;
  std::string preset = "desk";
  std::string modalities;
  int steps = 1000;
  int batch = 32;
  int t_max = 500;
  int runs = 100;
  int limit = 0;
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  std::string precision = "f64";
};

int run_ablate(const AblateArgs &a) {
  if (a.plan != "table-s4") throw UsageError("--plan must be table-s4");
  AblationPlan plan = table_s4_plan();
  if (!a.modalities.empty()) plan.modalities = split_csv(a.modalities);
  const auto records = load_records(a.data);
  SplitSpec spec;
  spec.seed = a.split_seed;
  const auto parts = split(records, spec);
  const auto targets = limited(parts.test, a.limit);
  fs::create_directories(a.out_dir);
  const auto prior = PriorK::qm9();
  std::map<std::string, TrainState> trained;
  for (const auto &name : plan.modalities) {
    const auto modality = modality_by_name(name);
    TrainOptions opt;
    opt.steps = a.steps;
    opt.batch_size = a.batch;
    opt.seed = a.seed;
    opt.t_max = a.t_max;
    log_line("training " + name);
    auto res = train_model(parts.train, parts.val, modality,
                           ModelConfig::named(a.preset, 5, modality.alphabet()), prior, opt);
    save_checkpoint(res.best, (fs::path(a.out_dir) / (name + ".ckpt")).string());
    trained.emplace(name, std::move(res.best));
  }
  std::map<std::string, const TrainState *> registry;
  for (const auto &[name, st] : trained) registry[name] = &st;
  SampleArgs sa;
  sa.runs = a.runs;
  sa.seed = a.seed;
  sa.precision = a.precision;
  const auto reports = run_ablation(plan, registry, targets, eval_options(sa));
  std::ostringstream summary;
  summary << "# modality top1 top3 top5 top10 topall\n";
  for (const auto &rep : reports) {
    write_text((fs::path(a.out_dir) / (rep.modality + ".report")).string(), report_string(rep));
    summary << rep.modality;
    for (double v : rep.topk) summary << ' ' << v;
    summary << '\n';
  }
  write_text((fs::path(a.out_dir) / "summary.txt").string(), summary.str());
  std::cout << summary.str();
  return kExitOk;
}

struct SweepArgs : SampleArgs {
  std::string data;
  std::string levels = "sp,mp,lp";
  std::string split = "test";
  std::uint64_t split_seed = 0;
  int limit = 0;
  std::string out_dir;
};

int run_perturb_sweep(const SweepArgs &a) {
  const auto targets = limited(split_part(load_records(a.data), a.split, a.split_seed), a.limit);
  const auto model = load_checkpoint(a.ckpt);
  std::vector<PerturbationLevel> levels{kNoPerturbation};
  for (const auto &name : split_csv(a.levels)) levels.push_back(perturbation_by_name(name));
  fs::create_directories(a.out_dir);
  const auto reports = run_perturbation_sweep(
      model, targets, modality_by_name(model.modality), levels, eval_options(a));
  std::ostringstream summary;
  summary << "# level top1 top3 top5 top10 topall\n";
  for (const auto &rep : reports) {
    write_text((fs::path(a.out_dir) / (rep.perturbation + ".report")).string(),
               report_string(rep));
    summary << rep.perturbation;
    for (double v : rep.topk) summary << ' ' << v;
    summary << '\n';
  }
  write_text((fs::path(a.out_dir) / "summary.txt").string(), summary.str());
  std::cout << summary.str();
  return kExitOk;
}

void add_sample_flags(CLI::App *cmd, SampleArgs &a, bool ckpt2) {
  cmd->add_option("--ckpt", a.ckpt, "checkpoint")->required();
  if (ckpt2) cmd->add_option("--ckpt2", a.ckpt2, "second checkpoint (ensemble)");
  cmd->add_option("--runs", a.runs, "chains per target");
  cmd->add_option("--mode", a.mode, "posterior | paper-literal");
  cmd->add_option("--seed", a.seed, "master seed");
  cmd->add_option("--precision", a.precision, "f32 | f64");
  cmd->add_flag("--keep-invalid", a.keep_invalid, "rank invalid candidates too");
  cmd->add_flag("--argmax", a.argmax, "paper-literal: argmax instead of sampling");
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"dise: structure elucidation by discrete graph diffusion"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto *c_gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  c_gen->add_option("--n", gen.n, "number of molecules")->required();
  c_gen->add_option("--max-heavy", gen.max_heavy, "max heavy atoms");
  c_gen->add_option("--seed", gen.seed, "generator seed");
  c_gen->add_option("--out", gen.out, "output .jsonl")->required();
  c_gen->add_option("--weights", gen.weights, "element weights c,o,n");
  c_gen->add_option("--constants", gen.constants, "surrogate constants file");

  TrainArgs tr;
  auto *c_train = app.add_subcommand("train", "train a denoiser");
  c_train->add_option("--data", tr.data, "dataset .jsonl")->required();
  c_train->add_option("--preset", tr.preset, "paper-qm9 | paper-pcqm | desk")
      ->check(CLI::IsMember({"paper-qm9", "paper-pcqm", "desk"}));
  c_train->add_option("--modality", tr.modality, "input modality");
  c_train->add_option("--steps", tr.steps, "optimizer steps");
  c_train->add_option("--batch", tr.batch, "batch size");
  c_train->add_option("--seed", tr.seed, "training seed");
  c_train->add_option("--split-seed", tr.split_seed, "8:1:1 split seed");
  c_train->add_option("--t-max", tr.t_max, "diffusion steps");
  c_train->add_option("--eval-every", tr.eval_every, "validation cadence");
  c_train->add_option("--prior", tr.prior, "qm9 | pcqm | file");
  c_train->add_option("--out-ckpt", tr.out_ckpt, "best checkpoint path")->required();
  c_train->add_option("--last-ckpt", tr.last_ckpt, "also save the final state here");

  ElucidateArgs el;
  auto *c_el = app.add_subcommand("elucidate", "rank candidate structures for one record");
  add_sample_flags(c_el, el, true);
  c_el->add_option("--record", el.record, "record file or id")->required();
  c_el->add_option("--data", el.data, "dataset to look up --record ids");
  c_el->add_option("--trajectory-stride", el.stride, "snapshot stride (0 = off)");
  c_el->add_option("--out", el.out, "candidate report path")->required();

  EvaluateArgs ev;
  auto *c_ev = app.add_subcommand("evaluate", "Top-K evaluation on a split");
  add_sample_flags(c_ev, ev, true);
  c_ev->add_option("--data", ev.data, "dataset .jsonl")->required();
  c_ev->add_option("--split", ev.split, "train | val | test | all");
  c_ev->add_option("--split-seed", ev.split_seed, "8:1:1 split seed");
  c_ev->add_option("--limit", ev.limit, "evaluate only the first N targets");
  c_ev->add_option("--perturb", ev.perturb, "none | sp | mp | lp");
  c_ev->add_option("--out-report", ev.out_report, "report path")->required();

  AblateArgs ab;
  auto *c_ab = app.add_subcommand("ablate", "train and evaluate one model per modality");
  c_ab->add_option("--data", ab.data, "dataset .jsonl")->required();
  c_ab->add_option("--plan", ab.plan, "table-s4");
  c_ab->add_option("--out-dir", ab.out_dir, "output directory")->required();
  c_ab->add_option("--modalities", ab.modalities, "subset of the plan, comma separated");
  c_ab->add_option("--preset", ab.preset, "model preset")
      ->check(CLI::IsMember({"paper-qm9", "paper-pcqm", "desk"}));
  c_ab->add_option("--steps", ab.steps, "optimizer steps per model");
  c_ab->add_option("--batch", ab.batch, "batch size");
  c_ab->add_option("--t-max", ab.t_max, "diffusion steps");
  c_ab->add_option("--runs", ab.runs, "chains per target");
  c_ab->add_option("--limit", ab.limit, "evaluate only the first N test targets");
  c_ab->add_option("--seed", ab.seed, "seed");
  c_ab->add_option("--split-seed", ab.split_seed, "8:1:1 split seed");
  c_ab->add_option("--precision", ab.precision, "f32 | f64");

  SweepArgs sw;
  sw.runs = 128;
  auto *c_sw = app.add_subcommand("perturb-sweep", "evaluate under shift perturbations");
  add_sample_flags(c_sw, sw, false);
  c_sw->add_option("--data", sw.data, "dataset .jsonl")->required();
  c_sw->add_option("--levels", sw.levels, "comma separated: sp,mp,lp");
  c_sw->add_option("--split", sw.split, "train | val | test | all");
  c_sw->add_option("--split-seed", sw.split_seed, "8:1:1 split seed");
  c_sw->add_option("--limit", sw.limit, "evaluate only the first N targets");
  c_sw->add_option("--out-dir", sw.out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (c_gen->parsed()) return run_gen_data(gen);
    if (c_train->parsed()) return run_train(tr);
    if (c_el->parsed()) return run_elucidate(el);
    if (c_ev->parsed()) return run_evaluate(ev);
    if (c_ab->parsed()) return run_ablate(ab);
    if (c_sw->parsed()) return run_perturb_sweep(sw);
  } catch (const UsageError &e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError &e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ModelError &e) {
    std::cerr << "model error: " << e.what() << '\n';
    return kExitModel;
  } catch (const Error &e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument &e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

#include "candtrack/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include <CLI11.hpp>

#include "candtrack/dataset_io.hpp"
#include "candtrack/embednet.hpp"
#include "candtrack/encoder.hpp"
#include "candtrack/errors.hpp"
#include "candtrack/matcher.hpp"
#include "candtrack/pipeline.hpp"
#include "candtrack/simulator.hpp"
#include "candtrack/training.hpp"

namespace candtrack {

namespace fs = std::filesystem;

namespace {

struct GenArgs {
  std::string config;
  std::string preset = "random";
  std::string out;
  std::uint64_t seed = 0;
  std::size_t sequences = 1;
  std::optional<std::size_t> frames;
};

struct TrainArgs {
  std::string data;
  std::string out;
  std::string loss_curve;
  TrainConfig cfg;
};

struct TrackArgs {
  std::string model;
  std::string data;
  std::string config;
  std::string out;
  bool greedy = false;
};

struct EvalArgs {
  std::string results;
  std::string gt;
  std::string out;
};

struct GradArgs {
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  std::size_t embed_dim = 16;
  double step = 1e-4;
  double tolerance = 1e-4;
};

struct BenchArgs {
  std::size_t embed_dim = 256;
  std::size_t frames = 60;
  std::uint64_t seed = 0;
};

int run_gen(const GenArgs& a) {
  SimConfig cfg;
  if (!a.config.empty()) {
    cfg = SimConfig::from_json(read_json_file(a.config));
  } else if (a.preset == "crossing") {
    cfg = SimConfig::crossing();
  } else if (a.preset != "random") {
    throw FormatError("unknown preset '" + a.preset + "'");
  }
  if (a.frames) cfg.frames = *a.frames;
  cfg.validate();
  fs::create_directories(a.out);
  for (std::size_t k = 0; k < a.sequences; ++k) {
    const std::uint64_t seed = a.seed * 1000003ULL + k;
    char name[32];
    std::snprintf(name, sizeof(name), "seq_%05zu.json", k);
    write_sequence(generate_sequence(cfg, seed), fs::path(a.out) / name);
  }
  std::cout << "wrote " << a.sequences << " sequences to " << a.out << "\n";
  return 0;
}

int run_train(TrainArgs a) {
  const auto seqs = read_sequences(a.data);
  a.cfg.dims.appearance_dim = seqs.front().meta.appearance_dim;
  const TrainResult r = train(seqs, a.cfg);
  write_json_file(r.params.to_json(), a.out);
  fs::path curve = a.loss_curve.empty() ? fs::path(a.out).replace_extension(".loss.csv") : fs::path(a.loss_curve);
  write_loss_curve(r.curve, curve);
  for (const auto& e : r.curve) {
    std::cout << "epoch " << e.epoch << " mean_loss " << e.mean_loss << " lr " << e.lr << "\n";
  }
  return 0;
}

int run_track(const TrackArgs& a) {
  const TrackerConfig cfg = a.config.empty() ? TrackerConfig{} : TrackerConfig::from_json(read_json_file(a.config));
  const auto seqs = read_sequences(a.data);
  TrackResults results;
  if (a.greedy) {
    results.tracker = "greedy";
    for (const auto& s : seqs) results.sequences.push_back(track_greedy(s, cfg));
  } else {
    if (a.model.empty()) throw std::invalid_argument("--model is required unless --greedy is given");
    ModelParams model = ModelParams::from_json(read_json_file(a.model));
    results.tracker = "learned";
    for (const auto& s : seqs) results.sequences.push_back(track_sequence(s, model, cfg));
  }
  write_json_file(results_to_json(results), a.out);
  return 0;
}

int run_eval(const EvalArgs& a) {
  const TrackResults results = results_from_json(read_json_file(a.results));
  const auto seqs = read_sequences(a.gt);
  const Metrics m = evaluate(results, seqs);
  const nlohmann::json j = metrics_to_json(m);
  write_json_file(j, a.out);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int run_gradcheck(const GradArgs& a) {
  ModelDims dims;
  dims.embed_dim = a.embed_dim;
  dims.gnn_layers = 4;
  double worst = 0.0;
  for (std::size_t k = 0; k < a.seeds; ++k) {
    const auto report = check_loss_gradients(dims, a.seed + k, a.step);
    if (!std::isfinite(report.max_rel_error)) throw NumericalError("gradient check produced a non-finite error");
    std::cout << "seed " << a.seed + k << " entries " << report.entries << " max_rel_error " << report.max_rel_error
              << "\n";
    worst = std::max(worst, report.max_rel_error);
  }
  const bool ok = worst < a.tolerance;
  std::cout << (ok ? "ok" : "FAILED") << " max_rel_error " << worst << " tolerance " << a.tolerance << "\n";
  return ok ? 0 : 1;
}

template <class F>
double time_ms(F&& f, int repeats) {
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < repeats; ++i) f();
  const std::chrono::duration<double, std::milli> d = std::chrono::steady_clock::now() - start;
  return d.count() / repeats;
}

int run_bench(const BenchArgs& a) {
  SimConfig sim = SimConfig::crossing();
  sim.frames = a.frames;
  SequenceRecord seq;
  const double gen_ms = time_ms([&] { seq = generate_sequence(sim, a.seed); }, 1);

  ModelDims dims;
  dims.embed_dim = a.embed_dim;
  dims.appearance_dim = sim.appearance_dim;
  ModelParams model = init_model(dims, a.seed);

  std::vector<std::vector<Candidate>> cands;
  const double extract_ms = time_ms(
      [&] {
        cands.clear();
        for (const auto& f : seq.frames) cands.push_back(frame_candidates(f, sim.appearance_dim));
      },
      1) / static_cast<double>(seq.frames.size());

  std::vector<Candidate> five;
  for (const auto& c : cands)
    if (c.size() > five.size()) five = c;
  const MapDims md{sim.height, sim.width};
  dm::Tensor z;
  const double encode_ms = time_ms(
      [&] {
        dm::Tape tape;
        Bound b(tape, model, false);
        z = encode_candidates(b, five, md, dm::Mode::Infer).value();
      },
      20);
  const double match_ms = time_ms([&] { predict_assignment(model, z, z, kDefaultSinkhornIterations); }, 20);

  SequenceResult res;
  const double track_ms = time_ms([&] { res = track_sequence(seq, model, TrackerConfig{}); }, 1);

  std::mt19937_64 rng(a.seed);
  std::vector<FramePairSample> batch;
  for (int i = 0; i < 8; ++i) {
    auto b = random_batch(rng, sim.appearance_dim, 5, 5);
    batch.insert(batch.end(), b.begin(), b.end());
  }
  ModelParams trainable = init_model(dims, a.seed);
  Adam opt;
  const double step_ms = time_ms([&] { train_step(trainable, opt, batch, 0.0, kDefaultSinkhornIterations); }, 3);

  std::printf("embed_dim                 %zu\n", a.embed_dim);
  std::printf("candidates per frame      %zu (largest frame)\n", five.size());
  std::printf("generate sequence (ms)    %.3f (%zu frames)\n", gen_ms, seq.frames.size());
  std::printf("extract per frame (ms)    %.4f\n", extract_ms);
  std::printf("encode frame (ms)         %.4f\n", encode_ms);
  std::printf("embed+sinkhorn pair (ms)  %.4f\n", match_ms);
  std::printf("track sequence (ms)       %.3f (%.3f per frame)\n", track_ms,
              track_ms / static_cast<double>(seq.frames.size()));
  std::printf("train step, batch 16 (ms) %.3f\n", step_ms);
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Learned target-candidate association on synthetic score maps"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate synthetic sequences");
  g->add_option("--config", gen.config, "Simulator config JSON");
  g->add_option("--preset", gen.preset, "Config preset when --config is absent")->check(CLI::IsMember({"random", "crossing"}));
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Base seed");
  g->add_option("--sequences", gen.sequences, "Number of sequences")->check(CLI::PositiveNumber);
  g->add_option("--frames", gen.frames, "Frames per sequence (overrides the config)");

  TrainArgs tr;
  tr.cfg.dims.embed_dim = 256;
  auto* t = app.add_subcommand("train", "Train the association network");
  t->add_option("--data", tr.data, "Sequence file or directory")->required();
  t->add_option("--out", tr.out, "Weights JSON")->required();
  t->add_option("--loss-curve", tr.loss_curve, "Loss curve CSV (default: next to --out)");
  t->add_option("--epochs", tr.cfg.epochs)->check(CLI::PositiveNumber);
  t->add_option("--lr", tr.cfg.lr)->check(CLI::NonNegativeNumber);
  t->add_option("--lr-decay", tr.cfg.lr_decay);
  t->add_option("--decay-every", tr.cfg.decay_every);
  t->add_option("--seed", tr.cfg.seed);
  t->add_option("--batch-size", tr.cfg.batch_size)->check(CLI::PositiveNumber);
  t->add_option("--samples-per-epoch", tr.cfg.samples_per_epoch)->check(CLI::PositiveNumber);
  t->add_option("--embed-dim", tr.cfg.dims.embed_dim)->check(CLI::PositiveNumber);
  t->add_option("--heads", tr.cfg.dims.heads)->check(CLI::PositiveNumber);
  t->add_option("--gnn-layers", tr.cfg.dims.gnn_layers)->check(CLI::PositiveNumber);

  TrackArgs tk;
  auto* k = app.add_subcommand("track", "Track sequences");
  k->add_option("--model", tk.model, "Weights JSON");
  k->add_option("--data", tk.data, "Sequence file or directory")->required();
  k->add_option("--config", tk.config, "Tracker config JSON");
  k->add_option("--out", tk.out, "Results JSON")->required();
  k->add_flag("--greedy", tk.greedy, "Use the greedy max-score baseline");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate tracking results against ground truth");
  e->add_option("--results", ev.results)->required();
  e->add_option("--gt", ev.gt, "Sequence file or directory")->required();
  e->add_option("--out", ev.out, "Metrics JSON")->required();

  GradArgs gr;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the training loss gradient");
  gc->add_option("--seed", gr.seed);
  gc->add_option("--seeds", gr.seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  gc->add_option("--embed-dim", gr.embed_dim)->check(CLI::PositiveNumber);
  gc->add_option("--step", gr.step)->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", gr.tolerance)->check(CLI::PositiveNumber);

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "Timing report");
  b->add_option("--embed-dim", be.embed_dim)->check(CLI::PositiveNumber);
  b->add_option("--frames", be.frames)->check(CLI::PositiveNumber);
  b->add_option("--seed", be.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*g) return run_gen(gen);
    if (*t) return run_train(tr);
    if (*k) return run_track(tk);
    if (*e) return run_eval(ev);
    if (*gc) return run_gradcheck(gr);
    if (*b) return run_bench(be);
  } catch (const FormatError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  } catch (const NumericalError& ex) {
    std::cerr << "numerical failure: " << ex.what() << "\n";
    return 3;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace candtrack

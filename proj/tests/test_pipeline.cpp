#include <stdexcept>
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "candtrack/cli.hpp"
#include "candtrack/dataset_io.hpp"
#include "candtrack/errors.hpp"
#include "candtrack/memory.hpp"
#include "candtrack/pipeline.hpp"

using namespace candtrack;
namespace fs = std::filesystem;

namespace {

SimConfig still_world(std::size_t objects, std::size_t frames = 20) {
  SimConfig c;
  c.noise_std = 0.0;
  c.motion_std = 0.0;
  c.amplitude_jitter = 0.0;
  c.enter_prob = 0.0;
  c.leave_prob = 0.0;
  c.frames = frames;
  for (std::size_t i = 0; i < objects; ++i)
    c.scripted.push_back({6.0 + 6.0 * static_cast<double>(i), 6.0 + 5.0 * static_cast<double>(i), 0.0, 0.0,
                          0.9 - 0.1 * static_cast<double>(i), {}, {}});
  return c;
}

ModelDims small_dims() {
  ModelDims d;
  d.appearance_dim = 8;
  d.embed_dim = 16;
  d.heads = 2;
  d.gnn_layers = 2;
  d.psi_hidden = {8, 8};
  return d;
}

// Oracle result: always select the candidate at the GT object `uid`, and
// list every GT-consistent match.
SequenceResult oracle_result(const SequenceRecord& seq, int uid) {
  SequenceResult r;
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    FrameResult f;
    f.frame = t;
    f.candidates = frame_candidates(seq.frames[t], seq.meta.appearance_dim);
    for (std::size_t i = 0; i < f.candidates.size(); ++i)
      if (gt_identity(seq.frames[t], f.candidates[i].location) == uid) f.selected = i;
    if (t > 0) {
      const auto& prev = r.frames.back().candidates;
      for (std::size_t i = 0; i < prev.size(); ++i)
        for (std::size_t j = 0; j < f.candidates.size(); ++j) {
          const auto a = gt_identity(seq.frames[t - 1], prev[i].location);
          const auto b = gt_identity(seq.frames[t], f.candidates[j].location);
          if (a && a == b) f.matches.push_back({i, j, 1.0});
        }
    }
    r.frames.push_back(std::move(f));
  }
  return r;
}

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("candtrack_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "candtrack");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("search-area rescaling examples") {
    SearchAreaHistory h;
    for (double a : {400.0, 400.0, 400.0}) h.append(a);
    CHECK(rescale_search_area(h, 200.0, 3) == 400.0);

    SearchAreaHistory low;
    low.append(150.0);
    low.append(180.0);
    CHECK(rescale_search_area(low, 200.0, 2) == 200.0);

    SearchAreaHistory many;
    for (int i = 1; i <= 50; ++i) many.append(1000.0 + i);
    CHECK(rescale_search_area(many, 200.0, 50) == doctest::Approx(1000.0 + (21 + 50) / 2.0));
    CHECK(rescale_search_area(many, 200.0, 80) == rescale_search_area(many, 200.0, 30));
    CHECK(rescale_search_area(many, 200.0, 2) == doctest::Approx(1049.5));

    CHECK(rescale_search_area(SearchAreaHistory{}, 321.0, 5) == 321.0);
    CHECK_THROWS_AS(rescale_search_area(h, 200.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(h.append(0.0), std::invalid_argument);
    CHECK_THROWS_AS(h.append(-3.0), std::invalid_argument);
  }

  TEST_CASE("evaluate: perfect and wrong-object trajectories") {
    const auto seq = generate_sequence(still_world(3), 1);
    const auto good = evaluate(oracle_result(seq, 0), seq);
    CHECK(good.target_accuracy == 1.0);
    CHECK(good.id_switches == 0);
    CHECK(good.association_precision == 1.0);
    CHECK(good.association_recall == 1.0);
    CHECK(good.counts.visible_frames == 20);

    const auto bad = evaluate(oracle_result(seq, 1), seq);
    CHECK(bad.target_accuracy == 0.0);
    CHECK(bad.id_switches == 0);

    auto shorter = oracle_result(seq, 0);
    shorter.frames.pop_back();
    CHECK_THROWS_AS(evaluate(shorter, seq), std::invalid_argument);

    auto broken = oracle_result(seq, 0);
    broken.frames[3].selected = 99;
    CHECK_THROWS_AS(evaluate(broken, seq), FormatError);
  }

  TEST_CASE("evaluate: id switches and redetection latency") {
    const auto seq = generate_sequence(still_world(2, 10), 2);
    auto r = oracle_result(seq, 0);
    // Frames 4-5 on the distractor, frame 6 nothing selected.
    for (std::size_t t : {4u, 5u}) r.frames[t].selected = r.frames[t].selected == 0u ? 1u : 0u;
    r.frames[6].selected.reset();
    const auto m = evaluate(r, seq);
    CHECK(m.id_switches == 2);
    CHECK(m.counts.correct_frames == 7);
    CHECK(m.target_accuracy == doctest::Approx(0.7));
    CHECK(m.counts.redetections == 0);
  }

  TEST_CASE("evaluate: random matching precision is about 1/N") {
    const std::size_t n = 4;
    const auto seq = generate_sequence(still_world(n, 200), 3);
    std::mt19937_64 rng(3);
    auto r = oracle_result(seq, 0);
    for (std::size_t t = 1; t < r.frames.size(); ++t) {
      REQUIRE(r.frames[t].candidates.size() == n);
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      r.frames[t].matches.clear();
      for (std::size_t i = 0; i < n; ++i) r.frames[t].matches.push_back({i, perm[i], 0.5});
    }
    const auto m = evaluate(r, seq);
    CHECK(m.association_precision == doctest::Approx(1.0 / n).epsilon(0.15));
    CHECK(m.association_recall == doctest::Approx(1.0 / n).epsilon(0.15));
  }

  TEST_CASE("aggregate metrics sum counts across sequences") {
    const std::vector<SequenceRecord> seqs = {generate_sequence(still_world(2, 10), 4),
                                              generate_sequence(still_world(2, 30), 5)};
    TrackResults r{"oracle", {oracle_result(seqs[0], 0), oracle_result(seqs[1], 1)}};
    const auto m = evaluate(r, seqs);
    CHECK(m.target_accuracy == doctest::Approx(10.0 / 40.0));
    r.sequences.pop_back();
    CHECK_THROWS_AS(evaluate(r, seqs), std::invalid_argument);
    const auto j = metrics_to_json(m);
    CHECK(j.at("counts").at("visible_frames") == 40);
    CHECK(finalize_metrics(MetricCounts{}).association_precision == 0.0);
  }

  TEST_CASE("shortcut and full association select the same target") {
    const auto seq = generate_sequence(still_world(1, 25), 6);
    ModelParams model = init_model(small_dims(), 6);
    TrackerConfig on, off;
    off.single_candidate_shortcut = false;
    const auto a = track_sequence(seq, model, on);
    const auto b = track_sequence(seq, model, off);
    REQUIRE(a.frames.size() == b.frames.size());
    for (std::size_t t = 0; t < a.frames.size(); ++t) {
      CHECK(a.frames[t].selected == b.frames[t].selected);
      CHECK(a.frames[t].selected.has_value());
      if (t > 0) {
        CHECK(a.frames[t].shortcut);
        CHECK_FALSE(b.frames[t].shortcut);
      }
    }
    CHECK(evaluate(a, seq).target_accuracy == 1.0);
  }

  TEST_CASE("recorded confidence obeys the confidence rule") {
    const auto seq = generate_sequence(SimConfig::crossing(), 7);
    ModelParams model = init_model(small_dims(), 7);
    const auto r = track_sequence(seq, model, TrackerConfig{});
    std::size_t last_memory = 0;
    for (const auto& f : r.frames) {
      CHECK(f.sigma == seq.frames[f.frame].map.max_value());
      CHECK(f.beta == confidence(f.sigma, f.selected_is_initial));
      if (f.selected_is_initial) CHECK(f.selected_id == 0u);
      CHECK(f.memory_size <= 50);
      CHECK(f.memory_size >= last_memory);
      last_memory = f.memory_size;
      for (const auto& m : f.matches) CHECK(m.probability >= 0.0);
    }
    CHECK(r.frames.front().selected_is_initial);
  }

  TEST_CASE("a frame without candidates drops the target, then redetects") {
    auto seq = generate_sequence(still_world(2, 6), 8);
    auto& f = seq.frames[3];
    f.map = ScoreMap(30, 30, std::vector<double>(900, 0.0), 3);
    for (auto& o : f.objects) o.score = 0.0;
    ModelParams model = init_model(small_dims(), 8);
    const auto r = track_sequence(seq, model, TrackerConfig{});
    CHECK(r.frames[3].candidates.empty());
    CHECK_FALSE(r.frames[3].selected.has_value());
    REQUIRE(r.frames[4].selected.has_value());
    CHECK(r.frames[4].selected_id != 0u);
    CHECK_FALSE(r.frames[4].selected_is_initial);
    CHECK(r.frames[4].candidates[*r.frames[4].selected].score >= 0.25);
  }

  TEST_CASE("tracking is deterministic and validates its inputs") {
    const auto seq = generate_sequence(SimConfig::crossing(), 9);
    ModelParams model = init_model(small_dims(), 9);
    const TrackResults a{"learned", {track_sequence(seq, model, TrackerConfig{})}};
    const TrackResults b{"learned", {track_sequence(seq, model, TrackerConfig{})}};
    CHECK(results_to_json(a).dump() == results_to_json(b).dump());

    ModelDims other = small_dims();
    other.appearance_dim = 3;
    ModelParams wrong = init_model(other, 9);
    CHECK_THROWS_AS(track_sequence(seq, wrong, TrackerConfig{}), std::invalid_argument);

    auto hidden = seq;
    for (auto& o : hidden.frames[0].objects) o.score = 0.0;
    CHECK_THROWS_AS(track_sequence(hidden, model, TrackerConfig{}), std::invalid_argument);

    TrackerConfig bad;
    bad.omega = 1.5;
    CHECK_THROWS(track_sequence(seq, model, bad));
  }

  TEST_CASE("greedy tracker mirrors the baseline log") {
    const auto seq = generate_sequence(SimConfig::crossing(), 10);
    const auto r = track_greedy(seq, TrackerConfig{});
    const auto log = greedy_baseline_track(seq, 0.25);
    REQUIRE(r.frames.size() == log.frames.size());
    for (std::size_t t = 0; t < r.frames.size(); ++t) CHECK(r.frames[t].selected == log.frames[t].selected);
  }

  TEST_CASE("results and dataset JSON round trips") {
    const auto seq = generate_sequence(SimConfig::crossing(), 11);
    ModelParams model = init_model(small_dims(), 11);
    const TrackResults r{"learned", {track_sequence(seq, model, TrackerConfig{})}};
    const auto j = results_to_json(r);
    CHECK(results_to_json(results_from_json(j)) == j);

    const auto sj = sequence_to_json(seq);
    const auto back = sequence_from_json(sj);
    CHECK(sequence_to_json(back) == sj);
    CHECK(back.frames[5].target_uid == seq.frames[5].target_uid);

    const auto dir = temp_dir("io");
    write_sequence(seq, dir / "b.json");
    write_sequence(generate_sequence(SimConfig::crossing(), 12), dir / "a.json");
    const auto all = read_sequences(dir);
    REQUIRE(all.size() == 2);
    CHECK(all[0].meta.seed == 12u);
    CHECK(read_sequences(dir / "b.json").size() == 1);
    fs::remove_all(dir);
  }

  TEST_CASE("format errors") {
    CHECK_THROWS_AS(results_from_json(nlohmann::json{{"format", 2}}), FormatError);
    CHECK_THROWS_AS(results_from_json(nlohmann::json::array()), FormatError);
    CHECK_THROWS_AS(sequence_from_json(nlohmann::json{{"meta", 1}}), FormatError);
    CHECK_THROWS_AS(TrackerConfig::from_json(nlohmann::json{{"nope", 1}}), FormatError);
    CHECK_THROWS_AS(TrackerConfig::from_json(nlohmann::json{{"eta", 2.0}}), FormatError);
    const auto cfg = TrackerConfig::from_json(nlohmann::json{{"tau", 0.1}});
    CHECK(cfg.tau == 0.1);
    CHECK(TrackerConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());

    const auto dir = temp_dir("bad");
    std::ofstream(dir / "x.json") << "{not json";
    CHECK_THROWS_AS(read_json_file(dir / "x.json"), FormatError);
    CHECK_THROWS_AS(read_json_file(dir / "missing.json"), FormatError);
    fs::remove_all(dir);
  }

  TEST_CASE("CLI exit codes and end-to-end flow") {
    const auto dir = temp_dir("cli");
    const std::string d = dir.string();
    CHECK(cli({}) == 2);
    CHECK(cli({"frobnicate"}) == 2);
    CHECK(cli({"--help"}) == 0);
    CHECK(cli({"gen", "--out", d + "/data", "--seed", "1", "--sequences", "2", "--frames", "8"}) == 0);
    CHECK(fs::exists(dir / "data" / "seq_00000.json"));
    CHECK(cli({"train", "--data", d + "/data", "--out", d + "/model.json", "--epochs", "1", "--samples-per-epoch",
               "8", "--batch-size", "4", "--embed-dim", "8", "--heads", "2", "--lr", "1e-3"}) == 0);
    CHECK(fs::exists(dir / "model.loss.csv"));
    CHECK(cli({"track", "--model", d + "/model.json", "--data", d + "/data", "--out", d + "/res.json"}) == 0);
    CHECK(cli({"eval", "--results", d + "/res.json", "--gt", d + "/data", "--out", d + "/m.json"}) == 0);
    CHECK(read_json_file(dir / "m.json").contains("target_accuracy"));
    CHECK(cli({"track", "--greedy", "--data", d + "/data", "--out", d + "/g.json"}) == 0);

    std::ofstream(dir / "bad.json") << R"({"omega": 7})";
    CHECK(cli({"track", "--greedy", "--data", d + "/data", "--config", d + "/bad.json", "--out", d + "/x.json"}) == 2);
    CHECK(cli({"track", "--model", d + "/missing.json", "--data", d + "/data", "--out", d + "/x.json"}) == 2);
    CHECK(cli({"eval", "--results", d + "/res.json", "--gt", d + "/data/seq_00000.json", "--out", d + "/x.json"}) == 2);
    CHECK(cli({"gen", "--out", d + "/x", "--preset", "nope"}) == 2);
    fs::remove_all(dir);
  }
}

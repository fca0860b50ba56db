#include <stdexcept>
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "candtrack/training.hpp"

using namespace candtrack;
using dm::Tensor;

namespace {

AssignmentMatrix matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return {Tensor::matrix(rows, cols, std::move(v)), 10};
}

std::vector<Candidate> spread_cands(std::size_t n, std::size_t d_a) {
  std::vector<Candidate> c;
  for (std::size_t i = 0; i < n; ++i) {
    Candidate k;
    k.score = 0.9 - 0.15 * static_cast<double>(i);
    k.location = {5 + 4 * static_cast<int>(i), 3 + 5 * static_cast<int>(i)};
    for (std::size_t a = 0; a < d_a; ++a) k.appearance.push_back(static_cast<double>(i * 10 + a));
    c.push_back(k);
  }
  return c;
}

ModelDims tiny_dims(std::size_t d_a = 4) {
  ModelDims d;
  d.appearance_dim = d_a;
  d.embed_dim = 8;
  d.heads = 2;
  d.gnn_layers = 2;
  d.psi_hidden = {8, 8};
  return d;
}

std::vector<SequenceRecord> small_dataset() {
  SimConfig cfg;
  cfg.frames = 12;
  cfg.appearance_dim = 4;
  std::vector<SequenceRecord> seqs;
  for (std::uint64_t s = 0; s < 4; ++s) seqs.push_back(generate_sequence(cfg, 100 + s));
  return seqs;
}

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.samples_per_epoch = 16;
  cfg.seed = 3;
  cfg.lr = 1e-3;
  cfg.dims = tiny_dims();
  return cfg;
}

TrackerLogFrame log_frame(std::vector<double> scores, std::optional<std::size_t> selected, std::optional<Cell> gt) {
  TrackerLogFrame f;
  for (std::size_t i = 0; i < scores.size(); ++i) f.candidates.push_back({scores[i], {0, 10 * static_cast<int>(i)}, {}, false});
  f.selected = selected;
  f.gt_target = gt;
  return f;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("loss_partial examples") {
    const auto a = matrix(2, 3, {1.0, 0.5, 0.25, 0.0, 0.125, 1.0});
    CHECK(loss_partial(a, {0, 0}).value == 0.0);
    CHECK(loss_partial(a, {0, 1}).value == doctest::Approx(0.6931).epsilon(1e-4));
    CHECK(loss_partial(a, {0, 2}).value == doctest::Approx(1.3863).epsilon(1e-4));
    // Dustbins map to the last row / column.
    CHECK(loss_partial(a, {0, std::nullopt}).value == doctest::Approx(1.3863).epsilon(1e-4));
    CHECK(loss_partial(a, {std::nullopt, 1}).value == doctest::Approx(-std::log(0.125)));
    const auto z = loss_partial(a, {std::nullopt, 0});
    CHECK(z.value == doctest::Approx(-std::log(1e-12)));
    CHECK(z.clamped == 1);
    CHECK_THROWS_AS(loss_partial(a, {5, 0}), std::invalid_argument);
  }

  TEST_CASE("loss_self examples") {
    const auto half = matrix(3, 3, {0.5, 0, 0, 0, 0.5, 0, 0, 0, 1});
    const std::vector<GtPair> c = {{0, 0}, {1, 1}};
    CHECK(loss_self(half, c).value == doctest::Approx(1.3863).epsilon(1e-4));
    const auto ones = matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    CHECK(loss_self(ones, c).value == 0.0);
    CHECK_THROWS_AS(loss_self(ones, {}), std::invalid_argument);
  }

  TEST_CASE("differentiable loss matches the tensor loss and clamps") {
    dm::Tape tape;
    const auto p = Tensor::matrix(2, 2, {0.5, 0.25, 1e-14, 1.0});
    Tensor logp(2, 2);
    for (std::size_t i = 0; i < 4; ++i) logp[i] = std::log(p[i]);
    const auto la = tape.leaf(logp);
    const std::vector<GtPair> c = {{0, 0}, {0, std::nullopt}, {std::nullopt, 0}};
    std::size_t clamped = 0;
    const auto l = loss_self(la, c, &clamped);
    CHECK(l.item() == doctest::Approx(loss_self(AssignmentMatrix{p, 1}, c).value));
    CHECK(clamped == 1);
    tape.backward(l);
    CHECK(la.grad()(0, 0) == -1.0);
    CHECK(la.grad()(0, 1) == -1.0);
    CHECK(la.grad()(1, 0) == 0.0);
  }

  TEST_CASE("validate_sample") {
    std::mt19937_64 rng(1);
    const ScoreMap map(30, 30, std::vector<double>(900, 0.0));
    FramePairSample s;
    s.prev = pad_candidates(spread_cands(2, 2), 5, rng, map, 2);
    s.curr = pad_candidates(spread_cands(3, 2), 5, rng, map, 2);
    s.gt = {{0, 0}, {1, std::nullopt}, {std::nullopt, 2}};
    CHECK_NOTHROW(validate_sample(s));
    s.gt = {{3, 0}};
    CHECK_THROWS_AS(validate_sample(s), std::invalid_argument);  // artificial
    s.gt = {{0, 0}, {0, 1}};
    CHECK_THROWS_AS(validate_sample(s), std::invalid_argument);  // used twice
    s.gt = {{7, 0}};
    CHECK_THROWS_AS(validate_sample(s), std::invalid_argument);
    s.gt = {{std::nullopt, std::nullopt}};
    CHECK_THROWS_AS(validate_sample(s), std::invalid_argument);
  }

  TEST_CASE("synthetic pair without augmentation is the identity") {
    std::mt19937_64 rng(2);
    const ScoreMap map(30, 30, std::vector<double>(900, 0.0));
    AugmentConfig aug{0.0, 0.0, 0.0, 0.0, 5};
    const auto cands = spread_cands(4, 3);
    const auto s = make_synthetic_pair(cands, map, 3, rng, aug);
    validate_sample(s);
    REQUIRE(s.gt.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(s.gt[i] == GtPair{i, i});
      CHECK(s.prev.candidates[i].location == s.curr.candidates[i].location);
      CHECK(s.prev.candidates[i].appearance == s.curr.candidates[i].appearance);
    }
    CHECK(s.prev.candidates.size() == 5);
    CHECK_FALSE(s.prev.valid[4]);
    CHECK(s.kind == PairKind::Synthetic);
    CHECK_THROWS_AS(make_synthetic_pair({}, map, 3, rng, aug), std::invalid_argument);
  }

  TEST_CASE("synthetic removals become dustbin pairs") {
    const ScoreMap map(30, 30, std::vector<double>(900, 0.0));
    AugmentConfig aug{0.0, 0.0, 0.0, 1.0, 5};
    std::size_t dust_curr = 0, dust_prev = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      std::mt19937_64 rng(seed);
      const auto cands = spread_cands(4, 3);
      const auto s = make_synthetic_pair(cands, map, 3, rng, aug);
      validate_sample(s);
      for (const auto& p : s.gt) {
        // Appearance identifies the original candidate.
        if (p.prev && p.curr) {
          CHECK(s.prev.candidates[*p.prev].appearance == s.curr.candidates[*p.curr].appearance);
        } else if (p.prev) {
          ++dust_curr;
          for (std::size_t j = 0; j < s.curr.candidates.size(); ++j)
            if (s.curr.valid[j]) CHECK(s.curr.candidates[j].appearance != s.prev.candidates[*p.prev].appearance);
        } else {
          ++dust_prev;
        }
      }
    }
    CHECK(dust_curr > 0);
    CHECK(dust_prev > 0);
    // A single candidate is never removed.
    std::mt19937_64 rng(9);
    const auto one = make_synthetic_pair(spread_cands(1, 3), map, 3, rng, aug);
    CHECK(one.gt == std::vector<GtPair>{{0, 0}});
  }

  TEST_CASE("synthetic jitter stays within bounds") {
    const ScoreMap map(30, 30, std::vector<double>(900, 0.0));
    AugmentConfig aug{2.0, 0.2, 0.05, 0.0, 5};
    bool moved = false;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed);
      const auto s = make_synthetic_pair(spread_cands(4, 3), map, 3, rng, aug);
      validate_sample(s);
      for (const auto& p : s.gt) {
        REQUIRE(p.prev);
        REQUIRE(p.curr);
        const auto& a = s.prev.candidates[*p.prev];
        const auto& b = s.curr.candidates[*p.curr];
        CHECK(std::abs(a.location.row - b.location.row) <= 2);
        CHECK(std::abs(a.location.col - b.location.col) <= 2);
        CHECK(b.score >= 0.8 * a.score - 1e-12);
        CHECK(b.score <= std::min(1.0, 1.2 * a.score) + 1e-12);
        moved = moved || !(a.location == b.location);
      }
    }
    CHECK(moved);
  }

  TEST_CASE("mining examples") {
    TrackerLog log;
    log.frames.push_back(log_frame({0.8}, 0, Cell{0, 0}));                      // D
    log.frames.push_back(log_frame({0.3, 0.8, 0.5}, 1, Cell{0, 10}));          // H
    log.frames.push_back(log_frame({0.3, 0.8, 0.5}, 1, Cell{0, 20}));          // K
    log.frames.push_back(log_frame({0.2, 0.1}, std::nullopt, Cell{0, 0}));     // G
    log.frames.push_back(log_frame({0.3, 0.8}, 1, Cell{15, 15}));              // J
    log.frames.push_back(log_frame({0.8}, 0, Cell{15, 15}));                   // single, wrong
    log.frames.push_back(log_frame({}, std::nullopt, Cell{0, 0}));             // empty
    log.frames.push_back(log_frame({0.3, 0.8}, 1, std::nullopt));              // target invisible
    const auto cats = mine_categories(log);
    const std::vector<MiningCategory> want = {MiningCategory::D, MiningCategory::H,     MiningCategory::K,
                                              MiningCategory::G, MiningCategory::J,     MiningCategory::OTHER,
                                              MiningCategory::OTHER, MiningCategory::J};
    CHECK(cats == want);
    CHECK(std::string(category_name(MiningCategory::K)) == "K");
  }

  TEST_CASE("pool sampler frequencies follow the weights") {
    const WeightedPoolSampler s({10.0, 1.0, 1.0}, {50, 3, 7});
    std::mt19937_64 rng(4);
    std::map<std::size_t, int> counts;
    for (int i = 0; i < 10000; ++i) {
      const auto [pool, item] = s.draw(rng);
      ++counts[pool];
      CHECK(item < std::vector<std::size_t>{50, 3, 7}[pool]);
    }
    CHECK(std::abs(counts[0] / 1e4 - 10.0 / 12.0) < 0.02);
    CHECK(std::abs(counts[1] / 1e4 - 1.0 / 12.0) < 0.02);
    CHECK(std::abs(counts[2] / 1e4 - 1.0 / 12.0) < 0.02);

    const WeightedPoolSampler skip({2.0, 1.0, 1.0}, {4, 0, 4});
    counts.clear();
    for (int i = 0; i < 10000; ++i) ++counts[skip.draw(rng).first];
    CHECK(counts[1] == 0);
    CHECK(std::abs(counts[0] / 1e4 - 2.0 / 3.0) < 0.02);

    const WeightedPoolSampler none({1.0}, {0});
    CHECK(none.empty());
    CHECK_THROWS(none.draw(rng));
    CHECK_THROWS_AS(WeightedPoolSampler({1.0}, {1, 2}), std::invalid_argument);
    CHECK_THROWS_AS(WeightedPoolSampler({-1.0}, {1}), std::invalid_argument);
  }

  TEST_CASE("sample source mixes real and synthetic pairs") {
    const auto seqs = small_dataset();
    const auto cfg = tiny_train_config();
    const SampleSource src(seqs, cfg);
    std::mt19937_64 rng(5);
    int real = 0;
    for (int i = 0; i < 400; ++i) {
      const auto s = src.draw(rng);
      validate_sample(s);
      CHECK(s.prev.candidates.size() == 5);
      CHECK(s.curr.candidates.size() == 5);
      if (s.kind == PairKind::Real) {
        ++real;
        CHECK(s.gt.size() == 1);
      }
    }
    if (!src.pools().real_hh.empty() && !src.pools().synth_h.empty()) CHECK(std::abs(real / 400.0 - 0.5) < 0.1);
  }

  TEST_CASE("lr = 0 leaves learnable parameters unchanged") {
    const auto seqs = small_dataset();
    auto cfg = tiny_train_config();
    cfg.lr = 0.0;
    const auto r = train(seqs, cfg);
    const auto fresh = init_model(cfg.dims, cfg.seed);
    CHECK(r.params.learnable() == fresh.learnable());
    CHECK(r.curve.size() == 2);
  }

  TEST_CASE("training is deterministic and reduces the loss") {
    const auto seqs = small_dataset();
    auto cfg = tiny_train_config();
    const auto a = train(seqs, cfg);
    const auto b = train(seqs, cfg);
    REQUIRE(a.curve.size() == b.curve.size());
    for (std::size_t e = 0; e < a.curve.size(); ++e) {
      CHECK(a.curve[e].mean_loss == b.curve[e].mean_loss);
      CHECK(a.curve[e].lr == b.curve[e].lr);
    }
    CHECK(a.params.learnable() == b.params.learnable());
    CHECK(a.params.buffers() == b.params.buffers());
    CHECK_FALSE(a.params.learnable() == init_model(cfg.dims, cfg.seed).learnable());
  }

  TEST_CASE("learning-rate schedule") {
    const auto seqs = small_dataset();
    auto cfg = tiny_train_config();
    cfg.epochs = 5;
    cfg.samples_per_epoch = 4;
    cfg.decay_every = 2;
    const auto r = train(seqs, cfg);
    CHECK(r.curve[0].lr == 1e-3);
    CHECK(r.curve[1].lr == 1e-3);
    CHECK(r.curve[2].lr == doctest::Approx(2e-4));
    CHECK(r.curve[4].lr == doctest::Approx(4e-5));
  }

  TEST_CASE("train rejects bad inputs") {
    const auto seqs = small_dataset();
    auto cfg = tiny_train_config();
    cfg.dims.appearance_dim = 5;
    CHECK_THROWS_AS(train(seqs, cfg), std::invalid_argument);
    cfg = tiny_train_config();
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train(seqs, cfg), std::invalid_argument);
    CHECK_THROWS_AS(train({}, tiny_train_config()), std::invalid_argument);
  }

  TEST_CASE("single-sample overfit") {
    ModelDims d;
    d.appearance_dim = 8;
    d.embed_dim = 16;
    ModelParams p = init_model(d, 0);
    std::mt19937_64 rng(0);
    const auto batch = random_batch(rng, 8, 3, 5);
    const std::vector<FramePairSample> one = {batch[0]};
    REQUIRE(one[0].gt.size() == 1);
    Adam opt;
    double loss = 0.0;
    for (int s = 0; s < 200; ++s) loss = train_step(p, opt, one, 1e-3, kDefaultSinkhornIterations);
    CHECK(loss < 0.05);
  }

  TEST_CASE("random batch structure") {
    std::mt19937_64 rng(6);
    const auto b = random_batch(rng, 4, 3, 5);
    REQUIRE(b.size() == 2);
    for (const auto& s : b) {
      validate_sample(s);
      CHECK(s.prev.candidates.size() >= 3);
      CHECK(s.prev.candidates.size() <= 5);
    }
    CHECK(b[0].kind == PairKind::Real);
    CHECK(b[1].kind == PairKind::Synthetic);
    CHECK_THROWS_AS(random_batch(rng, 4, 0, 3), std::invalid_argument);
  }

  TEST_CASE("L_tot gradient through the whole model (tiny, fine step)") {
    // Fine steps keep the central difference away from ReLU kinks.
    const auto rep = check_loss_gradients(tiny_dims(), 1, 1e-6);
    CHECK(rep.entries > 0);
    CHECK(rep.max_rel_error < 1e-4);
  }

  TEST_CASE("loss curve CSV") {
    const auto path = std::filesystem::temp_directory_path() / "candtrack_curve_test.csv";
    write_loss_curve({{1, 0.5, 1e-4, 0}, {2, 0.25, 1e-4, 3}}, path);
    std::ifstream in(path);
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    CHECK(header == "epoch,mean_loss,lr,clamped");
    CHECK(first.rfind("1,0.5,", 0) == 0);
    std::filesystem::remove(path);
  }
}

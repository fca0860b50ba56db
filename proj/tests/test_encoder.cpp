#include <stdexcept>
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "candtrack/encoder.hpp"

using namespace candtrack;

namespace {

ModelDims small_dims(std::size_t d_a = 4, std::size_t d = 8) {
  ModelDims dims;
  dims.appearance_dim = d_a;
  dims.embed_dim = d;
  dims.heads = 2;
  dims.gnn_layers = 2;
  dims.psi_hidden = {5, 6};
  return dims;
}

std::vector<Candidate> random_cands(std::mt19937_64& rng, std::size_t n, std::size_t d_a, MapDims md) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<int> row(0, static_cast<int>(md.height) - 1), col(0, static_cast<int>(md.width) - 1);
  std::vector<Candidate> c(n);
  for (auto& x : c) {
    x.score = (u(rng) + 1.0) / 2.0;
    x.location = {row(rng), col(rng)};
    for (std::size_t k = 0; k < d_a; ++k) x.appearance.push_back(u(rng));
  }
  return c;
}

void randomize_buffers(ModelParams& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.2, 1.5);
  for (auto& [name, t] : p.buffers())
    for (double& v : t.data()) v = name.ends_with("running_var") ? u(rng) : u(rng) - 0.8;
}

dm::Tensor run(ModelParams& p, const std::vector<Candidate>& c, MapDims md, dm::Mode mode) {
  dm::Tape tape;
  Bound b(tape, p, false);
  return encode_candidates(b, c, md, mode).value();
}

// Straight-line reference of the encoder forward pass.
std::vector<std::vector<double>> reference(const ModelParams& p, const std::vector<Candidate>& c, MapDims md,
                                           bool train) {
  const ModelDims& dims = p.dims();
  auto lin = [&](const std::vector<std::vector<double>>& x, const std::string& name) {
    const auto& w = p.tensor(name + ".weight");
    const auto& b = p.tensor(name + ".bias");
    std::vector<std::vector<double>> y(x.size(), std::vector<double>(w.cols()));
    for (std::size_t n = 0; n < x.size(); ++n)
      for (std::size_t j = 0; j < w.cols(); ++j) {
        double s = b[j];
        for (std::size_t i = 0; i < w.rows(); ++i) s += x[n][i] * w(i, j);
        y[n][j] = s;
      }
    return y;
  };
  std::vector<std::vector<double>> x;
  for (const auto& k : c) {
    x.push_back({k.score, static_cast<double>(k.location.row) / static_cast<double>(md.height),
                 static_cast<double>(k.location.col) / static_cast<double>(md.width)});
  }
  for (std::size_t l = 0; l < dims.psi_hidden.size(); ++l) {
    const std::string pre = "encoder.psi." + std::to_string(l);
    x = lin(x, pre);
    const auto& g = p.tensor(pre + ".bn.gamma");
    const auto& be = p.tensor(pre + ".bn.beta");
    for (std::size_t j = 0; j < x[0].size(); ++j) {
      double mean = p.tensor(pre + ".bn.running_mean")[j], var = p.tensor(pre + ".bn.running_var")[j];
      if (train) {
        mean = 0.0;
        for (const auto& r : x) mean += r[j];
        mean /= static_cast<double>(x.size());
        var = 0.0;
        for (const auto& r : x) var += (r[j] - mean) * (r[j] - mean);
        var /= static_cast<double>(x.size());
      }
      for (auto& r : x) r[j] = std::max(0.0, g[j] * (r[j] - mean) / std::sqrt(var + 1e-5) + be[j]);
    }
  }
  auto psi = lin(x, "encoder.psi." + std::to_string(dims.psi_hidden.size()));
  std::vector<std::vector<double>> app;
  for (const auto& k : c) app.push_back(k.appearance);
  auto f = lin(app, "encoder.appearance");
  for (std::size_t n = 0; n < f.size(); ++n)
    for (std::size_t j = 0; j < f[n].size(); ++j) f[n][j] += psi[n][j];
  return f;
}

}  // namespace

TEST_SUITE("encoder") {
  TEST_CASE("geometry rows are (score, row/H, col/W) within [0,1)") {
    const std::vector<Candidate> c = {{0.7, {0, 0}, {}, false}, {0.3, {29, 14}, {}, false}};
    const auto g = candidate_geometry(c, {30, 15});
    CHECK(g(0, 0) == 0.7);
    CHECK(g(1, 1) == doctest::Approx(29.0 / 30.0));
    CHECK(g(1, 2) == doctest::Approx(14.0 / 15.0));
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t k = 1; k < 3; ++k) {
        CHECK(g(r, k) >= 0.0);
        CHECK(g(r, k) < 1.0);
      }
    const std::vector<Candidate> bad = {{0.5, {30, 0}, {}, false}};
    CHECK_THROWS_AS(candidate_geometry(bad, {30, 15}), std::invalid_argument);
  }

  TEST_CASE("zero parameters give zero encodings") {
    ModelParams p = init_model(small_dims(), 1);
    for (auto& [name, t] : p.learnable())
      if (name.ends_with(".weight") || name.ends_with(".bias")) std::fill(t.data().begin(), t.data().end(), 0.0);
    std::mt19937_64 rng(1);
    const auto c = random_cands(rng, 3, 4, {30, 30});
    for (auto mode : {dm::Mode::Infer, dm::Mode::Train}) {
      const auto z = run(p, c, {30, 30}, mode);
      for (double v : z.data()) CHECK(v == 0.0);
    }
  }

  TEST_CASE("identity projection with zero psi passes appearance through") {
    ModelParams p = init_model(small_dims(8, 8), 2);
    for (auto& [name, t] : p.learnable())
      if (name.starts_with("encoder.psi.") && (name.ends_with(".weight") || name.ends_with(".bias")))
        std::fill(t.data().begin(), t.data().end(), 0.0);
    auto& w = p.tensor("encoder.appearance.weight");
    std::fill(w.data().begin(), w.data().end(), 0.0);
    for (std::size_t i = 0; i < 8; ++i) w(i, i) = 1.0;
    auto& b = p.tensor("encoder.appearance.bias");
    std::fill(b.data().begin(), b.data().end(), 0.0);
    std::mt19937_64 rng(2);
    const auto c = random_cands(rng, 4, 8, {30, 30});
    const auto z = run(p, c, {30, 30}, dm::Mode::Infer);
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t k = 0; k < 8; ++k) CHECK(z(n, k) == doctest::Approx(c[n].appearance[k]));
  }

  TEST_CASE("matches a straight-line reference in both modes") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 5; ++trial) {
      ModelParams p = init_model(small_dims(), 10 + trial);
      randomize_buffers(p, rng);
      const auto c = random_cands(rng, 3, 4, {30, 20});
      for (bool train : {false, true}) {
        ModelParams copy = p;
        const auto z = run(copy, c, {30, 20}, train ? dm::Mode::Train : dm::Mode::Infer);
        const auto want = reference(p, c, {30, 20}, train);
        for (std::size_t n = 0; n < 3; ++n)
          for (std::size_t k = 0; k < 8; ++k) CHECK(z(n, k) == doctest::Approx(want[n][k]).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("appearance and geometry branches are additive in infer mode") {
    std::mt19937_64 rng(4);
    ModelParams p = init_model(small_dims(), 4);
    randomize_buffers(p, rng);
    const auto c = random_cands(rng, 5, 4, {30, 30});
    ModelParams app_only = p, geo_only = p;
    const std::string last = "encoder.psi." + std::to_string(p.dims().psi_hidden.size());
    for (const char* s : {".weight", ".bias"}) {
      auto& a = app_only.tensor(last + s);
      std::fill(a.data().begin(), a.data().end(), 0.0);
      auto& g = geo_only.tensor(std::string("encoder.appearance") + s);
      std::fill(g.data().begin(), g.data().end(), 0.0);
    }
    const auto both = run(p, c, {30, 30}, dm::Mode::Infer);
    const auto za = run(app_only, c, {30, 30}, dm::Mode::Infer);
    const auto zg = run(geo_only, c, {30, 30}, dm::Mode::Infer);
    for (std::size_t i = 0; i < both.size(); ++i) CHECK(both[i] == doctest::Approx(za[i] + zg[i]).epsilon(1e-12));
  }

  TEST_CASE("train mode updates running statistics, infer mode does not") {
    std::mt19937_64 rng(5);
    ModelParams p = init_model(small_dims(), 5);
    const auto c = random_cands(rng, 4, 4, {30, 30});
    const auto before = p.buffers();
    run(p, c, {30, 30}, dm::Mode::Infer);
    CHECK(p.buffers() == before);
    run(p, c, {30, 30}, dm::Mode::Train);
    CHECK_FALSE(p.buffers() == before);
  }

  TEST_CASE("input validation") {
    ModelParams p = init_model(small_dims(), 6);
    std::mt19937_64 rng(6);
    CHECK_THROWS_AS(run(p, {}, {30, 30}, dm::Mode::Infer), std::invalid_argument);
    auto c = random_cands(rng, 2, 3, {30, 30});
    CHECK_THROWS_AS(run(p, c, {30, 30}, dm::Mode::Infer), std::invalid_argument);
  }

  TEST_CASE("detached wrapper keeps source references") {
    ModelParams p = init_model(small_dims(), 7);
    std::mt19937_64 rng(7);
    const auto c = random_cands(rng, 3, 4, {30, 30});
    const auto enc = encode_candidates(p, c, {30, 30});
    REQUIRE(enc.size() == 3);
    const auto z = run(p, c, {30, 30}, dm::Mode::Infer);
    for (std::size_t n = 0; n < 3; ++n) {
      CHECK(enc[n].source == &c[n]);
      CHECK(enc[n].z.size() == 8);
      for (std::size_t k = 0; k < 8; ++k) CHECK(enc[n].z[k] == z(n, k));
    }
  }
}

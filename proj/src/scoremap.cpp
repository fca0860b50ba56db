#include "candtrack/scoremap.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace candtrack {

double cell_distance(Cell a, Cell b) {
  const double dr = a.row - b.row;
  const double dc = a.col - b.col;
  return std::sqrt(dr * dr + dc * dc);
}

ScoreMap::ScoreMap(std::size_t height, std::size_t width, std::vector<double> values,
                   std::size_t frame_index)
    : height_(height), width_(width), frame_index_(frame_index), values_(std::move(values)) {
  if (values_.size() != height_ * width_) {
    throw std::invalid_argument("score map has " + std::to_string(values_.size()) +
                                " values, expected " + std::to_string(height_ * width_));
  }
  for (double& v : values_) {
    if (!std::isfinite(v)) throw std::invalid_argument("score map contains a non-finite value");
    v = std::clamp(v, 0.0, 1.0);
  }
}

bool ScoreMap::contains(Cell c) const {
  return c.row >= 0 && c.col >= 0 && static_cast<std::size_t>(c.row) < height_ &&
         static_cast<std::size_t>(c.col) < width_;
}

double ScoreMap::max_value() const {
  if (values_.empty()) return 0.0;
  return *std::max_element(values_.begin(), values_.end());
}

std::vector<Candidate> extract_candidates(const ScoreMap& map, double tau, int neighborhood) {
  if (tau < 0.0) throw std::invalid_argument("tau must be non-negative");
  if (neighborhood < 3 || neighborhood % 2 == 0) {
    throw std::invalid_argument("neighborhood must be odd and >= 3");
  }
  std::vector<Candidate> out;
  if (map.empty()) return out;

  const int h = static_cast<int>(map.height());
  const int w = static_cast<int>(map.width());
  const int r = neighborhood / 2;

  // Separable max filter: horizontal pass then vertical pass.
  std::vector<double> horiz(map.values().size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double m = map.at(y, x);
      for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) m = std::max(m, map.at(y, xx));
      horiz[y * w + x] = m;
    }
  }

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double v = map.at(y, x);
      if (v < tau) continue;
      double m = v;
      for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy) m = std::max(m, horiz[yy * w + x]);
      if (v < m) continue;

      // Plateau: an equal cell earlier in row-major order inside the window wins.
      bool shadowed = false;
      for (int yy = std::max(0, y - r); yy <= y && !shadowed; ++yy) {
        const int x_end = yy < y ? std::min(w - 1, x + r) : x - 1;
        for (int xx = std::max(0, x - r); xx <= x_end; ++xx) {
          if (map.at(yy, xx) == v) {
            shadowed = true;
            break;
          }
        }
      }
      if (shadowed) continue;
      out.push_back(Candidate{v, Cell{y, x}, {}, false});
    }
  }

  // Cells were visited row-major, so a stable sort keeps row-major tie order.
  std::stable_sort(out.begin(), out.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  return out;
}

PaddedCandidates pad_candidates(std::span<const Candidate> cands, std::size_t target_count,
                                std::mt19937_64& rng, const ScoreMap& map,
                                std::size_t appearance_dim) {
  if (target_count == 0) throw std::invalid_argument("target_count must be positive");
  if (target_count > map.height() * map.width()) {
    throw std::invalid_argument("target_count exceeds the number of map cells");
  }

  PaddedCandidates out;
  out.candidates.assign(cands.begin(), cands.end());
  std::stable_sort(out.candidates.begin(), out.candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  if (out.candidates.size() > target_count) out.candidates.resize(target_count);
  out.valid.assign(out.candidates.size(), true);

  std::vector<bool> occupied(map.height() * map.width(), false);
  for (const auto& c : out.candidates) {
    if (map.contains(c.location)) occupied[c.location.row * map.width() + c.location.col] = true;
  }
  std::uniform_int_distribution<std::size_t> pick(0, map.height() * map.width() - 1);
  while (out.candidates.size() < target_count) {
    std::size_t idx = pick(rng);
    while (occupied[idx]) idx = pick(rng);
    occupied[idx] = true;
    Candidate a;
    a.score = kArtificialScore;
    a.location = Cell{static_cast<int>(idx / map.width()), static_cast<int>(idx % map.width())};
    a.appearance.assign(appearance_dim, 0.0);
    a.is_artificial = true;
    out.candidates.push_back(std::move(a));
    out.valid.push_back(false);
  }
  return out;
}

}  // namespace candtrack

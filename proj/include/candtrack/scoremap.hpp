#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace candtrack {

struct Cell {
  int row = 0;
  int col = 0;

  friend bool operator==(const Cell&, const Cell&) = default;
};

double cell_distance(Cell a, Cell b);

struct MapDims {
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Per-frame target-classifier score map. Values are clamped to [0,1] on
/// construction; NaN or infinite entries are rejected.
class ScoreMap {
 public:
  ScoreMap() = default;
  ScoreMap(std::size_t height, std::size_t width, std::vector<double> values,
           std::size_t frame_index = 0);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  MapDims dims() const { return {height_, width_}; }
  std::size_t frame_index() const { return frame_index_; }
  bool empty() const { return values_.empty(); }
  bool contains(Cell c) const;

  double at(std::size_t row, std::size_t col) const { return values_[row * width_ + col]; }
  double at(Cell c) const { return at(static_cast<std::size_t>(c.row), static_cast<std::size_t>(c.col)); }
  std::span<const double> values() const { return values_; }
  double max_value() const;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t frame_index_ = 0;
  std::vector<double> values_;
};

struct Candidate {
  double score = 0.0;
  Cell location;
  std::vector<double> appearance;
  bool is_artificial = false;
};

inline constexpr double kDefaultTau = 0.05;
inline constexpr double kArtificialScore = 0.01;

// Local maxima of `map` over a `neighborhood`×`neighborhood` window (clipped at
// the borders) with score >= tau. On plateaus only the first cell in row-major
// order survives. Sorted by descending score, ties row-major. Appearance vectors
// are left empty; callers attach them from their feature source.
std::vector<Candidate> extract_candidates(const ScoreMap& map, double tau = kDefaultTau,
                                          int neighborhood = 5);

struct PaddedCandidates {
  std::vector<Candidate> candidates;
  std::vector<bool> valid;
};

// Keeps the `target_count` highest-scoring candidates, or appends artificial
// ones at random unoccupied cells (score 0.01, zero appearance of
// `appearance_dim`) until there are exactly `target_count`.
PaddedCandidates pad_candidates(std::span<const Candidate> cands, std::size_t target_count,
                                std::mt19937_64& rng, const ScoreMap& map,
                                std::size_t appearance_dim);

}  // namespace candtrack

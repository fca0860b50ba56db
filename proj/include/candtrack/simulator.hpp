#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "candtrack/scoremap.hpp"

namespace candtrack {

inline constexpr double kBumpSigma = 1.2;
inline constexpr double kScoreQuantum = 1e-4;

enum class Scenario { Random, Crossing };

// Fully specified initial state; used for scripted test scenes.
struct ScriptedObject {
  double row = 0.0;
  double col = 0.0;
  double vrow = 0.0;
  double vcol = 0.0;
  double amplitude = 0.8;
  std::optional<double> amplitude_end;  // linear ramp over the sequence
  std::vector<double> appearance;       // empty: random unit vector
};

struct SimConfig {
  std::size_t height = 30;
  std::size_t width = 30;
  std::size_t frames = 60;
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  double initial_speed = 0.5;        // cells/frame, upper bound at spawn
  double max_speed = 0.8;
  double motion_std = 0.05;          // velocity perturbation per frame
  double noise_std = 0.01;           // additive score-map noise
  double appearance_noise_std = 0.05;
  std::size_t appearance_dim = 8;
  double occlusion_radius = 4.0;
  double amplitude_min = 0.3;
  double amplitude_max = 1.0;
  double amplitude_jitter = 0.05;    // per-frame std of the rendered peak height
  double drift_angle = 0.02;         // max appearance rotation per frame (rad)
  double enter_prob = 0.02;
  double leave_prob = 0.01;
  Scenario scenario = Scenario::Random;
  // Crossing scenario: every distractor's path crosses the target's.
  double target_amplitude = 0.85;
  double distractor_amplitude_min = 0.6;
  double distractor_amplitude_max = 0.8;
  std::vector<ScriptedObject> scripted;  // non-empty: replaces random spawning

  void validate() const;
  static SimConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  // Preset used for the held-out crossing-distractor suite.
  static SimConfig crossing();
};

struct GtObject {
  int uid = 0;
  Cell cell;
  double score = 0.0;  // rendered peak height; 0 when occluded
  std::vector<double> appearance;
};

struct SimEvent {
  std::string kind;  // "enter", "leave", "occlude"
  int uid = 0;
  friend bool operator==(const SimEvent&, const SimEvent&) = default;
};

struct SequenceFrame {
  ScoreMap map;
  std::vector<GtObject> objects;
  int target_uid = 0;
  std::vector<SimEvent> events;

  // The designated target's GT entry when it renders a peak this frame.
  const GtObject* visible_target() const;
};

struct SequenceMeta {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t appearance_dim = 0;
  std::size_t frames = 0;
  std::uint64_t seed = 0;
};

struct SequenceRecord {
  SequenceMeta meta;
  std::vector<SequenceFrame> frames;
};

SequenceRecord generate_sequence(const SimConfig& config, std::uint64_t seed);

// Appearance observed at `cell`: the observed vector of the visible object
// with the strongest rendered contribution there, zeros if none contributes.
std::vector<double> appearance_at(const SequenceFrame& frame, Cell cell, std::size_t appearance_dim);

// extract_candidates plus appearance vectors.
std::vector<Candidate> frame_candidates(const SequenceFrame& frame, std::size_t appearance_dim,
                                        double tau = kDefaultTau);

// GT uid of the visible object within `radius` cells of `cell` (nearest wins).
std::optional<int> gt_identity(const SequenceFrame& frame, Cell cell, double radius = 2.0);

struct TrackerLogFrame {
  std::vector<Candidate> candidates;
  std::optional<std::size_t> selected;
  std::optional<Cell> gt_target;
};

struct TrackerLog {
  std::vector<TrackerLogFrame> frames;
};

// Per frame: select the highest-scoring candidate when its score reaches eta.
TrackerLog greedy_baseline_track(const SequenceRecord& seq, double eta, double tau = kDefaultTau);

}  // namespace candtrack

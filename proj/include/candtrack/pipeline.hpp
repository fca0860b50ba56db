#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "candtrack/association.hpp"
#include "candtrack/matcher.hpp"
#include "candtrack/memory.hpp"
#include "candtrack/model.hpp"
#include "candtrack/scoremap.hpp"
#include "candtrack/simulator.hpp"

namespace candtrack {

struct TrackerConfig {
  double tau = kDefaultTau;  // 0.1 for the fast variant
  double omega = kDefaultOmega;
  double eta = kDefaultEta;
  int sinkhorn_iterations = kDefaultSinkhornIterations;
  double confidence_floor = kDefaultConfidenceFloor;
  double gamma = 0.01;
  std::size_t memory_capacity = 50;
  double memory_lambda = 0.1;
  bool single_candidate_shortcut = true;

  void validate() const;
  // Unknown keys and out-of-range values raise FormatError.
  static TrackerConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Soft assignment between two frames' encodings (rows of z_prev / z_curr).
AssignmentMatrix predict_assignment(ModelParams& params, const dm::Tensor& z_prev, const dm::Tensor& z_curr,
                                    int iterations);

struct MatchRecord {
  std::size_t prev = 0;
  std::size_t curr = 0;
  double probability = 0.0;
};

struct FrameResult {
  std::size_t frame = 0;
  std::vector<Candidate> candidates;
  std::vector<ObjectId> object_ids;
  std::vector<MatchRecord> matches;  // mutual matches between consecutive frames
  std::optional<std::size_t> selected;
  std::optional<ObjectId> selected_id;
  bool selected_is_initial = false;
  double sigma = 0.0;
  double beta = 0.0;
  bool shortcut = false;
  std::size_t memory_size = 0;
};

struct SequenceResult {
  std::uint64_t seed = 0;
  std::vector<FrameResult> frames;
};

struct TrackResults {
  std::string tracker;  // "learned" or "greedy"
  std::vector<SequenceResult> sequences;
};

// Runs the association tracker over a sequence. The first frame's visible GT
// target initializes the object database.
SequenceResult track_sequence(const SequenceRecord& seq, ModelParams& model, const TrackerConfig& cfg);

// Greedy max-score selection in the same results layout.
SequenceResult track_greedy(const SequenceRecord& seq, const TrackerConfig& cfg);

nlohmann::json results_to_json(const TrackResults& r);
TrackResults results_from_json(const nlohmann::json& j);

struct SearchAreaHistory {
  std::vector<double> areas;
  std::size_t frames_since_loss = 0;

  // Throws std::invalid_argument on a non-positive area.
  void append(double area);
};

inline constexpr std::size_t kMaxSearchAreaWindow = 30;

// Mean of the last min(k, 30) history entries larger than `area_at_loss`;
// `area_at_loss` when none qualify.
double rescale_search_area(const SearchAreaHistory& history, double area_at_loss, std::size_t k);

// Counts behind the metrics; summed across sequences before the ratios are taken.
struct MetricCounts {
  std::size_t visible_frames = 0;
  std::size_t correct_frames = 0;
  std::size_t id_switches = 0;
  std::size_t listed_matches = 0;
  std::size_t correct_matches = 0;
  std::size_t gt_matches = 0;
  std::size_t recalled_matches = 0;
  std::size_t redetections = 0;
  std::size_t redetection_frames = 0;

  MetricCounts& operator+=(const MetricCounts& o);
};

struct Metrics {
  double target_accuracy = 0.0;
  std::size_t id_switches = 0;
  double association_precision = 0.0;
  double association_recall = 0.0;
  double redetection_latency = 0.0;
  MetricCounts counts;
};

Metrics finalize_metrics(const MetricCounts& c);

inline constexpr double kEvalRadius = 2.0;

// Throws std::invalid_argument when the frame counts differ.
MetricCounts evaluate_counts(const SequenceResult& result, const SequenceRecord& seq);
Metrics evaluate(const SequenceResult& result, const SequenceRecord& seq);
Metrics evaluate(const TrackResults& results, std::span<const SequenceRecord> seqs);

nlohmann::json metrics_to_json(const Metrics& m);

}  // namespace candtrack

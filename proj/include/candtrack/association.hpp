#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "candtrack/matcher.hpp"
#include "candtrack/scoremap.hpp"

namespace candtrack {

using ObjectId = std::uint64_t;

inline constexpr double kDefaultOmega = 0.75;
inline constexpr double kDefaultEta = 0.25;
inline constexpr double kInitMatchRadius = 2.0;

struct TrackedObject {
  ObjectId id = 0;
  std::vector<double> score_history;

  double max_score() const;
  double current_score() const { return score_history.back(); }
};

/// Objects visible in the current frame, index-aligned with its candidates.
class ObjectDatabase {
 public:
  const std::vector<TrackedObject>& objects() const { return objects_; }
  std::optional<ObjectId> selected_target() const { return selected_; }
  ObjectId initial_target_id() const { return initial_; }
  ObjectId next_id() const { return next_id_; }

  // Index of the selected object in objects(), if any.
  std::optional<std::size_t> selected_index() const;
  bool selected_is_initial() const { return selected_ && *selected_ == initial_; }

 private:
  friend ObjectDatabase init_database(std::span<const Candidate>, Cell, double);
  friend ObjectDatabase associate_frame(const ObjectDatabase&, std::span<const Candidate>, const MatchSet&,
                                        double, double);

  std::vector<TrackedObject> objects_;
  std::optional<ObjectId> selected_;
  ObjectId initial_ = 0;
  ObjectId next_id_ = 0;
};

// One object per candidate; the candidate nearest `ground_truth` (within
// `max_distance` cells) becomes the selected and initial target.
ObjectDatabase init_database(std::span<const Candidate> cands, Cell ground_truth,
                             double max_distance = kInitMatchRadius);

// Candidate-to-object association and target selection / redetection for one
// frame. `matches.prev` must align with `previous.objects()` and
// `matches.curr` with `cands`.
ObjectDatabase associate_frame(const ObjectDatabase& previous, std::span<const Candidate> cands,
                               const MatchSet& matches, double omega = kDefaultOmega,
                               double eta = kDefaultEta);

// A MatchSet in which every candidate on both sides goes to the dustbin.
MatchSet unmatched(std::size_t prev_count, std::size_t curr_count);

}  // namespace candtrack

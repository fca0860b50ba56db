#include "candtrack/association.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace candtrack {

double TrackedObject::max_score() const {
  return *std::max_element(score_history.begin(), score_history.end());
}

std::optional<std::size_t> ObjectDatabase::selected_index() const {
  if (!selected_) return std::nullopt;
  for (std::size_t i = 0; i < objects_.size(); ++i)
    if (objects_[i].id == *selected_) return i;
  return std::nullopt;
}

ObjectDatabase init_database(std::span<const Candidate> cands, Cell ground_truth, double max_distance) {
  ObjectDatabase db;
  std::optional<std::size_t> nearest;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cands.size(); ++i) {
    db.objects_.push_back({db.next_id_++, {cands[i].score}});
    const double d = cell_distance(cands[i].location, ground_truth);
    if (d <= max_distance && d < best) {
      best = d;
      nearest = i;
    }
  }
  if (!nearest) throw std::invalid_argument("no candidate near the ground-truth target in the first frame");
  db.selected_ = db.objects_[*nearest].id;
  db.initial_ = *db.selected_;
  return db;
}

ObjectDatabase associate_frame(const ObjectDatabase& previous, std::span<const Candidate> cands,
                               const MatchSet& matches, double omega, double eta) {
  if (matches.curr.size() != cands.size()) {
    throw std::invalid_argument("match set does not cover the current candidates");
  }
  const auto& prev_objects = previous.objects();

  ObjectDatabase db;
  db.initial_ = previous.initial_;
  db.next_id_ = previous.next_id_;
  db.objects_.reserve(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const MatchEntry& m = matches.curr[i];
    if (m.partner && m.probability >= omega) {
      if (*m.partner >= prev_objects.size()) throw std::invalid_argument("match refers to an unknown object");
      TrackedObject o = prev_objects[*m.partner];
      o.score_history.push_back(cands[i].score);
      db.objects_.push_back(std::move(o));
    } else {
      db.objects_.push_back({db.next_id_++, {cands[i].score}});
    }
  }

  const auto& objs = db.objects_;
  std::optional<std::size_t> target;
  if (previous.selected_) {
    for (std::size_t i = 0; i < objs.size(); ++i)
      if (objs[i].id == *previous.selected_) target = i;
  }
  if (target) {
    for (std::size_t i = 0; i < objs.size(); ++i)
      if (objs[*target].max_score() < objs[i].current_score()) target = i;
  } else if (!objs.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < objs.size(); ++i)
      if (objs[i].current_score() > objs[best].current_score()) best = i;
    if (objs[best].current_score() >= eta) target = best;
  }
  if (target) db.selected_ = objs[*target].id;
  return db;
}

MatchSet unmatched(std::size_t prev_count, std::size_t curr_count) {
  MatchSet m;
  m.prev.assign(prev_count, MatchEntry{std::nullopt, 1.0});
  m.curr.assign(curr_count, MatchEntry{std::nullopt, 1.0});
  return m;
}

}  // namespace candtrack

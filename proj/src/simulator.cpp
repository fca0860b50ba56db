#include "candtrack/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

#include "candtrack/errors.hpp"

namespace candtrack {

namespace {

struct WorldObject {
  int uid = 0;
  double row = 0.0;
  double col = 0.0;
  double vrow = 0.0;
  double vcol = 0.0;
  std::vector<double> appearance;  // unit norm
  double amplitude = 0.5;
  double amplitude_end = 0.5;
  bool alive = true;
};

double bump(double dist2) { return std::exp(-dist2 / (2.0 * kBumpSigma * kBumpSigma)); }

double quantize(double v) { return std::round(v / kScoreQuantum) * kScoreQuantum; }

std::vector<double> random_unit(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(dim);
  double norm = 0.0;
  while (norm < 1e-12) {
    norm = 0.0;
    for (double& x : v) {
      x = n(rng);
      norm += x * x;
    }
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

// Rotates `a` towards a random orthogonal direction by an angle in [0, max_angle].
void drift(std::vector<double>& a, double max_angle, std::mt19937_64& rng) {
  if (a.size() < 2 || max_angle <= 0.0) return;
  std::vector<double> u = random_unit(rng, a.size());
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += u[i] * a[i];
  double norm = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    u[i] -= dot * a[i];
    norm += u[i] * u[i];
  }
  norm = std::sqrt(norm);
  if (norm < 1e-9) return;
  const double theta = std::uniform_real_distribution<double>(0.0, max_angle)(rng);
  double out_norm = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = std::cos(theta) * a[i] + std::sin(theta) * u[i] / norm;
    out_norm += a[i] * a[i];
  }
  out_norm = std::sqrt(out_norm);
  for (double& x : a) x /= out_norm;
}

void reflect(double& p, double& v, double hi) {
  if (p < 0.0) {
    p = -p;
    v = -v;
  }
  if (p > hi) {
    p = 2.0 * hi - p;
    v = -v;
  }
  p = std::clamp(p, 0.0, hi);
}

Cell to_cell(const WorldObject& o, const SimConfig& c) {
  const int r = std::clamp(static_cast<int>(std::lround(o.row)), 0, static_cast<int>(c.height) - 1);
  const int col = std::clamp(static_cast<int>(std::lround(o.col)), 0, static_cast<int>(c.width) - 1);
  return {r, col};
}

double dist2(double r0, double c0, double r1, double c1) { return (r0 - r1) * (r0 - r1) + (c0 - c1) * (c0 - c1); }

class World {
 public:
  World(const SimConfig& config, std::uint64_t seed) : cfg_(config), rng_(seed) {}

  SequenceRecord run(std::uint64_t seed) {
    spawn_initial();
    SequenceRecord rec;
    rec.meta = {cfg_.height, cfg_.width, cfg_.appearance_dim, cfg_.frames, seed};
    for (std::size_t t = 0; t < cfg_.frames; ++t) {
      std::vector<SimEvent> events;
      if (t > 0) step(events);
      rec.frames.push_back(render(t, std::move(events)));
    }
    return rec;
  }

 private:
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal(double sd) { return sd > 0.0 ? std::normal_distribution<double>(0.0, sd)(rng_) : 0.0; }

  bool far_from_all(double r, double c, double min_dist) const {
    for (const auto& o : objects_)
      if (o.alive && dist2(r, c, o.row, o.col) < min_dist * min_dist) return false;
    return true;
  }

  WorldObject make_object(double row, double col, double speed_max, double amplitude) {
    WorldObject o;
    o.uid = next_uid_++;
    o.row = row;
    o.col = col;
    const double speed = uniform(0.0, speed_max);
    const double dir = uniform(0.0, 2.0 * std::numbers::pi);
    o.vrow = speed * std::sin(dir);
    o.vcol = speed * std::cos(dir);
    o.appearance = random_unit(rng_, cfg_.appearance_dim);
    o.amplitude = amplitude;
    o.amplitude_end = amplitude;
    return o;
  }

  // Rejection-samples a spawn point at least `min_dist` from every live object.
  std::pair<double, double> spawn_point(double min_dist, double margin) {
    const double hr = static_cast<double>(cfg_.height) - 1.0;
    const double wc = static_cast<double>(cfg_.width) - 1.0;
    double r = 0.0, c = 0.0;
    for (int attempt = 0; attempt < 200; ++attempt) {
      r = uniform(margin, hr - margin);
      c = uniform(margin, wc - margin);
      if (far_from_all(r, c, min_dist)) break;
    }
    return {r, c};
  }

  void spawn_initial() {
    if (!cfg_.scripted.empty()) {
      for (const auto& s : cfg_.scripted) {
        WorldObject o;
        o.uid = next_uid_++;
        o.row = s.row;
        o.col = s.col;
        o.vrow = s.vrow;
        o.vcol = s.vcol;
        o.amplitude = s.amplitude;
        o.amplitude_end = s.amplitude_end.value_or(s.amplitude);
        o.appearance = s.appearance.empty() ? random_unit(rng_, cfg_.appearance_dim) : s.appearance;
        objects_.push_back(std::move(o));
      }
      return;
    }
    const std::size_t count =
        std::uniform_int_distribution<std::size_t>(cfg_.min_objects, cfg_.max_objects)(rng_);
    if (count == 0) return;
    const double sep = cfg_.occlusion_radius + 3.0;
    if (cfg_.scenario == Scenario::Crossing) {
      spawn_crossing(count, sep);
      return;
    }
    for (std::size_t k = 0; k < count; ++k) {
      auto [r, c] = spawn_point(sep, 1.0);
      objects_.push_back(make_object(r, c, cfg_.initial_speed, uniform(cfg_.amplitude_min, cfg_.amplitude_max)));
    }
  }

  void spawn_crossing(std::size_t count, double sep) {
    const double hr = static_cast<double>(cfg_.height) - 1.0;
    const double wc = static_cast<double>(cfg_.width) - 1.0;
    const double frames = static_cast<double>(cfg_.frames);
    objects_.push_back(make_object(uniform(hr / 4.0, 3.0 * hr / 4.0), uniform(wc / 4.0, 3.0 * wc / 4.0),
                                   cfg_.initial_speed * 0.5, cfg_.target_amplitude));
    const WorldObject target = objects_.front();
    for (std::size_t k = 1; k < count; ++k) {
      const double amp = uniform(cfg_.distractor_amplitude_min, cfg_.distractor_amplitude_max);
      double r = 0.0, c = 0.0, vr = 0.0, vc = 0.0;
      bool placed = false;
      for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        const double tc = std::floor(uniform(frames / 4.0, 3.0 * frames / 4.0));
        const double cross_r = std::clamp(target.row + target.vrow * tc, 2.0, hr - 2.0);
        const double cross_c = std::clamp(target.col + target.vcol * tc, 2.0, wc - 2.0);
        const double speed = uniform(0.3, 0.6);
        const double dir = uniform(0.0, 2.0 * std::numbers::pi);
        vr = speed * std::sin(dir);
        vc = speed * std::cos(dir);
        r = cross_r - vr * tc;
        c = cross_c - vc * tc;
        placed = r >= 1.0 && r <= hr - 1.0 && c >= 1.0 && c <= wc - 1.0 && far_from_all(r, c, sep);
      }
      if (!placed) std::tie(r, c) = spawn_point(sep, 1.0);
      WorldObject o = make_object(r, c, 0.0, amp);
      if (placed) {
        o.vrow = vr;
        o.vcol = vc;
      }
      objects_.push_back(std::move(o));
    }
  }

  void step(std::vector<SimEvent>& events) {
    const double hr = static_cast<double>(cfg_.height) - 1.0;
    const double wc = static_cast<double>(cfg_.width) - 1.0;
    for (auto& o : objects_) {
      if (!o.alive) continue;
      o.vrow += normal(cfg_.motion_std);
      o.vcol += normal(cfg_.motion_std);
      const double speed = std::hypot(o.vrow, o.vcol);
      if (speed > cfg_.max_speed) {
        o.vrow *= cfg_.max_speed / speed;
        o.vcol *= cfg_.max_speed / speed;
      }
      o.row += o.vrow;
      o.col += o.vcol;
      reflect(o.row, o.vrow, hr);
      reflect(o.col, o.vcol, wc);
      drift(o.appearance, cfg_.drift_angle, rng_);
    }
    if (!cfg_.scripted.empty()) return;
    // The designated target (uid 0) never leaves.
    for (auto& o : objects_) {
      if (o.alive && o.uid != 0 && cfg_.leave_prob > 0.0 && uniform(0.0, 1.0) < cfg_.leave_prob) {
        o.alive = false;
        events.push_back({"leave", o.uid});
      }
    }
    const std::size_t alive = static_cast<std::size_t>(
        std::count_if(objects_.begin(), objects_.end(), [](const WorldObject& o) { return o.alive; }));
    if (cfg_.enter_prob > 0.0 && alive < cfg_.max_objects && uniform(0.0, 1.0) < cfg_.enter_prob) {
      auto [r, c] = spawn_point(cfg_.occlusion_radius, 1.0);
      objects_.push_back(make_object(r, c, cfg_.initial_speed, uniform(cfg_.amplitude_min, cfg_.amplitude_max)));
      events.push_back({"enter", objects_.back().uid});
    }
  }

  SequenceFrame render(std::size_t t, std::vector<SimEvent> events) {
    const std::size_t h = cfg_.height, w = cfg_.width;
    const double progress = cfg_.frames > 1 ? static_cast<double>(t) / static_cast<double>(cfg_.frames - 1) : 0.0;

    struct Rendered {
      std::size_t index;
      double height;
      Cell cell;
      bool visible = false;
    };
    std::vector<Rendered> order;
    for (std::size_t i = 0; i < objects_.size(); ++i) {
      const auto& o = objects_[i];
      if (!o.alive) continue;
      const double base = o.amplitude + (o.amplitude_end - o.amplitude) * progress;
      const double amp = std::clamp(base + normal(cfg_.amplitude_jitter), cfg_.amplitude_min, cfg_.amplitude_max);
      order.push_back({i, amp, to_cell(o, cfg_)});
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const Rendered& a, const Rendered& b) { return a.height > b.height; });

    // Noise-free value at a cell from the objects accepted so far.
    auto value_at = [&](const std::vector<const Rendered*>& shown, int r, int c) {
      double v = 0.0;
      for (const Rendered* s : shown) {
        const auto& o = objects_[s->index];
        v = std::max(v, s->height * bump(dist2(r, c, o.row, o.col)));
      }
      return v;
    };

    // Stronger objects first; a weaker object is occluded when it lies within
    // the occlusion radius of a shown object or would not form its own peak.
    std::vector<const Rendered*> shown;
    for (auto& cand : order) {
      const auto& o = objects_[cand.index];
      bool occluded = false;
      for (const Rendered* s : shown) {
        const auto& so = objects_[s->index];
        if (dist2(o.row, o.col, so.row, so.col) < cfg_.occlusion_radius * cfg_.occlusion_radius) occluded = true;
      }
      if (!occluded) {
        std::vector<const Rendered*> with = shown;
        with.push_back(&cand);
        const double own = value_at(with, cand.cell.row, cand.cell.col);
        for (int r = cand.cell.row - 2; r <= cand.cell.row + 2 && !occluded; ++r)
          for (int c = cand.cell.col - 2; c <= cand.cell.col + 2; ++c) {
            if (r < 0 || c < 0 || r >= static_cast<int>(h) || c >= static_cast<int>(w)) continue;
            if ((r != cand.cell.row || c != cand.cell.col) && value_at(with, r, c) >= own) {
              occluded = true;
              break;
            }
          }
      }
      if (occluded) {
        events.push_back({"occlude", o.uid});
      } else {
        cand.visible = true;
        shown.push_back(&cand);
      }
    }

    std::vector<double> values(h * w);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        double v = value_at(shown, static_cast<int>(r), static_cast<int>(c)) + normal(cfg_.noise_std);
        values[r * w + c] = quantize(std::clamp(v, 0.0, 1.0));
      }

    SequenceFrame frame;
    frame.map = ScoreMap(h, w, std::move(values), t);
    frame.target_uid = 0;
    frame.events = std::move(events);
    std::vector<const Rendered*> by_uid;
    for (const auto& r : order) by_uid.push_back(&r);
    std::sort(by_uid.begin(), by_uid.end(),
              [&](const Rendered* a, const Rendered* b) { return objects_[a->index].uid < objects_[b->index].uid; });
    for (const Rendered* r : by_uid) {
      const auto& o = objects_[r->index];
      GtObject g;
      g.uid = o.uid;
      g.cell = r->cell;
      g.score = r->visible ? quantize(r->height) : 0.0;
      g.appearance = o.appearance;
      for (double& x : g.appearance) x += normal(cfg_.appearance_noise_std);
      frame.objects.push_back(std::move(g));
    }
    return frame;
  }

  const SimConfig& cfg_;
  std::mt19937_64 rng_;
  std::vector<WorldObject> objects_;
  int next_uid_ = 0;
};

}  // namespace

void SimConfig::validate() const {
  if (height < 5 || width < 5) throw std::invalid_argument("map must be at least 5x5");
  if (frames == 0) throw std::invalid_argument("frames must be positive");
  if (min_objects > max_objects) throw std::invalid_argument("min_objects exceeds max_objects");
  if (appearance_dim == 0) throw std::invalid_argument("appearance_dim must be positive");
  if (!(amplitude_min >= 0.0 && amplitude_min <= amplitude_max && amplitude_max <= 1.0)) {
    throw std::invalid_argument("amplitude range must lie within [0,1]");
  }
  if (noise_std < 0.0 || motion_std < 0.0 || appearance_noise_std < 0.0 || amplitude_jitter < 0.0) {
    throw std::invalid_argument("standard deviations must be non-negative");
  }
  if (enter_prob < 0.0 || enter_prob > 1.0 || leave_prob < 0.0 || leave_prob > 1.0) {
    throw std::invalid_argument("enter/leave probabilities must lie in [0,1]");
  }
  if (scenario == Scenario::Crossing && min_objects == 0) {
    throw std::invalid_argument("crossing scenario needs at least the target object");
  }
  for (const auto& s : scripted) {
    if (!s.appearance.empty() && s.appearance.size() != appearance_dim) {
      throw std::invalid_argument("scripted appearance has the wrong dimension");
    }
  }
}

SimConfig SimConfig::crossing() {
  SimConfig c;
  c.scenario = Scenario::Crossing;
  c.min_objects = 3;
  c.max_objects = 3;
  c.motion_std = 0.02;
  c.enter_prob = 0.0;
  c.leave_prob = 0.0;
  c.amplitude_jitter = 0.1;
  return c;
}

nlohmann::json SimConfig::to_json() const {
  nlohmann::json j = {{"height", height},
                      {"width", width},
                      {"frames", frames},
                      {"min_objects", min_objects},
                      {"max_objects", max_objects},
                      {"initial_speed", initial_speed},
                      {"max_speed", max_speed},
                      {"motion_std", motion_std},
                      {"noise_std", noise_std},
                      {"appearance_noise_std", appearance_noise_std},
                      {"appearance_dim", appearance_dim},
                      {"occlusion_radius", occlusion_radius},
                      {"amplitude_min", amplitude_min},
                      {"amplitude_max", amplitude_max},
                      {"amplitude_jitter", amplitude_jitter},
                      {"drift_angle", drift_angle},
                      {"enter_prob", enter_prob},
                      {"leave_prob", leave_prob},
                      {"scenario", scenario == Scenario::Crossing ? "crossing" : "random"},
                      {"target_amplitude", target_amplitude},
                      {"distractor_amplitude_min", distractor_amplitude_min},
                      {"distractor_amplitude_max", distractor_amplitude_max}};
  return j;
}

SimConfig SimConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("simulator config must be a JSON object");
  SimConfig c;
  if (j.contains("scenario")) {
    const auto s = j.at("scenario").get<std::string>();
    if (s == "crossing") c = crossing();
    else if (s != "random") throw FormatError("unknown scenario '" + s + "'");
  }
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "scenario") continue;
      else if (key == "height") c.height = v.get<std::size_t>();
      else if (key == "width") c.width = v.get<std::size_t>();
      else if (key == "frames") c.frames = v.get<std::size_t>();
      else if (key == "min_objects") c.min_objects = v.get<std::size_t>();
      else if (key == "max_objects") c.max_objects = v.get<std::size_t>();
      else if (key == "initial_speed") c.initial_speed = v.get<double>();
      else if (key == "max_speed") c.max_speed = v.get<double>();
      else if (key == "motion_std") c.motion_std = v.get<double>();
      else if (key == "noise_std") c.noise_std = v.get<double>();
      else if (key == "appearance_noise_std") c.appearance_noise_std = v.get<double>();
      else if (key == "appearance_dim") c.appearance_dim = v.get<std::size_t>();
      else if (key == "occlusion_radius") c.occlusion_radius = v.get<double>();
      else if (key == "amplitude_min") c.amplitude_min = v.get<double>();
      else if (key == "amplitude_max") c.amplitude_max = v.get<double>();
      else if (key == "amplitude_jitter") c.amplitude_jitter = v.get<double>();
      else if (key == "drift_angle") c.drift_angle = v.get<double>();
      else if (key == "enter_prob") c.enter_prob = v.get<double>();
      else if (key == "leave_prob") c.leave_prob = v.get<double>();
      else if (key == "target_amplitude") c.target_amplitude = v.get<double>();
      else if (key == "distractor_amplitude_min") c.distractor_amplitude_min = v.get<double>();
      else if (key == "distractor_amplitude_max") c.distractor_amplitude_max = v.get<double>();
      else throw FormatError("unknown simulator config key '" + key + "'");
    }
    c.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid simulator config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid simulator config: ") + e.what());
  }
  return c;
}

const GtObject* SequenceFrame::visible_target() const {
  for (const auto& o : objects)
    if (o.uid == target_uid && o.score > 0.0) return &o;
  return nullptr;
}

SequenceRecord generate_sequence(const SimConfig& config, std::uint64_t seed) {
  config.validate();
  World world(config, seed);
  return world.run(seed);
}

std::vector<double> appearance_at(const SequenceFrame& frame, Cell cell, std::size_t appearance_dim) {
  const GtObject* best = nullptr;
  double best_v = 1e-3;
  for (const auto& o : frame.objects) {
    if (o.score <= 0.0) continue;
    const double d = cell_distance(cell, o.cell);
    const double v = o.score * bump(d * d);
    if (v > best_v) {
      best_v = v;
      best = &o;
    }
  }
  if (best == nullptr) return std::vector<double>(appearance_dim, 0.0);
  return best->appearance;
}

std::vector<Candidate> frame_candidates(const SequenceFrame& frame, std::size_t appearance_dim, double tau) {
  std::vector<Candidate> cands = extract_candidates(frame.map, tau);
  for (auto& c : cands) c.appearance = appearance_at(frame, c.location, appearance_dim);
  return cands;
}

std::optional<int> gt_identity(const SequenceFrame& frame, Cell cell, double radius) {
  std::optional<int> uid;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& o : frame.objects) {
    if (o.score <= 0.0) continue;
    const double d = cell_distance(cell, o.cell);
    if (d <= radius && d < best) {
      best = d;
      uid = o.uid;
    }
  }
  return uid;
}

TrackerLog greedy_baseline_track(const SequenceRecord& seq, double eta, double tau) {
  TrackerLog log;
  for (const auto& f : seq.frames) {
    TrackerLogFrame lf;
    lf.candidates = frame_candidates(f, seq.meta.appearance_dim, tau);
    if (!lf.candidates.empty() && lf.candidates.front().score >= eta) lf.selected = 0;
    if (const GtObject* t = f.visible_target()) lf.gt_target = t->cell;
    log.frames.push_back(std::move(lf));
  }
  return log;
}

}  // namespace candtrack

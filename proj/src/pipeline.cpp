#include "candtrack/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "candtrack/encoder.hpp"
#include "candtrack/errors.hpp"
#include "candtrack/training.hpp"

namespace candtrack {

void TrackerConfig::validate() const {
  if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("tau must lie in [0,1]");
  if (omega <= 0.0 || omega > 1.0) throw std::invalid_argument("omega must lie in (0,1]");
  if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("eta must lie in [0,1]");
  if (sinkhorn_iterations < 1) throw std::invalid_argument("sinkhorn_iterations must be positive");
  if (confidence_floor < 0.0 || confidence_floor > 1.0) throw std::invalid_argument("confidence_floor must lie in [0,1]");
  if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("gamma must lie in [0,1)");
  if (memory_capacity == 0) throw std::invalid_argument("memory_capacity must be positive");
  if (memory_lambda < 0.0) throw std::invalid_argument("memory_lambda must be non-negative");
}

TrackerConfig TrackerConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("tracker config must be a JSON object");
  TrackerConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "tau") c.tau = v.get<double>();
      else if (key == "omega") c.omega = v.get<double>();
      else if (key == "eta") c.eta = v.get<double>();
      else if (key == "sinkhorn_iterations") c.sinkhorn_iterations = v.get<int>();
      else if (key == "confidence_floor") c.confidence_floor = v.get<double>();
      else if (key == "gamma") c.gamma = v.get<double>();
      else if (key == "memory_capacity") c.memory_capacity = v.get<std::size_t>();
      else if (key == "memory_lambda") c.memory_lambda = v.get<double>();
      else if (key == "single_candidate_shortcut") c.single_candidate_shortcut = v.get<bool>();
      else throw FormatError("unknown tracker config key '" + key + "'");
    }
    c.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid tracker config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid tracker config: ") + e.what());
  }
  return c;
}

nlohmann::json TrackerConfig::to_json() const {
  return {{"tau", tau},
          {"omega", omega},
          {"eta", eta},
          {"sinkhorn_iterations", sinkhorn_iterations},
          {"confidence_floor", confidence_floor},
          {"gamma", gamma},
          {"memory_capacity", memory_capacity},
          {"memory_lambda", memory_lambda},
          {"single_candidate_shortcut", single_candidate_shortcut}};
}

AssignmentMatrix predict_assignment(ModelParams& params, const dm::Tensor& z_prev, const dm::Tensor& z_curr,
                                    int iterations) {
  dm::Tape tape;
  Bound bound(tape, params, false);
  const dm::Var log_a = pair_log_assignment(bound, tape.constant(z_prev), tape.constant(z_curr), iterations);
  dm::Tensor probs = log_a.value();
  for (double& p : probs.data()) p = std::exp(p);
  return {std::move(probs), iterations};
}

namespace {

dm::Tensor encode_rows(ModelParams& model, std::span<const Candidate> cands, MapDims dims) {
  dm::Tape tape;
  Bound bound(tape, model, false);
  return encode_candidates(bound, cands, dims, dm::Mode::Infer).value();
}

std::vector<LabelledFeature> memory_payload(std::span<const Candidate> cands, std::size_t selected) {
  std::vector<LabelledFeature> payload;
  payload.reserve(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) payload.push_back({cands[i].appearance, i == selected ? 1.0 : 0.0});
  return payload;
}

void record_selection(FrameResult& fr, const ObjectDatabase& db) {
  for (const auto& o : db.objects()) fr.object_ids.push_back(o.id);
  fr.selected = db.selected_index();
  fr.selected_id = fr.selected ? db.selected_target() : std::nullopt;
  fr.selected_is_initial = fr.selected && db.selected_is_initial();
}

}  // namespace

SequenceResult track_sequence(const SequenceRecord& seq, ModelParams& model, const TrackerConfig& cfg) {
  cfg.validate();
  if (model.dims().appearance_dim != seq.meta.appearance_dim) {
    throw std::invalid_argument("model appearance dimension does not match the sequence");
  }
  SequenceResult out;
  out.seed = seq.meta.seed;
  if (seq.frames.empty()) return out;
  const GtObject* first = seq.frames.front().visible_target();
  if (first == nullptr) throw std::invalid_argument("target is not visible in the first frame");

  SampleMemory memory(OnlineLossSpec::ridge(cfg.memory_lambda, cfg.gamma, cfg.memory_capacity, cfg.confidence_floor));
  const std::size_t d_a = seq.meta.appearance_dim;
  const MapDims dims{seq.meta.height, seq.meta.width};

  ObjectDatabase db;
  std::vector<Candidate> prev;
  std::optional<dm::Tensor> z_prev;  // encodings of `prev`, computed lazily
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    const SequenceFrame& f = seq.frames[t];
    FrameResult fr;
    fr.frame = t;
    fr.candidates = frame_candidates(f, d_a, cfg.tau);
    const auto& curr = fr.candidates;
    std::optional<dm::Tensor> z_curr;

    if (t == 0) {
      db = init_database(curr, first->cell);
    } else {
      MatchSet matches;
      if (prev.empty() || curr.empty()) {
        matches = unmatched(prev.size(), curr.size());
      } else if (cfg.single_candidate_shortcut && prev.size() == 1 && curr.size() == 1 &&
                 prev[0].score >= 2.0 * cfg.tau && curr[0].score >= 2.0 * cfg.tau) {
        matches.prev = {MatchEntry{0, 1.0}};
        matches.curr = {MatchEntry{0, 1.0}};
        fr.shortcut = true;
      } else {
        if (!z_prev) z_prev = encode_rows(model, prev, dims);
        z_curr = encode_rows(model, curr, dims);
        matches = extract_matches(predict_assignment(model, *z_prev, *z_curr, cfg.sinkhorn_iterations));
      }
      for (std::size_t i = 0; i < matches.curr.size(); ++i) {
        if (matches.curr[i].partner) fr.matches.push_back({*matches.curr[i].partner, i, matches.curr[i].probability});
      }
      db = associate_frame(db, curr, matches, cfg.omega, cfg.eta);
    }

    record_selection(fr, db);
    fr.sigma = f.map.max_value();
    fr.beta = confidence(fr.sigma, fr.selected_is_initial);
    if (fr.selected) memory.insert(static_cast<std::int64_t>(t), memory_payload(curr, *fr.selected), fr.beta);
    fr.memory_size = memory.samples().size();

    prev = curr;
    z_prev = std::move(z_curr);
    out.frames.push_back(std::move(fr));
  }
  return out;
}

SequenceResult track_greedy(const SequenceRecord& seq, const TrackerConfig& cfg) {
  cfg.validate();
  const TrackerLog log = greedy_baseline_track(seq, cfg.eta, cfg.tau);
  SequenceResult out;
  out.seed = seq.meta.seed;
  for (std::size_t t = 0; t < log.frames.size(); ++t) {
    FrameResult fr;
    fr.frame = t;
    fr.candidates = log.frames[t].candidates;
    fr.selected = log.frames[t].selected;
    fr.sigma = seq.frames[t].map.max_value();
    fr.beta = fr.sigma;
    out.frames.push_back(std::move(fr));
  }
  return out;
}

namespace {

nlohmann::json optional_json(const auto& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json results_to_json(const TrackResults& r) {
  nlohmann::json seqs = nlohmann::json::array();
  for (const auto& s : r.sequences) {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : s.frames) {
      nlohmann::json cands = nlohmann::json::array();
      for (const auto& c : f.candidates) cands.push_back({{"cell", {c.location.row, c.location.col}}, {"score", c.score}});
      nlohmann::json matches = nlohmann::json::array();
      for (const auto& m : f.matches) matches.push_back({{"prev", m.prev}, {"curr", m.curr}, {"p", m.probability}});
      frames.push_back({{"frame", f.frame},
                        {"candidates", std::move(cands)},
                        {"object_ids", f.object_ids},
                        {"matches", std::move(matches)},
                        {"selected", optional_json(f.selected)},
                        {"selected_id", optional_json(f.selected_id)},
                        {"selected_is_initial", f.selected_is_initial},
                        {"sigma", f.sigma},
                        {"beta", f.beta},
                        {"shortcut", f.shortcut},
                        {"memory_size", f.memory_size}});
    }
    seqs.push_back({{"seed", s.seed}, {"frames", std::move(frames)}});
  }
  return {{"format", 1}, {"tracker", r.tracker}, {"sequences", std::move(seqs)}};
}

TrackResults results_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<int>() != 1) throw FormatError("unsupported results format version");
    TrackResults r;
    r.tracker = j.at("tracker").get<std::string>();
    for (const auto& js : j.at("sequences")) {
      SequenceResult s;
      s.seed = js.at("seed").get<std::uint64_t>();
      for (const auto& jf : js.at("frames")) {
        FrameResult f;
        f.frame = jf.at("frame").get<std::size_t>();
        for (const auto& jc : jf.at("candidates")) {
          Candidate c;
          const auto cell = jc.at("cell").get<std::vector<int>>();
          if (cell.size() != 2) throw FormatError("candidate cell must have two entries");
          c.location = {cell[0], cell[1]};
          c.score = jc.at("score").get<double>();
          f.candidates.push_back(std::move(c));
        }
        f.object_ids = jf.at("object_ids").get<std::vector<ObjectId>>();
        for (const auto& jm : jf.at("matches")) {
          f.matches.push_back({jm.at("prev").get<std::size_t>(), jm.at("curr").get<std::size_t>(), jm.at("p").get<double>()});
        }
        if (!jf.at("selected").is_null()) f.selected = jf.at("selected").get<std::size_t>();
        if (!jf.at("selected_id").is_null()) f.selected_id = jf.at("selected_id").get<ObjectId>();
        if (f.selected && *f.selected >= f.candidates.size()) throw FormatError("selected index out of range");
        f.selected_is_initial = jf.at("selected_is_initial").get<bool>();
        f.sigma = jf.at("sigma").get<double>();
        f.beta = jf.at("beta").get<double>();
        f.shortcut = jf.at("shortcut").get<bool>();
        f.memory_size = jf.at("memory_size").get<std::size_t>();
        s.frames.push_back(std::move(f));
      }
      r.sequences.push_back(std::move(s));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed results file: ") + e.what());
  }
}

void SearchAreaHistory::append(double area) {
  if (!(area > 0.0)) throw std::invalid_argument("search areas must be positive");
  areas.push_back(area);
}

double rescale_search_area(const SearchAreaHistory& history, double area_at_loss, std::size_t k) {
  if (k == 0) throw std::invalid_argument("k must be at least 1");
  const std::size_t window = std::min(k, kMaxSearchAreaWindow);
  double sum = 0.0;
  std::size_t used = 0;
  for (auto it = history.areas.rbegin(); it != history.areas.rend() && used < window; ++it) {
    if (*it > area_at_loss) {
      sum += *it;
      ++used;
    }
  }
  return used == 0 ? area_at_loss : sum / static_cast<double>(used);
}

MetricCounts& MetricCounts::operator+=(const MetricCounts& o) {
  visible_frames += o.visible_frames;
  correct_frames += o.correct_frames;
  id_switches += o.id_switches;
  listed_matches += o.listed_matches;
  correct_matches += o.correct_matches;
  gt_matches += o.gt_matches;
  recalled_matches += o.recalled_matches;
  redetections += o.redetections;
  redetection_frames += o.redetection_frames;
  return *this;
}

Metrics finalize_metrics(const MetricCounts& c) {
  auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
  Metrics m;
  m.counts = c;
  m.target_accuracy = ratio(c.correct_frames, c.visible_frames);
  m.id_switches = c.id_switches;
  m.association_precision = ratio(c.correct_matches, c.listed_matches);
  m.association_recall = ratio(c.recalled_matches, c.gt_matches);
  m.redetection_latency = ratio(c.redetection_frames, c.redetections);
  return m;
}

MetricCounts evaluate_counts(const SequenceResult& result, const SequenceRecord& seq) {
  if (result.frames.size() != seq.frames.size()) {
    throw std::invalid_argument("results cover " + std::to_string(result.frames.size()) + " frames, ground truth " +
                                std::to_string(seq.frames.size()));
  }
  MetricCounts c;
  const std::size_t n = seq.frames.size();
  std::vector<bool> correct(n, false);
  std::vector<bool> visible(n, false);
  std::vector<std::optional<int>> selected_uid(n);
  std::vector<std::vector<std::optional<int>>> ids(n);

  for (std::size_t t = 0; t < n; ++t) {
    const auto& f = seq.frames[t];
    const auto& r = result.frames[t];
    for (const auto& cand : r.candidates) ids[t].push_back(gt_identity(f, cand.location, kEvalRadius));
    if (r.selected) {
      if (*r.selected >= r.candidates.size()) throw FormatError("selected index out of range");
      selected_uid[t] = ids[t][*r.selected];
    }
    const GtObject* target = f.visible_target();
    visible[t] = target != nullptr;
    if (!visible[t]) continue;
    ++c.visible_frames;
    if (r.selected && cell_distance(r.candidates[*r.selected].location, target->cell) <= kEvalRadius) {
      correct[t] = true;
      ++c.correct_frames;
    }
  }

  // Identity of the last resolved selection; forgotten whenever the target disappears.
  std::optional<int> last_uid;
  for (std::size_t t = 0; t < n; ++t) {
    if (!visible[t]) {
      last_uid.reset();
      continue;
    }
    if (!selected_uid[t]) continue;
    if (last_uid && *last_uid != *selected_uid[t]) ++c.id_switches;
    last_uid = selected_uid[t];
  }

  for (std::size_t t = 1; t < n; ++t) {
    const auto& r = result.frames[t];
    for (const auto& m : r.matches) {
      if (m.prev >= ids[t - 1].size() || m.curr >= ids[t].size()) throw FormatError("match index out of range");
      ++c.listed_matches;
      const auto& a = ids[t - 1][m.prev];
      const auto& b = ids[t][m.curr];
      if (a && b && *a == *b) ++c.correct_matches;
    }
    for (std::size_t i = 0; i < ids[t - 1].size(); ++i) {
      for (std::size_t j = 0; j < ids[t].size(); ++j) {
        if (!ids[t - 1][i] || !ids[t][j] || *ids[t - 1][i] != *ids[t][j]) continue;
        ++c.gt_matches;
        for (const auto& m : r.matches)
          if (m.prev == i && m.curr == j) ++c.recalled_matches;
      }
    }
  }

  // Frames from each target reappearance to the first correct selection
  // (censored at the next disappearance or the end of the sequence).
  for (std::size_t t = 1; t < n; ++t) {
    if (!visible[t] || visible[t - 1]) continue;
    ++c.redetections;
    std::size_t u = t;
    while (u < n && visible[u] && !correct[u]) ++u;
    c.redetection_frames += u - t;
  }
  return c;
}

Metrics evaluate(const SequenceResult& result, const SequenceRecord& seq) {
  return finalize_metrics(evaluate_counts(result, seq));
}

Metrics evaluate(const TrackResults& results, std::span<const SequenceRecord> seqs) {
  if (results.sequences.size() != seqs.size()) {
    throw std::invalid_argument("results cover " + std::to_string(results.sequences.size()) + " sequences, ground truth " +
                                std::to_string(seqs.size()));
  }
  MetricCounts total;
  for (std::size_t i = 0; i < seqs.size(); ++i) total += evaluate_counts(results.sequences[i], seqs[i]);
  return finalize_metrics(total);
}

nlohmann::json metrics_to_json(const Metrics& m) {
  const auto& c = m.counts;
  return {{"target_accuracy", m.target_accuracy},
          {"id_switches", m.id_switches},
          {"association_precision", m.association_precision},
          {"association_recall", m.association_recall},
          {"redetection_latency", m.redetection_latency},
          {"counts",
           {{"visible_frames", c.visible_frames},
            {"correct_frames", c.correct_frames},
            {"listed_matches", c.listed_matches},
            {"correct_matches", c.correct_matches},
            {"gt_matches", c.gt_matches},
            {"recalled_matches", c.recalled_matches},
            {"redetections", c.redetections},
            {"redetection_frames", c.redetection_frames}}}};
}

}  // namespace candtrack

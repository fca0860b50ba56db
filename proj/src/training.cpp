#include "candtrack/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "candtrack/embednet.hpp"
#include "candtrack/encoder.hpp"
#include "candtrack/errors.hpp"

namespace candtrack {

namespace {

std::pair<std::size_t, std::size_t> pair_index(const GtPair& p, std::size_t rows, std::size_t cols) {
  const std::size_t r = p.prev.value_or(rows - 1);
  const std::size_t c = p.curr.value_or(cols - 1);
  if (r >= rows || c >= cols) throw std::invalid_argument("gt pair index outside the assignment matrix");
  return {r, c};
}

}  // namespace

void validate_sample(const FramePairSample& s) {
  std::set<std::size_t> seen_prev, seen_curr;
  auto check = [](const PaddedCandidates& side, std::optional<std::size_t> idx, std::set<std::size_t>& seen) {
    if (!idx) return;
    if (*idx >= side.candidates.size()) throw std::invalid_argument("gt pair index out of range");
    if (!side.valid[*idx] || side.candidates[*idx].is_artificial) {
      throw std::invalid_argument("gt pair references an artificial candidate");
    }
    if (!seen.insert(*idx).second) throw std::invalid_argument("candidate appears in more than one gt pair");
  };
  for (const auto& p : s.gt) {
    if (!p.prev && !p.curr) throw std::invalid_argument("gt pair cannot map dustbin to dustbin");
    check(s.prev, p.prev, seen_prev);
    check(s.curr, p.curr, seen_curr);
  }
}

LossValue loss_partial(const AssignmentMatrix& a, const GtPair& pair) {
  const auto [r, c] = pair_index(pair, a.probs.rows(), a.probs.cols());
  const double p = a.probs(r, c);
  if (p < kLossClampFloor) return {-std::log(kLossClampFloor), 1};
  return {-std::log(p), 0};
}

LossValue loss_self(const AssignmentMatrix& a, std::span<const GtPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("loss_self needs at least one pair");
  LossValue total;
  for (const auto& p : pairs) {
    const LossValue l = loss_partial(a, p);
    total.value += l.value;
    total.clamped += l.clamped;
  }
  return total;
}

dm::Var loss_partial(dm::Var log_a, const GtPair& pair, std::size_t* clamped) {
  const auto [r, c] = pair_index(pair, log_a.rows(), log_a.cols());
  const dm::Var entry = dm::pick(log_a, r, c);
  if (entry.item() < std::log(kLossClampFloor)) {
    if (clamped) ++*clamped;
    return log_a.tape().constant(dm::Tensor::scalar(-std::log(kLossClampFloor)));
  }
  return dm::scale(entry, -1.0);
}

dm::Var loss_self(dm::Var log_a, std::span<const GtPair> pairs, std::size_t* clamped) {
  if (pairs.empty()) throw std::invalid_argument("loss_self needs at least one pair");
  std::vector<dm::Var> terms;
  terms.reserve(pairs.size());
  for (const auto& p : pairs) terms.push_back(loss_partial(log_a, p, clamped));
  return dm::sum(dm::concat_cols(terms));
}

FramePairSample make_synthetic_pair(std::span<const Candidate> cands, const ScoreMap& map,
                                    std::size_t appearance_dim, std::mt19937_64& rng,
                                    const AugmentConfig& aug) {
  if (cands.empty()) throw std::invalid_argument("make_synthetic_pair needs at least one candidate");
  if (aug.pad_to == 0) throw std::invalid_argument("pad_to must be positive");

  std::vector<Candidate> base(cands.begin(), cands.end());
  std::stable_sort(base.begin(), base.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  if (base.size() > aug.pad_to) base.resize(aug.pad_to);
  const std::size_t n = base.size();

  const int max_jitter = static_cast<int>(std::floor(aug.max_jitter));
  std::uniform_int_distribution<int> jitter(-max_jitter, max_jitter);
  std::uniform_real_distribution<double> scale(1.0 - aug.score_scale, 1.0 + aug.score_scale);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  std::vector<Candidate> moved = base;
  for (auto& c : moved) {
    const int dr = jitter(rng);
    const int dc = jitter(rng);
    c.location.row = std::clamp(c.location.row + dr, 0, static_cast<int>(map.height()) - 1);
    c.location.col = std::clamp(c.location.col + dc, 0, static_cast<int>(map.width()) - 1);
    c.score = std::clamp(c.score * scale(rng), 0.0, 1.0);
    for (double& a : c.appearance) a += aug.appearance_noise * noise(rng);
  }

  // Optional removals; neither side may become empty.
  std::optional<std::size_t> removed_prev, removed_curr;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  if (n > 1 && u01(rng) < aug.removal_prob) removed_prev = pick(rng);
  if (n > 1 && u01(rng) < aug.removal_prob) removed_curr = pick(rng);

  std::vector<Candidate> prev_list, curr_list;
  std::vector<std::optional<std::size_t>> prev_pos(n), curr_pos(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (i != removed_prev) {
      prev_pos[i] = prev_list.size();
      prev_list.push_back(base[i]);
    }
  }
  // The copy is re-ranked by its perturbed scores; padding keeps that order.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return moved[a].score > moved[b].score; });
  for (std::size_t i : order) {
    if (i != removed_curr) {
      curr_pos[i] = curr_list.size();
      curr_list.push_back(moved[i]);
    }
  }

  FramePairSample s;
  s.kind = PairKind::Synthetic;
  s.dims = map.dims();
  s.prev = pad_candidates(prev_list, aug.pad_to, rng, map, appearance_dim);
  s.curr = pad_candidates(curr_list, aug.pad_to, rng, map, appearance_dim);
  for (std::size_t i = 0; i < n; ++i) {
    if (prev_pos[i] || curr_pos[i]) s.gt.push_back({prev_pos[i], curr_pos[i]});
  }
  return s;
}

std::optional<std::size_t> target_candidate(const SequenceFrame& frame, const PaddedCandidates& cands,
                                            double radius) {
  const GtObject* t = frame.visible_target();
  if (t == nullptr) return std::nullopt;
  std::optional<std::size_t> best;
  double best_d = radius;
  for (std::size_t i = 0; i < cands.candidates.size(); ++i) {
    if (!cands.valid[i]) continue;
    const double d = cell_distance(cands.candidates[i].location, t->cell);
    if (d <= best_d && (!best || d < best_d)) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

std::optional<FramePairSample> make_real_pair(const SequenceFrame& prev, const SequenceFrame& curr,
                                              std::size_t appearance_dim, std::mt19937_64& rng,
                                              std::size_t pad_to, double tau) {
  const auto prev_cands = frame_candidates(prev, appearance_dim, tau);
  const auto curr_cands = frame_candidates(curr, appearance_dim, tau);
  if (prev_cands.empty() || curr_cands.empty()) return std::nullopt;
  FramePairSample s;
  s.kind = PairKind::Real;
  s.dims = curr.map.dims();
  s.prev = pad_candidates(prev_cands, pad_to, rng, prev.map, appearance_dim);
  s.curr = pad_candidates(curr_cands, pad_to, rng, curr.map, appearance_dim);
  const auto tp = target_candidate(prev, s.prev);
  const auto tc = target_candidate(curr, s.curr);
  if (!tp && !tc) return std::nullopt;
  s.gt.push_back({tp, tc});
  return s;
}

const char* category_name(MiningCategory c) {
  switch (c) {
    case MiningCategory::D: return "D";
    case MiningCategory::H: return "H";
    case MiningCategory::G: return "G";
    case MiningCategory::J: return "J";
    case MiningCategory::K: return "K";
    case MiningCategory::OTHER: return "OTHER";
  }
  return "OTHER";
}

std::vector<MiningCategory> mine_categories(const TrackerLog& log, double match_radius) {
  std::vector<MiningCategory> out;
  out.reserve(log.frames.size());
  for (const auto& f : log.frames) {
    const auto& c = f.candidates;
    auto matches = [&](std::size_t i) {
      return f.gt_target && cell_distance(c[i].location, *f.gt_target) <= match_radius;
    };
    MiningCategory cat = MiningCategory::OTHER;
    const bool selected = f.selected.has_value();
    if (c.size() == 1) {
      if (selected && matches(0)) cat = MiningCategory::D;
    } else if (c.size() > 1) {
      std::size_t top = 0;
      for (std::size_t i = 1; i < c.size(); ++i)
        if (c[i].score > c[top].score) top = i;
      bool any = false;
      for (std::size_t i = 0; i < c.size(); ++i) any = any || matches(i);
      if (matches(top)) {
        cat = selected ? MiningCategory::H : MiningCategory::G;
      } else if (selected) {
        cat = any ? MiningCategory::K : MiningCategory::J;
      }
    }
    out.push_back(cat);
  }
  return out;
}

WeightedPoolSampler::WeightedPoolSampler(std::vector<double> weights, std::vector<std::size_t> pool_sizes)
    : weights_(std::move(weights)), sizes_(std::move(pool_sizes)) {
  if (weights_.size() != sizes_.size()) throw std::invalid_argument("one weight per pool required");
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (weights_[i] < 0.0) throw std::invalid_argument("pool weights must be non-negative");
    if (sizes_[i] == 0) weights_[i] = 0.0;
    total_ += weights_[i];
  }
}

std::pair<std::size_t, std::size_t> WeightedPoolSampler::draw(std::mt19937_64& rng) const {
  if (empty()) throw std::logic_error("sampling from empty pools");
  double r = std::uniform_real_distribution<double>(0.0, total_)(rng);
  std::size_t pool = 0;
  for (; pool + 1 < weights_.size(); ++pool) {
    if (weights_[pool] > 0.0 && r < weights_[pool]) break;
    r -= weights_[pool];
  }
  while (weights_[pool] == 0.0) --pool;  // rounding at the upper edge
  const std::size_t item = std::uniform_int_distribution<std::size_t>(0, sizes_[pool] - 1)(rng);
  return {pool, item};
}

TrainingPools mine_training_pools(std::span<const SequenceRecord> sequences, double eta, double tau) {
  TrainingPools pools;
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const auto cats = mine_categories(greedy_baseline_track(sequences[s], eta, tau));
    for (std::size_t t = 0; t < cats.size(); ++t) {
      const FrameRef ref{s, t};
      switch (cats[t]) {
        case MiningCategory::H: pools.synth_h.push_back(ref); break;
        case MiningCategory::K: pools.synth_k.push_back(ref); break;
        case MiningCategory::J: pools.synth_j.push_back(ref); break;
        default: break;
      }
      if (t == 0 || cats[t - 1] != MiningCategory::H) continue;
      if (cats[t] == MiningCategory::H) pools.real_hh.push_back(ref);
      if (cats[t] == MiningCategory::K) pools.real_hk.push_back(ref);
      if (cats[t] == MiningCategory::G) pools.real_hg.push_back(ref);
    }
  }
  return pools;
}

SampleSource::SampleSource(std::span<const SequenceRecord> sequences, const TrainConfig& cfg)
    : sequences_(sequences),
      cfg_(cfg),
      pools_(mine_training_pools(sequences, cfg.eta, cfg.tau)),
      real_(cfg.real_ratios, {pools_.real_hh.size(), pools_.real_hk.size(), pools_.real_hg.size()}),
      synth_(cfg.synth_ratios, {pools_.synth_h.size(), pools_.synth_k.size(), pools_.synth_j.size()}),
      appearance_dim_(sequences.empty() ? 0 : sequences.front().meta.appearance_dim) {
  if (real_.empty() && synth_.empty()) throw std::invalid_argument("training data yields no usable frames");
}

FramePairSample SampleSource::draw(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  // Real pools always contain the target on both sides, so make_real_pair succeeds.
  const bool use_real = synth_.empty() || (!real_.empty() && u01(rng) < cfg_.real_fraction);
  if (use_real) {
    const auto [pool, item] = real_.draw(rng);
    const auto& refs = pool == 0 ? pools_.real_hh : pool == 1 ? pools_.real_hk : pools_.real_hg;
    const auto& seq = sequences_[refs[item].sequence];
    auto s = make_real_pair(seq.frames[refs[item].frame - 1], seq.frames[refs[item].frame], appearance_dim_, rng,
                            cfg_.augment.pad_to, cfg_.tau);
    if (s) return *s;
  }
  const auto [pool, item] = synth_.draw(rng);
  const auto& refs = pool == 0 ? pools_.synth_h : pool == 1 ? pools_.synth_k : pools_.synth_j;
  const auto& frame = sequences_[refs[item].sequence].frames[refs[item].frame];
  const auto cands = frame_candidates(frame, appearance_dim_, cfg_.tau);
  return make_synthetic_pair(cands, frame.map, appearance_dim_, rng, cfg_.augment);
}

dm::Var pair_log_assignment(Bound& params, dm::Var z_prev, dm::Var z_curr, int iterations) {
  const PairEmbeddings h = embed_pair(params, z_prev, z_curr);
  return log_sinkhorn(similarity(h.prev, h.curr), params("matcher.dustbin"), iterations);
}

BatchLoss batch_loss(Bound& params, std::span<const FramePairSample> batch, dm::Mode mode, int iterations) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  std::vector<Candidate> all;
  for (const auto& s : batch) {
    if (s.dims.height != batch.front().dims.height || s.dims.width != batch.front().dims.width) {
      throw std::invalid_argument("batch mixes map sizes");
    }
    all.insert(all.end(), s.prev.candidates.begin(), s.prev.candidates.end());
    all.insert(all.end(), s.curr.candidates.begin(), s.curr.candidates.end());
  }
  const dm::Var z = encode_candidates(params, all, batch.front().dims, mode);

  BatchLoss out;
  std::vector<dm::Var> terms;
  std::size_t offset = 0;
  for (const auto& s : batch) {
    const std::size_t np = s.prev.candidates.size();
    const std::size_t nc = s.curr.candidates.size();
    const dm::Var z_prev = dm::slice_rows(z, offset, np);
    const dm::Var z_curr = dm::slice_rows(z, offset + np, nc);
    offset += np + nc;
    const dm::Var log_a = pair_log_assignment(params, z_prev, z_curr, iterations);
    terms.push_back(loss_self(log_a, s.gt, &out.clamped));
  }
  out.total = dm::scale(dm::sum(dm::concat_cols(terms)), 1.0 / static_cast<double>(batch.size()));
  return out;
}

void Adam::step(std::map<std::string, dm::Tensor>& params, const std::map<std::string, dm::Tensor>& grads,
                double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("gradient for unknown parameter '" + name + "'");
    dm::Tensor& p = it->second;
    if (!g.same_shape(p)) throw std::invalid_argument("gradient shape mismatch for '" + name + "'");
    auto [mi, m_new] = m_.try_emplace(name, p.rows(), p.cols(), 0.0);
    auto [vi, v_new] = v_.try_emplace(name, p.rows(), p.cols(), 0.0);
    dm::Tensor& m = mi->second;
    dm::Tensor& v = vi->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }
}

double train_step(ModelParams& params, Adam& opt, std::span<const FramePairSample> batch, double lr,
                  int iterations, std::size_t* clamped) {
  dm::Tape tape;
  Bound bound(tape, params, true);
  const BatchLoss loss = batch_loss(bound, batch, dm::Mode::Train, iterations);
  const double value = loss.total.item();
  if (clamped) *clamped += loss.clamped;
  if (!std::isfinite(value)) throw NumericalError("training loss is not finite");
  tape.backward(loss.total);
  auto grads = bound.gradients();
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw NumericalError("non-finite gradient for '" + name + "'");
  }
  opt.step(params.learnable(), grads, lr);
  return value;
}

TrainResult train(std::span<const SequenceRecord> sequences, const TrainConfig& cfg) {
  if (sequences.empty()) throw std::invalid_argument("no training sequences");
  if (cfg.batch_size == 0 || cfg.epochs == 0 || cfg.samples_per_epoch == 0) {
    throw std::invalid_argument("epochs, batch_size and samples_per_epoch must be positive");
  }
  if (cfg.lr < 0.0) throw std::invalid_argument("learning rate must be non-negative");
  for (const auto& s : sequences) {
    if (s.meta.appearance_dim != cfg.dims.appearance_dim) {
      throw std::invalid_argument("sequence appearance dimension does not match the model");
    }
  }

  TrainResult result{init_model(cfg.dims, cfg.seed), {}};
  const SampleSource source(sequences, cfg);
  std::mt19937_64 rng(cfg.seed + 0x5eed);
  Adam opt;
  const std::size_t steps = (cfg.samples_per_epoch + cfg.batch_size - 1) / cfg.batch_size;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr =
        cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(cfg.decay_every ? epoch / cfg.decay_every : 0));
    double total = 0.0;
    std::size_t count = 0;
    std::size_t clamped = 0;
    for (std::size_t step = 0; step < steps; ++step) {
      std::vector<FramePairSample> batch;
      batch.reserve(cfg.batch_size);
      for (std::size_t b = 0; b < cfg.batch_size; ++b) batch.push_back(source.draw(rng));
      double loss = 0.0;
      try {
        loss = train_step(result.params, opt, batch, lr, cfg.sinkhorn_iterations, &clamped);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " (epoch " + std::to_string(epoch + 1) + ", step " +
                             std::to_string(step + 1) + ")");
      }
      total += loss * static_cast<double>(batch.size());
      count += batch.size();
    }
    result.curve.push_back({epoch + 1, total / static_cast<double>(count), lr, clamped});
  }
  return result;
}

std::vector<FramePairSample> random_batch(std::mt19937_64& rng, std::size_t appearance_dim, std::size_t min_cands,
                                          std::size_t max_cands, MapDims dims) {
  if (min_cands == 0 || min_cands > max_cands) throw std::invalid_argument("invalid candidate count range");
  std::uniform_int_distribution<std::size_t> count(min_cands, max_cands);
  std::uniform_int_distribution<std::size_t> cell(0, dims.height * dims.width - 1);
  std::uniform_real_distribution<double> score(0.05, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0 / std::sqrt(static_cast<double>(appearance_dim)));
  auto side = [&]() {
    PaddedCandidates p;
    const std::size_t n = count(rng);
    std::set<std::size_t> used;
    while (p.candidates.size() < n) {
      const std::size_t idx = cell(rng);
      if (!used.insert(idx).second) continue;
      Candidate c;
      c.location = {static_cast<int>(idx / dims.width), static_cast<int>(idx % dims.width)};
      c.score = score(rng);
      for (std::size_t k = 0; k < appearance_dim; ++k) c.appearance.push_back(noise(rng));
      p.candidates.push_back(std::move(c));
      p.valid.push_back(true);
    }
    return p;
  };

  std::vector<FramePairSample> batch(2);
  for (auto& s : batch) {
    s.dims = dims;
    s.prev = side();
    s.curr = side();
  }
  batch[0].kind = PairKind::Real;
  batch[0].gt.push_back({std::uniform_int_distribution<std::size_t>(0, batch[0].prev.candidates.size() - 1)(rng),
                         std::uniform_int_distribution<std::size_t>(0, batch[0].curr.candidates.size() - 1)(rng)});

  // Synthetic: a random partial permutation, leftovers to the dustbin.
  auto& syn = batch[1];
  syn.kind = PairKind::Synthetic;
  std::vector<std::size_t> perm(syn.curr.candidates.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t np = syn.prev.candidates.size();
  const std::size_t matched = std::min(np, perm.size()) - 1;
  std::vector<bool> curr_used(perm.size(), false);
  for (std::size_t i = 0; i < np; ++i) {
    if (i < matched) {
      syn.gt.push_back({i, perm[i]});
      curr_used[perm[i]] = true;
    } else {
      syn.gt.push_back({i, std::nullopt});
    }
  }
  for (std::size_t j = 0; j < perm.size(); ++j)
    if (!curr_used[j]) syn.gt.push_back({std::nullopt, j});
  return batch;
}

dm::GradCheckReport check_loss_gradients(const ModelDims& dims, std::uint64_t seed, double step, int iterations) {
  ModelParams params = init_model(dims, seed);
  std::mt19937_64 rng(seed);
  const auto batch = random_batch(rng, dims.appearance_dim, 3, 5);
  std::vector<std::string> names;
  std::vector<dm::Tensor*> leaves;
  for (auto& [name, t] : params.learnable()) {
    names.push_back(name);
    leaves.push_back(&t);
  }
  const dm::ScalarFunction f = [&](dm::Tape& tape, std::span<const dm::Var> vars) {
    std::map<std::string, dm::Var> preset;
    for (std::size_t i = 0; i < names.size(); ++i) preset.emplace(names[i], vars[i]);
    Bound bound(tape, params, std::move(preset));
    return batch_loss(bound, batch, dm::Mode::Train, iterations).total;
  };
  return dm::grad_check(f, leaves, step);
}

void write_loss_curve(const std::vector<EpochStats>& curve, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "epoch,mean_loss,lr,clamped\n";
  for (const auto& e : curve) out << e.epoch << ',' << e.mean_loss << ',' << e.lr << ',' << e.clamped << '\n';
}

}  // namespace candtrack

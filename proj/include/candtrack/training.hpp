#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "candtrack/diffmath.hpp"
#include "candtrack/matcher.hpp"
#include "candtrack/model.hpp"
#include "candtrack/scoremap.hpp"
#include "candtrack/simulator.hpp"

namespace candtrack {

inline constexpr double kLossClampFloor = 1e-12;

// One supervised correspondence. nullopt on either side means the dustbin.
struct GtPair {
  std::optional<std::size_t> prev;
  std::optional<std::size_t> curr;
  friend bool operator==(const GtPair&, const GtPair&) = default;
};

enum class PairKind { Real, Synthetic };

struct FramePairSample {
  PaddedCandidates prev;
  PaddedCandidates curr;
  std::vector<GtPair> gt;
  PairKind kind = PairKind::Synthetic;
  MapDims dims;
};

// Throws std::invalid_argument when a pair references an artificial or
// out-of-range candidate, or a candidate appears in more than one pair.
void validate_sample(const FramePairSample& s);

struct LossValue {
  double value = 0.0;
  std::size_t clamped = 0;  // entries raised to the 1e-12 floor
};

// -log A[l', l] with dustbin indices mapped to the last row / column.
LossValue loss_partial(const AssignmentMatrix& a, const GtPair& pair);
// Sum of loss_partial over `pairs`; throws on an empty set.
LossValue loss_self(const AssignmentMatrix& a, std::span<const GtPair> pairs);

// Differentiable variants on log A (as returned by log_sinkhorn). Entries
// below log(1e-12) are clamped and pass no gradient; `clamped` counts them.
dm::Var loss_partial(dm::Var log_a, const GtPair& pair, std::size_t* clamped = nullptr);
dm::Var loss_self(dm::Var log_a, std::span<const GtPair> pairs, std::size_t* clamped = nullptr);

struct AugmentConfig {
  double max_jitter = 2.0;          // cells, per coordinate
  double score_scale = 0.2;         // δ: multiplicative factor in [1-δ, 1+δ]
  double appearance_noise = 0.05;   // additive Gaussian std
  double removal_prob = 0.15;       // per side
  std::size_t pad_to = 5;
};

// Pairs a frame's candidates with an augmented copy of themselves. The copy is
// jittered in location, score and appearance; with `removal_prob` per side one
// candidate is dropped and recorded as a dustbin correspondence.
FramePairSample make_synthetic_pair(std::span<const Candidate> cands, const ScoreMap& map,
                                    std::size_t appearance_dim, std::mt19937_64& rng,
                                    const AugmentConfig& aug);

// Index of the valid candidate nearest the visible GT target (within `radius`).
std::optional<std::size_t> target_candidate(const SequenceFrame& frame, const PaddedCandidates& cands,
                                            double radius = 2.0);

// Consecutive-frame pair supervised by the target correspondence only.
// nullopt when the target is found in neither frame.
std::optional<FramePairSample> make_real_pair(const SequenceFrame& prev, const SequenceFrame& curr,
                                              std::size_t appearance_dim, std::mt19937_64& rng,
                                              std::size_t pad_to = 5, double tau = kDefaultTau);

enum class MiningCategory { D, H, G, J, K, OTHER };

const char* category_name(MiningCategory c);

std::vector<MiningCategory> mine_categories(const TrackerLog& log, double match_radius = 2.0);

// Draws (pool, item) indices with probabilities proportional to the pool
// weights; empty pools are skipped and the remaining weights renormalized.
class WeightedPoolSampler {
 public:
  WeightedPoolSampler(std::vector<double> weights, std::vector<std::size_t> pool_sizes);
  bool empty() const { return total_ == 0.0; }
  std::pair<std::size_t, std::size_t> draw(std::mt19937_64& rng) const;

 private:
  std::vector<double> weights_;
  std::vector<std::size_t> sizes_;
  double total_ = 0.0;
};

struct FrameRef {
  std::size_t sequence = 0;
  std::size_t frame = 0;
};

// Mined frame pools of a training set.
struct TrainingPools {
  // Real consecutive pairs (reference = current frame) by category of
  // (previous, current): HH, HK, HG.
  std::vector<FrameRef> real_hh, real_hk, real_hg;
  // Frames for synthetic pairs by category: H, K, J.
  std::vector<FrameRef> synth_h, synth_k, synth_j;
};

TrainingPools mine_training_pools(std::span<const SequenceRecord> sequences, double eta = 0.25,
                                  double tau = kDefaultTau);

struct TrainConfig {
  std::size_t epochs = 15;
  double lr = 1e-4;
  double lr_decay = 0.2;
  std::size_t decay_every = 6;
  std::size_t batch_size = 16;
  std::size_t samples_per_epoch = 6400;
  std::uint64_t seed = 0;
  double real_fraction = 0.5;
  std::vector<double> real_ratios = {10.0, 1.0, 1.0};   // HH:HK:HG
  std::vector<double> synth_ratios = {2.0, 1.0, 1.0};   // H:K:J
  AugmentConfig augment;
  int sinkhorn_iterations = kDefaultSinkhornIterations;
  double eta = 0.25;
  double tau = kDefaultTau;
  ModelDims dims;
};

// Draws one training sample per the configured real/synthetic and category ratios.
class SampleSource {
 public:
  SampleSource(std::span<const SequenceRecord> sequences, const TrainConfig& cfg);

  FramePairSample draw(std::mt19937_64& rng) const;
  const TrainingPools& pools() const { return pools_; }

 private:
  std::span<const SequenceRecord> sequences_;
  TrainConfig cfg_;
  TrainingPools pools_;
  WeightedPoolSampler real_;
  WeightedPoolSampler synth_;
  std::size_t appearance_dim_;
};

// log A for one sample, given encodings of all its (padded) candidates.
dm::Var pair_log_assignment(Bound& params, dm::Var z_prev, dm::Var z_curr, int iterations);

struct BatchLoss {
  dm::Var total;  // mean per-sample loss
  std::size_t clamped = 0;
};

// Encodes every candidate of the batch in one pass (batch-norm statistics
// over the whole minibatch), then sums per-sample L_sup / L_self.
BatchLoss batch_loss(Bound& params, std::span<const FramePairSample> batch, dm::Mode mode, int iterations);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  void step(std::map<std::string, dm::Tensor>& params, const std::map<std::string, dm::Tensor>& grads, double lr);

 private:
  AdamConfig cfg_;
  std::map<std::string, dm::Tensor> m_, v_;
  std::size_t t_ = 0;
};

// One optimizer step on `batch`; returns the batch loss before the update.
// Throws NumericalError on a non-finite loss or gradient.
double train_step(ModelParams& params, Adam& opt, std::span<const FramePairSample> batch, double lr,
                  int iterations, std::size_t* clamped = nullptr);

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  std::size_t clamped = 0;  // loss entries clamped at the floor
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochStats> curve;
};

TrainResult train(std::span<const SequenceRecord> sequences, const TrainConfig& cfg);

// Random real + synthetic minibatch with `min_cands`..`max_cands` candidates per
// frame (no padding), for gradient checks and benchmarks.
std::vector<FramePairSample> random_batch(std::mt19937_64& rng, std::size_t appearance_dim, std::size_t min_cands,
                                          std::size_t max_cands, MapDims dims = {30, 30});

// Finite-difference check of L_tot (train mode) through encoder, GNN and
// Sinkhorn over every learnable tensor of a freshly initialized model.
dm::GradCheckReport check_loss_gradients(const ModelDims& dims, std::uint64_t seed, double step = 1e-4,
                                         int iterations = kDefaultSinkhornIterations);

void write_loss_curve(const std::vector<EpochStats>& curve, const std::filesystem::path& path);

}  // namespace candtrack

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace candtrack {

inline constexpr double kDefaultConfidenceFloor = 0.5;

// One labelled feature of a memory sample.
struct LabelledFeature {
  std::vector<double> x;
  double y = 0.0;
};

struct MemorySample {
  std::int64_t frame = 0;
  std::vector<LabelledFeature> payload;
  double age_weight = 1.0;  // α_k
  double confidence = 1.0;  // β_k
};

using Theta = std::span<const double>;

struct OnlineLossSpec {
  double regularizer_weight = 0.1;  // λ
  std::function<double(Theta)> regularizer;                          // R(θ)
  std::function<double(Theta, const MemorySample&)> data_term;       // Q(θ; x_k, y_k)
  double gamma = 0.01;
  std::size_t capacity = 50;
  double confidence_floor = kDefaultConfidenceFloor;

  // R = ||θ||², Q = Σ (θ·x - y)² over the sample's payload.
  static OnlineLossSpec ridge(double lambda, double gamma, std::size_t capacity,
                              double floor = kDefaultConfidenceFloor);
};

// β = sqrt(σ) while the selected object is the initial target, σ otherwise.
double confidence(double sigma, bool selected_is_initial);

// Age weights anchored at the newest sample (last entry = 1), each older entry
// (1 - γ) times its successor. Only the length of `weights` is used.
std::vector<double> decay_age_weights(std::span<const double> weights, double gamma);

// argmin_k α_k β_k, lowest index on ties.
std::size_t choose_replacement(std::span<const MemorySample> samples);

// J(θ) = λR(θ) + Σ w_k Q(θ; x_k, y_k), w_k = α_k β_k, zero below the confidence floor.
double online_loss(const OnlineLossSpec& spec, std::span<const MemorySample> samples, Theta theta);

// Fixed-capacity sample memory with confidence-aware replacement.
class SampleMemory {
 public:
  explicit SampleMemory(OnlineLossSpec spec);

  // Ages existing samples by (1 - γ), evicts the argmin α·β sample when full,
  // then stores `sample` with α = 1. Returns the evicted sample's frame, if any.
  std::optional<std::int64_t> insert(std::int64_t frame, std::vector<LabelledFeature> payload, double beta);

  const std::vector<MemorySample>& samples() const { return samples_; }
  const OnlineLossSpec& spec() const { return spec_; }

  double loss(Theta theta) const { return online_loss(spec_, samples_, theta); }

  // Closed-form minimizer of J for the ridge spec.
  std::vector<double> fit_ridge(std::size_t dim) const;

 private:
  OnlineLossSpec spec_;
  std::vector<MemorySample> samples_;
};

}  // namespace candtrack

#include "candtrack/memory.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace candtrack {

OnlineLossSpec OnlineLossSpec::ridge(double lambda, double gamma, std::size_t capacity, double floor) {
  OnlineLossSpec s;
  s.regularizer_weight = lambda;
  s.gamma = gamma;
  s.capacity = capacity;
  s.confidence_floor = floor;
  s.regularizer = [](Theta theta) {
    double r = 0.0;
    for (double t : theta) r += t * t;
    return r;
  };
  s.data_term = [](Theta theta, const MemorySample& sample) {
    double q = 0.0;
    for (const auto& f : sample.payload) {
      if (f.x.size() != theta.size()) throw std::invalid_argument("feature/theta dimension mismatch");
      double pred = 0.0;
      for (std::size_t i = 0; i < theta.size(); ++i) pred += theta[i] * f.x[i];
      q += (pred - f.y) * (pred - f.y);
    }
    return q;
  };
  return s;
}

double confidence(double sigma, bool selected_is_initial) {
  if (!(sigma >= 0.0 && sigma <= 1.0)) throw std::invalid_argument("sigma must lie in [0,1]");
  return selected_is_initial ? std::sqrt(sigma) : sigma;
}

std::vector<double> decay_age_weights(std::span<const double> weights, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0,1]");
  std::vector<double> out(weights.size());
  double alpha = 1.0;
  for (std::size_t k = out.size(); k-- > 0;) {
    out[k] = alpha;
    alpha *= 1.0 - gamma;
  }
  return out;
}

std::size_t choose_replacement(std::span<const MemorySample> samples) {
  if (samples.empty()) throw std::invalid_argument("choose_replacement on an empty memory");
  std::size_t best = 0;
  for (std::size_t k = 1; k < samples.size(); ++k) {
    if (samples[k].age_weight * samples[k].confidence < samples[best].age_weight * samples[best].confidence) {
      best = k;
    }
  }
  return best;
}

double online_loss(const OnlineLossSpec& spec, std::span<const MemorySample> samples, Theta theta) {
  double j = spec.regularizer_weight * (spec.regularizer ? spec.regularizer(theta) : 0.0);
  for (const auto& s : samples) {
    if (s.confidence < spec.confidence_floor) continue;
    const double w = s.age_weight * s.confidence;
    if (w == 0.0) continue;
    j += w * spec.data_term(theta, s);
  }
  return j;
}

SampleMemory::SampleMemory(OnlineLossSpec spec) : spec_(std::move(spec)) {
  if (spec_.capacity == 0) throw std::invalid_argument("memory capacity must be positive");
  if (!(spec_.gamma >= 0.0 && spec_.gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0,1]");
}

std::optional<std::int64_t> SampleMemory::insert(std::int64_t frame, std::vector<LabelledFeature> payload,
                                                 double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("confidence must lie in [0,1]");
  for (auto& s : samples_) s.age_weight *= 1.0 - spec_.gamma;
  std::optional<std::int64_t> evicted;
  if (samples_.size() >= spec_.capacity) {
    const std::size_t k = choose_replacement(samples_);
    evicted = samples_[k].frame;
    samples_.erase(samples_.begin() + static_cast<std::ptrdiff_t>(k));
  }
  samples_.push_back({frame, std::move(payload), 1.0, beta});
  return evicted;
}

std::vector<double> SampleMemory::fit_ridge(std::size_t dim) const {
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(dim, dim) * spec_.regularizer_weight;
  Eigen::VectorXd b = Eigen::VectorXd::Zero(dim);
  for (const auto& s : samples_) {
    if (s.confidence < spec_.confidence_floor) continue;
    const double w = s.age_weight * s.confidence;
    for (const auto& f : s.payload) {
      if (f.x.size() != dim) throw std::invalid_argument("feature dimension mismatch");
      const Eigen::Map<const Eigen::VectorXd> x(f.x.data(), static_cast<Eigen::Index>(dim));
      a.noalias() += w * x * x.transpose();
      b.noalias() += w * f.y * x;
    }
  }
  const Eigen::VectorXd theta = a.ldlt().solve(b);
  return {theta.data(), theta.data() + theta.size()};
}

}  // namespace candtrack

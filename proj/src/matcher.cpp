#include "candtrack/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "candtrack/errors.hpp"

namespace candtrack {

dm::Var similarity(dm::Var h_prev, dm::Var h_curr) {
  if (h_prev.cols() != h_curr.cols()) throw std::invalid_argument("similarity: embedding widths differ");
  return dm::matmul(h_prev, dm::transpose(h_curr));
}

SimilarityMatrix similarity(const dm::Tensor& h_prev, const dm::Tensor& h_curr, double dustbin_score) {
  dm::Tape tape;
  const dm::Var s = similarity(tape.constant(h_prev), tape.constant(h_curr));
  return {s.value(), dustbin_score};
}

dm::Var log_sinkhorn(dm::Var scores, dm::Var dustbin, int iterations) {
  if (iterations < 1) throw std::invalid_argument("sinkhorn needs at least one iteration");
  const dm::Tensor& sv = scores.value();
  if (!sv.all_finite() || !dustbin.value().all_finite()) {
    throw NumericalError("sinkhorn received non-finite scores");
  }
  dm::Tape& tape = scores.tape();
  const std::size_t n_prev = sv.rows();
  const std::size_t n_curr = sv.cols();

  const dm::Var z = dm::augment_border(scores, dustbin);
  dm::Tensor mu(n_prev + 1, 1, 0.0);
  mu[n_prev] = std::log(static_cast<double>(n_curr));
  dm::Tensor nu(1, n_curr + 1, 0.0);
  nu[n_curr] = std::log(static_cast<double>(n_prev));
  const dm::Var log_mu = tape.constant(std::move(mu));
  const dm::Var log_nu = tape.constant(std::move(nu));

  dm::Var u = tape.constant(dm::Tensor(n_prev + 1, 1, 0.0));
  dm::Var v = tape.constant(dm::Tensor(1, n_curr + 1, 0.0));
  for (int it = 0; it < iterations; ++it) {
    u = dm::sub(log_mu, dm::logsumexp_rows(dm::add(z, v)));
    v = dm::sub(log_nu, dm::logsumexp_cols(dm::add(z, u)));
  }
  return dm::add(dm::add(z, u), v);
}

AssignmentMatrix sinkhorn(const SimilarityMatrix& s, int iterations) {
  dm::Tape tape;
  const dm::Var log_a = log_sinkhorn(tape.constant(s.values), tape.constant(dm::Tensor::scalar(s.dustbin_score)),
                                     iterations);
  dm::Tensor probs = log_a.value();
  for (double& p : probs.data()) p = std::exp(p);
  return {std::move(probs), iterations};
}

MatchSet extract_matches(const AssignmentMatrix& a) {
  const dm::Tensor& p = a.probs;
  const std::size_t np = a.prev_count();
  const std::size_t nc = a.curr_count();

  std::vector<std::size_t> row_best(np), col_best(nc);
  for (std::size_t i = 0; i < np; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j <= nc; ++j)
      if (p(i, j) > p(i, best)) best = j;
    row_best[i] = best;
  }
  for (std::size_t j = 0; j < nc; ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i <= np; ++i)
      if (p(i, j) > p(best, j)) best = i;
    col_best[j] = best;
  }

  MatchSet m;
  m.prev.resize(np);
  m.curr.resize(nc);
  for (std::size_t i = 0; i < np; ++i) m.prev[i] = {std::nullopt, p(i, nc)};
  for (std::size_t j = 0; j < nc; ++j) m.curr[j] = {std::nullopt, p(np, j)};
  for (std::size_t i = 0; i < np; ++i) {
    const std::size_t j = row_best[i];
    if (j < nc && col_best[j] == i) {
      m.prev[i] = {j, p(i, j)};
      m.curr[j] = {i, p(i, j)};
    }
  }
  return m;
}

double MarginalResiduals::max() const { return std::max({real_rows, real_cols, dustbin_row, dustbin_col}); }

MarginalResiduals marginal_residuals(const AssignmentMatrix& a) {
  const dm::Tensor& p = a.probs;
  const std::size_t np = a.prev_count();
  const std::size_t nc = a.curr_count();
  MarginalResiduals r;
  double matched = 0.0;
  for (std::size_t i = 0; i < np; ++i)
    for (std::size_t j = 0; j < nc; ++j) matched += p(i, j);
  for (std::size_t i = 0; i < np; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j <= nc; ++j) s += p(i, j);
    r.real_rows = std::max(r.real_rows, std::abs(s - 1.0));
  }
  for (std::size_t j = 0; j < nc; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i <= np; ++i) s += p(i, j);
    r.real_cols = std::max(r.real_cols, std::abs(s - 1.0));
  }
  double dust_row = 0.0, dust_col = 0.0;
  for (std::size_t j = 0; j < nc; ++j) dust_row += p(np, j);
  for (std::size_t i = 0; i < np; ++i) dust_col += p(i, nc);
  r.dustbin_row = std::abs(dust_row - (static_cast<double>(nc) - matched));
  r.dustbin_col = std::abs(dust_col - (static_cast<double>(np) - matched));
  return r;
}

}  // namespace candtrack

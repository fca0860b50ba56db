#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "candtrack/diffmath.hpp"

namespace candtrack {

inline constexpr int kDefaultSinkhornIterations = 10;

struct SimilarityMatrix {
  dm::Tensor values;  // N'×N
  double dustbin_score = 1.0;
};

/// Soft assignment with a dustbin row (index N') and dustbin column (index N).
struct AssignmentMatrix {
  dm::Tensor probs;  // (N'+1)×(N+1)
  int iterations_run = 0;

  std::size_t prev_count() const { return probs.rows() - 1; }
  std::size_t curr_count() const { return probs.cols() - 1; }
};

struct MatchEntry {
  std::optional<std::size_t> partner;  // nullopt: matched to the dustbin
  double probability = 0.0;
};

struct MatchSet {
  std::vector<MatchEntry> prev;  // one per previous-frame candidate
  std::vector<MatchEntry> curr;  // one per current-frame candidate
};

// S[i,j] = <h'_i, h_j>.
dm::Var similarity(dm::Var h_prev, dm::Var h_curr);
SimilarityMatrix similarity(const dm::Tensor& h_prev, const dm::Tensor& h_curr, double dustbin_score);

// Log-domain Sinkhorn on S augmented with a dustbin row/column (corner
// included) filled with `dustbin`. Row marginals are [1..1, N], column
// marginals [1..1, N']; each iteration normalizes rows then columns.
// Returns log A.
dm::Var log_sinkhorn(dm::Var scores, dm::Var dustbin, int iterations);

AssignmentMatrix sinkhorn(const SimilarityMatrix& s, int iterations = kDefaultSinkhornIterations);

// Mutual argmax over the augmented matrix; argmax ties resolve to the lowest index.
MatchSet extract_matches(const AssignmentMatrix& a);

struct MarginalResiduals {
  double real_rows = 0.0;    // max_i |sum_j A[i,j] - 1|, i < N'
  double real_cols = 0.0;    // max_j |sum_i A[i,j] - 1|, j < N
  double dustbin_row = 0.0;  // |sum_{j<N} A[N',j] - (N - M)|
  double dustbin_col = 0.0;  // |sum_{i<N'} A[i,N] - (N' - M)|

  double max() const;
};

MarginalResiduals marginal_residuals(const AssignmentMatrix& a);

}  // namespace candtrack

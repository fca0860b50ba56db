#pragma once

#include <span>
#include <vector>

#include "candtrack/diffmath.hpp"
#include "candtrack/model.hpp"
#include "candtrack/scoremap.hpp"

namespace candtrack {

// Rows of ψ's input: (score, row/H, col/W).
dm::Tensor candidate_geometry(std::span<const Candidate> cands, MapDims dims);

// z_i = project(appearance_i) + ψ(s_i, c_i), one row per candidate (n×D).
dm::Var encode_candidates(Bound& params, std::span<const Candidate> cands, MapDims dims,
                          dm::Mode mode);

struct EncodedCandidate {
  std::vector<double> z;
  const Candidate* source = nullptr;
};

// Infer-mode convenience wrapper that detaches the result from any tape.
std::vector<EncodedCandidate> encode_candidates(ModelParams& params, std::span<const Candidate> cands,
                                                MapDims dims);

}  // namespace candtrack

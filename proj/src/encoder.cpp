#include "candtrack/encoder.hpp"

#include <stdexcept>
#include <string>

namespace candtrack {

dm::Tensor candidate_geometry(std::span<const Candidate> cands, MapDims dims) {
  if (dims.height == 0 || dims.width == 0) throw std::invalid_argument("map dims must be positive");
  dm::Tensor g(cands.size(), 3);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const Cell c = cands[i].location;
    if (c.row < 0 || c.col < 0 || static_cast<std::size_t>(c.row) >= dims.height ||
        static_cast<std::size_t>(c.col) >= dims.width) {
      throw std::invalid_argument("candidate location outside the map");
    }
    g(i, 0) = cands[i].score;
    g(i, 1) = static_cast<double>(c.row) / static_cast<double>(dims.height);
    g(i, 2) = static_cast<double>(c.col) / static_cast<double>(dims.width);
  }
  return g;
}

dm::Var encode_candidates(Bound& params, std::span<const Candidate> cands, MapDims dims,
                          dm::Mode mode) {
  if (cands.empty()) throw std::invalid_argument("encode_candidates needs at least one candidate");
  const ModelDims& md = params.dims();
  dm::Tensor app(cands.size(), md.appearance_dim);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (cands[i].appearance.size() != md.appearance_dim) {
      throw std::invalid_argument("appearance vector has dimension " +
                                  std::to_string(cands[i].appearance.size()) + ", expected " +
                                  std::to_string(md.appearance_dim));
    }
    for (std::size_t k = 0; k < md.appearance_dim; ++k) app(i, k) = cands[i].appearance[k];
  }

  dm::Tape& tape = params.tape();
  dm::Var x = tape.constant(candidate_geometry(cands, dims));
  const std::size_t hidden = md.psi_hidden.size();
  for (std::size_t k = 0; k < hidden; ++k) {
    const std::string p = "encoder.psi." + std::to_string(k);
    x = dm::linear(x, params(p + ".weight"), params(p + ".bias"));
    x = dm::batchnorm(x, params(p + ".bn.gamma"), params(p + ".bn.beta"), params.bn_state(p + ".bn"), mode);
    x = dm::relu(x);
  }
  const std::string last = "encoder.psi." + std::to_string(hidden);
  const dm::Var psi = dm::linear(x, params(last + ".weight"), params(last + ".bias"));
  const dm::Var f = dm::linear(tape.constant(std::move(app)), params("encoder.appearance.weight"),
                               params("encoder.appearance.bias"));
  return dm::add(f, psi);
}

std::vector<EncodedCandidate> encode_candidates(ModelParams& params, std::span<const Candidate> cands,
                                                MapDims dims) {
  dm::Tape tape;
  Bound bound(tape, params, false);
  const dm::Var z = encode_candidates(bound, cands, dims, dm::Mode::Infer);
  std::vector<EncodedCandidate> out;
  out.reserve(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) {
    auto row = z.value().row(i);
    out.push_back({std::vector<double>(row.begin(), row.end()), &cands[i]});
  }
  return out;
}

}  // namespace candtrack

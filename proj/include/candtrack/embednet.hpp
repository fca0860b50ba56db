#pragma once

#include "candtrack/diffmath.hpp"
#include "candtrack/model.hpp"

namespace candtrack {

struct PairEmbeddings {
  dm::Var prev;  // N'×D
  dm::Var curr;  // N×D
};

// Alternating self/cross attention message passing over both frames followed by
// the final projection. Each layer updates x <- x + mlp([x | message]) using the
// pre-update states of both frames. Cross layers use the same parameters in
// both directions.
PairEmbeddings embed_pair(Bound& params, dm::Var z_prev, dm::Var z_curr);

}  // namespace candtrack

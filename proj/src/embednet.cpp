#include "candtrack/embednet.hpp"

#include <stdexcept>
#include <string>

namespace candtrack {

namespace {

dm::Var residual_update(Bound& params, const std::string& prefix, dm::Var x, dm::Var message) {
  const dm::Var parts[] = {x, message};
  dm::Var h = dm::linear(dm::concat_cols(parts), params(prefix + ".mlp.0.weight"),
                         params(prefix + ".mlp.0.bias"));
  h = dm::linear(dm::relu(h), params(prefix + ".mlp.1.weight"), params(prefix + ".mlp.1.bias"));
  return dm::add(x, h);
}

}  // namespace

PairEmbeddings embed_pair(Bound& params, dm::Var z_prev, dm::Var z_curr) {
  if (z_prev.rows() == 0 || z_curr.rows() == 0) throw std::invalid_argument("embed_pair needs candidates on both sides");
  const ModelDims& md = params.dims();
  if (z_prev.cols() != md.embed_dim || z_curr.cols() != md.embed_dim) {
    throw std::invalid_argument("embed_pair input width does not match embed_dim");
  }

  dm::Var prev = z_prev;
  dm::Var curr = z_curr;
  for (std::size_t l = 0; l < md.gnn_layers; ++l) {
    const std::string p = "embed." + std::to_string(l);
    const dm::AttentionWeights att = params.attention(p);
    const bool self_layer = ModelParams::is_self_layer(l);
    const dm::Var msg_prev = dm::multi_head_attention(prev, self_layer ? prev : curr, att, md.heads);
    const dm::Var msg_curr = dm::multi_head_attention(curr, self_layer ? curr : prev, att, md.heads);
    prev = residual_update(params, p, prev, msg_prev);
    curr = residual_update(params, p, curr, msg_curr);
  }
  const dm::Var w = params("embed.final.weight");
  const dm::Var b = params("embed.final.bias");
  return {dm::linear(prev, w, b), dm::linear(curr, w, b)};
}

}  // namespace candtrack

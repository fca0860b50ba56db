#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "candtrack/diffmath.hpp"

namespace candtrack {

struct ModelDims {
  std::size_t appearance_dim = 8;   // d_a
  std::size_t embed_dim = 256;      // D
  std::size_t heads = 4;
  std::size_t gnn_layers = 4;       // alternating self, cross, self, cross
  std::vector<std::size_t> psi_hidden = {32, 64, 128};

  void validate() const;
  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

inline constexpr double kInitialDustbinScore = 1.0;

/// Every tensor of the association network, keyed by name.
///
/// Learnable tensors:
///   encoder.psi.{k}.weight / .bias            linear layers of the score/position MLP
///   encoder.psi.{k}.bn.gamma / .bn.beta       batch norm after every hidden layer
///   encoder.appearance.weight / .bias         appearance projection d_a -> D
///   embed.{l}.{q,k,v,o}.weight / .bias        attention projections of GNN layer l
///   embed.{l}.mlp.{0,1}.weight / .bias        residual update MLP 2D -> 2D -> D
///   embed.final.weight / .bias                final projection D -> D
///   matcher.dustbin                           scalar dustbin score
/// Buffers (not optimized):
///   encoder.psi.{k}.bn.running_mean / .bn.running_var
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(ModelDims dims);

  const ModelDims& dims() const { return dims_; }

  std::map<std::string, dm::Tensor>& learnable() { return learnable_; }
  const std::map<std::string, dm::Tensor>& learnable() const { return learnable_; }
  std::map<std::string, dm::Tensor>& buffers() { return buffers_; }
  const std::map<std::string, dm::Tensor>& buffers() const { return buffers_; }

  dm::Tensor& tensor(const std::string& name);
  const dm::Tensor& tensor(const std::string& name) const;
  std::size_t learnable_count() const;

  // Layer l is a self layer when l is even.
  static bool is_self_layer(std::size_t l) { return l % 2 == 0; }

  nlohmann::json to_json() const;
  static ModelParams from_json(const nlohmann::json& j);

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

 private:
  ModelDims dims_;
  std::map<std::string, dm::Tensor> learnable_;
  std::map<std::string, dm::Tensor> buffers_;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, unit batch-norm
// scale, zero bias on the last layer of each update MLP, dustbin score 1.
ModelParams init_model(const ModelDims& dims, std::uint64_t seed);

/// Binds model tensors to leaves of one tape, created on first use.
class Bound {
 public:
  Bound(dm::Tape& tape, ModelParams& params, bool requires_grad);
  // Pre-created leaves (used by gradient checks that own the leaf Vars).
  Bound(dm::Tape& tape, ModelParams& params, std::map<std::string, dm::Var> preset);

  dm::Var operator()(const std::string& name);
  dm::BatchNormState bn_state(const std::string& prefix);
  dm::AttentionWeights attention(const std::string& prefix);

  const ModelDims& dims() const { return params_->dims(); }
  dm::Tape& tape() { return *tape_; }

  // Gradients of every learnable tensor touched on the tape (after backward).
  std::map<std::string, dm::Tensor> gradients() const;

 private:
  dm::Tape* tape_;
  ModelParams* params_;
  bool requires_grad_;
  std::map<std::string, dm::Var> bound_;
};

}  // namespace candtrack

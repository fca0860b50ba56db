#include "candtrack/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "candtrack/errors.hpp"

namespace candtrack {

namespace {

void add_linear(std::map<std::string, dm::Tensor>& m, const std::string& prefix, std::size_t in,
                std::size_t out) {
  m.emplace(prefix + ".weight", dm::Tensor(in, out, 0.0));
  m.emplace(prefix + ".bias", dm::Tensor::vector(std::vector<double>(out, 0.0)));
}

std::string layer_prefix(std::size_t l) { return "embed." + std::to_string(l); }

}  // namespace

void ModelDims::validate() const {
  if (appearance_dim == 0 || embed_dim == 0) throw std::invalid_argument("model dims must be positive");
  if (heads == 0 || embed_dim % heads != 0) {
    throw std::invalid_argument("embed_dim must be divisible by heads");
  }
  if (gnn_layers % 2 != 0) throw std::invalid_argument("gnn_layers must be even (self/cross pairs)");
  for (std::size_t h : psi_hidden)
    if (h == 0) throw std::invalid_argument("psi hidden widths must be positive");
}

ModelParams::ModelParams(ModelDims dims) : dims_(std::move(dims)) {
  dims_.validate();
  const std::size_t d = dims_.embed_dim;

  std::size_t in = 3;
  for (std::size_t k = 0; k < dims_.psi_hidden.size(); ++k) {
    const std::string p = "encoder.psi." + std::to_string(k);
    const std::size_t out = dims_.psi_hidden[k];
    add_linear(learnable_, p, in, out);
    learnable_.emplace(p + ".bn.gamma", dm::Tensor::vector(std::vector<double>(out, 1.0)));
    learnable_.emplace(p + ".bn.beta", dm::Tensor::vector(std::vector<double>(out, 0.0)));
    buffers_.emplace(p + ".bn.running_mean", dm::Tensor::vector(std::vector<double>(out, 0.0)));
    buffers_.emplace(p + ".bn.running_var", dm::Tensor::vector(std::vector<double>(out, 1.0)));
    in = out;
  }
  add_linear(learnable_, "encoder.psi." + std::to_string(dims_.psi_hidden.size()), in, d);
  add_linear(learnable_, "encoder.appearance", dims_.appearance_dim, d);

  for (std::size_t l = 0; l < dims_.gnn_layers; ++l) {
    const std::string p = layer_prefix(l);
    for (const char* proj : {"q", "k", "v", "o"}) add_linear(learnable_, p + "." + proj, d, d);
    add_linear(learnable_, p + ".mlp.0", 2 * d, 2 * d);
    add_linear(learnable_, p + ".mlp.1", 2 * d, d);
  }
  add_linear(learnable_, "embed.final", d, d);
  learnable_.emplace("matcher.dustbin", dm::Tensor::scalar(kInitialDustbinScore));
}

dm::Tensor& ModelParams::tensor(const std::string& name) {
  if (auto it = learnable_.find(name); it != learnable_.end()) return it->second;
  if (auto it = buffers_.find(name); it != buffers_.end()) return it->second;
  throw std::out_of_range("unknown model tensor '" + name + "'");
}

const dm::Tensor& ModelParams::tensor(const std::string& name) const {
  return const_cast<ModelParams*>(this)->tensor(name);
}

std::size_t ModelParams::learnable_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : learnable_) n += t.size();
  return n;
}

nlohmann::json ModelParams::to_json() const {
  nlohmann::json dims = {{"appearance_dim", dims_.appearance_dim},
                         {"embed_dim", dims_.embed_dim},
                         {"heads", dims_.heads},
                         {"gnn_layers", dims_.gnn_layers},
                         {"psi_hidden", dims_.psi_hidden}};
  nlohmann::json tensors = nlohmann::json::object();
  auto put = [&tensors](const std::string& name, const dm::Tensor& t) {
    tensors[name] = {{"shape", t.shape()},
                     {"data", std::vector<double>(t.data().begin(), t.data().end())}};
  };
  for (const auto& [name, t] : learnable_) put(name, t);
  for (const auto& [name, t] : buffers_) put(name, t);
  return {{"format", 1}, {"dims", dims}, {"tensors", tensors}};
}

ModelParams ModelParams::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<int>() != 1) throw FormatError("unsupported weights format version");
    const auto& jd = j.at("dims");
    ModelDims dims;
    dims.appearance_dim = jd.at("appearance_dim").get<std::size_t>();
    dims.embed_dim = jd.at("embed_dim").get<std::size_t>();
    dims.heads = jd.at("heads").get<std::size_t>();
    dims.gnn_layers = jd.at("gnn_layers").get<std::size_t>();
    dims.psi_hidden = jd.at("psi_hidden").get<std::vector<std::size_t>>();
    try {
      dims.validate();
    } catch (const std::invalid_argument& e) {
      throw FormatError(std::string("invalid weights dims: ") + e.what());
    }

    ModelParams p(dims);
    const auto& jt = j.at("tensors");
    if (!jt.is_object()) throw FormatError("weights 'tensors' must be an object");
    std::size_t seen = 0;
    for (const auto& [name, entry] : jt.items()) {
      dm::Tensor* dst = nullptr;
      try {
        dst = &p.tensor(name);
      } catch (const std::out_of_range&) {
        throw FormatError("unknown tensor name '" + name + "' in weights file");
      }
      auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      auto data = entry.at("data").get<std::vector<double>>();
      if (shape != dst->shape()) throw FormatError("tensor '" + name + "' has the wrong shape");
      dm::Tensor t(std::move(shape), std::move(data));
      if (!t.all_finite()) throw FormatError("tensor '" + name + "' contains non-finite values");
      *dst = std::move(t);
      ++seen;
    }
    if (seen != p.learnable_.size() + p.buffers_.size()) {
      throw FormatError("weights file is missing tensors");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed weights file: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("malformed weights file: ") + e.what());
  }
}

ModelParams init_model(const ModelDims& dims, std::uint64_t seed) {
  ModelParams p(dims);
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : p.learnable()) {
    const bool is_weight = name.ends_with(".weight");
    const bool is_bias = name.ends_with(".bias");
    if (!is_weight && !is_bias) continue;
    const std::string stem = name.substr(0, name.rfind('.'));
    const std::size_t fan_in = p.tensor(stem + ".weight").rows();
    if (is_bias && stem.ends_with(".mlp.1")) continue;  // zero, as in the reference matcher
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : t.data()) v = u(rng);
  }
  return p;
}

Bound::Bound(dm::Tape& tape, ModelParams& params, bool requires_grad)
    : tape_(&tape), params_(&params), requires_grad_(requires_grad) {}

Bound::Bound(dm::Tape& tape, ModelParams& params, std::map<std::string, dm::Var> preset)
    : tape_(&tape), params_(&params), requires_grad_(true), bound_(std::move(preset)) {}

dm::Var Bound::operator()(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  auto it = params_->learnable().find(name);
  if (it == params_->learnable().end()) throw std::out_of_range("unknown learnable tensor '" + name + "'");
  dm::Var v = tape_->leaf(it->second, requires_grad_);
  bound_.emplace(name, v);
  return v;
}

dm::BatchNormState Bound::bn_state(const std::string& prefix) {
  return dm::BatchNormState{&params_->buffers().at(prefix + ".running_mean"),
                            &params_->buffers().at(prefix + ".running_var")};
}

dm::AttentionWeights Bound::attention(const std::string& prefix) {
  auto& self = *this;
  return {self(prefix + ".q.weight"), self(prefix + ".q.bias"), self(prefix + ".k.weight"),
          self(prefix + ".k.bias"),   self(prefix + ".v.weight"), self(prefix + ".v.bias"),
          self(prefix + ".o.weight"), self(prefix + ".o.bias")};
}

std::map<std::string, dm::Tensor> Bound::gradients() const {
  std::map<std::string, dm::Tensor> out;
  for (const auto& [name, v] : bound_) out.emplace(name, v.grad());
  return out;
}

}  // namespace candtrack

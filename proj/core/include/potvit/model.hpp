#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "potvit/dataset.hpp"
#include "potvit/numerics.hpp"

namespace potvit {

// Shape of the tiny pre-LN ViT. `tokens` counts the class token plus the
// patch tokens; inputs carry tokens-1 pre-flattened patches of width patch_dim.
struct ModelConfig {
  int layers = 2;
  int heads = 2;
  int dim = 32;
  int tokens = 17;
  double mlp_ratio = 2.0;
  int classes = 4;
  int patch_dim = 16;

  int head_dim() const { return dim / heads; }
  int hidden_dim() const;
  int patches() const { return tokens - 1; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// LayerNorm epsilon shared by the float model and the integer LN (2^-10).
inline constexpr double kLayerNormEps = 1.0 / 1024.0;

struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, wk, wv, wo;  // (dim, dim), heads are contiguous column groups
  Tensor ln2_gamma, ln2_beta;
  Tensor w1;  // (dim, hidden)
  Tensor w2;  // (hidden, dim)
};

// Linear layers carry no bias. The class token is folded into row 0 of `pos`.
struct FloatModel {
  ModelConfig config;
  Tensor w_embed;  // (patch_dim, dim)
  Tensor pos;      // (tokens, dim)
  std::vector<BlockWeights> blocks;
  Tensor lnf_gamma, lnf_beta;
  Tensor w_head;  // (dim, classes)

  static FloatModel zeros(const ModelConfig& cfg);
  static FloatModel random(const ModelConfig& cfg, Rng& rng);

  // Every parameter tensor in a fixed canonical order.
  std::vector<std::string> tensor_names() const;
  Tensor& tensor(const std::string& name);
  const Tensor& tensor(const std::string& name) const;
  // The linear layers subject to weight quantization, in forward order.
  std::vector<std::string> weight_layer_names() const;
  void validate() const;
};

// Every intermediate of one forward pass, keyed by layer point:
//   input, b{l}.ln1_in, b{l}.ln1_out, b{l}.q, b{l}.k, b{l}.v, b{l}.attn
//   (heads stacked along rows), b{l}.attn_out, b{l}.ln2_in, b{l}.ln2_out,
//   b{l}.fc1_out (pre-GELU), b{l}.gelu_out, lnf_in, lnf_out, logits.
struct ActivationTrace {
  std::map<std::string, DMatrix> points;

  const DMatrix& at(const std::string& name) const;
  bool contains(const std::string& name) const { return points.count(name) != 0; }
};

// Row-stacks the same point across many traces (calibration batches).
DMatrix stack_point(const std::vector<ActivationTrace>& traces, const std::string& name);

struct ForwardResult {
  DMatrix logits;  // (1, classes)
  ActivationTrace trace;
};

double gelu(double x);
double gelu_grad(double x);
// Row-wise LayerNorm with affine parameters.
DMatrix layer_norm(const DMatrix& x, const Tensor& gamma, const Tensor& beta);
void softmax_rows(DMatrix& m);

ForwardResult forward(const FloatModel& model, const Tensor& patches);

using Gradients = std::map<std::string, DMatrix>;

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};

// Mean cross-entropy over the batch and its reverse-mode gradient for every
// parameter tensor.
LossAndGrad gradient(const FloatModel& model, std::span<const Sample> batch);
double loss(const FloatModel& model, std::span<const Sample> batch);

int predict(const FloatModel& model, const Tensor& patches);
double accuracy(const FloatModel& model, std::span<const Sample> samples);
double accuracy(const std::function<int(const Tensor&)>& classify, std::span<const Sample> samples);

struct TrainOptions {
  int epochs = 12;
  double lr = 0.05;
  double momentum = 0.9;
  int batch_size = 16;
  std::uint64_t seed = 1;
};

struct TrainResult {
  FloatModel model;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

// Minibatch SGD with momentum; deterministic for a fixed seed.
TrainResult train(const ModelConfig& cfg, const DataSplits& data, const TrainOptions& opts);

}  // namespace potvit

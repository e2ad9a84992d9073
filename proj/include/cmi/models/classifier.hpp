#pragma once

#include <torch/torch.h>

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cmi/core/errors.hpp"

namespace cmi {

struct InputShape {
  std::int64_t channels = 3;
  std::int64_t height = 32;
  std::int64_t width = 32;

  std::vector<std::int64_t> batch_dims(std::int64_t n) const { return {n, channels, height, width}; }
  std::int64_t numel() const { return channels * height * width; }
  friend bool operator==(const InputShape&, const InputShape&) = default;
};

/// Architecture descriptor: registry key plus the dataset-dependent sizes.
struct ArchSpec {
  std::string name;
  std::int64_t num_classes = 10;
  InputShape input;
};

/// Per-channel statistics of one BN layer's input over (batch, H, W).
struct LayerStats {
  torch::Tensor mean;
  torch::Tensor var;  // biased (divide by N)
};

using BatchStats = std::vector<LayerStats>;

/// Side channel filled by a traced forward pass.
struct ForwardTrace {
  std::vector<torch::Tensor> taps;    // block outputs (N,C,H,W) then penultimate (N,D)
  BatchStats stats;                   // one entry per BN layer, in call order
  std::vector<std::size_t> bn_order;  // registry index of each recorded BN call
};

struct TapInfo {
  std::string name;
  std::int64_t channels = 0;
  bool spatial = true;
};

inline LayerStats batch_mean_var(const torch::Tensor& x) {
  auto mean = x.mean({0, 2, 3});
  auto centered = x - mean.view({1, -1, 1, 1});
  auto var = centered.pow(2).mean({0, 2, 3});
  return {mean, var};
}

/// Batch normalization over NCHW input that can report the statistics of its
/// input into a ForwardTrace. In eval mode it normalizes with the stored
/// running statistics and never touches them.
class TracedBatchNorm2dImpl : public torch::nn::Module {
 public:
  explicit TracedBatchNorm2dImpl(std::int64_t channels, double eps = 1e-5, double momentum = 0.1)
      : channels_(channels), eps_(eps), momentum_(momentum) {
    weight = register_parameter("weight", torch::ones({channels}));
    bias = register_parameter("bias", torch::zeros({channels}));
    running_mean = register_buffer("running_mean", torch::zeros({channels}));
    running_var = register_buffer("running_var", torch::ones({channels}));
    num_batches_tracked = register_buffer("num_batches_tracked", torch::zeros({}, torch::kLong));
  }

  torch::Tensor forward(const torch::Tensor& x, ForwardTrace* trace = nullptr) {
    if (trace != nullptr) {
      trace->stats.push_back(batch_mean_var(x));
      trace->bn_order.push_back(index_);
    }
    if (is_training()) {
      torch::NoGradGuard ng;
      num_batches_tracked.add_(1);
    }
    return torch::batch_norm(x, weight, bias, running_mean, running_var, is_training(), momentum_,
                             eps_, /*cudnn_enabled=*/false);
  }

  std::int64_t channels() const { return channels_; }
  double eps() const { return eps_; }
  std::size_t index() const { return index_; }
  void set_index(std::size_t i) { index_ = i; }

  torch::Tensor weight, bias, running_mean, running_var, num_batches_tracked;

 private:
  std::int64_t channels_;
  double eps_;
  double momentum_;
  std::size_t index_ = 0;
};
TORCH_MODULE(TracedBatchNorm2d);

/// Hands out BN layers and remembers them in creation order. Networks create
/// their BN layers in the same order the forward pass visits them.
class BnRegistry {
 public:
  TracedBatchNorm2d make(std::int64_t channels) {
    TracedBatchNorm2d bn(channels);
    bn->set_index(layers_.size());
    layers_.push_back(bn);
    return bn;
  }
  const std::vector<TracedBatchNorm2d>& layers() const { return layers_; }

 private:
  std::vector<TracedBatchNorm2d> layers_;
};

/// Common surface of every classifier in the registry (teachers and students).
class ClassifierImpl : public torch::nn::Module {
 public:
  explicit ClassifierImpl(ArchSpec spec) : spec_(std::move(spec)) {}

  virtual torch::Tensor forward(const torch::Tensor& x, ForwardTrace* trace) = 0;
  torch::Tensor forward(const torch::Tensor& x) { return forward(x, nullptr); }

  const ArchSpec& spec() const { return spec_; }
  std::int64_t num_classes() const { return spec_.num_classes; }
  const InputShape& input_shape() const { return spec_.input; }
  const std::vector<TapInfo>& feature_taps() const { return taps_; }
  const std::vector<TracedBatchNorm2d>& bn_layers() const { return bn_.layers(); }

  /// Input dimension of the final linear layer; equals the penultimate tap width.
  virtual std::int64_t classifier_in_features() const = 0;

 protected:
  BnRegistry bn_;
  std::vector<TapInfo> taps_;

  void push_tap(ForwardTrace* trace, const torch::Tensor& t) const {
    if (trace != nullptr) trace->taps.push_back(t);
  }

 private:
  ArchSpec spec_;
};

using Classifier = std::shared_ptr<ClassifierImpl>;

inline torch::nn::Conv2d conv3x3(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false));
}

inline torch::nn::Conv2d conv1x1(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false));
}

/// Re-draws every parameter of a classifier from a seeded generator:
/// He-normal (fan-out) convolutions, PyTorch-default uniform linears,
/// unit/zero batch norm.
inline void init_classifier_parameters(torch::nn::Module& net, at::Generator gen) {
  torch::NoGradGuard ng;
  for (auto& m : net.modules(/*include_self=*/false)) {
    if (auto* conv = m->as<torch::nn::Conv2dImpl>()) {
      const auto& w = conv->weight;
      const double fan_out = static_cast<double>(w.size(0) * w.size(2) * w.size(3));
      w.normal_(0.0, std::sqrt(2.0 / fan_out), gen);
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* lin = m->as<torch::nn::LinearImpl>()) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(lin->weight.size(1)));
      lin->weight.uniform_(-bound, bound, gen);
      if (lin->bias.defined()) lin->bias.uniform_(-bound, bound, gen);
    } else if (auto* bn = m->as<TracedBatchNorm2dImpl>()) {
      bn->weight.fill_(1.0);
      bn->bias.zero_();
      bn->running_mean.zero_();
      bn->running_var.fill_(1.0);
      bn->num_batches_tracked.zero_();
    }
  }
}

}  // namespace cmi

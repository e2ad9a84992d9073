#pragma once

#include <torch/torch.h>

#include "cmi/core/errors.hpp"
#include "cmi/core/random.hpp"
#include "cmi/models/classifier.hpp"

namespace cmi {

struct GeneratorOptions {
  std::int64_t latent_dim = 256;
  InputShape output;
  std::int64_t width = 64;     // channels of the last hidden stage; the seed map has 2x
  double init_std = 0.02;      // N(0, init_std) for conv/linear weights, N(1, init_std) for BN scale
  double leaky_slope = 0.2;
};

/// z -> linear -> (2w, H/4, W/4) -> [up x2, conv, BN, lrelu] x2 -> conv -> tanh.
/// Output lies in [-1, 1].
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorOptions opts) : opts_(opts) {
    const auto& out = opts_.output;
    if (opts_.latent_dim < 1) {
      throw InvalidArgument("generator latent_dim must be >= 1, got " +
                            std::to_string(opts_.latent_dim));
    }
    if (out.height % 4 != 0 || out.width % 4 != 0 || out.height < 4 || out.width < 4) {
      throw InvalidArgument("generator output height/width must be positive multiples of 4");
    }
    const auto w = opts_.width;
    seed_h_ = out.height / 4;
    seed_w_ = out.width / 4;
    project_ = register_module("project", torch::nn::Linear(opts_.latent_dim, 2 * w * seed_h_ * seed_w_));
    conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * w, 2 * w, 3).padding(1)));
    bn1_ = register_module("bn1", torch::nn::BatchNorm2d(2 * w));
    conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * w, w, 3).padding(1)));
    bn2_ = register_module("bn2", torch::nn::BatchNorm2d(w));
    to_image_ = register_module("to_image", torch::nn::Conv2d(torch::nn::Conv2dOptions(w, out.channels, 3).padding(1)));
  }

  torch::Tensor forward(const torch::Tensor& z) {
    if (z.dim() != 2 || z.size(1) != opts_.latent_dim) {
      throw ShapeMismatch("generator expects z of shape (B, " + std::to_string(opts_.latent_dim) + ")");
    }
    namespace F = torch::nn::functional;
    const auto up = F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest);
    auto h = project_->forward(z).view({z.size(0), 2 * opts_.width, seed_h_, seed_w_});
    h = F::interpolate(h, up);
    h = torch::leaky_relu(bn1_->forward(conv1_->forward(h)), opts_.leaky_slope);
    h = F::interpolate(h, up);
    h = torch::leaky_relu(bn2_->forward(conv2_->forward(h)), opts_.leaky_slope);
    return torch::tanh(to_image_->forward(h));
  }

  /// Redraws all parameters from the declared init distribution.
  void reset_parameters(at::Generator gen) {
    torch::NoGradGuard ng;
    for (auto& m : modules(/*include_self=*/false)) {
      if (auto* conv = m->as<torch::nn::Conv2dImpl>()) {
        conv->weight.normal_(0.0, opts_.init_std, gen);
        conv->bias.zero_();
      } else if (auto* lin = m->as<torch::nn::LinearImpl>()) {
        lin->weight.normal_(0.0, opts_.init_std, gen);
        lin->bias.zero_();
      } else if (auto* bn = m->as<torch::nn::BatchNorm2dImpl>()) {
        bn->weight.normal_(1.0, opts_.init_std, gen);
        bn->bias.zero_();
        bn->running_mean.zero_();
        bn->running_var.fill_(1.0);
        bn->num_batches_tracked.zero_();
      }
    }
  }

  const GeneratorOptions& options() const { return opts_; }

 private:
  GeneratorOptions opts_;
  std::int64_t seed_h_ = 0, seed_w_ = 0;
  torch::nn::Linear project_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, to_image_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
};
TORCH_MODULE(Generator);

inline Generator build_generator(std::int64_t latent_dim, const InputShape& output, std::uint64_t seed,
                                 std::int64_t width = 64) {
  GeneratorOptions opts;
  opts.latent_dim = latent_dim;
  opts.output = output;
  opts.width = width;
  Generator g(opts);
  g->reset_parameters(make_generator(seed));
  return g;
}

}  // namespace cmi

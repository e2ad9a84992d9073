#pragma once

#include <torch/torch.h>

#include <string>

#include "cmi/core/errors.hpp"
#include "cmi/core/random.hpp"
#include "cmi/models/teacher.hpp"

namespace cmi {

enum class HeadMode { none, linear, nonlinear };

inline std::string to_string(HeadMode m) {
  switch (m) {
    case HeadMode::none: return "none";
    case HeadMode::linear: return "linear";
    case HeadMode::nonlinear: return "nonlinear";
  }
  return "?";
}

inline HeadMode parse_head_mode(const std::string& s) {
  if (s == "none") return HeadMode::none;
  if (s == "linear") return HeadMode::linear;
  if (s == "nonlinear") return HeadMode::nonlinear;
  throw InvalidArgument("unknown discriminator mode '" + s + "' (expected none|linear|nonlinear)");
}

struct HeadOptions {
  HeadMode mode = HeadMode::nonlinear;
  std::int64_t hidden = 256;
  std::int64_t proj_dim = 128;
};

/// Projection head h(.) on top of the frozen teacher's pooled features.
/// In mode `none` it is the identity and owns no parameters.
class InstanceDiscriminatorImpl : public torch::nn::Module {
 public:
  InstanceDiscriminatorImpl(std::int64_t in_dim, HeadOptions opts, std::uint64_t seed)
      : in_dim_(in_dim), opts_(opts) {
    if (in_dim < 1) throw InvalidArgument("discriminator input dimension must be positive");
    switch (opts_.mode) {
      case HeadMode::none:
        break;
      case HeadMode::linear:
        fc1_ = register_module("fc1", torch::nn::Linear(in_dim, opts_.proj_dim));
        break;
      case HeadMode::nonlinear:
        fc1_ = register_module("fc1", torch::nn::Linear(in_dim, opts_.hidden));
        fc2_ = register_module("fc2", torch::nn::Linear(opts_.hidden, opts_.proj_dim));
        break;
    }
    auto gen = make_generator(seed);
    torch::NoGradGuard ng;
    for (auto& m : modules(false)) {
      if (auto* lin = m->as<torch::nn::LinearImpl>()) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(lin->weight.size(1)));
        lin->weight.uniform_(-bound, bound, gen);
        lin->bias.uniform_(-bound, bound, gen);
      }
    }
  }

  torch::Tensor forward(const torch::Tensor& features) {
    if (features.dim() != 2 || features.size(1) != in_dim_) {
      throw ShapeMismatch("discriminator expects features (B, " + std::to_string(in_dim_) + ")");
    }
    switch (opts_.mode) {
      case HeadMode::none: return features;
      case HeadMode::linear: return fc1_->forward(features);
      case HeadMode::nonlinear: return fc2_->forward(torch::relu(fc1_->forward(features)));
    }
    return features;
  }

  std::int64_t in_dim() const { return in_dim_; }
  std::int64_t out_dim() const { return opts_.mode == HeadMode::none ? in_dim_ : opts_.proj_dim; }
  HeadMode mode() const { return opts_.mode; }

 private:
  std::int64_t in_dim_;
  HeadOptions opts_;
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(InstanceDiscriminator);

/// Width of the head input for a teacher: pooled taps + penultimate.
inline std::int64_t discriminator_input_dim(const TeacherSnapshot& t) {
  std::int64_t d = 0;
  for (const auto& tap : t.feature_taps()) d += tap.channels;
  return d;
}

inline InstanceDiscriminator make_discriminator(const TeacherSnapshot& t, const HeadOptions& opts,
                                                std::uint64_t seed) {
  InstanceDiscriminator h(discriminator_input_dim(t), opts, seed);
  if (h->parameters().size() > 0 && t.dtype() != torch::kFloat) h->to(t.dtype());
  return h;
}

/// v = h(f_t(images)); the teacher stays frozen, gradients reach the images
/// and the head parameters.
inline torch::Tensor project(InstanceDiscriminator& h, const TeacherSnapshot& t, const torch::Tensor& images) {
  return h->forward(pooled_features(t.forward_with_features(images).taps));
}

}  // namespace cmi

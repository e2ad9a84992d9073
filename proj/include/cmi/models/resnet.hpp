#pragma once

#include <array>

#include "cmi/models/classifier.hpp"

namespace cmi {

class ResBasicBlockImpl : public torch::nn::Module {
 public:
  ResBasicBlockImpl(BnRegistry& reg, std::int64_t in, std::int64_t out, std::int64_t stride)
      : downsample_(stride != 1 || in != out) {
    conv1_ = register_module("conv1", conv3x3(in, out, stride));
    bn1_ = register_module("bn1", reg.make(out));
    conv2_ = register_module("conv2", conv3x3(out, out, 1));
    bn2_ = register_module("bn2", reg.make(out));
    if (downsample_) {
      shortcut_conv_ = register_module("shortcut_conv", conv1x1(in, out, stride));
      shortcut_bn_ = register_module("shortcut_bn", reg.make(out));
    }
  }

  torch::Tensor forward(const torch::Tensor& x, ForwardTrace* trace) {
    auto y = torch::relu(bn1_->forward(conv1_->forward(x), trace));
    y = bn2_->forward(conv2_->forward(y), trace);
    auto shortcut = downsample_ ? shortcut_bn_->forward(shortcut_conv_->forward(x), trace) : x;
    return torch::relu(y + shortcut);
  }

 private:
  bool downsample_;
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, shortcut_conv_{nullptr};
  TracedBatchNorm2d bn1_{nullptr}, bn2_{nullptr}, shortcut_bn_{nullptr};
};
TORCH_MODULE(ResBasicBlock);

/// CIFAR-style ResNet (3x3 stem, no max-pool) with basic blocks.
class ResNetImpl : public ClassifierImpl {
 public:
  ResNetImpl(ArchSpec spec, std::array<int, 4> blocks) : ClassifierImpl(std::move(spec)) {
    stem_ = register_module("conv1", conv3x3(input_shape().channels, 64, 1));
    stem_bn_ = register_module("bn1", bn_.make(64));
    std::int64_t in = 64;
    const std::int64_t widths[4] = {64, 128, 256, 512};
    for (int l = 0; l < 4; ++l) {
      auto seq = torch::nn::ModuleList();
      for (int b = 0; b < blocks[static_cast<std::size_t>(l)]; ++b) {
        const std::int64_t stride = (b == 0 && l > 0) ? 2 : 1;
        seq->push_back(ResBasicBlock(bn_, in, widths[l], stride));
        in = widths[l];
      }
      layers_.push_back(register_module("layer" + std::to_string(l + 1), seq));
      taps_.push_back({"layer" + std::to_string(l + 1), in, true});
    }
    taps_.push_back({"penultimate", in, false});
    fc_ = register_module("fc", torch::nn::Linear(in, num_classes()));
  }

  torch::Tensor forward(const torch::Tensor& x, ForwardTrace* trace) override {
    auto h = torch::relu(stem_bn_->forward(stem_->forward(x), trace));
    for (auto& layer : layers_) {
      for (auto& block : *layer) h = block->as<ResBasicBlockImpl>()->forward(h, trace);
      push_tap(trace, h);
    }
    auto pooled = h.mean({2, 3});
    push_tap(trace, pooled);
    return fc_->forward(pooled);
  }

  std::int64_t classifier_in_features() const override { return 512; }

 private:
  torch::nn::Conv2d stem_{nullptr};
  TracedBatchNorm2d stem_bn_{nullptr};
  std::vector<torch::nn::ModuleList> layers_;
  torch::nn::Linear fc_{nullptr};
};

}  // namespace cmi

#pragma once

#include "cmi/models/classifier.hpp"

namespace cmi {

// Pre-activation wide-resnet block. Where the width or stride changes the
// shortcut is conv1x1 followed by its own BN layer, visited after the main
// branch.
class WideBasicBlockImpl : public torch::nn::Module {
 public:
  WideBasicBlockImpl(BnRegistry& reg, std::int64_t in, std::int64_t out, std::int64_t stride)
      : equal_in_out_(in == out && stride == 1) {
    bn1_ = register_module("bn1", reg.make(in));
    conv1_ = register_module("conv1", conv3x3(in, out, stride));
    bn2_ = register_module("bn2", reg.make(out));
    conv2_ = register_module("conv2", conv3x3(out, out, 1));
    if (!equal_in_out_) {
      shortcut_conv_ = register_module("shortcut_conv", conv1x1(in, out, stride));
      shortcut_bn_ = register_module("shortcut_bn", reg.make(out));
    }
  }

  torch::Tensor forward(const torch::Tensor& x, ForwardTrace* trace) {
    auto o = torch::relu(bn1_->forward(x, trace));
    auto y = conv1_->forward(o);
    y = conv2_->forward(torch::relu(bn2_->forward(y, trace)));
    auto shortcut = equal_in_out_ ? x : shortcut_bn_->forward(shortcut_conv_->forward(o), trace);
    return y + shortcut;
  }

 private:
  bool equal_in_out_;
  TracedBatchNorm2d bn1_{nullptr}, bn2_{nullptr}, shortcut_bn_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, shortcut_conv_{nullptr};
};
TORCH_MODULE(WideBasicBlock);

/// WRN-depth-widen for 32x32-style inputs; taps after each of the three groups.
class WideResNetImpl : public ClassifierImpl {
 public:
  WideResNetImpl(ArchSpec spec, int depth, int widen)
      : ClassifierImpl(std::move(spec)) {
    if (depth < 10 || (depth - 4) % 6 != 0) {
      throw UnknownArchitecture("wide-resnet depth must satisfy (depth - 4) % 6 == 0, got " +
                                std::to_string(depth));
    }
    const int n = (depth - 4) / 6;
    const std::int64_t widths[4] = {16, 16 * widen, 32 * widen, 64 * widen};
    stem_ = register_module("conv1", conv3x3(input_shape().channels, widths[0], 1));
    std::int64_t in = widths[0];
    for (int g = 0; g < 3; ++g) {
      auto seq = torch::nn::ModuleList();
      for (int b = 0; b < n; ++b) {
        const std::int64_t stride = (b == 0 && g > 0) ? 2 : 1;
        seq->push_back(WideBasicBlock(bn_, in, widths[g + 1], stride));
        in = widths[g + 1];
      }
      groups_.push_back(register_module("block" + std::to_string(g + 1), seq));
      taps_.push_back({"group" + std::to_string(g + 1), in, true});
    }
    final_bn_ = register_module("bn_final", bn_.make(in));
    taps_.push_back({"penultimate", in, false});
    fc_ = register_module("fc", torch::nn::Linear(in, num_classes()));
    width_ = in;
  }

  torch::Tensor forward(const torch::Tensor& x, ForwardTrace* trace) override {
    auto h = stem_->forward(x);
    for (auto& group : groups_) {
      for (auto& block : *group) h = block->as<WideBasicBlockImpl>()->forward(h, trace);
      push_tap(trace, h);
    }
    h = torch::relu(final_bn_->forward(h, trace));
    auto pooled = h.mean({2, 3});
    push_tap(trace, pooled);
    return fc_->forward(pooled);
  }

  std::int64_t classifier_in_features() const override { return width_; }

 private:
  torch::nn::Conv2d stem_{nullptr};
  std::vector<torch::nn::ModuleList> groups_;
  TracedBatchNorm2d final_bn_{nullptr};
  torch::nn::Linear fc_{nullptr};
  std::int64_t width_ = 0;
};

}  // namespace cmi

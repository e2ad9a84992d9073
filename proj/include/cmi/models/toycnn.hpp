#pragma once

#include <array>

#include "cmi/models/classifier.hpp"

namespace cmi {

/// Four conv-BN-ReLU blocks, global average pooling and a linear head.
/// Small enough to train and invert on one CPU core.
class ToyCnnImpl : public ClassifierImpl {
 public:
  ToyCnnImpl(ArchSpec spec, std::array<std::int64_t, 4> widths,
             std::array<std::int64_t, 4> strides = {1, 2, 2, 1})
      : ClassifierImpl(std::move(spec)), widths_(widths) {
    std::int64_t in = input_shape().channels;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const auto idx = std::to_string(i + 1);
      convs_.push_back(register_module("conv" + idx, conv3x3(in, widths[i], strides[i])));
      bns_.push_back(register_module("bn" + idx, bn_.make(widths[i])));
      taps_.push_back({"block" + idx, widths[i], true});
      in = widths[i];
    }
    taps_.push_back({"penultimate", in, false});
    fc_ = register_module("fc", torch::nn::Linear(in, num_classes()));
  }

  torch::Tensor forward(const torch::Tensor& x, ForwardTrace* trace) override {
    auto h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = torch::relu(bns_[i]->forward(convs_[i]->forward(h), trace));
      push_tap(trace, h);
    }
    auto pooled = h.mean({2, 3});
    push_tap(trace, pooled);
    return fc_->forward(pooled);
  }

  std::int64_t classifier_in_features() const override { return widths_.back(); }

 private:
  std::array<std::int64_t, 4> widths_;
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<TracedBatchNorm2d> bns_;
  torch::nn::Linear fc_{nullptr};
};

}  // namespace cmi

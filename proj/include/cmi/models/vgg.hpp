#pragma once

#include "cmi/models/classifier.hpp"

namespace cmi {

/// VGG with batch norm, CIFAR head (single linear layer on the pooled 512-d
/// vector). `config` uses 0 for a max-pool stage; one tap per pool stage.
class VggImpl : public ClassifierImpl {
 public:
  VggImpl(ArchSpec spec, const std::vector<int>& config) : ClassifierImpl(std::move(spec)) {
    std::int64_t in = input_shape().channels;
    Stage stage;
    int stage_idx = 0;
    for (int c : config) {
      if (c == 0) {
        stages_.push_back(stage);
        taps_.push_back({"pool" + std::to_string(++stage_idx), in, true});
        stage = Stage{};
        continue;
      }
      const auto name = std::to_string(convs_.size() + 1);
      stage.convs.push_back(register_module("conv" + name, conv3x3(in, c, 1)));
      stage.bns.push_back(register_module("bn" + name, bn_.make(c)));
      convs_.push_back(stage.convs.back());
      in = c;
    }
    taps_.push_back({"penultimate", in, false});
    fc_ = register_module("fc", torch::nn::Linear(in, num_classes()));
    width_ = in;
  }

  torch::Tensor forward(const torch::Tensor& x, ForwardTrace* trace) override {
    auto h = x;
    for (auto& stage : stages_) {
      for (std::size_t i = 0; i < stage.convs.size(); ++i) {
        h = torch::relu(stage.bns[i]->forward(stage.convs[i]->forward(h), trace));
      }
      // Ceil-mode keeps odd spatial sizes from collapsing to zero.
      h = torch::max_pool2d(h, 2, 2, 0, 1, /*ceil_mode=*/true);
      push_tap(trace, h);
    }
    auto pooled = h.mean({2, 3});
    push_tap(trace, pooled);
    return fc_->forward(pooled);
  }

  std::int64_t classifier_in_features() const override { return width_; }

 private:
  struct Stage {
    std::vector<torch::nn::Conv2d> convs;
    std::vector<TracedBatchNorm2d> bns;
  };
  std::vector<Stage> stages_;
  std::vector<torch::nn::Conv2d> convs_;
  torch::nn::Linear fc_{nullptr};
  std::int64_t width_ = 0;
};

}  // namespace cmi

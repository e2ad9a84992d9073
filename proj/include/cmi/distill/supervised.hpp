#pragma once

#include <torch/torch.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "cmi/data/dataset.hpp"
#include "cmi/distill/distiller.hpp"
#include "cmi/eval/metrics.hpp"

namespace cmi {

/// Label-supervised training, used only to produce desk-scale teachers.
struct SupervisedConfig {
  std::int64_t epochs = 15;
  std::int64_t batch_size = 128;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool flip = true;
  std::int64_t shift = 1;
  std::uint64_t seed = 0;
};

struct SupervisedResult {
  double train_accuracy = 0;
  std::vector<double> epoch_loss;
};

inline SupervisedResult train_classifier(Classifier& net, const LabeledImages& data, const SupervisedConfig& cfg,
                                         const std::function<void(std::int64_t, double)>& on_epoch = {}) {
  if (data.empty()) throw EmptyDataset("train_classifier on an empty dataset");
  if (cfg.epochs < 1 || cfg.batch_size < 2 || !(cfg.lr > 0)) throw InvalidArgument("invalid supervised training config");
  data.validate();
  torch::optim::SGD opt(net->parameters(),
                        torch::optim::SGDOptions(cfg.lr).momentum(cfg.momentum).weight_decay(cfg.weight_decay));
  const auto n = data.size();
  const auto per_epoch = detail::steps_per_epoch(n, cfg.batch_size);
  const auto total = std::max<std::int64_t>(1, cfg.epochs * per_epoch);
  std::int64_t step = 0;
  SupervisedResult res;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    net->train();
    auto gen = make_generator(derive_seed(cfg.seed, "supervised-epoch", {static_cast<std::uint64_t>(epoch)}));
    const auto perm = torch::randperm(n, gen, torch::kLong);
    double loss_sum = 0;
    std::int64_t batches = 0;
    for (std::int64_t b = 0; b + 2 <= n; b += cfg.batch_size) {
      const auto e = std::min(n, b + cfg.batch_size);
      if (e - b < 2) break;
      const double lr = 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
      for (auto& g : opt.param_groups()) static_cast<torch::optim::SGDOptions&>(g.options()).lr(lr);
      const auto idx = perm.slice(0, b, e);
      const auto x = augment_batch(data.images.index_select(0, idx), cfg.flip, cfg.shift,
                                   derive_seed(cfg.seed, "supervised-aug", {static_cast<std::uint64_t>(step)}));
      opt.zero_grad();
      auto loss = torch::nn::functional::cross_entropy(net->forward(x), data.labels.index_select(0, idx));
      loss.backward();
      opt.step();
      loss_sum += loss.item<double>();
      ++batches;
      ++step;
    }
    res.epoch_loss.push_back(loss_sum / static_cast<double>(std::max<std::int64_t>(batches, 1)));
    if (on_epoch) on_epoch(epoch, res.epoch_loss.back());
  }
  res.train_accuracy = evaluate_accuracy(net, data);
  return res;
}

}  // namespace cmi

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <sstream>

#include "cmi/core/checksum.hpp"
#include "cmi/core/errors.hpp"
#include "cmi/models/classifier.hpp"
#include "cmi/models/registry.hpp"

namespace cmi {

struct TeacherOutput {
  torch::Tensor logits;
  std::vector<torch::Tensor> taps;  // aligned with TeacherSnapshot::feature_taps()
  BatchStats stats;                 // aligned with TeacherSnapshot::bn_layers()
};

/// Students are ordinary trainable classifiers from the registry.
using StudentModel = Classifier;

/// A frozen classifier: eval-mode normalization, no trainable parameters,
/// stored BN statistics copied out at freeze time. All methods are const and
/// safe to call concurrently.
class TeacherSnapshot {
 public:
  explicit TeacherSnapshot(Classifier net) : net_(std::move(net)) {
    if (!net_) throw InvalidArgument("teacher network is null");
    net_->eval();
    for (auto& p : net_->parameters(true)) p.requires_grad_(false);
    for (const auto& bn : net_->bn_layers()) {
      LayerStats s{bn->running_mean.detach().clone(), bn->running_var.detach().clone()};
      if (!(s.var > 0).all().item<bool>()) {
        throw InvalidArgument("teacher BN layer " + std::to_string(stored_.size()) +
                              " has non-positive stored variance");
      }
      stored_.push_back(std::move(s));
    }
  }

  TeacherOutput forward_with_features(const torch::Tensor& images) const {
    check_images(images);
    if (images.size(0) < 2) {
      throw BatchTooSmall("forward_with_features needs batch size >= 2 for BN statistics, got " +
                          std::to_string(images.size(0)));
    }
    ForwardTrace trace;
    TeacherOutput out;
    out.logits = net_->forward(images, &trace);
    out.taps = std::move(trace.taps);
    out.stats = std::move(trace.stats);
    return out;
  }

  torch::Tensor logits(const torch::Tensor& images) const {
    check_images(images);
    return net_->forward(images, nullptr);
  }

  const std::vector<LayerStats>& bn_layers() const { return stored_; }
  const std::vector<TapInfo>& feature_taps() const { return net_->feature_taps(); }
  std::int64_t num_classes() const { return net_->num_classes(); }
  const InputShape& input_shape() const { return net_->input_shape(); }
  const ArchSpec& spec() const { return net_->spec(); }
  torch::Dtype dtype() const { return net_->parameters().front().scalar_type(); }

  /// Fingerprint of parameters, buffers and the stored statistics.
  std::uint64_t checksum() const {
    Fnv1a h;
    h.update(cmi::checksum(*net_));
    for (const auto& s : stored_) {
      h.update(s.mean);
      h.update(s.var);
    }
    return h.digest();
  }

  const ClassifierImpl& network() const { return *net_; }

 private:
  void check_images(const torch::Tensor& images) const {
    const auto& in = net_->input_shape();
    if (images.dim() != 4 || images.size(1) != in.channels || images.size(2) != in.height ||
        images.size(3) != in.width) {
      std::ostringstream os;
      os << "teacher expects images (N," << in.channels << "," << in.height << "," << in.width << "), got "
         << images.sizes();
      throw ShapeMismatch(os.str());
    }
  }

  // Shared so snapshots are cheap to copy; never handed out mutably.
  Classifier net_;
  std::vector<LayerStats> stored_;
};

inline TeacherSnapshot load_teacher(const std::filesystem::path& checkpoint, const ArchSpec& spec) {
  auto net = make_classifier(spec);
  load_checkpoint(*net, checkpoint);
  return TeacherSnapshot(std::move(net));
}

/// Teacher-feature view of a trace: every spatial tap globally average
/// pooled, then concatenated with the penultimate vector.
inline torch::Tensor pooled_features(const std::vector<torch::Tensor>& taps) {
  std::vector<torch::Tensor> parts;
  parts.reserve(taps.size());
  for (const auto& t : taps) parts.push_back(t.dim() == 4 ? t.mean({2, 3}) : t);
  return torch::cat(parts, 1);
}

inline torch::Tensor pool_tap(const torch::Tensor& tap) { return tap.dim() == 4 ? tap.mean({2, 3}) : tap; }

}  // namespace cmi

#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <optional>

#include "cmi/core/checksum.hpp"
#include "cmi/core/errors.hpp"
#include "cmi/core/random.hpp"

namespace cmi {

/// One synthesized batch and its provenance.
struct SyntheticBatch {
  torch::Tensor images;          // (B, C, H, W) in [-1, 1]
  torch::Tensor targets;         // (B) class-prior labels
  torch::Tensor teacher_logits;  // (B, num_classes)
  torch::Tensor features;        // (B, D) pooled teacher features, optional
  std::int64_t timestamp = -1;   // assigned by the bank on append
  std::uint64_t generator_seed = 0;
  std::uint64_t generator_checksum = 0;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }

  void validate(std::int64_t num_classes) const {
    if (!images.defined() || images.dim() != 4) throw ShapeMismatch("synthetic batch images must be (B,C,H,W)");
    const auto b = images.size(0);
    if (!targets.defined() || targets.dim() != 1 || targets.size(0) != b) {
      throw ShapeMismatch("synthetic batch targets must be (B)");
    }
    if (teacher_logits.defined() && teacher_logits.size(0) != b) throw ShapeMismatch("teacher_logits batch mismatch");
    if (features.defined() && (features.dim() != 2 || features.size(0) != b)) {
      throw ShapeMismatch("features must be (B, D)");
    }
    if (b == 0) return;
    constexpr double kTol = 1e-6;
    if (images.min().item<double>() < -1.0 - kTol || images.max().item<double>() > 1.0 + kTol) {
      throw InvalidArgument("synthetic images outside [-1, 1]");
    }
    const auto lo = targets.min().item<std::int64_t>();
    const auto hi = targets.max().item<std::int64_t>();
    if (lo < 0 || (num_classes > 0 && hi >= num_classes)) {
      throw InvalidArgument("synthetic batch target outside [0, num_classes)");
    }
  }
};

struct BankRecord {
  torch::Tensor image;
  std::int64_t target = 0;
  std::int64_t timestamp = 0;
  std::int64_t teacher_argmax = -1;
};

struct BankSample {
  torch::Tensor images;
  torch::Tensor targets;
  torch::Tensor features;  // undefined when the bank does not cache them
  torch::Tensor indices;
  std::int64_t size() const { return indices.defined() ? indices.size(0) : 0; }
};

/// Append-only store of every synthesized instance. Records live in
/// contiguous, geometrically grown storage; rows below size() are never
/// written again. Reads are safe to share; appends need exclusive access.
class MemoryBank {
 public:
  explicit MemoryBank(std::int64_t num_classes = 0) : num_classes_(num_classes) {}

  /// Stores a copy of `batch`; returns the timestamp assigned to it.
  std::int64_t append(const SyntheticBatch& batch) {
    batch.validate(num_classes_);
    const auto b = batch.size();
    const auto ts = next_timestamp_++;
    if (b > 0) {
      if (size_ == 0) {
        init_storage(batch);
      } else {
        check_compatible(batch);
      }
      reserve(size_ + b);
      torch::NoGradGuard ng;
      images_.slice(0, size_, size_ + b).copy_(batch.images.detach());
      targets_.slice(0, size_, size_ + b).copy_(batch.targets.detach().to(torch::kLong));
      if (logits_.defined()) logits_.slice(0, size_, size_ + b).copy_(batch.teacher_logits.detach());
      if (features_.defined()) features_.slice(0, size_, size_ + b).copy_(batch.features.detach());
      timestamps_.slice(0, size_, size_ + b).fill_(ts);
    }
    batches_.push_back({size_, b, ts, batch.generator_seed, batch.generator_checksum});
    size_ += b;
    return ts;
  }

  std::int64_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  std::int64_t num_classes() const { return num_classes_; }
  std::int64_t num_batches() const { return static_cast<std::int64_t>(batches_.size()); }
  bool has_features() const { return features_.defined(); }
  bool has_logits() const { return logits_.defined(); }

  // Views over the filled prefix; callers must treat them as read-only.
  torch::Tensor images() const { return prefix(images_); }
  torch::Tensor targets() const { return prefix(targets_); }
  torch::Tensor teacher_logits() const { return prefix(logits_); }
  torch::Tensor features() const { return prefix(features_); }
  torch::Tensor timestamps() const { return prefix(timestamps_); }

  BankRecord record(std::int64_t i) const {
    if (i < 0 || i >= size_) throw InvalidArgument("bank record index out of range");
    BankRecord r;
    r.image = images_[i];
    r.target = targets_[i].item<std::int64_t>();
    r.timestamp = timestamps_[i].item<std::int64_t>();
    if (logits_.defined()) r.teacher_argmax = logits_[i].argmax().item<std::int64_t>();
    return r;
  }

  struct BatchInfo {
    std::int64_t offset = 0;
    std::int64_t size = 0;
    std::int64_t timestamp = 0;
    std::uint64_t generator_seed = 0;
    std::uint64_t generator_checksum = 0;
  };
  const std::vector<BatchInfo>& batches() const { return batches_; }

  /// min(n, size) distinct records drawn uniformly without replacement.
  BankSample sample(std::int64_t n, std::uint64_t seed) const {
    BankSample out;
    const auto k = std::min<std::int64_t>(std::max<std::int64_t>(n, 0), size_);
    if (k == 0) {
      out.indices = torch::empty({0}, torch::kLong);
      return out;
    }
    auto gen = make_generator(seed);
    out.indices = torch::randperm(size_, gen, torch::kLong).slice(0, 0, k);
    out.images = images().index_select(0, out.indices);
    out.targets = targets().index_select(0, out.indices);
    if (features_.defined()) out.features = features().index_select(0, out.indices);
    return out;
  }

  std::uint64_t checksum() const {
    Fnv1a h;
    h.update(static_cast<std::uint64_t>(size_));
    if (size_ > 0) {
      h.update(images());
      h.update(targets());
      h.update(timestamps());
    }
    return h.digest();
  }

  /// Rebuilds a bank from flat arrays (used by the persistence layer).
  static MemoryBank from_arrays(std::int64_t num_classes, const torch::Tensor& images, const torch::Tensor& targets,
                                const torch::Tensor& logits, const torch::Tensor& features,
                                const torch::Tensor& timestamps) {
    MemoryBank bank(num_classes);
    const auto n = images.size(0);
    std::int64_t start = 0;
    auto ts = timestamps.to(torch::kLong).contiguous();
    const auto* tp = ts.data_ptr<std::int64_t>();
    while (start < n) {
      std::int64_t end = start;
      while (end < n && tp[end] == tp[start]) ++end;
      SyntheticBatch b;
      b.images = images.slice(0, start, end);
      b.targets = targets.slice(0, start, end);
      if (logits.defined() && logits.numel() > 0) b.teacher_logits = logits.slice(0, start, end);
      if (features.defined() && features.numel() > 0) b.features = features.slice(0, start, end);
      bank.next_timestamp_ = tp[start];
      bank.append(b);
      start = end;
    }
    return bank;
  }

 private:
  torch::Tensor prefix(const torch::Tensor& t) const { return t.defined() ? t.slice(0, 0, size_) : t; }

  void init_storage(const SyntheticBatch& b) {
    const auto opts = b.images.options().requires_grad(false);
    auto img_shape = b.images.sizes().vec();
    img_shape[0] = 0;
    images_ = torch::empty(img_shape, opts);
    targets_ = torch::empty({0}, torch::kLong);
    timestamps_ = torch::empty({0}, torch::kLong);
    if (b.teacher_logits.defined()) logits_ = torch::empty({0, b.teacher_logits.size(1)}, b.teacher_logits.options().requires_grad(false));
    if (b.features.defined()) features_ = torch::empty({0, b.features.size(1)}, b.features.options().requires_grad(false));
  }

  void check_compatible(const SyntheticBatch& b) const {
    if (b.images.sizes().slice(1) != images_.sizes().slice(1)) throw ShapeMismatch("bank image shape mismatch");
    if (logits_.defined() != b.teacher_logits.defined()) throw ShapeMismatch("bank logits presence mismatch");
    if (features_.defined() != b.features.defined()) throw ShapeMismatch("bank features presence mismatch");
  }

  static torch::Tensor grow(const torch::Tensor& t, std::int64_t used, std::int64_t cap) {
    if (!t.defined()) return t;
    auto shape = t.sizes().vec();
    shape[0] = cap;
    auto bigger = torch::empty(shape, t.options());
    if (used > 0) bigger.slice(0, 0, used).copy_(t.slice(0, 0, used));
    return bigger;
  }

  void reserve(std::int64_t needed) {
    if (needed <= capacity_) return;
    const auto cap = std::max<std::int64_t>(needed, capacity_ * 2);
    images_ = grow(images_, size_, cap);
    targets_ = grow(targets_, size_, cap);
    timestamps_ = grow(timestamps_, size_, cap);
    logits_ = grow(logits_, size_, cap);
    features_ = grow(features_, size_, cap);
    capacity_ = cap;
  }

  std::int64_t num_classes_;
  std::int64_t size_ = 0;
  std::int64_t capacity_ = 0;
  std::int64_t next_timestamp_ = 0;
  torch::Tensor images_, targets_, logits_, features_, timestamps_;
  std::vector<BatchInfo> batches_;
};

}  // namespace cmi

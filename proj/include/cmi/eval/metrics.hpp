#pragma once

#include <torch/torch.h>

#include <concepts>

#include "cmi/contrastive/contrastive_loss.hpp"
#include "cmi/contrastive/discriminator.hpp"
#include "cmi/contrastive/memory_bank.hpp"
#include "cmi/contrastive/views.hpp"
#include "cmi/core/random.hpp"
#include "cmi/data/dataset.hpp"
#include "cmi/eval/fid.hpp"
#include "cmi/models/teacher.hpp"

namespace cmi {

inline torch::Tensor logits_of(const TeacherSnapshot& t, const torch::Tensor& x) { return t.logits(x); }

inline torch::Tensor logits_of(const Classifier& m, const torch::Tensor& x) { return m->forward(x); }

template <typename M>
concept LogitModel = requires(const M& m, const torch::Tensor& x) {
  { logits_of(m, x) } -> std::convertible_to<torch::Tensor>;
};

/// Top-1 accuracy in [0, 1]. Trainable models are evaluated in eval mode and
/// restored to their previous mode afterwards.
template <LogitModel M>
double evaluate_accuracy(const M& model, const LabeledImages& data, std::int64_t chunk = 512) {
  if (data.empty()) throw EmptyDataset("evaluate_accuracy on an empty dataset");
  data.validate();
  torch::NoGradGuard ng;
  bool was_training = false;
  if constexpr (std::is_same_v<M, Classifier>) {
    was_training = model->is_training();
    model->eval();
  }
  std::int64_t correct = 0;
  for (std::int64_t s = 0; s < data.size(); s += chunk) {
    const auto e = std::min(data.size(), s + chunk);
    const auto pred = logits_of(model, data.images.slice(0, s, e)).argmax(1);
    correct += pred.eq(data.labels.slice(0, s, e)).sum().template item<std::int64_t>();
  }
  if constexpr (std::is_same_v<M, Classifier>) model->train(was_training);
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Concatenated pooled teacher taps (the discriminator input) for a whole set.
inline torch::Tensor pooled_teacher_features(const TeacherSnapshot& t, const torch::Tensor& images) {
  return torch::cat(teacher_tap_features(t, images), 1);
}

/// Mean cosine similarity over all ordered pairs i != j of the rows.
inline double mean_pairwise_cosine(const torch::Tensor& features) {
  if (features.dim() != 2 || features.size(0) < 2) throw InvalidArgument("mean_pairwise_cosine needs >= 2 rows");
  const auto x = normalize_rows(features.detach().to(torch::kDouble));
  const auto n = static_cast<double>(x.size(0));
  // sum_ij <x_i, x_j> = |sum_i x_i|^2; the diagonal contributes n.
  const double total = x.sum(0).pow(2).sum().item<double>();
  return (total - n) / (n * (n - 1.0));
}

struct DiversityReport {
  std::int64_t num_samples = 0;
  double mean_pairwise_cosine = 0;  // teacher feature space
  double diversity_score = 0;       // negatives-only contrastive form, higher = more diverse
};

/// Summary over a fixed-seed subsample of at most `max_samples` records.
/// Pairwise similarity uses pooled teacher features; the diversity score
/// embeds local/global views of the same subsample with `h` and uses every
/// other instance's views as negatives.
inline DiversityReport bank_diversity_report(const MemoryBank& bank, const TeacherSnapshot& t, InstanceDiscriminator& h,
                                             double tau_cr = 0.07, std::uint64_t seed = 0,
                                             std::int64_t max_samples = 2048, const AugConfig& aug = {}) {
  if (bank.size() < 2) throw InvalidArgument("bank_diversity_report needs at least 2 records");
  torch::NoGradGuard ng;
  const auto sample = bank.sample(max_samples, derive_seed(seed, "diversity-subsample"));
  const auto images = sample.images.to(t.dtype());
  DiversityReport r;
  r.num_samples = sample.size();
  const auto feats = pooled_teacher_features(t, images);
  r.mean_pairwise_cosine = mean_pairwise_cosine(feats);
  const auto views = make_views(images, aug, derive_seed(seed, "diversity-views"));
  const auto anchors = h->forward(pooled_teacher_features(t, views.local));
  const auto positives = h->forward(pooled_teacher_features(t, views.global));
  r.diversity_score = diversity_score(anchors, positives, in_batch_negatives(anchors, positives), tau_cr).item<double>();
  return r;
}

}  // namespace cmi

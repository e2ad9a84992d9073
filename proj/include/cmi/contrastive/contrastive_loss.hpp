#pragma once

#include <torch/torch.h>

#include <limits>
#include <sstream>

#include "cmi/core/errors.hpp"

namespace cmi {

/// <v1, v2> / (|v1| |v2|) for two vectors of equal length. Zero vectors are
/// rejected rather than mapped to 0.
inline torch::Tensor cosine_similarity(const torch::Tensor& v1, const torch::Tensor& v2) {
  if (v1.dim() != 1 || v2.dim() != 1 || v1.size(0) != v2.size(0)) {
    throw ShapeMismatch("cosine_similarity expects two vectors of equal dimension");
  }
  const auto n1 = v1.norm();
  const auto n2 = v2.norm();
  if (n1.item<double>() == 0.0 || n2.item<double>() == 0.0) {
    throw ZeroNormVector("cosine_similarity: zero-norm vector");
  }
  return (v1 * v2).sum() / (n1 * n2);
}

/// Rows scaled to unit length; throws ZeroNormVector on an all-zero row.
inline torch::Tensor normalize_rows(const torch::Tensor& x) {
  if (x.dim() != 2) throw ShapeMismatch("normalize_rows expects (N, D)");
  const auto norms = x.norm(2, 1, /*keepdim=*/true);
  if (x.size(0) > 0 && norms.min().item<double>() == 0.0) {
    throw ZeroNormVector("embedding with zero norm");
  }
  return x / norms;
}

/// Negative embeddings shared by a batch of anchors. mask(i, j) says whether
/// negative j is used for anchor i; an undefined mask means "all".
struct NegativeSet {
  torch::Tensor embeddings;  // (M, D)
  torch::Tensor mask;        // (N, M) bool or undefined
};

/// Negatives for anchor i: every other instance's local and global embedding
/// in the batch, plus every bank embedding.
inline NegativeSet in_batch_negatives(const torch::Tensor& anchors, const torch::Tensor& positives,
                                      const torch::Tensor& bank = {}) {
  const auto n = anchors.size(0);
  std::vector<torch::Tensor> parts{anchors, positives};
  if (bank.defined() && bank.size(0) > 0) parts.push_back(bank);
  NegativeSet out;
  out.embeddings = torch::cat(parts, 0);
  const auto m = out.embeddings.size(0);
  auto mask = torch::ones({n, m}, torch::kBool);
  const auto idx = torch::arange(n, torch::kLong);
  mask.index_put_({idx, idx}, false);
  mask.index_put_({idx, idx + n}, false);
  out.mask = mask;
  return out;
}

namespace detail {

struct ContrastLogits {
  torch::Tensor positive;   // (N) sim(a_i, p_i) / tau
  torch::Tensor negatives;  // (N, M) sim(a_i, n_j) / tau, -inf where masked out
  torch::Tensor counts;     // (N) negatives per anchor
};

inline ContrastLogits contrast_logits(const torch::Tensor& anchors, const torch::Tensor& positives,
                                      const NegativeSet& neg, double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("contrastive temperature must be positive");
  if (anchors.dim() != 2 || positives.sizes() != anchors.sizes()) {
    std::ostringstream os;
    os << "contrastive: anchors " << anchors.sizes() << " and positives " << positives.sizes()
       << " must be index-aligned (N, D)";
    throw ShapeMismatch(os.str());
  }
  const auto n = anchors.size(0);
  const auto a = normalize_rows(anchors);
  const auto p = normalize_rows(positives);
  ContrastLogits out;
  out.positive = (a * p).sum(1) / tau;
  const bool has_neg = neg.embeddings.defined() && neg.embeddings.size(0) > 0;
  if (!has_neg) {
    out.negatives = torch::empty({n, 0}, anchors.options());
    out.counts = torch::zeros({n}, torch::kLong);
    return out;
  }
  if (neg.embeddings.dim() != 2 || neg.embeddings.size(1) != anchors.size(1)) {
    throw ShapeMismatch("contrastive: negatives must be (M, D) with the anchors' D");
  }
  const auto m = neg.embeddings.size(0);
  auto logits = torch::matmul(a, normalize_rows(neg.embeddings).t()) / tau;
  if (neg.mask.defined()) {
    if (neg.mask.sizes() != torch::IntArrayRef({n, m})) throw ShapeMismatch("contrastive: mask must be (N, M)");
    logits = logits.masked_fill(neg.mask.logical_not(), -std::numeric_limits<double>::infinity());
    out.counts = neg.mask.sum(1);
  } else {
    out.counts = torch::full({n}, m, torch::kLong);
  }
  out.negatives = logits;
  return out;
}

}  // namespace detail

/// Per-anchor InfoNCE loss
///   l_i = -log( exp(s(a_i,p_i)/tau) / D_i ),
/// D_i = exp(s(a_i,p_i)/tau) + sum_j exp(s(a_i,n_j)/tau) when
/// include_positive, otherwise the negatives-only sum.
inline torch::Tensor contrastive_loss_per_instance(const torch::Tensor& anchors, const torch::Tensor& positives,
                                                   const NegativeSet& negatives, double tau,
                                                   bool include_positive = true) {
  const auto lg = detail::contrast_logits(anchors, positives, negatives, tau);
  if (!include_positive && (lg.counts.numel() > 0 && lg.counts.min().item<std::int64_t>() == 0)) {
    throw EmptyNegativeSet("contrastive loss without the positive term needs at least one negative per anchor");
  }
  torch::Tensor lse;
  if (include_positive) {
    lse = torch::logsumexp(torch::cat({lg.positive.unsqueeze(1), lg.negatives}, 1), 1);
  } else {
    lse = torch::logsumexp(lg.negatives, 1);
  }
  return lse - lg.positive;
}

inline torch::Tensor contrastive_loss(const torch::Tensor& anchors, const torch::Tensor& positives,
                                      const NegativeSet& negatives, double tau, bool include_positive = true) {
  return contrastive_loss_per_instance(anchors, positives, negatives, tau, include_positive).mean();
}

/// Per-anchor diversity term  -(1/Z_i) * sum_j exp(s(a_i,n_j)/tau) / exp(s(a_i,p_i)/tau).
inline torch::Tensor diversity_terms(const torch::Tensor& anchors, const torch::Tensor& positives,
                                     const NegativeSet& negatives, double tau) {
  const auto lg = detail::contrast_logits(anchors, positives, negatives, tau);
  if (lg.counts.numel() > 0 && lg.counts.min().item<std::int64_t>() == 0) {
    throw EmptyNegativeSet("diversity score needs at least one negative per anchor");
  }
  const auto ratio_sum = torch::logsumexp(lg.negatives - lg.positive.unsqueeze(1), 1).exp();
  return -ratio_sum / lg.counts.to(ratio_sum.scalar_type());
}

/// Batch diversity (higher = more diverse). Monitoring metric only.
inline torch::Tensor diversity_score(const torch::Tensor& anchors, const torch::Tensor& positives,
                                     const NegativeSet& negatives, double tau) {
  return diversity_terms(anchors, positives, negatives, tau).mean();
}

}  // namespace cmi

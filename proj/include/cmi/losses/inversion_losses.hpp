#pragma once

#include <torch/torch.h>

#include <optional>
#include <sstream>

#include "cmi/core/errors.hpp"
#include "cmi/models/teacher.hpp"

namespace cmi {

/// Balance terms and temperatures of the inversion objective.
struct LossWeights {
  double alpha_bn = 1.0;   // BN statistics matching
  double beta_cls = 0.1;   // class prior
  double gamma_adv = 1.0;  // (decision) adversarial term
  double alpha_cr = 0.8;   // contrastive term
  double beta_inv = 1.0;   // whole inversion criterion
  double tau_kd = 4.0;     // softmax temperature of the KL terms
  double tau_cr = 0.07;    // contrastive temperature

  void validate() const {
    const std::pair<const char*, double> weights[] = {
        {"alpha_bn", alpha_bn}, {"beta_cls", beta_cls}, {"gamma_adv", gamma_adv},
        {"alpha_cr", alpha_cr}, {"beta_inv", beta_inv}};
    for (const auto& [name, v] : weights) {
      if (!(v >= 0.0)) throw InvalidArgument(std::string(name) + " must be non-negative");
    }
    if (!(tau_kd > 0.0)) throw InvalidArgument("tau_kd must be positive");
    if (!(tau_cr > 0.0)) throw InvalidArgument("tau_cr must be positive");
  }
};

enum class BnDivergence { squared_l2, gaussian_kl };
enum class AdversarialMode { off, plain, decision };

namespace detail {

inline void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw ShapeMismatch(os.str());
  }
}

inline void require_positive_tau(double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
}

}  // namespace detail

/// Sum over BN layers of the divergence between batch statistics and stored
/// statistics. squared_l2: ||mu(x) - mu||^2 + ||var(x) - var||^2.
/// gaussian_kl: KL(N(mu(x), var(x)) || N(mu, var)) summed over channels.
inline torch::Tensor bn_regularization(const BatchStats& stats, const std::vector<LayerStats>& stored,
                                       BnDivergence divergence = BnDivergence::squared_l2) {
  if (stats.size() != stored.size()) {
    throw ShapeMismatch("bn_regularization: " + std::to_string(stats.size()) + " batch stats vs " +
                        std::to_string(stored.size()) + " stored layers");
  }
  if (stats.empty()) throw InvalidArgument("bn_regularization: no BN layers");
  torch::Tensor total;
  for (std::size_t l = 0; l < stats.size(); ++l) {
    const auto& s = stats[l];
    const auto& r = stored[l];
    detail::require_same_shape(s.mean, r.mean, "bn_regularization mean");
    detail::require_same_shape(s.var, r.var, "bn_regularization var");
    const auto mu = r.mean.to(s.mean.dtype());
    const auto var = r.var.to(s.var.dtype());
    torch::Tensor term;
    if (divergence == BnDivergence::squared_l2) {
      term = (s.mean - mu).pow(2).sum() + (s.var - var).pow(2).sum();
    } else {
      constexpr double kEps = 1e-5;
      const auto bv = s.var + kEps;
      term = (0.5 * (torch::log(var) - torch::log(bv)) + (bv + (s.mean - mu).pow(2)) / (2.0 * var) - 0.5).sum();
    }
    total = total.defined() ? total + term : term;
  }
  return total;
}

inline torch::Tensor bn_regularization(const BatchStats& stats, const TeacherSnapshot& t,
                                       BnDivergence divergence = BnDivergence::squared_l2) {
  return bn_regularization(stats, t.bn_layers(), divergence);
}

/// Mean softmax cross-entropy against the assigned classes.
inline torch::Tensor class_prior_loss(const torch::Tensor& logits, const torch::Tensor& targets) {
  if (logits.dim() != 2 || targets.dim() != 1 || logits.size(0) != targets.size(0)) {
    throw ShapeMismatch("class_prior_loss: expected logits (B,C) and targets (B)");
  }
  if (targets.numel() > 0) {
    const auto lo = targets.min().item<std::int64_t>();
    const auto hi = targets.max().item<std::int64_t>();
    if (lo < 0 || hi >= logits.size(1)) {
      throw InvalidArgument("class_prior_loss: target out of range [0, " + std::to_string(logits.size(1)) + ")");
    }
  }
  return torch::nn::functional::cross_entropy(logits, targets.to(torch::kLong));
}

/// Per-sample KL(softmax(t/tau) || softmax(s/tau)), shape (B).
inline torch::Tensor softened_kl_per_sample(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits,
                                            double tau) {
  detail::require_same_shape(teacher_logits, student_logits, "softened KL");
  detail::require_positive_tau(tau);
  const auto log_p = torch::log_softmax(teacher_logits / tau, 1);
  const auto log_q = torch::log_softmax(student_logits / tau, 1);
  return (log_p.exp() * (log_p - log_q)).sum(1);
}

/// -KL(teacher || student), batch mean. Always <= 0.
inline torch::Tensor adversarial_kl_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits,
                                         double tau) {
  return -softened_kl_per_sample(teacher_logits, student_logits, tau).mean();
}

/// Adversarial KL restricted to samples where teacher and student predict the
/// same class. The gate is a hard, non-differentiable indicator; gated-off
/// samples contribute exactly zero value and zero gradient.
inline torch::Tensor decision_adversarial_loss(const torch::Tensor& teacher_logits,
                                               const torch::Tensor& student_logits, double tau) {
  const auto kl = softened_kl_per_sample(teacher_logits, student_logits, tau);
  const auto agree = (teacher_logits.argmax(1) == student_logits.argmax(1)).to(kl.scalar_type()).detach();
  return -(kl * agree).mean();
}

struct InversionTerms {
  torch::Tensor total;
  torch::Tensor bn;
  torch::Tensor cls;
  torch::Tensor adv;  // zero tensor when the adversarial term is off
};

/// alpha*L_bn + beta*L_cls + gamma*L_adv from a teacher forward that has
/// already been run on the (global-view) images.
inline InversionTerms unified_inversion_loss(const TeacherOutput& teacher_out, const std::vector<LayerStats>& stored,
                                             const std::optional<torch::Tensor>& student_logits,
                                             const torch::Tensor& targets, const LossWeights& w,
                                             AdversarialMode mode = AdversarialMode::plain,
                                             BnDivergence divergence = BnDivergence::squared_l2) {
  w.validate();
  const bool use_adv = mode != AdversarialMode::off && w.gamma_adv > 0.0;
  if (use_adv && !student_logits) {
    throw InvalidArgument("unified_inversion_loss: gamma_adv > 0 requires a student");
  }
  InversionTerms out;
  out.bn = bn_regularization(teacher_out.stats, stored, divergence);
  out.cls = class_prior_loss(teacher_out.logits, targets);
  if (use_adv) {
    out.adv = mode == AdversarialMode::decision
                  ? decision_adversarial_loss(teacher_out.logits, *student_logits, w.tau_kd)
                  : adversarial_kl_loss(teacher_out.logits, *student_logits, w.tau_kd);
  } else {
    out.adv = torch::zeros({}, out.bn.options());
  }
  out.total = w.alpha_bn * out.bn + w.beta_cls * out.cls + w.gamma_adv * out.adv;
  return out;
}

/// Convenience form: runs the teacher (and student, when given) on `images`.
inline InversionTerms unified_inversion_loss(const torch::Tensor& images, const TeacherSnapshot& t,
                                             const StudentModel* student, const torch::Tensor& targets,
                                             const LossWeights& w, AdversarialMode mode = AdversarialMode::plain,
                                             BnDivergence divergence = BnDivergence::squared_l2) {
  const bool use_adv = mode != AdversarialMode::off && w.gamma_adv > 0.0;
  if (use_adv && (student == nullptr || !*student)) {
    throw InvalidArgument("unified_inversion_loss: gamma_adv > 0 requires a student");
  }
  const auto out = t.forward_with_features(images);
  std::optional<torch::Tensor> s_logits;
  if (use_adv) s_logits = (*student)->forward(images);
  return unified_inversion_loss(out, t.bn_layers(), s_logits, targets, w, mode, divergence);
}

}  // namespace cmi

#pragma once

#include <torch/torch.h>

#include <cmath>
#include <functional>
#include <memory>
#include <optional>

#include <nlohmann/json.hpp>

#include "cmi/contrastive/contrastive_loss.hpp"
#include "cmi/contrastive/discriminator.hpp"
#include "cmi/contrastive/memory_bank.hpp"
#include "cmi/contrastive/views.hpp"
#include "cmi/core/checksum.hpp"
#include "cmi/core/random.hpp"
#include "cmi/losses/inversion_losses.hpp"
#include "cmi/models/generator.hpp"
#include "cmi/models/teacher.hpp"

namespace cmi {

enum class SynthesisMode { generator, pixels };

struct InversionConfig {
  std::int64_t num_batches = 10;
  std::int64_t batch_size = 256;
  std::int64_t inner_iters = 200;
  std::int64_t latent_dim = 256;
  std::int64_t generator_width = 64;
  double lr_g = 1e-3;        // generator parameters and latent code
  double lr_h = 1e-3;        // instance discriminator
  double lr_pixels = 0.05;   // pixel-space ablation only
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  LossWeights weights;
  AugConfig aug;
  HeadOptions head;
  std::uint64_t seed = 0;
  AdversarialMode adversarial = AdversarialMode::off;
  SynthesisMode synthesis = SynthesisMode::generator;
  BnDivergence bn_divergence = BnDivergence::squared_l2;
  std::int64_t bank_negatives = 256;
  bool include_positive = true;

  void validate() const {
    if (num_batches < 1 || batch_size < 2 || inner_iters < 0 || latent_dim < 1 || generator_width < 1) {
      throw InvalidArgument("inversion counts must be positive (batch_size >= 2, inner_iters >= 0)");
    }
    if (bank_negatives < 0) throw InvalidArgument("bank_negatives must be >= 0");
    if (!(lr_g > 0 && lr_h > 0 && lr_pixels > 0)) throw InvalidArgument("learning rates must be positive");
    weights.validate();
    aug.validate();
  }
};

struct StepMetrics {
  std::int64_t timestamp = 0;
  std::int64_t iter = 0;
  double total = 0, cr = 0, inv = 0, bn = 0, cls = 0, adv = 0;
  std::optional<double> diversity;
};

inline nlohmann::json to_json(const StepMetrics& m) {
  nlohmann::json j = {{"timestamp", m.timestamp}, {"iter", m.iter}, {"total", m.total}, {"cr", m.cr},
                      {"inv", m.inv}, {"bn", m.bn}, {"cls", m.cls}, {"adv", m.adv}};
  j["diversity_score"] = m.diversity ? nlohmann::json(*m.diversity) : nlohmann::json(nullptr);
  return j;
}

/// Scalar descended at one inner step plus its breakdown.
struct ObjectiveTerms {
  torch::Tensor total;  // alpha_cr * cr + beta_inv * inv
  torch::Tensor cr;     // contrastive term (zero when not computed)
  InversionTerms inv;   // unified inversion criterion on the global view
  std::optional<double> diversity;
};

/// Contrastive inversion objective on a prepared view pair.
///  - L_inv (BN, class prior, adversarial) sees the global view only.
///  - L_cr anchors on local-view embeddings; positives are embeddings of
///    stop-gradient global-view features, so no gradient reaches the global
///    view through L_cr. The head receives gradient from every branch.
///  - `bank_features` are cached pooled teacher features of bank samples.
inline ObjectiveTerms cmi_objective(const TeacherSnapshot& t, InstanceDiscriminator& h, const ViewPair& views,
                                    const torch::Tensor& targets, const torch::Tensor& bank_features,
                                    const StudentModel* student, const InversionConfig& cfg,
                                    bool want_diversity = false) {
  const auto& w = cfg.weights;
  const auto global_out = t.forward_with_features(views.global);
  std::optional<torch::Tensor> s_logits;
  const bool adv_on = cfg.adversarial != AdversarialMode::off && w.gamma_adv > 0.0;
  if (adv_on) {
    if (student == nullptr || !*student) throw InvalidArgument("adversarial synthesis requires a student");
    s_logits = (*student)->forward(views.global);
  }
  ObjectiveTerms out;
  out.inv = unified_inversion_loss(global_out, t.bn_layers(), s_logits, targets, w, cfg.adversarial,
                                   cfg.bn_divergence);

  const bool contrast = w.alpha_cr > 0.0 || want_diversity;
  if (contrast) {
    std::optional<torch::NoGradGuard> no_grad;
    if (w.alpha_cr == 0.0) no_grad.emplace();
    const auto local_out = t.forward_with_features(views.local);
    const auto anchors = h->forward(pooled_features(local_out.taps));
    const auto positives = h->forward(pooled_features(global_out.taps).detach());
    torch::Tensor bank;
    if (bank_features.defined() && bank_features.size(0) > 0) bank = h->forward(bank_features.to(anchors.dtype()));
    const auto negatives = in_batch_negatives(anchors, positives, bank);
    out.cr = contrastive_loss(anchors, positives, negatives, w.tau_cr, cfg.include_positive);
    if (want_diversity) {
      torch::NoGradGuard ng;
      const auto neg_d = in_batch_negatives(anchors.detach(), positives.detach(), bank.defined() ? bank.detach() : bank);
      out.diversity = diversity_score(anchors.detach(), positives.detach(), neg_d, w.tau_cr).item<double>();
    }
  } else {
    out.cr = torch::zeros({}, out.inv.total.options());
  }
  out.total = w.alpha_cr * out.cr + w.beta_inv * out.inv.total;
  return out;
}

/// Freezes a student for the duration of a synthesis step: eval-mode BN and
/// no parameter gradients. Restores the previous state on destruction.
class StudentFreeze {
 public:
  explicit StudentFreeze(StudentModel* s) : s_(s) {
    if (s_ == nullptr || !*s_) return;
    was_training_ = (*s_)->is_training();
    (*s_)->eval();
    for (auto& p : (*s_)->parameters()) {
      flags_.push_back(p.requires_grad());
      p.requires_grad_(false);
    }
  }
  ~StudentFreeze() {
    if (s_ == nullptr || !*s_) return;
    auto params = (*s_)->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].requires_grad_(flags_[i]);
    (*s_)->train(was_training_);
  }
  StudentFreeze(const StudentFreeze&) = delete;
  StudentFreeze& operator=(const StudentFreeze&) = delete;

 private:
  StudentModel* s_;
  bool was_training_ = false;
  std::vector<bool> flags_;
};

/// Partial results of a run that hit a non-finite objective.
class InversionAborted : public DivergenceError {
 public:
  InversionAborted(const DivergenceError& cause, MemoryBank partial)
      : DivergenceError(cause.what(), cause.diagnostics()), partial_(std::move(partial)) {}
  const MemoryBank& partial_bank() const { return partial_; }

 private:
  MemoryBank partial_;
};

/// Owns the state that persists across timestamps: the instance
/// discriminator (initialized once) and its optimizer.
class ContrastiveInverter {
 public:
  using StepSink = std::function<void(const StepMetrics&)>;

  ContrastiveInverter(TeacherSnapshot teacher, InversionConfig cfg)
      : teacher_(std::move(teacher)), cfg_(std::move(cfg)),
        head_(make_discriminator(teacher_, cfg_.head, derive_seed(cfg_.seed, "discriminator"))) {
    cfg_.validate();
    if (head_->parameters().size() > 0) {
      head_opt_ = std::make_unique<torch::optim::Adam>(
          head_->parameters(),
          torch::optim::AdamOptions(cfg_.lr_h).betas({cfg_.adam_beta1, cfg_.adam_beta2}));
    }
  }

  std::uint64_t generator_seed(std::int64_t timestamp) const {
    return derive_seed(cfg_.seed, "generator", {static_cast<std::uint64_t>(timestamp)});
  }

  /// Round-robin class-prior labels for the batch at `timestamp`.
  torch::Tensor assign_targets(std::int64_t timestamp) const {
    const auto b = cfg_.batch_size;
    return (torch::arange(b, torch::kLong) + timestamp * b).remainder(teacher_.num_classes());
  }

  /// One timestamp: fresh generator and latent code, `inner_iters` joint
  /// updates of (z, theta_g, theta_h), then the final images.
  SyntheticBatch synthesize_batch(const MemoryBank& bank, StudentModel* student, std::int64_t timestamp,
                                  const StepSink& sink = {}) {
    const bool adv_on = cfg_.adversarial != AdversarialMode::off && cfg_.weights.gamma_adv > 0.0;
    if (adv_on && (student == nullptr || !*student)) {
      throw InvalidArgument("adversarial_mode requires a student");
    }
    StudentFreeze freeze(adv_on ? student : nullptr);
    const auto ts = static_cast<std::uint64_t>(timestamp);
    const auto dtype = teacher_.dtype();
    const auto targets = assign_targets(timestamp);
    const auto b = cfg_.batch_size;
    const auto& shape = teacher_.input_shape();

    SyntheticBatch out;
    out.generator_seed = generator_seed(timestamp);

    Generator gen{nullptr};
    torch::Tensor z, pixels;
    std::unique_ptr<torch::optim::Adam> opt;
    const auto adam = [&](double lr) { return torch::optim::AdamOptions(lr).betas({cfg_.adam_beta1, cfg_.adam_beta2}); };
    if (cfg_.synthesis == SynthesisMode::generator) {
      gen = build_generator(cfg_.latent_dim, shape, out.generator_seed, cfg_.generator_width);
      // Module::to(dtype) also casts integer BN counters, so skip the no-op case.
      if (dtype != torch::kFloat) gen->to(dtype);
      out.generator_checksum = checksum(*gen);
      auto zgen = make_generator(derive_seed(cfg_.seed, "latent", {ts}));
      z = torch::randn({b, cfg_.latent_dim}, zgen, torch::TensorOptions().dtype(dtype)).requires_grad_(true);
      auto params = gen->parameters();
      params.push_back(z);
      opt = std::make_unique<torch::optim::Adam>(params, adam(cfg_.lr_g));
    } else {
      auto pgen = make_generator(out.generator_seed);
      pixels = torch::randn(shape.batch_dims(b), pgen, torch::TensorOptions().dtype(dtype)).clamp_(-1.0, 1.0);
      pixels.requires_grad_(true);
      out.generator_checksum = checksum(pixels);
      opt = std::make_unique<torch::optim::Adam>(std::vector<torch::Tensor>{pixels}, adam(cfg_.lr_pixels));
    }
    const auto synthesize = [&] { return gen ? gen->forward(z) : pixels; };

    for (std::int64_t it = 0; it < cfg_.inner_iters; ++it) {
      const auto step = static_cast<std::uint64_t>(it);
      const auto x = synthesize();
      const auto views = make_views(x, cfg_.aug, derive_seed(cfg_.seed, "views", {ts, step}));
      torch::Tensor bank_features;
      if (cfg_.weights.alpha_cr > 0.0 && bank.has_features() && !bank.empty()) {
        bank_features = bank.sample(cfg_.bank_negatives, derive_seed(cfg_.seed, "bank", {ts, step})).features;
      }
      const bool last = it + 1 == cfg_.inner_iters;
      auto terms = cmi_objective(teacher_, head_, views, targets, bank_features, student, cfg_, last);

      StepMetrics m;
      m.timestamp = timestamp;
      m.iter = it;
      m.total = terms.total.item<double>();
      m.cr = terms.cr.item<double>();
      m.inv = terms.inv.total.item<double>();
      m.bn = terms.inv.bn.item<double>();
      m.cls = terms.inv.cls.item<double>();
      m.adv = terms.inv.adv.item<double>();
      m.diversity = terms.diversity;
      if (!std::isfinite(m.total)) {
        nlohmann::json diag = to_json(m);
        diag["generator_seed"] = out.generator_seed;
        diag["mode"] = cfg_.synthesis == SynthesisMode::generator ? "generator" : "pixels";
        diag["image_abs_max"] = x.detach().abs().max().item<double>();
        if (z.defined()) diag["latent_norm"] = z.detach().norm().item<double>();
        throw DivergenceError("non-finite inversion objective at timestamp " + std::to_string(timestamp) +
                                  ", iteration " + std::to_string(it),
                              diag.dump(2));
      }

      opt->zero_grad();
      if (head_opt_) head_opt_->zero_grad();
      terms.total.backward();
      opt->step();
      if (head_opt_ && cfg_.weights.alpha_cr > 0.0) head_opt_->step();
      if (pixels.defined()) {
        torch::NoGradGuard ng;
        pixels.clamp_(-1.0, 1.0);
      }
      if (sink) sink(m);
    }

    torch::NoGradGuard ng;
    out.images = synthesize().detach().clone();
    out.targets = targets;
    const auto final_out = teacher_.forward_with_features(out.images);
    out.teacher_logits = final_out.logits.detach();
    out.features = pooled_features(final_out.taps).detach();
    return out;
  }

  const TeacherSnapshot& teacher() const { return teacher_; }
  const InversionConfig& config() const { return cfg_; }
  InstanceDiscriminator& head() { return head_; }

 private:
  TeacherSnapshot teacher_;
  InversionConfig cfg_;
  InstanceDiscriminator head_;
  std::unique_ptr<torch::optim::Adam> head_opt_;
};

struct InversionCallbacks {
  ContrastiveInverter::StepSink on_step;
  std::function<void(const MemoryBank&, const SyntheticBatch&)> on_batch;
};

/// Runs `num_batches` timestamps into `bank`. On divergence the records
/// appended so far are kept and InversionAborted carries them.
inline void run_inversion(ContrastiveInverter& inverter, StudentModel* student, MemoryBank& bank,
                          const InversionCallbacks& cb = {}) {
  const auto& cfg = inverter.config();
  const auto first = bank.num_batches();
  for (std::int64_t i = 0; i < cfg.num_batches; ++i) {
    SyntheticBatch batch;
    try {
      batch = inverter.synthesize_batch(bank, student, first + i, cb.on_step);
    } catch (const DivergenceError& e) {
      throw InversionAborted(e, bank);
    }
    bank.append(batch);
    if (cb.on_batch) cb.on_batch(bank, batch);
  }
}

inline MemoryBank run_inversion(const TeacherSnapshot& t, StudentModel* student, const InversionConfig& cfg,
                                const InversionCallbacks& cb = {}) {
  ContrastiveInverter inverter(t, cfg);
  MemoryBank bank(t.num_classes());
  run_inversion(inverter, student, bank, cb);
  return bank;
}

}  // namespace cmi

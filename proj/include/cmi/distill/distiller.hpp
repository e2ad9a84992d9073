#pragma once

#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>

#include <nlohmann/json.hpp>

#include "cmi/contrastive/memory_bank.hpp"
#include "cmi/core/checksum.hpp"
#include "cmi/core/random.hpp"
#include "cmi/data/dataset.hpp"
#include "cmi/engine/inversion.hpp"
#include "cmi/eval/metrics.hpp"
#include "cmi/io/bank_io.hpp"
#include "cmi/losses/inversion_losses.hpp"
#include "cmi/models/registry.hpp"
#include "cmi/models/teacher.hpp"

namespace cmi {

enum class DistillSchedule { offline, interleaved };

struct DistillConfig {
  std::int64_t epochs = 20;      // passes over the bank (after synthesis when interleaved)
  std::int64_t batch_size = 128;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double tau_kd = 4.0;
  DistillSchedule schedule = DistillSchedule::offline;
  std::int64_t k = 5;            // student steps per synthesized batch when interleaved
  bool flip = true;
  std::int64_t shift = 2;        // max random translation in pixels (0 disables)
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0 || batch_size < 2 || k < 0) throw InvalidArgument("distill budgets must be non-negative (batch_size >= 2)");
    if (!(lr > 0) || momentum < 0 || weight_decay < 0) throw InvalidArgument("invalid distill optimizer settings");
    if (!(tau_kd > 0)) throw InvalidArgument("tau_kd must be positive");
    if (shift < 0) throw InvalidArgument("shift must be >= 0");
  }
};

/// tau^2 * KL(softmax(t/tau) || softmax(s/tau)), batch mean.
inline torch::Tensor kd_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits, double tau) {
  return tau * tau * softened_kl_per_sample(teacher_logits, student_logits, tau).mean();
}

/// Distillation loss of `s` on `images`; only the student receives gradient.
inline torch::Tensor kd_step(StudentModel& s, const TeacherSnapshot& t, const torch::Tensor& images, double tau) {
  torch::Tensor t_logits;
  {
    torch::NoGradGuard ng;
    t_logits = t.logits(images.detach());
  }
  return kd_loss(t_logits, s->forward(images.detach()), tau);
}

/// Mean KD loss of a student over a fixed image set, evaluated in eval mode.
inline double evaluate_kd_loss(StudentModel& s, const TeacherSnapshot& t, const torch::Tensor& images, double tau,
                               std::int64_t chunk = 512) {
  torch::NoGradGuard ng;
  const bool was_training = s->is_training();
  s->eval();
  double total = 0;
  for (std::int64_t b = 0; b < images.size(0); b += chunk) {
    const auto e = std::min(images.size(0), b + chunk);
    const auto x = images.slice(0, b, e);
    total += kd_loss(t.logits(x), s->forward(x), tau).item<double>() * static_cast<double>(e - b);
  }
  s->train(was_training);
  return total / static_cast<double>(images.size(0));
}

/// Random horizontal flip and zero-padded translation, seeded.
inline torch::Tensor augment_batch(const torch::Tensor& x, bool flip, std::int64_t shift, std::uint64_t seed) {
  auto out = x;
  const auto n = x.size(0);
  auto gen = make_generator(seed);
  if (flip) {
    const auto mask = torch::rand({n}, gen).lt(0.5).view({-1, 1, 1, 1});
    out = torch::where(mask, out.flip({3}), out);
  }
  if (shift > 0) {
    const auto h = x.size(2), w = x.size(3);
    const auto padded = torch::constant_pad_nd(out, {shift, shift, shift, shift}, 0.0);
    const auto off = torch::randint(0, 2 * shift + 1, {n, 2}, gen, torch::kLong);
    auto acc = off.accessor<std::int64_t, 2>();
    std::vector<torch::Tensor> rows;
    rows.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      rows.push_back(padded[i].slice(1, acc[i][0], acc[i][0] + h).slice(2, acc[i][1], acc[i][1] + w));
    }
    out = torch::stack(rows);
  }
  return out;
}

struct EpochMetrics {
  std::int64_t epoch = 0;
  double kd_loss = 0;
  double lr = 0;
  std::optional<double> eval_accuracy;
};

struct DistillResult {
  std::vector<EpochMetrics> history;
  std::optional<double> best_accuracy;
  std::int64_t best_epoch = -1;
  std::optional<double> final_accuracy;  // of the returned (best) student
  std::int64_t steps = 0;
};

/// Owns the student's optimizer and step counter. The learning rate follows
/// a cosine decay from cfg.lr to 0 over `total_steps`.
class StudentTrainer {
 public:
  StudentTrainer(StudentModel student, TeacherSnapshot teacher, DistillConfig cfg, std::int64_t total_steps)
      : s_(std::move(student)), t_(std::move(teacher)), cfg_(std::move(cfg)), total_(std::max<std::int64_t>(total_steps, 1)),
        opt_(s_->parameters(),
             torch::optim::SGDOptions(cfg_.lr).momentum(cfg_.momentum).weight_decay(cfg_.weight_decay)) {
    cfg_.validate();
  }

  double current_lr() const {
    const double progress = std::min(1.0, static_cast<double>(step_) / static_cast<double>(total_));
    return 0.5 * cfg_.lr * (1.0 + std::cos(std::numbers::pi * progress));
  }

  /// One SGD step on an augmented copy of `images`; returns the KD loss.
  double step(const torch::Tensor& images) {
    for (auto& g : opt_.param_groups()) static_cast<torch::optim::SGDOptions&>(g.options()).lr(current_lr());
    s_->train();
    const auto x = augment_batch(images.detach(), cfg_.flip, cfg_.shift,
                                 derive_seed(cfg_.seed, "distill-aug", {static_cast<std::uint64_t>(step_)}));
    opt_.zero_grad();
    auto loss = kd_step(s_, t_, x, cfg_.tau_kd);
    loss.backward();
    opt_.step();
    ++step_;
    return loss.item<double>();
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    save_checkpoint(*s_, dir / "student.pt");
    torch::serialize::OutputArchive ar;
    opt_.save(ar);
    ar.save_to((dir / "optimizer.pt").string());
  }

  void load(const std::filesystem::path& dir) {
    load_checkpoint(*s_, dir / "student.pt");
    torch::serialize::InputArchive ar;
    ar.load_from((dir / "optimizer.pt").string());
    opt_.load(ar);
  }

  StudentModel& student() { return s_; }
  const TeacherSnapshot& teacher() const { return t_; }
  const DistillConfig& config() const { return cfg_; }
  std::int64_t steps() const { return step_; }
  void set_steps(std::int64_t s) { step_ = s; }
  std::int64_t total_steps() const { return total_; }

 private:
  StudentModel s_;
  TeacherSnapshot t_;
  DistillConfig cfg_;
  std::int64_t total_;
  std::int64_t step_ = 0;
  torch::optim::SGD opt_;
};

struct DistillHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  std::function<void(std::int64_t round, const MemoryBank&)> on_round;
  const LabeledImages* eval_set = nullptr;       // selects the best checkpoint when given
  std::optional<std::filesystem::path> checkpoint_dir;  // per-epoch state for resume
  bool resume = false;
};

namespace detail {

inline std::int64_t steps_per_epoch(std::int64_t n, std::int64_t batch) { return n / batch + (n % batch >= 2 ? 1 : 0); }

inline void snapshot_state(torch::nn::Module& m, std::vector<torch::Tensor>& out) {
  torch::NoGradGuard ng;
  out.clear();
  for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
  for (const auto& b : m.buffers()) out.push_back(b.detach().clone());
}

inline void restore_state(torch::nn::Module& m, const std::vector<torch::Tensor>& in) {
  torch::NoGradGuard ng;
  std::size_t i = 0;
  for (auto& p : m.parameters()) p.copy_(in[i++]);
  for (auto& b : m.buffers()) b.copy_(in[i++]);
}

/// Offline epochs over the whole bank with per-epoch shuffles.
inline DistillResult run_epochs(StudentTrainer& tr, const MemoryBank& bank, const DistillHooks& hooks,
                                DistillResult result = {}) {
  const auto& cfg = tr.config();
  auto& s = tr.student();
  std::vector<torch::Tensor> best;
  std::int64_t start_epoch = 0;
  namespace fs = std::filesystem;
  if (hooks.checkpoint_dir && hooks.resume && fs::exists(*hooks.checkpoint_dir / "state.json")) {
    const auto st = nlohmann::json::parse(read_text_file(*hooks.checkpoint_dir / "state.json"));
    tr.load(*hooks.checkpoint_dir);
    tr.set_steps(st.at("steps").get<std::int64_t>());
    start_epoch = st.at("epoch").get<std::int64_t>() + 1;
    for (const auto& h : st.at("history")) {
      EpochMetrics m{h.at("epoch").get<std::int64_t>(), h.at("kd_loss").get<double>(), h.at("lr").get<double>(),
                     std::nullopt};
      if (!h.at("eval_accuracy").is_null()) m.eval_accuracy = h.at("eval_accuracy").get<double>();
      result.history.push_back(m);
    }
    if (!st.at("best_accuracy").is_null()) {
      result.best_accuracy = st.at("best_accuracy").get<double>();
      result.best_epoch = st.at("best_epoch").get<std::int64_t>();
      auto copy = make_classifier(s->spec());
      load_checkpoint(*copy, *hooks.checkpoint_dir / "best.pt");
      snapshot_state(*copy, best);
    }
  }
  const auto n = bank.size();
  const auto images = bank.images();
  for (std::int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    auto gen = make_generator(derive_seed(cfg.seed, "distill-epoch", {static_cast<std::uint64_t>(epoch)}));
    const auto perm = torch::randperm(n, gen, torch::kLong);
    double loss_sum = 0;
    std::int64_t batches = 0;
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = tr.current_lr();
    for (std::int64_t b = 0; b + 2 <= n; b += cfg.batch_size) {
      const auto e = std::min(n, b + cfg.batch_size);
      if (e - b < 2) break;
      loss_sum += tr.step(images.index_select(0, perm.slice(0, b, e)));
      ++batches;
    }
    m.kd_loss = batches > 0 ? loss_sum / static_cast<double>(batches) : 0.0;
    if (hooks.eval_set != nullptr) {
      m.eval_accuracy = evaluate_accuracy(s, *hooks.eval_set);
      if (!result.best_accuracy || *m.eval_accuracy > *result.best_accuracy) {
        result.best_accuracy = m.eval_accuracy;
        result.best_epoch = epoch;
        snapshot_state(*s, best);
      }
    }
    result.history.push_back(m);
    if (hooks.checkpoint_dir) {
      tr.save(*hooks.checkpoint_dir);
      nlohmann::json hist = nlohmann::json::array();
      for (const auto& h : result.history) {
        hist.push_back({{"epoch", h.epoch}, {"kd_loss", h.kd_loss}, {"lr", h.lr},
                        {"eval_accuracy", h.eval_accuracy ? nlohmann::json(*h.eval_accuracy) : nlohmann::json()}});
      }
      nlohmann::json st = {{"epoch", epoch}, {"steps", tr.steps()}, {"history", hist},
                           {"best_epoch", result.best_epoch},
                           {"best_accuracy", result.best_accuracy ? nlohmann::json(*result.best_accuracy) : nlohmann::json()}};
      if (result.best_epoch == epoch) save_checkpoint(*s, *hooks.checkpoint_dir / "best.pt");
      write_text_file(*hooks.checkpoint_dir / "state.json", st.dump(2));
    }
    if (hooks.on_epoch) hooks.on_epoch(m);
  }
  if (!best.empty()) restore_state(*s, best);
  if (hooks.eval_set != nullptr) result.final_accuracy = evaluate_accuracy(s, *hooks.eval_set);
  result.steps = tr.steps();
  return result;
}

}  // namespace detail

/// Offline schedule: KD over a fixed, non-empty bank.
inline DistillResult train_student(StudentModel& s, const TeacherSnapshot& t, const MemoryBank& bank,
                                   const DistillConfig& cfg, const DistillHooks& hooks = {}) {
  cfg.validate();
  if (bank.empty()) throw EmptyDataset("offline distillation needs a non-empty bank");
  StudentTrainer tr(s, t, cfg, cfg.epochs * detail::steps_per_epoch(bank.size(), cfg.batch_size));
  return detail::run_epochs(tr, bank, hooks);
}

/// One synthesis timestamp with the current student in the loop, then `k`
/// KD steps on batches sampled from the grown bank. Also accepted with the
/// adversarial term off, so schedule comparisons can change one factor.
inline void interleaved_round(StudentTrainer& tr, ContrastiveInverter& inverter, MemoryBank& bank, std::int64_t round,
                              const InversionCallbacks& cb = {}) {
  auto& s = tr.student();
  auto batch = inverter.synthesize_batch(bank, &s, bank.num_batches(), cb.on_step);
  bank.append(batch);
  if (cb.on_batch) cb.on_batch(bank, batch);
  const auto& cfg = tr.config();
  for (std::int64_t j = 0; j < cfg.k; ++j) {
    const auto seed = derive_seed(cfg.seed, "interleave-sample", {static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(j)});
    tr.step(bank.sample(cfg.batch_size, seed).images);
  }
}

/// Interleaved schedule: `inverter.config().num_batches` rounds, then
/// cfg.epochs offline epochs over the final bank, all under one cosine
/// schedule.
inline DistillResult train_interleaved(StudentModel& s, const TeacherSnapshot& t, ContrastiveInverter& inverter,
                                       MemoryBank& bank, const DistillConfig& cfg, const DistillHooks& hooks = {},
                                       const InversionCallbacks& cb = {}) {
  cfg.validate();
  const auto& icfg = inverter.config();
  const auto final_size = bank.size() + icfg.num_batches * icfg.batch_size;
  StudentTrainer tr(s, t, cfg, icfg.num_batches * cfg.k + cfg.epochs * detail::steps_per_epoch(final_size, cfg.batch_size));
  for (std::int64_t r = 0; r < icfg.num_batches; ++r) {
    try {
      interleaved_round(tr, inverter, bank, r, cb);
    } catch (const DivergenceError& e) {
      throw InversionAborted(e, bank);
    }
    if (hooks.on_round) hooks.on_round(r, bank);
  }
  if (bank.empty()) throw EmptyDataset("interleaved distillation produced an empty bank");
  return detail::run_epochs(tr, bank, hooks);
}

}  // namespace cmi

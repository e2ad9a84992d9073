#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

#include <nlohmann/json.hpp>

#include "cmi/app/config.hpp"
#include "cmi/data/cifar.hpp"
#include "cmi/data/image_folder.hpp"
#include "cmi/data/shapes.hpp"
#include "cmi/distill/distiller.hpp"
#include "cmi/engine/inversion.hpp"
#include "cmi/eval/fid.hpp"
#include "cmi/eval/metrics.hpp"
#include "cmi/io/bank_io.hpp"
#include "cmi/io/grid.hpp"
#include "cmi/models/teacher.hpp"

namespace cmi {

inline LabeledImages load_dataset(const DatasetSpec& d, const InputShape& expect, std::uint64_t seed) {
  LabeledImages data;
  if (d.kind == "shapes") {
    data = make_shapes(d.shapes);
  } else if (d.kind == "folder") {
    data = load_image_folder(d.path, static_cast<int>(expect.channels));
  } else {
    data = load_cifar(d.root, d.kind == "cifar10" ? CifarVariant::cifar10 : CifarVariant::cifar100,
                      d.split == "train" ? CifarSplit::train : CifarSplit::test, d.download);
  }
  if (d.limit > 0) data = data.subsample(d.limit, derive_seed(seed, "dataset-limit"));
  const auto s = data.images.sizes();
  if (s[1] != expect.channels || s[2] != expect.height || s[3] != expect.width) {
    throw ShapeMismatch("dataset images do not match the teacher input shape");
  }
  return data;
}

/// Real image sets referenced by a config, loaded once and shared by runs.
struct EvalData {
  std::optional<LabeledImages> real;        // FID reference
  std::optional<LabeledImages> validation;  // student accuracy
};

inline EvalData load_eval_data(const ExperimentConfig& c) {
  EvalData d;
  if (c.real_data) d.real = load_dataset(*c.real_data, c.teacher.input, c.seed);
  if (c.validation_data) d.validation = load_dataset(*c.validation_data, c.teacher.input, c.seed);
  return d;
}

/// Line-oriented JSON writer that flushes every record.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot create '" + path.string() + "'");
  }
  void write(const json& j) {
    out_ << j.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

struct PipelineResult {
  MemoryBank bank;
  DistillResult distill;
  std::optional<double> student_accuracy;
  std::optional<double> mean_pairwise_cosine;
  std::vector<LevelFid> fid;
  std::uint64_t bank_checksum = 0;
  std::uint64_t student_checksum = 0;
};

struct PipelineOptions {
  std::optional<std::filesystem::path> out_dir;  // write artifacts here when set
  bool write_bank = true;                        // images + index (artifacts mode only)
  bool resume = false;
  std::function<void(const std::string&)> log;
};

inline void write_grid_snapshot(const std::filesystem::path& dir, const MemoryBank& bank, std::int64_t batch_no) {
  std::filesystem::create_directories(dir);
  char name[48];
  std::snprintf(name, sizeof name, "grid_%05lld.png", static_cast<long long>(batch_no));
  const auto n = std::min<std::int64_t>(bank.size(), 64);
  save_grid(dir / name, bank.images().slice(0, bank.size() - n, bank.size()));
}

inline json level_fid_json(const std::vector<LevelFid>& fid) {
  json out = json::object();
  for (const auto& f : fid) {
    json e = {{"tap", f.tap}, {"fid", f.fid}, {"dim", f.dim}, {"n_real", f.n_real}, {"n_fake", f.n_fake}};
    if (!f.warning.empty()) e["warning"] = f.warning;
    out["level_" + std::to_string(f.level)] = e;
  }
  return out;
}

/// Bank-quality metrics shared by the pipeline, the eval command and the tests.
inline void evaluate_bank(const ExperimentConfig& c, const TeacherSnapshot& t, const EvalData& data,
                          PipelineResult& r) {
  if (r.bank.size() >= 2) {
    const auto sub = r.bank.sample(c.diversity_samples, derive_seed(c.seed, "diversity-subsample"));
    r.mean_pairwise_cosine = mean_pairwise_cosine(pooled_teacher_features(t, sub.images));
    if (data.real && !c.fid_levels.empty()) r.fid = multi_level_fid(t, data.real->images, r.bank.images(), c.fid_levels);
  }
}

namespace detail {

/// Artifact sinks for one synthesis run; all optional.
struct InvertSinks {
  std::optional<JsonlWriter> metrics;
  std::optional<BankWriter> bank_writer;
  InversionCallbacks cb;

  InvertSinks(const ExperimentConfig& c, const PipelineOptions& opt) {
    if (opt.out_dir) {
      std::filesystem::create_directories(*opt.out_dir);
      metrics.emplace(*opt.out_dir / "metrics.jsonl");
      if (opt.write_bank) bank_writer.emplace(*opt.out_dir / "bank");
    }
    cb.on_step = [this](const StepMetrics& m) {
      if (metrics) metrics->write(to_json(m));
    };
    cb.on_batch = [this, &c, opt](const MemoryBank& bank, const SyntheticBatch&) {
      if (bank_writer) bank_writer->sync(bank);
      const auto k = bank.num_batches();
      if (opt.out_dir && c.grid_every > 0 && k % c.grid_every == 0) write_grid_snapshot(*opt.out_dir / "grids", bank, k);
      if (opt.log) opt.log("synthesized batch " + std::to_string(k) + "/" + std::to_string(c.inversion.num_batches));
    };
  }
  InvertSinks(const InvertSinks&) = delete;
  InvertSinks& operator=(const InvertSinks&) = delete;

  void finish(const MemoryBank& bank, ContrastiveInverter& inverter, const PipelineOptions& opt) {
    if (!bank_writer) return;
    bank_writer->finalize(bank);
    torch::save(inverter.head(), (*opt.out_dir / "bank" / "head.pt").string());
  }
};

struct DistillSinks {
  std::optional<JsonlWriter> epochs;
  DistillHooks hooks;

  DistillSinks(const EvalData& data, const PipelineOptions& opt) {
    if (data.validation) hooks.eval_set = &*data.validation;
    if (opt.out_dir) {
      std::filesystem::create_directories(*opt.out_dir);
      hooks.checkpoint_dir = *opt.out_dir / "checkpoints";
      hooks.resume = opt.resume;
      epochs.emplace(*opt.out_dir / "distill.jsonl");
    }
    hooks.on_epoch = [this, log = opt.log](const EpochMetrics& m) {
      if (epochs) {
        epochs->write({{"epoch", m.epoch}, {"kd_loss", m.kd_loss}, {"lr", m.lr},
                       {"eval_accuracy", m.eval_accuracy ? json(*m.eval_accuracy) : json()}});
      }
      if (log) log("distill epoch " + std::to_string(m.epoch) + " kd_loss " + std::to_string(m.kd_loss));
    };
  }
  DistillSinks(const DistillSinks&) = delete;
  DistillSinks& operator=(const DistillSinks&) = delete;
};

/// Offline synthesis into `bank`. The adversarial term, when enabled, plays
/// against `student` as it is (never trained during offline synthesis).
inline void invert_into(const ExperimentConfig& c, ContrastiveInverter& inverter, StudentModel& student,
                        MemoryBank& bank, InvertSinks& sinks, const PipelineOptions& opt) {
  const bool adv = c.inversion.adversarial != AdversarialMode::off && c.inversion.weights.gamma_adv > 0;
  try {
    run_inversion(inverter, adv ? &student : nullptr, bank, sinks.cb);
  } catch (const InversionAborted& e) {
    if (sinks.bank_writer) sinks.bank_writer->finalize(e.partial_bank());
    throw;
  }
  sinks.finish(bank, inverter, opt);
}

inline std::uint64_t student_init_seed(const ExperimentConfig& c) { return derive_seed(c.seed, "student-init"); }

}  // namespace detail

/// Offline synthesis only. With `opt.out_dir` set, writes bank/, metrics.jsonl
/// and grids/.
inline MemoryBank run_invert(const ExperimentConfig& c, const TeacherSnapshot& t, const PipelineOptions& opt = {}) {
  MemoryBank bank(t.num_classes());
  ContrastiveInverter inverter(t, c.inversion);
  auto student = build_student(c.student, detail::student_init_seed(c));
  detail::InvertSinks sinks(c, opt);
  detail::invert_into(c, inverter, student, bank, sinks, opt);
  return bank;
}

struct DistillOutcome {
  StudentModel student;
  DistillResult result;
};

/// Offline distillation over an existing bank. With `opt.out_dir` set,
/// writes checkpoints/, distill.jsonl and student.pt; `opt.resume` continues
/// from the last completed epoch.
inline DistillOutcome run_distill(const ExperimentConfig& c, const TeacherSnapshot& t, const MemoryBank& bank,
                                  const EvalData& data, const PipelineOptions& opt = {}) {
  DistillOutcome out{build_student(c.student, detail::student_init_seed(c)), {}};
  detail::DistillSinks sinks(data, opt);
  out.result = train_student(out.student, t, bank, c.distill, sinks.hooks);
  if (opt.out_dir) save_checkpoint(*out.student, *opt.out_dir / "student.pt");
  return out;
}

/// Synthesis followed by distillation under the configured schedule, then
/// evaluation. With `opt.out_dir` set, every artifact of the run is written.
inline PipelineResult run_pipeline(const ExperimentConfig& c, const TeacherSnapshot& t, const EvalData& data,
                                   const PipelineOptions& opt = {}) {
  PipelineResult r;
  r.bank = MemoryBank(t.num_classes());
  ContrastiveInverter inverter(t, c.inversion);
  auto student = build_student(c.student, detail::student_init_seed(c));
  detail::InvertSinks isinks(c, opt);
  detail::DistillSinks dsinks(data, opt);

  if (c.distill.schedule == DistillSchedule::interleaved) {
    try {
      r.distill = train_interleaved(student, t, inverter, r.bank, c.distill, dsinks.hooks, isinks.cb);
    } catch (const InversionAborted& e) {
      if (isinks.bank_writer) isinks.bank_writer->finalize(e.partial_bank());
      throw;
    }
    isinks.finish(r.bank, inverter, opt);
  } else {
    detail::invert_into(c, inverter, student, r.bank, isinks, opt);
    // Offline distillation starts from the same initialization as run_distill.
    student = build_student(c.student, detail::student_init_seed(c));
    r.distill = train_student(student, t, r.bank, c.distill, dsinks.hooks);
  }
  r.bank_checksum = r.bank.checksum();
  r.student_checksum = checksum(*student);
  if (data.validation) r.student_accuracy = evaluate_accuracy(student, *data.validation);
  evaluate_bank(c, t, data, r);
  if (opt.out_dir) save_checkpoint(*student, *opt.out_dir / "student.pt");
  return r;
}

/// Head used for diversity summaries: the one saved next to a bank when
/// present, otherwise the configured head at its seeded initialization.
inline InstanceDiscriminator load_head(const ExperimentConfig& c, const TeacherSnapshot& t,
                                       const std::optional<std::filesystem::path>& path) {
  auto h = make_discriminator(t, c.inversion.head, derive_seed(c.inversion.seed, "discriminator"));
  if (path && std::filesystem::exists(*path)) {
    try {
      torch::load(h, path->string());
    } catch (const c10::Error& e) {
      throw IoError("cannot load discriminator head '" + path->string() + "' (does inversion.head match?): " +
                    e.what_without_backtrace());
    }
  }
  return h;
}

/// Multi-level FID of `fake` against `real` plus the diversity summary of
/// `fake`, keyed as in the eval report.
inline json image_set_report(const ExperimentConfig& c, const TeacherSnapshot& t, const LabeledImages& fake,
                             const LabeledImages& real, InstanceDiscriminator& h) {
  if (fake.empty() || real.empty()) throw EmptyDataset("eval needs non-empty real and synthetic image sets");
  json j;
  j["fid"] = level_fid_json(multi_level_fid(t, real.images, fake.images, c.fid_levels));
  const auto bank = MemoryBank::from_arrays(t.num_classes(), fake.images, fake.labels, {}, {},
                                            torch::zeros({fake.size()}, torch::kLong));
  const auto d = bank_diversity_report(bank, t, h, c.inversion.weights.tau_cr, c.seed, c.diversity_samples, c.inversion.aug);
  j["diversity"] = {{"num_samples", d.num_samples}, {"mean_pairwise_cosine", d.mean_pairwise_cosine},
                    {"diversity_score", d.diversity_score}};
  j["num_fake"] = fake.size();
  j["num_real"] = real.size();
  return j;
}

inline json pipeline_report(const PipelineResult& r) {
  json j;
  j["bank_size"] = r.bank.size();
  j["bank_checksum"] = to_hex(r.bank_checksum);
  j["student_checksum"] = to_hex(r.student_checksum);
  j["student_accuracy"] = r.student_accuracy ? json(*r.student_accuracy) : json();
  j["best_epoch"] = r.distill.best_epoch;
  j["mean_pairwise_cosine"] = r.mean_pairwise_cosine ? json(*r.mean_pairwise_cosine) : json();
  j["fid"] = level_fid_json(r.fid);
  return j;
}

}  // namespace cmi

#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "cmi/app/ablation.hpp"
#include "cmi/app/config.hpp"
#include "cmi/app/pipeline.hpp"
#include "cmi/distill/supervised.hpp"

namespace cmi {

inline constexpr const char* kOutputRootEnv = "CMI_OUTPUT_ROOT";

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitRuntime = 3 };

/// Flags shared by every command.
struct CliOptions {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> output_dir;
  std::optional<std::string> run_id;
  std::optional<std::filesystem::path> teacher;  // overrides /teacher/checkpoint
  bool resume = false;
  bool quiet = false;
};

/// Output root: --output-dir, then the environment, then io.output_dir.
inline std::filesystem::path output_root(const ExperimentConfig& c, const CliOptions& o) {
  if (o.output_dir) return *o.output_dir;
  if (const char* env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') return env;
  return c.output_dir;
}

inline std::string utc_stamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

/// Loaded config plus the directory every output of this run goes to.
struct Session {
  ExperimentConfig config;
  std::string command;
  std::string run_id;
  std::filesystem::path dir;
  std::function<void(const std::string&)> log;
};

namespace detail {

inline std::filesystem::path claim_run_dir(const std::filesystem::path& root, const std::string& base) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  for (int k = 0;; ++k) {
    const auto p = root / (k == 0 ? base : base + "-" + std::to_string(k));
    // create_directory reports false when the path already exists.
    if (fs::create_directory(p)) return p;
  }
}

}  // namespace detail

/// Loads and validates the config, applies --seed, and creates (or, with
/// --resume, reopens) output_root/<run-id>/ with the resolved config in it.
inline Session open_session(const CliOptions& o, const std::string& command) {
  namespace fs = std::filesystem;
  if (o.config.empty()) throw ConfigError("--config is required");
  Session s;
  s.command = command;
  s.config = load_config(o.config);
  if (o.seed) s.config.apply_seed(*o.seed);
  if (o.teacher) s.config.teacher_checkpoint = std::filesystem::absolute(*o.teacher);
  const auto resolved = to_json(s.config);
  const auto hash = config_hash(s.config);
  const auto root = output_root(s.config, o);

  if (o.resume) {
    if (!o.run_id) throw ConfigError("--resume needs --run-id naming the run to continue");
    s.run_id = *o.run_id;
    s.dir = root / s.run_id;
    if (!fs::is_directory(s.dir)) throw ConfigError("cannot resume: run directory '" + s.dir.string() + "' does not exist");
    const auto prev = s.dir / "config.resolved.json";
    if (fs::exists(prev) && json::parse(read_text_file(prev)) != resolved) {
      throw ConfigError("cannot resume '" + s.run_id + "': the resolved config differs from the original run");
    }
  } else if (o.run_id) {
    s.run_id = *o.run_id;
    if (s.run_id.empty() || s.run_id.find('/') != std::string::npos || s.run_id == "." || s.run_id == "..") {
      throw ConfigError("invalid --run-id '" + s.run_id + "'");
    }
    s.dir = root / s.run_id;
    fs::create_directories(root);
    if (!fs::create_directory(s.dir)) {
      throw ConfigError("run directory '" + s.dir.string() + "' already exists (use --resume to continue it)");
    }
  } else {
    s.dir = detail::claim_run_dir(root, utc_stamp() + "-" + hash.substr(0, 8));
    s.run_id = s.dir.filename().string();
  }
  write_text_file(s.dir / "config.resolved.json", resolved.dump(2) + "\n");
  if (!o.quiet) {
    s.log = [cmd = command](const std::string& msg) { std::cerr << "[cmi " << cmd << "] " << msg << std::endl; };
  }
  return s;
}

inline TeacherSnapshot session_teacher(const Session& s) {
  const auto& c = s.config;
  if (c.teacher_checkpoint.empty()) throw ConfigError("/teacher/checkpoint is required for '" + s.command + "'");
  if (!std::filesystem::exists(c.teacher_checkpoint)) {
    throw CheckpointNotFound("teacher checkpoint '" + c.teacher_checkpoint.string() + "' does not exist");
  }
  return load_teacher(c.teacher_checkpoint, c.teacher);
}

/// Writes `report` as report-name.json in the run dir and echoes it on stdout.
inline void emit_report(const Session& s, const std::string& file, json report) {
  report["run_id"] = s.run_id;
  report["run_dir"] = std::filesystem::absolute(s.dir).string();
  report["command"] = s.command;
  write_text_file(s.dir / file, report.dump(2) + "\n");
  std::cout << report.dump() << std::endl;
}

/// Maps an exception to an exit code and a structured report on stderr
/// (and error.json in the run dir when one is known).
inline int report_failure(const std::exception& e, const std::optional<std::filesystem::path>& run_dir = {}) {
  json err;
  int code = kExitRuntime;
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) {
    code = kExitConfig;
    err["type"] = "config_error";
  } else if (const auto* d = dynamic_cast<const DivergenceError*>(&e)) {
    err["type"] = "divergence";
    try {
      err["diagnostics"] = json::parse(d->diagnostics());
    } catch (const json::exception&) {
      err["diagnostics"] = d->diagnostics();
    }
  } else if (dynamic_cast<const Error*>(&e) != nullptr) {
    err["type"] = "runtime_error";
  } else {
    err["type"] = "internal_error";
  }
  err["message"] = e.what();
  err["exit_code"] = code;
  if (run_dir && std::filesystem::is_directory(*run_dir)) {
    try {
      write_text_file(*run_dir / "error.json", err.dump(2) + "\n");
    } catch (const std::exception&) {
    }
  }
  std::cerr << json{{"error", err}}.dump() << std::endl;
  return code;
}

/// Opens the session and runs `body`; any exception becomes a structured
/// failure report and its exit code.
inline int run_command(const CliOptions& o, const std::string& name, const std::function<void(Session&)>& body) {
  std::optional<std::filesystem::path> dir;
  try {
    auto s = open_session(o, name);
    dir = s.dir;
    body(s);
    return kExitOk;
  } catch (const std::exception& e) {
    return report_failure(e, dir);
  }
}

inline int cmd_invert(const CliOptions& o) {
  return run_command(o, "invert", [&](Session& s) {
    const auto t = session_teacher(s);
    PipelineOptions po{s.dir, true, false, s.log};
    const auto bank = run_invert(s.config, t, po);
    json r;
    r["bank_dir"] = std::filesystem::absolute(s.dir / "bank").string();
    r["bank_size"] = bank.size();
    r["num_batches"] = bank.num_batches();
    r["bank_checksum"] = to_hex(bank.checksum());
    r["index_checksum"] = to_hex(bank_index_checksum(s.dir / "bank"));
    r["teacher_checksum"] = to_hex(t.checksum());
    emit_report(s, "summary.json", r);
  });
}

inline void write_accuracy_csv(const std::filesystem::path& path, const DistillResult& d) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,kd_loss,lr,eval_accuracy\n";
  for (const auto& m : d.history) {
    os << m.epoch << ',' << m.kd_loss << ',' << m.lr << ',';
    if (m.eval_accuracy) os << *m.eval_accuracy;
    os << '\n';
  }
  write_text_file(path, os.str());
}

inline json distill_report_json(const DistillResult& d) {
  return {{"final_accuracy", d.final_accuracy ? json(*d.final_accuracy) : json()},
          {"best_accuracy", d.best_accuracy ? json(*d.best_accuracy) : json()},
          {"best_epoch", d.best_epoch},
          {"epochs", d.history.size()},
          {"steps", d.steps}};
}

/// `source` is a bank directory, or "interleaved" to synthesize with the
/// student in the loop.
inline int cmd_distill(const CliOptions& o, const std::string& source) {
  return run_command(o, "distill", [&](Session& s) {
    const auto t = session_teacher(s);
    const auto data = load_eval_data(s.config);
    PipelineOptions po{s.dir, true, o.resume, s.log};
    json r;
    if (source == "interleaved") {
      auto c = s.config;
      c.distill.schedule = DistillSchedule::interleaved;
      const auto res = run_pipeline(c, t, data, po);
      write_accuracy_csv(s.dir / "accuracy.csv", res.distill);
      r = pipeline_report(res);
      r["distill"] = distill_report_json(res.distill);
      r["schedule"] = "interleaved";
    } else {
      if (!std::filesystem::is_directory(source)) throw IoError("bank directory '" + source + "' does not exist");
      const auto bank = load_bank(source);
      if (bank.empty()) throw EmptyDataset("bank '" + source + "' has no records");
      if (bank.num_classes() != 0 && bank.num_classes() != t.num_classes()) {
        throw ShapeMismatch("bank has " + std::to_string(bank.num_classes()) + " classes, teacher has " +
                            std::to_string(t.num_classes()));
      }
      const auto out = run_distill(s.config, t, bank, data, po);
      write_accuracy_csv(s.dir / "accuracy.csv", out.result);
      r["schedule"] = "offline";
      r["bank_dir"] = std::filesystem::absolute(source).string();
      r["bank_size"] = bank.size();
      r["bank_checksum"] = to_hex(bank.checksum());
      r["student_checksum"] = to_hex(checksum(*out.student));
      r["student_accuracy"] = out.result.final_accuracy ? json(*out.result.final_accuracy) : json();
      r["distill"] = distill_report_json(out.result);
    }
    emit_report(s, "report.json", r);
  });
}

inline int cmd_ablate(const CliOptions& o, const std::string& axis_name) {
  return run_command(o, "ablate", [&](Session& s) {
    const auto axis = parse_ablation_axis(axis_name);
    const auto t = session_teacher(s);
    const auto data = load_eval_data(s.config);
    const auto table = run_ablation(s.config, axis, t, data, {s.dir, s.log});
    json rows = json::array();
    for (const auto& v : table.variants) {
      json row = {{"variant", v},
                  {"median_student_accuracy", table.median(v, row_accuracy) ? json(*table.median(v, row_accuracy)) : json()},
                  {"median_mean_pairwise_cosine", table.median(v, row_cosine) ? json(*table.median(v, row_cosine)) : json()}};
      for (auto l : s.config.fid_levels) {
        const auto m = table.median(v, row_fid(l));
        row["median_fid_level_" + std::to_string(l)] = m ? json(*m) : json();
      }
      rows.push_back(row);
    }
    emit_report(s, "summary.json", {{"axis", axis_name}, {"seeds", s.config.ablation_seeds}, {"rows", rows}});
  });
}

inline int cmd_eval(const CliOptions& o, const std::filesystem::path& bank_dir, const std::filesystem::path& real_dir) {
  return run_command(o, "eval", [&](Session& s) {
    const auto t = session_teacher(s);
    const auto channels = static_cast<int>(t.input_shape().channels);
    const auto fake = load_image_folder(bank_dir, channels);
    const auto real = load_image_folder(real_dir, channels);
    auto h = load_head(s.config, t, bank_dir / "head.pt");
    auto r = image_set_report(s.config, t, fake, real, h);
    r["bank_dir"] = std::filesystem::absolute(bank_dir).string();
    r["real_dir"] = std::filesystem::absolute(real_dir).string();
    emit_report(s, "eval.json", r);
  });
}

inline int cmd_export_grid(const CliOptions& o, const std::filesystem::path& images_dir, const GridOptions& grid) {
  return run_command(o, "export-grid", [&](Session& s) {
    const auto data = load_image_folder(images_dir, static_cast<int>(s.config.teacher.input.channels));
    if (data.empty()) throw EmptyDataset("no images in '" + images_dir.string() + "'");
    const auto n = std::min<std::int64_t>(data.size(), grid.rows * grid.cols);
    save_grid(s.dir / "grid.png", data.images.slice(0, 0, n), grid);
    emit_report(s, "summary.json", {{"images_dir", std::filesystem::absolute(images_dir).string()}, {"num_images", n},
                                    {"grid", std::filesystem::absolute(s.dir / "grid.png").string()}});
  });
}

/// Trains the configured teacher architecture on teacher_training.dataset
/// and writes run_dir/teacher.pt.
inline int cmd_train_teacher(const CliOptions& o) {
  return run_command(o, "train-teacher", [&](Session& s) {
    const auto& c = s.config;
    if (!c.teacher_train_data) throw ConfigError("/teacher_training/dataset is required for 'train-teacher'");
    const auto train = load_dataset(*c.teacher_train_data, c.teacher.input, c.seed);
    if (train.num_classes > c.teacher.num_classes) throw ConfigError("training data has more classes than /teacher/num_classes");
    auto net = build_student(c.teacher, derive_seed(c.teacher_training.seed, "teacher-init"));
    const auto res = train_classifier(net, train, c.teacher_training, [&](std::int64_t epoch, double loss) {
      if (s.log) s.log("epoch " + std::to_string(epoch) + " loss " + std::to_string(loss));
    });
    save_checkpoint(*net, s.dir / "teacher.pt");
    json r = {{"checkpoint", std::filesystem::absolute(s.dir / "teacher.pt").string()},
              {"train_accuracy", res.train_accuracy},
              {"epoch_loss", res.epoch_loss}};
    if (c.validation_data) {
      r["validation_accuracy"] = evaluate_accuracy(net, load_dataset(*c.validation_data, c.teacher.input, c.seed));
    }
    emit_report(s, "summary.json", r);
  });
}

/// Writes the configured real (FID reference) set as a class-folder tree, for
/// use as eval's real-data directory.
inline int cmd_export_data(const CliOptions& o) {
  return run_command(o, "export-data", [&](Session& s) {
    const auto& c = s.config;
    if (!c.real_data) throw ConfigError("/eval/datasets/real is required for 'export-data'");
    const auto data = load_dataset(*c.real_data, c.teacher.input, c.seed);
    save_image_folder(data, s.dir / "real");
    emit_report(s, "summary.json", {{"images_dir", std::filesystem::absolute(s.dir / "real").string()}, {"num_images", data.size()}});
  });
}

}  // namespace cmi

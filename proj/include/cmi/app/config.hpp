#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmi/core/checksum.hpp"
#include "cmi/core/errors.hpp"
#include "cmi/data/shapes.hpp"
#include "cmi/distill/distiller.hpp"
#include "cmi/distill/supervised.hpp"
#include "cmi/engine/inversion.hpp"
#include "cmi/io/bank_io.hpp"
#include "cmi/models/classifier.hpp"

namespace cmi {

inline constexpr int kSchemaVersion = 1;

using json = nlohmann::json;

/// Where a labeled image set comes from.
struct DatasetSpec {
  std::string kind = "shapes";  // shapes | cifar10 | cifar100 | folder
  // shapes
  ShapesConfig shapes;
  // cifar
  std::filesystem::path root;
  std::string split = "test";
  bool download = true;
  // folder
  std::filesystem::path path;
  // any kind: keep at most this many items (seeded subsample), 0 = all
  std::int64_t limit = 0;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ArchSpec teacher;
  std::filesystem::path teacher_checkpoint;
  ArchSpec student;
  InversionConfig inversion;
  std::int64_t grid_every = 10;
  DistillConfig distill;
  std::vector<std::int64_t> fid_levels{0, 1};
  std::optional<DatasetSpec> real_data;        // FID reference
  std::optional<DatasetSpec> validation_data;  // student accuracy / best checkpoint
  std::int64_t diversity_samples = 2048;
  std::vector<double> alpha_cr_grid{0.0, 0.4, 0.8};
  std::vector<std::uint64_t> ablation_seeds{0, 1, 2};
  std::optional<DatasetSpec> teacher_train_data;
  SupervisedConfig teacher_training;
  std::filesystem::path output_dir = "runs";
  std::uint64_t seed = 0;

  /// Propagates the master seed into every component that draws randomness.
  void apply_seed(std::uint64_t s) {
    seed = s;
    inversion.seed = derive_seed(s, "inversion");
    distill.seed = derive_seed(s, "distill");
    teacher_training.seed = derive_seed(s, "teacher");
  }
};

namespace detail {

class ConfigReader {
 public:
  explicit ConfigReader(std::string path) : path_(std::move(path)) {}

  /// Rejects keys outside `allowed`.
  void keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) const {
    if (!obj.is_object()) fail(where, "must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : obj.items()) {
      if (!ok.count(k)) fail(where + "/" + k, "unknown key");
    }
  }

  template <typename T>
  void get(const json& obj, const std::string& where, const char* key, T& out) const {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    const auto at = where + "/" + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(at, "must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(at, "must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned() == false && v.get<std::int64_t>() < 0) fail(at, "must be non-negative");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(at, "must be a number");
    } else if constexpr (std::is_same_v<T, std::string> || std::is_same_v<T, std::filesystem::path>) {
      if (!v.is_string()) fail(at, "must be a string");
    }
    if constexpr (std::is_same_v<T, std::filesystem::path>) {
      out = std::filesystem::path(v.get<std::string>());
    } else {
      out = v.get<T>();
    }
  }

  template <typename T>
  void get_list(const json& obj, const std::string& where, const char* key, std::vector<T>& out) const {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    if (!v.is_array()) fail(where + "/" + key, "must be an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) fail(where + "/" + key + "/" + std::to_string(i), "must be a number");
      if constexpr (std::is_integral_v<T>) {
        if (!v[i].is_number_integer()) fail(where + "/" + key + "/" + std::to_string(i), "must be an integer");
      }
      out.push_back(v[i].get<T>());
    }
  }

  template <typename E>
  void get_enum(const json& obj, const std::string& where, const char* key, E& out,
                std::initializer_list<std::pair<const char*, E>> options) const {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    const auto at = where + "/" + key;
    if (!v.is_string()) fail(at, "must be a string");
    std::string expected;
    for (const auto& [name, value] : options) {
      if (v.get<std::string>() == name) {
        out = value;
        return;
      }
      expected += expected.empty() ? name : std::string("|") + name;
    }
    fail(at, "must be one of " + expected);
  }

  [[noreturn]] void fail(const std::string& where, const std::string& msg) const {
    throw ConfigError(path_ + ": " + (where.empty() ? "/" : where) + ": " + msg);
  }

  void check(bool ok, const std::string& where, const std::string& msg) const {
    if (!ok) fail(where, msg);
  }

 private:
  std::string path_;
};

inline ArchSpec parse_arch(const ConfigReader& r, const json& j, const std::string& where, const ArchSpec& fallback,
                           std::filesystem::path* checkpoint) {
  if (checkpoint != nullptr) {
    r.keys(j, where, {"arch", "checkpoint", "num_classes", "input_shape"});
  } else {
    r.keys(j, where, {"arch", "num_classes", "input_shape"});
  }
  ArchSpec a = fallback;
  r.get(j, where, "arch", a.name);
  r.get(j, where, "num_classes", a.num_classes);
  if (j.contains("input_shape")) {
    std::vector<std::int64_t> s;
    r.get_list(j, where, "input_shape", s);
    r.check(s.size() == 3, where + "/input_shape", "must be [channels, height, width]");
    a.input = {s[0], s[1], s[2]};
  }
  if (checkpoint != nullptr) r.get(j, where, "checkpoint", *checkpoint);
  r.check(!a.name.empty() && is_known_architecture(a.name), where + "/arch", "unknown architecture '" + a.name + "'");
  r.check(a.num_classes >= 2, where + "/num_classes", "must be >= 2");
  r.check(a.input.channels >= 1 && a.input.height >= 1 && a.input.width >= 1, where + "/input_shape", "must be positive");
  return a;
}

inline DatasetSpec parse_dataset(const ConfigReader& r, const json& j, const std::string& where) {
  r.keys(j, where, {"kind", "count", "num_classes", "size", "channels", "noise", "seed", "root", "split", "download", "path", "limit"});
  DatasetSpec d;
  r.get(j, where, "kind", d.kind);
  r.check(d.kind == "shapes" || d.kind == "cifar10" || d.kind == "cifar100" || d.kind == "folder", where + "/kind",
          "must be one of shapes|cifar10|cifar100|folder");
  r.get(j, where, "count", d.shapes.count);
  r.get(j, where, "num_classes", d.shapes.num_classes);
  r.get(j, where, "size", d.shapes.size);
  r.get(j, where, "channels", d.shapes.channels);
  r.get(j, where, "noise", d.shapes.noise);
  r.get(j, where, "seed", d.shapes.seed);
  r.get(j, where, "root", d.root);
  r.get(j, where, "split", d.split);
  r.get(j, where, "download", d.download);
  r.get(j, where, "path", d.path);
  r.get(j, where, "limit", d.limit);
  r.check(d.split == "train" || d.split == "test", where + "/split", "must be train|test");
  r.check(d.limit >= 0, where + "/limit", "must be >= 0");
  if (d.kind == "shapes") {
    try {
      d.shapes.validate();
    } catch (const InvalidArgument& e) {
      r.fail(where, e.what());
    }
  }
  if (d.kind == "folder") r.check(!d.path.empty(), where + "/path", "required for kind=folder");
  if (d.kind == "cifar10" || d.kind == "cifar100") r.check(!d.root.empty(), where + "/root", "required for CIFAR");
  return d;
}

inline json dataset_to_json(const DatasetSpec& d) {
  json j = {{"kind", d.kind}, {"limit", d.limit}};
  if (d.kind == "shapes") {
    j.update({{"count", d.shapes.count}, {"num_classes", d.shapes.num_classes}, {"size", d.shapes.size},
              {"channels", d.shapes.channels}, {"noise", d.shapes.noise}, {"seed", d.shapes.seed}});
  } else if (d.kind == "folder") {
    j["path"] = d.path.string();
  } else {
    j.update({{"root", d.root.string()}, {"split", d.split}, {"download", d.download}});
  }
  return j;
}

inline void resolve_path(std::filesystem::path& p, const std::filesystem::path& base) {
  if (!p.empty() && p.is_relative()) p = (base / p).lexically_normal();
}

}  // namespace detail

/// Parses and validates a config document. Relative paths resolve against
/// `base_dir`. Throws ConfigError naming the offending key.
inline ExperimentConfig parse_config(const json& j, const std::string& source = "config",
                                     const std::filesystem::path& base_dir = {}) {
  detail::ConfigReader r(source);
  ExperimentConfig c;
  r.keys(j, "", {"schema_version", "name", "teacher", "student", "inversion", "distill", "eval", "ablation",
                 "teacher_training", "io"});
  r.check(j.contains("schema_version"), "/schema_version", "is required");
  int version = 0;
  r.get(j, "", "schema_version", version);
  r.check(version == kSchemaVersion, "/schema_version", "unsupported version " + std::to_string(version));
  r.get(j, "", "name", c.name);

  r.check(j.contains("teacher"), "/teacher", "is required");
  c.teacher = detail::parse_arch(r, j.at("teacher"), "/teacher", ArchSpec{}, &c.teacher_checkpoint);
  ArchSpec student_default = c.teacher;
  if (j.contains("student")) {
    c.student = detail::parse_arch(r, j.at("student"), "/student", student_default, nullptr);
  } else {
    c.student = student_default;
  }
  r.check(c.student.num_classes == c.teacher.num_classes, "/student/num_classes", "must equal the teacher's");
  r.check(c.student.input == c.teacher.input, "/student/input_shape", "must equal the teacher's");

  auto& inv = c.inversion;
  if (j.contains("inversion")) {
    const auto& ji = j.at("inversion");
    const std::string w = "/inversion";
    r.keys(ji, w, {"num_batches", "batch_size", "inner_iters", "latent_dim", "generator_width", "lr_g", "lr_h",
                   "lr_pixels", "adam_betas", "weights", "aug", "head", "adversarial_mode", "synthesis",
                   "bn_divergence", "bank_negatives", "include_positive", "grid_every"});
    r.get(ji, w, "num_batches", inv.num_batches);
    r.get(ji, w, "batch_size", inv.batch_size);
    r.get(ji, w, "inner_iters", inv.inner_iters);
    r.get(ji, w, "latent_dim", inv.latent_dim);
    r.get(ji, w, "generator_width", inv.generator_width);
    r.get(ji, w, "lr_g", inv.lr_g);
    r.get(ji, w, "lr_h", inv.lr_h);
    r.get(ji, w, "lr_pixels", inv.lr_pixels);
    if (ji.contains("adam_betas")) {
      std::vector<double> b;
      r.get_list(ji, w, "adam_betas", b);
      r.check(b.size() == 2 && b[0] >= 0 && b[0] < 1 && b[1] >= 0 && b[1] < 1, w + "/adam_betas", "must be two values in [0, 1)");
      inv.adam_beta1 = b[0];
      inv.adam_beta2 = b[1];
    }
    if (ji.contains("weights")) {
      const auto& jw = ji.at("weights");
      const auto ww = w + "/weights";
      r.keys(jw, ww, {"alpha_bn", "beta_cls", "gamma_adv", "alpha_cr", "beta_inv", "tau_kd", "tau_cr"});
      auto& lw = inv.weights;
      r.get(jw, ww, "alpha_bn", lw.alpha_bn);
      r.get(jw, ww, "beta_cls", lw.beta_cls);
      r.get(jw, ww, "gamma_adv", lw.gamma_adv);
      r.get(jw, ww, "alpha_cr", lw.alpha_cr);
      r.get(jw, ww, "beta_inv", lw.beta_inv);
      r.get(jw, ww, "tau_kd", lw.tau_kd);
      r.get(jw, ww, "tau_cr", lw.tau_cr);
    }
    if (ji.contains("aug")) {
      const auto& ja = ji.at("aug");
      const auto wa = w + "/aug";
      r.keys(ja, wa, {"crop_min", "crop_max", "ratio_min", "ratio_max", "flip", "flip_prob"});
      r.get(ja, wa, "crop_min", inv.aug.crop_min);
      r.get(ja, wa, "crop_max", inv.aug.crop_max);
      r.get(ja, wa, "ratio_min", inv.aug.ratio_min);
      r.get(ja, wa, "ratio_max", inv.aug.ratio_max);
      r.get(ja, wa, "flip", inv.aug.flip);
      r.get(ja, wa, "flip_prob", inv.aug.flip_prob);
    }
    if (ji.contains("head")) {
      const auto& jh = ji.at("head");
      const auto wh = w + "/head";
      r.keys(jh, wh, {"mode", "hidden", "proj_dim"});
      r.get_enum(jh, wh, "mode", inv.head.mode,
                 {{"none", HeadMode::none}, {"linear", HeadMode::linear}, {"nonlinear", HeadMode::nonlinear}});
      r.get(jh, wh, "hidden", inv.head.hidden);
      r.get(jh, wh, "proj_dim", inv.head.proj_dim);
      r.check(inv.head.hidden >= 1 && inv.head.proj_dim >= 1, wh, "hidden and proj_dim must be positive");
    }
    r.get_enum(ji, w, "adversarial_mode", inv.adversarial,
               {{"off", AdversarialMode::off}, {"plain", AdversarialMode::plain}, {"decision", AdversarialMode::decision}});
    r.get_enum(ji, w, "synthesis", inv.synthesis, {{"generator", SynthesisMode::generator}, {"pixels", SynthesisMode::pixels}});
    r.get_enum(ji, w, "bn_divergence", inv.bn_divergence,
               {{"squared_l2", BnDivergence::squared_l2}, {"gaussian_kl", BnDivergence::gaussian_kl}});
    r.get(ji, w, "bank_negatives", inv.bank_negatives);
    r.get(ji, w, "include_positive", inv.include_positive);
    r.get(ji, w, "grid_every", c.grid_every);
    r.check(c.grid_every >= 0, w + "/grid_every", "must be >= 0");
  }
  try {
    inv.validate();
  } catch (const Error& e) {
    r.fail("/inversion", e.what());
  }
  r.check(inv.synthesis == SynthesisMode::pixels || (c.teacher.input.height % 4 == 0 && c.teacher.input.width % 4 == 0),
          "/teacher/input_shape", "generator synthesis needs height and width divisible by 4");

  auto& d = c.distill;
  if (j.contains("distill")) {
    const auto& jd = j.at("distill");
    const std::string w = "/distill";
    r.keys(jd, w, {"epochs", "batch_size", "lr", "momentum", "weight_decay", "tau_kd", "schedule", "k", "flip", "shift"});
    r.get(jd, w, "epochs", d.epochs);
    r.get(jd, w, "batch_size", d.batch_size);
    r.get(jd, w, "lr", d.lr);
    r.get(jd, w, "momentum", d.momentum);
    r.get(jd, w, "weight_decay", d.weight_decay);
    r.get(jd, w, "tau_kd", d.tau_kd);
    r.get_enum(jd, w, "schedule", d.schedule, {{"offline", DistillSchedule::offline}, {"interleaved", DistillSchedule::interleaved}});
    r.get(jd, w, "k", d.k);
    r.get(jd, w, "flip", d.flip);
    r.get(jd, w, "shift", d.shift);
  }
  try {
    d.validate();
  } catch (const Error& e) {
    r.fail("/distill", e.what());
  }

  if (j.contains("eval")) {
    const auto& je = j.at("eval");
    r.keys(je, "/eval", {"fid_levels", "datasets", "diversity_samples"});
    r.get_list(je, "/eval", "fid_levels", c.fid_levels);
    r.get(je, "/eval", "diversity_samples", c.diversity_samples);
    r.check(c.diversity_samples >= 2, "/eval/diversity_samples", "must be >= 2");
    if (je.contains("datasets")) {
      const auto& jds = je.at("datasets");
      r.keys(jds, "/eval/datasets", {"real", "validation"});
      if (jds.contains("real")) c.real_data = detail::parse_dataset(r, jds.at("real"), "/eval/datasets/real");
      if (jds.contains("validation")) {
        c.validation_data = detail::parse_dataset(r, jds.at("validation"), "/eval/datasets/validation");
      }
    }
  }
  for (auto l : c.fid_levels) r.check(l >= 0, "/eval/fid_levels", "tap indices must be >= 0");

  if (j.contains("ablation")) {
    const auto& ja = j.at("ablation");
    r.keys(ja, "/ablation", {"alpha_cr_grid", "seeds"});
    r.get_list(ja, "/ablation", "alpha_cr_grid", c.alpha_cr_grid);
    r.get_list(ja, "/ablation", "seeds", c.ablation_seeds);
    for (double a : c.alpha_cr_grid) r.check(a >= 0, "/ablation/alpha_cr_grid", "weights must be >= 0");
    r.check(!c.ablation_seeds.empty(), "/ablation/seeds", "must not be empty");
  }

  if (j.contains("teacher_training")) {
    const auto& jt = j.at("teacher_training");
    const std::string w = "/teacher_training";
    r.keys(jt, w, {"dataset", "epochs", "batch_size", "lr", "momentum", "weight_decay", "flip", "shift"});
    if (jt.contains("dataset")) c.teacher_train_data = detail::parse_dataset(r, jt.at("dataset"), w + "/dataset");
    auto& t = c.teacher_training;
    r.get(jt, w, "epochs", t.epochs);
    r.get(jt, w, "batch_size", t.batch_size);
    r.get(jt, w, "lr", t.lr);
    r.get(jt, w, "momentum", t.momentum);
    r.get(jt, w, "weight_decay", t.weight_decay);
    r.get(jt, w, "flip", t.flip);
    r.get(jt, w, "shift", t.shift);
    r.check(t.epochs >= 1 && t.batch_size >= 2 && t.lr > 0, w, "epochs >= 1, batch_size >= 2 and lr > 0 required");
  }

  std::uint64_t seed = 0;
  if (j.contains("io")) {
    const auto& jo = j.at("io");
    r.keys(jo, "/io", {"output_dir", "seed"});
    r.get(jo, "/io", "output_dir", c.output_dir);
    r.get(jo, "/io", "seed", seed);
  }
  c.apply_seed(seed);

  detail::resolve_path(c.teacher_checkpoint, base_dir);
  detail::resolve_path(c.output_dir, base_dir);
  for (auto* ds : {&c.real_data, &c.validation_data, &c.teacher_train_data}) {
    if (*ds) {
      detail::resolve_path((*ds)->root, base_dir);
      detail::resolve_path((*ds)->path, base_dir);
    }
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(j, path.string(), std::filesystem::absolute(path).parent_path());
}

/// Fully resolved config (every default spelled out). Parsing this document
/// yields the same configuration.
inline json to_json(const ExperimentConfig& c) {
  const auto& i = c.inversion;
  const auto& w = i.weights;
  const auto mode_name = [](AdversarialMode m) {
    return m == AdversarialMode::off ? "off" : m == AdversarialMode::plain ? "plain" : "decision";
  };
  const auto arch = [](const ArchSpec& a) {
    return json{{"arch", a.name}, {"num_classes", a.num_classes},
                {"input_shape", {a.input.channels, a.input.height, a.input.width}}};
  };
  json j;
  j["schema_version"] = kSchemaVersion;
  j["name"] = c.name;
  j["teacher"] = arch(c.teacher);
  j["teacher"]["checkpoint"] = c.teacher_checkpoint.string();
  j["student"] = arch(c.student);
  j["inversion"] = {
      {"num_batches", i.num_batches}, {"batch_size", i.batch_size}, {"inner_iters", i.inner_iters},
      {"latent_dim", i.latent_dim}, {"generator_width", i.generator_width}, {"lr_g", i.lr_g}, {"lr_h", i.lr_h},
      {"lr_pixels", i.lr_pixels}, {"adam_betas", {i.adam_beta1, i.adam_beta2}},
      {"weights", {{"alpha_bn", w.alpha_bn}, {"beta_cls", w.beta_cls}, {"gamma_adv", w.gamma_adv}, {"alpha_cr", w.alpha_cr},
                   {"beta_inv", w.beta_inv}, {"tau_kd", w.tau_kd}, {"tau_cr", w.tau_cr}}},
      {"aug", {{"crop_min", i.aug.crop_min}, {"crop_max", i.aug.crop_max}, {"ratio_min", i.aug.ratio_min},
               {"ratio_max", i.aug.ratio_max}, {"flip", i.aug.flip}, {"flip_prob", i.aug.flip_prob}}},
      {"head", {{"mode", to_string(i.head.mode)}, {"hidden", i.head.hidden}, {"proj_dim", i.head.proj_dim}}},
      {"adversarial_mode", mode_name(i.adversarial)},
      {"synthesis", i.synthesis == SynthesisMode::generator ? "generator" : "pixels"},
      {"bn_divergence", i.bn_divergence == BnDivergence::squared_l2 ? "squared_l2" : "gaussian_kl"},
      {"bank_negatives", i.bank_negatives}, {"include_positive", i.include_positive}, {"grid_every", c.grid_every}};
  const auto& d = c.distill;
  j["distill"] = {{"epochs", d.epochs}, {"batch_size", d.batch_size}, {"lr", d.lr}, {"momentum", d.momentum},
                  {"weight_decay", d.weight_decay}, {"tau_kd", d.tau_kd},
                  {"schedule", d.schedule == DistillSchedule::offline ? "offline" : "interleaved"}, {"k", d.k},
                  {"flip", d.flip}, {"shift", d.shift}};
  json ds = json::object();
  if (c.real_data) ds["real"] = detail::dataset_to_json(*c.real_data);
  if (c.validation_data) ds["validation"] = detail::dataset_to_json(*c.validation_data);
  j["eval"] = {{"fid_levels", c.fid_levels}, {"datasets", ds}, {"diversity_samples", c.diversity_samples}};
  j["ablation"] = {{"alpha_cr_grid", c.alpha_cr_grid}, {"seeds", c.ablation_seeds}};
  const auto& t = c.teacher_training;
  j["teacher_training"] = {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr}, {"momentum", t.momentum},
                           {"weight_decay", t.weight_decay}, {"flip", t.flip}, {"shift", t.shift}};
  if (c.teacher_train_data) j["teacher_training"]["dataset"] = detail::dataset_to_json(*c.teacher_train_data);
  j["io"] = {{"output_dir", c.output_dir.string()}, {"seed", c.seed}};
  return j;
}

/// Short stable digest of the resolved config (object keys are sorted).
inline std::string config_hash(const ExperimentConfig& c) { return to_hex(checksum(to_json(c).dump())); }

}  // namespace cmi

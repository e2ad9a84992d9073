#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "cmi/app/pipeline.hpp"
#include "cmi/io/plot.hpp"

namespace cmi {

enum class AblationAxis { contrast_weight, module_cutoff, discriminator_design };

inline AblationAxis parse_ablation_axis(const std::string& s) {
  if (s == "contrast_weight") return AblationAxis::contrast_weight;
  if (s == "module_cutoff") return AblationAxis::module_cutoff;
  if (s == "discriminator_design") return AblationAxis::discriminator_design;
  throw ConfigError("unknown ablation axis '" + s + "' (expected contrast_weight|module_cutoff|discriminator_design)");
}

struct AblationVariant {
  std::string name;
  std::function<void(ExperimentConfig&)> apply;
};

/// The sweep for an axis; every variant starts from the given config, so a
/// variant differs from the base in exactly the component it names.
inline std::vector<AblationVariant> ablation_variants(const ExperimentConfig& base, AblationAxis axis) {
  std::vector<AblationVariant> v;
  switch (axis) {
    case AblationAxis::contrast_weight:
      for (double a : base.alpha_cr_grid) {
        std::ostringstream name;
        name << "alpha_cr=" << a;
        v.push_back({name.str(), [a](ExperimentConfig& c) { c.inversion.weights.alpha_cr = a; }});
      }
      break;
    case AblationAxis::module_cutoff:
      v.push_back({"full", [](ExperimentConfig&) {}});
      v.push_back({"w/o contrast", [](ExperimentConfig& c) { c.inversion.weights.alpha_cr = 0.0; }});
      v.push_back({"w/o generator", [](ExperimentConfig& c) { c.inversion.synthesis = SynthesisMode::pixels; }});
      v.push_back({"w/o decision-adv", [](ExperimentConfig& c) { c.inversion.adversarial = AdversarialMode::off; }});
      break;
    case AblationAxis::discriminator_design:
      for (auto m : {HeadMode::none, HeadMode::linear, HeadMode::nonlinear}) {
        v.push_back({to_string(m), [m](ExperimentConfig& c) { c.inversion.head.mode = m; }});
      }
      break;
  }
  return v;
}

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double alpha_cr = 0;
  std::optional<double> student_accuracy;
  std::optional<double> mean_pairwise_cosine;
  std::vector<LevelFid> fid;
};

struct AblationTable {
  AblationAxis axis{};
  std::vector<std::string> variants;  // sweep order
  std::vector<AblationRow> rows;

  /// Median over seeds of `field` for one variant; nullopt if any run lacks it.
  std::optional<double> median(const std::string& variant,
                               const std::function<std::optional<double>(const AblationRow&)>& field) const {
    std::vector<double> xs;
    for (const auto& r : rows) {
      if (r.variant != variant) continue;
      const auto v = field(r);
      if (!v) return std::nullopt;
      xs.push_back(*v);
    }
    if (xs.empty()) return std::nullopt;
    std::sort(xs.begin(), xs.end());
    const auto n = xs.size();
    return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
  }
};

inline std::optional<double> row_accuracy(const AblationRow& r) { return r.student_accuracy; }
inline std::optional<double> row_cosine(const AblationRow& r) { return r.mean_pairwise_cosine; }
inline std::function<std::optional<double>(const AblationRow&)> row_fid(std::int64_t level) {
  return [level](const AblationRow& r) -> std::optional<double> {
    for (const auto& f : r.fid)
      if (f.level == level) return f.fid;
    return std::nullopt;
  };
}

struct AblationOptions {
  std::optional<std::filesystem::path> out_dir;  // per-run reports and the summary tables
  std::function<void(const std::string&)> log;
};

inline std::string variant_dirname(const std::string& name) {
  std::string s;
  for (char ch : name) s.push_back(std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' ? ch : '_');
  return s;
}

inline void write_ablation_tables(const AblationTable& t, const std::vector<std::int64_t>& levels,
                                  const std::filesystem::path& dir) {
  const auto opt = [](const std::optional<double>& v) {
    std::ostringstream os;
    os.precision(8);
    if (v) os << *v;
    return os.str();
  };
  std::ofstream runs(dir / "ablation_runs.csv");
  runs << "variant,seed,alpha_cr,student_accuracy,mean_pairwise_cosine";
  for (auto l : levels) runs << ",fid_level_" << l;
  runs << '\n';
  for (const auto& r : t.rows) {
    runs << r.variant << ',' << r.seed << ',' << r.alpha_cr << ',' << opt(r.student_accuracy) << ','
         << opt(r.mean_pairwise_cosine);
    for (auto l : levels) runs << ',' << opt(row_fid(l)(r));
    runs << '\n';
  }
  std::ofstream summary(dir / "ablation.csv");
  summary << "variant,seeds,median_student_accuracy,median_mean_pairwise_cosine";
  for (auto l : levels) summary << ",median_fid_level_" << l;
  summary << '\n';
  for (const auto& v : t.variants) {
    const auto n = std::count_if(t.rows.begin(), t.rows.end(), [&](const AblationRow& r) { return r.variant == v; });
    summary << v << ',' << n << ',' << opt(t.median(v, row_accuracy)) << ',' << opt(t.median(v, row_cosine));
    for (auto l : levels) summary << ',' << opt(t.median(v, row_fid(l)));
    summary << '\n';
  }
  if (!summary || !runs) throw IoError("failed writing ablation tables in '" + dir.string() + "'");

  if (t.axis == AblationAxis::contrast_weight) {
    const auto series = [&](const std::string& label, const std::function<std::optional<double>(const AblationRow&)>& f,
                            std::array<std::uint8_t, 3> color) {
      PlotSeries s{label, {}, {}, color};
      for (const auto& v : t.variants) {
        const auto it = std::find_if(t.rows.begin(), t.rows.end(), [&](const AblationRow& r) { return r.variant == v; });
        const auto m = t.median(v, f);
        if (it != t.rows.end() && m) {
          s.x.push_back(it->alpha_cr);
          s.y.push_back(*m);
        }
      }
      return s;
    };
    save_line_plot(dir / "alpha_cr_accuracy.png", {series("accuracy", row_accuracy, {31, 119, 180})});
    save_line_plot(dir / "alpha_cr_similarity.png", {series("cosine", row_cosine, {214, 39, 40})});
    if (!levels.empty()) save_line_plot(dir / "alpha_cr_fid.png", {series("fid", row_fid(levels.front()), {44, 160, 44})});
  }
}

/// Runs every variant of `axis` for every configured seed.
inline AblationTable run_ablation(const ExperimentConfig& base, AblationAxis axis, const TeacherSnapshot& t,
                                  const EvalData& data, const AblationOptions& opt = {}) {
  AblationTable table;
  table.axis = axis;
  for (const auto& v : ablation_variants(base, axis)) {
    table.variants.push_back(v.name);
    for (auto seed : base.ablation_seeds) {
      auto c = base;
      c.apply_seed(seed);
      v.apply(c);
      if (opt.log) opt.log("ablation run '" + v.name + "' seed " + std::to_string(seed));
      PipelineOptions po;
      if (opt.out_dir) {
        po.out_dir = *opt.out_dir / variant_dirname(v.name) / ("seed_" + std::to_string(seed));
        po.write_bank = false;
      }
      po.log = opt.log;
      const auto res = run_pipeline(c, t, data, po);
      if (po.out_dir) write_text_file(*po.out_dir / "report.json", pipeline_report(res).dump(2) + "\n");
      table.rows.push_back({v.name, seed, c.inversion.weights.alpha_cr, res.student_accuracy, res.mean_pairwise_cosine, res.fid});
    }
  }
  if (opt.out_dir) write_ablation_tables(table, base.fid_levels, *opt.out_dir);
  return table;
}

}  // namespace cmi

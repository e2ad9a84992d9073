#include <CLI/CLI11.hpp>

#include "cmi/app/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Contrastive model inversion: data-free distillation toolkit"};
  app.require_subcommand(1);
  cmi::CliOptions opt;
  std::uint64_t seed = 0;
  std::string output_dir, run_id, teacher;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "Experiment config (JSON)")->required();
    sub->add_option("--seed", seed, "Override io.seed");
    sub->add_option("--output-dir", output_dir, "Output root (overrides $CMI_OUTPUT_ROOT and io.output_dir)");
    sub->add_option("--run-id", run_id, "Run directory name under the output root");
    sub->add_option("--teacher", teacher, "Teacher checkpoint (overrides teacher.checkpoint)");
    sub->add_flag("--resume", opt.resume, "Continue the run named by --run-id");
    sub->add_flag("-q,--quiet", opt.quiet, "No progress lines on stderr");
  };

  auto* invert = app.add_subcommand("invert", "Synthesize a memory bank");
  common(invert);

  std::string source;
  auto* distill = app.add_subcommand("distill", "Distill a student from a bank, or with synthesis in the loop");
  common(distill);
  distill->add_option("source", source, "Bank directory, or 'interleaved'")->required();

  std::string axis;
  auto* ablate = app.add_subcommand("ablate", "Run an ablation sweep");
  common(ablate);
  ablate->add_option("axis", axis, "contrast_weight | module_cutoff | discriminator_design")->required();

  std::string bank_dir, real_dir;
  auto* eval = app.add_subcommand("eval", "Multi-level FID and diversity of a bank against real images");
  common(eval);
  eval->add_option("bank_dir", bank_dir, "Synthetic images (bank or image folder)")->required();
  eval->add_option("real_dir", real_dir, "Real images (image folder)")->required();

  std::string images_dir;
  cmi::GridOptions grid;
  auto* export_grid = app.add_subcommand("export-grid", "Render an image montage");
  common(export_grid);
  export_grid->add_option("images_dir", images_dir, "Bank or image folder")->required();
  export_grid->add_option("--rows", grid.rows)->check(CLI::PositiveNumber);
  export_grid->add_option("--cols", grid.cols)->check(CLI::PositiveNumber);
  export_grid->add_option("--upscale", grid.upscale, "0 picks a factor automatically")->check(CLI::NonNegativeNumber);

  auto* train_teacher = app.add_subcommand("train-teacher", "Train a teacher on teacher_training.dataset");
  common(train_teacher);

  auto* export_data = app.add_subcommand("export-data", "Write eval.datasets.real as an image folder");
  common(export_data);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cmi::kExitConfig;
  }
  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed") > 0) opt.seed = seed;
    if (sub->count("--output-dir") > 0) opt.output_dir = output_dir;
    if (sub->count("--run-id") > 0) opt.run_id = run_id;
    if (sub->count("--teacher") > 0) opt.teacher = teacher;
  }

  if (invert->parsed()) return cmi::cmd_invert(opt);
  if (distill->parsed()) return cmi::cmd_distill(opt, source);
  if (ablate->parsed()) return cmi::cmd_ablate(opt, axis);
  if (eval->parsed()) return cmi::cmd_eval(opt, bank_dir, real_dir);
  if (export_grid->parsed()) return cmi::cmd_export_grid(opt, images_dir, grid);
  if (train_teacher->parsed()) return cmi::cmd_train_teacher(opt);
  if (export_data->parsed()) return cmi::cmd_export_data(opt);
  return cmi::kExitConfig;
}

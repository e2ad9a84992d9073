#include <catch_amalgamated.hpp>

#include <algorithm>

#include "cmi/app/pipeline.hpp"
#include "support/oracles.hpp"

using namespace cmi;
using Catch::Approx;
namespace ct = cmi::testing;

namespace {

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const auto n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

LabeledImages held_out(std::int64_t classes, std::int64_t size, std::uint64_t seed = 5) {
  ShapesConfig sc;
  sc.count = 1024;
  sc.num_classes = classes;
  sc.size = size;
  sc.seed = seed;
  return make_shapes(sc);
}

/// A scaled-down version of configs/toy/shapes.json.
ExperimentConfig toy(std::int64_t classes = 4, std::int64_t size = 16) {
  ExperimentConfig c;
  c.teacher = {"toycnn", classes, {3, size, size}};
  c.student = {"toycnn-half", classes, {3, size, size}};
  auto& i = c.inversion;
  i.num_batches = 10;
  i.batch_size = 64;
  i.inner_iters = 40;
  i.latent_dim = 64;
  i.generator_width = 32;
  i.weights.beta_cls = 0.1;
  i.head = {HeadMode::nonlinear, 256, 128};
  i.bank_negatives = 256;
  i.adversarial = AdversarialMode::off;
  c.distill.epochs = 10;
  c.distill.batch_size = 64;
  c.distill.k = 5;
  c.diversity_samples = 2048;
  c.fid_levels = {0};
  return c;
}

}  // namespace

TEST_CASE("a stronger contrastive weight lowers feature similarity", "[trend]") {
  const auto& t = ct::shapes_teacher().teacher;
  std::vector<double> cos0, cos8;
  for (std::uint64_t seed : {0, 1, 2}) {
    auto c = toy();
    c.apply_seed(seed);
    c.inversion.inner_iters = 20;
    c.inversion.weights.alpha_cr = 0.0;
    cos0.push_back(mean_pairwise_cosine(pooled_teacher_features(t, run_inversion(t, nullptr, c.inversion).images())));
    c.inversion.weights.alpha_cr = 0.8;
    cos8.push_back(mean_pairwise_cosine(pooled_teacher_features(t, run_inversion(t, nullptr, c.inversion).images())));
  }
  INFO("alpha_cr=0: " << median(cos0) << "  alpha_cr=0.8: " << median(cos8));
  CHECK(median(cos8) < median(cos0));
}

TEST_CASE("a 5k bank from a two-class teacher distills to 90% of its accuracy", "[trend]") {
  const auto& tt = ct::shapes_teacher(2, 8);
  REQUIRE(tt.train_accuracy >= 0.99);
  const auto val = held_out(2, 8);
  const double teacher_acc = evaluate_accuracy(tt.teacher, val);
  std::vector<double> ratios;
  for (std::uint64_t seed : {0, 1, 2}) {
    auto c = toy(2, 8);
    c.apply_seed(seed);
    c.inversion.num_batches = 40;
    c.inversion.batch_size = 128;
    c.inversion.inner_iters = 20;
    c.inversion.latent_dim = 32;
    c.inversion.generator_width = 16;
    c.distill.schedule = DistillSchedule::offline;
    EvalData data;
    data.validation = val;
    const auto r = run_pipeline(c, tt.teacher, data);
    REQUIRE(r.bank.size() == 5120);
    ratios.push_back(*r.student_accuracy / teacher_acc);
  }
  INFO("teacher " << teacher_acc << ", median student/teacher " << median(ratios));
  CHECK(median(ratios) >= 0.9);
}

TEST_CASE("interleaved distillation is at least as good as offline", "[trend]") {
  const auto& t = ct::shapes_teacher().teacher;
  EvalData data;
  data.validation = held_out(4, 16);
  std::vector<double> offline, interleaved;
  for (std::uint64_t seed : {0, 1, 2}) {
    auto c = toy();
    c.apply_seed(seed);
    c.inversion.num_batches = 16;
    c.inversion.inner_iters = 20;
    c.inversion.adversarial = AdversarialMode::decision;
    c.distill.schedule = DistillSchedule::offline;
    offline.push_back(*run_pipeline(c, t, data).student_accuracy);
    c.distill.schedule = DistillSchedule::interleaved;
    interleaved.push_back(*run_pipeline(c, t, data).student_accuracy);
  }
  INFO("offline " << median(offline) << "  interleaved " << median(interleaved));
  CHECK(median(interleaved) >= median(offline));
}

TEST_CASE("twenty interleaved rounds grow the bank and lower KD loss on held-out synthetic images", "[trend]") {
  const auto& t = ct::shapes_teacher().teacher;
  auto c = toy();
  c.inversion.num_batches = 20;
  c.inversion.batch_size = 32;
  c.inversion.inner_iters = 5;
  c.inversion.adversarial = AdversarialMode::decision;
  c.distill.epochs = 0;
  auto probe = c.inversion;
  probe.num_batches = 4;
  probe.adversarial = AdversarialMode::off;
  probe.seed = derive_seed(c.inversion.seed, "held-out");
  const auto held = run_inversion(t, nullptr, probe).images();
  ContrastiveInverter inv(t, c.inversion);
  auto s = build_student(c.student, 3);
  MemoryBank bank(4);
  const double before = evaluate_kd_loss(s, t, held, c.distill.tau_kd);
  std::vector<std::int64_t> sizes;
  DistillHooks hooks;
  hooks.on_round = [&](std::int64_t, const MemoryBank& b) { sizes.push_back(b.size()); };
  train_interleaved(s, t, inv, bank, c.distill, hooks);
  REQUIRE(sizes.size() == 20);
  for (std::size_t r = 0; r < sizes.size(); ++r) CHECK(sizes[r] == 32 * static_cast<std::int64_t>(r + 1));
  const double after = evaluate_kd_loss(s, t, held, c.distill.tau_kd);
  INFO("KD before " << before << " after " << after);
  CHECK(after < before);
}

TEST_CASE("a reloaded teacher reproduces its recorded training accuracy", "[trend]") {
  const auto& tt = ct::shapes_teacher();
  ct::TempDir dir("teacher");
  save_checkpoint(tt.teacher.network(), dir / "t.pt");
  const auto back = load_teacher(dir / "t.pt", tt.teacher.network().spec());
  CHECK(back.checksum() == tt.teacher.checksum());
  CHECK(evaluate_accuracy(back, tt.train) == Approx(tt.train_accuracy).margin(1e-3));
  CHECK(tt.train_accuracy >= 0.99);
}

TEST_CASE("an untrained ten-class student sits at chance", "[trend]") {
  auto gen = make_generator(4);
  const std::int64_t n = 5000;
  LabeledImages data{torch::rand({n, 3, 16, 16}, gen) * 2 - 1, torch::arange(n, torch::kLong).remainder(10), 10};
  for (std::uint64_t seed : {1, 2, 3}) {
    auto s = build_student({"toycnn", 10, {3, 16, 16}}, seed);
    CHECK(evaluate_accuracy(s, data) == Approx(0.10).margin(0.02));
  }
}

// Library walkthrough: train a small teacher on the shapes task, invert it,
// distill a student from the bank and report accuracy and diversity.
#include <iostream>

#include "cmi/app/pipeline.hpp"

int main() {
  using namespace cmi;
  torch::manual_seed(0);

  ShapesConfig sc;
  sc.count = 4096;
  sc.seed = 1;
  const auto train = make_shapes(sc);
  sc.count = 1024;
  sc.seed = 3;
  EvalData data;
  data.validation = make_shapes(sc);

  ExperimentConfig c;
  c.teacher = {"toycnn", sc.num_classes, {3, sc.size, sc.size}};
  c.student = {"toycnn-half", sc.num_classes, {3, sc.size, sc.size}};
  c.inversion.num_batches = 16;
  c.inversion.batch_size = 64;
  c.inversion.inner_iters = 40;
  c.inversion.latent_dim = 64;
  c.inversion.generator_width = 32;
  c.inversion.weights.beta_cls = 0.1;
  c.inversion.adversarial = AdversarialMode::decision;
  c.distill.epochs = 20;
  c.distill.batch_size = 64;
  c.distill.schedule = DistillSchedule::interleaved;
  c.fid_levels = {};
  c.apply_seed(0);

  auto net = build_student(c.teacher, 17);
  const auto fit = train_classifier(net, train, SupervisedConfig{});
  const TeacherSnapshot teacher(net);
  std::cout << "teacher train accuracy " << fit.train_accuracy << ", validation "
            << evaluate_accuracy(teacher, *data.validation) << "\n";

  PipelineOptions opt;
  opt.log = [](const std::string& line) { std::cerr << line << "\n"; };
  const auto r = run_pipeline(c, teacher, data, opt);
  std::cout << "bank " << r.bank.size() << " images, student accuracy " << r.student_accuracy.value_or(-1)
            << ", mean pairwise cosine " << r.mean_pairwise_cosine.value_or(-1) << "\n";
}

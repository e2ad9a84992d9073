#include <catch_amalgamated.hpp>

#include <cmath>

#include "cmi/losses/inversion_losses.hpp"
#include "support/oracles.hpp"

using namespace cmi;
using Catch::Approx;
using cmi::testing::gradcheck;

namespace {

torch::Tensor logits_for_probs(std::initializer_list<double> p) {
  std::vector<double> v(p);
  auto t = torch::tensor(v, torch::kDouble);
  return t.log().unsqueeze(0);
}

BatchStats single_channel(double mean, double var) {
  return {LayerStats{torch::tensor({mean}, torch::kDouble), torch::tensor({var}, torch::kDouble)}};
}

}  // namespace

TEST_CASE("bn_regularization examples", "[losses]") {
  const auto stored = single_channel(0.0, 1.0);
  CHECK(bn_regularization(stored, stored).item<double>() == 0.0);
  CHECK(bn_regularization(single_channel(1.0, 1.0), stored).item<double>() == Approx(1.0).margin(1e-12));
  // squared L2 on both moments: (2-0)^2 + (3-1)^2
  CHECK(bn_regularization(single_channel(2.0, 3.0), stored).item<double>() == Approx(8.0).margin(1e-12));
  CHECK_THROWS_AS(bn_regularization({}, stored), ShapeMismatch);
  const BatchStats two_channel{LayerStats{torch::zeros({2}), torch::ones({2})}};
  CHECK_THROWS_AS(bn_regularization(two_channel, stored), ShapeMismatch);
}

TEST_CASE("bn_regularization gaussian KL option is zero at a match and positive elsewhere", "[losses]") {
  const auto stored = single_channel(0.5, 2.0);
  CHECK(bn_regularization(stored, stored, BnDivergence::gaussian_kl).item<double>() == Approx(0.0).margin(1e-5));
  CHECK(bn_regularization(single_channel(1.0, 1.0), stored, BnDivergence::gaussian_kl).item<double>() > 0.0);
}

TEST_CASE("bn_regularization shrinks as i.i.d. batches grow", "[losses]") {
  // Stored statistics are the population moments of N(0.3, 0.5^2); a larger
  // batch estimates them better, so the divergence falls on average.
  const std::vector<LayerStats> stored{{torch::full({4}, 0.3, torch::kDouble), torch::full({4}, 0.25, torch::kDouble)}};
  double prev = std::numeric_limits<double>::infinity();
  for (std::int64_t b : {64, 256, 1024}) {
    double acc = 0;
    for (std::uint64_t rep = 0; rep < 20; ++rep) {
      auto gen = make_generator(rep * 7919 + static_cast<std::uint64_t>(b));
      const auto x = torch::randn({b, 4, 4, 4}, gen, torch::kDouble) * 0.5 + 0.3;
      acc += bn_regularization({batch_mean_var(x)}, stored).item<double>();
    }
    CHECK(acc / 20 < prev);
    prev = acc / 20;
  }
}

TEST_CASE("bn_regularization gradient matches finite differences", "[losses]") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto gen = make_generator(seed);
    const std::vector<LayerStats> stored{
        {torch::randn({3}, gen, torch::kDouble), torch::rand({3}, gen, torch::kDouble) + 0.5}};
    const auto x = torch::randn({4, 3, 3, 3}, gen, torch::kDouble);
    for (auto div : {BnDivergence::squared_l2, BnDivergence::gaussian_kl}) {
      const auto err = gradcheck([&](const torch::Tensor& in) { return bn_regularization({batch_mean_var(in)}, stored, div); }, x, seed);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("class_prior_loss examples", "[losses]") {
  auto saturated = torch::full({3, 10}, -50.0, torch::kDouble);
  const auto targets = torch::tensor({0, 4, 9}, torch::kLong);
  for (int i = 0; i < 3; ++i) saturated.index_put_({i, targets[i]}, 50.0);
  CHECK(class_prior_loss(saturated, targets).item<double>() < 1e-6);
  CHECK(class_prior_loss(torch::zeros({5, 10}, torch::kDouble), torch::zeros({5}, torch::kLong)).item<double>() ==
        Approx(std::log(10.0)).margin(1e-9));
  CHECK_THROWS_AS(class_prior_loss(torch::zeros({2, 3}), torch::tensor({0, 3}, torch::kLong)), InvalidArgument);
  CHECK_THROWS_AS(class_prior_loss(torch::zeros({2, 3}), torch::tensor({0}, torch::kLong)), ShapeMismatch);
}

TEST_CASE("class_prior_loss gradient matches finite differences", "[losses]") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto gen = make_generator(seed);
    const auto logits = torch::randn({4, 10}, gen, torch::kDouble);
    const auto targets = torch::randint(10, {4}, gen, torch::kLong);
    CHECK(gradcheck([&](const torch::Tensor& l) { return class_prior_loss(l, targets); }, logits, seed) < 1e-4);
  }
}

TEST_CASE("adversarial_kl_loss examples", "[losses]") {
  const auto t = torch::randn({6, 5}, torch::kDouble);
  CHECK(adversarial_kl_loss(t, t, 4.0).item<double>() == Approx(0.0).margin(1e-12));
  const auto tp = logits_for_probs({0.9, 0.1});
  const auto sp = logits_for_probs({0.5, 0.5});
  const double expected = -(0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5));
  CHECK(adversarial_kl_loss(tp, sp, 1.0).item<double>() == Approx(expected).margin(1e-9));
  CHECK(adversarial_kl_loss(tp, sp, 1.0).item<double>() == Approx(-0.3681).margin(1e-3));
  CHECK_THROWS_AS(adversarial_kl_loss(tp, torch::zeros({1, 3}, torch::kDouble), 1.0), ShapeMismatch);
  CHECK_THROWS_AS(adversarial_kl_loss(tp, sp, 0.0), InvalidArgument);
}

TEST_CASE("adversarial_kl_loss magnitude falls as temperature rises", "[losses]") {
  auto gen = make_generator(3);
  const auto t = torch::randn({8, 10}, gen, torch::kDouble) * 3;
  const auto s = torch::randn({8, 10}, gen, torch::kDouble) * 3;
  double prev = std::numeric_limits<double>::infinity();
  for (double tau : {1.0, 2.0, 4.0, 8.0}) {
    const double mag = std::abs(adversarial_kl_loss(t, s, tau).item<double>());
    CHECK(mag < prev);
    prev = mag;
  }
}

TEST_CASE("adversarial losses gradients match finite differences", "[losses]") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto gen = make_generator(100 + seed);
    const auto t = torch::randn({4, 6}, gen, torch::kDouble) * 2;
    const auto s = torch::randn({4, 6}, gen, torch::kDouble) * 2;
    CHECK(gradcheck([&](const torch::Tensor& x) { return adversarial_kl_loss(t, x, 2.0); }, s, seed) < 1e-4);
    CHECK(gradcheck([&](const torch::Tensor& x) { return adversarial_kl_loss(x, s, 2.0); }, t, seed) < 1e-4);
    // The gate is piecewise constant; small probes never cross an argmax tie here.
    const auto agree_s = t + 0.3 * torch::randn({4, 6}, gen, torch::kDouble);
    CHECK(gradcheck([&](const torch::Tensor& x) { return decision_adversarial_loss(t, x, 2.0); }, agree_s, seed) < 1e-4);
  }
}

TEST_CASE("decision_adversarial_loss examples", "[losses]") {
  const auto tp = logits_for_probs({0.9, 0.1});
  CHECK(decision_adversarial_loss(tp, logits_for_probs({0.6, 0.4}), 1.0).item<double>() == Approx(-0.2263).margin(1e-3));
  CHECK(decision_adversarial_loss(tp, logits_for_probs({0.2, 0.8}), 1.0).item<double>() == 0.0);
  const auto t = torch::randn({5, 4}, torch::kDouble);
  CHECK(decision_adversarial_loss(t, t, 4.0).item<double>() == Approx(0.0).margin(1e-12));
}

TEST_CASE("decision gate removes value and gradient of disagreeing samples", "[losses]") {
  const auto t = torch::tensor({{2.0, 0.0}, {0.0, 2.0}}, torch::kDouble);
  auto s = torch::tensor({{1.0, 0.0}, {1.0, 0.0}}, torch::kDouble).requires_grad_(true);
  decision_adversarial_loss(t, s, 1.0).backward();
  CHECK(s.grad()[1].abs().sum().item<double>() == 0.0);
  CHECK(s.grad()[0].abs().sum().item<double>() > 0.0);
}

TEST_CASE("adversarial loss properties on random batches", "[losses]") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto gen = make_generator(seed);
    const auto t = torch::randn({16, 5}, gen, torch::kDouble) * 2;
    const auto s = torch::randn({16, 5}, gen, torch::kDouble) * 2;
    const double plain = adversarial_kl_loss(t, s, 1.5).item<double>();
    const double gated = decision_adversarial_loss(t, s, 1.5).item<double>();
    CHECK(plain <= 0.0);
    CHECK(gated <= 0.0);
    CHECK(std::abs(gated) <= std::abs(plain) + 1e-15);
    // Temperature-scaling identity.
    const double c = 3.0;
    CHECK(adversarial_kl_loss(t * c, s * c, 1.5 * c).item<double>() == Approx(plain).margin(1e-12));
    CHECK(decision_adversarial_loss(t * c, s * c, 1.5 * c).item<double>() == Approx(gated).margin(1e-12));
  }
}

TEST_CASE("unified_inversion_loss weight masking and recomposition", "[losses]") {
  auto net = build_student({"toycnn", 4, {3, 16, 16}}, 2);
  net->to(torch::kDouble);
  const TeacherSnapshot t(net);
  auto student = build_student({"toycnn-half", 4, {3, 16, 16}}, 3);
  student->to(torch::kDouble);
  student->eval();
  auto gen = make_generator(4);
  const auto x = torch::rand({6, 3, 16, 16}, gen, torch::kDouble) * 2 - 1;
  const auto targets = torch::tensor({0, 1, 2, 3, 0, 1}, torch::kLong);

  const auto out = t.forward_with_features(x);
  const double bn = bn_regularization(out.stats, t).item<double>();
  const double cls = class_prior_loss(out.logits, targets).item<double>();
  const auto s_logits = student->forward(x);
  const double adv = adversarial_kl_loss(out.logits, s_logits, 4.0).item<double>();
  const double dadv = decision_adversarial_loss(out.logits, s_logits, 4.0).item<double>();

  LossWeights w;
  w.alpha_bn = 1;
  w.beta_cls = 0;
  w.gamma_adv = 0;
  CHECK(unified_inversion_loss(x, t, nullptr, targets, w).total.item<double>() == Approx(bn).epsilon(1e-12));
  w.alpha_bn = 0;
  CHECK(unified_inversion_loss(x, t, nullptr, targets, w).total.item<double>() == 0.0);
  w.alpha_bn = 0.5;
  w.beta_cls = 1.0;
  w.gamma_adv = 1.0;
  const auto r = unified_inversion_loss(x, t, &student, targets, w, AdversarialMode::plain);
  CHECK(r.total.item<double>() == Approx(0.5 * bn + cls + adv).margin(1e-6));
  CHECK(r.bn.item<double>() == Approx(bn).margin(1e-12));
  const auto rd = unified_inversion_loss(x, t, &student, targets, w, AdversarialMode::decision);
  CHECK(rd.total.item<double>() == Approx(0.5 * bn + cls + dadv).margin(1e-6));
  CHECK_THROWS_AS(unified_inversion_loss(x, t, nullptr, targets, w, AdversarialMode::plain), InvalidArgument);
}

TEST_CASE("unified_inversion_loss gradient with respect to images matches finite differences", "[losses]") {
  auto net = build_student({"toycnn", 3, {3, 8, 8}}, 6);
  net->to(torch::kDouble);
  const TeacherSnapshot t(net);
  auto student = build_student({"toycnn-half", 3, {3, 8, 8}}, 7);
  student->to(torch::kDouble);
  student->eval();
  LossWeights w;
  w.alpha_bn = 1;
  w.beta_cls = 0.1;
  w.gamma_adv = 1;
  const auto targets = torch::tensor({0, 1, 2, 0}, torch::kLong);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto gen = make_generator(seed);
    const auto x = torch::rand({4, 3, 8, 8}, gen, torch::kDouble) * 2 - 1;
    const auto err = gradcheck(
        [&](const torch::Tensor& in) { return unified_inversion_loss(in, t, &student, targets, w).total; }, x, seed, 48,
        1e-5);  // at 1e-6, round-off on the O(1) loss dominates small gradient entries
    CHECK(err < 1e-4);
  }
}

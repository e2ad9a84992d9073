#include <catch_amalgamated.hpp>

#include "cmi/models/generator.hpp"
#include "cmi/models/registry.hpp"
#include "cmi/models/teacher.hpp"
#include "support/oracles.hpp"

using namespace cmi;
using cmi::testing::TempDir;

namespace {

TeacherSnapshot saved_and_loaded(const ArchSpec& spec, const TempDir& dir, std::uint64_t seed = 3) {
  auto net = build_student(spec, seed);
  save_checkpoint(*net, dir / (spec.name + ".pt"));
  return load_teacher(dir / (spec.name + ".pt"), spec);
}

}  // namespace

TEST_CASE("wrn-16-1 teacher has one BN entry per BN layer including shortcuts", "[registry]") {
  TempDir dir("wrn");
  const auto t = saved_and_loaded({"wrn-16-1", 10, {3, 32, 32}}, dir);
  CHECK(t.bn_layers().size() == 15);
  CHECK(t.num_classes() == 10);
  // Counting oracle: every BatchNorm-like module registered by the network.
  std::size_t count = 0;
  for (const auto& m : t.network().modules(false)) {
    if (m->as<TracedBatchNorm2dImpl>() != nullptr) ++count;
  }
  CHECK(count == 15);
}

TEST_CASE("toycnn teacher has 4 BN layers and stored variance is positive", "[registry]") {
  TempDir dir("toy");
  const auto t = saved_and_loaded({"toycnn", 4, {3, 16, 16}}, dir);
  REQUIRE(t.bn_layers().size() == 4);
  for (const auto& s : t.bn_layers()) CHECK((s.var > 0).all().item<bool>());
}

TEST_CASE("loading a checkpoint into a different architecture is a named error", "[registry]") {
  TempDir dir("mismatch");
  auto net = build_student({"resnet-18", 10, {3, 32, 32}}, 0);
  save_checkpoint(*net, dir / "r.pt");
  CHECK_THROWS_AS(load_teacher(dir / "r.pt", {"vgg-11", 10, {3, 32, 32}}), CheckpointMismatch);
  CHECK_THROWS_AS(load_teacher(dir / "missing.pt", {"vgg-11", 10, {3, 32, 32}}), CheckpointNotFound);
}

TEST_CASE("forward_with_features shape contract", "[registry]") {
  const auto t = cmi::testing::random_teacher(10, 32, 2, "wrn-16-1");
  torch::NoGradGuard ng;
  const auto out = t.forward_with_features(torch::randn({256, 3, 32, 32}).clamp(-1, 1));
  CHECK(out.logits.sizes() == torch::IntArrayRef({256, 10}));
  CHECK(out.taps.size() == t.feature_taps().size());
  CHECK(out.stats.size() == t.bn_layers().size());
  for (std::size_t l = 0; l < out.stats.size(); ++l) {
    CHECK(out.stats[l].mean.sizes() == t.bn_layers()[l].mean.sizes());
    CHECK((out.stats[l].var >= 0).all().item<bool>());
  }
  CHECK_THROWS_AS(t.forward_with_features(torch::zeros({1, 3, 32, 32})), BatchTooSmall);
  CHECK_THROWS_AS(t.forward_with_features(torch::zeros({4, 3, 16, 16})), ShapeMismatch);
}

TEST_CASE("constant-zero batch gives zero batch variance at every BN layer", "[registry]") {
  const auto t = cmi::testing::random_teacher();
  const auto out = t.forward_with_features(torch::zeros({8, 3, 16, 16}));
  for (const auto& s : out.stats) CHECK(s.var.abs().max().item<double>() == 0.0);
}

TEST_CASE("logit gradient with respect to pixels matches finite differences", "[registry]") {
  auto net = build_student({"toycnn", 4, {3, 16, 16}}, 5);
  net->to(torch::kDouble);
  const TeacherSnapshot t(net);
  auto gen = make_generator(9);
  const auto x = torch::rand({4, 3, 16, 16}, gen, torch::kDouble) * 2 - 1;
  const auto err = cmi::testing::gradcheck(
      [&](const torch::Tensor& in) { return t.forward_with_features(in).logits.index({1, 2}); }, x, 1, 64);
  CHECK(err < 1e-3);
}

TEST_CASE("teacher parameters and stored statistics never change under forward passes", "[registry]") {
  const auto t = cmi::testing::random_teacher();
  const auto before = t.checksum();
  for (int i = 0; i < 5; ++i) {
    auto x = torch::randn({8, 3, 16, 16}).requires_grad_(true);
    auto out = t.forward_with_features(x);
    (out.logits.sum() + out.taps.front().sum()).backward();
  }
  CHECK(t.checksum() == before);
  for (const auto& p : t.network().parameters()) CHECK_FALSE(p.requires_grad());
}

TEST_CASE("penultimate tap width equals the final linear layer input", "[registry]") {
  for (const auto* name : {"toycnn", "toycnn-half", "wrn-16-1", "wrn-40-2", "resnet-18", "vgg-11"}) {
    auto net = make_classifier({name, 10, {3, 32, 32}});
    INFO(name);
    CHECK(net->feature_taps().back().channels == net->classifier_in_features());
    CHECK_FALSE(net->feature_taps().back().spatial);
  }
}

TEST_CASE("build_student is deterministic and shaped", "[registry]") {
  const ArchSpec spec{"wrn-16-1", 10, {3, 32, 32}};
  auto a = build_student(spec, 0);
  auto b = build_student(spec, 0);
  auto c = build_student(spec, 1);
  CHECK(checksum(*a) == checksum(*b));
  CHECK(checksum(*a) != checksum(*c));
  a->eval();
  torch::NoGradGuard ng;
  CHECK(a->forward(torch::zeros({3, 3, 32, 32})).sizes() == torch::IntArrayRef({3, 10}));
  CHECK_THROWS_AS(build_student({"transformer-xl", 10, {3, 32, 32}}, 0), UnknownArchitecture);
}

TEST_CASE("build_generator shape, range and seeding", "[registry]") {
  auto g = build_generator(256, {3, 32, 32}, 7);
  CHECK(checksum(*build_generator(256, {3, 32, 32}, 7)) == checksum(*g));
  CHECK(checksum(*build_generator(256, {3, 32, 32}, 8)) != checksum(*g));
  const auto z = torch::randn({5, 256}) * 100;
  const auto x = g->forward(z);
  CHECK(x.sizes() == torch::IntArrayRef({5, 3, 32, 32}));
  CHECK(x.abs().max().item<double>() <= 1.0);
  CHECK_THROWS_AS(build_generator(0, {3, 32, 32}, 7), InvalidArgument);
}

TEST_CASE("generator re-initialization ignores previous state", "[registry]") {
  auto g = build_generator(16, {3, 16, 16}, 4, 8);
  const auto fresh = checksum(*g);
  torch::optim::Adam opt(g->parameters(), torch::optim::AdamOptions(0.1));
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    g->forward(torch::randn({4, 16})).pow(2).sum().backward();
    opt.step();
  }
  REQUIRE(checksum(*g) != fresh);
  g->reset_parameters(make_generator(4));
  CHECK(checksum(*g) == fresh);
}

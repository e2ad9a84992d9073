#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "cmi/contrastive/contrastive_loss.hpp"
#include "cmi/contrastive/discriminator.hpp"
#include "cmi/contrastive/memory_bank.hpp"
#include "cmi/contrastive/views.hpp"
#include "support/oracles.hpp"

using namespace cmi;
using Catch::Approx;
using cmi::testing::gradcheck;

namespace {

SyntheticBatch make_batch(std::int64_t b, std::uint64_t seed, std::int64_t classes = 10) {
  auto gen = make_generator(seed);
  SyntheticBatch s;
  s.images = torch::rand({b, 3, 4, 4}, gen) * 2 - 1;
  s.targets = torch::randint(classes, {b}, gen, torch::kLong);
  s.teacher_logits = torch::randn({b, classes}, gen);
  s.features = torch::randn({b, 6}, gen);
  return s;
}

torch::Tensor rand_emb(std::int64_t n, std::int64_t d, std::uint64_t seed) {
  auto gen = make_generator(seed);
  return torch::randn({n, d}, gen, torch::kDouble);
}

}  // namespace

TEST_CASE("make_views shape, determinism and identity case", "[contrastive]") {
  auto gen = make_generator(1);
  const auto x = torch::rand({64, 3, 32, 32}, gen) * 2 - 1;
  const AugConfig cfg;
  const auto a = make_views(x, cfg, 5);
  const auto b = make_views(x, cfg, 5);
  CHECK(a.local.sizes() == x.sizes());
  CHECK(a.global.sizes() == x.sizes());
  CHECK(torch::equal(a.local, b.local));
  CHECK(torch::equal(a.global, b.global));
  CHECK_FALSE(torch::equal(a.local, make_views(x, cfg, 6).local));

  AugConfig ident;
  ident.crop_min = 1.0;
  ident.flip = false;
  const auto v = make_views(x, ident, 3);
  CHECK(torch::equal(v.local, v.global));
  CHECK(torch::equal(v.global, x));

  AugConfig bad;
  bad.crop_min = 0.0;
  CHECK_THROWS_AS(make_views(x, bad, 0), InvalidArgument);
  bad.crop_min = 1.5;
  CHECK_THROWS_AS(make_views(x, bad, 0), InvalidArgument);
}

TEST_CASE("global view is the image up to a flip; views stay in range", "[contrastive]") {
  auto gen = make_generator(2);
  const auto x = torch::rand({16, 3, 8, 8}, gen) * 2 - 1;
  const auto v = make_views(x, {}, 9);
  for (std::int64_t i = 0; i < 16; ++i) {
    const auto& box = v.boxes[static_cast<std::size_t>(i)];
    CHECK(torch::equal(v.global[i], box.flip_global ? x[i].flip({2}) : x[i]));
  }
  CHECK(v.local.abs().max().item<double>() <= 1.0 + 1e-6);
}

TEST_CASE("cosine_similarity examples", "[contrastive]") {
  const auto v = torch::tensor({0.3, -2.0, 5.0}, torch::kDouble);
  CHECK(cmi::cosine_similarity(v, v).item<double>() == Approx(1.0).margin(1e-12));
  CHECK(cmi::cosine_similarity(torch::tensor({1.0, 0.0}), torch::tensor({0.0, 1.0})).item<double>() == 0.0);
  CHECK(cmi::cosine_similarity(torch::tensor({1.0, 0.0}, torch::kDouble), torch::tensor({1.0, 1.0}, torch::kDouble))
            .item<double>() == Approx(0.7071).margin(1e-4));
  CHECK_THROWS_AS(cmi::cosine_similarity(torch::zeros({2}), torch::ones({2})), ZeroNormVector);
  CHECK_THROWS_AS(cmi::cosine_similarity(torch::ones({2}), torch::ones({3})), ShapeMismatch);
}

TEST_CASE("cosine similarity is invariant to positive rescaling", "[contrastive]") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto e = rand_emb(2, 7, seed);
    const double base = cmi::cosine_similarity(e[0], e[1]).item<double>();
    CHECK(cmi::cosine_similarity(e[0] * 3.7, e[1] * 0.01).item<double>() == Approx(base).margin(1e-12));
  }
}

TEST_CASE("project and discriminator modes", "[contrastive]") {
  const auto t = cmi::testing::random_teacher();
  const auto in_dim = discriminator_input_dim(t);
  const auto x = torch::rand({32, 3, 16, 16}) * 2 - 1;
  auto nonlinear = make_discriminator(t, {HeadMode::nonlinear, 64, 24}, 1);
  CHECK(project(nonlinear, t, x).sizes() == torch::IntArrayRef({32, 24}));
  auto linear = make_discriminator(t, {HeadMode::linear, 64, 24}, 1);
  CHECK(project(linear, t, x).sizes() == torch::IntArrayRef({32, 24}));
  auto none = make_discriminator(t, {HeadMode::none, 64, 24}, 1);
  CHECK(none->parameters().empty());
  const auto e = project(none, t, x);
  CHECK(e.size(1) == in_dim);
  CHECK(torch::allclose(e, pooled_features(t.forward_with_features(x).taps)));
}

TEST_CASE("projected embedding gradient matches finite differences", "[contrastive]") {
  auto net = build_student({"toycnn", 4, {3, 8, 8}}, 2);
  net->to(torch::kDouble);
  const TeacherSnapshot t(net);
  auto h = make_discriminator(t, {HeadMode::nonlinear, 16, 8}, 3);
  auto gen = make_generator(4);
  const auto x = torch::rand({4, 3, 8, 8}, gen, torch::kDouble) * 2 - 1;
  const auto err = gradcheck([&](const torch::Tensor& in) { return project(h, t, in).index({2, 5}); }, x, 1, 64);
  CHECK(err < 1e-3);
  auto xr = x.clone().requires_grad_(true);
  project(h, t, xr).sum().backward();
  for (const auto& p : h->parameters()) CHECK(p.grad().defined());
}

TEST_CASE("contrastive_loss hand-computed example", "[contrastive]") {
  const auto a = torch::tensor({{1.0, 0.0}}, torch::kDouble);
  const auto p = torch::tensor({{2.0, 0.0}}, torch::kDouble);
  const NegativeSet neg{torch::tensor({{0.0, 1.0}}, torch::kDouble), {}};
  CHECK(contrastive_loss(a, p, neg, 1.0).item<double>() == Approx(std::log(1 + std::exp(-1.0))).margin(1e-12));
  CHECK(contrastive_loss(a, p, neg, 1.0).item<double>() == Approx(0.3133).margin(1e-4));
}

TEST_CASE("contrastive_loss with uniform similarities is ln K", "[contrastive]") {
  const auto a = rand_emb(3, 5, 1);
  for (std::int64_t k : {2, 5, 17}) {
    const NegativeSet neg{a[0].unsqueeze(0).repeat({k - 1, 1}), {}};
    const auto one = a[0].unsqueeze(0);
    CHECK(contrastive_loss(one, one, neg, 0.5).item<double>() == Approx(std::log(static_cast<double>(k))).margin(1e-12));
  }
}

TEST_CASE("contrastive_loss matches the double-loop oracle", "[contrastive]") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto a = rand_emb(8, 6, seed);
    const auto p = rand_emb(8, 6, seed + 100);
    const auto bank = rand_emb(seed % 2 == 0 ? 0 : 5, 6, seed + 200);
    for (bool include_positive : {true, false}) {
      const auto neg = in_batch_negatives(a, p, bank);
      const auto got = contrastive_loss_per_instance(a, p, neg, 0.07, include_positive);
      const auto ref = cmi::testing::contrastive_loop(cmi::testing::to_eigen(a), cmi::testing::to_eigen(p),
                                                      bank.size(0) > 0 ? cmi::testing::to_eigen(bank) : cmi::testing::Mat(0, 6),
                                                      0.07, include_positive);
      double mean = 0;
      for (std::size_t i = 0; i < ref.size(); ++i) {
        CHECK(got[static_cast<std::int64_t>(i)].item<double>() == Approx(ref[i]).margin(1e-6));
        mean += ref[i] / static_cast<double>(ref.size());
      }
      CHECK(contrastive_loss(a, p, neg, 0.07, include_positive).item<double>() == Approx(mean).margin(1e-6));
    }
  }
}

TEST_CASE("contrastive_loss gradient matches finite differences", "[contrastive]") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = rand_emb(4, 5, seed);
    const auto p = rand_emb(4, 5, seed + 10);
    const auto bank = rand_emb(3, 5, seed + 20);
    for (bool inc : {true, false}) {
      CHECK(gradcheck([&](const torch::Tensor& x) { return contrastive_loss(x, p, in_batch_negatives(x, p, bank), 0.5, inc); },
                      a, seed) < 1e-4);
      CHECK(gradcheck([&](const torch::Tensor& x) { return contrastive_loss(a, p, in_batch_negatives(a, p, x), 0.5, inc); },
                      bank, seed) < 1e-4);
      CHECK(gradcheck([&](const torch::Tensor& x) { return diversity_score(x, p, in_batch_negatives(x, p, bank), 0.5); },
                      a, seed) < 1e-4);
    }
  }
}

TEST_CASE("contrastive_loss errors", "[contrastive]") {
  const auto a = rand_emb(1, 3, 1);
  const NegativeSet none{};
  CHECK_THROWS_AS(contrastive_loss(a, a, none, 0.1, false), EmptyNegativeSet);
  CHECK(contrastive_loss(a, a, none, 0.1, true).item<double>() == Approx(0.0).margin(1e-12));
  CHECK_THROWS_AS(contrastive_loss(a, a, none, 0.0), InvalidArgument);
  CHECK_THROWS_AS(contrastive_loss(a, rand_emb(2, 3, 1), none, 0.1), ShapeMismatch);
  CHECK_THROWS_AS(diversity_score(a, a, none, 0.1), EmptyNegativeSet);
}

TEST_CASE("contrastive_loss is permutation invariant over negatives", "[contrastive]") {
  const auto a = rand_emb(4, 6, 3);
  const auto p = rand_emb(4, 6, 4);
  const auto negs = rand_emb(9, 6, 5);
  const auto perm = torch::randperm(9, make_generator(6), torch::kLong);
  const double x = contrastive_loss(a, p, {negs, {}}, 0.2).item<double>();
  CHECK(contrastive_loss(a, p, {negs.index_select(0, perm), {}}, 0.2).item<double>() == Approx(x).margin(1e-12));
}

TEST_CASE("stop-gradient through positives", "[contrastive]") {
  const auto a = rand_emb(6, 4, 1).requires_grad_(true);
  const auto p = rand_emb(6, 4, 2).requires_grad_(true);
  auto loss = contrastive_loss(a, p.detach(), in_batch_negatives(a, p.detach()), 0.1);
  loss.backward();
  CHECK_FALSE(p.grad().defined());
  CHECK(a.grad().abs().sum().item<double>() > 0);
}

TEST_CASE("per-instance diversity identity in negatives-only mode", "[contrastive]") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = rand_emb(8, 4, seed);
    const auto p = rand_emb(8, 4, seed + 50);
    const auto neg = in_batch_negatives(a, p, rand_emb(3, 4, seed + 90));
    const auto loss = contrastive_loss_per_instance(a, p, neg, 0.3, false);
    const auto div = diversity_terms(a, p, neg, 0.3);
    const double z = 2.0 * 7 + 3;
    for (std::int64_t i = 0; i < 8; ++i) {
      CHECK(div[i].item<double>() == Approx(-std::exp(loss[i].item<double>()) / z).margin(1e-6));
    }
  }
}

TEST_CASE("diversity score with uniform similarities is -1", "[contrastive]") {
  const auto v = rand_emb(1, 5, 7);
  const NegativeSet neg{v.repeat({4, 1}), {}};
  CHECK(diversity_score(v, v, neg, 0.07).item<double>() == Approx(-1.0).margin(1e-12));
}

TEST_CASE("spreading negatives apart raises the diversity score", "[contrastive]") {
  const auto a = torch::tensor({{1.0, 0.0}}, torch::kDouble);
  double prev = -std::numeric_limits<double>::infinity();
  for (double angle : {0.1, 0.5, 1.0, 2.0, 3.0}) {
    const NegativeSet neg{torch::tensor({{std::cos(angle), std::sin(angle)}, {std::cos(angle), -std::sin(angle)}}, torch::kDouble), {}};
    const double d = diversity_score(a, a, neg, 0.5).item<double>();
    CHECK(d > prev);
    prev = d;
  }
}

TEST_CASE("optimizing the contrastive loss on a frozen toy set decreases it", "[contrastive]") {
  auto x = rand_emb(8, 4, 12).requires_grad_(true);
  const auto target = rand_emb(8, 4, 13);
  torch::optim::SGD opt({x}, 0.05);
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 100; ++step) {
    opt.zero_grad();
    auto loss = contrastive_loss(x, target, in_batch_negatives(x, target), 0.5);
    CHECK(loss.item<double>() < prev);
    prev = loss.item<double>();
    loss.backward();
    opt.step();
  }
}

TEST_CASE("memory bank append and immutability", "[contrastive]") {
  MemoryBank bank(10);
  for (int i = 0; i < 10; ++i) bank.append(make_batch(256, static_cast<std::uint64_t>(i)));
  CHECK(bank.size() == 2560);
  const auto first = checksum(bank.record(0).image.clone());
  MemoryBank grow(10);
  const auto b0 = make_batch(8, 99);
  grow.append(b0);
  const auto r0 = checksum(grow.record(0).image.clone());
  std::int64_t prev_ts = -1;
  for (int i = 0; i < 100; ++i) {
    const auto ts = grow.append(make_batch(8, 1000 + static_cast<std::uint64_t>(i)));
    CHECK(ts > prev_ts);
    prev_ts = ts;
  }
  CHECK(checksum(grow.record(0).image.clone()) == r0);
  CHECK(torch::equal(grow.images().slice(0, 0, 8), b0.images));
  CHECK(first == checksum(bank.record(0).image.clone()));
  const auto ts = grow.timestamps();
  CHECK((ts.slice(0, 1) >= ts.slice(0, 0, -1)).all().item<bool>());
}

TEST_CASE("memory bank rejects invalid batches", "[contrastive]") {
  MemoryBank bank(10);
  auto b = make_batch(4, 1);
  b.images = b.images * 3;
  CHECK_THROWS_AS(bank.append(b), InvalidArgument);
  auto c = make_batch(4, 2);
  c.targets = torch::full({4}, 10, torch::kLong);
  CHECK_THROWS_AS(bank.append(c), InvalidArgument);
}

TEST_CASE("memory bank sampling contract", "[contrastive]") {
  MemoryBank empty(10);
  CHECK(empty.sample(128, 1).size() == 0);
  MemoryBank bank(10);
  for (int i = 0; i < 10; ++i) bank.append(make_batch(256, static_cast<std::uint64_t>(i)));
  const auto s = bank.sample(128, 3);
  REQUIRE(s.size() == 128);
  const auto idx = s.indices.contiguous();
  std::set<std::int64_t> uniq(idx.data_ptr<std::int64_t>(), idx.data_ptr<std::int64_t>() + 128);
  CHECK(uniq.size() == 128);
  CHECK(torch::equal(s.images, bank.images().index_select(0, s.indices)));
  CHECK(bank.sample(100000, 3).size() == 2560);
}

TEST_CASE("memory bank sampling is uniform (chi-square)", "[contrastive]") {
  MemoryBank bank(10);
  bank.append(make_batch(10, 5));
  std::vector<double> counts(10, 0.0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto s = bank.sample(1, static_cast<std::uint64_t>(i) * 2654435761ULL + 17);
    counts[static_cast<std::size_t>(s.indices[0].item<std::int64_t>())] += 1;
  }
  double chi2 = 0;
  for (double c : counts) chi2 += (c - draws / 10.0) * (c - draws / 10.0) / (draws / 10.0);
  // 99th percentile of chi-square with 9 degrees of freedom.
  CHECK(chi2 < 21.666);
}

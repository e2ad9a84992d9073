#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls into the library code it checks.

#include <torch/torch.h>

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cmi/data/shapes.hpp"
#include "cmi/distill/supervised.hpp"
#include "cmi/models/registry.hpp"
#include "cmi/models/teacher.hpp"

namespace cmi::testing {

/// Largest relative error between the autograd gradient of scalar f at x and
/// a central finite difference, over `probes` random coordinates (all when 0).
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline double gradcheck(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x0,
                        std::uint64_t seed = 0, std::int64_t probes = 0, double eps = 1e-6, double floor = 1e-8) {
  auto x = x0.detach().to(torch::kDouble).clone().requires_grad_(true);
  auto y = f(x);
  const auto analytic = torch::autograd::grad({y}, {x}, {}, false, false, true)[0];
  const auto g = analytic.defined() ? analytic.detach().reshape(-1) : torch::zeros({x.numel()}, torch::kDouble);
  const auto n = x.numel();
  std::vector<std::int64_t> idx(n);
  for (std::int64_t i = 0; i < n; ++i) idx[i] = i;
  if (probes > 0 && probes < n) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(probes);
  }
  double worst = 0;
  torch::NoGradGuard ng;
  auto flat = x.detach().reshape(-1).clone();
  for (auto i : idx) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + eps;
    const double up = f(flat.view(x.sizes())).item<double>();
    flat[i] = orig - eps;
    const double down = f(flat.view(x.sizes())).item<double>();
    flat[i] = orig;
    const double numeric = (up - down) / (2 * eps);
    const double a = g[i].item<double>();
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline Mat to_eigen(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kDouble).contiguous();
  Mat m(c.size(0), c.dim() == 2 ? c.size(1) : 1);
  const auto* p = c.data_ptr<double>();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = p[i * m.cols() + j];
  return m;
}

inline double cosine(const Vec& a, const Vec& b) { return a.dot(b) / (a.norm() * b.norm()); }

/// Per-anchor InfoNCE by explicit loops. Negatives of anchor i: all other
/// instances' anchors and positives, then every bank row.
inline std::vector<double> contrastive_loop(const Mat& anchors, const Mat& positives, const Mat& bank, double tau,
                                            bool include_positive) {
  const auto n = anchors.rows();
  std::vector<double> out;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec a = anchors.row(i);
    const double pos = std::exp(cosine(a, positives.row(i).transpose()) / tau);
    double denom = include_positive ? pos : 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      denom += std::exp(cosine(a, anchors.row(j).transpose()) / tau);
      denom += std::exp(cosine(a, positives.row(j).transpose()) / tau);
    }
    for (Eigen::Index j = 0; j < bank.rows(); ++j) denom += std::exp(cosine(a, bank.row(j).transpose()) / tau);
    out.push_back(-std::log(pos / denom));
  }
  return out;
}

/// Matrix square root by Denman-Beavers iteration (no eigendecomposition).
inline Mat sqrtm_denman_beavers(const Mat& a, int max_iter = 200, double tol = 1e-14) {
  Mat y = a;
  Mat z = Mat::Identity(a.rows(), a.cols());
  for (int k = 0; k < max_iter; ++k) {
    const Mat yi = y.inverse();
    const Mat zi = z.inverse();
    const Mat y_next = 0.5 * (y + zi);
    const Mat z_next = 0.5 * (z + yi);
    const double delta = (y_next - y).norm() / std::max(1.0, y.norm());
    y = y_next;
    z = z_next;
    if (delta < tol) break;
  }
  return y;
}

/// Frechet distance with the square root of the (non-symmetric) product.
inline double frechet_reference(const Vec& mu1, const Mat& s1, const Vec& mu2, const Mat& s2) {
  const Mat root = sqrtm_denman_beavers(s1 * s2);
  return (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * root.trace();
}

/// Random SPD matrix with eigenvalues in [lo, hi].
inline Mat random_spd(std::int64_t d, std::mt19937_64& rng, double lo = 0.2, double hi = 2.0) {
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(lo, hi);
  Mat g(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) g(i, j) = nd(rng);
  Eigen::HouseholderQR<Mat> qr(g);
  const Mat q = qr.householderQ();
  Vec ev(d);
  for (Eigen::Index i = 0; i < d; ++i) ev(i) = ud(rng);
  return q * ev.asDiagonal() * q.transpose();
}

inline torch::Tensor to_torch(const Mat& m) {
  auto t = torch::empty({m.rows(), m.cols()}, torch::kDouble);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t[i][j] = m(i, j);
  return t;
}

inline torch::Tensor to_torch(const Vec& v) {
  auto t = torch::empty({v.size()}, torch::kDouble);
  for (Eigen::Index i = 0; i < v.size(); ++i) t[i] = v(i);
  return t;
}

/// Random-init toy teacher; its BN layers keep the default running stats.
inline TeacherSnapshot random_teacher(std::int64_t classes = 4, std::int64_t size = 16, std::uint64_t seed = 1,
                                      const std::string& arch = "toycnn") {
  return TeacherSnapshot(build_student(ArchSpec{arch, classes, {3, size, size}}, seed));
}

struct TrainedTeacher {
  TeacherSnapshot teacher;
  LabeledImages train;
  double train_accuracy = 0;
};

/// toycnn trained on the synthetic shapes task. Built once per process for
/// each (classes, size) pair.
inline const TrainedTeacher& shapes_teacher(std::int64_t classes = 4, std::int64_t size = 16) {
  static std::map<std::pair<std::int64_t, std::int64_t>, TrainedTeacher> cache;
  const auto key = std::make_pair(classes, size);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  ShapesConfig sc;
  sc.count = 4096;
  sc.num_classes = classes;
  sc.size = size;
  sc.seed = 1;
  auto data = make_shapes(sc);
  auto net = build_student(ArchSpec{"toycnn", classes, {3, size, size}}, 17);
  const auto r = train_classifier(net, data, SupervisedConfig{});
  return cache.emplace(key, TrainedTeacher{TeacherSnapshot(net), std::move(data), r.train_accuracy}).first->second;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    namespace fs = std::filesystem;
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = fs::temp_directory_path() / ("cmi_test_" + tag + "_" + std::to_string(stamp));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace cmi::testing

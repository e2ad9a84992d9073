#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <string>
#include <vector>

#include "cmi/core/errors.hpp"
#include "cmi/models/teacher.hpp"

namespace cmi {

/// Gaussian fit of a feature set, held in double precision.
struct FeatureDistribution {
  torch::Tensor mean;  // (D)
  torch::Tensor cov;   // (D, D), symmetric
  std::int64_t n = 0;

  std::int64_t dim() const { return mean.defined() ? mean.size(0) : 0; }
  /// Fewer than D+1 samples give a rank-deficient covariance.
  bool rank_deficient() const { return n < dim() + 1; }
};

/// Mean and unbiased (n-1) covariance of the rows of `features` (n, D).
inline FeatureDistribution fit_distribution(const torch::Tensor& features) {
  if (features.dim() != 2) throw ShapeMismatch("fit_distribution expects (n, D) features");
  if (features.size(0) < 2) throw InvalidArgument("fit_distribution needs at least 2 samples");
  const auto x = features.detach().to(torch::kDouble);
  FeatureDistribution d;
  d.n = x.size(0);
  d.mean = x.mean(0);
  const auto c = x - d.mean;
  auto cov = torch::matmul(c.t(), c) / static_cast<double>(d.n - 1);
  d.cov = 0.5 * (cov + cov.t());
  return d;
}

namespace detail {

// Relative size of a negative eigenvalue still accepted as round-off.
constexpr double kEigTolerance = 1e-10;

/// Eigenvalues clamped at 0; a clearly negative one means the input was not PSD.
inline torch::Tensor clamp_spectrum(const torch::Tensor& evals) {
  const double scale = std::max(1.0, evals.abs().max().item<double>());
  if (evals.min().item<double>() < -kEigTolerance * scale) {
    throw InvalidArgument("frechet_distance: covariance is not positive semi-definite");
  }
  return evals.clamp_min(0.0);
}

/// Symmetric PSD square root by eigendecomposition.
inline torch::Tensor sqrtm_psd(const torch::Tensor& a) {
  auto [evals, evecs] = torch::linalg_eigh(0.5 * (a + a.t()));
  const auto root = clamp_spectrum(evals).sqrt();
  return torch::matmul(evecs * root.unsqueeze(0), evecs.t());
}

}  // namespace detail

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
/// Tr (S_a S_b)^{1/2} is evaluated as Tr (A^{1/2} S_b A^{1/2})^{1/2} with
/// A^{1/2} the PSD root of S_a, which turns the product into a symmetric
/// matrix with the same spectrum.
inline double frechet_distance(const FeatureDistribution& a, const FeatureDistribution& b) {
  if (a.dim() != b.dim() || a.cov.size(0) != a.dim() || b.cov.size(0) != b.dim()) {
    throw ShapeMismatch("frechet_distance: dimension mismatch (" + std::to_string(a.dim()) + " vs " +
                        std::to_string(b.dim()) + ")");
  }
  for (const auto* t : {&a.mean, &a.cov, &b.mean, &b.cov}) {
    if (!torch::isfinite(*t).all().item<bool>()) throw InvalidArgument("frechet_distance: non-finite input");
  }
  const auto ma = a.mean.to(torch::kDouble), mb = b.mean.to(torch::kDouble);
  const auto sa = a.cov.to(torch::kDouble), sb = b.cov.to(torch::kDouble);
  const auto ra = detail::sqrtm_psd(sa);
  const auto m = torch::matmul(torch::matmul(ra, sb), ra);
  const auto ev = torch::linalg_eigvalsh(0.5 * (m + m.t()));
  const auto tr_sqrt = detail::clamp_spectrum(ev).sqrt().sum();
  const double d = (ma - mb).pow(2).sum().item<double>() + (sa.trace() + sb.trace() - 2.0 * tr_sqrt).item<double>();
  return std::max(d, 0.0);
}

/// Pooled teacher features of one tap for a whole image set, computed in
/// chunks (every chunk has at least 2 images).
inline std::vector<torch::Tensor> teacher_tap_features(const TeacherSnapshot& t, const torch::Tensor& images,
                                                       std::int64_t chunk = 256) {
  torch::NoGradGuard ng;
  const auto n = images.size(0);
  if (n < 2) throw InvalidArgument("need at least 2 images to extract teacher features");
  std::vector<std::vector<torch::Tensor>> per_tap(t.feature_taps().size());
  std::int64_t start = 0;
  while (start < n) {
    auto end = std::min(n, start + chunk);
    if (n - end == 1) end = n;
    const auto out = t.forward_with_features(images.slice(0, start, end).to(t.dtype()));
    for (std::size_t k = 0; k < out.taps.size(); ++k) per_tap[k].push_back(pool_tap(out.taps[k]));
    start = end;
  }
  std::vector<torch::Tensor> feats;
  for (auto& parts : per_tap) feats.push_back(torch::cat(parts, 0));
  return feats;
}

struct LevelFid {
  std::int64_t level = 0;
  std::string tap;
  double fid = 0;
  std::int64_t dim = 0;
  std::int64_t n_real = 0, n_fake = 0;
  std::string warning;  // set when either sample count is below dim + 1
};

/// Frechet distance between real and synthetic images at each requested
/// teacher tap (global-average pooled).
inline std::vector<LevelFid> multi_level_fid(const TeacherSnapshot& t, const torch::Tensor& real,
                                             const torch::Tensor& fake, const std::vector<std::int64_t>& levels) {
  if (real.size(0) == 0 || fake.size(0) == 0) throw EmptyDataset("multi_level_fid needs non-empty image sets");
  const auto ntaps = static_cast<std::int64_t>(t.feature_taps().size());
  for (auto l : levels) {
    if (l < 0 || l >= ntaps) throw InvalidArgument("FID level " + std::to_string(l) + " is not a valid tap index");
  }
  const auto fr = teacher_tap_features(t, real);
  const auto ff = teacher_tap_features(t, fake);
  std::vector<LevelFid> out;
  for (auto l : levels) {
    const auto k = static_cast<std::size_t>(l);
    LevelFid r;
    r.level = l;
    r.tap = t.feature_taps()[k].name;
    const auto da = fit_distribution(fr[k]);
    const auto db = fit_distribution(ff[k]);
    r.dim = da.dim();
    r.n_real = da.n;
    r.n_fake = db.n;
    if (da.rank_deficient() || db.rank_deficient()) {
      r.warning = "sample count below feature dimension + 1; covariance is rank deficient";
    }
    r.fid = frechet_distance(da, db);
    out.push_back(r);
  }
  return out;
}

}  // namespace cmi

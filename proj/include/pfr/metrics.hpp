#pragma once

// Rendering-quality metrics: PSNR (capped at 100 dB for identical images)
// and SSIM with the standard 11x11 Gaussian window.

#include <vector>

#include "json.hpp"
#include "pfr/image_io.hpp"

namespace pfr {

inline double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw ValueError(strfmt("psnr: image sizes differ (%dx%d vs %dx%d)", a.width, a.height, b.width,
                            b.height));
  double mse = 0;
  for (size_t i = 0; i < a.rgb.size(); ++i) {
    double d = static_cast<double>(a.rgb[i]) - b.rgb[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.rgb.size());
  if (mse <= 0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

// Structural similarity: 11x11 Gaussian window sigma=1.5, k1=0.01, k2=0.03,
// dynamic range 1, averaged over pixels and channels.
inline double ssim(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw ValueError("ssim: image sizes differ");
  if (a.width < 11 || a.height < 11)
    throw ValueError(strfmt("ssim: image %dx%d smaller than the 11x11 window", a.width, a.height));
  const int W = a.width, H = a.height;
  constexpr int R = 5;
  double kernel[11];
  double ksum = 0;
  for (int i = -R; i <= R; ++i) {
    kernel[i + R] = std::exp(-static_cast<double>(i * i) / (2.0 * 1.5 * 1.5));
    ksum += kernel[i + R];
  }
  for (double& k : kernel) k /= ksum;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

  auto channel_plane = [&](const Image& img, int c) {
    std::vector<double> plane(static_cast<size_t>(W) * H);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) plane[static_cast<size_t>(y) * W + x] = img.at(y, x, c);
    return plane;
  };
  // separable Gaussian blur with edge clamping
  auto blur = [&](const std::vector<double>& src) {
    std::vector<double> tmp(src.size()), dst(src.size());
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double s = 0;
        for (int i = -R; i <= R; ++i) {
          int xx = std::min(W - 1, std::max(0, x + i));
          s += kernel[i + R] * src[static_cast<size_t>(y) * W + xx];
        }
        tmp[static_cast<size_t>(y) * W + x] = s;
      }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double s = 0;
        for (int i = -R; i <= R; ++i) {
          int yy = std::min(H - 1, std::max(0, y + i));
          s += kernel[i + R] * tmp[static_cast<size_t>(yy) * W + x];
        }
        dst[static_cast<size_t>(y) * W + x] = s;
      }
    return dst;
  };

  double total = 0;
  for (int c = 0; c < 3; ++c) {
    auto pa = channel_plane(a, c), pb = channel_plane(b, c);
    std::vector<double> aa(pa.size()), bb(pa.size()), ab(pa.size());
    for (size_t i = 0; i < pa.size(); ++i) {
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    auto mu_a = blur(pa), mu_b = blur(pb), m_aa = blur(aa), m_bb = blur(bb), m_ab = blur(ab);
    double acc = 0;
    for (size_t i = 0; i < pa.size(); ++i) {
      double va = m_aa[i] - mu_a[i] * mu_a[i];
      double vb = m_bb[i] - mu_b[i] * mu_b[i];
      double cov = m_ab[i] - mu_a[i] * mu_b[i];
      acc += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
    }
    total += acc / static_cast<double>(pa.size());
  }
  return total / 3.0;
}

struct EvalReport {
  std::vector<double> per_view_psnr;
  std::vector<double> per_view_ssim;
  double mean_psnr = 0;
  double mean_ssim = 0;
  double wall_seconds = 0;
  double fps = 0;
  int64_t gaussians_pre_prune = 0;
  int64_t gaussians_post_prune = 0;

  void finalize() {
    mean_psnr = 0;
    mean_ssim = 0;
    for (double v : per_view_psnr) mean_psnr += v;
    for (double v : per_view_ssim) mean_ssim += v;
    if (!per_view_psnr.empty()) mean_psnr /= static_cast<double>(per_view_psnr.size());
    if (!per_view_ssim.empty()) mean_ssim /= static_cast<double>(per_view_ssim.size());
  }

  nlohmann::json to_json() const {
    return {{"per_view_psnr", per_view_psnr},
            {"per_view_ssim", per_view_ssim},
            {"mean_psnr", mean_psnr},
            {"mean_ssim", mean_ssim},
            {"wall_seconds", wall_seconds},
            {"fps", fps},
            {"gaussians_pre_prune", gaussians_pre_prune},
            {"gaussians_post_prune", gaussians_post_prune}};
  }
};

}  // namespace pfr

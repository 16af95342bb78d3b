#include "pfr/rasterizer.hpp"

#include <gtest/gtest.h>

#include <algorithm>

#include "pfr/common.hpp"
#include "raster_reference.hpp"

namespace {

pfr::Camera test_camera(int wh = 32) {
  pfr::Camera cam;
  cam.width = cam.height = wh;
  cam.fx = cam.fy = static_cast<float>(wh);
  cam.cx = cam.cy = static_cast<float>(wh) / 2;
  cam.near = 0.01f;
  return cam;
}

TEST(ProjectPoint, OnAxis) {
  auto cam = test_camera(64);
  auto p = pfr::project_point({0, 0, 2}, cam);
  EXPECT_FALSE(p.culled);
  EXPECT_FLOAT_EQ(p.u, 32.0f);
  EXPECT_FLOAT_EQ(p.v, 32.0f);
  EXPECT_FLOAT_EQ(p.depth, 2.0f);
}

TEST(ProjectPoint, AnalyticOffAxis) {
  auto cam = test_camera(64);
  auto p = pfr::project_point({1, 0, 2}, cam);
  EXPECT_FLOAT_EQ(p.u, 64.0f * 0.5f + 32.0f);  // fx*x/z + cx
}

TEST(ProjectPoint, NearPlaneCulling) {
  auto cam = test_camera(64);
  auto p = pfr::project_point({0, 0, cam.near / 2}, cam);
  EXPECT_TRUE(p.culled);
}

TEST(ProjectCovariance, IsotropicOnAxisClosedForm) {
  auto cam = test_camera(64);
  pfr::GaussianPrimitive g;
  const float s = 0.05f;
  g.mu = {0, 0, 1};
  g.log_scale = {std::log(s), std::log(s), std::log(s)};
  g.rot = {1, 0, 0, 0};
  auto cov = pfr::project_covariance(g, cam);
  const float expect = 64.0f * 64.0f * s * s + 0.3f;  // f^2 s^2 + blur
  EXPECT_NEAR(cov[0], expect, 1e-4f);
  EXPECT_NEAR(cov[1], 0.0f, 1e-5f);
  EXPECT_NEAR(cov[2], expect, 1e-4f);
}

TEST(ProjectCovariance, DepthScalingLaw) {
  auto cam = test_camera(64);
  pfr::GaussianPrimitive g;
  g.mu = {0, 0, 1};
  g.log_scale = {std::log(0.05f), std::log(0.05f), std::log(0.05f)};
  g.rot = {1, 0, 0, 0};
  auto c1 = pfr::project_covariance(g, cam, 0.0f);  // no floor: pure law
  g.mu = {0, 0, 2};
  auto c2 = pfr::project_covariance(g, cam, 0.0f);
  EXPECT_NEAR(c2[0], c1[0] / 4.0f, 1e-5f);  // doubling depth quarters covariance
  EXPECT_NEAR(c2[2], c1[2] / 4.0f, 1e-5f);
}

TEST(ProjectCovariance, RotationInvarianceForIsotropic) {
  auto cam = test_camera(64);
  pfr::GaussianPrimitive g;
  g.mu = {0.3f, -0.2f, 2};
  g.log_scale = {std::log(0.1f), std::log(0.1f), std::log(0.1f)};
  g.rot = {1, 0, 0, 0};
  auto c1 = pfr::project_covariance(g, cam);
  pfr::Rng rng(3);
  double qw = rng.normal(), qx = rng.normal(), qy = rng.normal(), qz = rng.normal();
  double qn = std::sqrt(qw * qw + qx * qx + qy * qy + qz * qz);
  g.rot = {float(qw / qn), float(qx / qn), float(qy / qn), float(qz / qn)};
  auto c2 = pfr::project_covariance(g, cam);
  EXPECT_NEAR(c1[0], c2[0], 1e-4f);
  EXPECT_NEAR(c1[1], c2[1], 1e-4f);
  EXPECT_NEAR(c1[2], c2[2], 1e-4f);
}

TEST(Rasterize, EmptyFieldGivesBackground) {
  auto cam = test_camera();
  pfr::GaussianField f;
  f.sh_degree = 0;
  pfr::RenderOptions opt;
  opt.background[0] = 0.25f;
  opt.background[1] = 0.5f;
  opt.background[2] = 0.75f;
  auto out = pfr::render(f, cam, opt);
  for (int p = 0; p < cam.width * cam.height; ++p) {
    EXPECT_FLOAT_EQ(out.rgb[p * 3 + 0], 0.25f);
    EXPECT_FLOAT_EQ(out.rgb[p * 3 + 1], 0.5f);
    EXPECT_FLOAT_EQ(out.rgb[p * 3 + 2], 0.75f);
    EXPECT_FLOAT_EQ(out.alpha[static_cast<size_t>(p)], 0.0f);
  }
}

TEST(Rasterize, SingleOpaqueGaussianHitsItsColor) {
  auto cam = test_camera();
  pfr::GaussianField f;
  f.sh_degree = 0;
  pfr::GaussianPrimitive g;
  g.mu = {0, 0, 2};
  g.log_scale = {std::log(0.5f), std::log(0.5f), std::log(0.5f)};  // huge on screen
  g.rot = {1, 0, 0, 0};
  g.opacity_logit = 12.0f;  // ~1
  const float target[3] = {0.8f, 0.3f, 0.6f};
  g.sh.resize(3);
  const float Y0 = 0.28209479177387814f;
  for (int c = 0; c < 3; ++c) g.sh[static_cast<size_t>(c)] = (target[c] - 0.5f) / Y0;
  f.primitives.push_back(g);
  auto out = pfr::render(f, cam, {});
  const int cp = (16 * 32 + 16);  // center pixel
  for (int c = 0; c < 3; ++c)
    EXPECT_NEAR(out.rgb[cp * 3 + c], target[c], 0.02f * std::max(1.0f, target[c]) + 0.01f);
  EXPECT_GE(out.alpha[cp], 0.98f);
}

TEST(Rasterize, PermutationInvariance) {
  auto cam = test_camera();
  pfr::Rng rng(11);
  auto field = pfrtest::random_field(rng, 30, 1);
  auto out1 = pfr::render(field, cam, {});
  // shuffle primitive order
  auto shuffled = field;
  for (size_t i = shuffled.primitives.size(); i > 1; --i)
    std::swap(shuffled.primitives[i - 1],
              shuffled.primitives[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
  auto out2 = pfr::render(shuffled, cam, {});
  EXPECT_EQ(out1.rgb, out2.rgb);  // identical image, bit for bit
  EXPECT_EQ(out1.alpha, out2.alpha);
}

TEST(Rasterize, ZeroOpacityPrimitiveChangesNothing) {
  auto cam = test_camera();
  pfr::Rng rng(12);
  auto field = pfrtest::random_field(rng, 10, 0);
  auto out1 = pfr::render(field, cam, {});
  auto field2 = field;
  pfr::GaussianPrimitive g = field.primitives[0];
  g.opacity_logit = -1e9f;  // sigmoid -> 0
  field2.primitives.push_back(g);
  auto out2 = pfr::render(field2, cam, {});
  EXPECT_EQ(out1.rgb, out2.rgb);
  EXPECT_EQ(out1.alpha, out2.alpha);
}

TEST(Rasterize, AlphaBoundsAndFiniteness) {
  auto cam = test_camera();
  pfr::Rng rng(13);
  auto field = pfrtest::random_field(rng, 40, 1);
  auto out = pfr::render(field, cam, {});
  for (float a : out.alpha) {
    EXPECT_GE(a, 0.0f);
    EXPECT_LE(a, 1.0f);
  }
  for (float v : out.rgb) EXPECT_TRUE(std::isfinite(v));
}

TEST(Rasterize, TiledPathIsExactWithSkip) {
  auto cam = test_camera();
  pfr::Rng rng(14);
  auto field = pfrtest::random_field(rng, 35, 1);
  pfr::RenderOptions tiled;
  tiled.tiled = true;
  pfr::RenderOptions full;
  full.tiled = false;
  auto a = pfr::render(field, cam, tiled);
  auto b = pfr::render(field, cam, full);
  EXPECT_EQ(a.rgb, b.rgb);  // skip threshold decides in both paths
  EXPECT_EQ(a.alpha, b.alpha);
}

TEST(Rasterize, MatchesBruteForceReference) {
  auto cam = test_camera();
  pfr::Rng rng(15);
  for (int trial = 0; trial < 5; ++trial) {
    auto field = pfrtest::random_field(rng, 10 + trial * 10, trial % 2);
    std::vector<double> ref_rgb, ref_alpha;
    pfrtest::reference_render(field, cam, {0, 0, 0}, ref_rgb, ref_alpha);
    auto out = pfr::render(field, cam, pfr::RenderOptions::exact());
    double worst = 0;
    for (size_t i = 0; i < ref_rgb.size(); ++i)
      worst = std::max(worst, std::abs(ref_rgb[i] - out.rgb[i]));
    EXPECT_LT(worst, 1e-5) << "trial " << trial;
    for (size_t i = 0; i < ref_alpha.size(); ++i)
      worst = std::max(worst, std::abs(ref_alpha[i] - out.alpha[i]));
    EXPECT_LT(worst, 1e-5) << "trial " << trial << " (alpha)";
  }
}

TEST(Rasterize, SkipThresholdCloseToExact) {
  auto cam = test_camera();
  pfr::Rng rng(16);
  auto field = pfrtest::random_field(rng, 30, 1);
  auto fast = pfr::render(field, cam, {});
  auto exact = pfr::render(field, cam, pfr::RenderOptions::exact());
  double worst = 0;
  for (size_t i = 0; i < fast.rgb.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(fast.rgb[i]) - exact.rgb[i]));
  EXPECT_LT(worst, 0.05);  // all skipped contributions are < 1/255 each
}

TEST(RasterizeGradcheck, SinglePrimitive) {
  auto cam = test_camera(16);
  pfr::Rng rng(17);
  auto field = pfrtest::random_field(rng, 1, 1);
  std::vector<float> target(16 * 16 * 3);
  for (auto& v : target) v = static_cast<float>(rng.uniform());
  double err = pfr::rasterize_gradcheck(field, cam, target);
  EXPECT_LT(err, 1e-5);
}

TEST(RasterizeGradcheck, TenPrimitives) {
  auto cam = test_camera(16);
  pfr::Rng rng(18);
  auto field = pfrtest::random_field(rng, 10, 1);
  std::vector<float> target(16 * 16 * 3);
  for (auto& v : target) v = static_cast<float>(rng.uniform());
  double err = pfr::rasterize_gradcheck(field, cam, target);
  EXPECT_LT(err, 1e-5);
}

TEST(RasterizeGradcheck, SaturatedOpacityHasVanishingGradient) {
  auto cam = test_camera(16);
  pfr::Rng rng(19);
  auto field = pfrtest::random_field(rng, 1, 0);
  field.primitives[0].opacity_logit = 12.0f;
  std::vector<float> target(16 * 16 * 3, 0.2f);
  double err = pfr::rasterize_gradcheck(field, cam, target);
  EXPECT_LT(err, 1e-5);  // FD and analytic must agree (both ~0 for the logit)
}

TEST(Rasterize, GradientsFlowThroughTape) {
  auto cam = test_camera(16);
  pfr::Rng rng(20);
  auto field = pfrtest::random_field(rng, 5, 1);
  pfr::Tape<float> tp;
  auto soa = pfr::raster::to_soa<float>(field);
  pfr::GaussianTensors<float> in;
  in.mu = tp.leaf({5, 3}, soa.mu, true);
  in.scale = tp.leaf({5, 3}, soa.scale, true);
  in.rot = tp.leaf({5, 4}, soa.rot, true);
  in.opacity = tp.leaf({5}, soa.opacity, true);
  in.sh = tp.leaf({5, 12}, soa.sh, true);
  auto out = pfr::rasterize(in, cam, 1, {});
  auto loss = pfr::mean_all(pfr::square(out.rgb));
  tp.backward(loss);
  auto norm = [](const std::vector<float>& v) {
    double s = 0;
    for (float x : v) s += double(x) * x;
    return std::sqrt(s);
  };
  EXPECT_GT(norm(in.mu.grad()), 0.0);
  EXPECT_GT(norm(in.scale.grad()), 0.0);
  EXPECT_GT(norm(in.opacity.grad()), 0.0);
  EXPECT_GT(norm(in.sh.grad()), 0.0);
}

}  // namespace

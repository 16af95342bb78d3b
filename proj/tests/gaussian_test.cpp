#include "pfr/gaussians.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pfr/common.hpp"

namespace {

std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<float> raw_pixel(float ls, float qw, float qx, float qy, float qz, float op,
                             int sh_count, float sh_val = 0.0f) {
  std::vector<float> r = {ls, ls, ls, qw, qx, qy, qz, op};
  r.insert(r.end(), static_cast<size_t>(sh_count), sh_val);
  return r;
}

TEST(Activate, QuaternionNormalization) {
  auto raw = raw_pixel(-2.0f, 2, 0, 0, 0, 0.0f, 3);
  std::vector<float> pm = {1, 2, 3};
  std::vector<float> conf = {1.5f};
  auto prims = pfr::activate(raw, pm, conf, 1, 1, 0, 7);
  ASSERT_EQ(prims.size(), 1u);
  EXPECT_FLOAT_EQ(prims[0].rot[0], 1.0f);
  EXPECT_FLOAT_EQ(prims[0].rot[1], 0.0f);
  EXPECT_FLOAT_EQ(prims[0].mu.x, 1.0f);
  EXPECT_EQ(prims[0].source_frame, 7);
  EXPECT_FLOAT_EQ(prims[0].confidence, 1.5f);
}

TEST(Activate, ZeroQuaternionGivesIdentity) {
  auto raw = raw_pixel(-2.0f, 0, 0, 0, 0, 0.0f, 3);
  auto prims = pfr::activate(raw, {0, 0, 1}, {1.0f}, 1, 1, 0, 0);
  EXPECT_FLOAT_EQ(prims[0].rot[0], 1.0f);
  EXPECT_FLOAT_EQ(prims[0].rot[1], 0.0f);
  EXPECT_FLOAT_EQ(prims[0].rot[2], 0.0f);
  EXPECT_FLOAT_EQ(prims[0].rot[3], 0.0f);
}

TEST(Activate, OpacityLogitZeroGivesHalf) {
  auto raw = raw_pixel(-2.0f, 1, 0, 0, 0, 0.0f, 3);
  auto prims = pfr::activate(raw, {0, 0, 1}, {1.0f}, 1, 1, 0, 0);
  EXPECT_FLOAT_EQ(prims[0].opacity(), 0.5f);
}

TEST(Activate, ScaleClampAtUpperBound) {
  // raw log-scale 0 -> scale 1.0 before clamp, clamped to 0.5
  auto raw = raw_pixel(0.0f, 1, 0, 0, 0, 0.0f, 3);
  auto prims = pfr::activate(raw, {0, 0, 1}, {1.0f}, 1, 1, 0, 0);
  EXPECT_FLOAT_EQ(prims[0].scale().x, 0.5f);
}

TEST(Activate, NonFiniteRawNamesPixel) {
  auto raw = raw_pixel(-2.0f, 1, 0, 0, 0, 0.0f, 3);
  auto raw2 = raw_pixel(-2.0f, 1, 0, 0, 0, std::numeric_limits<float>::quiet_NaN(), 3);
  raw.insert(raw.end(), raw2.begin(), raw2.end());
  try {
    pfr::activate(raw, {0, 0, 1, 0, 0, 2}, {1.0f, 1.0f}, 1, 2, 0, 0);
    FAIL() << "expected NumericError";
  } catch (const pfr::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("pixel 1"), std::string::npos) << e.what();
  }
}

TEST(Activate, FuzzedRawsSatisfyInvariants) {
  pfr::Rng rng(77);
  const int K = 4;  // d=1
  const int n = 64;
  std::vector<float> raw, pm, conf;
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 8 + 3 * K; ++c) raw.push_back(static_cast<float>(rng.normal(0.0, 3.0)));
    for (int c = 0; c < 3; ++c) pm.push_back(static_cast<float>(rng.normal()));
    conf.push_back(static_cast<float>(1.0 + rng.uniform()));
  }
  auto prims = pfr::activate(raw, pm, conf, 8, 8, 1, 0);
  for (const auto& g : prims) {
    float qn = std::sqrt(g.rot[0] * g.rot[0] + g.rot[1] * g.rot[1] + g.rot[2] * g.rot[2] +
                         g.rot[3] * g.rot[3]);
    EXPECT_NEAR(qn, 1.0f, 1e-6f);
    EXPECT_GE(g.opacity(), 0.0f);
    EXPECT_LE(g.opacity(), 1.0f);
    EXPECT_GE(g.confidence, 1.0f);
    auto s = g.scale();
    EXPECT_GE(s.x, pfr::kScaleMin);
    EXPECT_LE(s.x, pfr::kScaleMax);
    // covariance is SPD by construction: R diag(s^2) R^T with s > 0
    auto R = pfr::quat_to_rotmat(g.rot[0], g.rot[1], g.rot[2], g.rot[3]);
    EXPECT_NEAR(R.det(), 1.0f, 1e-5f);
  }
}

TEST(Prune, ThresholdOneKeepsEverything) {
  pfr::GaussianField f;
  f.sh_degree = 0;
  for (float c : {1.0001f, 2.0f, 5.0f}) {
    pfr::GaussianPrimitive g;
    g.confidence = c;
    g.sh.assign(3, 0.0f);
    f.primitives.push_back(g);
  }
  // C = 1 + exp(c~) > 1 always, so th_conf = 1.0 prunes nothing
  EXPECT_EQ(pfr::prune(f, 1.0f).primitives.size(), 3u);
  EXPECT_EQ(pfr::prune(f, 0.0f).primitives.size(), 3u);  // identity
}

TEST(Prune, FilterSemanticsAndIdempotence) {
  pfr::GaussianField f;
  f.sh_degree = 0;
  for (float c : {1.2f, 3.0f, 1.7f}) {
    pfr::GaussianPrimitive g;
    g.confidence = c;
    g.sh.assign(3, 0.0f);
    f.primitives.push_back(g);
  }
  auto p = pfr::prune(f, 1.5f);
  ASSERT_EQ(p.primitives.size(), 2u);
  EXPECT_FLOAT_EQ(p.primitives[0].confidence, 3.0f);  // order preserved
  EXPECT_FLOAT_EQ(p.primitives[1].confidence, 1.7f);
  auto pp = pfr::prune(p, 1.5f);
  EXPECT_EQ(pp.primitives.size(), p.primitives.size());
}

TEST(Accumulate, UnionSemantics) {
  pfr::GaussianField global;
  std::vector<pfr::GaussianPrimitive> t1(5), t2(7);
  pfr::accumulate(global, t1, 0);
  EXPECT_EQ(global.primitives.size(), 5u);
  pfr::accumulate(global, t2, 0);
  EXPECT_EQ(global.primitives.size(), 12u);
  EXPECT_THROW(pfr::accumulate(global, t1, 3), pfr::StateError);
}

TEST(ShEval, DegreeZeroConstant) {
  std::vector<float> sh = {1, 1, 1};
  auto rgb = pfr::sh_eval(sh, 0, {0, 0, 1});
  const float expect = 0.28209479177387814f + 0.5f;
  EXPECT_NEAR(rgb.x, expect, 1e-6f);
  EXPECT_NEAR(rgb.y, expect, 1e-6f);
  EXPECT_NEAR(rgb.z, expect, 1e-6f);
  // isotropy: independent of direction
  auto rgb2 = pfr::sh_eval(sh, 0, pfr::Vec3<float>{1, 1, 1}.normalized());
  EXPECT_FLOAT_EQ(rgb.x, rgb2.x);
}

TEST(ShEval, DegreeOneMatchesDirectSummation) {
  pfr::Rng rng(5);
  std::vector<float> sh(12);
  for (auto& v : sh) v = static_cast<float>(rng.normal(0.0, 0.5));
  const double C0 = 0.28209479177387814, C1 = 0.4886025119029199;
  for (int trial = 0; trial < 10; ++trial) {
    pfr::Vec3<float> d = pfr::Vec3<float>{static_cast<float>(rng.normal()),
                                          static_cast<float>(rng.normal()),
                                          static_cast<float>(rng.normal())}
                             .normalized();
    auto rgb = pfr::sh_eval(sh, 1, d);
    for (int ch = 0; ch < 3; ++ch) {
      double v = sh[ch * 4 + 0] * C0 - sh[ch * 4 + 1] * C1 * d.y + sh[ch * 4 + 2] * C1 * d.z -
                 sh[ch * 4 + 3] * C1 * d.x + 0.5;
      v = std::max(0.0, v);
      EXPECT_NEAR((ch == 0 ? rgb.x : ch == 1 ? rgb.y : rgb.z), v, 1e-6);
    }
  }
}

TEST(ShEval, ErrorsOnBadInput) {
  std::vector<float> sh(3, 0.0f);
  EXPECT_THROW(pfr::sh_eval(sh, 4, {0, 0, 1}), pfr::ValueError);
  EXPECT_THROW(pfr::sh_eval(sh, 0, {0, 0, 2}), pfr::ValueError);  // non-unit
}

TEST(Ply, RoundtripBitExact) {
  pfr::Rng rng(9);
  pfr::GaussianField f;
  f.sh_degree = 1;
  f.canonical_frame = 0;
  for (int i = 0; i < 17; ++i) {
    pfr::GaussianPrimitive g;
    g.mu = {static_cast<float>(rng.normal()), static_cast<float>(rng.normal()),
            static_cast<float>(rng.normal())};
    g.log_scale = {static_cast<float>(rng.uniform(-8.0, -0.8)),
                   static_cast<float>(rng.uniform(-8.0, -0.8)),
                   static_cast<float>(rng.uniform(-8.0, -0.8))};
    g.rot = {static_cast<float>(rng.normal()), static_cast<float>(rng.normal()),
             static_cast<float>(rng.normal()), static_cast<float>(rng.normal())};
    g.opacity_logit = static_cast<float>(rng.normal());
    g.sh.resize(12);
    for (auto& v : g.sh) v = static_cast<float>(rng.normal());
    g.confidence = static_cast<float>(1.0 + rng.uniform());
    f.primitives.push_back(g);
  }
  auto path = tmp_path("pfr_roundtrip.ply");
  pfr::export_ply(f, path);
  auto r = pfr::import_ply(path);
  ASSERT_EQ(r.primitives.size(), f.primitives.size());
  EXPECT_EQ(r.sh_degree, 1);
  for (size_t i = 0; i < f.primitives.size(); ++i) {
    const auto& a = f.primitives[i];
    const auto& b = r.primitives[i];
    EXPECT_EQ(a.mu.x, b.mu.x);
    EXPECT_EQ(a.log_scale.x, b.log_scale.x);
    EXPECT_EQ(a.log_scale.z, b.log_scale.z);
    EXPECT_EQ(a.rot, b.rot);
    EXPECT_EQ(a.opacity_logit, b.opacity_logit);
    EXPECT_EQ(a.sh, b.sh);
  }
  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}

TEST(Ply, EmptyFieldIsValid) {
  pfr::GaussianField f;
  f.sh_degree = 2;
  auto path = tmp_path("pfr_empty.ply");
  pfr::export_ply(f, path);
  auto r = pfr::import_ply(path);
  EXPECT_EQ(r.primitives.size(), 0u);
  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}

TEST(Ply, HeaderDeclares26FloatsForDegreeOne) {
  pfr::GaussianField f;
  f.sh_degree = 1;
  pfr::GaussianPrimitive g;
  g.sh.assign(12, 0.0f);
  f.primitives.push_back(g);
  auto path = tmp_path("pfr_hdr.ply");
  pfr::export_ply(f, path);
  std::ifstream in(path);
  std::string line;
  int props = 0;
  while (std::getline(in, line))
    if (line.rfind("property float ", 0) == 0) ++props;
  EXPECT_EQ(props, 26);  // 3 + 3 + 3 + 9 + 1 + 3 + 4
  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}

TEST(Ply, MalformedHeaderReportsByteOffset) {
  auto path = tmp_path("pfr_bad.ply");
  std::ofstream(path) << "ply\nformat ascii 1.0\nelement vertex 1\nend_header\n";
  try {
    pfr::import_ply(path);
    FAIL() << "expected FormatError";
  } catch (const pfr::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos) << e.what();
  }
  std::remove(path.c_str());
}

}  // namespace

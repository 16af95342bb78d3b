#include "pfr/synthscene.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "pfr/common.hpp"

namespace {

namespace fs = std::filesystem;

pfr::SceneSpec small_spec(uint64_t seed, int frames = 20) {
  pfr::SceneSpec s;
  s.seed = seed;
  s.frames = frames;
  s.res = 64;
  return s;
}

TEST(GenerateScene, DeterministicFromSeed) {
  auto g1 = pfr::generate_scene(small_spec(7));
  auto g2 = pfr::generate_scene(small_spec(7));
  ASSERT_EQ(g1.boxes.size(), g2.boxes.size());
  for (size_t i = 0; i < g1.boxes.size(); ++i) {
    EXPECT_EQ(g1.boxes[i].box.lo.x, g2.boxes[i].box.lo.x);
    EXPECT_EQ(g1.boxes[i].box.hi.z, g2.boxes[i].box.hi.z);
  }
  ASSERT_EQ(g1.trajectory.size(), g2.trajectory.size());
  for (size_t i = 0; i < g1.trajectory.size(); ++i)
    EXPECT_EQ(g1.trajectory[i].pose.t.x, g2.trajectory[i].pose.t.x);
  // rendered bytes identical too
  auto s1 = pfr::render_scene(g1);
  auto s2 = pfr::render_scene(g2);
  EXPECT_EQ(s1.frames[0].rgb.rgb, s2.frames[0].rgb.rgb);
  EXPECT_EQ(s1.frames[0].depth, s2.frames[0].depth);
}

TEST(GenerateScene, EmptyRoomHasOnlyWalls) {
  auto spec = small_spec(3, 10);
  spec.n_boxes_min = spec.n_boxes_max = 0;
  auto geom = pfr::generate_scene(spec);
  EXPECT_TRUE(geom.boxes.empty());
  auto sample = pfr::render_scene(geom);
  for (uint8_t v : sample.frames[0].validity) EXPECT_EQ(v, 1);  // closed room
}

TEST(GenerateScene, DistinctSeedsGiveDistinctLayouts) {
  int collisions = 0;
  auto base = pfr::generate_scene(small_spec(100, 10));
  for (uint64_t s = 101; s < 120; ++s) {
    auto g = pfr::generate_scene(small_spec(s, 10));
    bool same = g.boxes.size() == base.boxes.size();
    if (same)
      for (size_t i = 0; i < g.boxes.size(); ++i)
        same &= std::abs(g.boxes[i].box.lo.x - base.boxes[i].box.lo.x) < 1e-6f;
    collisions += same ? 1 : 0;
  }
  EXPECT_EQ(collisions, 0);
}

TEST(Raycast, WallAtKnownDistance) {
  auto spec = small_spec(5, 10);
  spec.n_boxes_min = spec.n_boxes_max = 0;
  auto geom = pfr::generate_scene(spec);
  // camera on the z axis at height 1.5 looking straight at the +z wall (z=2)
  auto cam = pfr::synth::look_at({0, 1.5f, 0}, {0, 1.5f, 2}, 64);
  pfr::Image rgb;
  std::vector<float> depth;
  std::vector<uint8_t> validity;
  pfr::raycast_frame(geom, cam, rgb, depth, validity);
  EXPECT_NEAR(depth[32 * 64 + 32], 2.0f, 1e-5f);
  for (uint8_t v : validity) EXPECT_EQ(v, 1);
}

TEST(Raycast, BackprojectReprojectRoundTrip) {
  auto geom = pfr::generate_scene(small_spec(11, 12));
  auto sample = pfr::render_scene(geom);
  const auto& f = sample.frames[5];
  const int W = f.cam.width;
  double worst = 0;
  for (int py = 0; py < f.cam.height; ++py)
    for (int px = 0; px < W; ++px) {
      size_t p = static_cast<size_t>(py) * W + px;
      if (!f.validity[p]) continue;
      double z = f.depth[p];
      double x = (px + 0.5 - f.cam.cx) / f.cam.fx * z;
      double y = (py + 0.5 - f.cam.cy) / f.cam.fy * z;
      double u = f.cam.fx * x / z + f.cam.cx;
      double v = f.cam.fy * y / z + f.cam.cy;
      worst = std::max({worst, std::abs(u - (px + 0.5)), std::abs(v - (py + 0.5))});
    }
  EXPECT_LT(worst, 1e-5);
}

TEST(Pointmaps, CanonicalFrameIsOwnBackprojection) {
  auto geom = pfr::generate_scene(small_spec(13, 10));
  auto sample = pfr::render_scene(geom);
  const auto& f0 = sample.frames[0];
  auto pm = pfr::build_pointmap(f0, f0.cam);
  const int W = f0.cam.width;
  for (int py = 0; py < f0.cam.height; ++py)
    for (int px = 0; px < W; ++px) {
      size_t p = static_cast<size_t>(py) * W + px;
      if (!f0.validity[p]) continue;
      float z = f0.depth[p];
      EXPECT_NEAR(pm[p * 3 + 0], (px + 0.5f - f0.cam.cx) / f0.cam.fx * z, 1e-4f);
      EXPECT_NEAR(pm[p * 3 + 2], z, 1e-5f);
    }
}

TEST(Pointmaps, CovisiblePointsAgreeAcrossFrames) {
  auto geom = pfr::generate_scene(small_spec(17, 12));
  auto sample = pfr::render_scene(geom);
  const auto& fa = sample.frames[3];
  const auto& fb = sample.frames[4];
  auto pm_a = pfr::build_pointmap(fa, sample.frames[0].cam);
  pfr::Pose<float> a2w = fa.cam.pose.inverse();
  pfr::Pose<float> b2w = fb.cam.pose.inverse();
  pfr::Pose<float> to_canon = sample.frames[0].cam.pose;
  pfr::Vec3<float> b_origin = fb.cam.pose.camera_center();
  const int W = fa.cam.width;
  int checked = 0;
  double worst = 0;
  for (int py = 2; py < fa.cam.height - 2; py += 3)
    for (int px = 2; px < W - 2; px += 3) {
      size_t p = static_cast<size_t>(py) * W + px;
      if (!fa.validity[p]) continue;
      float z = fa.depth[p];
      pfr::Vec3<float> pc{(px + 0.5f - fa.cam.cx) / fa.cam.fx * z,
                          (py + 0.5f - fa.cam.cy) / fa.cam.fy * z, z};
      pfr::Vec3<float> pw = a2w.apply(pc);
      // cast frame b's ray through the continuous reprojection of pw
      pfr::Vec3<float> pb = fb.cam.pose.apply(pw);
      if (pb.z <= fb.cam.near) continue;
      pfr::Vec3<float> dir = (b2w.R * pfr::Vec3<float>{pb.x / pb.z, pb.y / pb.z, 1.0f}).normalized();
      auto best = pfr::synth::ray_room(b_origin, dir, geom.room_box);
      for (const auto& b : geom.boxes) {
        auto h = pfr::synth::ray_box(b_origin, dir, b);
        if (h.ok && (!best.ok || h.t < best.t)) best = h;
      }
      if (!best.ok) continue;
      // occluded points see a different surface; keep unoccluded ones
      if ((best.point - pw).norm() > 1e-3f) continue;
      pfr::Vec3<float> xa{pm_a[p * 3], pm_a[p * 3 + 1], pm_a[p * 3 + 2]};
      pfr::Vec3<float> xb = to_canon.apply(best.point);
      worst = std::max(worst, static_cast<double>((xa - xb).norm()));
      ++checked;
    }
  EXPECT_GT(checked, 50);
  EXPECT_LT(worst, 1e-4);
}

TEST(Pointmaps, TranslationInducesExactRigidMap) {
  auto geom = pfr::generate_scene(small_spec(19, 10));
  auto sample = pfr::render_scene(geom);
  pfr::Frame f = sample.frames[2];
  const pfr::Camera canon = sample.frames[0].cam;
  auto pm = pfr::build_pointmap(f, canon);
  pfr::Vec3<float> delta{0.21f, -0.05f, 0.3f};
  pfr::Frame f2 = f;
  f2.cam.pose.t += delta;
  auto pm2 = pfr::build_pointmap(f2, canon);
  // x' = C((P')^{-1} bp) = C(P^{-1}(bp - delta))
  pfr::Pose<float> expect_map = canon.pose.compose(f.cam.pose.inverse());
  const int W = f.cam.width;
  for (size_t p = 0; p < f.depth.size(); p += 7) {
    if (!f.validity[p]) continue;
    int px = static_cast<int>(p) % W, py = static_cast<int>(p) / W;
    float z = f.depth[p];
    pfr::Vec3<float> bp{(px + 0.5f - f.cam.cx) / f.cam.fx * z, (py + 0.5f - f.cam.cy) / f.cam.fy * z,
                        z};
    auto expect = expect_map.apply(bp - delta);
    EXPECT_NEAR(pm2[p * 3 + 0], expect.x, 1e-5f);
    EXPECT_NEAR(pm2[p * 3 + 1], expect.y, 1e-5f);
    EXPECT_NEAR(pm2[p * 3 + 2], expect.z, 1e-5f);
  }
}

TEST(Overlap, AdjacentFramesExceedBound) {
  auto geom = pfr::generate_scene(small_spec(23, 15));
  auto sample = pfr::render_scene(geom);
  for (size_t i = 0; i + 1 < sample.frames.size(); ++i)
    EXPECT_GE(pfr::covisibility(sample.frames[i], sample.frames[i + 1]), 0.6);
}

TEST(Dataset, RoundTripAndLayout) {
  auto dir = (fs::temp_directory_path() / "pfr_ds_test").string();
  fs::remove_all(dir);
  std::vector<pfr::SceneSpec> specs = {small_spec(31, 8), small_spec(32, 8), small_spec(33, 8)};
  pfr::write_dataset(specs, dir);
  auto dirs = pfr::list_scene_dirs(dir);
  ASSERT_EQ(dirs.size(), 3u);
  EXPECT_NE(dirs[0].find("scene_0000"), std::string::npos);

  auto geom = pfr::generate_scene(specs[1]);
  auto expect = pfr::render_scene(geom);
  auto got = pfr::load_scene(dirs[1]);
  ASSERT_EQ(got.frames.size(), expect.frames.size());
  // depth stored as raw f32: exact
  EXPECT_EQ(got.frames[3].depth, expect.frames[3].depth);
  // rgb within 8-bit quantization
  float worst = 0;
  for (size_t i = 0; i < got.frames[3].rgb.rgb.size(); ++i)
    worst = std::max(worst, std::abs(got.frames[3].rgb.rgb[i] - expect.frames[3].rgb.rgb[i]));
  EXPECT_LE(worst, 0.5f / 255.0f + 1e-6f);
  // poses survive the JSON round trip
  EXPECT_NEAR(got.frames[3].cam.pose.t.x, expect.frames[3].cam.pose.t.x, 1e-6f);
  // spec.json parses back
  auto spec2 = pfr::SceneSpec::from_json(pfr::load_json_file(dirs[1] + "/spec.json"));
  EXPECT_EQ(spec2.seed, specs[1].seed);
  fs::remove_all(dir);
}

TEST(Dataset, GeometricConsistencyOfLoadedScenes) {
  auto dir = (fs::temp_directory_path() / "pfr_ds_consist").string();
  fs::remove_all(dir);
  pfr::write_dataset({small_spec(41, 8)}, dir);
  auto sample = pfr::load_scene(dir + "/scene_0000");
  // load-time validation: back-projecting depth through the camera and into
  // frame-1 coordinates must reproduce the canonical pointmap
  const auto& canon = sample.frames[0].cam;
  for (const auto& f : sample.frames) {
    auto pm = pfr::build_pointmap(f, canon);
    pfr::Pose<float> to_canon = canon.pose.compose(f.cam.pose.inverse());
    for (size_t p = 0; p < f.depth.size(); p += 11) {
      if (!f.validity[p]) continue;
      int px = static_cast<int>(p) % f.cam.width, py = static_cast<int>(p) / f.cam.width;
      float z = f.depth[p];
      pfr::Vec3<float> bp{(px + 0.5f - f.cam.cx) / f.cam.fx * z,
                          (py + 0.5f - f.cam.cy) / f.cam.fy * z, z};
      auto expect = to_canon.apply(bp);
      EXPECT_NEAR(pm[p * 3 + 0], expect.x, 1e-5f);
      EXPECT_NEAR(pm[p * 3 + 1], expect.y, 1e-5f);
      EXPECT_NEAR(pm[p * 3 + 2], expect.z, 1e-5f);
    }
  }
  fs::remove_all(dir);
}

TEST(Dataset, TruncatedDepthFileReportsOffset) {
  auto dir = (fs::temp_directory_path() / "pfr_ds_trunc").string();
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::vector<float> depth(16, 1.0f);
  pfr::write_depth_f32(depth, 4, 4, dir + "/d.f32");
  auto buf = [&] {
    std::ifstream f(dir + "/d.f32", std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  }();
  std::ofstream(dir + "/d.f32", std::ios::binary) << buf.substr(0, buf.size() - 7);
  int w, h;
  try {
    pfr::read_depth_f32(dir + "/d.f32", w, h);
    FAIL() << "expected FormatError";
  } catch (const pfr::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Png, QuantizationRoundTrip) {
  pfr::Image img;
  img.width = img.height = 9;
  img.rgb.resize(9 * 9 * 3);
  pfr::Rng rng(55);
  for (auto& v : img.rgb) v = static_cast<float>(rng.uniform());
  auto path = (fs::temp_directory_path() / "pfr_png_test.png").string();
  pfr::save_png(img, path);
  auto r = pfr::load_png(path);
  ASSERT_EQ(r.width, 9);
  float worst = 0;
  for (size_t i = 0; i < img.rgb.size(); ++i) worst = std::max(worst, std::abs(r.rgb[i] - img.rgb[i]));
  EXPECT_LE(worst, 0.5f / 255.0f + 1e-6f);
  fs::remove(path);
}

}  // namespace

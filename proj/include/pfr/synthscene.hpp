#pragma once

// Procedural indoor scenes with ray-cast ground truth: a textured room box,
// a handful of interior boxes, and a smooth camera path with validated
// frame-to-frame co-visibility. Every pixel gets exact depth, and canonical
// pointmaps follow from depth + poses.

#include <filesystem>
#include <optional>
#include <vector>

#include "pfr/camera.hpp"
#include "pfr/common.hpp"
#include "pfr/geom.hpp"
#include "pfr/image_io.hpp"

namespace pfr {

struct SceneSpec {
  uint64_t seed = 1;
  Vec3<float> room{4.0f, 3.0f, 4.0f};  // extents; floor at y=0
  int n_boxes_min = 3, n_boxes_max = 6;
  int frames = 60;
  int res = 64;
  float min_overlap = 0.6f;

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"room", {room.x, room.y, room.z}},
            {"n_boxes_min", n_boxes_min},
            {"n_boxes_max", n_boxes_max},
            {"frames", frames},
            {"res", res},
            {"min_overlap", min_overlap}};
  }
  static SceneSpec from_json(const nlohmann::json& j) {
    SceneSpec s;
    s.seed = j.at("seed").get<uint64_t>();
    s.room = {j.at("room")[0], j.at("room")[1], j.at("room")[2]};
    s.n_boxes_min = j.at("n_boxes_min");
    s.n_boxes_max = j.at("n_boxes_max");
    s.frames = j.at("frames");
    s.res = j.at("res");
    s.min_overlap = j.at("min_overlap");
    return s;
  }
};

struct Frame {
  Image rgb;
  std::vector<float> depth;  // H*W camera-z, 0 where invalid
  std::vector<uint8_t> validity;
  Camera cam;
};

struct SceneSample {
  std::vector<Frame> frames;
};

namespace synth {

enum class TexKind { Checker, Noise };

struct FaceTexture {
  TexKind kind;
  Vec3<float> base, alt;
  float cell = 0.5f;   // checker cell size / noise feature scale
  uint64_t salt = 0;   // decorrelates noise between faces
};

struct Box {
  Aabb<float> box;
  FaceTexture faces[6];  // -x,+x,-y,+y,-z,+z
};

inline uint64_t hash_u64(uint64_t x) {
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdull;
  x ^= x >> 33;
  x *= 0xc4ceb9fe1a85ec53ull;
  x ^= x >> 33;
  return x;
}

inline float hash_to_unit(uint64_t x) {
  return static_cast<float>(hash_u64(x) >> 40) / static_cast<float>(1 << 24);
}

// 2-D value noise with bilinear interpolation, two octaves.
inline float value_noise(float u, float v, uint64_t salt) {
  auto lattice = [salt](int64_t iu, int64_t iv, uint64_t octave) {
    return hash_to_unit(hash_u64(static_cast<uint64_t>(iu) * 0x9e3779b9u + octave * 1013904223u) ^
                        hash_u64(static_cast<uint64_t>(iv) + salt));
  };
  float out = 0, amp = 0.65f, freq = 1.0f;
  for (uint64_t oct = 0; oct < 2; ++oct) {
    float su = u * freq, sv = v * freq;
    int64_t iu = static_cast<int64_t>(std::floor(su)), iv = static_cast<int64_t>(std::floor(sv));
    float fu = su - static_cast<float>(iu), fv = sv - static_cast<float>(iv);
    fu = fu * fu * (3 - 2 * fu);
    fv = fv * fv * (3 - 2 * fv);
    float n00 = lattice(iu, iv, oct), n10 = lattice(iu + 1, iv, oct);
    float n01 = lattice(iu, iv + 1, oct), n11 = lattice(iu + 1, iv + 1, oct);
    out += amp * (n00 * (1 - fu) * (1 - fv) + n10 * fu * (1 - fv) + n01 * (1 - fu) * fv +
                  n11 * fu * fv);
    amp *= 0.35f;
    freq *= 3.1f;
  }
  return std::min(1.0f, out);
}

struct SceneGeometry {
  SceneSpec spec;
  Aabb<float> room;
  std::vector<Box> boxes;
  Box room_box;  // textures for the 6 inner wall faces
  std::vector<Camera> trajectory;
};

struct Hit {
  bool ok = false;
  float t = 0;
  Vec3<float> point, normal;
  const FaceTexture* tex = nullptr;
  float u = 0, v = 0;  // in-plane world coordinates for texturing
};

// face index for an axis and direction: 0:-x 1:+x 2:-y 3:+y 4:-z 5:+z
inline void face_uv(int face, const Vec3<float>& p, float& u, float& v) {
  switch (face / 2) {
    case 0: u = p.y; v = p.z; break;
    case 1: u = p.x; v = p.z; break;
    default: u = p.x; v = p.y; break;
  }
}

// Ray vs solid AABB from outside (first entry hit).
inline Hit ray_box(const Vec3<float>& o, const Vec3<float>& d, const Box& b) {
  float t0 = 0, t1 = 1e30f;
  int axis_in = -1;
  for (int a = 0; a < 3; ++a) {
    float lo = a == 0 ? b.box.lo.x : a == 1 ? b.box.lo.y : b.box.lo.z;
    float hi = a == 0 ? b.box.hi.x : a == 1 ? b.box.hi.y : b.box.hi.z;
    float ro = a == 0 ? o.x : a == 1 ? o.y : o.z;
    float rd = a == 0 ? d.x : a == 1 ? d.y : d.z;
    if (std::abs(rd) < 1e-12f) {
      if (ro < lo || ro > hi) return {};
      continue;
    }
    float ta = (lo - ro) / rd, tb = (hi - ro) / rd;
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      axis_in = a;
    }
    t1 = std::min(t1, tb);
    if (t0 > t1) return {};
  }
  if (axis_in < 0 || t0 <= 1e-5f) return {};  // origin inside or degenerate
  Hit h;
  h.ok = true;
  h.t = t0;
  h.point = o + d * t0;
  float rd = axis_in == 0 ? d.x : axis_in == 1 ? d.y : d.z;
  int face = axis_in * 2 + (rd > 0 ? 0 : 1);
  h.normal = {0, 0, 0};
  (axis_in == 0 ? h.normal.x : axis_in == 1 ? h.normal.y : h.normal.z) = rd > 0 ? -1.0f : 1.0f;
  h.tex = &b.faces[face];
  face_uv(face, h.point, h.u, h.v);
  return h;
}

// Ray vs room interior (exit face of the enclosing box, hit from inside).
inline Hit ray_room(const Vec3<float>& o, const Vec3<float>& d, const Box& b) {
  float t1 = 1e30f;
  int axis_out = -1;
  for (int a = 0; a < 3; ++a) {
    float lo = a == 0 ? b.box.lo.x : a == 1 ? b.box.lo.y : b.box.lo.z;
    float hi = a == 0 ? b.box.hi.x : a == 1 ? b.box.hi.y : b.box.hi.z;
    float ro = a == 0 ? o.x : a == 1 ? o.y : o.z;
    float rd = a == 0 ? d.x : a == 1 ? d.y : d.z;
    if (std::abs(rd) < 1e-12f) continue;
    float ta = (lo - ro) / rd, tb = (hi - ro) / rd;
    if (ta > tb) std::swap(ta, tb);
    if (tb < t1) {
      t1 = tb;
      axis_out = a;
    }
  }
  if (axis_out < 0 || t1 <= 0) return {};
  Hit h;
  h.ok = true;
  h.t = t1;
  h.point = o + d * t1;
  float rd = axis_out == 0 ? d.x : axis_out == 1 ? d.y : d.z;
  int face = axis_out * 2 + (rd > 0 ? 1 : 0);
  h.normal = {0, 0, 0};
  (axis_out == 0 ? h.normal.x : axis_out == 1 ? h.normal.y : h.normal.z) = rd > 0 ? -1.0f : 1.0f;
  h.tex = &b.faces[face];
  face_uv(face, h.point, h.u, h.v);
  return h;
}

inline Vec3<float> shade(const Hit& h, const Vec3<float>& ray_dir) {
  float tex;
  if (h.tex->kind == TexKind::Checker) {
    int64_t cu = static_cast<int64_t>(std::floor(h.u / h.tex->cell));
    int64_t cv = static_cast<int64_t>(std::floor(h.v / h.tex->cell));
    tex = ((cu + cv) & 1) ? 1.0f : 0.0f;
  } else {
    tex = value_noise(h.u / h.tex->cell, h.v / h.tex->cell, h.tex->salt);
  }
  Vec3<float> albedo = h.tex->base * (1 - tex) + h.tex->alt * tex;
  float lambert = std::max(0.0f, -h.normal.dot(ray_dir));
  return albedo * lambert;
}

inline Vec3<float> catmull_rom(const std::vector<Vec3<float>>& pts, float u) {
  const int n = static_cast<int>(pts.size());
  u = std::min(std::max(u, 0.0f), static_cast<float>(n - 1) - 1e-4f);
  int i = static_cast<int>(u);
  float s = u - static_cast<float>(i);
  auto P = [&](int k) { return pts[static_cast<size_t>(std::min(std::max(k, 0), n - 1))]; };
  Vec3<float> p0 = P(i - 1), p1 = P(i), p2 = P(i + 1), p3 = P(i + 2);
  return (p1 * 2.0f + (p2 - p0) * s + (p0 * 2.0f - p1 * 5.0f + p2 * 4.0f - p3) * (s * s) +
          ((p1 - p2) * 3.0f + p3 - p0) * (s * s * s)) *
         0.5f;
}

inline Camera look_at(const Vec3<float>& eye, const Vec3<float>& target, int res) {
  Camera cam;
  cam.width = cam.height = res;
  cam.fx = cam.fy = static_cast<float>(res);
  cam.cx = cam.cy = static_cast<float>(res) / 2;
  Vec3<float> fwd = (target - eye).normalized();
  Vec3<float> up{0, 1, 0};
  Vec3<float> xc = fwd.cross(up).normalized();
  if (xc.norm() < 0.5f) xc = {1, 0, 0};
  Vec3<float> yc = fwd.cross(xc);  // points "down" in a right-handed frame
  // rows of world-to-camera rotation are the camera axes
  cam.pose.R.m = {xc.x, xc.y, xc.z, yc.x, yc.y, yc.z, fwd.x, fwd.y, fwd.z};
  if (cam.pose.R.det() < 0) {
    // flip x to keep det = +1
    cam.pose.R.m[0] = -xc.x;
    cam.pose.R.m[1] = -xc.y;
    cam.pose.R.m[2] = -xc.z;
  }
  cam.pose.t = (cam.pose.R * eye) * -1.0f;
  return cam;
}

}  // namespace synth

// ---------------------------------------------------------------------------

inline synth::FaceTexture random_texture(Rng& rng, uint64_t salt) {
  synth::FaceTexture t;
  t.kind = rng.uniform() < 0.5 ? synth::TexKind::Checker : synth::TexKind::Noise;
  auto col = [&rng] {
    return Vec3<float>{static_cast<float>(rng.uniform(0.15, 0.9)),
                       static_cast<float>(rng.uniform(0.15, 0.9)),
                       static_cast<float>(rng.uniform(0.15, 0.9))};
  };
  t.base = col();
  t.alt = (t.base + col()) * 0.5f;  // moderate contrast
  t.cell = static_cast<float>(rng.uniform(0.35, 0.9));
  t.salt = salt;
  return t;
}

inline void raycast_frame(const synth::SceneGeometry& geom, const Camera& cam, Image& rgb,
                          std::vector<float>& depth, std::vector<uint8_t>& validity) {
  const int W = cam.width, H = cam.height;
  rgb.width = W;
  rgb.height = H;
  rgb.rgb.assign(static_cast<size_t>(H) * W * 3, 0.0f);
  depth.assign(static_cast<size_t>(H) * W, 0.0f);
  validity.assign(static_cast<size_t>(H) * W, 0);
  Pose<float> c2w = cam.pose.inverse();
  Vec3<float> origin = cam.pose.camera_center();
#pragma omp parallel for schedule(static)
  for (int py = 0; py < H; ++py) {
    for (int px = 0; px < W; ++px) {
      Vec3<float> dir_cam{(static_cast<float>(px) + 0.5f - cam.cx) / cam.fx,
                          (static_cast<float>(py) + 0.5f - cam.cy) / cam.fy, 1.0f};
      Vec3<float> dir = (c2w.R * dir_cam).normalized();
      synth::Hit best = synth::ray_room(origin, dir, geom.room_box);
      for (const auto& b : geom.boxes) {
        auto h = synth::ray_box(origin, dir, b);
        if (h.ok && (!best.ok || h.t < best.t)) best = h;
      }
      const size_t p = static_cast<size_t>(py) * W + px;
      if (!best.ok) continue;  // cannot happen inside a closed room; kept for generality
      Vec3<float> c = synth::shade(best, dir);
      rgb.rgb[p * 3 + 0] = c.x;
      rgb.rgb[p * 3 + 1] = c.y;
      rgb.rgb[p * 3 + 2] = c.z;
      depth[p] = cam.pose.apply(best.point).z;
      validity[p] = 1;
    }
  }
}

// X_t(p) = T_canon_w2c * T_t_c2w * backproject(p, depth_t). The canonical
// frame is the camera of frames[canonical_index].
inline std::vector<float> build_pointmap(const Frame& frame, const Camera& canonical_cam) {
  const int W = frame.cam.width, H = frame.cam.height;
  Pose<float> to_canon = canonical_cam.pose.compose(frame.cam.pose.inverse());
  std::vector<float> pm(static_cast<size_t>(H) * W * 3, 0.0f);
  for (int py = 0; py < H; ++py)
    for (int px = 0; px < W; ++px) {
      const size_t p = static_cast<size_t>(py) * W + px;
      if (!frame.validity[p]) continue;
      float z = frame.depth[p];
      Vec3<float> pc{(static_cast<float>(px) + 0.5f - frame.cam.cx) / frame.cam.fx * z,
                     (static_cast<float>(py) + 0.5f - frame.cam.cy) / frame.cam.fy * z, z};
      Vec3<float> x = to_canon.apply(pc);
      pm[p * 3 + 0] = x.x;
      pm[p * 3 + 1] = x.y;
      pm[p * 3 + 2] = x.z;
    }
  return pm;
}

// Fraction of frame a's valid pixels whose 3D points are visible in frame b.
inline double covisibility(const Frame& a, const Frame& b) {
  const int W = a.cam.width, H = a.cam.height;
  Pose<float> a2w = a.cam.pose.inverse();
  int64_t total = 0, vis = 0;
  for (int py = 0; py < H; ++py)
    for (int px = 0; px < W; ++px) {
      const size_t p = static_cast<size_t>(py) * W + px;
      if (!a.validity[p]) continue;
      ++total;
      float z = a.depth[p];
      Vec3<float> pc{(static_cast<float>(px) + 0.5f - a.cam.cx) / a.cam.fx * z,
                     (static_cast<float>(py) + 0.5f - a.cam.cy) / a.cam.fy * z, z};
      Vec3<float> pw = a2w.apply(pc);
      Vec3<float> pb = b.cam.pose.apply(pw);
      if (pb.z <= b.cam.near) continue;
      float u = b.cam.fx * pb.x / pb.z + b.cam.cx;
      float v = b.cam.fy * pb.y / pb.z + b.cam.cy;
      int bx = static_cast<int>(std::floor(u)), by = static_cast<int>(std::floor(v));
      if (bx < 0 || by < 0 || bx >= b.cam.width || by >= b.cam.height) continue;
      const size_t q = static_cast<size_t>(by) * b.cam.width + bx;
      if (!b.validity[q]) continue;
      if (std::abs(b.depth[q] - pb.z) < 0.02f * pb.z + 0.02f) ++vis;
    }
  return total ? static_cast<double>(vis) / static_cast<double>(total) : 0.0;
}

inline SceneSample render_scene(const synth::SceneGeometry& geom) {
  SceneSample sample;
  sample.frames.resize(geom.trajectory.size());
  for (size_t i = 0; i < geom.trajectory.size(); ++i) {
    Frame& f = sample.frames[i];
    f.cam = geom.trajectory[i];
    raycast_frame(geom, f.cam, f.rgb, f.depth, f.validity);
  }
  return sample;
}

// Deterministic geometry + trajectory from the spec seed. Retries the
// trajectory until every adjacent frame pair exceeds the overlap bound.
inline synth::SceneGeometry generate_scene(const SceneSpec& spec) {
  synth::SceneGeometry geom;
  geom.spec = spec;
  Rng rng(spec.seed);
  const Vec3<float> half{spec.room.x / 2, 0, spec.room.z / 2};
  geom.room.lo = {-half.x, 0, -half.z};
  geom.room.hi = {half.x, spec.room.y, half.z};
  geom.room_box.box = geom.room;
  for (int f = 0; f < 6; ++f) geom.room_box.faces[f] = random_texture(rng, spec.seed * 6 + f);

  const int n_boxes = static_cast<int>(rng.uniform_int(spec.n_boxes_min, spec.n_boxes_max));
  for (int i = 0; i < n_boxes; ++i) {
    synth::Box b;
    float sx = static_cast<float>(rng.uniform(0.3, 1.0));
    float sy = static_cast<float>(rng.uniform(0.3, 1.2));
    float sz = static_cast<float>(rng.uniform(0.3, 1.0));
    float cx = static_cast<float>(rng.uniform(-half.x + 0.3 + sx / 2, half.x - 0.3 - sx / 2));
    float cz = static_cast<float>(rng.uniform(-half.z + 0.3 + sz / 2, half.z - 0.3 - sz / 2));
    b.box.lo = {cx - sx / 2, 0, cz - sz / 2};
    b.box.hi = {cx + sx / 2, sy, cz + sz / 2};
    for (int f = 0; f < 6; ++f)
      b.faces[f] = random_texture(rng, spec.seed * 131 + static_cast<uint64_t>(i) * 7 + f);
    geom.boxes.push_back(b);
  }

  // Camera path above the boxes, looking into the room. The waypoint spread
  // scales with the frame count so per-frame motion stays small, and shrinks
  // on every retry until the overlap bound is met.
  for (int attempt = 0; attempt < 100; ++attempt) {
    Rng trng = rng.fork(static_cast<uint64_t>(attempt) + 1000);
    const float shrink = std::pow(0.8f, static_cast<float>(attempt));
    const float r_eye = std::min(1.1f, 0.035f * static_cast<float>(spec.frames)) * shrink;
    const float r_tgt = std::min(0.9f, 0.03f * static_cast<float>(spec.frames)) * shrink;
    const Vec3<float> eye_c{static_cast<float>(trng.uniform(-half.x + 0.6 + r_eye, half.x - 0.6 - r_eye)),
                            static_cast<float>(trng.uniform(1.5, spec.room.y - 0.5)),
                            static_cast<float>(trng.uniform(-half.z + 0.6 + r_eye, half.z - 0.6 - r_eye))};
    const Vec3<float> tgt_c{static_cast<float>(trng.uniform(-half.x * 0.4, half.x * 0.4)),
                            static_cast<float>(trng.uniform(0.3, 1.0)),
                            static_cast<float>(trng.uniform(-half.z * 0.4, half.z * 0.4))};
    const int n_way = 4 + static_cast<int>(trng.uniform_int(0, 2));
    std::vector<Vec3<float>> eyes, targets;
    for (int i = 0; i < n_way; ++i) {
      eyes.push_back(eye_c + Vec3<float>{static_cast<float>(trng.uniform(-r_eye, r_eye)),
                                         static_cast<float>(trng.uniform(-0.2, 0.2)) * shrink,
                                         static_cast<float>(trng.uniform(-r_eye, r_eye))});
      targets.push_back(tgt_c + Vec3<float>{static_cast<float>(trng.uniform(-r_tgt, r_tgt)),
                                            static_cast<float>(trng.uniform(-0.3, 0.3)) * shrink,
                                            static_cast<float>(trng.uniform(-r_tgt, r_tgt))});
    }
    geom.trajectory.clear();
    for (int t = 0; t < spec.frames; ++t) {
      float u = static_cast<float>(t) / static_cast<float>(spec.frames - 1) *
                static_cast<float>(n_way - 1);
      Vec3<float> eye = synth::catmull_rom(eyes, u);
      Vec3<float> target = synth::catmull_rom(targets, u);
      geom.trajectory.push_back(synth::look_at(eye, target, spec.res));
    }
    // validate co-visibility between consecutive frames
    auto sample = render_scene(geom);
    bool ok = true;
    for (size_t i = 0; i + 1 < sample.frames.size() && ok; ++i)
      if (covisibility(sample.frames[i], sample.frames[i + 1]) < spec.min_overlap) ok = false;
    if (ok) return geom;
  }
  throw ValueError(strfmt("generate_scene: overlap constraint unsatisfiable after 100 retries (seed %llu)",
                          static_cast<unsigned long long>(spec.seed)));
}

// ---------------------------------------------------------------------------
// dataset persistence
// DIR/scene_%04d/frames/%05d.png, depth/%05d.f32, cameras.json, spec.json

inline void write_depth_f32(const std::vector<float>& depth, int w, int h,
                            const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IOError("cannot open for write: " + path);
  f.write("DPTH", 4);
  uint32_t wh[3] = {static_cast<uint32_t>(w), static_cast<uint32_t>(h), 0};
  f.write(reinterpret_cast<const char*>(wh), 12);
  f.write(reinterpret_cast<const char*>(depth.data()),
          static_cast<std::streamsize>(depth.size() * 4));
}

inline std::vector<float> read_depth_f32(const std::string& path, int& w, int& h) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open depth file: " + path);
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::string(magic, 4) != "DPTH")
    throw FormatError("bad depth magic at byte 0 in " + path);
  uint32_t wh[3];
  f.read(reinterpret_cast<char*>(wh), 12);
  if (f.gcount() != 12) throw FormatError("depth header truncated at byte 4 in " + path);
  w = static_cast<int>(wh[0]);
  h = static_cast<int>(wh[1]);
  std::vector<float> depth(static_cast<size_t>(w) * h);
  f.read(reinterpret_cast<char*>(depth.data()), static_cast<std::streamsize>(depth.size() * 4));
  if (f.gcount() != static_cast<std::streamsize>(depth.size() * 4))
    throw FormatError(strfmt("depth payload truncated at byte %lld in %s",
                             16ll + f.gcount(), path.c_str()));
  return depth;
}

inline void write_scene(const SceneSample& sample, const SceneSpec& spec,
                        const std::string& scene_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(scene_dir + "/frames");
  fs::create_directories(scene_dir + "/depth");
  nlohmann::json cams = nlohmann::json::array();
  for (size_t i = 0; i < sample.frames.size(); ++i) {
    const Frame& f = sample.frames[i];
    save_png(f.rgb, strfmt("%s/frames/%05zu.png", scene_dir.c_str(), i));
    write_depth_f32(f.depth, f.cam.width, f.cam.height,
                    strfmt("%s/depth/%05zu.f32", scene_dir.c_str(), i));
    cams.push_back({{"pose", pose_to_json(f.cam.pose)}, {"intrinsics", intrinsics_to_json(f.cam)}});
  }
  save_json_file(cams, scene_dir + "/cameras.json");
  save_json_file(spec.to_json(), scene_dir + "/spec.json");
}

inline SceneSample load_scene(const std::string& scene_dir) {
  auto cams = load_json_file(scene_dir + "/cameras.json");
  SceneSample sample;
  for (size_t i = 0; i < cams.size(); ++i) {
    Frame f;
    f.cam.pose = pose_from_json(cams[i].at("pose"));
    intrinsics_from_json(cams[i].at("intrinsics"), f.cam);
    f.rgb = load_png(strfmt("%s/frames/%05zu.png", scene_dir.c_str(), i));
    int w = 0, h = 0;
    f.depth = read_depth_f32(strfmt("%s/depth/%05zu.f32", scene_dir.c_str(), i), w, h);
    if (w != f.rgb.width || h != f.rgb.height)
      throw FormatError("depth/rgb size mismatch in " + scene_dir);
    f.cam.width = w;
    f.cam.height = h;
    f.validity.assign(f.depth.size(), 0);
    for (size_t p = 0; p < f.depth.size(); ++p) f.validity[p] = f.depth[p] > 0 ? 1 : 0;
    sample.frames.push_back(std::move(f));
  }
  return sample;
}

inline void write_dataset(const std::vector<SceneSpec>& specs, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (size_t i = 0; i < specs.size(); ++i) {
    auto geom = generate_scene(specs[i]);
    auto sample = render_scene(geom);
    write_scene(sample, specs[i], strfmt("%s/scene_%04zu", dir.c_str(), i));
  }
}

inline std::vector<std::string> list_scene_dirs(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> out;
  if (!fs::exists(dir)) throw IOError("dataset directory does not exist: " + dir);
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && e.path().filename().string().rfind("scene_", 0) == 0)
      out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace pfr

#pragma once

// Gaussian primitive parameterization, activation from raw head outputs,
// confidence pruning, global accumulation, SH color evaluation, and PLY
// persistence in the de-facto splatting-tool layout.

#include <array>
#include <cstring>
#include <fstream>
#include <vector>

#include "json.hpp"
#include "pfr/camera.hpp"
#include "pfr/geom.hpp"

namespace pfr {

constexpr float kScaleMin = 1e-4f;  // scene units
constexpr float kScaleMax = 0.5f;

// One pixel-aligned Gaussian in the canonical frame. Scale and opacity are
// stored in their pre-activation spaces (log scale, opacity logit) so the
// PLY layout round-trips bit-exactly; accessors give the activated values.
struct GaussianPrimitive {
  Vec3<float> mu;
  Vec3<float> log_scale;
  std::array<float, 4> rot{1, 0, 0, 0};  // unit quaternion (w,x,y,z)
  float opacity_logit = 0;
  std::vector<float> sh;  // 3*(d+1)^2, channel-major: sh[c*K + k]
  float confidence = 1;
  int source_frame = 0;

  float opacity() const { return 1.0f / (1.0f + std::exp(-opacity_logit)); }
  Vec3<float> scale() const {
    return {std::exp(log_scale.x), std::exp(log_scale.y), std::exp(log_scale.z)};
  }
};

struct GaussianField {
  std::vector<GaussianPrimitive> primitives;
  int canonical_frame = 0;
  int sh_degree = 1;

  int sh_coeffs() const { return (sh_degree + 1) * (sh_degree + 1); }
};

// Raw head outputs per pixel: 3 log-scale, 4 quaternion, 1 opacity logit,
// 3*(d+1)^2 SH, channel-major. Means come from the pointmap.
inline std::vector<GaussianPrimitive> activate(const std::vector<float>& raw,
                                               const std::vector<float>& pointmap,
                                               const std::vector<float>& confidence, int height,
                                               int width, int sh_degree, int source_frame) {
  const int K = (sh_degree + 1) * (sh_degree + 1);
  const int gc = 8 + 3 * K;
  const size_t n = static_cast<size_t>(height) * width;
  if (raw.size() != n * gc || pointmap.size() != n * 3 || confidence.size() != n)
    throw ShapeError(strfmt("activate: inconsistent shapes for %dx%d, d=%d", height, width, sh_degree));
  std::vector<GaussianPrimitive> prims(n);
  for (size_t p = 0; p < n; ++p) {
    const float* r = raw.data() + p * gc;
    for (int c = 0; c < gc; ++c)
      if (!std::isfinite(r[c]))
        throw NumericError(strfmt("activate: non-finite raw value at pixel %zu channel %d", p, c));
    GaussianPrimitive& g = prims[p];
    g.mu = {pointmap[p * 3], pointmap[p * 3 + 1], pointmap[p * 3 + 2]};
    g.log_scale = {std::log(std::clamp(std::exp(r[0]), kScaleMin, kScaleMax)),
                   std::log(std::clamp(std::exp(r[1]), kScaleMin, kScaleMax)),
                   std::log(std::clamp(std::exp(r[2]), kScaleMin, kScaleMax))};
    float qn = std::sqrt(r[3] * r[3] + r[4] * r[4] + r[5] * r[5] + r[6] * r[6]);
    if (qn > 0)
      g.rot = {r[3] / qn, r[4] / qn, r[5] / qn, r[6] / qn};
    else
      g.rot = {1, 0, 0, 0};
    g.opacity_logit = r[7];
    g.sh.assign(r + 8, r + gc);
    g.confidence = confidence[p];
    g.source_frame = source_frame;
  }
  return prims;
}

// Retains primitives with confidence >= th_conf, order preserved.
inline GaussianField prune(const GaussianField& field, float th_conf) {
  if (th_conf < 0) throw ValueError("prune: th_conf must be >= 0");
  GaussianField out;
  out.canonical_frame = field.canonical_frame;
  out.sh_degree = field.sh_degree;
  for (const auto& g : field.primitives)
    if (g.confidence >= th_conf) out.primitives.push_back(g);
  return out;
}

inline void accumulate(GaussianField& global, std::vector<GaussianPrimitive> theta_t,
                       int canonical_frame) {
  if (!global.primitives.empty() && global.canonical_frame != canonical_frame)
    throw StateError(strfmt("accumulate: canonical frame mismatch (%d vs %d)",
                            global.canonical_frame, canonical_frame));
  global.canonical_frame = canonical_frame;
  global.primitives.insert(global.primitives.end(), std::make_move_iterator(theta_t.begin()),
                           std::make_move_iterator(theta_t.end()));
}

// Uniform metric rescale: means and extents scale together.
inline void scale_field(GaussianField& field, float s) {
  if (s <= 0) throw ValueError("scale_field: scale must be > 0");
  const float log_s = std::log(s);
  for (auto& g : field.primitives) {
    g.mu = g.mu * s;
    g.log_scale.x += log_s;
    g.log_scale.y += log_s;
    g.log_scale.z += log_s;
  }
}

// Mean norm of primitive means; the field-level scale estimate.
inline double field_scale(const GaussianField& field) {
  if (field.primitives.empty()) throw ValueError("field_scale: empty field");
  double s = 0;
  for (const auto& g : field.primitives) s += g.mu.norm();
  return s / static_cast<double>(field.primitives.size());
}

// Real SH basis values up to degree 3, in the splatting-tool ordering.
template <typename T>
inline void sh_basis(int degree, const Vec3<T>& d, T* out) {
  const T x = d.x, y = d.y, z = d.z;
  out[0] = T(0.28209479177387814);
  if (degree < 1) return;
  out[1] = T(-0.4886025119029199) * y;
  out[2] = T(0.4886025119029199) * z;
  out[3] = T(-0.4886025119029199) * x;
  if (degree < 2) return;
  out[4] = T(1.0925484305920792) * x * y;
  out[5] = T(-1.0925484305920792) * y * z;
  out[6] = T(0.31539156525252005) * (T(2) * z * z - x * x - y * y);
  out[7] = T(-1.0925484305920792) * x * z;
  out[8] = T(0.5462742152960396) * (x * x - y * y);
  if (degree < 3) return;
  out[9] = T(-0.5900435899266435) * y * (T(3) * x * x - y * y);
  out[10] = T(2.890611442640554) * x * y * z;
  out[11] = T(-0.4570457994644658) * y * (T(4) * z * z - x * x - y * y);
  out[12] = T(0.3731763325901154) * z * (T(2) * z * z - T(3) * x * x - T(3) * y * y);
  out[13] = T(-0.4570457994644658) * x * (T(4) * z * z - x * x - y * y);
  out[14] = T(1.445305721320277) * z * (x * x - y * y);
  out[15] = T(-0.5900435899266435) * x * (x * x - T(3) * y * y);
}

// rgb = clamp(sum_k c_k Y_k(dir) + 0.5, 0). sh is channel-major 3*(d+1)^2.
inline Vec3<float> sh_eval(const std::vector<float>& sh, int degree, const Vec3<float>& dir) {
  if (degree < 0 || degree > 3) throw ValueError("sh_eval: degree must be in 0..3");
  const int K = (degree + 1) * (degree + 1);
  if (static_cast<int>(sh.size()) != 3 * K)
    throw ShapeError(strfmt("sh_eval: expected %d coefficients, got %zu", 3 * K, sh.size()));
  if (std::abs(dir.norm() - 1.0f) > 1e-4f)
    throw ValueError(strfmt("sh_eval: direction norm %.6f not unit", dir.norm()));
  float basis[16];
  sh_basis(degree, dir, basis);
  Vec3<float> rgb;
  for (int c = 0; c < 3; ++c) {
    float v = 0;
    for (int k = 0; k < K; ++k) v += sh[static_cast<size_t>(c) * K + k] * basis[k];
    v += 0.5f;
    (c == 0 ? rgb.x : c == 1 ? rgb.y : rgb.z) = std::max(0.0f, v);
  }
  return rgb;
}

// ---------------------------------------------------------------------------
// PLY persistence: binary little-endian, one vertex per primitive with the
// property layout splat viewers expect. f_rest is channel-major (all R rest
// coefficients, then G, then B).

inline void export_ply(const GaussianField& field, const std::string& path) {
  const int K = field.sh_coeffs();
  std::string header = "ply\nformat binary_little_endian 1.0\n";
  header += strfmt("element vertex %zu\n", field.primitives.size());
  const char* base[] = {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"};
  for (const char* p : base) header += strfmt("property float %s\n", p);
  for (int i = 0; i < 3 * (K - 1); ++i) header += strfmt("property float f_rest_%d\n", i);
  header += "property float opacity\n";
  for (int i = 0; i < 3; ++i) header += strfmt("property float scale_%d\n", i);
  for (int i = 0; i < 4; ++i) header += strfmt("property float rot_%d\n", i);
  header += "end_header\n";

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IOError("cannot open for write: " + path);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<float> row(static_cast<size_t>(9 + 3 * (K - 1) + 8));
  for (const auto& g : field.primitives) {
    if (static_cast<int>(g.sh.size()) != 3 * K)
      throw ShapeError("export_ply: primitive SH size does not match field degree");
    size_t i = 0;
    row[i++] = g.mu.x;
    row[i++] = g.mu.y;
    row[i++] = g.mu.z;
    row[i++] = 0;  // normals
    row[i++] = 0;
    row[i++] = 0;
    for (int c = 0; c < 3; ++c) row[i++] = g.sh[static_cast<size_t>(c) * K];
    for (int c = 0; c < 3; ++c)
      for (int k = 1; k < K; ++k) row[i++] = g.sh[static_cast<size_t>(c) * K + k];
    row[i++] = g.opacity_logit;
    row[i++] = g.log_scale.x;
    row[i++] = g.log_scale.y;
    row[i++] = g.log_scale.z;
    row[i++] = g.rot[0];
    row[i++] = g.rot[1];
    row[i++] = g.rot[2];
    row[i++] = g.rot[3];
    f.write(reinterpret_cast<const char*>(row.data()),
            static_cast<std::streamsize>(row.size() * 4));
  }
  if (!f) throw IOError("short write: " + path);

  nlohmann::json meta = {{"canonical_frame", field.canonical_frame},
                         {"sh_degree", field.sh_degree},
                         {"count", field.primitives.size()}};
  save_json_file(meta, path + ".json");
}

inline GaussianField import_ply(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open PLY: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  auto fail = [&](size_t off, const std::string& what) {
    throw FormatError(strfmt("malformed PLY at byte %zu: %s", off, what.c_str()));
  };
  size_t pos = 0;
  auto next_line = [&]() -> std::string {
    size_t eol = buf.find('\n', pos);
    if (eol == std::string::npos) fail(pos, "unterminated header line");
    std::string line = buf.substr(pos, eol - pos);
    pos = eol + 1;
    return line;
  };
  if (next_line() != "ply") fail(0, "missing 'ply' magic");
  if (next_line() != "format binary_little_endian 1.0") fail(4, "unsupported format");
  size_t count = 0;
  std::vector<std::string> props;
  while (true) {
    size_t line_off = pos;
    std::string line = next_line();
    if (line == "end_header") break;
    if (line.rfind("element vertex ", 0) == 0) {
      count = static_cast<size_t>(std::stoull(line.substr(15)));
    } else if (line.rfind("property float ", 0) == 0) {
      props.push_back(line.substr(15));
    } else if (line.rfind("comment", 0) == 0 || line.rfind("element", 0) == 0) {
      // ignored
    } else {
      fail(line_off, "unrecognized header line '" + line + "'");
    }
  }
  int n_rest = 0;
  for (const auto& p : props)
    if (p.rfind("f_rest_", 0) == 0) ++n_rest;
  if (n_rest % 3 != 0) fail(pos, "f_rest count not divisible by 3");
  const int K = n_rest / 3 + 1;
  int degree = static_cast<int>(std::round(std::sqrt(static_cast<double>(K)))) - 1;
  if ((degree + 1) * (degree + 1) != K || degree > 3) fail(pos, "f_rest count is not a valid SH layout");
  const size_t row_floats = static_cast<size_t>(9 + n_rest + 8);
  if (props.size() != row_floats) fail(pos, strfmt("expected %zu properties, found %zu", row_floats, props.size()));
  if (pos + count * row_floats * 4 > buf.size())
    fail(buf.size(), strfmt("payload truncated: need %zu vertices", count));

  GaussianField field;
  field.sh_degree = degree;
  field.primitives.resize(count);
  const float* data = reinterpret_cast<const float*>(buf.data() + pos);
  for (size_t v = 0; v < count; ++v) {
    const float* r = data + v * row_floats;
    GaussianPrimitive& g = field.primitives[v];
    g.mu = {r[0], r[1], r[2]};
    g.sh.assign(static_cast<size_t>(3) * K, 0.0f);
    for (int c = 0; c < 3; ++c) g.sh[static_cast<size_t>(c) * K] = r[6 + c];
    for (int c = 0; c < 3; ++c)
      for (int k = 1; k < K; ++k) g.sh[static_cast<size_t>(c) * K + k] = r[9 + c * (K - 1) + (k - 1)];
    size_t i = 9 + static_cast<size_t>(n_rest);
    g.opacity_logit = r[i++];
    g.log_scale = {r[i], r[i + 1], r[i + 2]};
    i += 3;
    g.rot = {r[i], r[i + 1], r[i + 2], r[i + 3]};
  }

  std::ifstream meta_f(path + ".json");
  if (meta_f) {
    nlohmann::json meta;
    meta_f >> meta;
    field.canonical_frame = meta.value("canonical_frame", 0);
    if (meta.count("sh_degree") && meta["sh_degree"].get<int>() != degree)
      throw FormatError("PLY sidecar sh_degree disagrees with header layout");
  }
  return field;
}

}  // namespace pfr

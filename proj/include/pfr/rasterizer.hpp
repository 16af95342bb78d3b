#pragma once

// Differentiable splatting renderer: perspective projection, EWA covariance
// projection with a blur floor, depth-sorted front-to-back alpha compositing,
// and analytic gradients to means, scales, rotations, opacities and SH
// coefficients (including the view-direction path into the means).
//
// Per-pixel evaluation is exact; the row-block fast path only prunes
// primitives that the alpha skip threshold would discard anyway, so both
// paths produce identical images for skip_alpha > 0.

#include <algorithm>
#include <cmath>
#include <vector>

#include "pfr/camera.hpp"
#include "pfr/gaussians.hpp"
#include "pfr/tensor.hpp"

namespace pfr {

struct RenderOptions {
  float background[3] = {0, 0, 0};
  float alpha_clamp = 0.99f;
  float skip_alpha = 1.0f / 255.0f;  // contributions below are skipped; 0 disables
  float blur = 0.3f;                 // px^2 anti-aliasing floor on screen covariance
  bool tiled = true;                 // row-block binning (exact when skip_alpha > 0)

  static RenderOptions exact() {
    RenderOptions o;
    o.skip_alpha = 0.0f;
    o.tiled = false;
    return o;
  }
};

struct ProjectedPoint {
  float u = 0, v = 0, depth = 0;
  bool culled = false;
};

// x_cam = R*mu + t; (u,v) = (fx x/z + cx, fy y/z + cy). depth <= near culls.
inline ProjectedPoint project_point(const Vec3<float>& mu, const Camera& cam) {
  Vec3<float> p = cam.pose.apply(mu);
  ProjectedPoint out;
  out.depth = p.z;
  if (p.z <= cam.near) {
    out.culled = true;
    return out;
  }
  out.u = cam.fx * p.x / p.z + cam.cx;
  out.v = cam.fy * p.y / p.z + cam.cy;
  return out;
}

// Screen-space covariance J W Sigma3 W^T J^T + blur*I, symmetrized.
inline std::array<float, 3> project_covariance(const GaussianPrimitive& prim, const Camera& cam,
                                               float blur = 0.3f) {
  Vec3<float> p = cam.pose.apply(prim.mu);
  if (p.z <= cam.near) throw StateError("project_covariance: primitive is culled");
  Mat3<float> R = quat_to_rotmat(prim.rot[0], prim.rot[1], prim.rot[2], prim.rot[3]);
  Vec3<float> s = prim.scale();
  Mat3<float> S3;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      S3(i, j) = R(i, 0) * s.x * s.x * R(j, 0) + R(i, 1) * s.y * s.y * R(j, 1) +
                 R(i, 2) * s.z * s.z * R(j, 2);
  const float z = p.z;
  float J[2][3] = {{cam.fx / z, 0, -cam.fx * p.x / (z * z)},
                   {0, cam.fy / z, -cam.fy * p.y / (z * z)}};
  float M[2][3];
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c)
      M[r][c] = J[r][0] * cam.pose.R(0, c) + J[r][1] * cam.pose.R(1, c) + J[r][2] * cam.pose.R(2, c);
  auto quad = [&](const float* a, const float* b) {
    float acc = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) acc += a[i] * S3(i, j) * b[j];
    return acc;
  };
  return {quad(M[0], M[0]) + blur, quad(M[0], M[1]), quad(M[1], M[1]) + blur};
}

namespace raster {

// Structure-of-arrays view of the primitives entering one render.
template <typename T>
struct SplatSoA {
  int n = 0;
  int K = 1;  // SH coefficients per channel
  int degree = 0;
  std::vector<T> mu;       // [n*3]
  std::vector<T> scale;    // [n*3], linear
  std::vector<T> rot;      // [n*4], unit quaternions
  std::vector<T> opacity;  // [n], in [0,1]
  std::vector<T> sh;       // [n*3K], channel-major
};

template <typename T>
SplatSoA<T> to_soa(const GaussianField& field) {
  SplatSoA<T> s;
  s.n = static_cast<int>(field.primitives.size());
  s.degree = field.sh_degree;
  s.K = field.sh_coeffs();
  s.mu.resize(static_cast<size_t>(s.n) * 3);
  s.scale.resize(static_cast<size_t>(s.n) * 3);
  s.rot.resize(static_cast<size_t>(s.n) * 4);
  s.opacity.resize(static_cast<size_t>(s.n));
  s.sh.resize(static_cast<size_t>(s.n) * 3 * s.K);
  for (int i = 0; i < s.n; ++i) {
    const auto& g = field.primitives[static_cast<size_t>(i)];
    auto sc = g.scale();
    s.mu[i * 3 + 0] = g.mu.x;
    s.mu[i * 3 + 1] = g.mu.y;
    s.mu[i * 3 + 2] = g.mu.z;
    s.scale[i * 3 + 0] = sc.x;
    s.scale[i * 3 + 1] = sc.y;
    s.scale[i * 3 + 2] = sc.z;
    for (int q = 0; q < 4; ++q) s.rot[i * 4 + q] = g.rot[static_cast<size_t>(q)];
    s.opacity[static_cast<size_t>(i)] = g.opacity();
    for (int c = 0; c < 3 * s.K; ++c) s.sh[static_cast<size_t>(i) * 3 * s.K + c] = g.sh[static_cast<size_t>(c)];
  }
  return s;
}

template <typename T>
struct ProjGauss {
  bool culled = true;
  T x = 0, y = 0, z = 0;        // camera-space mean
  T u = 0, v = 0;               // projected center, continuous pixel coords
  T a = 0, b = 0, c = 0;        // conic (inverse screen covariance)
  T rho = 0;                    // conservative pixel radius for the skip test
  T color[3] = {0, 0, 0};       // SH-evaluated color
  T dir[3] = {0, 0, 0};         // unit view direction (camera center -> mu)
  T dirlen = 1;                 // |mu - camera center|
};

template <typename T>
void project_all(const SplatSoA<T>& g, const Camera& cam, const RenderOptions& opt,
                 std::vector<ProjGauss<T>>& proj) {
  proj.assign(static_cast<size_t>(g.n), {});
  const Vec3<float> ccf = cam.pose.camera_center();
  const Vec3<T> cc{T(ccf.x), T(ccf.y), T(ccf.z)};
  const T fx = T(cam.fx), fy = T(cam.fy), cx = T(cam.cx), cy = T(cam.cy);
  const T blur = T(opt.blur);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < g.n; ++i) {
    ProjGauss<T>& pg = proj[static_cast<size_t>(i)];
    const T* mu = g.mu.data() + i * 3;
    T x = 0, y = 0, z = 0;
    for (int c = 0; c < 3; ++c) {
      x += T(cam.pose.R(0, c)) * mu[c];
      y += T(cam.pose.R(1, c)) * mu[c];
      z += T(cam.pose.R(2, c)) * mu[c];
    }
    x += T(cam.pose.t.x);
    y += T(cam.pose.t.y);
    z += T(cam.pose.t.z);
    if (z <= T(cam.near)) {
      pg.culled = true;
      continue;
    }
    pg.culled = false;
    pg.x = x;
    pg.y = y;
    pg.z = z;
    pg.u = fx * x / z + cx;
    pg.v = fy * y / z + cy;

    // Sigma3 = R diag(s^2) R^T
    const T* q = g.rot.data() + i * 4;
    Mat3<T> R = quat_to_rotmat(q[0], q[1], q[2], q[3]);
    const T* s = g.scale.data() + i * 3;
    T S3[3][3];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        S3[r][c] = R(r, 0) * s[0] * s[0] * R(c, 0) + R(r, 1) * s[1] * s[1] * R(c, 1) +
                   R(r, 2) * s[2] * s[2] * R(c, 2);
    // M = J W
    T J[2][3] = {{fx / z, 0, -fx * x / (z * z)}, {0, fy / z, -fy * y / (z * z)}};
    T M[2][3];
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c)
        M[r][c] = J[r][0] * T(cam.pose.R(0, c)) + J[r][1] * T(cam.pose.R(1, c)) +
                  J[r][2] * T(cam.pose.R(2, c));
    T A = blur, B = 0, C = blur;
    for (int k = 0; k < 3; ++k)
      for (int l = 0; l < 3; ++l) {
        A += M[0][k] * S3[k][l] * M[0][l];
        B += M[0][k] * S3[k][l] * M[1][l];
        C += M[1][k] * S3[k][l] * M[1][l];
      }
    const T det = A * C - B * B;
    pg.a = C / det;
    pg.b = -B / det;
    pg.c = A / det;

    // conservative radius: alpha < skip outside it
    if (opt.skip_alpha > 0) {
      T lam_max = T(0.5) * (A + C) + std::sqrt(std::max(T(0), T(0.25) * (A - C) * (A - C) + B * B));
      T opa = g.opacity[static_cast<size_t>(i)];
      if (opa <= T(opt.skip_alpha)) {
        pg.rho = T(-1);  // never contributes
      } else {
        pg.rho = std::sqrt(T(2) * std::log(opa / T(opt.skip_alpha)) * lam_max) + T(1e-3);
      }
    } else {
      pg.rho = T(1e30);
    }

    // view-dependent color from the primitive center
    T dx = mu[0] - cc.x, dy = mu[1] - cc.y, dz = mu[2] - cc.z;
    T len = std::sqrt(dx * dx + dy * dy + dz * dz);
    T inv = len > T(0) ? T(1) / len : T(0);
    pg.dir[0] = dx * inv;
    pg.dir[1] = dy * inv;
    pg.dir[2] = dz * inv;
    pg.dirlen = len;
    T basis[16];
    sh_basis(g.degree, Vec3<T>{pg.dir[0], pg.dir[1], pg.dir[2]}, basis);
    const T* sh = g.sh.data() + static_cast<size_t>(i) * 3 * g.K;
    for (int ch = 0; ch < 3; ++ch) {
      T val = T(0.5);
      for (int k = 0; k < g.K; ++k) val += sh[static_cast<size_t>(ch) * g.K + k] * basis[k];
      pg.color[ch] = std::max(T(0), val);
    }
  }
}

// Depth order: ascending camera depth, stable by primitive index on ties.
template <typename T>
std::vector<int> depth_order(const std::vector<ProjGauss<T>>& proj) {
  std::vector<int> order;
  order.reserve(proj.size());
  for (size_t i = 0; i < proj.size(); ++i)
    if (!proj[i].culled) order.push_back(static_cast<int>(i));
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return proj[static_cast<size_t>(a)].z < proj[static_cast<size_t>(b)].z; });
  return order;
}

constexpr int kRowBlock = 8;

// Primitives whose skip radius touches rows [r0, r1) and the x range.
template <typename T>
std::vector<int> block_list(const std::vector<ProjGauss<T>>& proj, const std::vector<int>& order,
                            int r0, int r1, int width) {
  std::vector<int> out;
  for (int idx : order) {
    const auto& pg = proj[static_cast<size_t>(idx)];
    if (pg.rho < T(0)) continue;
    if (pg.v + pg.rho < T(r0) || pg.v - pg.rho > T(r1) || pg.u + pg.rho < T(0) ||
        pg.u - pg.rho > T(width))
      continue;
    out.push_back(idx);
  }
  return out;
}

template <typename T>
void forward(const SplatSoA<T>& g, const Camera& cam, const RenderOptions& opt,
             std::vector<ProjGauss<T>>& proj, std::vector<int>& order, T* rgb, T* alpha) {
  project_all(g, cam, opt, proj);
  order = depth_order(proj);
  const int H = cam.height, W = cam.width;
  const T bg[3] = {T(opt.background[0]), T(opt.background[1]), T(opt.background[2])};
  const T clamp_a = T(opt.alpha_clamp), skip = T(opt.skip_alpha);
  const int n_blocks = (H + kRowBlock - 1) / kRowBlock;
#pragma omp parallel for schedule(static)
  for (int blk = 0; blk < n_blocks; ++blk) {
    const int r0 = blk * kRowBlock, r1 = std::min(H, r0 + kRowBlock);
    std::vector<int> lst;
    const std::vector<int>& use = opt.tiled ? (lst = block_list(proj, order, r0, r1, W), lst) : order;
    for (int py = r0; py < r1; ++py) {
      for (int px = 0; px < W; ++px) {
        T acc[3] = {0, 0, 0};
        T trans = T(1);
        const T pxc = T(px) + T(0.5), pyc = T(py) + T(0.5);
        for (int idx : use) {
          const auto& pg = proj[static_cast<size_t>(idx)];
          const T dx = pxc - pg.u, dy = pyc - pg.v;
          if (opt.tiled && (dx * dx + dy * dy) > pg.rho * pg.rho) continue;
          const T q = T(0.5) * (pg.a * dx * dx + T(2) * pg.b * dx * dy + pg.c * dy * dy);
          if (q < T(0)) continue;  // numerically indefinite tail, no contribution
          const T G = std::exp(-q);
          T a_i = g.opacity[static_cast<size_t>(idx)] * G;
          if (a_i < skip) continue;
          if (a_i > clamp_a) a_i = clamp_a;
          for (int c = 0; c < 3; ++c) acc[c] += pg.color[c] * a_i * trans;
          trans *= (T(1) - a_i);
        }
        const size_t p = static_cast<size_t>(py) * W + px;
        for (int c = 0; c < 3; ++c) rgb[p * 3 + c] = acc[c] + trans * bg[c];
        alpha[p] = T(1) - trans;
      }
    }
  }
}

template <typename T>
struct SplatGrads {
  std::vector<T> mu, scale, rot, opacity, sh;
  void init(const SplatSoA<T>& g) {
    mu.assign(static_cast<size_t>(g.n) * 3, T(0));
    scale.assign(static_cast<size_t>(g.n) * 3, T(0));
    rot.assign(static_cast<size_t>(g.n) * 4, T(0));
    opacity.assign(static_cast<size_t>(g.n), T(0));
    sh.assign(static_cast<size_t>(g.n) * 3 * g.K, T(0));
  }
};

template <typename T>
void backward(const SplatSoA<T>& g, const Camera& cam, const RenderOptions& opt,
              const std::vector<ProjGauss<T>>& proj, const std::vector<int>& order,
              const T* go_rgb, const T* go_alpha, SplatGrads<T>& grads) {
  grads.init(g);
  const int H = cam.height, W = cam.width;
  const T bg[3] = {T(opt.background[0]), T(opt.background[1]), T(opt.background[2])};
  const T clamp_a = T(opt.alpha_clamp), skip = T(opt.skip_alpha);
  const int n_blocks = (H + kRowBlock - 1) / kRowBlock;

  // per-block accumulators for per-primitive intermediate gradients, reduced
  // in block order so results do not depend on thread count
  struct BlockAcc {
    std::vector<T> color, opa, conic, uv;
  };
  std::vector<BlockAcc> blocks(static_cast<size_t>(n_blocks));

#pragma omp parallel for schedule(static)
  for (int blk = 0; blk < n_blocks; ++blk) {
    auto& acc = blocks[static_cast<size_t>(blk)];
    acc.color.assign(static_cast<size_t>(g.n) * 3, T(0));
    acc.opa.assign(static_cast<size_t>(g.n), T(0));
    acc.conic.assign(static_cast<size_t>(g.n) * 3, T(0));
    acc.uv.assign(static_cast<size_t>(g.n) * 2, T(0));
    const int r0 = blk * kRowBlock, r1 = std::min(H, r0 + kRowBlock);
    std::vector<int> lst;
    const std::vector<int>& use = opt.tiled ? (lst = block_list(proj, order, r0, r1, W), lst) : order;

    struct Contrib {
      int idx;
      T a_i, G, trans, dx, dy;
      bool clamped;
    };
    std::vector<Contrib> contribs;
    contribs.reserve(use.size());

    for (int py = r0; py < r1; ++py) {
      for (int px = 0; px < W; ++px) {
        const size_t p = static_cast<size_t>(py) * W + px;
        const T gC[3] = {go_rgb[p * 3], go_rgb[p * 3 + 1], go_rgb[p * 3 + 2]};
        const T gA = go_alpha ? go_alpha[p] : T(0);
        if (gC[0] == T(0) && gC[1] == T(0) && gC[2] == T(0) && gA == T(0)) continue;
        contribs.clear();
        T trans = T(1);
        const T pxc = T(px) + T(0.5), pyc = T(py) + T(0.5);
        for (int idx : use) {
          const auto& pg = proj[static_cast<size_t>(idx)];
          const T dx = pxc - pg.u, dy = pyc - pg.v;
          if (opt.tiled && (dx * dx + dy * dy) > pg.rho * pg.rho) continue;
          const T q = T(0.5) * (pg.a * dx * dx + T(2) * pg.b * dx * dy + pg.c * dy * dy);
          if (q < T(0)) continue;
          const T G = std::exp(-q);
          T a_raw = g.opacity[static_cast<size_t>(idx)] * G;
          if (a_raw < skip) continue;
          bool clamped = a_raw > clamp_a;
          T a_i = clamped ? clamp_a : a_raw;
          contribs.push_back({idx, a_i, G, trans, dx, dy, clamped});
          trans *= (T(1) - a_i);
        }
        const T T_final = trans;
        // suffix color (what later primitives plus background contribute)
        T S[3] = {T_final * bg[0], T_final * bg[1], T_final * bg[2]};
        for (size_t ci = contribs.size(); ci-- > 0;) {
          const Contrib& cb = contribs[ci];
          const auto& pg = proj[static_cast<size_t>(cb.idx)];
          // color gradient
          for (int c = 0; c < 3; ++c)
            acc.color[static_cast<size_t>(cb.idx) * 3 + c] += gC[c] * cb.a_i * cb.trans;
          // alpha gradient
          T g_ai = T(0);
          const T one_m = T(1) - cb.a_i;
          for (int c = 0; c < 3; ++c) g_ai += gC[c] * (pg.color[c] * cb.trans - S[c] / one_m);
          g_ai += gA * T_final / one_m;
          if (!cb.clamped) {
            acc.opa[static_cast<size_t>(cb.idx)] += g_ai * cb.G;
            const T g_G = g_ai * g.opacity[static_cast<size_t>(cb.idx)];
            const T g_q = -g_G * cb.G;
            acc.conic[static_cast<size_t>(cb.idx) * 3 + 0] += g_q * T(0.5) * cb.dx * cb.dx;
            acc.conic[static_cast<size_t>(cb.idx) * 3 + 1] += g_q * cb.dx * cb.dy;
            acc.conic[static_cast<size_t>(cb.idx) * 3 + 2] += g_q * T(0.5) * cb.dy * cb.dy;
            const T g_dx = g_q * (pg.a * cb.dx + pg.b * cb.dy);
            const T g_dy = g_q * (pg.b * cb.dx + pg.c * cb.dy);
            acc.uv[static_cast<size_t>(cb.idx) * 2 + 0] -= g_dx;
            acc.uv[static_cast<size_t>(cb.idx) * 2 + 1] -= g_dy;
          }
          for (int c = 0; c < 3; ++c) S[c] += pg.color[c] * cb.a_i * cb.trans;
        }
      }
    }
  }

  // deterministic reduction in block order
  std::vector<T> g_color(static_cast<size_t>(g.n) * 3, T(0)), g_opa(static_cast<size_t>(g.n), T(0)),
      g_conic(static_cast<size_t>(g.n) * 3, T(0)), g_uv(static_cast<size_t>(g.n) * 2, T(0));
  for (const auto& acc : blocks) {
    for (size_t i = 0; i < g_color.size(); ++i) g_color[i] += acc.color[i];
    for (size_t i = 0; i < g_opa.size(); ++i) g_opa[i] += acc.opa[i];
    for (size_t i = 0; i < g_conic.size(); ++i) g_conic[i] += acc.conic[i];
    for (size_t i = 0; i < g_uv.size(); ++i) g_uv[i] += acc.uv[i];
  }

  // per-primitive conversion to parameter gradients
  const Vec3<float> ccf = cam.pose.camera_center();
  const T fx = T(cam.fx), fy = T(cam.fy);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < g.n; ++i) {
    const auto& pg = proj[static_cast<size_t>(i)];
    if (pg.culled) continue;

    // ---- color path: SH coefficients and view direction
    T basis[16];
    sh_basis(g.degree, Vec3<T>{pg.dir[0], pg.dir[1], pg.dir[2]}, basis);
    const T* sh = g.sh.data() + static_cast<size_t>(i) * 3 * g.K;
    T g_dir[3] = {0, 0, 0};
    {
      T g_basis[16] = {0};
      for (int ch = 0; ch < 3; ++ch) {
        const T gc = g_color[static_cast<size_t>(i) * 3 + ch];
        if (gc == T(0)) continue;
        // clamp mask: color was max(0, val)
        T val = T(0.5);
        for (int k = 0; k < g.K; ++k) val += sh[static_cast<size_t>(ch) * g.K + k] * basis[k];
        if (val <= T(0)) continue;
        for (int k = 0; k < g.K; ++k) {
          grads.sh[(static_cast<size_t>(i) * 3 + ch) * g.K + k] += gc * basis[k];
          g_basis[k] += gc * sh[static_cast<size_t>(ch) * g.K + k];
        }
      }
      // d basis / d dir
      const T x = pg.dir[0], y = pg.dir[1], z = pg.dir[2];
      if (g.degree >= 1) {
        g_dir[1] += g_basis[1] * T(-0.4886025119029199);
        g_dir[2] += g_basis[2] * T(0.4886025119029199);
        g_dir[0] += g_basis[3] * T(-0.4886025119029199);
      }
      if (g.degree >= 2) {
        g_dir[0] += g_basis[4] * T(1.0925484305920792) * y;
        g_dir[1] += g_basis[4] * T(1.0925484305920792) * x;
        g_dir[1] += g_basis[5] * T(-1.0925484305920792) * z;
        g_dir[2] += g_basis[5] * T(-1.0925484305920792) * y;
        g_dir[0] += g_basis[6] * T(0.31539156525252005) * T(-2) * x;
        g_dir[1] += g_basis[6] * T(0.31539156525252005) * T(-2) * y;
        g_dir[2] += g_basis[6] * T(0.31539156525252005) * T(4) * z;
        g_dir[0] += g_basis[7] * T(-1.0925484305920792) * z;
        g_dir[2] += g_basis[7] * T(-1.0925484305920792) * x;
        g_dir[0] += g_basis[8] * T(0.5462742152960396) * T(2) * x;
        g_dir[1] += g_basis[8] * T(0.5462742152960396) * T(-2) * y;
      }
      if (g.degree >= 3) {
        g_dir[0] += g_basis[9] * T(-0.5900435899266435) * T(6) * x * y;
        g_dir[1] += g_basis[9] * T(-0.5900435899266435) * (T(3) * x * x - T(3) * y * y);
        g_dir[0] += g_basis[10] * T(2.890611442640554) * y * z;
        g_dir[1] += g_basis[10] * T(2.890611442640554) * x * z;
        g_dir[2] += g_basis[10] * T(2.890611442640554) * x * y;
        g_dir[0] += g_basis[11] * T(-0.4570457994644658) * T(-2) * x * y;
        g_dir[1] += g_basis[11] * T(-0.4570457994644658) * (T(4) * z * z - x * x - T(3) * y * y);
        g_dir[2] += g_basis[11] * T(-0.4570457994644658) * T(8) * y * z;
        g_dir[0] += g_basis[12] * T(0.3731763325901154) * T(-6) * x * z;
        g_dir[1] += g_basis[12] * T(0.3731763325901154) * T(-6) * y * z;
        g_dir[2] += g_basis[12] * T(0.3731763325901154) * (T(6) * z * z - T(3) * x * x - T(3) * y * y);
        g_dir[0] += g_basis[13] * T(-0.4570457994644658) * (T(4) * z * z - T(3) * x * x - y * y);
        g_dir[1] += g_basis[13] * T(-0.4570457994644658) * T(-2) * x * y;
        g_dir[2] += g_basis[13] * T(-0.4570457994644658) * T(8) * x * z;
        g_dir[0] += g_basis[14] * T(1.445305721320277) * T(2) * x * z;
        g_dir[1] += g_basis[14] * T(1.445305721320277) * T(-2) * y * z;
        g_dir[2] += g_basis[14] * T(1.445305721320277) * (x * x - y * y);
        g_dir[0] += g_basis[15] * T(-0.5900435899266435) * (T(3) * x * x - T(3) * y * y);
        g_dir[1] += g_basis[15] * T(-0.5900435899266435) * T(-6) * x * y;
      }
    }
    // dir = w/|w|, w = mu - camera_center: g_w = (I - dir dir^T)/|w| g_dir
    {
      const T dot = g_dir[0] * pg.dir[0] + g_dir[1] * pg.dir[1] + g_dir[2] * pg.dir[2];
      const T inv = T(1) / pg.dirlen;
      grads.mu[static_cast<size_t>(i) * 3 + 0] += (g_dir[0] - dot * pg.dir[0]) * inv;
      grads.mu[static_cast<size_t>(i) * 3 + 1] += (g_dir[1] - dot * pg.dir[1]) * inv;
      grads.mu[static_cast<size_t>(i) * 3 + 2] += (g_dir[2] - dot * pg.dir[2]) * inv;
    }

    grads.opacity[static_cast<size_t>(i)] += g_opa[static_cast<size_t>(i)];

    // ---- geometry path: conic -> Sigma2 -> (M, Sigma3) -> (J, R, s) -> mu
    const T g_a = g_conic[static_cast<size_t>(i) * 3 + 0], g_b = g_conic[static_cast<size_t>(i) * 3 + 1],
            g_c = g_conic[static_cast<size_t>(i) * 3 + 2];
    T g_u = g_uv[static_cast<size_t>(i) * 2 + 0], g_v = g_uv[static_cast<size_t>(i) * 2 + 1];

    // recompute forward quantities
    const T* qr = g.rot.data() + i * 4;
    Mat3<T> R = quat_to_rotmat(qr[0], qr[1], qr[2], qr[3]);
    const T* s = g.scale.data() + i * 3;
    T S3[3][3];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        S3[r][c] = R(r, 0) * s[0] * s[0] * R(c, 0) + R(r, 1) * s[1] * s[1] * R(c, 1) +
                   R(r, 2) * s[2] * s[2] * R(c, 2);
    const T x = pg.x, y = pg.y, z = pg.z;
    T J[2][3] = {{fx / z, 0, -fx * x / (z * z)}, {0, fy / z, -fy * y / (z * z)}};
    T M[2][3];
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c)
        M[r][c] = J[r][0] * T(cam.pose.R(0, c)) + J[r][1] * T(cam.pose.R(1, c)) +
                  J[r][2] * T(cam.pose.R(2, c));
    T A = T(opt.blur), B = 0, C = T(opt.blur);
    for (int k = 0; k < 3; ++k)
      for (int l = 0; l < 3; ++l) {
        A += M[0][k] * S3[k][l] * M[0][l];
        B += M[0][k] * S3[k][l] * M[1][l];
        C += M[1][k] * S3[k][l] * M[1][l];
      }
    const T det = A * C - B * B;
    const T d2 = det * det;

    // conic = (C, -B, A)/det
    const T g_A = (-g_a * C * C - g_c * B * B + g_b * B * C) / d2;
    const T g_B = (T(2) * g_a * B * C + T(2) * g_c * A * B - g_b * (det + T(2) * B * B)) / d2;
    const T g_C = (-g_a * B * B - g_c * A * A + g_b * A * B) / d2;

    // A = m0 S3 m0^T, B = m0 S3 m1^T, C = m1 S3 m1^T
    T g_M[2][3] = {{0, 0, 0}, {0, 0, 0}};
    T g_S3[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
    for (int k = 0; k < 3; ++k) {
      T s3m0 = 0, s3m1 = 0;
      for (int l = 0; l < 3; ++l) {
        s3m0 += S3[k][l] * M[0][l];
        s3m1 += S3[k][l] * M[1][l];
      }
      g_M[0][k] += T(2) * g_A * s3m0 + g_B * s3m1;
      g_M[1][k] += T(2) * g_C * s3m1 + g_B * s3m0;
    }
    for (int k = 0; k < 3; ++k)
      for (int l = 0; l < 3; ++l)
        g_S3[k][l] += g_A * M[0][k] * M[0][l] + g_B * M[0][k] * M[1][l] + g_C * M[1][k] * M[1][l];

    // Sigma3 = R diag(s^2) R^T
    for (int m = 0; m < 3; ++m) {
      T gs2 = 0;
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l) gs2 += g_S3[k][l] * R(k, m) * R(l, m);
      grads.scale[static_cast<size_t>(i) * 3 + m] += T(2) * s[m] * gs2;
    }
    T g_R[3][3];
    for (int k = 0; k < 3; ++k)
      for (int m = 0; m < 3; ++m) {
        T acc = 0;
        for (int l = 0; l < 3; ++l) acc += (g_S3[k][l] + g_S3[l][k]) * s[m] * s[m] * R(l, m);
        g_R[k][m] = acc;
      }
    // R(q) polynomial Jacobian
    {
      const T w = qr[0], qx = qr[1], qy = qr[2], qz = qr[3];
      const T dRw[3][3] = {{0, -2 * qz, 2 * qy}, {2 * qz, 0, -2 * qx}, {-2 * qy, 2 * qx, 0}};
      const T dRx[3][3] = {{0, 2 * qy, 2 * qz}, {2 * qy, -4 * qx, -2 * w}, {2 * qz, 2 * w, -4 * qx}};
      const T dRy[3][3] = {{-4 * qy, 2 * qx, 2 * w}, {2 * qx, 0, 2 * qz}, {-2 * w, 2 * qz, -4 * qy}};
      const T dRz[3][3] = {{-4 * qz, -2 * w, 2 * qx}, {2 * w, -4 * qz, 2 * qy}, {2 * qx, 2 * qy, 0}};
      T gq[4] = {0, 0, 0, 0};
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
          gq[0] += g_R[r][c] * dRw[r][c];
          gq[1] += g_R[r][c] * dRx[r][c];
          gq[2] += g_R[r][c] * dRy[r][c];
          gq[3] += g_R[r][c] * dRz[r][c];
        }
      for (int k = 0; k < 4; ++k) grads.rot[static_cast<size_t>(i) * 4 + k] += gq[k];
    }

    // M[r][c] = sum_k J[r][k] W[k][c]  =>  g_J[r][k] = sum_c g_M[r][c] W[k][c]
    T g_J[2][3];
    for (int r = 0; r < 2; ++r)
      for (int k = 0; k < 3; ++k)
        g_J[r][k] = g_M[r][0] * T(cam.pose.R(k, 0)) + g_M[r][1] * T(cam.pose.R(k, 1)) +
                    g_M[r][2] * T(cam.pose.R(k, 2));

    // J entries and projection depend on camera-space (x, y, z)
    const T z2 = z * z, z3 = z2 * z;
    T g_x = g_J[0][2] * (-fx / z2) + g_u * fx / z;
    T g_y = g_J[1][2] * (-fy / z2) + g_v * fy / z;
    T g_z = g_J[0][0] * (-fx / z2) + g_J[1][1] * (-fy / z2) + g_J[0][2] * (T(2) * fx * x / z3) +
            g_J[1][2] * (T(2) * fy * y / z3) - g_u * fx * x / z2 - g_v * fy * y / z2;

    // p_cam = W mu + t
    for (int c = 0; c < 3; ++c)
      grads.mu[static_cast<size_t>(i) * 3 + c] +=
          T(cam.pose.R(0, c)) * g_x + T(cam.pose.R(1, c)) * g_y + T(cam.pose.R(2, c)) * g_z;
  }
}

}  // namespace raster

// Forward-only rendering of a field (inference path).
struct RenderOutput {
  std::vector<float> rgb;    // [H*W*3]
  std::vector<float> alpha;  // [H*W]
};

inline RenderOutput render(const GaussianField& field, const Camera& cam,
                           const RenderOptions& opt = {}) {
  cam.validate();
  auto soa = raster::to_soa<float>(field);
  RenderOutput out;
  out.rgb.assign(static_cast<size_t>(cam.height) * cam.width * 3, 0.0f);
  out.alpha.assign(static_cast<size_t>(cam.height) * cam.width, 0.0f);
  std::vector<raster::ProjGauss<float>> proj;
  std::vector<int> order;
  raster::forward(soa, cam, opt, proj, order, out.rgb.data(), out.alpha.data());
  for (float v : out.rgb)
    if (!std::isfinite(v)) throw NumericError("render produced a non-finite pixel");
  return out;
}

// ---------------------------------------------------------------------------
// Tape primitive: differentiable render of tensor-valued Gaussian parameters.

template <typename T>
struct GaussianTensors {
  Tensor<T> mu;       // [N,3]
  Tensor<T> scale;    // [N,3], linear (activated)
  Tensor<T> rot;      // [N,4], unit quaternions
  Tensor<T> opacity;  // [N], in [0,1]
  Tensor<T> sh;       // [N,3K], channel-major
};

template <typename T>
struct RenderTensors {
  Tensor<T> rgb;    // [H,W,3]
  Tensor<T> alpha;  // [H,W]
};

template <typename T>
RenderTensors<T> rasterize(const GaussianTensors<T>& in, const Camera& cam, int sh_degree,
                           const RenderOptions& opt = {}) {
  Tape<T>& tp = *in.mu.tape;
  const int n = in.mu.shape()[0];
  const int K = (sh_degree + 1) * (sh_degree + 1);
  if (in.mu.shape() != std::vector<int>{n, 3} || in.scale.shape() != std::vector<int>{n, 3} ||
      in.rot.shape() != std::vector<int>{n, 4} || in.opacity.shape() != std::vector<int>{n} ||
      in.sh.shape() != std::vector<int>{n, 3 * K})
    throw ShapeError("rasterize: inconsistent Gaussian tensor shapes");
  bool rg = in.mu.requires_grad() || in.scale.requires_grad() || in.rot.requires_grad() ||
            in.opacity.requires_grad() || in.sh.requires_grad();
  int out_rgb = tp.new_node({cam.height, cam.width, 3}, rg);
  int out_alpha = tp.new_node({cam.height, cam.width}, rg);

  auto run_fwd = [ids = std::array<int, 5>{in.mu.id, in.scale.id, in.rot.id, in.opacity.id, in.sh.id},
                  out_rgb, out_alpha, cam, opt, sh_degree, K, n](Tape<T>& t) {
    raster::SplatSoA<T> soa;
    soa.n = n;
    soa.K = K;
    soa.degree = sh_degree;
    soa.mu = t.node(ids[0]).value;
    soa.scale = t.node(ids[1]).value;
    soa.rot = t.node(ids[2]).value;
    soa.opacity = t.node(ids[3]).value;
    soa.sh = t.node(ids[4]).value;
    std::vector<raster::ProjGauss<T>> proj;
    std::vector<int> order;
    raster::forward(soa, cam, opt, proj, order, t.node(out_rgb).value.data(),
                    t.node(out_alpha).value.data());
  };
  run_fwd(tp);
  tp.check_finite(out_rgb, "rasterize");
  tp.check_finite(out_alpha, "rasterize");

  auto run_bwd = [ids = std::array<int, 5>{in.mu.id, in.scale.id, in.rot.id, in.opacity.id, in.sh.id},
                  out_rgb, out_alpha, cam, opt, sh_degree, K, n](Tape<T>& t) {
    const auto& g_rgb = t.node(out_rgb).grad;
    const auto& g_alpha = t.node(out_alpha).grad;
    if (g_rgb.empty() && g_alpha.empty()) return;
    raster::SplatSoA<T> soa;
    soa.n = n;
    soa.K = K;
    soa.degree = sh_degree;
    soa.mu = t.node(ids[0]).value;
    soa.scale = t.node(ids[1]).value;
    soa.rot = t.node(ids[2]).value;
    soa.opacity = t.node(ids[3]).value;
    soa.sh = t.node(ids[4]).value;
    std::vector<raster::ProjGauss<T>> proj;
    raster::project_all(soa, cam, opt, proj);
    auto order = raster::depth_order(proj);
    std::vector<T> zero_rgb, zero_alpha;
    const T* grgb = g_rgb.data();
    if (g_rgb.empty()) {
      zero_rgb.assign(static_cast<size_t>(cam.height) * cam.width * 3, T(0));
      grgb = zero_rgb.data();
    }
    const T* galpha = g_alpha.empty() ? nullptr : g_alpha.data();
    raster::SplatGrads<T> grads;
    raster::backward(soa, cam, opt, proj, order, grgb, galpha, grads);
    auto scatter = [&](int id, const std::vector<T>& src) {
      if (!t.wants_grad(id)) return;
      auto& dst = t.grad_buf(id);
      for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    };
    scatter(ids[0], grads.mu);
    scatter(ids[1], grads.scale);
    scatter(ids[2], grads.rot);
    scatter(ids[3], grads.opacity);
    scatter(ids[4], grads.sh);
  };
  tp.push_record("rasterize", {in.mu.id, in.scale.id, in.rot.id, in.opacity.id, in.sh.id},
                 {out_rgb, out_alpha}, std::move(run_fwd), std::move(run_bwd));
  return {{&tp, out_rgb}, {&tp, out_alpha}};
}

// Verification harness: analytic gradients of a mean-squared pixel loss vs
// central finite differences, in f64, for every parameter of every primitive.
// The activation chain mirrors training: exp on log-scales, row-normalized
// quaternions, sigmoid opacities.
inline double rasterize_gradcheck(const GaussianField& field, const Camera& cam,
                                  const std::vector<float>& target_rgb,
                                  const RenderOptions& opt = RenderOptions::exact(),
                                  double eps = 1e-5) {
  const int n = static_cast<int>(field.primitives.size());
  const int K = field.sh_coeffs();
  if (static_cast<int>(target_rgb.size()) != cam.height * cam.width * 3)
    throw ShapeError("rasterize_gradcheck: target size mismatch");

  std::vector<double> mu(static_cast<size_t>(n) * 3), logs(static_cast<size_t>(n) * 3),
      rot(static_cast<size_t>(n) * 4), opl(static_cast<size_t>(n)), sh(static_cast<size_t>(n) * 3 * K);
  for (int i = 0; i < n; ++i) {
    const auto& g = field.primitives[static_cast<size_t>(i)];
    mu[i * 3 + 0] = g.mu.x;
    mu[i * 3 + 1] = g.mu.y;
    mu[i * 3 + 2] = g.mu.z;
    logs[i * 3 + 0] = g.log_scale.x;
    logs[i * 3 + 1] = g.log_scale.y;
    logs[i * 3 + 2] = g.log_scale.z;
    for (int q = 0; q < 4; ++q) rot[i * 4 + q] = g.rot[static_cast<size_t>(q)];
    opl[static_cast<size_t>(i)] = g.opacity_logit;
    for (int c = 0; c < 3 * K; ++c) sh[static_cast<size_t>(i) * 3 * K + c] = g.sh[static_cast<size_t>(c)];
  }

  std::vector<std::vector<double>*> leaves = {&mu, &logs, &rot, &opl, &sh};
  std::vector<std::vector<int>> shapes = {{n, 3}, {n, 3}, {n, 4}, {n}, {n, 3 * K}};

  auto build = [&](Tape<double>& tp, bool want_grad) {
    GaussianTensors<double> in;
    in.mu = tp.leaf(shapes[0], mu, want_grad);
    auto logs_t = tp.leaf(shapes[1], logs, want_grad);
    auto rot_t = tp.leaf(shapes[2], rot, want_grad);
    auto opl_t = tp.leaf(shapes[3], opl, want_grad);
    in.sh = tp.leaf(shapes[4], sh, want_grad);
    in.scale = exp_(logs_t);
    in.rot = l2_normalize_rows(rot_t);
    in.opacity = sigmoid(opl_t);
    auto out = rasterize(in, cam, field.sh_degree, opt);
    std::vector<double> tgt(target_rgb.begin(), target_rgb.end());
    auto diff = sub(out.rgb, tp.constant({cam.height, cam.width, 3}, tgt));
    return std::make_pair(mean_all(square(diff)), std::array<int, 5>{in.mu.id, logs_t.id, rot_t.id,
                                                                     opl_t.id, in.sh.id});
  };

  Tape<double> tape;
  auto [loss, leaf_ids] = build(tape, true);
  tape.backward(loss);

  std::vector<double> fd_all, an_all;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& data = *leaves[li];
    const auto& agrad = tape.node(leaf_ids[li]).grad;
    for (size_t j = 0; j < data.size(); ++j) {
      double saved = data[j];
      auto eval = [&](double v) {
        data[j] = v;
        Tape<double> t2;
        t2.recording = false;
        double out = build(t2, false).first.item();
        data[j] = saved;
        return out;
      };
      double ep = eps * std::max(1.0, std::abs(saved));
      fd_all.push_back((eval(saved + ep) - eval(saved - ep)) / (2.0 * ep));
      an_all.push_back(agrad.empty() ? 0.0 : agrad[j]);
    }
  }
  return max_rel_err(fd_all, an_all);
}

}  // namespace pfr

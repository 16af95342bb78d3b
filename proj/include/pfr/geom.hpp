#pragma once

#include <array>
#include <cmath>

#include "pfr/common.hpp"

namespace pfr {

template <typename T>
struct Vec3 {
  T x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(T s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(T s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  T dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  T norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    T n = norm();
    return n > T(0) ? *this / n : Vec3{0, 0, 0};
  }
  T operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

// Row-major 3x3.
template <typename T>
struct Mat3 {
  std::array<T, 9> m{};

  static Mat3 identity() {
    Mat3 r;
    r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    return r;
  }
  T& operator()(int r, int c) { return m[r * 3 + c]; }
  T operator()(int r, int c) const { return m[r * 3 + c]; }

  Vec3<T> operator*(const Vec3<T>& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        T s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    return r;
  }
  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
  T det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

// Rotation matrix from a unit quaternion (w,x,y,z). The formula is the plain
// polynomial; callers must pass unit-norm input.
template <typename T>
Mat3<T> quat_to_rotmat(T w, T x, T y, T z) {
  Mat3<T> R;
  R.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
         2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
  return R;
}

// Rigid world-to-camera transform: x_cam = R * x_world + t.
template <typename T>
struct Pose {
  Mat3<T> R = Mat3<T>::identity();
  Vec3<T> t{0, 0, 0};

  Vec3<T> apply(const Vec3<T>& p) const { return R * p + t; }
  Pose inverse() const {
    Pose inv;
    inv.R = R.transposed();
    inv.t = (inv.R * t) * T(-1);
    return inv;
  }
  // this ∘ o : first o, then this.
  Pose compose(const Pose& o) const {
    Pose r;
    r.R = R * o.R;
    r.t = R * o.t + t;
    return r;
  }
  Vec3<T> camera_center() const { return (R.transposed() * t) * T(-1); }
};

template <typename T>
struct Aabb {
  Vec3<T> lo, hi;

  bool contains(const Vec3<T>& p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z;
  }
  Vec3<T> center() const { return (lo + hi) * T(0.5); }
};

}  // namespace pfr

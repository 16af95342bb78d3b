#pragma once

#include <fstream>

#include "json.hpp"
#include "pfr/geom.hpp"

namespace pfr {

// Pinhole camera with a rigid world-to-camera transform. `near` is the
// culling plane for projection.
struct Camera {
  Pose<float> pose;
  float fx = 64, fy = 64, cx = 32, cy = 32;
  int width = 64, height = 64;
  float near = 0.01f;

  void validate() const {
    if (std::abs(pose.R.det() - 1.0f) > 1e-5f)
      throw ValueError(strfmt("camera rotation determinant %.6f != 1", pose.R.det()));
    if (fx <= 0 || fy <= 0) throw ValueError("camera focal lengths must be > 0");
    if (near <= 0) throw ValueError("camera near plane must be > 0");
  }
};

inline nlohmann::json pose_to_json(const Pose<float>& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < 4; ++c) {
      if (r < 3 && c < 3)
        row.push_back(p.R(r, c));
      else if (r < 3)
        row.push_back(r == 0 ? p.t.x : (r == 1 ? p.t.y : p.t.z));
      else
        row.push_back(c == 3 ? 1.0f : 0.0f);
    }
    rows.push_back(row);
  }
  return rows;
}

inline Pose<float> pose_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw FormatError("pose JSON must be a 4x4 row-major array");
  Pose<float> p;
  for (int r = 0; r < 3; ++r) {
    if (!j[r].is_array() || j[r].size() != 4) throw FormatError("pose JSON must be a 4x4 row-major array");
    for (int c = 0; c < 3; ++c) p.R(r, c) = j[r][c].get<float>();
  }
  p.t = {j[0][3].get<float>(), j[1][3].get<float>(), j[2][3].get<float>()};
  return p;
}

inline nlohmann::json intrinsics_to_json(const Camera& cam) {
  return {{"fx", cam.fx},       {"fy", cam.fy},           {"cx", cam.cx},
          {"cy", cam.cy},       {"width", cam.width},     {"height", cam.height}};
}

inline void intrinsics_from_json(const nlohmann::json& j, Camera& cam) {
  cam.fx = j.at("fx").get<float>();
  cam.fy = j.at("fy").get<float>();
  cam.cx = j.at("cx").get<float>();
  cam.cy = j.at("cy").get<float>();
  if (j.count("width")) cam.width = j.at("width").get<int>();
  if (j.count("height")) cam.height = j.at("height").get<int>();
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IOError("cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw FormatError("bad JSON in " + path + ": " + e.what());
  }
  return j;
}

inline void save_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IOError("cannot open for write: " + path);
  f << j.dump(2) << "\n";
}

}  // namespace pfr

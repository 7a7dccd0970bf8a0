#include "rgbdps/jsonio.hpp"

#include <algorithm>
#include <fstream>

namespace rgbdps::jsonio {

void require_keys(const json& j, std::initializer_list<std::string_view> allowed,
                  std::string_view where) {
  RGBDPS_CHECK(j.is_object(), std::string(where) + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ValidationError(std::string(where) + ": unknown key '" + key + "'");
    }
  }
}

json to_json(const Vec3& v) { return {v[0], v[1], v[2]}; }

Vec3 vec3_from_json(const json& j, std::string_view where) {
  RGBDPS_CHECK(j.is_array() && j.size() == 3 &&
                   std::all_of(j.begin(), j.end(), [](const json& x) { return x.is_number(); }),
               std::string(where) + ": expected 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json to_json(const CameraIntrinsics& K) {
  return {{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx}, {"cy", K.cy},
          {"width", K.width}, {"height", K.height}};
}

CameraIntrinsics intrinsics_from_json(const json& j) {
  require_keys(j, {"fx", "fy", "cx", "cy", "width", "height"}, "intrinsics");
  for (const char* k : {"fx", "fy", "cx", "cy", "width", "height"}) {
    RGBDPS_CHECK(j.contains(k), std::string("intrinsics: missing '") + k + "'");
  }
  CameraIntrinsics K;
  read(j, "fx", K.fx, "intrinsics");
  read(j, "fy", K.fy, "intrinsics");
  read(j, "cx", K.cx, "intrinsics");
  read(j, "cy", K.cy, "intrinsics");
  read(j, "width", K.width, "intrinsics");
  read(j, "height", K.height, "intrinsics");
  K.validate();
  return K;
}

json to_json(const RigidPose& pose) {
  json R = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) R.push_back(pose.R(r, c));
  return {{"R", R}, {"T", to_json(pose.T)}};
}

RigidPose pose_from_json(const json& j, std::string_view where) {
  const std::string w(where);
  RGBDPS_CHECK(j.contains("R") && j.contains("T"), w + ": pose needs R and T");
  const json& R = j.at("R");
  RGBDPS_CHECK(R.is_array() && R.size() == 9, w + ": R needs 9 numbers");
  RigidPose p;
  try {
    for (int i = 0; i < 9; ++i) p.R(i / 3, i % 3) = R[i].get<double>();
  } catch (const json::exception& e) {
    throw ValidationError(w + ": " + e.what());
  }
  p.T = vec3_from_json(j.at("T"), w + ".T");
  try {
    p.validate(1e-6);
  } catch (const ValidationError& e) {
    throw ValidationError(w + ": " + e.what());
  }
  return p;
}

json read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  RGBDPS_CHECK(in.good(), "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void write_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  RGBDPS_CHECK(out.good(), "cannot write " + path.string());
  out << j.dump(2) << '\n';
  RGBDPS_CHECK(out.good(), "failed writing " + path.string());
}

}  // namespace rgbdps::jsonio

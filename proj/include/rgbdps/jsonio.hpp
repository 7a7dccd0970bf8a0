#pragma once

#include <filesystem>
#include <initializer_list>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "rgbdps/core.hpp"

namespace rgbdps::jsonio {

using nlohmann::json;

// Throws ValidationError naming `where` if `j` is not an object or holds a
// key outside `allowed`.
void require_keys(const json& j, std::initializer_list<std::string_view> allowed,
                  std::string_view where);

// Sets `out` from j[key] when present; type errors become ValidationError.
template <typename T>
void read(const json& j, const char* key, T& out, std::string_view where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string(where) + "." + key + ": " + e.what());
  }
}

json to_json(const Vec3& v);
Vec3 vec3_from_json(const json& j, std::string_view where);

json to_json(const CameraIntrinsics& K);
CameraIntrinsics intrinsics_from_json(const json& j);

// {"R": 9 floats row-major, "T": 3 floats}
json to_json(const RigidPose& pose);
RigidPose pose_from_json(const json& j, std::string_view where);

json read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const json& j);

}  // namespace rgbdps::jsonio

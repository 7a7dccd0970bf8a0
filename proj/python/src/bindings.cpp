#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "rgbdps/io.hpp"
#include "rgbdps/jsonio.hpp"
#include "rgbdps/parallel.hpp"
#include "rgbdps/pipeline.hpp"
#include "rgbdps/shading.hpp"

namespace py = pybind11;
using namespace rgbdps;
namespace pl = rgbdps::pipeline;

namespace {

using json = nlohmann::json;

py::array_t<double> to_array(const Image<Vec3>& img) {
  py::array_t<double> a({img.height(), img.width(), 3});
  auto r = a.mutable_unchecked<3>();
  for (int v = 0; v < img.height(); ++v) {
    for (int u = 0; u < img.width(); ++u) {
      for (int c = 0; c < 3; ++c) r(v, u, c) = img(u, v)[c];
    }
  }
  return a;
}

py::array_t<double> to_array(const Image<double>& img) {
  py::array_t<double> a({img.height(), img.width()});
  auto r = a.mutable_unchecked<2>();
  for (int v = 0; v < img.height(); ++v) {
    for (int u = 0; u < img.width(); ++u) r(v, u) = img(u, v);
  }
  return a;
}

py::array read_pfm(const std::filesystem::path& path) {
  // 1-channel files come back as (H, W), colour as (H, W, 3)
  try {
    return to_array(io::read_pfm_gray(path));
  } catch (const ValidationError&) {
    return to_array(io::read_pfm_rgb(path));
  }
}

void write_pfm_array(const std::filesystem::path& path,
                     py::array_t<double, py::array::c_style | py::array::forcecast> a) {
  if (a.ndim() == 2) {
    auto r = a.unchecked<2>();
    Image<double> img(static_cast<int>(r.shape(1)), static_cast<int>(r.shape(0)));
    for (int v = 0; v < img.height(); ++v) {
      for (int u = 0; u < img.width(); ++u) img(u, v) = r(v, u);
    }
    io::write_pfm(path, img);
  } else if (a.ndim() == 3 && a.shape(2) == 3) {
    auto r = a.unchecked<3>();
    Image<Vec3> img(static_cast<int>(r.shape(1)), static_cast<int>(r.shape(0)));
    for (int v = 0; v < img.height(); ++v) {
      for (int u = 0; u < img.width(); ++u) img(u, v) = Vec3(r(v, u, 0), r(v, u, 1), r(v, u, 2));
    }
    io::write_pfm(path, img);
  } else {
    throw ValidationError("write_pfm: expected an (H, W) or (H, W, 3) array");
  }
}

py::array_t<double> shade_array(const std::string& lighting,
                          py::array_t<double, py::array::c_style | py::array::forcecast> normals) {
  const QuadraticLighting L = lighting_from_json(json::parse(lighting));
  if (normals.ndim() < 1 || normals.shape(normals.ndim() - 1) != 3) {
    throw ValidationError("shade: normals must have a trailing axis of length 3");
  }
  std::vector<py::ssize_t> shape(normals.shape(), normals.shape() + normals.ndim());
  py::array_t<double> out(shape);
  const double* in = normals.data();
  double* o = out.mutable_data();
  const auto n = static_cast<std::size_t>(normals.size() / 3);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 s = shade_rgb(L, Vec3(in[3 * i], in[3 * i + 1], in[3 * i + 2]));
    for (int c = 0; c < 3; ++c) o[3 * i + c] = s[c];
  }
  return out;
}

std::string synthesize(const std::filesystem::path& out, const std::string& options) {
  const json j = json::parse(options);
  synth::SyntheticScene scene =
      j.contains("scene") ? synth::scene_from_json(j["scene"]) : synth::default_scene();
  pl::SynthOptions opt;
  for (const auto& [key, value] : j.items()) {
    if (key == "scene") continue;
    if (key == "frames") {
      const auto pick = pl::parse_frame_range(value.get<std::string>(), static_cast<int>(scene.poses.size()));
      std::vector<RigidPose> poses;
      for (int k : pick) poses.push_back(scene.poses[static_cast<std::size_t>(k)]);
      scene.poses = poses;
    } else if (key == "corrupt_frames") {
      opt.corrupt_frames = value.get<int>();
    } else if (key == "sp_density") {
      opt.sp_density = value.get<double>();
    } else if (key == "perturb_pixels") {
      opt.perturb_pixels = value.get<double>();
    } else if (key == "smooth_depth") {
      opt.depth_smoothing.iterations = value.get<int>();
    } else if (key == "downsample") {
      // coarser camera with the same field of view
      const int f = value.get<int>();
      if (f < 1) throw ValidationError("synthesize: downsample must be at least 1");
      auto& K = scene.K;
      K.width /= f;
      K.height /= f;
      K.fx /= f;
      K.fy /= f;
      K.cx = (K.width - 1) / 2.0;
      K.cy = (K.height - 1) / 2.0;
    } else if (key == "seed") {
      opt.seed = value.get<std::uint64_t>();
    } else {
      throw ValidationError("synthesize: unknown option '" + key + "'");
    }
  }
  pl::write_synthetic_dataset(out, scene, opt);
  return jsonio::read_file(out / "manifest.json").dump();
}

std::string run_pipeline(const std::filesystem::path& dataset, const std::filesystem::path& out,
                         const std::string& config, const std::string& frames) {
  const pl::PipelineConfig cfg = pl::config_from_json(json::parse(config));
  const pl::DatasetManifest m = pl::read_manifest(dataset);
  pl::Dataset d;
  {
    py::gil_scoped_release release;
    d = pl::load_dataset(m, pl::parse_frame_range(frames, static_cast<int>(m.frames.size())));
  }
  pl::PipelineRun run;
  {
    py::gil_scoped_release release;
    run = pl::run_pipeline(d, cfg, out);
  }
  return run.metrics.dump();
}

}  // namespace

PYBIND11_MODULE(_rgbdps, m) {
  m.doc() = "Depth refinement and albedo recovery from posed RGB-D key frames";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<StageError>(m, "StageError", PyExc_RuntimeError);

  m.attr("METRICS_SCHEMA_VERSION") = pl::kMetricsSchemaVersion;

  m.def("set_max_threads", &set_max_threads, py::arg("n"));
  m.def("max_threads", &max_threads);
  m.def("parse_frame_range", &pl::parse_frame_range, py::arg("spec"), py::arg("count"));
  m.def("default_config", [] { return pl::config_to_json(pl::PipelineConfig{}).dump(); });
  m.def("check_config", [](const std::string& c) { return pl::config_to_json(pl::config_from_json(json::parse(c))).dump(); });
  m.def("default_scene", [] { return synth::scene_to_json(synth::default_scene()).dump(); });
  m.def("shade", &shade_array, py::arg("lighting"), py::arg("normals"));
  m.def("rotate_lighting",
        [](const std::string& lighting, const Mat3& R) {
          return to_json(rotate_lighting(lighting_from_json(json::parse(lighting)), R)).dump();
        },
        py::arg("lighting"), py::arg("R"));
  m.def("read_pfm", &read_pfm, py::arg("path"));
  m.def("write_pfm", &write_pfm_array, py::arg("path"), py::arg("array"));
  m.def("synthesize", &synthesize, py::arg("out"), py::arg("options"));
  m.def("run_pipeline", &run_pipeline, py::arg("dataset"), py::arg("out"), py::arg("config"),
        py::arg("frames"));
}

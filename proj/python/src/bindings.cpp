#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "apbface/data_kit.hpp"
#include "apbface/error.hpp"
#include "apbface/infer_service.hpp"
#include "apbface/landmark_render.hpp"
#include "apbface/metrics.hpp"
#include "apbface/signal_audio.hpp"

namespace py = pybind11;
using namespace apb;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;

LandmarkSet points_of(const F64& pts) {
  if (pts.ndim() != 2 || pts.shape(1) != 2) throw ConfigError("points must have shape (N, 2)");
  LandmarkSet l;
  const auto r = pts.unchecked<2>();
  for (py::ssize_t i = 0; i < r.shape(0); ++i) l.points.push_back({r(i, 0), r(i, 1)});
  if (l.size() >= 15) l.groups = synth_groups(static_cast<int>(l.size()));
  return l;
}

py::array_t<std::uint8_t> grid_u8(const Grid<std::uint8_t>& g) {
  py::array_t<std::uint8_t> out({g.height, g.width});
  std::copy(g.data.begin(), g.data.end(), out.mutable_data());
  return out;
}

FaceImage face_of(const F64& a) {
  if (a.ndim() != 3) throw ConfigError("images must have shape (H, W, C)");
  FaceImage f(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
  std::copy(a.data(), a.data() + a.size(), f.data.begin());
  return f;
}

Gaussian gaussian_of(const F64& mean, const F64& cov) {
  Gaussian g;
  g.mean.assign(mean.data(), mean.data() + mean.size());
  g.cov.assign(cov.data(), cov.data() + cov.size());
  return g;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Audio, pose and blink driven face reenactment core";
  m.attr("pipeline_version") = kPipelineVersion;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def(
      "mfcc",
      [](const F64& samples, int sample_rate, long frame) {
        const FeatureConfig fc;
        AudioTrack t;
        t.sample_rate = sample_rate;
        t.samples.assign(samples.data(), samples.data() + samples.size());
        if (t.sample_rate != fc.sample_rate) t = resample(t, fc.sample_rate);
        const auto f = extract_mfcc(window_for_frame(t, frame, fc), fc);
        py::array_t<double> out({f.frames, f.coeffs});
        std::copy(f.values.begin(), f.values.end(), out.mutable_data());
        return out;
      },
      py::arg("samples"), py::arg("sample_rate"), py::arg("frame"),
      "MFCC grid (T, C) for one video frame's audio window under the default feature config.");

  m.def(
      "rasterize", [](const F64& pts, int resolution, int radius) { return grid_u8(rasterize(points_of(pts), resolution, radius)); },
      py::arg("points"), py::arg("resolution"), py::arg("radius") = 1);
  m.def(
      "face_mask",
      [](const F64& pts, int resolution, int radius) { return grid_u8(face_mask(points_of(pts), resolution, radius)); },
      py::arg("points"), py::arg("resolution"), py::arg("radius"));
  m.def(
      "ssim", [](const F64& a, const F64& b) { return ssim(face_of(a), face_of(b)); }, py::arg("a"), py::arg("b"));
  m.def(
      "frechet",
      [](const F64& m1, const F64& c1, const F64& m2, const F64& c2) {
        return frechet_distance(gaussian_of(m1, c1), gaussian_of(m2, c2));
      },
      py::arg("mean1"), py::arg("cov1"), py::arg("mean2"), py::arg("cov2"));
  m.def(
      "synth_dataset",
      [](const std::string& out_dir, int n_samples, std::uint64_t seed) {
        SynthConfig c;
        c.n_samples = n_samples;
        c.seed = seed;
        return synth_dataset(c, out_dir).entries.size();
      },
      py::arg("out_dir"), py::arg("n_samples") = 200, py::arg("seed") = 7);

  py::class_<InferenceEngine>(m, "Engine")
      .def(py::init([](const std::string& config_path) {
             return std::make_unique<InferenceEngine>(ServiceConfig::load(config_path));
           }),
           py::arg("config_path"))
      .def("identities", &InferenceEngine::identities)
      .def("ready", &InferenceEngine::ready)
      .def(
          "handle",
          [](InferenceEngine& e, const std::string& method, const std::string& path, const std::string& body) {
            HttpReply r;
            {
              py::gil_scoped_release nogil;
              r = handle_request(e, method, path, body);
            }
            return py::make_tuple(r.status, r.body);
          },
          py::arg("method"), py::arg("path"), py::arg("body") = "",
          "Dispatches one request exactly as the HTTP server would; returns (status, body).");
}

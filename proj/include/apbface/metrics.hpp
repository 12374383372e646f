#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "apbface/image.hpp"
#include "apbface/landmarks.hpp"

namespace apb {

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double dynamic_range = 2.0;  // images in [-1, 1]
  double k1 = 0.01;
  double k2 = 0.03;
};

// Mean SSIM over all valid window positions and channels.
double ssim(const FaceImage& a, const FaceImage& b, const SsimOptions& opt = {});

struct Gaussian {
  std::vector<double> mean;
  std::vector<double> cov;  // d x d row-major
  int dim() const { return static_cast<int>(mean.size()); }
};

Gaussian fit_gaussian(std::span<const std::vector<double>> samples);

// ||mu1 - mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}).
double frechet_distance(const Gaussian& a, const Gaussian& b);

// Stand-in embedder for the Frechet path: average-pools the image to pool x pool cells per channel.
std::vector<double> pixel_statistics_embedding(const FaceImage& img, int pool = 8);

struct Detection {
  bool detected = false;
  std::optional<LandmarkSet> landmarks;
  std::optional<PoseTriple> pose;
  std::optional<BlinkPair> blink;
};

using DetectorInterface = std::function<Detection(const FaceImage&)>;

struct GeneratedSample {
  FaceImage face;
  LandmarkSet gt_landmarks;
  PoseTriple gt_pose;
  BlinkPair gt_blink;
};

struct MetricsReport {
  std::size_t n_samples = 0;
  std::size_t n_detected = 0;
  double dr = 0.0;
  std::optional<double> ale;  // pixels
  std::optional<double> ape;  // radians
  std::optional<double> abe;  // ratio units
  std::optional<double> ssim;
  std::optional<double> frechet;
  double pixel_scale = 0.0;

  nlohmann::json to_json() const;
};

// Pairwise (cascade) summation for a fixed reduction order.
double pairwise_sum(std::span<const double> v);

// DR, ALE, APE and ABE by re-detecting attributes on the generated faces. Landmark errors are mean
// absolute coordinate differences scaled by pixel_scale.
MetricsReport evaluate_generated(std::span<const GeneratedSample> samples, const DetectorInterface& detector,
                                 double pixel_scale);

}  // namespace apb

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apbface/image.hpp"
#include "apbface/landmarks.hpp"
#include "apbface/metrics.hpp"
#include "apbface/signal_audio.hpp"

namespace apb {

// ---------------------------------------------------------------- preprocessing

struct CropBox {
  double x0 = 0, y0 = 0, side = 0;  // frame pixel units
};

// Square of 1.4 x the larger landmark bbox side, centered on the bbox center.
CropBox crop_box_for(const std::vector<Point2>& frame_landmarks, double scale = 1.4);

struct CroppedFace {
  Grid<double> image;
  LandmarkSet landmarks;  // normalized to [0, 1] over the crop
  CropBox box;
};

// Crops and bilinearly resizes to out_resolution; samples beyond the frame take pad_value.
// frame_landmarks are continuous frame-pixel coordinates (pixel (c, r) spans [c, c+1) x [r, r+1)).
CroppedFace crop_face(const Grid<double>& frame, const LandmarkSet& frame_landmarks, int out_resolution = 256,
                      double pad_value = -1.0);

// Eye height / width, measured at the normalized 256 x 256 scale.
double blink_ratio(const std::vector<Point2>& eye_points);

// ---------------------------------------------------------------- synthetic faces

// Per-identity geometry and colors of the schematic face. All lengths normalized to the crop.
struct FaceStyle {
  double eye_dx = 0.16;     // half the inter-eye distance
  double eye_y = -0.06;     // eye line offset from the face center
  double eye_w = 0.12;
  double mouth_y = 0.16;
  double mouth_w = 0.155;
  double contour_ax = 0.28, contour_ay = 0.32, contour_cy = 0.02;
  double skin_ax = 0.31, skin_ay = 0.37, skin_cy = -0.03;
  std::array<double, 3> background{-0.6, -0.5, -0.4};
  std::array<double, 3> skin_delta{1.0, 0.8, 0.6};
  std::array<double, 3> eye_delta{-0.7, -0.4, 0.2};
  std::array<double, 3> mouth_delta{0.3, -0.6, -0.4};

  nlohmann::json to_json() const;
  static FaceStyle from_json(const nlohmann::json& j);
};

// Constants shared by the generator and the oracle detector.
struct SynthGeometry {
  double yaw_gain = 0.16;    // normalized x shift per radian of yaw
  double pitch_gain = 0.12;  // normalized y shift per radian of pitch
  double mouth_h_min = 0.01;
  double mouth_h_span = 0.08;
  double blob_sigma_min = 1.5;  // pixels
  double blob_sigma_gain = 0.5;  // pixels of sigma per pixel of feature height
  double blob_sigma_x_ratio = 0.22;
  double skin_edge_px = 1.5;
};

IndexGroups synth_groups(int landmark_count);
FaceStyle random_style(std::mt19937_64& rng);

struct FaceControls {
  double mouth_open = 0.0;  // m in [0, 1]
  PoseTriple pose;
  BlinkPair blink;
};

LandmarkSet synth_landmarks(const FaceStyle& style, const FaceControls& c, int landmark_count,
                            const SynthGeometry& g = {});
// Deterministic rendering of a landmark set as soft filled shapes in the identity's colors.
FaceImage render_face(const FaceStyle& style, const LandmarkSet& l, int resolution, const SynthGeometry& g = {});

struct OracleDetectorOptions {
  double fit_threshold = 0.15;      // layer values below this are ignored by the blob fits
  double peak_fraction = 0.3;       // each blob fit keeps pixels >= this fraction of the blob's peak
  double eye_distance_tolerance = 0.3;
  double mouth_offset_tolerance = 0.08;
};

struct OracleDecode {
  Detection detection;
  std::optional<double> mouth_open;
};

// Inverts the synthetic construction: unmixes the color layers, fits the eye and mouth blobs and
// solves for pose, blink and mouth openness.
OracleDecode decode_synthetic_face(const FaceImage& face, const FaceStyle& style, int landmark_count,
                                   const OracleDetectorOptions& opt = {}, const SynthGeometry& g = {});
DetectorInterface make_oracle_detector(FaceStyle style, int landmark_count, OracleDetectorOptions opt = {});

struct AudioRule {
  double base_hz = 200.0;
  double span_hz = 600.0;
  double amp_lo = 0.3, amp_hi = 0.9;
  double noise = 0.005;
};

// One audio window whose tone frequency encodes mouth openness.
AudioTrack synth_audio_window(double mouth_open, const FeatureConfig& cfg, const AudioRule& rule, std::mt19937_64& rng);

// ---------------------------------------------------------------- samples and manifests

struct Sample {
  MfccFeature mfcc;
  PoseTriple pose;
  BlinkPair blink;
  LandmarkSet landmarks;
  FaceImage face;
  std::string identity;
  long frame_index = 0;
  std::optional<double> mouth_open;
};

struct ManifestEntry {
  std::string file;  // relative to the dataset root
  std::string identity;
  std::string split;  // train | val | test
  long frame_index = 0;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct IdentityInfo {
  std::string name;
  std::optional<FaceStyle> style;  // present for synthetic identities
};

struct DatasetManifest {
  int schema_version = 1;
  std::string pipeline_version;
  FeatureConfig feature_config;
  int resolution = 64;
  int landmark_count = 20;
  IndexGroups groups;
  std::vector<IdentityInfo> identities;
  std::vector<ManifestEntry> entries;
  nlohmann::json provenance;  // generator config, source paths

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  std::vector<std::size_t> split_indices(const std::string& split, const std::string& identity = "") const;
  const IdentityInfo& identity(const std::string& name) const;
};

bool manifests_equal(const DatasetManifest& a, const DatasetManifest& b);

nlohmann::json feature_config_to_json(const FeatureConfig& c);
FeatureConfig feature_config_from_json(const nlohmann::json& j);

void save_manifest(const std::filesystem::path& root, const DatasetManifest& m);
// Checks that every referenced sample file exists and splits are disjoint.
DatasetManifest load_manifest(const std::filesystem::path& root);

void save_sample(const std::filesystem::path& path, const Sample& s);
Sample load_sample(const std::filesystem::path& path, const DatasetManifest& m, const ManifestEntry& e);

struct Dataset {
  std::filesystem::path root;
  DatasetManifest manifest;
  std::vector<Sample> samples;  // parallel to manifest.entries
};

Dataset load_dataset(const std::filesystem::path& root);

struct SynthConfig {
  int n_samples = 2000;  // total, split evenly across identities
  int n_identities = 2;
  int resolution = 64;
  int landmark_count = 20;
  std::uint64_t seed = 7;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  AudioRule audio;
  FeatureConfig features;

  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

// Generates and writes a synthetic dataset under out_dir; returns its manifest.
DatasetManifest synth_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);
// Same samples in memory without touching disk.
Dataset synth_dataset_in_memory(const SynthConfig& cfg);

// Real-footage path: frames + per-frame landmark/pose annotations + a WAV track.
struct PreprocessOptions {
  int resolution = 256;
  FeatureConfig features;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
};
DatasetManifest preprocess_frames(const std::filesystem::path& frames_dir, const std::filesystem::path& annotations,
                                  const std::filesystem::path& audio, const std::filesystem::path& out_dir,
                                  const PreprocessOptions& opt = {});

// Shuffled batches of manifest indices; order is a function of (seed, epoch) only.
class BatchIterator {
 public:
  BatchIterator(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::vector<std::size_t>> epoch(std::uint64_t epoch_index) const;
  std::size_t size() const { return indices_.size(); }

 private:
  std::vector<std::size_t> indices_;
  std::size_t batch_size_;
  std::uint64_t seed_;
};

}  // namespace apb

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "apbface/data_kit.hpp"
#include "apbface/geometry_net.hpp"
#include "apbface/metrics.hpp"
#include "apbface/objectives.hpp"
#include "apbface/reenact_net.hpp"

namespace apb {

struct StageConfig {
  double lr = 3e-4;
  double beta1 = 0.99;
  double beta2 = 0.999;
  int epochs = 1000;
  int batch = 32;

  void validate(const char* stage) const;
  nlohmann::json to_json() const;
  static StageConfig from_json(const nlohmann::json& j, StageConfig defaults);
};

struct TrainConfig {
  StageConfig predictor{3e-4, 0.99, 0.999, 1000, 32};
  StageConfig reenactor{2e-4, 0.5, 0.999, 100, 16};
  std::uint64_t seed = 7;
  bool with_adversary = true;
  LossWeights weights;
  // Width presets ("default" or "toy") or explicit arch objects; data-dependent sizes come from the manifest.
  nlohmann::json predictor_arch = "default";
  nlohmann::json reenactor_arch = "default";
  int checkpoint_every = 0;   // epochs; 0 disables periodic checkpoints
  int sample_grid_every = 0;  // epochs; 0 disables PNG grids
  int threads = 1;
  bool log_steps = true;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

PredictorArch resolve_predictor_arch(const nlohmann::json& spec, const DatasetManifest& m);
ReenactorArch resolve_reenactor_arch(const nlohmann::json& spec, const DatasetManifest& m);

struct EpochRecord {
  int epoch = 0;
  LossReport generator;  // step means
  std::optional<LossReport> discriminator;
  double wall_seconds = 0.0;
  std::optional<double> validation;  // val ALE (px) or val masked L1

  nlohmann::json to_json() const;
};

struct TrainHistory {
  std::string stage;
  std::string identity;
  std::vector<EpochRecord> epochs;
  nlohmann::json probes = nlohmann::json::object();

  nlohmann::json to_json() const;
  // Per-epoch generator totals in order; compares bit-exactly across runs.
  std::vector<double> trajectory() const;
};

// Stacked per-identity tensors for one split.
struct SplitTensors {
  torch::Tensor mfcc;             // [n, T, C]
  torch::Tensor pose;             // [n, 3]
  torch::Tensor blink;            // [n, 2]
  torch::Tensor landmarks;        // [n, 2N] normalized
  torch::Tensor faces;            // [n, 3, R, R]
  torch::Tensor landmark_images;  // [n, 1, R, R]
  torch::Tensor masks;            // [n, 1, R, R]
  std::vector<std::size_t> rows;  // dataset sample indices
  std::int64_t size() const { return mfcc.defined() ? mfcc.size(0) : 0; }
};

SplitTensors stack_split(const Dataset& d, const std::string& split, const std::string& identity, bool with_images);

// Training log sink: one JSON object per line.
class JsonlLog {
 public:
  JsonlLog() = default;
  explicit JsonlLog(const std::filesystem::path& path);
  void write(const nlohmann::json& j);
  bool enabled() const { return out_ != nullptr; }

 private:
  std::unique_ptr<std::ofstream> out_;
};

class PredictorTrainer {
 public:
  PredictorTrainer(const TrainConfig& cfg, const Dataset& data, const std::string& identity,
                   std::optional<std::filesystem::path> out_dir = std::nullopt);

  // One alternating D/G update on the given training rows (positions into the train split).
  // Returns the generator report; the discriminator report of the same step is last_discriminator_report().
  LossReport step(const std::vector<std::size_t>& batch);
  const std::optional<LossReport>& last_discriminator_report() const { return last_d_; }
  EpochRecord run_epoch();
  void train();  // runs the remaining configured epochs

  double validation_ale_px();
  void save(const std::filesystem::path& path);
  void load(const std::filesystem::path& path);

  GeometryPredictor& model() { return model_; }
  LandmarkDiscriminator& discriminator() { return disc_; }
  const TrainHistory& history() const { return history_; }
  int epoch() const { return epoch_; }
  const PredictorArch& arch() const { return arch_; }
  double pixel_scale() const { return pixel_scale_; }

 private:
  nlohmann::json meta() const;
  void write_grid();

  TrainConfig cfg_;
  const Dataset& data_;
  std::string identity_;
  std::optional<std::filesystem::path> out_dir_;
  PredictorArch arch_;
  GeometryPredictor model_{nullptr};
  LandmarkDiscriminator disc_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_, opt_d_;
  SplitTensors train_, val_;
  BatchIterator batches_;
  double pixel_scale_;
  int epoch_ = 0;
  long step_count_ = 0;
  TrainHistory history_;
  JsonlLog log_;
  std::optional<LossReport> last_d_;
  torch::Tensor early_fake_;  // val predictions after the first epoch
};

class ReenactorTrainer {
 public:
  ReenactorTrainer(const TrainConfig& cfg, const Dataset& data, const std::string& identity,
                   std::optional<std::filesystem::path> out_dir = std::nullopt);

  LossReport step(const std::vector<std::size_t>& batch);
  const std::optional<LossReport>& last_discriminator_report() const { return last_d_; }
  EpochRecord run_epoch();
  void train();

  double validation_masked_l1();
  void save(const std::filesystem::path& path);
  void load(const std::filesystem::path& path);

  FaceReenactor& model() { return model_; }
  PatchDiscriminator& discriminator() { return disc_; }
  const TrainHistory& history() const { return history_; }
  int epoch() const { return epoch_; }
  const ReenactorArch& arch() const { return arch_; }

 private:
  nlohmann::json meta() const;
  void write_grid();

  TrainConfig cfg_;
  const Dataset& data_;
  std::string identity_;
  std::optional<std::filesystem::path> out_dir_;
  ReenactorArch arch_;
  FaceReenactor model_{nullptr};
  PatchDiscriminator disc_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_, opt_d_;
  SplitTensors train_, val_;
  BatchIterator batches_;
  int epoch_ = 0;
  long step_count_ = 0;
  TrainHistory history_;
  JsonlLog log_;
  std::optional<LossReport> last_d_;
};

// Inference-side models restored from checkpoints.
struct LoadedPredictor {
  GeometryPredictor model{nullptr};
  PredictorArch arch;
  IndexGroups groups;
  FeatureConfig features;
  int resolution = 0;
  std::string identity;
  int epoch = 0;
};
struct LoadedReenactor {
  FaceReenactor model{nullptr};
  ReenactorArch arch;
  std::string identity;
  int epoch = 0;
};

// Restores in inference mode; a non-null expected arch must match the stored one.
LoadedPredictor load_predictor(const std::filesystem::path& path, const PredictorArch* expected = nullptr);
LoadedReenactor load_reenactor(const std::filesystem::path& path, const ReenactorArch* expected = nullptr);

struct StageResult {
  std::filesystem::path checkpoint;
  TrainHistory history;
};

StageResult train_predictor(const TrainConfig& cfg, const Dataset& data, const std::string& identity,
                            const std::filesystem::path& out_dir);
StageResult train_reenactor(const TrainConfig& cfg, const Dataset& data, const std::string& identity,
                            const std::filesystem::path& out_dir);

double pearson(const std::vector<double>& a, const std::vector<double>& b);

struct IdentityEvaluation {
  std::string identity;
  std::size_t n_eval = 0;
  double val_ale_px = 0.0;            // predicted vs ground-truth landmarks
  double mean_landmark_ale_px = 0.0;  // training-mean landmark baseline
  double masked_l1 = 0.0;             // reenact(rasterize(gt)) vs gt face inside the face mask
  double mean_image_masked_l1 = 0.0;  // training-mean face baseline
  std::vector<double> pose_r;         // yaw, pitch, roll
  std::vector<double> blink_r;        // left, right
  std::vector<double> cross_pose_r;   // driven by another identity's signals
  MetricsReport generated;            // full pipeline, re-detected with the oracle
  double eye_extent_closed = 0.0, eye_extent_open = 0.0;

  nlohmann::json to_json() const;
};

// Evaluates one identity on a split with the full predict -> rasterize -> reenact path.
// driver supplies the cross-identity signals (another identity's rows of the same split).
IdentityEvaluation evaluate_identity(const Dataset& data, const std::string& identity, LoadedPredictor& predictor,
                                     LoadedReenactor& reenactor, const std::string& split,
                                     const std::string& driver_identity);

struct PipelineOptions {
  std::string eval_split = "val";
  bool reuse_checkpoints = true;  // skip training when both checkpoints already exist
};

struct PipelineResult {
  std::vector<IdentityEvaluation> identities;
  std::vector<StageResult> stages;
  MetricsReport overall;
  double wall_seconds = 0.0;
  nlohmann::json to_json() const;
};

PipelineResult run_pipeline(const TrainConfig& cfg, const Dataset& data, const std::filesystem::path& out_dir,
                            const PipelineOptions& opt = {});

std::filesystem::path predictor_checkpoint_path(const std::filesystem::path& out_dir, const std::string& identity);
std::filesystem::path reenactor_checkpoint_path(const std::filesystem::path& out_dir, const std::string& identity);

}  // namespace apb

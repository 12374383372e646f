#pragma once

#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "apbface/landmarks.hpp"
#include "apbface/signal_audio.hpp"

namespace apb {

struct PredictorArch {
  int landmark_count = 20;
  int n_fft_frames = 16;  // T
  int n_mfcc = 20;        // C
  std::vector<int> audio_channels{16, 32, 64, 64, 64};
  int time_channels = 64;
  int time_layers = 5;
  int audio_feature = 256;
  std::vector<int> pose_widths{32, 64, 64, 64};
  std::vector<int> blink_widths{32, 32, 32};
  int fusion_hidden = 256;
  std::vector<int> disc_widths{256, 256, 128, 128, 64, 32};  // a final width-1 layer follows

  int fusion_width() const { return audio_feature + pose_widths.back() + blink_widths.back(); }
  void validate() const;
  nlohmann::json to_json() const;
  static PredictorArch from_json(const nlohmann::json& j);

  // Reduced widths for single-core desk training; layer counts unchanged.
  static PredictorArch toy(int landmark_count = 20);
  static PredictorArch micro();

  friend bool operator==(const PredictorArch&, const PredictorArch&) = default;
};

struct BranchFeatures {
  torch::Tensor audio;  // [B, audio_feature]
  torch::Tensor pose;   // [B, pose_widths.back()]
  torch::Tensor blink;  // [B, blink_widths.back()]
};

class GeometryPredictorImpl : public torch::nn::Module {
 public:
  explicit GeometryPredictorImpl(PredictorArch arch);

  // mfcc [B, T, C] (raw, normalized internally), pose [B, 3], blink [B, 2].
  BranchFeatures encode_branches(const torch::Tensor& mfcc, const torch::Tensor& pose, const torch::Tensor& blink);
  // Returns [B, 2N] normalized coordinates, interleaved x, y.
  torch::Tensor forward(const torch::Tensor& mfcc, const torch::Tensor& pose, const torch::Tensor& blink);

  // Per-coefficient audio standardization; stored with the parameters.
  void set_audio_normalization(const torch::Tensor& mean, const torch::Tensor& std);
  void set_control_normalization(const torch::Tensor& pose_mean, const torch::Tensor& pose_std,
                                 const torch::Tensor& blink_mean, const torch::Tensor& blink_std);
  // forward() returns fusion output + offset, so a zero head predicts the offset shape.
  void set_landmark_offset(const torch::Tensor& offset);

  const PredictorArch& arch() const { return arch_; }

 private:
  PredictorArch arch_;
  torch::nn::Sequential audio_conv_{nullptr};
  torch::nn::Sequential audio_time_{nullptr};
  torch::nn::Linear audio_fc_{nullptr};
  torch::nn::Sequential pose_mlp_{nullptr};
  torch::nn::Sequential blink_mlp_{nullptr};
  torch::nn::Linear fusion_hidden_{nullptr};
  torch::nn::Linear fusion_out_{nullptr};
  torch::Tensor audio_mean_, audio_std_;
  torch::Tensor pose_mean_, pose_std_, blink_mean_, blink_std_;
  torch::Tensor landmark_offset_;
  int flat_width_ = 0;
};
TORCH_MODULE(GeometryPredictor);

// Unconditional landmark discriminator: [B, 2N] pixel-unit coordinates -> [B] logits.
class LandmarkDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit LandmarkDiscriminatorImpl(PredictorArch arch);
  torch::Tensor forward(const torch::Tensor& flat_landmarks);
  const PredictorArch& arch() const { return arch_; }

 private:
  PredictorArch arch_;
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(LandmarkDiscriminator);

// Normal(0, 0.02) weights and zero biases for every conv and linear layer; batch-norm scales Normal(1, 0.02).
void init_weights(torch::nn::Module& m);
void zero_parameters(torch::nn::Module& m);

// Single-sample helpers over the domain types.
torch::Tensor mfcc_tensor(const MfccFeature& f);  // [1, T, C]
torch::Tensor pose_tensor(const PoseTriple& p);   // [1, 3]
torch::Tensor blink_tensor(const BlinkPair& b);   // [1, 2]

LandmarkSet predict_landmarks(GeometryPredictor& model, const MfccFeature& audio, const PoseTriple& pose,
                              const BlinkPair& blink, const IndexGroups& groups);
double discriminate_landmarks(LandmarkDiscriminator& d, const LandmarkSet& l, double pixel_scale);

}  // namespace apb

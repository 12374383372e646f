#pragma once

#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "apbface/image.hpp"

namespace apb {

struct ReenactorArch {
  int resolution = 64;
  int depth = 0;  // encoder levels; 0 means log2(resolution) - 2
  int base_channels = 0;  // 0 means 64 * resolution / 256, at least 4
  int max_channels = 512;
  int disc_base = 0;  // 0 means base_channels
  int disc_layers = 3;  // stride-2 blocks in the patch discriminator
  bool skips = true;

  int resolved_depth() const;
  int resolved_base() const;
  int resolved_disc_base() const;
  int channels_at(int level) const;  // encoder output channels at level
  // Logit grid side of the patch discriminator.
  int patch_grid() const;
  void validate() const;
  nlohmann::json to_json() const;
  static ReenactorArch from_json(const nlohmann::json& j);
  static ReenactorArch toy(int resolution = 64);
  static ReenactorArch micro();

  friend bool operator==(const ReenactorArch&, const ReenactorArch&) = default;
};

// Encoder-decoder with skip connections: [B, 1, R, R] landmark image -> [B, 3, R, R] in [-1, 1].
class FaceReenactorImpl : public torch::nn::Module {
 public:
  explicit FaceReenactorImpl(ReenactorArch arch);
  torch::Tensor forward(const torch::Tensor& landmark_image);
  const ReenactorArch& arch() const { return arch_; }
  // Drops one encoder-to-decoder skip (replaced by zeros); for wiring checks.
  void disable_skip(int level) { disabled_skip_ = level; }

 private:
  ReenactorArch arch_;
  std::vector<torch::nn::Sequential> down_;
  std::vector<torch::nn::Sequential> up_;
  int disabled_skip_ = -1;
};
TORCH_MODULE(FaceReenactor);

// Conditional patch discriminator over cat(landmark image, face): [B, 4, R, R] -> [B, 1, g, g] logits.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit PatchDiscriminatorImpl(ReenactorArch arch);
  torch::Tensor forward(const torch::Tensor& landmark_image, const torch::Tensor& face);
  const ReenactorArch& arch() const { return arch_; }

 private:
  ReenactorArch arch_;
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

torch::Tensor binary_image_tensor(const BinaryImage& img);  // [1, 1, R, R] of {0, 1}
torch::Tensor face_tensor(const FaceImage& img);            // [1, 3, R, R]
FaceImage tensor_to_face(const torch::Tensor& t);          // [3, R, R] or [1, 3, R, R]

FaceImage reenact(FaceReenactor& model, const BinaryImage& landmark_image);

}  // namespace apb

#pragma once

#include <map>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace apb {

struct LossWeights {
  double predictor_l1 = 100.0;
  double predictor_adv = 0.1;
  double reenactor_l1 = 100.0;
  double reenactor_mask = 100.0;
  double reenactor_adv = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

// Named scalar terms, their weights and the weighted total.
struct LossReport {
  std::map<std::string, double> terms;
  std::map<std::string, double> weights;
  double total = 0.0;

  // Throws unless total equals the weighted sum within 1e-9 relative and every value is finite.
  void check() const;
  nlohmann::json to_json() const;
  std::string to_jsonl(const nlohmann::json& extra = {}) const;
};

torch::Tensor l1_loss(const torch::Tensor& a, const torch::Tensor& b);
// Mean of |a - b| over mask-white pixels; the mean is normalized by white pixels x channels.
// a, b are [B, C, H, W]; mask is [B, 1, H, W] or [1, 1, H, W] of {0, 1}.
torch::Tensor masked_l1_loss(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask);

// 0.5 [BCE(real, 1) + BCE(fake, 0)] from logits; logit maps are averaged.
torch::Tensor gan_d_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
// Non-saturating generator objective BCE(fake, 1).
torch::Tensor gan_g_loss(const torch::Tensor& fake_logits);

struct WeightedLoss {
  torch::Tensor total;
  LossReport report;
};

// pred/gt are flattened normalized landmarks [B, 2N]; the L1 term is in pixels (x pixel_scale).
WeightedLoss predictor_loss(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& fake_logit,
                            const LossWeights& w, double pixel_scale);
WeightedLoss predictor_l1_only(const torch::Tensor& pred, const torch::Tensor& gt, const LossWeights& w,
                               double pixel_scale);
WeightedLoss reenactor_loss(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& mask,
                            const torch::Tensor& fake_logit_map, const LossWeights& w);
WeightedLoss discriminator_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);

}  // namespace apb

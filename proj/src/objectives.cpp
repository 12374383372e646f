#include "apbface/objectives.hpp"

#include <cmath>

#include "apbface/error.hpp"

namespace apb {

namespace {

void require_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) throw DataError(std::string(what) + ": non-finite logit");
}

double scalar(const torch::Tensor& t) { return t.detach().to(torch::kFloat64).item<double>(); }

}  // namespace

void LossWeights::validate() const {
  for (double v : {predictor_l1, predictor_adv, reenactor_l1, reenactor_mask, reenactor_adv}) {
    if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
  }
}

nlohmann::json LossWeights::to_json() const {
  return {{"predictor", {{"l1", predictor_l1}, {"adv", predictor_adv}}},
          {"reenactor", {{"l1", reenactor_l1}, {"mask", reenactor_mask}, {"adv", reenactor_adv}}}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  if (j.contains("predictor")) {
    w.predictor_l1 = j["predictor"].value("l1", w.predictor_l1);
    w.predictor_adv = j["predictor"].value("adv", w.predictor_adv);
  }
  if (j.contains("reenactor")) {
    w.reenactor_l1 = j["reenactor"].value("l1", w.reenactor_l1);
    w.reenactor_mask = j["reenactor"].value("mask", w.reenactor_mask);
    w.reenactor_adv = j["reenactor"].value("adv", w.reenactor_adv);
  }
  w.validate();
  return w;
}

void LossReport::check() const {
  double sum = 0.0;
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) throw DataError("loss term '" + name + "' is not finite");
    auto it = weights.find(name);
    if (it == weights.end()) throw ConfigError("loss term '" + name + "' has no weight");
    sum += it->second * v;
  }
  if (!std::isfinite(total)) throw DataError("loss total is not finite");
  if (std::abs(total - sum) > 1e-9 * std::max(1.0, std::abs(sum))) throw DataError("loss total does not recompose");
}

nlohmann::json LossReport::to_json() const { return {{"terms", terms}, {"weights", weights}, {"total", total}}; }

std::string LossReport::to_jsonl(const nlohmann::json& extra) const {
  auto j = to_json();
  if (extra.is_object()) j.update(extra);
  return j.dump();
}

torch::Tensor l1_loss(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw ConfigError("l1_loss: shape mismatch");
  return (a - b).abs().mean();
}

torch::Tensor masked_l1_loss(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask) {
  if (a.sizes() != b.sizes()) throw ConfigError("masked_l1_loss: shape mismatch");
  if (a.dim() != 4 || mask.dim() != 4 || mask.size(1) != 1 || mask.size(2) != a.size(2) || mask.size(3) != a.size(3) ||
      (mask.size(0) != a.size(0) && mask.size(0) != 1)) {
    throw ConfigError("masked_l1_loss: mask shape mismatch");
  }
  const auto m = mask.to(a.options()).expand({a.size(0), 1, a.size(2), a.size(3)});
  const auto white = m.sum();
  if (scalar(white) <= 0) throw DataError("empty mask");
  return ((a - b).abs() * m).sum() / (white * a.size(1));
}

torch::Tensor gan_d_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  require_finite(real_logits, "gan_d_loss");
  require_finite(fake_logits, "gan_d_loss");
  const auto real = torch::binary_cross_entropy_with_logits(real_logits, torch::ones_like(real_logits));
  const auto fake = torch::binary_cross_entropy_with_logits(fake_logits, torch::zeros_like(fake_logits));
  return 0.5 * (real + fake);
}

torch::Tensor gan_g_loss(const torch::Tensor& fake_logits) {
  require_finite(fake_logits, "gan_g_loss");
  return torch::binary_cross_entropy_with_logits(fake_logits, torch::ones_like(fake_logits));
}

namespace {

WeightedLoss compose(std::vector<std::tuple<std::string, double, torch::Tensor>> parts) {
  WeightedLoss out;
  for (auto& [name, w, t] : parts) {
    const auto term = w * t;
    out.total = out.total.defined() ? out.total + term : term;
    out.report.terms[name] = scalar(t);
    out.report.weights[name] = w;
  }
  // The reported total is the recomposed sum so the identity holds in double.
  double sum = 0.0;
  for (const auto& [name, v] : out.report.terms) sum += out.report.weights[name] * v;
  out.report.total = sum;
  out.report.check();
  const double tol = out.total.scalar_type() == torch::kFloat64 ? 1e-9 : 1e-5;
  if (std::abs(scalar(out.total) - sum) > tol * std::max(1.0, std::abs(sum))) {
    throw DataError("loss total does not recompose");
  }
  return out;
}

}  // namespace

WeightedLoss predictor_loss(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& fake_logit,
                            const LossWeights& w, double pixel_scale) {
  return compose({{"l1_px", w.predictor_l1, apb::l1_loss(pred * pixel_scale, gt * pixel_scale)},
                  {"adv", w.predictor_adv, gan_g_loss(fake_logit)}});
}

WeightedLoss predictor_l1_only(const torch::Tensor& pred, const torch::Tensor& gt, const LossWeights& w,
                               double pixel_scale) {
  return compose({{"l1_px", w.predictor_l1, apb::l1_loss(pred * pixel_scale, gt * pixel_scale)}});
}

WeightedLoss reenactor_loss(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& mask,
                            const torch::Tensor& fake_logit_map, const LossWeights& w) {
  return compose({{"l1", w.reenactor_l1, apb::l1_loss(pred, gt)},
                  {"mask", w.reenactor_mask, masked_l1_loss(pred, gt, mask)},
                  {"adv", w.reenactor_adv, gan_g_loss(fake_logit_map)}});
}

WeightedLoss discriminator_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  return compose({{"d", 1.0, gan_d_loss(real_logits, fake_logits)}});
}

}  // namespace apb

#include "apbface/reenact_net.hpp"

#include <algorithm>
#include <bit>

#include "apbface/error.hpp"
#include "apbface/geometry_net.hpp"

namespace apb {

namespace {

int log2i(int v) { return std::bit_width(static_cast<unsigned>(v)) - 1; }

torch::nn::Conv2d conv4(int in, int out, int stride, bool bias) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 4).stride(stride).padding(1).bias(bias));
}

}  // namespace

int ReenactorArch::resolved_depth() const { return depth > 0 ? depth : log2i(resolution) - 2; }
int ReenactorArch::resolved_base() const { return base_channels > 0 ? base_channels : std::max(4, 64 * resolution / 256); }
int ReenactorArch::resolved_disc_base() const { return disc_base > 0 ? disc_base : resolved_base(); }

int ReenactorArch::channels_at(int level) const {
  return std::min(max_channels, resolved_base() << std::min(level, 20));
}

int ReenactorArch::patch_grid() const { return (resolution >> disc_layers) - 2; }

void ReenactorArch::validate() const {
  if (resolution < 8 || !std::has_single_bit(static_cast<unsigned>(resolution))) {
    throw ConfigError("reenactor arch: resolution must be a power of two >= 8");
  }
  const int d = resolved_depth();
  if (d < 1 || d > log2i(resolution)) throw ConfigError("reenactor arch: depth out of range");
  if (resolved_base() <= 0 || max_channels <= 0) throw ConfigError("reenactor arch: channel counts must be positive");
  if (disc_layers < 1 || patch_grid() < 1) throw ConfigError("reenactor arch: too many discriminator blocks for resolution");
}

nlohmann::json ReenactorArch::to_json() const {
  return {{"resolution", resolution}, {"depth", resolved_depth()}, {"base_channels", resolved_base()},
          {"max_channels", max_channels}, {"disc_base", resolved_disc_base()}, {"disc_layers", disc_layers},
          {"skips", skips}};
}

ReenactorArch ReenactorArch::from_json(const nlohmann::json& j) {
  ReenactorArch a;
  a.resolution = j.value("resolution", a.resolution);
  a.depth = j.value("depth", a.depth);
  a.base_channels = j.value("base_channels", a.base_channels);
  a.max_channels = j.value("max_channels", a.max_channels);
  a.disc_base = j.value("disc_base", a.disc_base);
  a.disc_layers = j.value("disc_layers", a.disc_layers);
  a.skips = j.value("skips", a.skips);
  a.validate();
  // Pin the derived values so equality compares what was built.
  a.depth = a.resolved_depth();
  a.base_channels = a.resolved_base();
  a.disc_base = a.resolved_disc_base();
  return a;
}

ReenactorArch ReenactorArch::toy(int resolution) {
  ReenactorArch a;
  a.resolution = resolution;
  a.base_channels = 8;
  a.validate();
  a.depth = a.resolved_depth();
  a.disc_base = a.resolved_disc_base();
  return a;
}

ReenactorArch ReenactorArch::micro() {
  ReenactorArch a;
  a.resolution = 8;
  a.depth = 2;
  a.base_channels = 4;
  a.disc_base = 4;
  a.disc_layers = 1;
  return a;
}

FaceReenactorImpl::FaceReenactorImpl(ReenactorArch arch) : arch_(std::move(arch)) {
  arch_.validate();
  const int d = arch_.resolved_depth();
  for (int i = 0; i < d; ++i) {
    const bool norm = i > 0 && i < d - 1;
    torch::nn::Sequential s;
    s->push_back(conv4(i == 0 ? 1 : arch_.channels_at(i - 1), arch_.channels_at(i), 2, !norm));
    if (norm) s->push_back(torch::nn::BatchNorm2d(arch_.channels_at(i)));
    s->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    down_.push_back(register_module("down" + std::to_string(i), s));
  }
  up_.resize(static_cast<std::size_t>(d));
  for (int i = d - 1; i >= 0; --i) {
    const int in = i == d - 1 ? arch_.channels_at(i) : 2 * arch_.channels_at(i);
    const int out = i == 0 ? 3 : arch_.channels_at(i - 1);
    torch::nn::Sequential s;
    s->push_back(torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1).bias(i == 0)));
    if (i > 0) {
      s->push_back(torch::nn::BatchNorm2d(out));
      s->push_back(torch::nn::ReLU());
    } else {
      s->push_back(torch::nn::Tanh());
    }
    up_[static_cast<std::size_t>(i)] = register_module("up" + std::to_string(i), s);
  }
  init_weights(*this);
}

torch::Tensor FaceReenactorImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 1 || x.size(2) != arch_.resolution || x.size(3) != arch_.resolution) {
    throw ConfigError("reenactor: expected [B, 1, " + std::to_string(arch_.resolution) + ", " +
                      std::to_string(arch_.resolution) + "] landmark image");
  }
  const int d = arch_.resolved_depth();
  std::vector<torch::Tensor> enc;
  auto h = x.to(up_[0]->parameters().front().options());
  for (int i = 0; i < d; ++i) {
    h = down_[static_cast<std::size_t>(i)]->forward(h);
    enc.push_back(h);
  }
  h = up_[static_cast<std::size_t>(d - 1)]->forward(enc.back());
  for (int i = d - 2; i >= 0; --i) {
    auto skip = enc[static_cast<std::size_t>(i)];
    if (!arch_.skips || i == disabled_skip_) skip = torch::zeros_like(skip);
    h = up_[static_cast<std::size_t>(i)]->forward(torch::cat({h, skip}, 1));
  }
  return h;
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(ReenactorArch arch) : arch_(std::move(arch)) {
  arch_.validate();
  const int nf = arch_.resolved_disc_base();
  torch::nn::Sequential s;
  auto leaky = [] { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); };
  s->push_back(conv4(4, nf, 2, true));
  s->push_back(leaky());
  int mult = 1;
  for (int k = 1; k < arch_.disc_layers; ++k) {
    const int prev = mult;
    mult = std::min(1 << k, 8);
    s->push_back(conv4(nf * prev, nf * mult, 2, false));
    s->push_back(torch::nn::BatchNorm2d(nf * mult));
    s->push_back(leaky());
  }
  const int prev = mult;
  mult = std::min(1 << arch_.disc_layers, 8);
  s->push_back(conv4(nf * prev, nf * mult, 1, false));
  s->push_back(torch::nn::BatchNorm2d(nf * mult));
  s->push_back(leaky());
  s->push_back(conv4(nf * mult, 1, 1, true));
  net_ = register_module("net", s);
  init_weights(*this);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& landmark_image, const torch::Tensor& face) {
  const auto r = arch_.resolution;
  if (landmark_image.dim() != 4 || face.dim() != 4 || landmark_image.size(1) != 1 || face.size(1) != 3 ||
      landmark_image.size(2) != r || landmark_image.size(3) != r || face.size(2) != r || face.size(3) != r ||
      landmark_image.size(0) != face.size(0)) {
    throw ConfigError("patch discriminator: expected [B, 1, R, R] and [B, 3, R, R] with R = " + std::to_string(r));
  }
  const auto opts = net_->parameters().front().options();
  return net_->forward(torch::cat({landmark_image.to(opts), face.to(opts)}, 1));
}

torch::Tensor binary_image_tensor(const BinaryImage& img) {
  auto t = torch::empty({1, 1, img.height, img.width}, torch::kFloat32);
  auto* p = t.data_ptr<float>();
  for (std::size_t i = 0; i < img.data.size(); ++i) p[i] = img.data[i] ? 1.0f : 0.0f;
  return t;
}

torch::Tensor face_tensor(const FaceImage& img) {
  auto hwc = torch::from_blob(const_cast<double*>(img.data.data()), {img.height, img.width, img.channels}, torch::kFloat64);
  return hwc.permute({2, 0, 1}).unsqueeze(0).to(torch::kFloat32).contiguous();
}

FaceImage tensor_to_face(const torch::Tensor& t) {
  auto x = t.dim() == 4 ? t[0] : t;
  if (x.dim() != 3) throw ConfigError("tensor_to_face: expected [3, H, W]");
  auto hwc = x.detach().permute({1, 2, 0}).to(torch::kFloat64).contiguous();
  FaceImage img(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), static_cast<int>(hwc.size(2)));
  std::copy(hwc.data_ptr<double>(), hwc.data_ptr<double>() + hwc.numel(), img.data.begin());
  return img;
}

FaceImage reenact(FaceReenactor& model, const BinaryImage& landmark_image) {
  if (landmark_image.height != model->arch().resolution || landmark_image.width != model->arch().resolution) {
    throw ConfigError("reenact: landmark image resolution does not match the model");
  }
  torch::NoGradGuard ng;
  return tensor_to_face(model->forward(binary_image_tensor(landmark_image)));
}

}  // namespace apb

#include "apbface/geometry_net.hpp"

#include <algorithm>

#include "apbface/error.hpp"

namespace apb {

namespace {

constexpr double kLeak = 0.2;

torch::nn::LeakyReLU leaky() { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(kLeak)); }

int conv_out(int n, int kernel, int stride, int pad) { return (n + 2 * pad - kernel) / stride + 1; }

torch::nn::Sequential mlp(int in, const std::vector<int>& widths) {
  torch::nn::Sequential s;
  for (int w : widths) {
    s->push_back(torch::nn::Linear(in, w));
    s->push_back(leaky());
    in = w;
  }
  return s;
}

void check_shape(const torch::Tensor& t, std::vector<int64_t> expect, const char* branch) {
  bool ok = t.dim() == static_cast<int64_t>(expect.size());
  for (std::size_t i = 1; ok && i < expect.size(); ++i) ok = t.size(static_cast<int64_t>(i)) == expect[i];
  if (!ok) {
    std::string want = "[B";
    for (std::size_t i = 1; i < expect.size(); ++i) want += ", " + std::to_string(expect[i]);
    throw ConfigError(std::string(branch) + " branch: expected input shape " + want + "], got " + c10::str(t.sizes()));
  }
}

}  // namespace

void PredictorArch::validate() const {
  if (landmark_count <= 0) throw ConfigError("predictor arch: landmark_count must be positive");
  if (n_fft_frames <= 0 || n_mfcc <= 0) throw ConfigError("predictor arch: audio grid must be non-empty");
  if (audio_channels.size() != 5) throw ConfigError("predictor arch: audio branch has exactly 5 conv layers");
  if (time_layers != 5) throw ConfigError("predictor arch: time fusion has exactly 5 conv layers");
  if (pose_widths.size() != 4) throw ConfigError("predictor arch: pose branch has exactly 4 linear layers");
  if (blink_widths.size() != 3) throw ConfigError("predictor arch: blink branch has exactly 3 linear layers");
  if (disc_widths.size() != 6) throw ConfigError("predictor arch: landmark discriminator has exactly 7 linear layers");
  auto positive = [](const std::vector<int>& v) { return std::all_of(v.begin(), v.end(), [](int x) { return x > 0; }); };
  if (!positive(audio_channels) || !positive(pose_widths) || !positive(blink_widths) || !positive(disc_widths) ||
      time_channels <= 0 || audio_feature <= 0 || fusion_hidden <= 0) {
    throw ConfigError("predictor arch: widths must be positive");
  }
}

nlohmann::json PredictorArch::to_json() const {
  return {{"landmark_count", landmark_count}, {"n_fft_frames", n_fft_frames}, {"n_mfcc", n_mfcc},
          {"audio_channels", audio_channels}, {"time_channels", time_channels}, {"time_layers", time_layers},
          {"audio_feature", audio_feature},   {"pose_widths", pose_widths},     {"blink_widths", blink_widths},
          {"fusion_hidden", fusion_hidden},   {"disc_widths", disc_widths}};
}

PredictorArch PredictorArch::from_json(const nlohmann::json& j) {
  PredictorArch a;
  a.landmark_count = j.value("landmark_count", a.landmark_count);
  a.n_fft_frames = j.value("n_fft_frames", a.n_fft_frames);
  a.n_mfcc = j.value("n_mfcc", a.n_mfcc);
  a.audio_channels = j.value("audio_channels", a.audio_channels);
  a.time_channels = j.value("time_channels", a.time_channels);
  a.time_layers = j.value("time_layers", a.time_layers);
  a.audio_feature = j.value("audio_feature", a.audio_feature);
  a.pose_widths = j.value("pose_widths", a.pose_widths);
  a.blink_widths = j.value("blink_widths", a.blink_widths);
  a.fusion_hidden = j.value("fusion_hidden", a.fusion_hidden);
  a.disc_widths = j.value("disc_widths", a.disc_widths);
  a.validate();
  return a;
}

PredictorArch PredictorArch::toy(int landmark_count) {
  PredictorArch a;
  a.landmark_count = landmark_count;
  a.audio_channels = {8, 16, 16, 16, 16};
  a.time_channels = 16;
  a.audio_feature = 64;
  a.pose_widths = {16, 32, 32, 32};
  a.blink_widths = {16, 16, 16};
  a.fusion_hidden = 128;
  a.disc_widths = {128, 128, 64, 64, 32, 16};
  return a;
}

PredictorArch PredictorArch::micro() {
  PredictorArch a;
  a.landmark_count = 4;
  a.n_fft_frames = 4;
  a.n_mfcc = 4;
  a.audio_channels = {2, 4, 4, 8, 8};
  a.time_channels = 8;
  a.audio_feature = 8;
  a.pose_widths = {4, 8, 8, 8};
  a.blink_widths = {4, 4, 4};
  a.fusion_hidden = 8;
  a.disc_widths = {8, 8, 8, 8, 8, 8};
  return a;
}

GeometryPredictorImpl::GeometryPredictorImpl(PredictorArch arch) : arch_(std::move(arch)) {
  arch_.validate();
  torch::nn::Sequential conv;
  int in = 1, t = arch_.n_fft_frames, c = arch_.n_mfcc;
  for (std::size_t i = 0; i < arch_.audio_channels.size(); ++i) {
    // Even layers halve the coefficient axis.
    const int sc = i % 2 == 0 ? 2 : 1;
    conv->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, arch_.audio_channels[i], 3).stride({1, sc}).padding(1)));
    conv->push_back(leaky());
    in = arch_.audio_channels[i];
    c = conv_out(c, 3, sc, 1);
  }
  torch::nn::Sequential time;
  for (int i = 0; i < arch_.time_layers; ++i) {
    const int st = t > 1 ? 2 : 1;
    time->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, arch_.time_channels, {3, 1}).stride({st, 1}).padding({1, 0})));
    time->push_back(leaky());
    in = arch_.time_channels;
    t = conv_out(t, 3, st, 1);
  }
  flat_width_ = in * t * c;
  audio_conv_ = register_module("audio_conv", conv);
  audio_time_ = register_module("audio_time", time);
  audio_fc_ = register_module("audio_fc", torch::nn::Linear(flat_width_, arch_.audio_feature));
  pose_mlp_ = register_module("pose_mlp", mlp(3, arch_.pose_widths));
  blink_mlp_ = register_module("blink_mlp", mlp(2, arch_.blink_widths));
  fusion_hidden_ = register_module("fusion_hidden", torch::nn::Linear(arch_.fusion_width(), arch_.fusion_hidden));
  fusion_out_ = register_module("fusion_out", torch::nn::Linear(arch_.fusion_hidden, 2 * arch_.landmark_count));
  audio_mean_ = register_buffer("audio_mean", torch::zeros({arch_.n_mfcc}));
  audio_std_ = register_buffer("audio_std", torch::ones({arch_.n_mfcc}));
  pose_mean_ = register_buffer("pose_mean", torch::zeros({3}));
  pose_std_ = register_buffer("pose_std", torch::ones({3}));
  blink_mean_ = register_buffer("blink_mean", torch::zeros({2}));
  blink_std_ = register_buffer("blink_std", torch::ones({2}));
  landmark_offset_ = register_buffer("landmark_offset", torch::zeros({2 * arch_.landmark_count}));
  init_weights(*this);
}

void GeometryPredictorImpl::set_audio_normalization(const torch::Tensor& mean, const torch::Tensor& std) {
  if (mean.numel() != arch_.n_mfcc || std.numel() != arch_.n_mfcc) throw ConfigError("audio normalization: width mismatch");
  if ((std <= 0).any().item<bool>()) throw ConfigError("audio normalization: std must be positive");
  torch::NoGradGuard ng;
  audio_mean_.copy_(mean.reshape({arch_.n_mfcc}));
  audio_std_.copy_(std.reshape({arch_.n_mfcc}));
}

void GeometryPredictorImpl::set_control_normalization(const torch::Tensor& pose_mean, const torch::Tensor& pose_std,
                                                      const torch::Tensor& blink_mean, const torch::Tensor& blink_std) {
  if (pose_mean.numel() != 3 || pose_std.numel() != 3 || blink_mean.numel() != 2 || blink_std.numel() != 2) {
    throw ConfigError("control normalization: expected 3 pose and 2 blink components");
  }
  if ((pose_std <= 0).any().item<bool>() || (blink_std <= 0).any().item<bool>()) {
    throw ConfigError("control normalization: std must be positive");
  }
  torch::NoGradGuard ng;
  pose_mean_.copy_(pose_mean.reshape({3}));
  pose_std_.copy_(pose_std.reshape({3}));
  blink_mean_.copy_(blink_mean.reshape({2}));
  blink_std_.copy_(blink_std.reshape({2}));
}

void GeometryPredictorImpl::set_landmark_offset(const torch::Tensor& offset) {
  if (offset.numel() != 2 * arch_.landmark_count) throw ConfigError("landmark offset: width mismatch");
  torch::NoGradGuard ng;
  landmark_offset_.copy_(offset.reshape({2 * arch_.landmark_count}));
}

BranchFeatures GeometryPredictorImpl::encode_branches(const torch::Tensor& mfcc, const torch::Tensor& pose,
                                                      const torch::Tensor& blink) {
  check_shape(mfcc, {-1, arch_.n_fft_frames, arch_.n_mfcc}, "audio");
  check_shape(pose, {-1, 3}, "pose");
  check_shape(blink, {-1, 2}, "blink");
  if (mfcc.size(0) != pose.size(0) || mfcc.size(0) != blink.size(0)) throw ConfigError("branch inputs disagree on batch size");
  const auto opts = audio_fc_->weight.options();
  auto a = ((mfcc.to(opts) - audio_mean_) / audio_std_).unsqueeze(1);
  a = audio_time_->forward(audio_conv_->forward(a));
  BranchFeatures f;
  f.audio = torch::leaky_relu(audio_fc_->forward(a.flatten(1)), kLeak);
  f.pose = pose_mlp_->forward((pose.to(opts) - pose_mean_) / pose_std_);
  f.blink = blink_mlp_->forward((blink.to(opts) - blink_mean_) / blink_std_);
  return f;
}

torch::Tensor GeometryPredictorImpl::forward(const torch::Tensor& mfcc, const torch::Tensor& pose, const torch::Tensor& blink) {
  auto f = encode_branches(mfcc, pose, blink);
  auto h = torch::leaky_relu(fusion_hidden_->forward(torch::cat({f.audio, f.pose, f.blink}, 1)), kLeak);
  return fusion_out_->forward(h) + landmark_offset_;
}

LandmarkDiscriminatorImpl::LandmarkDiscriminatorImpl(PredictorArch arch) : arch_(std::move(arch)) {
  arch_.validate();
  torch::nn::Sequential s;
  int in = 2 * arch_.landmark_count;
  for (int w : arch_.disc_widths) {
    s->push_back(torch::nn::Linear(in, w));
    s->push_back(leaky());
    in = w;
  }
  s->push_back(torch::nn::Linear(in, 1));
  net_ = register_module("net", s);
  init_weights(*this);
}

torch::Tensor LandmarkDiscriminatorImpl::forward(const torch::Tensor& flat) {
  if (flat.dim() != 2 || flat.size(1) != 2 * arch_.landmark_count) {
    throw ConfigError("landmark discriminator: expected width " + std::to_string(2 * arch_.landmark_count));
  }
  return net_->forward(flat).squeeze(1);
}

void init_weights(torch::nn::Module& m) {
  torch::NoGradGuard ng;
  for (auto& mod : m.modules(/*include_self=*/false)) {
    for (auto& item : mod->named_parameters(/*recurse=*/false)) {
      const auto& name = item.key();
      auto& p = item.value();
      if (name == "weight" && (mod->as<torch::nn::Linear>() || mod->as<torch::nn::Conv2d>() || mod->as<torch::nn::ConvTranspose2d>())) {
        p.normal_(0.0, 0.02);
      } else if (name == "weight" && mod->as<torch::nn::BatchNorm2d>()) {
        p.normal_(1.0, 0.02);
      } else if (name == "bias") {
        p.zero_();
      }
    }
  }
}

void zero_parameters(torch::nn::Module& m) {
  torch::NoGradGuard ng;
  for (auto& p : m.parameters()) p.zero_();
}

torch::Tensor mfcc_tensor(const MfccFeature& f) {
  return torch::from_blob(const_cast<double*>(f.values.data()), {1, f.frames, f.coeffs}, torch::kFloat64).clone();
}

torch::Tensor pose_tensor(const PoseTriple& p) { return torch::tensor({p.yaw, p.pitch, p.roll}, torch::kFloat64).reshape({1, 3}); }

torch::Tensor blink_tensor(const BlinkPair& b) { return torch::tensor({b.left, b.right}, torch::kFloat64).reshape({1, 2}); }

LandmarkSet predict_landmarks(GeometryPredictor& model, const MfccFeature& audio, const PoseTriple& pose,
                              const BlinkPair& blink, const IndexGroups& groups) {
  torch::NoGradGuard ng;
  auto out = model->forward(mfcc_tensor(audio), pose_tensor(pose), blink_tensor(blink)).to(torch::kFloat64).contiguous();
  std::vector<double> flat(out.data_ptr<double>(), out.data_ptr<double>() + out.numel());
  return LandmarkSet::from_flat(flat, groups);
}

double discriminate_landmarks(LandmarkDiscriminator& d, const LandmarkSet& l, double pixel_scale) {
  torch::NoGradGuard ng;
  const auto flat = l.flat();
  auto x = torch::tensor(flat, torch::kFloat64).reshape({1, -1}) * pixel_scale;
  auto w = d->parameters().front();
  return d->forward(x.to(w.options())).to(torch::kFloat64).item<double>();
}

}  // namespace apb

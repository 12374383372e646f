#include <gtest/gtest.h>

#include <torch/torch.h>

#include "apbface/data_kit.hpp"
#include "apbface/error.hpp"
#include "apbface/geometry_net.hpp"
#include "apbface/landmark_render.hpp"
#include "apbface/reenact_net.hpp"

using namespace apb;

namespace {

struct Inputs {
  torch::Tensor mfcc, pose, blink;
};

Inputs random_inputs(const PredictorArch& a, int batch) {
  return {torch::randn({batch, a.n_fft_frames, a.n_mfcc}), torch::randn({batch, 3}) * 0.2,
          torch::rand({batch, 2}) * 0.4};
}

}  // namespace

TEST(GeometryNet, DefaultBranchWidths) {
  torch::manual_seed(0);
  PredictorArch arch;
  GeometryPredictor g(arch);
  g->eval();
  const auto in = random_inputs(arch, 2);
  const auto f = g->encode_branches(in.mfcc, in.pose, in.blink);
  EXPECT_EQ(f.audio.size(1), 256);
  EXPECT_EQ(f.pose.size(1), 64);
  EXPECT_EQ(f.blink.size(1), 32);
  EXPECT_EQ(arch.fusion_width(), 352);
  const auto out = g->forward(in.mfcc, in.pose, in.blink);
  EXPECT_EQ(out.sizes(), (std::vector<int64_t>{2, 40}));
}

TEST(GeometryNet, LayerCountsMatchTheDesign) {
  GeometryPredictor g(PredictorArch{});
  int conv = 0, linear = 0;
  for (const auto& m : g->modules(false)) {
    conv += m->as<torch::nn::Conv2d>() != nullptr;
    linear += m->as<torch::nn::Linear>() != nullptr;
  }
  // 5 audio convs + 5 time convs; audio fc + 4 pose + 3 blink + 2 fusion.
  EXPECT_EQ(conv, 10);
  EXPECT_EQ(linear, 10);
  LandmarkDiscriminator d(PredictorArch{});
  int dl = 0;
  for (const auto& m : d->modules(false)) dl += m->as<torch::nn::Linear>() != nullptr;
  EXPECT_EQ(dl, 7);
  PredictorArch bad;
  bad.pose_widths = {1, 2};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(GeometryNet, ZeroInitGivesZeroFeaturesAndLogits) {
  PredictorArch arch = PredictorArch::toy();
  GeometryPredictor g(arch);
  LandmarkDiscriminator d(arch);
  zero_parameters(*g);
  zero_parameters(*d);
  const auto in = random_inputs(arch, 3);
  const auto f = g->encode_branches(in.mfcc, in.pose, in.blink);
  EXPECT_EQ(f.audio.abs().max().item<float>(), 0.0f);
  EXPECT_EQ(f.pose.abs().max().item<float>(), 0.0f);
  EXPECT_EQ(f.blink.abs().max().item<float>(), 0.0f);
  EXPECT_EQ(d->forward(torch::randn({4, 40})).abs().max().item<float>(), 0.0f);
}

TEST(GeometryNet, ShapeErrorsNameTheBranch) {
  PredictorArch arch = PredictorArch::toy();
  GeometryPredictor g(arch);
  const auto in = random_inputs(arch, 2);
  try {
    g->encode_branches(torch::randn({2, 5, 20}), in.pose, in.blink);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("audio"), std::string::npos);
  }
  try {
    g->encode_branches(in.mfcc, torch::randn({2, 4}), in.blink);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("pose"), std::string::npos);
  }
  try {
    g->encode_branches(in.mfcc, in.pose, torch::randn({2, 3}));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("blink"), std::string::npos);
  }
  LandmarkDiscriminator d(arch);
  EXPECT_THROW(d->forward(torch::randn({2, 38})), ConfigError);
}

TEST(GeometryNet, InferenceIsDeterministic) {
  torch::manual_seed(3);
  PredictorArch arch = PredictorArch::toy();
  GeometryPredictor g(arch);
  g->eval();
  MfccFeature m;
  m.frames = arch.n_fft_frames;
  m.coeffs = arch.n_mfcc;
  m.values.assign(std::size_t(m.frames) * m.coeffs, 0.3);
  const auto groups = synth_groups(20);
  const auto a = predict_landmarks(g, m, {0.1, 0.0, -0.1}, {0.2, 0.3}, groups);
  const auto b = predict_landmarks(g, m, {0.1, 0.0, -0.1}, {0.2, 0.3}, groups);
  EXPECT_EQ(a.points, b.points);
  EXPECT_EQ(a.size(), 20u);
  LandmarkDiscriminator d(arch);
  EXPECT_EQ(discriminate_landmarks(d, a, 64), discriminate_landmarks(d, a, 64));
}

TEST(GeometryNet, ArchJsonRoundTrip) {
  for (const auto& a : {PredictorArch{}, PredictorArch::toy(), PredictorArch::micro()}) {
    EXPECT_EQ(PredictorArch::from_json(a.to_json()), a);
  }
}

TEST(GeometryNet, InitStatistics) {
  torch::manual_seed(5);
  GeometryPredictor g(PredictorArch{});
  for (const auto& p : g->named_parameters()) {
    if (p.key().find("bias") != std::string::npos) {
      EXPECT_EQ(p.value().abs().max().item<float>(), 0.0f) << p.key();
    } else if (p.value().numel() > 1000) {
      EXPECT_NEAR(p.value().std().item<float>(), 0.02, 0.002) << p.key();
    }
  }
}

TEST(ReenactNet, ShapesAtToyResolution) {
  torch::manual_seed(0);
  ReenactorArch arch;
  FaceReenactor g(arch);
  PatchDiscriminator d(arch);
  const auto x = (torch::rand({2, 1, 64, 64}) > 0.9).to(torch::kFloat32);
  const auto y = g->forward(x);
  EXPECT_EQ(y.sizes(), (std::vector<int64_t>{2, 3, 64, 64}));
  EXPECT_LE(y.abs().max().item<float>(), 1.0f);
  const auto logits = d->forward(x, y);
  EXPECT_EQ(logits.sizes(), (std::vector<int64_t>{2, 1, 6, 6}));
  EXPECT_EQ(arch.patch_grid(), 6);
  EXPECT_EQ(arch.resolved_depth(), 4);
  EXPECT_EQ(arch.resolved_base(), 16);
  EXPECT_THROW(g->forward(torch::zeros({1, 1, 32, 32})), ConfigError);
  EXPECT_THROW(d->forward(x, torch::zeros({2, 3, 32, 32})), ConfigError);
}

TEST(ReenactNet, ZeroInitGivesZeroOutputs) {
  ReenactorArch arch;
  FaceReenactor g(arch);
  PatchDiscriminator d(arch);
  zero_parameters(*g);
  zero_parameters(*d);
  g->eval();
  d->eval();
  const auto x = (torch::rand({1, 1, 64, 64}) > 0.8).to(torch::kFloat32);
  EXPECT_EQ(g->forward(x).abs().max().item<float>(), 0.0f);
  EXPECT_EQ(d->forward(x, torch::rand({1, 3, 64, 64})).abs().max().item<float>(), 0.0f);
}

TEST(ReenactNet, PatchLogitsAreLocal) {
  torch::manual_seed(1);
  ReenactorArch arch;
  PatchDiscriminator d(arch);
  d->eval();
  const auto x = (torch::rand({1, 1, 64, 64}) > 0.8).to(torch::kFloat32);
  const auto face = torch::rand({1, 3, 64, 64}) * 2 - 1;
  const auto base = d->forward(x, face);
  // Logit (0, 0) sees at most rows/cols 0..45 at three stride-2 blocks.
  auto far = face.clone();
  far.index_put_({0, torch::indexing::Slice(), torch::indexing::Slice(47, 64), torch::indexing::Slice()}, 0.7);
  far.index_put_({0, torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(47, 64)}, -0.7);
  const auto moved = d->forward(x, far);
  EXPECT_EQ(moved[0][0][0][0].item<float>(), base[0][0][0][0].item<float>());
  EXPECT_GT((moved - base).abs().max().item<float>(), 0.0f);
  auto near = face.clone();
  near.index_put_({0, torch::indexing::Slice(), torch::indexing::Slice(0, 8), torch::indexing::Slice(0, 8)}, 0.9);
  EXPECT_NE(d->forward(x, near)[0][0][0][0].item<float>(), base[0][0][0][0].item<float>());
}

TEST(ReenactNet, EverySkipIsWired) {
  torch::manual_seed(2);
  ReenactorArch arch;
  FaceReenactor g(arch);
  g->eval();
  const auto x = (torch::rand({1, 1, 64, 64}) > 0.8).to(torch::kFloat32);
  const auto base = g->forward(x);
  for (int level = 0; level < arch.resolved_depth() - 1; ++level) {
    g->disable_skip(level);
    EXPECT_GT((g->forward(x) - base).abs().max().item<float>(), 0.0f) << "level " << level;
  }
  g->disable_skip(-1);
  EXPECT_TRUE(torch::equal(g->forward(x), base));
}

TEST(ReenactNet, ReenactHelperRoundTrip) {
  ReenactorArch arch;
  FaceReenactor g(arch);
  g->eval();
  FaceStyle style;
  const auto img = rasterize(synth_landmarks(style, {}, 20), 64, 1);
  const auto a = reenact(g, img), b = reenact(g, img);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.channels, 3);
  const auto t = face_tensor(a);
  EXPECT_EQ(t.sizes(), (std::vector<int64_t>{1, 3, 64, 64}));
  const auto back = tensor_to_face(t);
  for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_EQ(static_cast<float>(a.data[i]), back.data[i]);
  EXPECT_THROW(reenact(g, BinaryImage(32, 32, 1)), ConfigError);
}

TEST(ReenactNet, ArchJsonPinsResolvedValues) {
  ReenactorArch a;
  a.resolution = 128;
  const auto r = ReenactorArch::from_json(a.to_json());
  EXPECT_EQ(r.depth, 5);
  EXPECT_EQ(r.base_channels, 32);
  EXPECT_EQ(ReenactorArch::from_json(r.to_json()), r);
  ReenactorArch bad;
  bad.resolution = 48;
  EXPECT_THROW(bad.validate(), ConfigError);
}

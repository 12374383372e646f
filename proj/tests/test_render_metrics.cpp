#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "apbface/data_kit.hpp"
#include "apbface/error.hpp"
#include "apbface/landmark_render.hpp"
#include "apbface/metrics.hpp"
#include "oracles.hpp"

using namespace apb;

namespace {

LandmarkSet random_landmarks(std::mt19937_64& rng, int n, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  LandmarkSet l;
  for (int i = 0; i < n; ++i) l.points.push_back({u(rng), u(rng)});
  if (n >= 15) l.groups = synth_groups(n);
  return l;
}

FaceImage random_face(std::mt19937_64& rng, int r) {
  std::uniform_real_distribution<double> u(-1, 1);
  FaceImage f(r, r, 3);
  for (auto& v : f.data) v = u(rng);
  return f;
}

Gaussian random_gaussian(std::mt19937_64& rng, int d, int n) {
  std::normal_distribution<double> nd;
  std::vector<std::vector<double>> xs(n, std::vector<double>(d));
  for (auto& x : xs) {
    for (int k = 0; k < d; ++k) x[k] = nd(rng) * (1 + k) + (k > 0 ? 0.5 * x[k - 1] : 0.0) + 0.3 * k;
  }
  return fit_gaussian(xs);
}

}  // namespace

TEST(Render, ToPixelConvention) {
  EXPECT_EQ(to_pixel({0.0, 0.0}, 64), (PixelPoint{0, 0}));
  EXPECT_EQ(to_pixel({1.0, 1.0}, 64), (PixelPoint{63, 63}));
  EXPECT_EQ(to_pixel({-0.5, 2.0}, 64), (PixelPoint{0, 63}));
  EXPECT_EQ(to_pixel({0.5, 0.015625}, 64), (PixelPoint{32, 1}));
}

TEST(Render, SegmentEndpointsAndConnectivity) {
  const auto s = segment_pixels({0, 0}, {5, 2});
  ASSERT_EQ(s.size(), 6u);
  EXPECT_EQ(s.front(), (PixelPoint{0, 0}));
  EXPECT_EQ(s.back(), (PixelPoint{5, 2}));
  for (std::size_t i = 1; i < s.size(); ++i) {
    EXPECT_LE(std::abs(s[i].x - s[i - 1].x), 1);
    EXPECT_LE(std::abs(s[i].y - s[i - 1].y), 1);
  }
  // Half-way minor offsets round away from zero.
  const auto h = segment_pixels({0, 0}, {2, 1});
  EXPECT_EQ(h[1], (PixelPoint{1, 1}));
  const auto hn = segment_pixels({0, 0}, {2, -1});
  EXPECT_EQ(hn[1], (PixelPoint{1, -1}));
  EXPECT_EQ(segment_pixels({3, 3}, {3, 3}).size(), 1u);
}

TEST(Render, RasterizerMatchesBruteForceOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto l = random_landmarks(rng, 20, -0.05, 1.05);
    for (int radius : {0, 1, 2}) {
      EXPECT_EQ(rasterize(l, 64, radius), oracle::raster(l, 64, radius)) << "trial " << trial << " r " << radius;
    }
  }
}

TEST(Render, RasterizerOnSyntheticFace) {
  FaceStyle style;
  FaceControls c;
  c.mouth_open = 0.5;
  c.blink = {0.3, 0.3};
  const auto l = synth_landmarks(style, c, 20);
  EXPECT_EQ(rasterize(l, 64, 1), oracle::raster(l, 64, 1));
  EXPECT_EQ(rasterize(l, 128, 1), oracle::raster(l, 128, 1));
  EXPECT_THROW(rasterize(l, 4, 1), ConfigError);
}

TEST(Render, MaskMatchesBruteForceOracle) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 8; ++trial) {
    const auto l = random_landmarks(rng, 12, 0.15, 0.85);
    for (int radius : {0, 2, 4}) {
      EXPECT_EQ(face_mask(l, 64, radius), oracle::mask(l, 64, radius)) << "trial " << trial << " r " << radius;
    }
  }
}

TEST(Render, MaskSaturatesAtLargeRadius) {
  std::mt19937_64 rng(13);
  const auto l = random_landmarks(rng, 10, 0.4, 0.6);
  const auto m = face_mask(l, 32, 32);
  EXPECT_EQ(count_white(m), 32u * 32u);
  EXPECT_EQ(m, oracle::mask(l, 32, 32));
}

TEST(Render, MaskContainsRasterizedPoints) {
  FaceStyle style;
  const auto l = synth_landmarks(style, {}, 20);
  const auto mask = face_mask(l, 64, default_dilation_radius(64));
  const auto img = rasterize(l, 64, 0);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    if (img.data[i]) EXPECT_TRUE(mask.data[i]);
  }
}

TEST(Render, DegenerateHullThrows) {
  LandmarkSet l;
  l.points = {{0.1, 0.1}, {0.2, 0.2}, {0.3, 0.3}};
  EXPECT_THROW(face_mask(l, 64, 2), DataError);
}

TEST(Render, ConvexHullIsCounterClockwiseWithoutCollinearPoints) {
  std::vector<Point2> pts{{0, 0}, {2, 0}, {1, 0}, {2, 2}, {0, 2}, {1, 1}, {1, 2}};
  const auto h = convex_hull(pts);
  ASSERT_EQ(h.size(), 4u);
  for (std::size_t i = 0; i < h.size(); ++i) {
    const auto& a = h[i];
    const auto& b = h[(i + 1) % h.size()];
    const auto& c = h[(i + 2) % h.size()];
    EXPECT_GT((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x), 0);
  }
}

TEST(Metrics, SsimMatchesDirectFormulaOracle) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 3; ++trial) {
    const auto a = random_face(rng, 24);
    auto b = a;
    std::normal_distribution<double> nd(0, 0.3);
    for (auto& v : b.data) v = std::clamp(v + nd(rng), -1.0, 1.0);
    EXPECT_NEAR(ssim(a, b), oracle::ssim(a, b), 1e-9);
  }
}

TEST(Metrics, SsimIdentityAndErrors) {
  std::mt19937_64 rng(22);
  const auto a = random_face(rng, 16);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_THROW(ssim(a, random_face(rng, 20)), ConfigError);
  EXPECT_THROW(ssim(FaceImage(8, 8, 3), FaceImage(8, 8, 3)), ConfigError);
}

TEST(Metrics, FrechetMatchesEigenOracle) {
  std::mt19937_64 rng(23);
  for (int d : {1, 3, 8}) {
    const auto a = random_gaussian(rng, d, 50);
    const auto b = random_gaussian(rng, d, 60);
    EXPECT_NEAR(frechet_distance(a, b), oracle::frechet(a, b), 1e-6) << "d " << d;
  }
}

TEST(Metrics, FrechetClosedForms) {
  Gaussian a{{1.0}, {4.0}}, b{{3.0}, {9.0}};
  // (mu1 - mu2)^2 + (sigma1 - sigma2)^2
  EXPECT_NEAR(frechet_distance(a, b), 4.0 + 1.0, 1e-12);
  std::mt19937_64 rng(24);
  const auto g = random_gaussian(rng, 5, 40);
  EXPECT_NEAR(frechet_distance(g, g), 0.0, 1e-6);
  EXPECT_THROW(frechet_distance(a, g), ConfigError);
  Gaussian asym{{0, 0}, {1, 0.5, 0.0, 1}};
  EXPECT_THROW(frechet_distance(asym, asym), ConfigError);
}

TEST(Metrics, FitGaussianUnbiased) {
  std::vector<std::vector<double>> xs{{1, 2}, {3, 6}, {5, 4}};
  const auto g = fit_gaussian(xs);
  EXPECT_NEAR(g.mean[0], 3.0, 1e-15);
  EXPECT_NEAR(g.mean[1], 4.0, 1e-15);
  EXPECT_NEAR(g.cov[0], 4.0, 1e-12);
  EXPECT_NEAR(g.cov[1], 2.0, 1e-12);
  EXPECT_NEAR(g.cov[3], 4.0, 1e-12);
}

TEST(Metrics, EmbeddingAveragesCells) {
  FaceImage f(8, 8, 3, 0.0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) f.at(y, x, 1) = 1.0;
  const auto e = pixel_statistics_embedding(f, 2);
  ASSERT_EQ(e.size(), 12u);
  EXPECT_DOUBLE_EQ(e[1], 1.0);
  EXPECT_DOUBLE_EQ(e[4], 0.0);
  EXPECT_THROW(pixel_statistics_embedding(f, 3), ConfigError);
}

TEST(Metrics, EvaluateGeneratedWithStubDetector) {
  std::vector<GeneratedSample> s(4);
  for (int i = 0; i < 4; ++i) {
    s[i].face = FaceImage(8, 8, 3, i * 0.1);
    s[i].gt_landmarks.points = {{0.5, 0.5}, {0.25, 0.75}};
    s[i].gt_pose = {0.1, 0.2, 0.3};
    s[i].gt_blink = {0.3, 0.3};
  }
  // Detector misses the first face and returns fixed offsets otherwise.
  DetectorInterface det = [](const FaceImage& f) {
    Detection d;
    if (f.data[0] == 0.0) return d;
    d.detected = true;
    LandmarkSet l;
    l.points = {{0.5 + 1.0 / 64, 0.5}, {0.25, 0.75 - 2.0 / 64}};
    d.landmarks = l;
    d.pose = PoseTriple{0.1 + 0.03, 0.2, 0.3 - 0.06};
    d.blink = BlinkPair{0.3, 0.4};
    return d;
  };
  const auto r = evaluate_generated(s, det, 64.0);
  EXPECT_EQ(r.n_detected, 3u);
  EXPECT_DOUBLE_EQ(r.dr, 0.75);
  EXPECT_NEAR(*r.ale, 3.0 / 4.0, 1e-12);
  EXPECT_NEAR(*r.ape, 0.03, 1e-12);
  EXPECT_NEAR(*r.abe, 0.05, 1e-12);
  DetectorInterface none = [](const FaceImage&) { return Detection{}; };
  const auto z = evaluate_generated(s, none, 64.0);
  EXPECT_EQ(z.dr, 0.0);
  EXPECT_FALSE(z.ale.has_value());
  EXPECT_TRUE(z.to_json()["undefined"]["ale"].get<bool>());
  EXPECT_THROW(evaluate_generated({}, det, 64.0), DataError);
}

TEST(Metrics, PairwiseSumIsExactOnIntegers) {
  std::vector<double> v(1000);
  for (int i = 0; i < 1000; ++i) v[i] = i;
  EXPECT_EQ(pairwise_sum(v), 999.0 * 1000 / 2);
}

TEST(Render, EmptyAndSinglePoint) {
  LandmarkSet empty;
  EXPECT_EQ(count_white(rasterize(empty, 64, 1)), 0u);
  LandmarkSet one;
  one.points = {{0.5, 0.5}};
  const auto img = rasterize(one, 256, 1);
  EXPECT_EQ(count_white(img), 5u);
  for (auto [x, y] : std::vector<std::pair<int, int>>{{128, 128}, {127, 128}, {129, 128}, {128, 127}, {128, 129}}) {
    EXPECT_EQ(img.at(y, x), 1);
  }
}

TEST(Render, TriangleMaskMatchesPointInTriangleCount) {
  LandmarkSet l;
  l.points = {{0.2, 0.2}, {0.8, 0.2}, {0.5, 0.8}};
  const int R = 64;
  std::size_t expected = 0;
  const double ax = 0.2 * R, ay = 0.2 * R, bx = 0.8 * R, by = 0.2 * R, cx = 0.5 * R, cy = 0.8 * R;
  auto side = [](double x0, double y0, double x1, double y1, double px, double py) {
    return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
  };
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < R; ++c) {
      const double px = c + 0.5, py = r + 0.5;
      const double s1 = side(ax, ay, bx, by, px, py), s2 = side(bx, by, cx, cy, px, py), s3 = side(cx, cy, ax, ay, px, py);
      expected += (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
    }
  EXPECT_EQ(count_white(face_mask(l, R, 0)), expected);
}

TEST(Render, MaskMonotoneInRadius) {
  FaceStyle style;
  const auto l = synth_landmarks(style, {0.7, {0.1, -0.2, 0.3}, {0.3, 0.2}}, 20);
  const auto m0 = face_mask(l, 64, 0);
  const auto m8 = face_mask(l, 64, 8);
  for (std::size_t i = 0; i < m0.data.size(); ++i) {
    if (m0.data[i]) EXPECT_TRUE(m8.data[i]);
  }
  EXPECT_GT(count_white(m8), count_white(m0));
}

TEST(Render, EveryPointPixelIsWhite) {
  std::mt19937_64 rng(14);
  const auto l = random_landmarks(rng, 20, -0.2, 1.2);
  const auto img = rasterize(l, 64, 1);
  for (const auto& p : l.points) {
    const auto px = to_pixel(p, 64);
    EXPECT_EQ(img.at(px.y, px.x), 1);
  }
}

TEST(Render, TranslationCovariance) {
  std::mt19937_64 rng(15);
  auto l = random_landmarks(rng, 20, 0.2, 0.7);
  // Snap to pixel centers so an exact k-pixel shift keeps every point in the same relative cell.
  for (auto& p : l.points) {
    p.x = (std::floor(p.x * 64) + 0.5) / 64;
    p.y = (std::floor(p.y * 64) + 0.5) / 64;
  }
  auto shifted = l;
  for (auto& p : shifted.points) {
    p.x += 5.0 / 64;
    p.y += 3.0 / 64;
  }
  const auto a = rasterize(l, 64, 1), b = rasterize(shifted, 64, 1);
  for (int y = 0; y + 3 < 64; ++y)
    for (int x = 0; x + 5 < 64; ++x) ASSERT_EQ(a.at(y, x), b.at(y + 3, x + 5));
}

TEST(Metrics, SsimConstantImagesClosedForm) {
  FaceImage a(16, 16, 3, 0.0), b(16, 16, 3, 1.0);
  const double c1 = 0.02 * 0.02;
  // Zero variance leaves only the luminance factor.
  EXPECT_NEAR(ssim(a, b), c1 / (1.0 + c1), 1e-12);
  EXPECT_NEAR(ssim(a, b), oracle::ssim(a, b), 1e-9);
}

TEST(Metrics, SsimSymmetricAndBounded) {
  std::mt19937_64 rng(25);
  const auto a = random_face(rng, 16), b = random_face(rng, 16);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-15);
  EXPECT_GE(ssim(a, b), -1.0);
  EXPECT_LE(ssim(a, b), 1.0);
}

TEST(Metrics, FrechetIdentityCovariancesAndSymmetry) {
  Gaussian a{{0, 0, 0}, {1, 0, 0, 0, 1, 0, 0, 0, 1}}, b{{1, 2, -2}, {1, 0, 0, 0, 1, 0, 0, 0, 1}};
  EXPECT_NEAR(frechet_distance(a, b), 9.0, 1e-12);
  std::mt19937_64 rng(26);
  const auto g = random_gaussian(rng, 4, 30), h = random_gaussian(rng, 4, 30);
  EXPECT_NEAR(frechet_distance(g, h), frechet_distance(h, g), 1e-9);
  EXPECT_NEAR(frechet_distance(g, h), oracle::frechet(g, h), 1e-6);
  EXPECT_GE(frechet_distance(g, h), 0.0);
}

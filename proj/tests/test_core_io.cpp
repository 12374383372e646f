#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "apbface/error.hpp"
#include "apbface/io.hpp"
#include "apbface/landmarks.hpp"
#include "apbface/signal_audio.hpp"
#include "apbface/tensor_file.hpp"

using namespace apb;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("apbface_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(TensorFile, EncodesDocumentedLayout) {
  ArrayBundle b;
  const std::vector<float> v{1.5f, -2.0f};
  b["w"] = ArrayRecord::from_f32(v, {2});
  const auto bytes = encode_bundle(b);
  // magic + version + count + (u16 len + "w" + dtype + rank + 1 dim) + payload
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 2 + 1 + 1 + 1 + 8 + 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "APBT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 1);
  EXPECT_EQ(bytes[14], 'w');
  EXPECT_EQ(bytes[15], 1);  // f32
  EXPECT_EQ(bytes[16], 1);  // rank
  EXPECT_EQ(bytes[17], 2);  // dim 0
  float f;
  std::memcpy(&f, &bytes[25], 4);
  EXPECT_EQ(f, 1.5f);
}

TEST(TensorFile, RoundTripAllDtypes) {
  ArrayBundle b;
  const std::vector<double> d{1.0, std::nextafter(1.0, 2.0), -3.25e-300, 7};
  const std::vector<float> f{0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f};
  const std::vector<std::uint8_t> u{0, 255, 7};
  const std::vector<std::int64_t> i{-1, 1LL << 40};
  b["d"] = ArrayRecord::from_f64(d, {2, 2});
  b["f"] = ArrayRecord::from_f32(f, {2, 3});
  b["u"] = ArrayRecord::from_u8(u, {3});
  b["i"] = ArrayRecord::from_i64(i, {2});
  b["s"] = ArrayRecord::from_string("hello");
  const auto dir = scratch("bundle");
  save_bundle(dir / "x.apbt", b);
  const auto r = load_bundle(dir / "x.apbt");
  EXPECT_EQ(r.at("d").to_f64(), d);
  EXPECT_EQ(r.at("f").to_f32(), f);
  EXPECT_EQ(r.at("u").bytes, u);
  EXPECT_EQ(r.at("i").to_i64(), i);
  EXPECT_EQ(r.at("s").to_string(), "hello");
  EXPECT_EQ(r.at("f").shape, (std::vector<std::uint64_t>{2, 3}));
  EXPECT_EQ(encode_bundle(r), encode_bundle(b));
}

TEST(TensorFile, RejectsCorruptInput) {
  ArrayBundle b;
  b["x"] = ArrayRecord::from_f64(std::vector<double>{1, 2}, {2});
  auto bytes = encode_bundle(b);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_bundle(bad), IoError);
  auto trunc = bytes;
  trunc.pop_back();
  EXPECT_THROW(decode_bundle(trunc), IoError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_bundle(extra), IoError);
  EXPECT_THROW(require(b, "missing"), IoError);
  EXPECT_THROW(ArrayRecord::from_f64(std::vector<double>{1, 2, 3}, {2}), ConfigError);
}

TEST(Io, PngRoundTripRgbAndGray) {
  Grid<std::uint8_t> rgb(5, 7, 3);
  for (std::size_t k = 0; k < rgb.data.size(); ++k) rgb.data[k] = static_cast<std::uint8_t>(k * 37);
  EXPECT_EQ(decode_png(encode_png(rgb)), rgb);
  Grid<std::uint8_t> gray(4, 3, 1);
  for (std::size_t k = 0; k < gray.data.size(); ++k) gray.data[k] = static_cast<std::uint8_t>(k * 11);
  EXPECT_EQ(decode_png(encode_png(gray)), gray);
  const std::vector<std::uint8_t> junk{1, 2, 3};
  EXPECT_THROW(decode_png(junk), IoError);
}

TEST(Io, FaceByteConversion) {
  FaceImage f(1, 3, 3);
  f.data = {-1.0, 0.0, 1.0, -0.5, 0.5, 2.0, -2.0, 0.999, -0.999};
  const auto u = to_u8(f);
  EXPECT_EQ(u.data[0], 0);
  EXPECT_EQ(u.data[2], 255);
  EXPECT_EQ(u.data[5], 255);  // clamped
  EXPECT_EQ(u.data[6], 0);
  const auto back = from_u8(u);
  EXPECT_NEAR(back.data[0], -1.0, 1e-12);
  EXPECT_NEAR(back.data[2], 1.0, 1e-12);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_LE(std::abs(back.data[k] - f.data[k]), 1.0 / 255 + 1e-12);
}

TEST(Io, WavRoundTrip) {
  AudioTrack a;
  a.sample_rate = 16000;
  for (int i = 0; i < 100; ++i) a.samples.push_back(std::sin(i * 0.1) * 0.9);
  const auto f32 = decode_wav(encode_wav(a, true));
  EXPECT_EQ(f32.sample_rate, 16000);
  ASSERT_EQ(f32.samples.size(), a.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_NEAR(f32.samples[i], a.samples[i], 1e-7);
  const auto s16 = decode_wav(encode_wav(a, false));
  for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_NEAR(s16.samples[i], a.samples[i], 1.0 / 32767);
  const std::vector<std::uint8_t> junk(44, 0);
  EXPECT_THROW(decode_wav(junk), IoError);
}

TEST(Io, Base64KnownVectors) {
  auto enc = [](const std::string& s) { return base64_encode(std::vector<std::uint8_t>(s.begin(), s.end())); };
  EXPECT_EQ(enc(""), "");
  EXPECT_EQ(enc("f"), "Zg==");
  EXPECT_EQ(enc("fo"), "Zm8=");
  EXPECT_EQ(enc("foo"), "Zm9v");
  EXPECT_EQ(enc("foobar"), "Zm9vYmFy");
  const auto d = base64_decode("Zm9vYmE=");
  EXPECT_EQ(std::string(d.begin(), d.end()), "fooba");
  EXPECT_THROW(base64_decode("Zm9v!"), DataError);
  EXPECT_THROW(base64_decode("Zg==Zg"), DataError);
  std::vector<std::uint8_t> all(256);
  for (int i = 0; i < 256; ++i) all[i] = static_cast<std::uint8_t>(i);
  EXPECT_EQ(base64_decode(base64_encode(all)), all);
}

TEST(Landmarks, JsonRoundTrip) {
  LandmarkSet l;
  l.points = {{0.1, 0.2}, {0.3, 0.4}, {0.5, 0.6}};
  l.groups = {{"a", {0, 1}}, {"b", {2}}};
  const auto j = to_json(l);
  const auto r = landmarks_from_json(j);
  EXPECT_EQ(r.points, l.points);
  EXPECT_EQ(r.groups, l.groups);
  EXPECT_EQ(LandmarkSet::from_flat(l.flat(), l.groups).points, l.points);
}

TEST(Landmarks, ValidationAndExtent) {
  LandmarkSet l;
  l.points = {{0.1, 0.2}, {0.3, 0.5}, {0.5, 0.6}};
  l.groups = {{"eye", {0, 1}}};
  EXPECT_NO_THROW(l.validate());
  EXPECT_NEAR(group_vertical_extent(l, "eye"), 0.3, 1e-15);
  EXPECT_THROW(group_vertical_extent(l, "nose"), ConfigError);
  l.groups["mouth"] = {1, 2};
  EXPECT_THROW(l.validate(), ConfigError);
  l.groups = {{"eye", {0, 7}}};
  EXPECT_THROW(l.validate(), ConfigError);
  l.groups = {};
  l.points[0].x = std::nan("");
  EXPECT_THROW(l.validate(), ConfigError);
}

TEST(Landmarks, PoseRangeFlags) {
  EXPECT_FALSE(check_pose_range({0.0, 0.0, 0.0}).any());
  const auto f = check_pose_range({0.3, 0.0, -0.6});
  EXPECT_TRUE(f.yaw);
  EXPECT_FALSE(f.pitch);
  EXPECT_TRUE(f.roll);
  EXPECT_THROW(check_pose_range({std::nan(""), 0, 0}), DataError);
  EXPECT_THROW(validate_blink({-0.1, 0.2}), DataError);
  EXPECT_NO_THROW(validate_blink({0.0, 0.3}));
}

#include <gtest/gtest.h>

#include <httplib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <thread>

#include "apbface/error.hpp"
#include "apbface/infer_service.hpp"
#include "apbface/io.hpp"

using namespace apb;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  fs::path dir;
  Dataset data;
  ServiceConfig config;
};

// One toy identity trained briefly; a second configured identity has no checkpoints.
const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.dir = fs::temp_directory_path() / "apbface_test_service";
    fs::remove_all(x.dir);
    fs::create_directories(x.dir);
    SynthConfig sc;
    sc.n_samples = 400;
    sc.seed = 7;
    x.data = synth_dataset_in_memory(sc);
    TrainConfig tc;
    tc.predictor_arch = "toy";
    tc.predictor.epochs = 60;
    tc.reenactor_arch = {{"base_channels", 8}};
    tc.reenactor.epochs = 3;
    tc.log_steps = false;
    train_predictor(tc, x.data, "id0", x.dir);
    train_reenactor(tc, x.data, "id0", x.dir);
    const json cfg = {{"identities",
                       {{{"identity", "id0"}, {"predictor", "predictor_id0.apbt"}, {"reenactor", "reenactor_id0.apbt"}},
                        {{"identity", "id1"}, {"predictor", "missing_p.apbt"}, {"reenactor", "missing_r.apbt"}}}}};
    std::ofstream(x.dir / "service.json") << cfg.dump(1);
    x.config = ServiceConfig::load(x.dir / "service.json");
    return x;
  }();
  return f;
}

const Sample& val_sample() {
  const auto& f = fixture();
  return f.data.samples.at(f.data.manifest.split_indices("val", "id0").at(0));
}

json mfcc_rows(const MfccFeature& m) {
  json rows = json::array();
  for (int t = 0; t < m.frames; ++t) {
    json r = json::array();
    for (int c = 0; c < m.coeffs; ++c) r.push_back(m.at(t, c));
    rows.push_back(r);
  }
  return rows;
}

json base_request() {
  const auto& s = val_sample();
  return {{"identity", "id0"},
          {"audio", {{"mfcc", mfcc_rows(s.mfcc)}}},
          {"pose", {{"yaw", s.pose.yaw}, {"pitch", s.pose.pitch}, {"roll", s.pose.roll}}},
          {"blink", {{"left", s.blink.left}, {"right", s.blink.right}}}};
}

std::string f32_base64(const std::vector<double>& samples) {
  std::vector<std::uint8_t> bytes;
  for (double v : samples) {
    const float f = static_cast<float>(v);
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<std::uint8_t>(u >> (8 * k)));
  }
  return base64_encode(bytes);
}

struct Call {
  int status;
  json body;
};

Call call(InferenceEngine& e, const std::string& method, const std::string& path, const std::string& body = "") {
  const auto r = handle_request(e, method, path, body);
  json j;
  if (r.content_type == "application/json") j = json::parse(r.body);
  else j = r.body;
  return {r.status, j};
}

Call post(InferenceEngine& e, const std::string& path, const json& body) { return call(e, "POST", path, body.dump()); }

void expect_error(const Call& c, int status, const std::string& code) {
  EXPECT_EQ(c.status, status) << c.body.dump();
  ASSERT_TRUE(c.body.contains("error")) << c.body.dump();
  EXPECT_EQ(c.body["error"]["code"], code);
  EXPECT_TRUE(c.body["error"]["message"].is_string());
}

class Service : public ::testing::Test {
 protected:
  void SetUp() override { engine = std::make_unique<InferenceEngine>(fixture().config); }
  std::unique_ptr<InferenceEngine> engine;
};

}  // namespace

TEST_F(Service, HealthAndRouting) {
  const auto h = call(*engine, "GET", "/healthz");
  EXPECT_EQ(h.status, 200);
  EXPECT_EQ(h.body, "ok");
  expect_error(call(*engine, "GET", "/v1/nothing"), 404, "not_found");
  expect_error(call(*engine, "GET", "/v1/reenact"), 405, "method_not_allowed");
  expect_error(call(*engine, "POST", "/v1/reenact", "{not json"), 400, "invalid_json");
  const auto ids = call(*engine, "GET", "/v1/identities");
  ASSERT_EQ(ids.body["identities"].size(), 2u);
  EXPECT_TRUE(ids.body["identities"][0]["ready"].get<bool>());
  EXPECT_FALSE(ids.body["identities"][1]["ready"].get<bool>());
}

TEST_F(Service, FreshServerHasZeroedCounters) {
  const auto s = call(*engine, "GET", "/v1/stats").body;
  EXPECT_EQ(s["request_count"], 0);
  EXPECT_EQ(s["error_count"], 0);
  EXPECT_EQ(s["frame_count"], 0);
  for (const auto& st : {"features", "predict", "rasterize", "reenact", "total"}) {
    EXPECT_EQ(s["stages"][st]["count"], 0) << st;
    EXPECT_EQ(s["stages"][st]["mean_ms"], 0.0) << st;
  }
}

TEST_F(Service, ReenactHappyPath) {
  const auto r = post(*engine, "/v1/reenact", base_request());
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body["landmarks"].size(), 20u);
  EXPECT_EQ(r.body["resolution"], 64);
  const auto face = decode_png(base64_decode(r.body["face_png"].get<std::string>()));
  EXPECT_EQ(face.width, 64);
  EXPECT_EQ(face.height, 64);
  EXPECT_EQ(face.channels, 3);
  const auto lm = decode_png(base64_decode(r.body["landmark_png"].get<std::string>()));
  EXPECT_EQ(lm.width, 64);
  double sum = 0;
  for (const auto& st : {"features", "predict", "rasterize", "reenact"}) sum += r.body["latency_ms"][st].get<double>();
  EXPECT_LE(sum, r.body["total_ms"].get<double>());

  auto no_lm = base_request();
  no_lm["want_landmarks"] = false;
  EXPECT_FALSE(post(*engine, "/v1/reenact", no_lm).body.contains("landmark_png"));
}

TEST_F(Service, RepeatedRequestsAreIdentical) {
  const auto a = post(*engine, "/v1/reenact", base_request()).body;
  const auto b = post(*engine, "/v1/reenact", base_request()).body;
  EXPECT_EQ(a["landmarks"], b["landmarks"]);
  EXPECT_EQ(a["face_png"], b["face_png"]);
}

TEST_F(Service, PcmWindowMatchesPrecomputedFeatures) {
  const auto& fc = fixture().data.manifest.feature_config;
  AudioTrack w;
  w.sample_rate = fc.sample_rate;
  for (int i = 0; i < fc.window_samples(); ++i) w.samples.push_back(0.3 * std::sin(2 * M_PI * 300.0 * i / fc.sample_rate));
  // f32 rounding happens on the wire, so the oracle featurizes the rounded samples.
  AudioTrack rounded = w;
  for (auto& v : rounded.samples) v = static_cast<float>(v);
  auto req = base_request();
  req["audio"] = {{"pcm_base64", f32_base64(w.samples)}, {"sample_rate", w.sample_rate}};
  auto via_mfcc = base_request();
  via_mfcc["audio"] = {{"mfcc", mfcc_rows(extract_mfcc(rounded, fc))}};
  const auto a = post(*engine, "/v1/reenact", req);
  ASSERT_EQ(a.status, 200) << a.body.dump();
  EXPECT_EQ(a.body["landmarks"], post(*engine, "/v1/reenact", via_mfcc).body["landmarks"]);

  // A whole track with a frame index is windowed server-side.
  AudioTrack track;
  track.sample_rate = fc.sample_rate;
  for (int i = 0; i < fc.sample_rate; ++i) track.samples.push_back(static_cast<float>(0.2 * std::sin(0.01 * i)));
  auto framed = base_request();
  framed["audio"] = {{"pcm_base64", f32_base64(track.samples)}, {"sample_rate", track.sample_rate}, {"frame_index", 10}};
  auto expect = base_request();
  expect["audio"] = {{"mfcc", mfcc_rows(extract_mfcc(window_for_frame(track, 10, fc), fc))}};
  EXPECT_EQ(post(*engine, "/v1/reenact", framed).body["landmarks"], post(*engine, "/v1/reenact", expect).body["landmarks"]);

  // s16 payloads at another rate are accepted.
  std::vector<std::uint8_t> s16(2 * 1600);
  auto req16 = base_request();
  req16["audio"] = {{"pcm_base64", base64_encode(s16)}, {"sample_rate", 16000}, {"encoding", "s16le"}};
  EXPECT_EQ(post(*engine, "/v1/reenact", req16).status, 200);
}

TEST_F(Service, UnknownIdentityIs404) {
  auto req = base_request();
  req["identity"] = "nobody";
  expect_error(post(*engine, "/v1/reenact", req), 404, "unknown_identity");
}

TEST_F(Service, UnloadedModelIs503) {
  auto req = base_request();
  req["identity"] = "id1";
  expect_error(post(*engine, "/v1/reenact", req), 503, "model_not_loaded");
  EXPECT_FALSE(engine->ready("id1"));
  EXPECT_TRUE(engine->ready("id0"));
}

TEST_F(Service, MalformedAudioIs422) {
  std::vector<json> bad;
  auto r = base_request();
  r["audio"] = {{"pcm_base64", "@@@@"}, {"sample_rate", 16000}};
  bad.push_back(r);
  r["audio"] = {{"pcm_base64", "AAAA"}, {"sample_rate", 16000}, {"mfcc", mfcc_rows(val_sample().mfcc)}};
  bad.push_back(r);
  r["audio"] = json::object();
  bad.push_back(r);
  r.erase("audio");
  bad.push_back(r);
  r["audio"] = {{"mfcc", json::array({json::array({1.0, 2.0})})}};
  bad.push_back(r);
  r["audio"] = {{"pcm_base64", "AAAA"}, {"sample_rate", 16000}, {"encoding", "mp3"}};
  bad.push_back(r);
  r["audio"] = {{"pcm_base64", "AAAA"}, {"sample_rate", 16000}, {"encoding", "s16le"}};
  bad.push_back(r);
  r["audio"] = {{"pcm_base64", ""}, {"sample_rate", 16000}};
  bad.push_back(r);
  r["audio"] = {{"pcm_base64", "AAAAAA=="}, {"sample_rate", -5}};
  bad.push_back(r);
  for (std::size_t i = 0; i < bad.size(); ++i) {
    SCOPED_TRACE(i);
    expect_error(post(*engine, "/v1/reenact", bad[i]), 422, "malformed_audio");
  }

  auto neg = base_request();
  neg["blink"]["left"] = -0.1;
  expect_error(post(*engine, "/v1/reenact", neg), 422, "invalid_request");
  auto str = base_request();
  str["pose"]["yaw"] = "left";
  expect_error(post(*engine, "/v1/reenact", str), 422, "invalid_request");
}

TEST_F(Service, SweepVariesExactlyOneInput) {
  const json sweep = {{"variable", "yaw"}, {"range", {-0.3, 0.3}}, {"steps", 5}, {"base", base_request()}};
  const auto r = post(*engine, "/v1/sweep", sweep);
  ASSERT_EQ(r.status, 200) << r.body.dump();
  ASSERT_EQ(r.body["frames"].size(), 5u);
  const std::vector<double> want = {-0.3, -0.15, 0.0, 0.15, 0.3};
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(r.body["values"][i].get<double>(), want[i], 1e-15);

  const auto parsed = SweepRequest::from_json(sweep);
  for (int i = 0; i < 5; ++i) {
    const auto q = parsed.request_at(i);
    EXPECT_EQ(q.pose.yaw, parsed.value_at(i));
    EXPECT_EQ(q.pose.pitch, parsed.base.pose.pitch);
    EXPECT_EQ(q.pose.roll, parsed.base.pose.roll);
    EXPECT_EQ(q.blink, parsed.base.blink);
    EXPECT_EQ(q.audio.mfcc->values, parsed.base.audio.mfcc->values);
    // Each frame is the single-request answer for that input.
    auto single = base_request();
    single["pose"]["yaw"] = parsed.value_at(i);
    EXPECT_EQ(r.body["frames"][i]["landmarks"], post(*engine, "/v1/reenact", single).body["landmarks"]) << i;
  }
  EXPECT_NE(r.body["frames"][0]["landmarks"], r.body["frames"][4]["landmarks"]);
}

TEST_F(Service, SingleStepSweepEqualsReenactAtLo) {
  for (const std::string v : {"yaw", "pitch", "roll", "blink"}) {
    const json sweep = {{"variable", v}, {"range", {0.1, 0.3}}, {"steps", 1}, {"base", base_request()}};
    const auto r = post(*engine, "/v1/sweep", sweep);
    ASSERT_EQ(r.status, 200);
    ASSERT_EQ(r.body["frames"].size(), 1u);
    auto single = base_request();
    if (v == "blink") single["blink"] = {{"left", 0.1}, {"right", 0.1}};
    else single["pose"][v] = 0.1;
    const auto s = post(*engine, "/v1/reenact", single);
    EXPECT_EQ(r.body["frames"][0]["landmarks"], s.body["landmarks"]) << v;
    EXPECT_EQ(r.body["frames"][0]["face_png"], s.body["face_png"]) << v;
  }
}

TEST_F(Service, SweepErrors) {
  expect_error(post(*engine, "/v1/sweep", {{"variable", "smile"}, {"range", {0, 1}}, {"steps", 3}, {"base", base_request()}}),
               422, "unknown_variable");
  expect_error(post(*engine, "/v1/sweep", {{"variable", "yaw"}, {"range", {0}}, {"steps", 3}, {"base", base_request()}}), 422,
               "invalid_sweep");
  expect_error(post(*engine, "/v1/sweep", {{"variable", "yaw"}, {"range", {0, 1}}, {"steps", 0}, {"base", base_request()}}),
               422, "invalid_sweep");
  expect_error(post(*engine, "/v1/sweep", {{"variable", "yaw"}, {"range", {0, 1}}, {"steps", 1000}, {"base", base_request()}}),
               422, "invalid_sweep");
  auto base = base_request();
  base["identity"] = "nobody";
  expect_error(post(*engine, "/v1/sweep", {{"variable", "yaw"}, {"range", {0, 1}}, {"steps", 2}, {"base", base}}), 404,
               "unknown_identity");
}

TEST_F(Service, BlinkSweepOpensTheEyes) {
  const json sweep = {{"variable", "blink"}, {"range", {0.0, 0.5}}, {"steps", 6}, {"base", base_request()}};
  const auto r = post(*engine, "/v1/sweep", sweep);
  ASSERT_EQ(r.status, 200);
  const auto& groups = fixture().data.manifest.groups;
  for (const auto& eye : {"left_eye", "right_eye"}) {
    double prev = -1;
    for (const auto& f : r.body["frames"]) {
      LandmarkSet l;
      l.groups = groups;
      for (const auto& p : f["landmarks"]) l.points.push_back({p[0].get<double>(), p[1].get<double>()});
      const double e = group_vertical_extent(l, eye);
      EXPECT_GT(e, prev) << eye;
      prev = e;
    }
  }
}

TEST_F(Service, StatsCountRequests) {
  const int k = 4;
  for (int i = 0; i < k; ++i) post(*engine, "/v1/reenact", base_request());
  auto bad = base_request();
  bad["identity"] = "nobody";
  post(*engine, "/v1/reenact", bad);
  post(*engine, "/v1/sweep", {{"variable", "roll"}, {"range", {0, 0.2}}, {"steps", 3}, {"base", base_request()}});
  const auto s = call(*engine, "GET", "/v1/stats").body;
  EXPECT_EQ(s["request_count"], k + 1);
  EXPECT_EQ(s["error_count"], 1);
  EXPECT_EQ(s["sweep_count"], 1);
  EXPECT_EQ(s["frame_count"], k + 3);
  for (const auto& st : {"features", "predict", "rasterize", "reenact", "total"}) {
    EXPECT_EQ(s["stages"][st]["count"], k + 3) << st;
    EXPECT_GT(s["stages"][st]["fps"].get<double>(), 0.0) << st;
    EXPECT_LE(s["stages"][st]["p50_ms"].get<double>(), s["stages"][st]["p95_ms"].get<double>()) << st;
  }
  EXPECT_TRUE(s["environment"].contains("torch_threads"));
}

TEST_F(Service, StatsWindowIsBounded) {
  auto cfg = fixture().config;
  cfg.stats_window = 3;
  InferenceEngine small(cfg);
  for (int i = 0; i < 5; ++i) post(small, "/v1/reenact", base_request());
  const auto s = call(small, "GET", "/v1/stats").body;
  EXPECT_EQ(s["stages"]["total"]["count"], 5);
  EXPECT_EQ(s["stages"]["total"]["window"], 3);
}

TEST_F(Service, ConfigErrors) {
  EXPECT_THROW(ServiceConfig::from_json({{"identities", {{{"identity", "a"}}}}}), ConfigError);
  EXPECT_THROW(ServiceConfig::from_json({{"identities", json::array()}, {"stats_window", 0}}), ConfigError);
  const json dup = {{"identities",
                     {{{"identity", "a"}, {"predictor", "p"}, {"reenactor", "r"}},
                      {{"identity", "a"}, {"predictor", "p"}, {"reenactor", "r"}}}}};
  EXPECT_THROW(ServiceConfig::from_json(dup), ConfigError);
  EXPECT_THROW(ServiceConfig::load(fixture().dir / "absent.json"), IoError);
}

TEST_F(Service, HttpServerConcurrentMatchesSerial) {
  HttpServer server(*engine);
  const int port = server.bind("127.0.0.1", 0);
  std::thread loop([&] { server.serve(); });

  httplib::Client probe("127.0.0.1", port);
  for (int i = 0; i < 100 && !probe.Get("/healthz"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));

  std::vector<json> requests;
  for (int i = 0; i < 6; ++i) {
    auto r = base_request();
    r["pose"]["yaw"] = -0.2 + 0.08 * i;
    requests.push_back(r);
  }
  std::vector<json> serial;
  for (const auto& r : requests) {
    const auto res = probe.Post("/v1/reenact", r.dump(), "application/json");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200);
    serial.push_back(json::parse(res->body)["landmarks"]);
  }
  std::vector<json> parallel(requests.size());
  std::vector<std::thread> workers;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    workers.emplace_back([&, i] {
      httplib::Client c("127.0.0.1", port);
      const auto res = c.Post("/v1/reenact", requests[i].dump(), "application/json");
      if (res && res->status == 200) parallel[i] = json::parse(res->body)["landmarks"];
    });
  }
  for (auto& w : workers) w.join();
  EXPECT_EQ(parallel, serial);

  auto bad = base_request();
  bad["identity"] = "nobody";
  const auto nf = probe.Post("/v1/reenact", bad.dump(), "application/json");
  ASSERT_TRUE(nf);
  EXPECT_EQ(nf->status, 404);
  EXPECT_EQ(json::parse(nf->body)["error"]["code"], "unknown_identity");
  const auto health = probe.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->body, "ok");
  const auto stats = probe.Get("/v1/stats");
  ASSERT_TRUE(stats);
  EXPECT_EQ(json::parse(stats->body)["request_count"], 2 * requests.size() + 1);

  server.stop();
  loop.join();
}

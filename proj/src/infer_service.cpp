#include "apbface/infer_service.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include "apbface/error.hpp"
#include "apbface/io.hpp"
#include "apbface/landmark_render.hpp"

namespace apb {

namespace {

using Clock = std::chrono::steady_clock;
using json = nlohmann::json;

const std::vector<std::string> kStages{"features", "predict", "rasterize", "reenact"};

double ms_since(Clock::time_point t0) { return std::chrono::duration<double, std::milli>(Clock::now() - t0).count(); }

[[noreturn]] void unprocessable(const std::string& code, const std::string& message) {
  throw ServiceError(422, code, message);
}

double number_field(const json& obj, const char* key, double fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_number()) unprocessable("invalid_request", where + "." + key + " must be a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) unprocessable("invalid_request", where + "." + key + " must be finite");
  return x;
}

AudioTrack decode_pcm(const json& a) {
  if (!a.at("pcm_base64").is_string()) unprocessable("malformed_audio", "audio.pcm_base64 must be a string");
  if (!a.contains("sample_rate") || !a.at("sample_rate").is_number_integer()) {
    unprocessable("malformed_audio", "audio.sample_rate must be an integer");
  }
  AudioTrack t;
  t.sample_rate = a.at("sample_rate").get<int>();
  if (t.sample_rate <= 0) unprocessable("malformed_audio", "audio.sample_rate must be positive");
  const std::string enc = a.value("encoding", "f32le");
  std::vector<std::uint8_t> bytes;
  try {
    bytes = base64_decode(a.at("pcm_base64").get<std::string>());
  } catch (const std::exception& e) {
    unprocessable("malformed_audio", std::string("audio.pcm_base64: ") + e.what());
  }
  if (enc == "f32le") {
    if (bytes.size() % 4 != 0) unprocessable("malformed_audio", "f32le payload length is not a multiple of 4");
    t.samples.resize(bytes.size() / 4);
    for (std::size_t i = 0; i < t.samples.size(); ++i) {
      std::uint32_t u = std::uint32_t(bytes[4 * i]) | std::uint32_t(bytes[4 * i + 1]) << 8 |
                        std::uint32_t(bytes[4 * i + 2]) << 16 | std::uint32_t(bytes[4 * i + 3]) << 24;
      float f;
      std::memcpy(&f, &u, 4);
      if (!std::isfinite(f)) unprocessable("malformed_audio", "audio contains non-finite samples");
      t.samples[i] = std::clamp(static_cast<double>(f), -1.0, 1.0);
    }
  } else if (enc == "s16le") {
    if (bytes.size() % 2 != 0) unprocessable("malformed_audio", "s16le payload length is odd");
    t.samples.resize(bytes.size() / 2);
    for (std::size_t i = 0; i < t.samples.size(); ++i) {
      const auto v = static_cast<std::int16_t>(std::uint16_t(bytes[2 * i]) | std::uint16_t(bytes[2 * i + 1]) << 8);
      t.samples[i] = v / 32768.0;
    }
  } else {
    unprocessable("malformed_audio", "audio.encoding must be f32le or s16le");
  }
  if (t.samples.empty()) unprocessable("malformed_audio", "audio window is empty");
  return t;
}

MfccFeature decode_mfcc(const json& rows) {
  if (!rows.is_array() || rows.empty()) unprocessable("malformed_audio", "audio.mfcc must be a non-empty array of rows");
  MfccFeature m;
  m.frames = static_cast<int>(rows.size());
  for (const auto& r : rows) {
    if (!r.is_array() || r.empty()) unprocessable("malformed_audio", "audio.mfcc rows must be non-empty arrays");
    if (m.coeffs == 0) m.coeffs = static_cast<int>(r.size());
    if (static_cast<int>(r.size()) != m.coeffs) unprocessable("malformed_audio", "audio.mfcc rows differ in length");
    for (const auto& v : r) {
      if (!v.is_number()) unprocessable("malformed_audio", "audio.mfcc entries must be numbers");
      m.values.push_back(v.get<double>());
    }
  }
  return m;
}

// Cuts or zero-pads a bare window to the configured length after resampling.
AudioTrack fit_window(const AudioTrack& pcm, const FeatureConfig& fc) {
  auto t = pcm.sample_rate == fc.sample_rate ? pcm : resample(pcm, fc.sample_rate);
  t.samples.resize(static_cast<std::size_t>(fc.window_samples()), 0.0);
  return t;
}

json error_json(const std::string& code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * v.size()));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

}  // namespace

json ServiceError::body() const { return error_json(code_, what()); }

ServiceConfig ServiceConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  ServiceConfig c;
  try {
    for (const auto& e : j.at("identities")) {
      Entry en;
      en.identity = e.at("identity").get<std::string>();
      en.predictor = e.at("predictor").get<std::string>();
      en.reenactor = e.at("reenactor").get<std::string>();
      if (en.predictor.is_relative() && !base_dir.empty()) en.predictor = base_dir / en.predictor;
      if (en.reenactor.is_relative() && !base_dir.empty()) en.reenactor = base_dir / en.reenactor;
      for (const auto& other : c.identities) {
        if (other.identity == en.identity) throw ConfigError("service config: duplicate identity '" + en.identity + "'");
      }
      c.identities.push_back(std::move(en));
    }
    c.point_radius = j.value("point_radius", c.point_radius);
    c.stats_window = j.value("stats_window", c.stats_window);
    c.max_sweep_steps = j.value("max_sweep_steps", c.max_sweep_steps);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("service config: ") + e.what());
  }
  if (c.point_radius < 0 || c.stats_window == 0 || c.max_sweep_steps < 1) {
    throw ConfigError("service config: point_radius >= 0, stats_window >= 1, max_sweep_steps >= 1");
  }
  return c;
}

ServiceConfig ServiceConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open service config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("service config " + path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

json ServiceConfig::to_json() const {
  json ids = json::array();
  for (const auto& e : identities) {
    ids.push_back({{"identity", e.identity}, {"predictor", e.predictor.string()}, {"reenactor", e.reenactor.string()}});
  }
  return {{"identities", ids},
          {"point_radius", point_radius},
          {"stats_window", stats_window},
          {"max_sweep_steps", max_sweep_steps}};
}

ReenactRequest ReenactRequest::from_json(const json& j) {
  if (!j.is_object()) unprocessable("invalid_request", "request body must be a JSON object");
  ReenactRequest r;
  if (!j.contains("identity") || !j.at("identity").is_string()) unprocessable("invalid_request", "identity must be a string");
  r.identity = j.at("identity").get<std::string>();

  const json pose = j.value("pose", json::object());
  const json blink = j.value("blink", json::object());
  if (!pose.is_object() || !blink.is_object()) unprocessable("invalid_request", "pose and blink must be objects");
  r.pose = {number_field(pose, "yaw", 0.0, "pose"), number_field(pose, "pitch", 0.0, "pose"),
            number_field(pose, "roll", 0.0, "pose")};
  r.blink = {number_field(blink, "left", 0.0, "blink"), number_field(blink, "right", 0.0, "blink")};
  if (r.blink.left < 0 || r.blink.right < 0) unprocessable("invalid_request", "blink ratios must be non-negative");
  if (j.contains("want_landmarks")) {
    if (!j.at("want_landmarks").is_boolean()) unprocessable("invalid_request", "want_landmarks must be a boolean");
    r.want_landmarks = j.at("want_landmarks").get<bool>();
  }

  if (!j.contains("audio") || !j.at("audio").is_object()) unprocessable("malformed_audio", "audio must be an object");
  const auto& a = j.at("audio");
  const bool has_pcm = a.contains("pcm_base64"), has_mfcc = a.contains("mfcc");
  if (has_pcm == has_mfcc) unprocessable("malformed_audio", "audio needs exactly one of pcm_base64 or mfcc");
  if (has_pcm) {
    r.audio.pcm = decode_pcm(a);
    if (a.contains("frame_index")) {
      if (!a.at("frame_index").is_number_integer() || a.at("frame_index").get<long>() < 0) {
        unprocessable("malformed_audio", "audio.frame_index must be a non-negative integer");
      }
      r.audio.frame_index = a.at("frame_index").get<long>();
    }
  } else {
    r.audio.mfcc = decode_mfcc(a.at("mfcc"));
  }
  return r;
}

json ReenactRequest::to_json() const {
  json a;
  if (audio.mfcc) {
    json rows = json::array();
    for (int t = 0; t < audio.mfcc->frames; ++t) {
      json row = json::array();
      for (int c = 0; c < audio.mfcc->coeffs; ++c) row.push_back(audio.mfcc->at(t, c));
      rows.push_back(row);
    }
    a["mfcc"] = rows;
  } else if (audio.pcm) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(audio.pcm->samples.size() * 4);
    for (double s : audio.pcm->samples) {
      const float f = static_cast<float>(s);
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<std::uint8_t>(u >> (8 * k)));
    }
    a = {{"pcm_base64", base64_encode(bytes)}, {"sample_rate", audio.pcm->sample_rate}, {"encoding", "f32le"}};
    if (audio.frame_index) a["frame_index"] = *audio.frame_index;
  }
  return {{"identity", identity},
          {"audio", a},
          {"pose", {{"yaw", pose.yaw}, {"pitch", pose.pitch}, {"roll", pose.roll}}},
          {"blink", {{"left", blink.left}, {"right", blink.right}}},
          {"want_landmarks", want_landmarks}};
}

json ReenactResponse::to_json() const {
  json pts = json::array();
  for (const auto& p : landmarks.points) pts.push_back({p.x, p.y});
  json lat = json::object();
  for (const auto& s : latency) lat[s.stage] = s.ms;
  json j = {{"identity", identity},
            {"resolution", face.width},
            {"landmarks", pts},
            {"face_png", base64_encode(encode_png(to_u8(face)))},
            {"latency_ms", lat},
            {"total_ms", total_ms}};
  if (landmark_image) j["landmark_png"] = base64_encode(encode_png(binary_to_u8(*landmark_image)));
  return j;
}

SweepVariable parse_sweep_variable(const std::string& name) {
  if (name == "yaw") return SweepVariable::Yaw;
  if (name == "pitch") return SweepVariable::Pitch;
  if (name == "roll") return SweepVariable::Roll;
  if (name == "blink") return SweepVariable::Blink;
  unprocessable("unknown_variable", "sweep variable must be one of yaw, pitch, roll, blink; got '" + name + "'");
}

std::string to_string(SweepVariable v) {
  switch (v) {
    case SweepVariable::Yaw: return "yaw";
    case SweepVariable::Pitch: return "pitch";
    case SweepVariable::Roll: return "roll";
    case SweepVariable::Blink: return "blink";
  }
  return "?";
}

SweepRequest SweepRequest::from_json(const json& j) {
  if (!j.is_object()) unprocessable("invalid_request", "request body must be a JSON object");
  SweepRequest s;
  if (!j.contains("variable") || !j.at("variable").is_string()) unprocessable("unknown_variable", "variable must be a string");
  s.variable = parse_sweep_variable(j.at("variable").get<std::string>());
  const auto range = j.value("range", json());
  if (!range.is_array() || range.size() != 2 || !range[0].is_number() || !range[1].is_number()) {
    unprocessable("invalid_sweep", "range must be [lo, hi]");
  }
  s.lo = range[0].get<double>();
  s.hi = range[1].get<double>();
  if (!j.contains("steps") || !j.at("steps").is_number_integer() || j.at("steps").get<int>() < 1) {
    unprocessable("invalid_sweep", "steps must be a positive integer");
  }
  s.steps = j.at("steps").get<int>();
  if (s.variable == SweepVariable::Blink && std::min(s.lo, s.hi) < 0) {
    unprocessable("invalid_sweep", "blink sweep range must be non-negative");
  }
  s.base = ReenactRequest::from_json(j.value("base", json()));
  return s;
}

double SweepRequest::value_at(int i) const {
  if (steps == 1) return lo;
  // Endpoint-weighted form keeps lo and hi exact.
  return ((steps - 1 - i) * lo + i * hi) / (steps - 1);
}

ReenactRequest SweepRequest::request_at(int i) const {
  auto r = base;
  const double v = value_at(i);
  switch (variable) {
    case SweepVariable::Yaw: r.pose.yaw = v; break;
    case SweepVariable::Pitch: r.pose.pitch = v; break;
    case SweepVariable::Roll: r.pose.roll = v; break;
    case SweepVariable::Blink: r.blink = {v, v}; break;
  }
  return r;
}

json SweepResponse::to_json() const {
  json frames_json = json::array();
  for (const auto& f : frames) frames_json.push_back(f.to_json());
  return {{"variable", to_string(variable)}, {"values", values}, {"frames", frames_json}};
}

StatsRecorder::StatsRecorder(std::size_t window) : window_(window), start_(Clock::now()) {}

void StatsRecorder::record(const std::vector<StageLatency>& stages, double total_ms) {
  std::lock_guard lock(mu_);
  auto push = [&](const std::string& name, double ms) {
    auto& d = samples_[name];
    d.push_back(ms);
    if (d.size() > window_) d.pop_front();
    ++stage_counts_[name];
  };
  for (const auto& s : stages) push(s.stage, s.ms);
  push("total", total_ms);
  ++frames_;
}

void StatsRecorder::count_request(bool ok) {
  std::lock_guard lock(mu_);
  ++requests_;
  if (!ok) ++errors_;
}

void StatsRecorder::count_sweep() {
  std::lock_guard lock(mu_);
  ++sweeps_;
}

std::uint64_t StatsRecorder::request_count() const {
  std::lock_guard lock(mu_);
  return requests_;
}

json StatsRecorder::report() const {
  std::lock_guard lock(mu_);
  json stages = json::object();
  auto names = kStages;
  names.push_back("total");
  for (const auto& n : names) {
    const auto it = samples_.find(n);
    const std::vector<double> v = it == samples_.end() ? std::vector<double>{} : std::vector<double>(it->second.begin(), it->second.end());
    double sum = 0;
    for (double x : v) sum += x;
    const double mean = v.empty() ? 0.0 : sum / v.size();
    const auto c = stage_counts_.find(n);
    stages[n] = {{"count", c == stage_counts_.end() ? 0 : c->second},
                 {"window", v.size()},
                 {"mean_ms", mean},
                 {"p50_ms", percentile(v, 0.5)},
                 {"p95_ms", percentile(v, 0.95)},
                 {"fps", mean > 0 ? 1000.0 / mean : 0.0}};
  }
  return {{"request_count", requests_},
          {"error_count", errors_},
          {"sweep_count", sweeps_},
          {"frame_count", frames_},
          {"uptime_s", std::chrono::duration<double>(Clock::now() - start_).count()},
          {"stages", stages},
          {"environment",
           {{"torch_threads", torch::get_num_threads()},
            {"hardware_concurrency", std::thread::hardware_concurrency()},
            {"device", "cpu"}}}};
}

InferenceEngine::InferenceEngine(const ServiceConfig& cfg) : cfg_(cfg), stats_(cfg.stats_window) {
  for (const auto& e : cfg_.identities) {
    Slot s;
    s.entry = e;
    s.gate = std::make_unique<std::mutex>();
    try {
      s.predictor = load_predictor(e.predictor);
      s.reenactor = load_reenactor(e.reenactor);
      if (s.predictor->resolution != s.reenactor->arch.resolution) {
        throw ConfigError("predictor resolution " + std::to_string(s.predictor->resolution) +
                          " differs from reenactor resolution " + std::to_string(s.reenactor->arch.resolution));
      }
    } catch (const std::exception& ex) {
      s.predictor.reset();
      s.reenactor.reset();
      s.load_error = ex.what();
    }
    slots_.emplace(e.identity, std::move(s));
  }
}

std::vector<std::string> InferenceEngine::identities() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : slots_) out.push_back(k);
  return out;
}

bool InferenceEngine::ready(const std::string& identity) const {
  const auto it = slots_.find(identity);
  return it != slots_.end() && it->second.predictor && it->second.reenactor;
}

json InferenceEngine::describe() const {
  json ids = json::array();
  for (const auto& [name, s] : slots_) {
    json d = {{"identity", name}, {"ready", s.predictor.has_value() && s.reenactor.has_value()}};
    if (s.predictor) {
      d["resolution"] = s.predictor->resolution;
      d["landmarks"] = s.predictor->arch.landmark_count;
      d["feature_config"] = s.predictor->features.id();
    } else {
      d["error"] = s.load_error;
    }
    ids.push_back(d);
  }
  return {{"identities", ids}};
}

InferenceEngine::Slot& InferenceEngine::slot_for(const std::string& identity) {
  const auto it = slots_.find(identity);
  if (it == slots_.end()) throw ServiceError(404, "unknown_identity", "identity '" + identity + "' is not configured");
  if (!it->second.predictor || !it->second.reenactor) {
    throw ServiceError(503, "model_not_loaded", "models for '" + identity + "' are not loaded: " + it->second.load_error);
  }
  return it->second;
}

ReenactResponse InferenceEngine::run(Slot& slot, const ReenactRequest& req) {
  torch::NoGradGuard ng;
  auto& pred = *slot.predictor;
  auto& reen = *slot.reenactor;
  const auto& fc = pred.features;
  ReenactResponse out;
  out.identity = req.identity;
  const auto t0 = Clock::now();

  auto t = Clock::now();
  MfccFeature mfcc;
  if (req.audio.mfcc) {
    mfcc = *req.audio.mfcc;
    if (mfcc.frames != fc.n_fft_frames || mfcc.coeffs != fc.n_mfcc) {
      unprocessable("malformed_audio", "audio.mfcc must be " + std::to_string(fc.n_fft_frames) + " x " +
                                           std::to_string(fc.n_mfcc));
    }
    mfcc.config_id = fc.id();
  } else {
    AudioTrack window;
    if (req.audio.frame_index) {
      const auto track = req.audio.pcm->sample_rate == fc.sample_rate ? *req.audio.pcm : resample(*req.audio.pcm, fc.sample_rate);
      window = window_for_frame(track, *req.audio.frame_index, fc);
    } else {
      window = fit_window(*req.audio.pcm, fc);
    }
    try {
      mfcc = extract_mfcc(window, fc);
    } catch (const std::exception& e) {
      unprocessable("malformed_audio", e.what());
    }
  }
  out.latency.push_back({"features", ms_since(t)});

  t = Clock::now();
  out.landmarks = predict_landmarks(pred.model, mfcc, req.pose, req.blink, pred.groups);
  out.latency.push_back({"predict", ms_since(t)});

  t = Clock::now();
  const auto limg = rasterize(out.landmarks, pred.resolution, cfg_.point_radius);
  out.latency.push_back({"rasterize", ms_since(t)});

  t = Clock::now();
  out.face = apb::reenact(reen.model, limg);
  out.latency.push_back({"reenact", ms_since(t)});

  if (req.want_landmarks) out.landmark_image = limg;
  out.total_ms = ms_since(t0);
  stats_.record(out.latency, out.total_ms);
  return out;
}

ReenactResponse InferenceEngine::reenact(const ReenactRequest& req) {
  try {
    auto& slot = slot_for(req.identity);
    std::lock_guard gate(*slot.gate);
    auto r = run(slot, req);
    stats_.count_request(true);
    return r;
  } catch (...) {
    stats_.count_request(false);
    throw;
  }
}

SweepResponse InferenceEngine::sweep(const SweepRequest& req) {
  if (req.steps > cfg_.max_sweep_steps) {
    unprocessable("invalid_sweep", "steps must be at most " + std::to_string(cfg_.max_sweep_steps));
  }
  auto& slot = slot_for(req.base.identity);
  SweepResponse out;
  out.variable = req.variable;
  std::lock_guard gate(*slot.gate);
  for (int i = 0; i < req.steps; ++i) {
    out.values.push_back(req.value_at(i));
    out.frames.push_back(run(slot, req.request_at(i)));
  }
  stats_.count_sweep();
  return out;
}

HttpReply handle_request(InferenceEngine& engine, const std::string& method, const std::string& path,
                         const std::string& body) {
  auto reply = [](int status, const json& j) { return HttpReply{status, "application/json", j.dump()}; };
  const bool get = method == "GET", post = method == "POST";
  const bool known = path == "/healthz" || path == "/v1/stats" || path == "/v1/identities" || path == "/v1/reenact" ||
                     path == "/v1/sweep";
  if (!known) return reply(404, error_json("not_found", "no route for " + path));
  const bool wants_post = path == "/v1/reenact" || path == "/v1/sweep";
  if ((wants_post && !post) || (!wants_post && !get)) {
    return reply(405, error_json("method_not_allowed", method + " is not supported on " + path));
  }
  if (path == "/healthz") return {200, "text/plain", "ok"};
  if (path == "/v1/stats") return reply(200, engine.stats().report());
  if (path == "/v1/identities") return reply(200, engine.describe());

  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    if (path == "/v1/reenact") engine.stats().count_request(false);
    return reply(400, error_json("invalid_json", e.what()));
  }
  try {
    if (path == "/v1/reenact") {
      ReenactRequest req;
      try {
        req = ReenactRequest::from_json(j);
      } catch (const ServiceError&) {
        engine.stats().count_request(false);
        throw;
      }
      return reply(200, engine.reenact(req).to_json());
    }
    return reply(200, engine.sweep(SweepRequest::from_json(j)).to_json());
  } catch (const ServiceError& e) {
    return reply(e.status(), e.body());
  } catch (const std::exception& e) {
    return reply(500, error_json("internal", e.what()));
  }
}

struct HttpServer::Impl {
  explicit Impl(InferenceEngine& e) : engine(e) {}
  InferenceEngine& engine;
  httplib::Server server;
};

HttpServer::HttpServer(InferenceEngine& engine) : impl_(std::make_unique<Impl>(engine)) {
  auto handler = [this](const httplib::Request& req, httplib::Response& res) {
    const auto r = handle_request(impl_->engine, req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  impl_->server.Get(".*", handler);
  impl_->server.Post(".*", handler);
  impl_->server.Put(".*", handler);
  impl_->server.Delete(".*", handler);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->server.bind_to_any_port(host);
    if (p < 0) throw IoError("cannot bind " + host);
    return p;
  }
  if (!impl_->server.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::serve() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace apb

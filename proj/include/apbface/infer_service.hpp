#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apbface/landmarks.hpp"
#include "apbface/signal_audio.hpp"
#include "apbface/train_harness.hpp"

namespace apb {

// Request-level failure carrying the HTTP status and a machine-readable code.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }
  nlohmann::json body() const;  // {"error": {"code", "message"}}

 private:
  int status_;
  std::string code_;
};

struct ServiceConfig {
  struct Entry {
    std::string identity;
    std::filesystem::path predictor;
    std::filesystem::path reenactor;
  };
  std::vector<Entry> identities;
  int point_radius = 1;
  std::size_t stats_window = 1024;  // latency samples kept per stage
  int max_sweep_steps = 64;

  // Relative checkpoint paths resolve against base_dir.
  static ServiceConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static ServiceConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

// Exactly one of pcm or mfcc is set.
struct AudioInput {
  std::optional<AudioTrack> pcm;
  std::optional<long> frame_index;  // pcm is a whole track; the frame's window is cut server-side
  std::optional<MfccFeature> mfcc;
};

struct ReenactRequest {
  std::string identity;
  AudioInput audio;
  PoseTriple pose;
  BlinkPair blink;
  bool want_landmarks = true;

  // Throws ServiceError(422) on schema violations.
  static ReenactRequest from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct StageLatency {
  std::string stage;
  double ms = 0.0;
};

struct ReenactResponse {
  std::string identity;
  LandmarkSet landmarks;
  std::optional<BinaryImage> landmark_image;
  FaceImage face;
  std::vector<StageLatency> latency;  // features, predict, rasterize, reenact
  double total_ms = 0.0;

  nlohmann::json to_json() const;  // images as base64 PNG
};

enum class SweepVariable { Yaw, Pitch, Roll, Blink };
SweepVariable parse_sweep_variable(const std::string& name);  // ServiceError(422) when unknown
std::string to_string(SweepVariable v);

struct SweepRequest {
  SweepVariable variable = SweepVariable::Yaw;
  double lo = 0.0, hi = 0.0;
  int steps = 1;
  ReenactRequest base;

  static SweepRequest from_json(const nlohmann::json& j);
  // Value of the swept variable at step i; steps == 1 gives lo.
  double value_at(int i) const;
  ReenactRequest request_at(int i) const;
};

struct SweepResponse {
  SweepVariable variable = SweepVariable::Yaw;
  std::vector<double> values;
  std::vector<ReenactResponse> frames;
  nlohmann::json to_json() const;
};

// Bounded per-stage latency history plus monotone counters.
class StatsRecorder {
 public:
  explicit StatsRecorder(std::size_t window = 1024);
  void record(const std::vector<StageLatency>& stages, double total_ms);
  void count_request(bool ok);
  void count_sweep();
  nlohmann::json report() const;
  std::uint64_t request_count() const;

 private:
  mutable std::mutex mu_;
  std::size_t window_;
  std::chrono::steady_clock::time_point start_;
  std::uint64_t requests_ = 0, errors_ = 0, sweeps_ = 0, frames_ = 0;
  std::map<std::string, std::deque<double>> samples_;
  std::map<std::string, std::uint64_t> stage_counts_;
};

// Loaded models for all configured identities. Inference on one identity is serialized behind its gate;
// parameters are never written after construction.
class InferenceEngine {
 public:
  explicit InferenceEngine(const ServiceConfig& cfg);

  ReenactResponse reenact(const ReenactRequest& req);
  SweepResponse sweep(const SweepRequest& req);

  std::vector<std::string> identities() const;
  // Identity is configured and both checkpoints loaded.
  bool ready(const std::string& identity) const;
  nlohmann::json describe() const;
  StatsRecorder& stats() { return stats_; }
  const ServiceConfig& config() const { return cfg_; }

 private:
  struct Slot {
    ServiceConfig::Entry entry;
    std::optional<LoadedPredictor> predictor;
    std::optional<LoadedReenactor> reenactor;
    std::string load_error;
    std::unique_ptr<std::mutex> gate;
  };
  Slot& slot_for(const std::string& identity);
  ReenactResponse run(Slot& slot, const ReenactRequest& req);

  ServiceConfig cfg_;
  std::map<std::string, Slot> slots_;
  StatsRecorder stats_;
};

// JSON-in/JSON-out dispatch shared by the HTTP server and the bindings.
struct HttpReply {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};
HttpReply handle_request(InferenceEngine& engine, const std::string& method, const std::string& path,
                         const std::string& body);

class HttpServer {
 public:
  explicit HttpServer(InferenceEngine& engine);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  void serve();  // blocks until stop()
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace apb

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

#include "apbface/checkpoint.hpp"
#include "apbface/data_kit.hpp"
#include "apbface/error.hpp"
#include "apbface/infer_service.hpp"
#include "apbface/io.hpp"
#include "apbface/landmark_render.hpp"
#include "apbface/train_harness.hpp"

using namespace apb;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

std::vector<std::string> identities_of(const Dataset& d, const std::string& only) {
  if (!only.empty()) {
    d.manifest.identity(only);
    return {only};
  }
  std::vector<std::string> out;
  for (const auto& id : d.manifest.identities) out.push_back(id.name);
  return out;
}

HttpServer* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"apbface: audio + pose + blink driven face reenactment"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "intra-op threads")->check(CLI::PositiveNumber);

  std::string in, out, config, data, frames, annotations, audio, landmarks, checkpoint, identity, split = "val";
  long frame = 0;
  int port = 8080, resolution = 256, radius = 1;
  std::string host = "127.0.0.1";

  auto* mfcc = app.add_subcommand("mfcc", "MFCC features of one video frame's audio window");
  mfcc->add_option("--in", in, "mono WAV")->required();
  mfcc->add_option("--frame", frame, "video frame index")->required();
  mfcc->add_option("--config", config, "feature config JSON");
  mfcc->add_option("--out", out, "APBT output")->required();

  auto* render = app.add_subcommand("render", "rasterize a landmark JSON to a binary PNG");
  render->add_option("--landmarks", landmarks)->required();
  render->add_option("--out", out)->required();
  render->add_option("--resolution", resolution)->check(CLI::PositiveNumber);
  render->add_option("--radius", radius)->check(CLI::NonNegativeNumber);
  bool render_mask = false;
  render->add_flag("--mask", render_mask, "write the dilated face mask instead");

  auto* synth = app.add_subcommand("synth-data", "generate the synthetic dataset");
  synth->add_option("--config", config, "SynthConfig JSON (defaults when omitted)");
  synth->add_option("--out", out)->required();

  auto* prep = app.add_subcommand("preprocess", "build a dataset from frames, annotations and audio");
  prep->add_option("--frames", frames)->required();
  prep->add_option("--annotations", annotations)->required();
  prep->add_option("--audio", audio)->required();
  prep->add_option("--out", out)->required();
  prep->add_option("--resolution", resolution)->check(CLI::PositiveNumber);

  auto add_train = [&](CLI::App* c) {
    c->add_option("--config", config, "TrainConfig JSON (defaults when omitted)");
    c->add_option("--data", data)->required();
    c->add_option("--out", out)->required();
    c->add_option("--identity", identity, "train one identity (default: all)");
  };
  auto* trp = app.add_subcommand("train-predictor", "train the landmark predictor per identity");
  add_train(trp);
  auto* trr = app.add_subcommand("train-reenactor", "train the face reenactor per identity");
  add_train(trr);
  auto* pipe = app.add_subcommand("pipeline", "train both stages and evaluate");
  add_train(pipe);
  pipe->add_option("--split", split);

  auto* eval = app.add_subcommand("eval", "evaluate trained checkpoints on a split");
  eval->add_option("--checkpoint", checkpoint, "directory holding predictor_<id>.apbt and reenactor_<id>.apbt")->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--out", out)->required();
  eval->add_option("--split", split);
  eval->add_option("--identity", identity);

  auto* serve = app.add_subcommand("serve", "HTTP inference service");
  serve->add_option("--config", config)->required();
  serve->add_option("--port", port)->check(CLI::Range(0, 65535));
  serve->add_option("--host", host);

  CLI11_PARSE(app, argc, argv);
  torch::set_num_threads(threads);

  try {
    if (*mfcc) {
      const FeatureConfig fc = config.empty() ? FeatureConfig{} : feature_config_from_json(read_json(config));
      auto track = read_wav(in);
      if (track.sample_rate != fc.sample_rate) track = resample(track, fc.sample_rate);
      const auto m = extract_mfcc(window_for_frame(track, frame, fc), fc);
      ArrayBundle b;
      b["mfcc"] = ArrayRecord::from_f64(m.values, {std::uint64_t(m.frames), std::uint64_t(m.coeffs)});
      b["config_id"] = ArrayRecord::from_string(m.config_id);
      save_bundle(out, b);
    } else if (*render) {
      const auto l = landmarks_from_json(read_json(landmarks));
      const auto img = render_mask ? face_mask(l, resolution, default_dilation_radius(resolution)) : rasterize(l, resolution, radius);
      write_png(out, binary_to_u8(img));
    } else if (*synth) {
      const SynthConfig sc = config.empty() ? SynthConfig{} : SynthConfig::from_json(read_json(config));
      const auto m = synth_dataset(sc, out);
      std::cout << "wrote " << m.entries.size() << " samples to " << out << '\n';
    } else if (*prep) {
      PreprocessOptions opt;
      opt.resolution = resolution;
      const auto m = preprocess_frames(frames, annotations, audio, out, opt);
      std::cout << "wrote " << m.entries.size() << " samples to " << out << '\n';
    } else if (*trp || *trr || *pipe) {
      const TrainConfig tc = config.empty() ? TrainConfig{} : TrainConfig::from_json(read_json(config));
      const auto d = load_dataset(data);
      fs::create_directories(out);
      if (*pipe) {
        PipelineOptions po;
        po.eval_split = split;
        const auto r = run_pipeline(tc, d, out, po);
        write_json(fs::path(out) / "report.json", r.to_json());
        std::cout << r.to_json().dump(2) << '\n';
      } else {
        for (const auto& id : identities_of(d, identity)) {
          const auto r = *trp ? train_predictor(tc, d, id, out) : train_reenactor(tc, d, id, out);
          std::cout << id << ": " << r.checkpoint.string() << '\n';
        }
      }
    } else if (*eval) {
      const auto d = load_dataset(data);
      const auto ids = identities_of(d, "");
      json report = json::array();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!identity.empty() && ids[i] != identity) continue;
        auto p = load_predictor(predictor_checkpoint_path(checkpoint, ids[i]));
        auto r = load_reenactor(reenactor_checkpoint_path(checkpoint, ids[i]));
        report.push_back(evaluate_identity(d, ids[i], p, r, split, ids[(i + 1) % ids.size()]).to_json());
      }
      write_json(out, {{"split", split}, {"identities", report}});
    } else if (*serve) {
      InferenceEngine engine(ServiceConfig::load(config));
      for (const auto& id : engine.identities()) {
        std::cerr << id << (engine.ready(id) ? ": ready" : ": not loaded") << '\n';
      }
      HttpServer server(engine);
      const int bound = server.bind(host, port);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "listening on http://" << host << ":" << bound << '\n';
      server.serve();
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 4;
  }
  return 0;
}

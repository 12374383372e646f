#include "apbface/train_harness.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "apbface/checkpoint.hpp"
#include "apbface/error.hpp"
#include "apbface/io.hpp"
#include "apbface/landmark_render.hpp"

namespace apb {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

torch::Tensor index_tensor(const std::vector<std::size_t>& rows) {
  std::vector<std::int64_t> v(rows.begin(), rows.end());
  return torch::tensor(v, torch::kInt64);
}

LossReport mean_report(const std::vector<LossReport>& steps) {
  LossReport out;
  if (steps.empty()) return out;
  for (const auto& s : steps) {
    for (const auto& [k, v] : s.terms) out.terms[k] += v;
    out.weights = s.weights;
  }
  for (auto& [k, v] : out.terms) v /= static_cast<double>(steps.size());
  for (const auto& [k, v] : out.terms) out.total += out.weights[k] * v;
  return out;
}

torch::optim::AdamOptions adam_options(const StageConfig& s) {
  return torch::optim::AdamOptions(s.lr).betas({s.beta1, s.beta2});
}

void copy_rows(std::vector<float>& dst, std::size_t row, const std::vector<double>& src) {
  std::copy(src.begin(), src.end(), dst.begin() + static_cast<long>(row * src.size()));
}

torch::Tensor from_floats(std::vector<float>& v, std::vector<std::int64_t> shape) {
  return torch::from_blob(v.data(), shape, torch::kFloat32).clone();
}

// Writes an (rows*R) x (cols*R) RGB mosaic.
void write_mosaic(const std::filesystem::path& path, const std::vector<std::vector<FaceImage>>& tiles) {
  if (tiles.empty() || tiles[0].empty()) return;
  const int r = tiles[0][0].height;
  const int rows = static_cast<int>(tiles.size()), cols = static_cast<int>(tiles[0].size());
  FaceImage grid(rows * r, cols * r, 3, -1.0);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      for (int y = 0; y < r; ++y)
        for (int x = 0; x < r; ++x)
          for (int c = 0; c < 3; ++c) grid.at(i * r + y, j * r + x, c) = tiles[i][j].at(y, x, c);
  std::filesystem::create_directories(path.parent_path());
  write_png(path, to_u8(grid));
}

FaceImage binary_to_face(const BinaryImage& b, std::array<double, 3> color = {1, 1, 1}) {
  FaceImage f(b.height, b.width, 3, -1.0);
  for (int y = 0; y < b.height; ++y)
    for (int x = 0; x < b.width; ++x)
      if (b.at(y, x))
        for (int c = 0; c < 3; ++c) f.at(y, x, c) = color[c];
  return f;
}

std::vector<LandmarkSet> rows_to_landmarks(const torch::Tensor& flat, const IndexGroups& groups) {
  auto t = flat.detach().to(torch::kFloat64).contiguous();
  std::vector<LandmarkSet> out;
  const auto w = t.size(1);
  const double* p = t.data_ptr<double>();
  for (std::int64_t i = 0; i < t.size(0); ++i) {
    out.push_back(LandmarkSet::from_flat(std::vector<double>(p + i * w, p + (i + 1) * w), groups));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- configuration

void StageConfig::validate(const char* stage) const {
  const std::string s(stage);
  if (!(lr > 0)) throw ConfigError(s + ": lr must be positive");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) throw ConfigError(s + ": betas must lie in (0, 1)");
  if (epochs < 0) throw ConfigError(s + ": epochs must be non-negative");
  if (batch <= 0) throw ConfigError(s + ": batch must be positive");
}

nlohmann::json StageConfig::to_json() const {
  return {{"lr", lr}, {"beta1", beta1}, {"beta2", beta2}, {"epochs", epochs}, {"batch", batch}};
}

StageConfig StageConfig::from_json(const nlohmann::json& j, StageConfig d) {
  d.lr = j.value("lr", d.lr);
  d.beta1 = j.value("beta1", d.beta1);
  d.beta2 = j.value("beta2", d.beta2);
  d.epochs = j.value("epochs", d.epochs);
  d.batch = j.value("batch", d.batch);
  return d;
}

void TrainConfig::validate() const {
  predictor.validate("predictor");
  reenactor.validate("reenactor");
  weights.validate();
  if (threads <= 0) throw ConfigError("threads must be positive");
  if (checkpoint_every < 0 || sample_grid_every < 0) throw ConfigError("intervals must be non-negative");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"predictor", predictor.to_json()},
          {"reenactor", reenactor.to_json()},
          {"seed", seed},
          {"with_adversary", with_adversary},
          {"weights", weights.to_json()},
          {"predictor_arch", predictor_arch},
          {"reenactor_arch", reenactor_arch},
          {"checkpoint_every", checkpoint_every},
          {"sample_grid_every", sample_grid_every},
          {"threads", threads},
          {"log_steps", log_steps}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("predictor")) c.predictor = StageConfig::from_json(j["predictor"], c.predictor);
  if (j.contains("reenactor")) c.reenactor = StageConfig::from_json(j["reenactor"], c.reenactor);
  c.seed = j.value("seed", c.seed);
  c.with_adversary = j.value("with_adversary", c.with_adversary);
  if (j.contains("weights")) c.weights = LossWeights::from_json(j["weights"]);
  if (j.contains("predictor_arch")) c.predictor_arch = j["predictor_arch"];
  if (j.contains("reenactor_arch")) c.reenactor_arch = j["reenactor_arch"];
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.sample_grid_every = j.value("sample_grid_every", c.sample_grid_every);
  c.threads = j.value("threads", c.threads);
  c.log_steps = j.value("log_steps", c.log_steps);
  c.validate();
  return c;
}

PredictorArch resolve_predictor_arch(const nlohmann::json& spec, const DatasetManifest& m) {
  PredictorArch a;
  if (spec.is_string()) {
    const auto name = spec.get<std::string>();
    if (name == "toy") {
      a = PredictorArch::toy();
    } else if (name != "default") {
      throw ConfigError("unknown predictor arch preset '" + name + "'");
    }
  } else if (spec.is_object()) {
    a = PredictorArch::from_json(spec);
  }
  a.landmark_count = m.landmark_count;
  a.n_fft_frames = m.feature_config.n_fft_frames;
  a.n_mfcc = m.feature_config.n_mfcc;
  a.validate();
  return a;
}

ReenactorArch resolve_reenactor_arch(const nlohmann::json& spec, const DatasetManifest& m) {
  ReenactorArch a;
  a.resolution = m.resolution;
  if (spec.is_string()) {
    const auto name = spec.get<std::string>();
    if (name == "toy") {
      a = ReenactorArch::toy(m.resolution);
    } else if (name != "default") {
      throw ConfigError("unknown reenactor arch preset '" + name + "'");
    }
  } else if (spec.is_object()) {
    auto j = spec;
    j["resolution"] = m.resolution;
    a = ReenactorArch::from_json(j);
  }
  return ReenactorArch::from_json(a.to_json());
}

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j{{"epoch", epoch}, {"generator", generator.to_json()}, {"wall_seconds", wall_seconds}};
  if (discriminator) j["discriminator"] = discriminator->to_json();
  if (validation) j["validation"] = *validation;
  return j;
}

nlohmann::json TrainHistory::to_json() const {
  nlohmann::json e = nlohmann::json::array();
  for (const auto& r : epochs) e.push_back(r.to_json());
  return {{"stage", stage}, {"identity", identity}, {"epochs", e}, {"probes", probes}};
}

std::vector<double> TrainHistory::trajectory() const {
  std::vector<double> v;
  for (const auto& e : epochs) v.push_back(e.generator.total);
  return v;
}

// ---------------------------------------------------------------- data

SplitTensors stack_split(const Dataset& d, const std::string& split, const std::string& identity, bool with_images) {
  if (!identity.empty()) d.manifest.identity(identity);
  SplitTensors s;
  s.rows = d.manifest.split_indices(split, identity);
  const auto n = s.rows.size();
  if (n == 0) return s;
  const auto& m = d.manifest;
  const int T = m.feature_config.n_fft_frames, C = m.feature_config.n_mfcc, N = m.landmark_count, R = m.resolution;
  std::vector<float> mfcc(n * T * C), pose(n * 3), blink(n * 2), lm(n * 2 * N);
  std::vector<float> faces, limg, masks;
  if (with_images) {
    faces.resize(n * 3 * R * R);
    limg.resize(n * R * R);
    masks.resize(n * R * R);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& smp = d.samples.at(s.rows[i]);
    copy_rows(mfcc, i, smp.mfcc.values);
    copy_rows(pose, i, {smp.pose.yaw, smp.pose.pitch, smp.pose.roll});
    copy_rows(blink, i, {smp.blink.left, smp.blink.right});
    copy_rows(lm, i, smp.landmarks.flat());
    if (with_images) {
      const std::size_t plane = std::size_t(R) * R;
      for (int y = 0; y < R; ++y)
        for (int x = 0; x < R; ++x)
          for (int c = 0; c < 3; ++c)
            faces[i * 3 * plane + c * plane + std::size_t(y) * R + x] = static_cast<float>(smp.face.at(y, x, c));
      const auto li = rasterize(smp.landmarks, R, 1);
      const auto mk = face_mask(smp.landmarks, R, default_dilation_radius(R));
      for (std::size_t k = 0; k < plane; ++k) {
        limg[i * plane + k] = li.data[k] ? 1.0f : 0.0f;
        masks[i * plane + k] = mk.data[k] ? 1.0f : 0.0f;
      }
    }
  }
  const auto ni = static_cast<std::int64_t>(n);
  s.mfcc = from_floats(mfcc, {ni, T, C});
  s.pose = from_floats(pose, {ni, 3});
  s.blink = from_floats(blink, {ni, 2});
  s.landmarks = from_floats(lm, {ni, 2 * N});
  if (with_images) {
    s.faces = from_floats(faces, {ni, 3, R, R});
    s.landmark_images = from_floats(limg, {ni, 1, R, R});
    s.masks = from_floats(masks, {ni, 1, R, R});
  }
  return s;
}

JsonlLog::JsonlLog(const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  out_ = std::make_unique<std::ofstream>(path, std::ios::trunc);
  if (!*out_) throw IoError("cannot open log " + path.string());
}

void JsonlLog::write(const nlohmann::json& j) {
  if (out_) *out_ << j.dump() << '\n';
}

// ---------------------------------------------------------------- predictor

PredictorTrainer::PredictorTrainer(const TrainConfig& cfg, const Dataset& data, const std::string& identity,
                                   std::optional<std::filesystem::path> out_dir)
    : cfg_(cfg), data_(data), identity_(identity), out_dir_(std::move(out_dir)), batches_({}, 1, cfg.seed) {
  cfg_.validate();
  torch::set_num_threads(cfg_.threads);
  torch::manual_seed(cfg_.seed);
  arch_ = resolve_predictor_arch(cfg_.predictor_arch, data_.manifest);
  model_ = GeometryPredictor(arch_);
  disc_ = LandmarkDiscriminator(arch_);
  train_ = stack_split(data_, "train", identity_, false);
  val_ = stack_split(data_, "val", identity_, false);
  if (train_.size() == 0) throw DataError("no training samples for identity '" + identity_ + "'");
  const auto mean = train_.mfcc.mean({0, 1});
  const auto std = train_.mfcc.std({0, 1}).clamp_min(1e-6);
  model_->set_audio_normalization(mean, std);
  model_->set_control_normalization(train_.pose.mean(0), train_.pose.std(0).clamp_min(1e-6), train_.blink.mean(0),
                                    train_.blink.std(0).clamp_min(1e-6));
  model_->set_landmark_offset(train_.landmarks.mean(0));
  opt_g_ = std::make_unique<torch::optim::Adam>(model_->parameters(), adam_options(cfg_.predictor));
  opt_d_ = std::make_unique<torch::optim::Adam>(disc_->parameters(), adam_options(cfg_.predictor));
  std::vector<std::size_t> pos(static_cast<std::size_t>(train_.size()));
  std::iota(pos.begin(), pos.end(), 0);
  batches_ = BatchIterator(pos, static_cast<std::size_t>(cfg_.predictor.batch), cfg_.seed);
  pixel_scale_ = data_.manifest.resolution;
  history_.stage = "predictor";
  history_.identity = identity_;
  if (out_dir_) {
    std::filesystem::create_directories(*out_dir_);
    if (cfg_.log_steps) log_ = JsonlLog(*out_dir_ / ("predictor_" + identity_ + ".jsonl"));
  }
}

nlohmann::json PredictorTrainer::meta() const {
  return {{"kind", "predictor"},
          {"pipeline_version", kPipelineVersion},
          {"epoch", epoch_},
          {"step", step_count_},
          {"identity", identity_},
          {"arch", arch_.to_json()},
          {"feature_config", feature_config_to_json(data_.manifest.feature_config)},
          {"groups", data_.manifest.groups},
          {"resolution", data_.manifest.resolution},
          {"train_config", cfg_.to_json()}};
}

void PredictorTrainer::save(const std::filesystem::path& path) {
  ArrayBundle b;
  put_meta(b, meta());
  put_module(b, "generator", *model_);
  put_module(b, "discriminator", *disc_);
  put_optimizer(b, "generator", *opt_g_);
  put_optimizer(b, "discriminator", *opt_d_);
  save_bundle(path, b);
}

void PredictorTrainer::load(const std::filesystem::path& path) {
  const auto b = open_checkpoint(path, "predictor");
  const auto m = take_meta(b);
  if (!(PredictorArch::from_json(m.at("arch")) == arch_)) throw ConfigError("checkpoint arch mismatch");
  take_module(b, "generator", *model_);
  take_module(b, "discriminator", *disc_);
  take_optimizer(b, "generator", *opt_g_);
  take_optimizer(b, "discriminator", *opt_d_);
  epoch_ = m.at("epoch");
  step_count_ = m.at("step");
}

LossReport PredictorTrainer::step(const std::vector<std::size_t>& batch) {
  const auto idx = index_tensor(batch);
  const auto mfcc = train_.mfcc.index_select(0, idx);
  const auto pose = train_.pose.index_select(0, idx);
  const auto blink = train_.blink.index_select(0, idx);
  const auto gt = train_.landmarks.index_select(0, idx);
  const double s = pixel_scale_;
  try {
    auto pred = model_->forward(mfcc, pose, blink);
    std::optional<LossReport> d_report;
    WeightedLoss g;
    if (cfg_.with_adversary) {
      auto d = discriminator_loss(disc_->forward(gt * s), disc_->forward(pred.detach() * s));
      opt_d_->zero_grad();
      d.total.backward();
      opt_d_->step();
      d_report = d.report;
      g = predictor_loss(pred, gt, disc_->forward(pred * s), cfg_.weights, s);
    } else {
      g = predictor_l1_only(pred, gt, cfg_.weights, s);
    }
    opt_g_->zero_grad();
    g.total.backward();
    opt_g_->step();
    ++step_count_;
    if (log_.enabled()) {
      nlohmann::json line{{"stage", "predictor"}, {"identity", identity_}, {"epoch", epoch_}, {"step", step_count_},
                          {"generator", g.report.to_json()}};
      if (d_report) line["discriminator"] = d_report->to_json();
      log_.write(line);
    }
    last_d_ = d_report;
    return g.report;
  } catch (const DataError& e) {
    if (out_dir_) save(*out_dir_ / ("diverged_predictor_" + identity_ + ".apbt"));
    throw DataError("predictor training diverged at epoch " + std::to_string(epoch_) + ", step " +
                    std::to_string(step_count_) + ": " + e.what());
  }
}

double PredictorTrainer::validation_ale_px() {
  if (val_.size() == 0) return std::nan("");
  torch::NoGradGuard ng;
  model_->eval();
  const auto pred = model_->forward(val_.mfcc, val_.pose, val_.blink);
  model_->train();
  return (pred - val_.landmarks).abs().mean().item<double>() * pixel_scale_;
}

EpochRecord PredictorTrainer::run_epoch() {
  const auto t0 = Clock::now();
  std::vector<LossReport> g_steps, d_steps;
  for (const auto& b : batches_.epoch(static_cast<std::uint64_t>(epoch_))) {
    g_steps.push_back(step(b));
    if (last_d_) d_steps.push_back(*last_d_);
  }
  EpochRecord rec;
  rec.epoch = epoch_;
  rec.generator = mean_report(g_steps);
  if (!d_steps.empty()) rec.discriminator = mean_report(d_steps);
  const double v = validation_ale_px();
  if (std::isfinite(v)) rec.validation = v;
  rec.wall_seconds = seconds_since(t0);
  ++epoch_;
  if (epoch_ == 1 && val_.size() > 0) {
    torch::NoGradGuard ng;
    model_->eval();
    early_fake_ = model_->forward(val_.mfcc, val_.pose, val_.blink).detach().clone();
    model_->train();
  }
  history_.epochs.push_back(rec);
  if (out_dir_ && cfg_.checkpoint_every > 0 && epoch_ % cfg_.checkpoint_every == 0) {
    save(*out_dir_ / ("predictor_" + identity_ + "_e" + std::to_string(epoch_) + ".apbt"));
  }
  if (out_dir_ && cfg_.sample_grid_every > 0 && epoch_ % cfg_.sample_grid_every == 0) write_grid();
  return rec;
}

void PredictorTrainer::write_grid() {
  if (val_.size() == 0) return;
  torch::NoGradGuard ng;
  model_->eval();
  const auto k = std::min<std::int64_t>(4, val_.size());
  const auto pred = model_->forward(val_.mfcc.narrow(0, 0, k), val_.pose.narrow(0, 0, k), val_.blink.narrow(0, 0, k));
  model_->train();
  const auto R = data_.manifest.resolution;
  const auto p = rows_to_landmarks(pred, data_.manifest.groups);
  const auto g = rows_to_landmarks(val_.landmarks.narrow(0, 0, k), data_.manifest.groups);
  std::vector<std::vector<FaceImage>> tiles(1);
  for (std::int64_t i = 0; i < k; ++i) {
    auto tile = binary_to_face(rasterize(g[i], R, 1), {0.2, 0.2, 1.0});
    const auto pr = rasterize(p[i], R, 0);
    for (int y = 0; y < R; ++y)
      for (int x = 0; x < R; ++x)
        if (pr.at(y, x)) tile.at(y, x, 0) = 1.0, tile.at(y, x, 1) = 0.2, tile.at(y, x, 2) = 0.2;
    tiles[0].push_back(tile);
  }
  write_mosaic(*out_dir_ / "grids" / ("predictor_" + identity_ + "_e" + std::to_string(epoch_) + ".png"), tiles);
}

void PredictorTrainer::train() {
  while (epoch_ < cfg_.predictor.epochs) run_epoch();
  if (early_fake_.defined() && cfg_.with_adversary) {
    torch::NoGradGuard ng;
    const double s = pixel_scale_;
    const double real = torch::sigmoid(disc_->forward(val_.landmarks * s)).mean().item<double>();
    const double fake = torch::sigmoid(disc_->forward(early_fake_ * s)).mean().item<double>();
    history_.probes["disc_real_mean"] = real;
    history_.probes["disc_early_fake_mean"] = fake;
  }
}

// ---------------------------------------------------------------- reenactor

ReenactorTrainer::ReenactorTrainer(const TrainConfig& cfg, const Dataset& data, const std::string& identity,
                                   std::optional<std::filesystem::path> out_dir)
    : cfg_(cfg), data_(data), identity_(identity), out_dir_(std::move(out_dir)), batches_({}, 1, cfg.seed) {
  cfg_.validate();
  torch::set_num_threads(cfg_.threads);
  torch::manual_seed(cfg_.seed);
  arch_ = resolve_reenactor_arch(cfg_.reenactor_arch, data_.manifest);
  model_ = FaceReenactor(arch_);
  disc_ = PatchDiscriminator(arch_);
  train_ = stack_split(data_, "train", identity_, true);
  val_ = stack_split(data_, "val", identity_, true);
  if (train_.size() == 0) throw DataError("no training samples for identity '" + identity_ + "'");
  opt_g_ = std::make_unique<torch::optim::Adam>(model_->parameters(), adam_options(cfg_.reenactor));
  opt_d_ = std::make_unique<torch::optim::Adam>(disc_->parameters(), adam_options(cfg_.reenactor));
  std::vector<std::size_t> pos(static_cast<std::size_t>(train_.size()));
  std::iota(pos.begin(), pos.end(), 0);
  batches_ = BatchIterator(pos, static_cast<std::size_t>(cfg_.reenactor.batch), cfg_.seed);
  history_.stage = "reenactor";
  history_.identity = identity_;
  if (out_dir_) {
    std::filesystem::create_directories(*out_dir_);
    if (cfg_.log_steps) log_ = JsonlLog(*out_dir_ / ("reenactor_" + identity_ + ".jsonl"));
  }
}

nlohmann::json ReenactorTrainer::meta() const {
  return {{"kind", "reenactor"},
          {"pipeline_version", kPipelineVersion},
          {"epoch", epoch_},
          {"step", step_count_},
          {"identity", identity_},
          {"arch", arch_.to_json()},
          {"train_config", cfg_.to_json()}};
}

void ReenactorTrainer::save(const std::filesystem::path& path) {
  ArrayBundle b;
  put_meta(b, meta());
  put_module(b, "generator", *model_);
  put_module(b, "discriminator", *disc_);
  put_optimizer(b, "generator", *opt_g_);
  put_optimizer(b, "discriminator", *opt_d_);
  save_bundle(path, b);
}

void ReenactorTrainer::load(const std::filesystem::path& path) {
  const auto b = open_checkpoint(path, "reenactor");
  const auto m = take_meta(b);
  if (!(ReenactorArch::from_json(m.at("arch")) == arch_)) throw ConfigError("checkpoint arch mismatch");
  take_module(b, "generator", *model_);
  take_module(b, "discriminator", *disc_);
  take_optimizer(b, "generator", *opt_g_);
  take_optimizer(b, "discriminator", *opt_d_);
  epoch_ = m.at("epoch");
  step_count_ = m.at("step");
}

LossReport ReenactorTrainer::step(const std::vector<std::size_t>& batch) {
  const auto idx = index_tensor(batch);
  const auto limg = train_.landmark_images.index_select(0, idx);
  const auto face = train_.faces.index_select(0, idx);
  const auto mask = train_.masks.index_select(0, idx);
  try {
    auto fake = model_->forward(limg);
    auto d = discriminator_loss(disc_->forward(limg, face), disc_->forward(limg, fake.detach()));
    opt_d_->zero_grad();
    d.total.backward();
    opt_d_->step();
    auto g = reenactor_loss(fake, face, mask, disc_->forward(limg, fake), cfg_.weights);
    opt_g_->zero_grad();
    g.total.backward();
    opt_g_->step();
    ++step_count_;
    if (log_.enabled()) {
      log_.write({{"stage", "reenactor"}, {"identity", identity_}, {"epoch", epoch_}, {"step", step_count_},
                  {"generator", g.report.to_json()}, {"discriminator", d.report.to_json()}});
    }
    last_d_ = d.report;
    return g.report;
  } catch (const DataError& e) {
    if (out_dir_) save(*out_dir_ / ("diverged_reenactor_" + identity_ + ".apbt"));
    throw DataError("reenactor training diverged at epoch " + std::to_string(epoch_) + ", step " +
                    std::to_string(step_count_) + ": " + e.what());
  }
}

double ReenactorTrainer::validation_masked_l1() {
  if (val_.size() == 0) return std::nan("");
  torch::NoGradGuard ng;
  model_->eval();
  std::vector<torch::Tensor> outs;
  for (std::int64_t i = 0; i < val_.size(); i += 64) {
    outs.push_back(model_->forward(val_.landmark_images.narrow(0, i, std::min<std::int64_t>(64, val_.size() - i))));
  }
  model_->train();
  return masked_l1_loss(torch::cat(outs), val_.faces, val_.masks).item<double>();
}

EpochRecord ReenactorTrainer::run_epoch() {
  const auto t0 = Clock::now();
  std::vector<LossReport> g_steps, d_steps;
  for (const auto& b : batches_.epoch(static_cast<std::uint64_t>(epoch_))) {
    g_steps.push_back(step(b));
    d_steps.push_back(*last_d_);
  }
  EpochRecord rec;
  rec.epoch = epoch_;
  rec.generator = mean_report(g_steps);
  rec.discriminator = mean_report(d_steps);
  const double v = validation_masked_l1();
  if (std::isfinite(v)) rec.validation = v;
  rec.wall_seconds = seconds_since(t0);
  ++epoch_;
  history_.epochs.push_back(rec);
  if (out_dir_ && cfg_.checkpoint_every > 0 && epoch_ % cfg_.checkpoint_every == 0) {
    save(*out_dir_ / ("reenactor_" + identity_ + "_e" + std::to_string(epoch_) + ".apbt"));
  }
  if (out_dir_ && cfg_.sample_grid_every > 0 && epoch_ % cfg_.sample_grid_every == 0) write_grid();
  return rec;
}

void ReenactorTrainer::write_grid() {
  if (val_.size() == 0) return;
  torch::NoGradGuard ng;
  model_->eval();
  const auto k = std::min<std::int64_t>(4, val_.size());
  const auto fake = model_->forward(val_.landmark_images.narrow(0, 0, k));
  model_->train();
  std::vector<std::vector<FaceImage>> tiles;
  for (std::int64_t i = 0; i < k; ++i) {
    auto li = (val_.landmark_images[i].expand({3, -1, -1}) * 2 - 1);
    tiles.push_back({tensor_to_face(li), tensor_to_face(fake[i]), tensor_to_face(val_.faces[i])});
  }
  write_mosaic(*out_dir_ / "grids" / ("reenactor_" + identity_ + "_e" + std::to_string(epoch_) + ".png"), tiles);
}

void ReenactorTrainer::train() {
  while (epoch_ < cfg_.reenactor.epochs) run_epoch();
}

// ---------------------------------------------------------------- loading

LoadedPredictor load_predictor(const std::filesystem::path& path, const PredictorArch* expected) {
  const auto b = open_checkpoint(path, "predictor");
  const auto m = take_meta(b);
  LoadedPredictor p;
  p.arch = PredictorArch::from_json(m.at("arch"));
  if (expected && !(*expected == p.arch)) throw ConfigError("checkpoint arch mismatch");
  p.model = GeometryPredictor(p.arch);
  take_module(b, "generator", *p.model);
  p.model->eval();
  p.groups = m.at("groups").get<IndexGroups>();
  p.features = feature_config_from_json(m.at("feature_config"));
  p.resolution = m.at("resolution");
  p.identity = m.at("identity");
  p.epoch = m.at("epoch");
  return p;
}

LoadedReenactor load_reenactor(const std::filesystem::path& path, const ReenactorArch* expected) {
  const auto b = open_checkpoint(path, "reenactor");
  const auto m = take_meta(b);
  LoadedReenactor r;
  r.arch = ReenactorArch::from_json(m.at("arch"));
  if (expected && !(*expected == r.arch)) throw ConfigError("checkpoint arch mismatch");
  r.model = FaceReenactor(r.arch);
  take_module(b, "generator", *r.model);
  r.model->eval();
  r.identity = m.at("identity");
  r.epoch = m.at("epoch");
  return r;
}

std::filesystem::path predictor_checkpoint_path(const std::filesystem::path& out_dir, const std::string& identity) {
  return out_dir / ("predictor_" + identity + ".apbt");
}

std::filesystem::path reenactor_checkpoint_path(const std::filesystem::path& out_dir, const std::string& identity) {
  return out_dir / ("reenactor_" + identity + ".apbt");
}

StageResult train_predictor(const TrainConfig& cfg, const Dataset& data, const std::string& identity,
                            const std::filesystem::path& out_dir) {
  PredictorTrainer t(cfg, data, identity, out_dir);
  t.train();
  StageResult r{predictor_checkpoint_path(out_dir, identity), t.history()};
  t.save(r.checkpoint);
  std::ofstream(out_dir / ("history_predictor_" + identity + ".json")) << r.history.to_json().dump(1) << '\n';
  return r;
}

StageResult train_reenactor(const TrainConfig& cfg, const Dataset& data, const std::string& identity,
                            const std::filesystem::path& out_dir) {
  ReenactorTrainer t(cfg, data, identity, out_dir);
  t.train();
  StageResult r{reenactor_checkpoint_path(out_dir, identity), t.history()};
  t.save(r.checkpoint);
  std::ofstream(out_dir / ("history_reenactor_" + identity + ".json")) << r.history.to_json().dump(1) << '\n';
  return r;
}

// ---------------------------------------------------------------- evaluation

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ConfigError("pearson: length mismatch");
  if (a.size() < 2) return std::nan("");
  const double n = static_cast<double>(a.size());
  const double ma = pairwise_sum(a) / n, mb = pairwise_sum(b) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) return std::nan("");
  return sab / std::sqrt(saa * sbb);
}

namespace {

struct Generated {
  std::vector<LandmarkSet> landmarks;
  std::vector<FaceImage> faces;
};

Generated generate(LoadedPredictor& p, LoadedReenactor& r, const SplitTensors& s, int resolution) {
  torch::NoGradGuard ng;
  Generated g;
  g.landmarks = rows_to_landmarks(p.model->forward(s.mfcc, s.pose, s.blink), p.groups);
  std::vector<torch::Tensor> imgs;
  for (const auto& l : g.landmarks) imgs.push_back(binary_image_tensor(rasterize(l, resolution, 1)));
  for (std::size_t i = 0; i < imgs.size(); i += 64) {
    const auto end = std::min(imgs.size(), i + 64);
    const auto out = r.model->forward(torch::cat(std::vector<torch::Tensor>(imgs.begin() + static_cast<long>(i), imgs.begin() + static_cast<long>(end))));
    for (std::int64_t k = 0; k < out.size(0); ++k) g.faces.push_back(tensor_to_face(out[k]));
  }
  return g;
}

std::vector<double> column(const torch::Tensor& t, int c) {
  auto v = t.select(1, c).to(torch::kFloat64).contiguous();
  return std::vector<double>(v.data_ptr<double>(), v.data_ptr<double>() + v.numel());
}

std::vector<double> decoded_correlations(const std::vector<FaceImage>& faces, const SplitTensors& drive,
                                         const FaceStyle& style, int n, bool blink) {
  const int k = blink ? 2 : 3;
  std::vector<std::vector<double>> got(static_cast<std::size_t>(k)), want(static_cast<std::size_t>(k));
  const auto& src = blink ? drive.blink : drive.pose;
  std::vector<std::vector<double>> cols;
  for (int c = 0; c < k; ++c) cols.push_back(column(src, c));
  for (std::size_t i = 0; i < faces.size(); ++i) {
    const auto d = decode_synthetic_face(faces[i], style, n).detection;
    if (!d.detected) continue;
    std::vector<double> v = blink ? std::vector<double>{d.blink->left, d.blink->right}
                                  : std::vector<double>{d.pose->yaw, d.pose->pitch, d.pose->roll};
    for (int c = 0; c < k; ++c) {
      got[c].push_back(v[c]);
      want[c].push_back(cols[c][i]);
    }
  }
  std::vector<double> r;
  for (int c = 0; c < k; ++c) {
    const double v = pearson(got[c], want[c]);
    r.push_back(std::isfinite(v) ? v : 0.0);
  }
  return r;
}

}  // namespace

nlohmann::json IdentityEvaluation::to_json() const {
  return {{"identity", identity},
          {"n_eval", n_eval},
          {"val_ale_px", val_ale_px},
          {"mean_landmark_ale_px", mean_landmark_ale_px},
          {"masked_l1", masked_l1},
          {"mean_image_masked_l1", mean_image_masked_l1},
          {"pose_r", pose_r},
          {"blink_r", blink_r},
          {"cross_pose_r", cross_pose_r},
          {"eye_extent_closed", eye_extent_closed},
          {"eye_extent_open", eye_extent_open},
          {"generated", generated.to_json()}};
}

IdentityEvaluation evaluate_identity(const Dataset& data, const std::string& identity, LoadedPredictor& predictor,
                                     LoadedReenactor& reenactor, const std::string& split,
                                     const std::string& driver_identity) {
  torch::NoGradGuard ng;
  const auto& m = data.manifest;
  const int R = m.resolution;
  const double px = R;
  IdentityEvaluation ev;
  ev.identity = identity;
  const auto s = stack_split(data, split, identity, true);
  if (s.size() == 0) throw DataError("no '" + split + "' samples for identity '" + identity + "'");
  const auto train = stack_split(data, "train", identity, true);
  ev.n_eval = static_cast<std::size_t>(s.size());

  const auto pred = predictor.model->forward(s.mfcc, s.pose, s.blink);
  ev.val_ale_px = (pred - s.landmarks).abs().mean().item<double>() * px;
  const auto mean_lm = train.landmarks.mean(0, true);
  ev.mean_landmark_ale_px = (mean_lm.expand_as(s.landmarks) - s.landmarks).abs().mean().item<double>() * px;

  std::vector<torch::Tensor> outs;
  for (std::int64_t i = 0; i < s.size(); i += 64) {
    outs.push_back(reenactor.model->forward(s.landmark_images.narrow(0, i, std::min<std::int64_t>(64, s.size() - i))));
  }
  ev.masked_l1 = masked_l1_loss(torch::cat(outs), s.faces, s.masks).item<double>();
  const auto mean_face = train.faces.mean(0, true).expand_as(s.faces);
  ev.mean_image_masked_l1 = masked_l1_loss(mean_face, s.faces, s.masks).item<double>();

  // Blink controllability at the landmark level.
  {
    const auto one_m = s.mfcc.narrow(0, 0, 1), one_p = s.pose.narrow(0, 0, 1);
    auto extent = [&](double b) {
      const auto out = predictor.model->forward(one_m, one_p, torch::full({1, 2}, b));
      const auto l = rows_to_landmarks(out, predictor.groups)[0];
      return group_vertical_extent(l, "left_eye") + group_vertical_extent(l, "right_eye");
    };
    if (predictor.groups.count("left_eye") && predictor.groups.count("right_eye")) {
      ev.eye_extent_closed = extent(0.0);
      ev.eye_extent_open = extent(0.4);
    }
  }

  const auto gen = generate(predictor, reenactor, s, R);
  std::vector<double> ssims;
  std::vector<std::vector<double>> emb_fake, emb_real;
  std::vector<GeneratedSample> samples;
  for (std::size_t i = 0; i < gen.faces.size(); ++i) {
    const auto& smp = data.samples[s.rows[i]];
    ssims.push_back(ssim(gen.faces[i], smp.face));
    emb_fake.push_back(pixel_statistics_embedding(gen.faces[i], 4));
    emb_real.push_back(pixel_statistics_embedding(smp.face, 4));
    samples.push_back({gen.faces[i], smp.landmarks, smp.pose, smp.blink});
  }
  const auto& info = m.identity(identity);
  if (info.style) {
    ev.generated = evaluate_generated(samples, make_oracle_detector(*info.style, m.landmark_count), px);
    ev.pose_r = decoded_correlations(gen.faces, s, *info.style, m.landmark_count, false);
    ev.blink_r = decoded_correlations(gen.faces, s, *info.style, m.landmark_count, true);
    const auto drive = stack_split(data, split, driver_identity, false);
    if (drive.size() > 0) {
      const auto cross = generate(predictor, reenactor, drive, R);
      ev.cross_pose_r = decoded_correlations(cross.faces, drive, *info.style, m.landmark_count, false);
    }
  } else {
    ev.generated.n_samples = samples.size();
    ev.generated.pixel_scale = px;
  }
  ev.generated.ssim = pairwise_sum(ssims) / static_cast<double>(ssims.size());
  ev.generated.frechet = frechet_distance(fit_gaussian(emb_fake), fit_gaussian(emb_real));
  return ev;
}

nlohmann::json PipelineResult::to_json() const {
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& e : identities) ids.push_back(e.to_json());
  nlohmann::json st = nlohmann::json::array();
  for (const auto& s : stages) st.push_back({{"checkpoint", s.checkpoint.string()}, {"stage", s.history.stage}, {"identity", s.history.identity}, {"epochs", s.history.epochs.size()}, {"probes", s.history.probes}});
  return {{"schema_version", 1}, {"identities", ids}, {"stages", st}, {"overall", overall.to_json()}, {"wall_seconds", wall_seconds}};
}

PipelineResult run_pipeline(const TrainConfig& cfg, const Dataset& data, const std::filesystem::path& out_dir,
                            const PipelineOptions& opt) {
  const auto t0 = Clock::now();
  PipelineResult res;
  const auto& ids = data.manifest.identities;
  if (ids.empty()) throw DataError("manifest has no identities");
  std::filesystem::create_directories(out_dir);
  for (const auto& id : ids) {
    const auto pc = predictor_checkpoint_path(out_dir, id.name), rc = reenactor_checkpoint_path(out_dir, id.name);
    if (!(opt.reuse_checkpoints && std::filesystem::exists(pc) && std::filesystem::exists(rc))) {
      res.stages.push_back(train_predictor(cfg, data, id.name, out_dir));
      res.stages.push_back(train_reenactor(cfg, data, id.name, out_dir));
    }
  }
  double n = 0, det = 0, ale = 0, ape = 0, abe = 0, ss = 0, fr = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto p = load_predictor(predictor_checkpoint_path(out_dir, ids[i].name));
    auto r = load_reenactor(reenactor_checkpoint_path(out_dir, ids[i].name));
    const auto& driver = ids[(i + 1) % ids.size()].name;
    auto ev = evaluate_identity(data, ids[i].name, p, r, opt.eval_split, driver);
    const auto& g = ev.generated;
    n += static_cast<double>(g.n_samples);
    det += static_cast<double>(g.n_detected);
    if (g.ale) ale += *g.ale * static_cast<double>(g.n_detected);
    if (g.ape) ape += *g.ape * static_cast<double>(g.n_detected);
    if (g.abe) abe += *g.abe * static_cast<double>(g.n_detected);
    ss += g.ssim.value_or(0.0) * static_cast<double>(g.n_samples);
    fr += g.frechet.value_or(0.0) * static_cast<double>(g.n_samples);
    res.identities.push_back(std::move(ev));
  }
  auto& o = res.overall;
  o.n_samples = static_cast<std::size_t>(n);
  o.n_detected = static_cast<std::size_t>(det);
  o.dr = n > 0 ? det / n : 0.0;
  o.pixel_scale = data.manifest.resolution;
  if (det > 0) {
    o.ale = ale / det;
    o.ape = ape / det;
    o.abe = abe / det;
  }
  if (n > 0) {
    o.ssim = ss / n;
    o.frechet = fr / n;
  }
  res.wall_seconds = seconds_since(t0);
  std::ofstream(out_dir / "report.json") << res.to_json().dump(2) << '\n';
  return res;
}

}  // namespace apb

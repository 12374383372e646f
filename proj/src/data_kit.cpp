#include "apbface/data_kit.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include "apbface/error.hpp"
#include "apbface/io.hpp"
#include "apbface/tensor_file.hpp"

namespace apb {

// ================================================================ preprocessing

CropBox crop_box_for(const std::vector<Point2>& pts, double scale) {
  if (pts.empty()) throw DataError("crop_face: empty landmarks");
  double x0 = pts[0].x, x1 = pts[0].x, y0 = pts[0].y, y1 = pts[0].y;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  const double side = scale * std::max(x1 - x0, y1 - y0);
  const double cx = (x0 + x1) / 2, cy = (y0 + y1) / 2;
  return {cx - side / 2, cy - side / 2, side};
}

CroppedFace crop_face(const Grid<double>& frame, const LandmarkSet& frame_landmarks, int out_resolution,
                      double pad_value) {
  if (frame_landmarks.points.empty()) throw DataError("crop_face: empty landmarks");
  if (out_resolution <= 0) throw ConfigError("crop_face: resolution must be positive");
  const bool any_inside = std::any_of(frame_landmarks.points.begin(), frame_landmarks.points.end(), [&](const Point2& p) {
    return p.x >= 0 && p.y >= 0 && p.x < frame.width && p.y < frame.height;
  });
  if (!any_inside) throw DataError("crop_face: no landmark inside the frame");

  CroppedFace out;
  out.box = crop_box_for(frame_landmarks.points);
  if (!(out.box.side > 0)) throw DataError("crop_face: degenerate landmark bounding box");

  auto sample = [&](int y, int x, int c) {
    if (x < 0 || y < 0 || x >= frame.width || y >= frame.height) return pad_value;
    return frame.at(y, x, c);
  };
  const double step = out.box.side / out_resolution;
  out.image = Grid<double>(out_resolution, out_resolution, frame.channels);
  for (int r = 0; r < out_resolution; ++r) {
    const double sy = out.box.y0 + (r + 0.5) * step - 0.5;
    const int iy = static_cast<int>(std::floor(sy));
    const double fy = sy - iy;
    for (int col = 0; col < out_resolution; ++col) {
      const double sx = out.box.x0 + (col + 0.5) * step - 0.5;
      const int ix = static_cast<int>(std::floor(sx));
      const double fx = sx - ix;
      for (int c = 0; c < frame.channels; ++c) {
        const double top = (1 - fx) * sample(iy, ix, c) + fx * sample(iy, ix + 1, c);
        const double bot = (1 - fx) * sample(iy + 1, ix, c) + fx * sample(iy + 1, ix + 1, c);
        out.image.at(r, col, c) = (1 - fy) * top + fy * bot;
      }
    }
  }
  out.landmarks.groups = frame_landmarks.groups;
  for (const auto& p : frame_landmarks.points) {
    out.landmarks.points.push_back({(p.x - out.box.x0) / out.box.side, (p.y - out.box.y0) / out.box.side});
  }
  return out;
}

double blink_ratio(const std::vector<Point2>& eye) {
  if (eye.empty()) throw DataError("degenerate eye");
  double x0 = eye[0].x, x1 = eye[0].x, y0 = eye[0].y, y1 = eye[0].y;
  for (const auto& p : eye) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  const double w = (x1 - x0) * 256.0, h = (y1 - y0) * 256.0;
  if (!(w > 0)) throw DataError("degenerate eye");
  return h / w;
}

// ================================================================ synthetic faces

namespace {

using Vec2 = Point2;

Vec2 rotate(Vec2 v, double ang) {
  const double c = std::cos(ang), s = std::sin(ang);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

nlohmann::json arr3(const std::array<double, 3>& a) { return nlohmann::json::array({a[0], a[1], a[2]}); }
std::array<double, 3> arr3(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

struct FeatureBlob {
  double cx, cy;  // pixels
  double sx, sy;  // pixels
};

// Eye/mouth groups are ordered: left corner, top, right corner, bottom.
FeatureBlob blob_for(const std::vector<Point2>& g, int res, const SynthGeometry& geo) {
  const double w = (g[2].x - g[0].x) * res;
  const double h = (g[3].y - g[1].y) * res;
  const double cx = (g[0].x + g[2].x) / 2 * res;
  const double cy = (g[0].y + g[2].y) / 2 * res;
  return {cx, cy, geo.blob_sigma_x_ratio * w, geo.blob_sigma_min + geo.blob_sigma_gain * h};
}

double blob_value(const FeatureBlob& b, double x, double y) {
  const double dx = x - b.cx, dy = y - b.cy;
  return std::exp(-(dx * dx) / (2 * b.sx * b.sx) - (dy * dy) / (2 * b.sy * b.sy));
}

}  // namespace

nlohmann::json FaceStyle::to_json() const {
  return {{"eye_dx", eye_dx},         {"eye_y", eye_y},           {"eye_w", eye_w},
          {"mouth_y", mouth_y},       {"mouth_w", mouth_w},       {"contour_ax", contour_ax},
          {"contour_ay", contour_ay}, {"contour_cy", contour_cy}, {"skin_ax", skin_ax},
          {"skin_ay", skin_ay},       {"skin_cy", skin_cy},       {"background", arr3(background)},
          {"skin_delta", arr3(skin_delta)}, {"eye_delta", arr3(eye_delta)}, {"mouth_delta", arr3(mouth_delta)}};
}

FaceStyle FaceStyle::from_json(const nlohmann::json& j) {
  FaceStyle s;
  s.eye_dx = j.at("eye_dx");
  s.eye_y = j.at("eye_y");
  s.eye_w = j.at("eye_w");
  s.mouth_y = j.at("mouth_y");
  s.mouth_w = j.at("mouth_w");
  s.contour_ax = j.at("contour_ax");
  s.contour_ay = j.at("contour_ay");
  s.contour_cy = j.at("contour_cy");
  s.skin_ax = j.at("skin_ax");
  s.skin_ay = j.at("skin_ay");
  s.skin_cy = j.at("skin_cy");
  s.background = arr3(j.at("background"));
  s.skin_delta = arr3(j.at("skin_delta"));
  s.eye_delta = arr3(j.at("eye_delta"));
  s.mouth_delta = arr3(j.at("mouth_delta"));
  return s;
}

IndexGroups synth_groups(int n) {
  if (n < 15) throw ConfigError("synthetic faces need at least 15 landmarks");
  const int k = n - 12;
  IndexGroups g;
  for (int i = 0; i < k; ++i) g["contour"].push_back(i);
  for (int i = 0; i < 4; ++i) {
    g["left_eye"].push_back(k + i);
    g["right_eye"].push_back(k + 4 + i);
    g["mouth"].push_back(k + 8 + i);
  }
  return g;
}

FaceStyle random_style(std::mt19937_64& rng) {
  for (;;) {
    FaceStyle s;
    s.eye_dx = uniform(rng, 0.16, 0.17);
    s.eye_y = uniform(rng, -0.07, -0.05);
    s.eye_w = uniform(rng, 0.17, 0.19);
    s.mouth_y = uniform(rng, 0.15, 0.17);
    s.mouth_w = uniform(rng, 0.14, 0.17);
    s.contour_ax = uniform(rng, 0.26, 0.29);
    s.contour_ay = uniform(rng, 0.29, 0.32);
    s.contour_cy = uniform(rng, 0.0, 0.03);
    s.skin_ax = s.contour_ax + uniform(rng, 0.02, 0.04);
    s.skin_ay = s.contour_ay + uniform(rng, 0.04, 0.06);
    s.skin_cy = uniform(rng, -0.04, -0.02);
    std::array<double, 3> skin{}, eye{}, mouth{};
    for (int c = 0; c < 3; ++c) {
      s.background[c] = uniform(rng, -0.85, -0.3);
      skin[c] = uniform(rng, 0.05, 0.6);
      eye[c] = uniform(rng, -0.95, -0.55);
    }
    mouth = {uniform(rng, 0.55, 0.85), uniform(rng, -0.6, -0.2), uniform(rng, -0.6, -0.2)};
    for (int c = 0; c < 3; ++c) {
      s.skin_delta[c] = skin[c] - s.background[c];
      s.eye_delta[c] = eye[c] - skin[c];
      s.mouth_delta[c] = mouth[c] - skin[c];
    }
    Eigen::Matrix3d m;
    for (int c = 0; c < 3; ++c) m.row(c) << s.skin_delta[c], s.eye_delta[c], s.mouth_delta[c];
    const auto sv = m.jacobiSvd().singularValues();
    if (sv(2) > 0.15 * sv(0)) return s;
  }
}

LandmarkSet synth_landmarks(const FaceStyle& s, const FaceControls& c, int n, const SynthGeometry& g) {
  LandmarkSet l;
  l.groups = synth_groups(n);
  const int k = n - 12;
  const Vec2 origin{0.5 + g.yaw_gain * c.pose.yaw, 0.5 + g.pitch_gain * c.pose.pitch};
  auto place = [&](Vec2 v) {
    const auto r = rotate(v, c.pose.roll);
    return Vec2{origin.x + r.x, origin.y + r.y};
  };
  l.points.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < k; ++i) {
    const double th = std::numbers::pi * (-0.1 + 1.2 * i / (k - 1));
    l.points.push_back(place({s.contour_ax * std::cos(th), s.contour_cy + s.contour_ay * std::sin(th)}));
  }
  auto feature = [&](Vec2 center, double w, double h) {
    l.points.push_back({center.x - w / 2, center.y});
    l.points.push_back({center.x, center.y - h / 2});
    l.points.push_back({center.x + w / 2, center.y});
    l.points.push_back({center.x, center.y + h / 2});
  };
  feature(place({-s.eye_dx, s.eye_y}), s.eye_w, c.blink.left * s.eye_w);
  feature(place({s.eye_dx, s.eye_y}), s.eye_w, c.blink.right * s.eye_w);
  feature(place({0.0, s.mouth_y}), s.mouth_w, g.mouth_h_min + g.mouth_h_span * c.mouth_open);
  return l;
}

FaceImage render_face(const FaceStyle& s, const LandmarkSet& l, int res, const SynthGeometry& g) {
  const auto le = l.group_points("left_eye"), re = l.group_points("right_eye"), mo = l.group_points("mouth");
  const auto bl = blob_for(le, res, g), br = blob_for(re, res, g), bm = blob_for(mo, res, g);
  const double roll = std::atan2(br.cy - bl.cy, br.cx - bl.cx);
  // Skin ellipse center from the eye midpoint, in the face frame.
  const Vec2 eye_mid{(bl.cx + br.cx) / 2, (bl.cy + br.cy) / 2};
  const auto off = rotate({0.0, (s.skin_cy - s.eye_y) * res}, roll);
  const Vec2 skin_c{eye_mid.x + off.x, eye_mid.y + off.y};
  const double ax = s.skin_ax * res, ay = s.skin_ay * res, r_eff = std::sqrt(ax * ay);

  FaceImage img(res, res, 3);
  for (int row = 0; row < res; ++row) {
    for (int col = 0; col < res; ++col) {
      const double x = col + 0.5, y = row + 0.5;
      const auto d = rotate({x - skin_c.x, y - skin_c.y}, -roll);
      const double rho = std::sqrt((d.x / ax) * (d.x / ax) + (d.y / ay) * (d.y / ay));
      const double skin = std::clamp((1.0 - rho) * r_eff / g.skin_edge_px + 0.5, 0.0, 1.0);
      const double eyes = blob_value(bl, x, y) + blob_value(br, x, y);
      const double mouth = blob_value(bm, x, y);
      for (int c = 0; c < 3; ++c) {
        img.at(row, col, c) = s.background[c] + skin * s.skin_delta[c] + eyes * s.eye_delta[c] + mouth * s.mouth_delta[c];
      }
    }
  }
  return img;
}

namespace {

struct PixelSample {
  double x, y, v;
};

// Least-squares fit of ln v = a + b x + c y + d x^2 + e y^2 weighted by v^2; exact for an
// axis-aligned unit Gaussian.
std::optional<FeatureBlob> fit_blob(const std::vector<PixelSample>& px) {
  if (px.size() < 6) return std::nullopt;
  double mx = 0, my = 0;
  for (const auto& p : px) {
    mx += p.x;
    my += p.y;
  }
  mx /= px.size();
  my /= px.size();
  Eigen::MatrixXd a(static_cast<Eigen::Index>(px.size()), 5);
  Eigen::VectorXd rhs(static_cast<Eigen::Index>(px.size()));
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double x = px[i].x - mx, y = px[i].y - my, w = px[i].v;
    const auto r = static_cast<Eigen::Index>(i);
    a.row(r) << w, w * x, w * y, w * x * x, w * y * y;
    rhs(r) = w * std::log(px[i].v);
  }
  const Eigen::VectorXd sol = a.colPivHouseholderQr().solve(rhs);
  const double b = sol(1), c = sol(2), d = sol(3), e = sol(4);
  if (!(d < 0) || !(e < 0)) return std::nullopt;
  FeatureBlob out{mx - b / (2 * d), my - c / (2 * e), std::sqrt(-1 / (2 * d)), std::sqrt(-1 / (2 * e))};
  if (!std::isfinite(out.cx) || !std::isfinite(out.cy) || !std::isfinite(out.sx) || !std::isfinite(out.sy)) {
    return std::nullopt;
  }
  return out;
}

// Pixels near the peak that carry at least peak_fraction of its value. A clean blob fits
// exactly on any subset, so trimming only removes outliers on generated images.
std::vector<PixelSample> near_peak(const std::vector<PixelSample>& px, double radius, double peak_fraction) {
  if (px.empty()) return {};
  const auto peak = *std::max_element(px.begin(), px.end(), [](const auto& a, const auto& b) { return a.v < b.v; });
  std::vector<PixelSample> out;
  for (const auto& p : px) {
    if (p.v >= peak_fraction * peak.v && std::hypot(p.x - peak.x, p.y - peak.y) <= radius) out.push_back(p);
  }
  return out;
}

}  // namespace

OracleDecode decode_synthetic_face(const FaceImage& face, const FaceStyle& s, int n, const OracleDetectorOptions& opt,
                                   const SynthGeometry& g) {
  OracleDecode out;
  if (face.channels != 3 || face.height != face.width) return out;
  const int res = face.width;

  Eigen::Matrix3d mix;
  for (int c = 0; c < 3; ++c) mix.row(c) << s.skin_delta[c], s.eye_delta[c], s.mouth_delta[c];
  const Eigen::Matrix3d unmix = mix.inverse();

  std::vector<PixelSample> eye_px, mouth_px;
  for (int row = 0; row < res; ++row) {
    for (int col = 0; col < res; ++col) {
      Eigen::Vector3d v;
      for (int c = 0; c < 3; ++c) v(c) = face.at(row, col, c) - s.background[c];
      const Eigen::Vector3d layers = unmix * v;
      const double x = col + 0.5, y = row + 0.5;
      if (layers(1) > opt.fit_threshold) eye_px.push_back({x, y, layers(1)});
      if (layers(2) > opt.fit_threshold) mouth_px.push_back({x, y, layers(2)});
    }
  }
  if (eye_px.size() < 12 || mouth_px.size() < 6) return out;

  // Split the eye layer along its principal axis.
  double wsum = 0, mx = 0, my = 0;
  for (const auto& p : eye_px) {
    wsum += p.v;
    mx += p.v * p.x;
    my += p.v * p.y;
  }
  mx /= wsum;
  my /= wsum;
  double sxx = 0, syy = 0, sxy = 0;
  for (const auto& p : eye_px) {
    sxx += p.v * (p.x - mx) * (p.x - mx);
    syy += p.v * (p.y - my) * (p.y - my);
    sxy += p.v * (p.x - mx) * (p.y - my);
  }
  const double theta = 0.5 * std::atan2(2 * sxy, sxx - syy);
  double ux = std::cos(theta), uy = std::sin(theta);
  if (ux < 0) {
    ux = -ux;
    uy = -uy;
  }
  std::vector<PixelSample> left_px, right_px;
  for (const auto& p : eye_px) ((p.x - mx) * ux + (p.y - my) * uy < 0 ? left_px : right_px).push_back(p);

  const double eye_r = s.eye_w * res, mouth_r = s.mouth_w * res;
  const auto bl = fit_blob(near_peak(left_px, eye_r, opt.peak_fraction));
  const auto br = fit_blob(near_peak(right_px, eye_r, opt.peak_fraction));
  const auto bm = fit_blob(near_peak(mouth_px, mouth_r, opt.peak_fraction));
  if (!bl || !br || !bm) return out;

  const Vec2 cl{bl->cx / res, bl->cy / res}, cr{br->cx / res, br->cy / res};
  const double dist = std::hypot(cr.x - cl.x, cr.y - cl.y);
  if (std::abs(dist - 2 * s.eye_dx) > opt.eye_distance_tolerance * 2 * s.eye_dx) return out;

  PoseTriple pose;
  pose.roll = std::atan2(cr.y - cl.y, cr.x - cl.x);
  const auto eye_off = rotate({0.0, s.eye_y}, pose.roll);
  const Vec2 origin{(cl.x + cr.x) / 2 - eye_off.x, (cl.y + cr.y) / 2 - eye_off.y};
  pose.yaw = (origin.x - 0.5) / g.yaw_gain;
  pose.pitch = (origin.y - 0.5) / g.pitch_gain;

  const auto mouth_off = rotate({0.0, s.mouth_y}, pose.roll);
  const Vec2 mouth_expected{origin.x + mouth_off.x, origin.y + mouth_off.y};
  if (std::hypot(bm->cx / res - mouth_expected.x, bm->cy / res - mouth_expected.y) > opt.mouth_offset_tolerance) {
    return out;
  }

  auto height_of = [&](const FeatureBlob& b) { return (b.sy - g.blob_sigma_min) / g.blob_sigma_gain / res; };
  BlinkPair blink{std::max(0.0, height_of(*bl) / s.eye_w), std::max(0.0, height_of(*br) / s.eye_w)};
  const double m = std::clamp((height_of(*bm) - g.mouth_h_min) / g.mouth_h_span, 0.0, 1.0);

  out.detection.detected = true;
  out.detection.pose = pose;
  out.detection.blink = blink;
  out.detection.landmarks = synth_landmarks(s, {m, pose, blink}, n, g);
  out.mouth_open = m;
  return out;
}

DetectorInterface make_oracle_detector(FaceStyle style, int landmark_count, OracleDetectorOptions opt) {
  return [style, landmark_count, opt](const FaceImage& face) {
    return decode_synthetic_face(face, style, landmark_count, opt).detection;
  };
}

AudioTrack synth_audio_window(double mouth_open, const FeatureConfig& cfg, const AudioRule& rule, std::mt19937_64& rng) {
  AudioTrack t;
  t.sample_rate = cfg.sample_rate;
  const int n = cfg.window_samples();
  const double f = rule.base_hz + rule.span_hz * mouth_open;
  const double amp = uniform(rng, rule.amp_lo, rule.amp_hi);
  const double phase = uniform(rng, 0.0, 2 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);
  t.samples.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    t.samples[i] = amp * std::sin(2 * std::numbers::pi * f * i / cfg.sample_rate + phase) + rule.noise * noise(rng);
  }
  return t;
}

// ================================================================ manifests

nlohmann::json feature_config_to_json(const FeatureConfig& c) {
  return {{"sample_rate", c.sample_rate}, {"window_seconds", c.window_seconds}, {"fps", c.fps},
          {"n_mfcc", c.n_mfcc},           {"n_fft_frames", c.n_fft_frames},     {"mel_bands", c.mel_bands},
          {"log_floor", c.log_floor},     {"pre_emphasis", c.pre_emphasis},     {"causal", c.causal}};
}

FeatureConfig feature_config_from_json(const nlohmann::json& j) {
  FeatureConfig c;
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.window_seconds = j.value("window_seconds", c.window_seconds);
  c.fps = j.value("fps", c.fps);
  c.n_mfcc = j.value("n_mfcc", c.n_mfcc);
  c.n_fft_frames = j.value("n_fft_frames", c.n_fft_frames);
  c.mel_bands = j.value("mel_bands", c.mel_bands);
  c.log_floor = j.value("log_floor", c.log_floor);
  c.pre_emphasis = j.value("pre_emphasis", c.pre_emphasis);
  c.causal = j.value("causal", c.causal);
  c.validate();
  return c;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& id : identities) {
    nlohmann::json e{{"name", id.name}};
    if (id.style) e["style"] = id.style->to_json();
    ids.push_back(e);
  }
  nlohmann::json es = nlohmann::json::array();
  for (const auto& e : entries) {
    es.push_back({{"file", e.file}, {"identity", e.identity}, {"split", e.split}, {"frame_index", e.frame_index}});
  }
  return {{"schema_version", schema_version},
          {"pipeline_version", pipeline_version},
          {"feature_config", feature_config_to_json(feature_config)},
          {"resolution", resolution},
          {"landmark_count", landmark_count},
          {"groups", groups},
          {"identities", ids},
          {"samples", es},
          {"provenance", provenance}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.schema_version = j.at("schema_version");
  if (m.schema_version != 1) throw IoError("manifest: unsupported schema version");
  m.pipeline_version = j.at("pipeline_version");
  m.feature_config = feature_config_from_json(j.at("feature_config"));
  m.resolution = j.at("resolution");
  m.landmark_count = j.at("landmark_count");
  m.groups = j.at("groups").get<IndexGroups>();
  for (const auto& id : j.at("identities")) {
    IdentityInfo info{id.at("name").get<std::string>(), std::nullopt};
    if (id.contains("style")) info.style = FaceStyle::from_json(id.at("style"));
    m.identities.push_back(std::move(info));
  }
  for (const auto& e : j.at("samples")) {
    m.entries.push_back({e.at("file"), e.at("identity"), e.at("split"), e.at("frame_index")});
  }
  m.provenance = j.value("provenance", nlohmann::json::object());
  return m;
}

std::vector<std::size_t> DatasetManifest::split_indices(const std::string& split, const std::string& identity) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == split && (identity.empty() || entries[i].identity == identity)) out.push_back(i);
  }
  return out;
}

const IdentityInfo& DatasetManifest::identity(const std::string& name) const {
  for (const auto& id : identities)
    if (id.name == name) return id;
  throw DataError("manifest: unknown identity '" + name + "'");
}

bool manifests_equal(const DatasetManifest& a, const DatasetManifest& b) { return a.to_json() == b.to_json(); }

void save_manifest(const std::filesystem::path& root, const DatasetManifest& m) {
  std::filesystem::create_directories(root);
  std::ofstream out(root / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest under " + root.string());
  out << m.to_json().dump(2) << '\n';
}

DatasetManifest load_manifest(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw IoError("cannot read " + (root / "manifest.json").string());
  auto m = DatasetManifest::from_json(nlohmann::json::parse(in));
  std::set<std::string> files;
  for (const auto& e : m.entries) {
    if (e.split != "train" && e.split != "val" && e.split != "test") throw IoError("manifest: bad split tag " + e.split);
    if (!files.insert(e.file).second) throw IoError("manifest: file listed twice (splits overlap): " + e.file);
    if (!std::filesystem::exists(root / e.file)) throw IoError("manifest: missing sample file " + e.file);
  }
  return m;
}

void save_sample(const std::filesystem::path& path, const Sample& s) {
  ArrayBundle b;
  b["mfcc"] = ArrayRecord::from_f64(s.mfcc.values, {std::uint64_t(s.mfcc.frames), std::uint64_t(s.mfcc.coeffs)});
  const auto flat = s.landmarks.flat();
  b["landmarks"] = ArrayRecord::from_f64(flat, {s.landmarks.size(), 2});
  std::vector<float> face(s.face.data.begin(), s.face.data.end());
  b["face"] = ArrayRecord::from_f32(face, {std::uint64_t(s.face.height), std::uint64_t(s.face.width), std::uint64_t(s.face.channels)});
  const std::vector<double> pose{s.pose.yaw, s.pose.pitch, s.pose.roll};
  b["pose"] = ArrayRecord::from_f64(pose, {3});
  const std::vector<double> blink{s.blink.left, s.blink.right};
  b["blink"] = ArrayRecord::from_f64(blink, {2});
  if (s.mouth_open) {
    const std::vector<double> m{*s.mouth_open};
    b["mouth_open"] = ArrayRecord::from_f64(m, {1});
  }
  save_bundle(path, b);
}

Sample load_sample(const std::filesystem::path& path, const DatasetManifest& m, const ManifestEntry& e) {
  const auto b = load_bundle(path);
  Sample s;
  const auto& mf = require(b, "mfcc");
  if (mf.shape.size() != 2) throw IoError("sample: mfcc must be 2-D");
  s.mfcc.frames = static_cast<int>(mf.shape[0]);
  s.mfcc.coeffs = static_cast<int>(mf.shape[1]);
  s.mfcc.values = mf.to_f64();
  s.mfcc.config_id = m.feature_config.id();
  s.landmarks = LandmarkSet::from_flat(require(b, "landmarks").to_f64(), m.groups);
  const auto& fr = require(b, "face");
  if (fr.shape.size() != 3) throw IoError("sample: face must be H x W x C");
  s.face = FaceImage(static_cast<int>(fr.shape[0]), static_cast<int>(fr.shape[1]), static_cast<int>(fr.shape[2]));
  s.face.data = fr.to_f64();
  const auto pose = require(b, "pose").to_f64();
  s.pose = {pose.at(0), pose.at(1), pose.at(2)};
  const auto blink = require(b, "blink").to_f64();
  s.blink = {blink.at(0), blink.at(1)};
  if (auto it = b.find("mouth_open"); it != b.end()) s.mouth_open = it->second.to_f64().at(0);
  s.identity = e.identity;
  s.frame_index = e.frame_index;
  if (s.mfcc.frames != m.feature_config.n_fft_frames || s.mfcc.coeffs != m.feature_config.n_mfcc) {
    throw IoError("sample: mfcc shape does not match manifest feature config");
  }
  if (static_cast<int>(s.landmarks.size()) != m.landmark_count) throw IoError("sample: landmark count mismatch");
  if (s.face.height != m.resolution || s.face.width != m.resolution) throw IoError("sample: face resolution mismatch");
  return s;
}

Dataset load_dataset(const std::filesystem::path& root) {
  Dataset d;
  d.root = root;
  d.manifest = load_manifest(root);
  d.samples.reserve(d.manifest.entries.size());
  for (const auto& e : d.manifest.entries) d.samples.push_back(load_sample(root / e.file, d.manifest, e));
  return d;
}

nlohmann::json SynthConfig::to_json() const {
  return {{"n_samples", n_samples},
          {"n_identities", n_identities},
          {"resolution", resolution},
          {"landmark_count", landmark_count},
          {"seed", seed},
          {"val_fraction", val_fraction},
          {"test_fraction", test_fraction},
          {"audio", {{"base_hz", audio.base_hz}, {"span_hz", audio.span_hz}, {"amp_lo", audio.amp_lo}, {"amp_hi", audio.amp_hi}, {"noise", audio.noise}}},
          {"features", feature_config_to_json(features)}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.n_samples = j.value("n_samples", c.n_samples);
  c.n_identities = j.value("n_identities", c.n_identities);
  c.resolution = j.value("resolution", c.resolution);
  c.landmark_count = j.value("landmark_count", c.landmark_count);
  c.seed = j.value("seed", c.seed);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.test_fraction = j.value("test_fraction", c.test_fraction);
  if (j.contains("audio")) {
    const auto& a = j.at("audio");
    c.audio.base_hz = a.value("base_hz", c.audio.base_hz);
    c.audio.span_hz = a.value("span_hz", c.audio.span_hz);
    c.audio.amp_lo = a.value("amp_lo", c.audio.amp_lo);
    c.audio.amp_hi = a.value("amp_hi", c.audio.amp_hi);
    c.audio.noise = a.value("noise", c.audio.noise);
  }
  if (j.contains("features")) c.features = feature_config_from_json(j.at("features"));
  return c;
}

namespace {

void assign_splits(std::vector<ManifestEntry*>& group, double val_fraction, double test_fraction, std::mt19937_64& rng) {
  std::vector<std::size_t> order(group.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = group.size();
  const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * n));
  const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * n));
  for (std::size_t k = 0; k < n; ++k) {
    group[order[k]]->split = k < n_test ? "test" : (k < n_test + n_val ? "val" : "train");
  }
}

std::string sample_file(const std::string& identity, long frame) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06ld.apbt", frame);
  return identity + "/" + buf;
}

}  // namespace

Dataset synth_dataset_in_memory(const SynthConfig& cfg) {
  if (cfg.n_identities <= 0 || cfg.n_samples < cfg.n_identities) throw ConfigError("synth: need at least one sample per identity");
  if (cfg.resolution < 16) throw ConfigError("synth: resolution must be >= 16");
  cfg.features.validate();
  std::mt19937_64 rng(cfg.seed);

  Dataset d;
  auto& m = d.manifest;
  m.pipeline_version = kPipelineVersion;
  m.feature_config = cfg.features;
  m.resolution = cfg.resolution;
  m.landmark_count = cfg.landmark_count;
  m.groups = synth_groups(cfg.landmark_count);
  m.provenance = {{"generator", "synthetic"}, {"config", cfg.to_json()}};

  for (int id = 0; id < cfg.n_identities; ++id) {
    IdentityInfo info{"id" + std::to_string(id), random_style(rng)};
    const int n_id = cfg.n_samples / cfg.n_identities + (id < cfg.n_samples % cfg.n_identities ? 1 : 0);
    for (int i = 0; i < n_id; ++i) {
      FaceControls c;
      c.mouth_open = uniform(rng, 0.0, 1.0);
      c.pose = {uniform(rng, kYawRange.lo, kYawRange.hi), uniform(rng, kPitchRange.lo, kPitchRange.hi),
                uniform(rng, kRollRange.lo, kRollRange.hi)};
      const double base = uniform(rng, 0.0, 1.0) < 0.15 ? uniform(rng, 0.0, 0.08) : uniform(rng, 0.18, 0.45);
      c.blink.left = std::clamp(base + uniform(rng, -0.03, 0.03), 0.0, 0.5);
      c.blink.right = std::clamp(base + uniform(rng, -0.03, 0.03), 0.0, 0.5);

      Sample s;
      s.identity = info.name;
      s.frame_index = i;
      s.pose = c.pose;
      s.blink = c.blink;
      s.mouth_open = c.mouth_open;
      s.landmarks = synth_landmarks(*info.style, c, cfg.landmark_count);
      s.face = render_face(*info.style, s.landmarks, cfg.resolution);
      s.mfcc = extract_mfcc(synth_audio_window(c.mouth_open, cfg.features, cfg.audio, rng), cfg.features);
      m.entries.push_back({sample_file(info.name, i), info.name, "train", i});
      d.samples.push_back(std::move(s));
    }
    m.identities.push_back(std::move(info));
  }
  for (const auto& id : m.identities) {
    std::vector<ManifestEntry*> group;
    for (auto& e : m.entries)
      if (e.identity == id.name) group.push_back(&e);
    assign_splits(group, cfg.val_fraction, cfg.test_fraction, rng);
  }
  return d;
}

DatasetManifest synth_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  auto d = synth_dataset_in_memory(cfg);
  for (std::size_t i = 0; i < d.samples.size(); ++i) save_sample(out_dir / d.manifest.entries[i].file, d.samples[i]);
  save_manifest(out_dir, d.manifest);
  return d.manifest;
}

DatasetManifest preprocess_frames(const std::filesystem::path& frames_dir, const std::filesystem::path& annotations,
                                  const std::filesystem::path& audio_path, const std::filesystem::path& out_dir,
                                  const PreprocessOptions& opt) {
  std::ifstream in(annotations);
  if (!in) throw IoError("cannot read " + annotations.string());
  const auto ann = nlohmann::json::parse(in);
  const auto groups = ann.at("groups").get<IndexGroups>();
  const std::string identity = ann.value("identity", "p0");
  FeatureConfig features = opt.features;
  features.fps = ann.value("fps", features.fps);
  features.validate();

  const auto track = resample(read_wav(audio_path), features.sample_rate);

  DatasetManifest m;
  m.pipeline_version = kPipelineVersion;
  m.feature_config = features;
  m.resolution = opt.resolution;
  m.groups = groups;
  m.identities.push_back({identity, std::nullopt});
  m.provenance = {{"generator", "preprocess"},
                  {"frames", frames_dir.string()},
                  {"annotations", annotations.string()},
                  {"audio", audio_path.string()}};

  for (const auto& fr : ann.at("frames")) {
    LandmarkSet raw;
    raw.groups = groups;
    for (const auto& p : fr.at("landmarks")) raw.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    raw.validate();
    if (m.entries.empty()) m.landmark_count = static_cast<int>(raw.size());
    if (static_cast<int>(raw.size()) != m.landmark_count) throw DataError("preprocess: inconsistent landmark count");

    auto rgb = read_png(frames_dir / fr.at("file").get<std::string>());
    if (rgb.channels == 1) {
      Grid<std::uint8_t> c3(rgb.height, rgb.width, 3);
      for (int y = 0; y < rgb.height; ++y)
        for (int x = 0; x < rgb.width; ++x)
          for (int c = 0; c < 3; ++c) c3.at(y, x, c) = rgb.at(y, x);
      rgb = std::move(c3);
    }
    auto crop = crop_face(from_u8(rgb), raw, opt.resolution);

    Sample s;
    s.identity = identity;
    s.frame_index = fr.at("frame_index").get<long>();
    const auto& pose = fr.at("pose");
    s.pose = {pose.at(0).get<double>(), pose.at(1).get<double>(), pose.at(2).get<double>()};
    s.landmarks = crop.landmarks;
    s.blink = {blink_ratio(s.landmarks.group_points("left_eye")), blink_ratio(s.landmarks.group_points("right_eye"))};
    s.face = std::move(crop.image);
    s.mfcc = extract_mfcc(window_for_frame(track, s.frame_index, features), features);
    const auto file = sample_file(identity, s.frame_index);
    save_sample(out_dir / file, s);
    m.entries.push_back({file, identity, "train", s.frame_index});
  }
  if (m.entries.empty()) throw DataError("preprocess: no frames");
  std::mt19937_64 rng(0x5eed);
  std::vector<ManifestEntry*> all;
  for (auto& e : m.entries) all.push_back(&e);
  assign_splits(all, opt.val_fraction, opt.test_fraction, rng);
  save_manifest(out_dir, m);
  return m;
}

BatchIterator::BatchIterator(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed)
    : indices_(std::move(indices)), batch_size_(batch_size), seed_(seed) {
  if (batch_size_ == 0) throw ConfigError("batch size must be positive");
}

std::vector<std::vector<std::size_t>> BatchIterator::epoch(std::uint64_t epoch_index) const {
  std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                    static_cast<std::uint32_t>(epoch_index), static_cast<std::uint32_t>(epoch_index >> 32)};
  std::mt19937_64 rng(seq);
  auto order = indices_;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size_) {
    out.emplace_back(order.begin() + static_cast<long>(i),
                     order.begin() + static_cast<long>(std::min(order.size(), i + batch_size_)));
  }
  return out;
}

}  // namespace apb

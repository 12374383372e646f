#include "apbface/metrics.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "apbface/error.hpp"

namespace apb {

namespace {

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size) * size);
  const double c = (size - 1) / 2.0;
  double total = 0.0;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double v = std::exp(-((x - c) * (x - c) + (y - c) * (y - c)) / (2 * sigma * sigma));
      w[std::size_t(y) * size + x] = v;
      total += v;
    }
  }
  for (auto& v : w) v /= total;
  return w;
}

}  // namespace

double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const auto mid = v.size() / 2;
  return pairwise_sum(v.subspan(0, mid)) + pairwise_sum(v.subspan(mid));
}

double ssim(const FaceImage& a, const FaceImage& b, const SsimOptions& opt) {
  if (!a.same_shape(b)) throw ConfigError("ssim: resolution mismatch");
  if (a.height < opt.window || a.width < opt.window) throw ConfigError("ssim: image smaller than window");
  const auto w = gaussian_window(opt.window, opt.sigma);
  const double c1 = (opt.k1 * opt.dynamic_range) * (opt.k1 * opt.dynamic_range);
  const double c2 = (opt.k2 * opt.dynamic_range) * (opt.k2 * opt.dynamic_range);

  std::vector<double> vals;
  vals.reserve(std::size_t(a.height - opt.window + 1) * (a.width - opt.window + 1) * a.channels);
  for (int ch = 0; ch < a.channels; ++ch) {
    for (int y0 = 0; y0 + opt.window <= a.height; ++y0) {
      for (int x0 = 0; x0 + opt.window <= a.width; ++x0) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = 0; dy < opt.window; ++dy) {
          for (int dx = 0; dx < opt.window; ++dx) {
            const double wt = w[std::size_t(dy) * opt.window + dx];
            const double va = a.at(y0 + dy, x0 + dx, ch), vb = b.at(y0 + dy, x0 + dx, ch);
            ma += wt * va;
            mb += wt * vb;
            saa += wt * va * va;
            sbb += wt * vb * vb;
            sab += wt * va * vb;
          }
        }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        vals.push_back(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
      }
    }
  }
  return pairwise_sum(vals) / static_cast<double>(vals.size());
}

Gaussian fit_gaussian(std::span<const std::vector<double>> samples) {
  if (samples.empty()) throw DataError("fit_gaussian: no samples");
  const auto d = samples.front().size();
  const auto n = samples.size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    if (samples[i].size() != d) throw ConfigError("fit_gaussian: inconsistent dimensions");
    for (std::size_t j = 0; j < d; ++j) x(Eigen::Index(i), Eigen::Index(j)) = samples[i][j];
  }
  const Eigen::VectorXd mu = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / denom;
  Gaussian g;
  g.mean.assign(mu.data(), mu.data() + d);
  g.cov.resize(d * d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) g.cov[r * d + c] = cov(Eigen::Index(r), Eigen::Index(c));
  return g;
}

namespace {

Eigen::MatrixXd as_matrix(const Gaussian& g) {
  const int d = g.dim();
  if (static_cast<int>(g.cov.size()) != d * d) throw ConfigError("frechet: covariance shape mismatch");
  Eigen::MatrixXd m(d, d);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) m(r, c) = g.cov[std::size_t(r) * d + c];
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale) throw ConfigError("frechet: covariance not symmetric");
  return 0.5 * (m + m.transpose());
}

// Symmetric PSD square root; eigenvalues down to -1e-8 are clipped to zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-8) throw DataError("frechet: covariance not positive semidefinite");
    ev(i) = std::sqrt(std::max(0.0, ev(i)));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const Gaussian& a, const Gaussian& b) {
  if (a.dim() != b.dim()) throw ConfigError("frechet: dimension mismatch");
  const int d = a.dim();
  const auto c1 = as_matrix(a), c2 = as_matrix(b);
  double mean_term = 0.0;
  for (int i = 0; i < d; ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);

  // tr((C1 C2)^{1/2}) = tr((S C2 S)^{1/2}) with S = C1^{1/2}; the inner product is symmetric PSD.
  const Eigen::MatrixXd s = psd_sqrt(c1);
  const Eigen::MatrixXd inner = s * c2 * s;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  double tr_sqrt = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) tr_sqrt += std::sqrt(std::max(0.0, es.eigenvalues()(i)));

  const double value = mean_term + c1.trace() + c2.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

std::vector<double> pixel_statistics_embedding(const FaceImage& img, int pool) {
  if (pool <= 0 || img.height % pool != 0 || img.width % pool != 0) {
    throw ConfigError("embedding: resolution must be divisible by pool size");
  }
  const int ch = img.height / pool, cw = img.width / pool;
  std::vector<double> out(std::size_t(pool) * pool * img.channels, 0.0);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        out[(std::size_t(y / ch) * pool + x / cw) * img.channels + c] += img.at(y, x, c) / (ch * cw);
  return out;
}

nlohmann::json MetricsReport::to_json() const {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json { return v ? nlohmann::json(*v) : nlohmann::json(); };
  return {{"schema_version", 1},
          {"n_samples", n_samples},
          {"n_detected", n_detected},
          {"dr", dr},
          {"ale_px", opt(ale)},
          {"ape_rad", opt(ape)},
          {"abe", opt(abe)},
          {"ssim", opt(ssim)},
          {"frechet", opt(frechet)},
          {"pixel_scale", pixel_scale},
          {"undefined", {{"ale", !ale}, {"ape", !ape}, {"abe", !abe}}}};
}

MetricsReport evaluate_generated(std::span<const GeneratedSample> samples, const DetectorInterface& detector,
                                 double pixel_scale) {
  if (!detector) throw ConfigError("evaluate_generated: detector required");
  if (samples.empty()) throw DataError("evaluate_generated: empty sample set");
  MetricsReport rep;
  rep.n_samples = samples.size();
  rep.pixel_scale = pixel_scale;
  std::vector<double> le, pe, be;
  for (const auto& s : samples) {
    const auto det = detector(s.face);
    if (!det.detected) continue;
    ++rep.n_detected;
    if (det.landmarks) {
      const auto& got = det.landmarks->points;
      if (got.size() != s.gt_landmarks.points.size()) throw ConfigError("evaluate_generated: landmark count mismatch");
      std::vector<double> d;
      for (std::size_t i = 0; i < got.size(); ++i) {
        d.push_back(std::abs(got[i].x - s.gt_landmarks.points[i].x));
        d.push_back(std::abs(got[i].y - s.gt_landmarks.points[i].y));
      }
      le.push_back(pairwise_sum(d) / static_cast<double>(d.size()) * pixel_scale);
    }
    if (det.pose) {
      const double e = std::abs(det.pose->yaw - s.gt_pose.yaw) + std::abs(det.pose->pitch - s.gt_pose.pitch) +
                       std::abs(det.pose->roll - s.gt_pose.roll);
      pe.push_back(e / 3.0);
    }
    if (det.blink) {
      be.push_back((std::abs(det.blink->left - s.gt_blink.left) + std::abs(det.blink->right - s.gt_blink.right)) / 2.0);
    }
  }
  rep.dr = static_cast<double>(rep.n_detected) / static_cast<double>(rep.n_samples);
  auto mean = [](const std::vector<double>& v) -> std::optional<double> {
    if (v.empty()) return std::nullopt;
    return pairwise_sum(v) / static_cast<double>(v.size());
  };
  rep.ale = mean(le);
  rep.ape = mean(pe);
  rep.abe = mean(be);
  return rep;
}

}  // namespace apb

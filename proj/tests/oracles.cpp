#include "oracles.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

namespace oracle {

std::vector<double> mfcc(const std::vector<double>& x, const apb::FeatureConfig& cfg) {
  const int T = cfg.n_fft_frames, C = cfg.n_mfcc, M = cfg.mel_bands;
  const int len = static_cast<int>(x.size());
  const int hop = len / (T + 1);
  const int flen = len - (T - 1) * hop;
  int nfft = 1;
  while (nfft < flen) nfft *= 2;
  const int bins = nfft / 2 + 1;
  const double pi = std::numbers::pi;

  std::vector<double> y(x.size());
  y[0] = x[0];
  for (int i = 1; i < len; ++i) y[i] = x[i] - cfg.pre_emphasis * x[i - 1];

  auto mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  std::vector<double> edge(M + 2);
  for (int i = 0; i < M + 2; ++i) edge[i] = hz(mel(cfg.sample_rate / 2.0) * i / (M + 1));

  std::vector<double> out(std::size_t(T) * C);
  for (int t = 0; t < T; ++t) {
    std::vector<double> frame(nfft, 0.0);
    for (int i = 0; i < flen; ++i) {
      const double w = flen > 1 ? 0.5 * (1 - std::cos(2 * pi * i / (flen - 1))) : 1.0;
      frame[i] = y[t * hop + i] * w;
    }
    std::vector<double> pw(bins);
    for (int k = 0; k < bins; ++k) {
      double re = 0, im = 0;
      for (int n = 0; n < flen; ++n) {
        // Reduce k*n mod nfft so the angle stays small and exact.
        const long kn = (static_cast<long>(k) * n) % nfft;
        re += frame[n] * std::cos(2 * pi * double(kn) / nfft);
        im -= frame[n] * std::sin(2 * pi * double(kn) / nfft);
      }
      pw[k] = re * re + im * im;
    }
    std::vector<double> lm(M);
    for (int m = 0; m < M; ++m) {
      double e = 0;
      for (int k = 0; k < bins; ++k) {
        const double f = double(k) * cfg.sample_rate / nfft;
        double w = 0;
        if (f > edge[m] && f <= edge[m + 1]) {
          w = (f - edge[m]) / (edge[m + 1] - edge[m]);
        } else if (f > edge[m + 1] && f < edge[m + 2]) {
          w = (edge[m + 2] - f) / (edge[m + 2] - edge[m + 1]);
        }
        e += w * pw[k];
      }
      lm[m] = std::log(e + cfg.log_floor);
    }
    for (int c = 0; c < C; ++c) {
      double s = 0;
      for (int m = 0; m < M; ++m) s += lm[m] * std::cos(pi * c * (2 * m + 1) / (2.0 * M));
      out[std::size_t(t) * C + c] = s * (c == 0 ? std::sqrt(1.0 / M) : std::sqrt(2.0 / M));
    }
  }
  return out;
}

double ssim(const apb::FaceImage& a, const apb::FaceImage& b, int window, double sigma, double L) {
  std::vector<std::vector<double>> w(window, std::vector<double>(window));
  double z = 0;
  const double c = (window - 1) / 2.0;
  for (int i = 0; i < window; ++i) {
    for (int j = 0; j < window; ++j) {
      w[i][j] = std::exp(-((i - c) * (i - c) + (j - c) * (j - c)) / (2 * sigma * sigma));
      z += w[i][j];
    }
  }
  const double c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
  double total = 0;
  long count = 0;
  for (int ch = 0; ch < a.channels; ++ch) {
    for (int y = 0; y + window <= a.height; ++y) {
      for (int x = 0; x + window <= a.width; ++x) {
        double mx = 0, my = 0;
        for (int i = 0; i < window; ++i)
          for (int j = 0; j < window; ++j) {
            mx += w[i][j] / z * a.at(y + i, x + j, ch);
            my += w[i][j] / z * b.at(y + i, x + j, ch);
          }
        double vx = 0, vy = 0, cxy = 0;
        for (int i = 0; i < window; ++i)
          for (int j = 0; j < window; ++j) {
            const double dx = a.at(y + i, x + j, ch) - mx, dy = b.at(y + i, x + j, ch) - my;
            vx += w[i][j] / z * dx * dx;
            vy += w[i][j] / z * dy * dy;
            cxy += w[i][j] / z * dx * dy;
          }
        const double lum = (2 * mx * my + c1) / (mx * mx + my * my + c1);
        const double cs = (2 * cxy + c2) / (vx + vy + c2);
        total += lum * cs;
        ++count;
      }
    }
  }
  return total / count;
}

double frechet(const apb::Gaussian& a, const apb::Gaussian& b) {
  const int d = a.dim();
  Eigen::MatrixXd c1(d, d), c2(d, d);
  for (int r = 0; r < d; ++r)
    for (int k = 0; k < d; ++k) {
      c1(r, k) = a.cov[std::size_t(r) * d + k];
      c2(r, k) = b.cov[std::size_t(r) * d + k];
    }
  // C1 C2 is similar to a PSD matrix, so its eigenvalues are real and non-negative.
  Eigen::EigenSolver<Eigen::MatrixXd> es(c1 * c2);
  double tr_sqrt = 0;
  for (int i = 0; i < d; ++i) tr_sqrt += std::sqrt(std::max(0.0, es.eigenvalues()(i).real()));
  double mean = 0;
  for (int i = 0; i < d; ++i) mean += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  return mean + c1.trace() + c2.trace() - 2 * tr_sqrt;
}

namespace {

std::pair<int, int> pixel_of(const apb::Point2& p, int R) {
  auto f = [R](double u) { return std::min(R - 1, static_cast<int>(std::floor(std::clamp(u, 0.0, 1.0) * R))); };
  return {f(p.x), f(p.y)};
}

double round_half_away(double v) { return std::copysign(std::floor(std::abs(v) + 0.5), v); }

bool on_segment(int c, int r, std::pair<int, int> a, std::pair<int, int> b) {
  const int dx = b.first - a.first, dy = b.second - a.second;
  if (dx == 0 && dy == 0) return c == a.first && r == a.second;
  if (std::abs(dx) >= std::abs(dy)) {
    const int t = (c - a.first) * (dx > 0 ? 1 : -1);
    if (t < 0 || t > std::abs(dx)) return false;
    return r == a.second + static_cast<int>(round_half_away(double(t) * dy / std::abs(dx)));
  }
  const int t = (r - a.second) * (dy > 0 ? 1 : -1);
  if (t < 0 || t > std::abs(dy)) return false;
  return c == a.first + static_cast<int>(round_half_away(double(t) * dx / std::abs(dy)));
}

double cross(double ox, double oy, double ax, double ay, double bx, double by) {
  return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox);
}

}  // namespace

apb::BinaryImage raster(const apb::LandmarkSet& l, int R, int radius) {
  apb::BinaryImage img(R, R, 1, 0);
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < R; ++c) {
      bool white = false;
      for (const auto& p : l.points) {
        const auto [px, py] = pixel_of(p, R);
        if ((c - px) * (c - px) + (r - py) * (r - py) <= radius * radius) white = true;
      }
      for (const auto& [name, idx] : l.groups) {
        for (std::size_t k = 0; k + 1 < idx.size() && !white; ++k) {
          white = on_segment(c, r, pixel_of(l.points[idx[k]], R), pixel_of(l.points[idx[k + 1]], R));
        }
      }
      img.at(r, c) = white;
    }
  }
  return img;
}

apb::MaskImage mask(const apb::LandmarkSet& l, int R, int radius) {
  if (radius >= R) return apb::MaskImage(R, R, 1, 1);
  std::vector<std::pair<double, double>> p;
  for (const auto& q : l.points) p.emplace_back(std::clamp(q.x, 0.0, 1.0) * R, std::clamp(q.y, 0.0, 1.0) * R);
  // A point lies in the convex hull iff it lies in some triangle of the input points.
  apb::MaskImage fill(R, R, 1, 0);
  const std::size_t n = p.size();
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < R; ++c) {
      const double x = c + 0.5, y = r + 0.5;
      bool in = false;
      for (std::size_t i = 0; i < n && !in; ++i)
        for (std::size_t j = i + 1; j < n && !in; ++j)
          for (std::size_t k = j + 1; k < n && !in; ++k) {
            const double d1 = cross(p[i].first, p[i].second, p[j].first, p[j].second, x, y);
            const double d2 = cross(p[j].first, p[j].second, p[k].first, p[k].second, x, y);
            const double d3 = cross(p[k].first, p[k].second, p[i].first, p[i].second, x, y);
            const double area = cross(p[i].first, p[i].second, p[j].first, p[j].second, p[k].first, p[k].second);
            if (area == 0) continue;
            in = (d1 >= 0 && d2 >= 0 && d3 >= 0) || (d1 <= 0 && d2 <= 0 && d3 <= 0);
          }
      fill.at(r, c) = in;
    }
  }
  apb::MaskImage out(R, R, 1, 0);
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < R; ++c)
      for (int rr = 0; rr < R && !out.at(r, c); ++rr)
        for (int cc = 0; cc < R; ++cc)
          if (fill.at(rr, cc) && (rr - r) * (rr - r) + (cc - c) * (cc - c) <= radius * radius) {
            out.at(r, c) = 1;
            break;
          }
  return out;
}

double l1(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / a.size();
}

double masked_l1(const std::vector<double>& a, const std::vector<double>& b, const std::vector<double>& m, int B,
                 int C, int H, int W) {
  double num = 0, white = 0;
  for (int n = 0; n < B; ++n)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double mv = m[(std::size_t(n) * H + y) * W + x];
        white += mv;
        for (int c = 0; c < C; ++c) {
          const std::size_t i = ((std::size_t(n) * C + c) * H + y) * W + x;
          num += mv * std::abs(a[i] - b[i]);
        }
      }
  return num / (white * C);
}

double bce_logits(const std::vector<double>& z, double t) {
  double s = 0;
  for (double v : z) {
    const double p = 1.0 / (1.0 + std::exp(-v));
    s += -(t * std::log(p) + (1 - t) * std::log(1 - p));
  }
  return s / z.size();
}

}  // namespace oracle

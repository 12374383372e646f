#include "apbface/landmark_render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "apbface/error.hpp"

namespace apb {

PixelPoint to_pixel(const Point2& p, int resolution) {
  auto axis = [resolution](double u) {
    const double c = std::clamp(u, 0.0, 1.0) * resolution;
    return std::min(static_cast<int>(std::floor(c)), resolution - 1);
  };
  return {axis(p.x), axis(p.y)};
}

namespace {

// round(num / den) with ties away from zero; den > 0.
long round_div(long num, long den) {
  const long q = (2 * std::labs(num) + den) / (2 * den);
  return num < 0 ? -q : q;
}

void stamp_disk(BinaryImage& img, PixelPoint c, int r) {
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      if (dx * dx + dy * dy > r * r) continue;
      const int x = c.x + dx, y = c.y + dy;
      if (x >= 0 && y >= 0 && x < img.width && y < img.height) img.at(y, x) = 1;
    }
  }
}

double cross(const Point2& o, const Point2& a, const Point2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

}  // namespace

std::vector<PixelPoint> segment_pixels(PixelPoint a, PixelPoint b) {
  const long dx = b.x - a.x, dy = b.y - a.y;
  const long n = std::max(std::labs(dx), std::labs(dy));
  std::vector<PixelPoint> out;
  out.reserve(static_cast<std::size_t>(n) + 1);
  if (n == 0) {
    out.push_back(a);
    return out;
  }
  for (long t = 0; t <= n; ++t) {
    out.push_back({static_cast<int>(a.x + round_div(t * dx, n)), static_cast<int>(a.y + round_div(t * dy, n))});
  }
  return out;
}

BinaryImage rasterize(const LandmarkSet& l, int resolution, int point_radius) {
  if (resolution < 8) throw ConfigError("rasterize: resolution must be >= 8");
  if (point_radius < 0) throw ConfigError("rasterize: negative point radius");
  BinaryImage img(resolution, resolution, 1, 0);
  for (const auto& p : l.points) stamp_disk(img, to_pixel(p, resolution), point_radius);
  for (const auto& [name, idx] : l.groups) {
    for (std::size_t k = 0; k + 1 < idx.size(); ++k) {
      const auto a = to_pixel(l.points.at(idx[k]), resolution);
      const auto b = to_pixel(l.points.at(idx[k + 1]), resolution);
      for (auto px : segment_pixels(a, b)) img.at(px.y, px.x) = 1;
    }
  }
  return img;
}

std::vector<Point2> convex_hull(std::vector<Point2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Point2& a, const Point2& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Point2> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

MaskImage dilate_disk(const MaskImage& m, int radius) {
  if (radius <= 0) return m;
  const int H = m.height, W = m.width;
  // Row prefix sums let each disk row be tested as one horizontal run.
  std::vector<int> prefix(std::size_t(H) * (W + 1), 0);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      prefix[std::size_t(y) * (W + 1) + x + 1] = prefix[std::size_t(y) * (W + 1) + x] + (m.at(y, x) != 0);
    }
  }
  std::vector<int> half(static_cast<std::size_t>(radius) + 1);
  for (int dy = 0; dy <= radius; ++dy) {
    half[dy] = static_cast<int>(std::floor(std::sqrt(double(radius) * radius - double(dy) * dy)));
  }
  MaskImage out(H, W, 1, 0);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int dy = -radius; dy <= radius && !out.at(y, x); ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= H) continue;
        const int w = half[std::abs(dy)];
        const int x0 = std::max(0, x - w), x1 = std::min(W - 1, x + w);
        const auto* row = &prefix[std::size_t(yy) * (W + 1)];
        if (row[x1 + 1] - row[x0] > 0) out.at(y, x) = 1;
      }
    }
  }
  return out;
}

MaskImage face_mask(const LandmarkSet& l, int resolution, int dilation_radius) {
  if (resolution < 8) throw ConfigError("face_mask: resolution must be >= 8");
  std::vector<Point2> scaled;
  scaled.reserve(l.points.size());
  for (const auto& p : l.points) {
    scaled.push_back({std::clamp(p.x, 0.0, 1.0) * resolution, std::clamp(p.y, 0.0, 1.0) * resolution});
  }
  const auto hull = convex_hull(scaled);
  if (hull.size() < 3) throw DataError("degenerate hull");

  if (dilation_radius >= resolution) return MaskImage(resolution, resolution, 1, 1);

  // Scanline fill: for each row of pixel centers intersect the horizontal line with every hull edge.
  MaskImage m(resolution, resolution, 1, 0);
  for (int row = 0; row < resolution; ++row) {
    const double yc = row + 0.5;
    double lo = 1e300, hi = -1e300;
    for (std::size_t i = 0; i < hull.size(); ++i) {
      const auto& a = hull[i];
      const auto& b = hull[(i + 1) % hull.size()];
      if ((yc < std::min(a.y, b.y)) || (yc > std::max(a.y, b.y))) continue;
      if (a.y == b.y) {
        lo = std::min({lo, a.x, b.x});
        hi = std::max({hi, a.x, b.x});
      } else {
        const double x = a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y);
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
    }
    if (lo > hi) continue;
    const int c0 = std::max(0, static_cast<int>(std::ceil(lo - 0.5)));
    const int c1 = std::min(resolution - 1, static_cast<int>(std::floor(hi - 0.5)));
    for (int col = c0; col <= c1; ++col) m.at(row, col) = 1;
  }
  return dilate_disk(m, dilation_radius);
}

}  // namespace apb

#pragma once

#include <vector>

#include "apbface/image.hpp"
#include "apbface/landmarks.hpp"

namespace apb {

// Pixel-grid conventions shared by the rasterizer and the mask builder:
//  * a normalized coordinate u is clamped to [0, 1] and maps to continuous pixel position u * resolution;
//  * a point occupies pixel floor(u * resolution), clamped to resolution - 1;
//  * pixel (col, row) has its center at (col + 0.5, row + 0.5).

struct PixelPoint {
  int x = 0;
  int y = 0;
  friend bool operator==(const PixelPoint&, const PixelPoint&) = default;
};

PixelPoint to_pixel(const Point2& p, int resolution);

// Pixels of the 1-px segment between a and b, endpoints included. Steps along the major axis; the
// minor coordinate is the exact rational offset rounded half away from zero.
std::vector<PixelPoint> segment_pixels(PixelPoint a, PixelPoint b);

// Each point as a filled disk of point_radius; consecutive points inside each index group joined by
// 1-px segments.
BinaryImage rasterize(const LandmarkSet& l, int resolution, int point_radius = 1);

// Convex hull (counter-clockwise in image coordinates, no collinear points) of the scaled points.
std::vector<Point2> convex_hull(std::vector<Point2> pts);

// Filled convex hull of the landmarks dilated by a disk of dilation_radius pixels.
// A radius >= resolution saturates to an all-white mask.
MaskImage face_mask(const LandmarkSet& l, int resolution, int dilation_radius);
inline int default_dilation_radius(int resolution) { return resolution / 16; }

// Binary dilation with a Euclidean disk of the given radius.
MaskImage dilate_disk(const MaskImage& m, int radius);

}  // namespace apb

#pragma once

#include <cstdint>
#include <vector>

#include "apbface/error.hpp"

namespace apb {

// Row-major H x W x C image with interleaved channels.
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<T> data;

  Grid() = default;
  Grid(int h, int w, int c, T fill = T{}) : height(h), width(w), channels(c), data(std::size_t(h) * w * c, fill) {}

  T& at(int y, int x, int c = 0) { return data[(std::size_t(y) * width + x) * channels + c]; }
  const T& at(int y, int x, int c = 0) const { return data[(std::size_t(y) * width + x) * channels + c]; }

  bool same_shape(const Grid& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  std::size_t size() const { return data.size(); }

  friend bool operator==(const Grid&, const Grid&) = default;
};

// Binary landmark image; pixels are 0 or 1.
using BinaryImage = Grid<std::uint8_t>;
// Dilated face-region mask; pixels are 0 or 1.
using MaskImage = Grid<std::uint8_t>;
// H x W x 3, values in [-1, 1].
using FaceImage = Grid<double>;

inline std::size_t count_white(const Grid<std::uint8_t>& img) {
  std::size_t n = 0;
  for (auto v : img.data) n += v != 0;
  return n;
}

}  // namespace apb

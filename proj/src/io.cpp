#include "apbface/io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

#include "apbface/error.hpp"
#include "apbface/signal_audio.hpp"
#include "apbface/tensor_file.hpp"

namespace apb {

std::vector<std::uint8_t> encode_png(const Grid<std::uint8_t>& img) {
  if (img.channels != 1 && img.channels != 3) throw ConfigError("png: only 1 or 3 channels supported");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.data.data(), 0, nullptr)) {
    throw IoError(std::string("png encode: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.data.data(), 0, nullptr)) {
    throw IoError(std::string("png encode: ") + image.message);
  }
  out.resize(size);
  return out;
}

Grid<std::uint8_t> decode_png(std::span<const std::uint8_t> bytes) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw IoError(std::string("png decode: ") + image.message);
  }
  const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Grid<std::uint8_t> out(static_cast<int>(image.height), static_cast<int>(image.width), gray ? 1 : 3);
  if (!png_image_finish_read(&image, nullptr, out.data.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError(std::string("png decode: ") + image.message);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Grid<std::uint8_t>& img) {
  write_file_bytes(path, encode_png(img));
}

Grid<std::uint8_t> read_png(const std::filesystem::path& path) { return decode_png(read_file_bytes(path)); }

Grid<std::uint8_t> to_u8(const FaceImage& img) {
  Grid<std::uint8_t> out(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double v = std::clamp((img.data[i] + 1.0) * 127.5, 0.0, 255.0);
    out.data[i] = static_cast<std::uint8_t>(std::lround(v));
  }
  return out;
}

FaceImage from_u8(const Grid<std::uint8_t>& img) {
  FaceImage out(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.data.size(); ++i) out.data[i] = img.data[i] / 127.5 - 1.0;
  return out;
}

Grid<std::uint8_t> binary_to_u8(const Grid<std::uint8_t>& img) {
  auto out = img;
  for (auto& v : out.data) v = v ? 255 : 0;
  return out;
}

// ---------------------------------------------------------------- WAV

namespace {

template <typename T>
T read_le(std::span<const std::uint8_t> b, std::size_t off) {
  if (off + sizeof(T) > b.size()) throw IoError("wav: truncated");
  T v;
  std::memcpy(&v, b.data() + off, sizeof(T));
  return v;
}

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

}  // namespace

AudioTrack decode_wav(std::span<const std::uint8_t> b) {
  if (b.size() < 12 || std::memcmp(b.data(), "RIFF", 4) != 0 || std::memcmp(b.data() + 8, "WAVE", 4) != 0) {
    throw IoError("wav: not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t off = 12;
  while (off + 8 <= b.size()) {
    const std::string id(reinterpret_cast<const char*>(b.data() + off), 4);
    const auto len = read_le<std::uint32_t>(b, off + 4);
    const std::size_t body = off + 8;
    if (body + len > b.size()) throw IoError("wav: chunk overruns file");
    if (id == "fmt ") {
      format = read_le<std::uint16_t>(b, body);
      channels = read_le<std::uint16_t>(b, body + 2);
      rate = read_le<std::uint32_t>(b, body + 4);
      bits = read_le<std::uint16_t>(b, body + 14);
      if (format == 0xFFFE && len >= 26) format = read_le<std::uint16_t>(b, body + 24);  // extensible
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw IoError("wav: data before fmt");
      if (channels != 1) throw IoError("wav: only mono audio is supported");
      AudioTrack t;
      t.sample_rate = static_cast<int>(rate);
      if (format == 1 && bits == 16) {
        t.samples.resize(len / 2);
        for (std::size_t i = 0; i < t.samples.size(); ++i) {
          t.samples[i] = read_le<std::int16_t>(b, body + 2 * i) / 32768.0;
        }
      } else if (format == 3 && bits == 32) {
        t.samples.resize(len / 4);
        for (std::size_t i = 0; i < t.samples.size(); ++i) t.samples[i] = read_le<float>(b, body + 4 * i);
      } else {
        throw IoError("wav: unsupported encoding (need PCM16 or float32)");
      }
      return t;
    }
    off = body + len + (len & 1);
  }
  throw IoError("wav: no data chunk");
}

AudioTrack read_wav(const std::filesystem::path& path) { return decode_wav(read_file_bytes(path)); }

std::vector<std::uint8_t> encode_wav(const AudioTrack& track, bool float32) {
  const std::uint16_t bits = float32 ? 32 : 16;
  const std::uint32_t data_len = static_cast<std::uint32_t>(track.samples.size() * (bits / 8));
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  append_le<std::uint32_t>(out, 36 + data_len);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  append_le<std::uint32_t>(out, 16);
  append_le<std::uint16_t>(out, float32 ? 3 : 1);
  append_le<std::uint16_t>(out, 1);
  append_le<std::uint32_t>(out, static_cast<std::uint32_t>(track.sample_rate));
  append_le<std::uint32_t>(out, static_cast<std::uint32_t>(track.sample_rate) * (bits / 8));
  append_le<std::uint16_t>(out, bits / 8);
  append_le<std::uint16_t>(out, bits);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  append_le<std::uint32_t>(out, data_len);
  for (double s : track.samples) {
    if (float32) {
      append_le<float>(out, static_cast<float>(s));
    } else {
      const double c = std::clamp(s, -1.0, 32767.0 / 32768.0);
      append_le<std::int16_t>(out, static_cast<std::int16_t>(std::lround(c * 32768.0)));
    }
  }
  return out;
}

void write_wav(const std::filesystem::path& path, const AudioTrack& track, bool float32) {
  write_file_bytes(path, encode_wav(track, float32));
}

// ---------------------------------------------------------------- base64

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::span<const std::uint8_t> in) {
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  if (i < in.size()) {
    std::uint32_t v = in[i] << 16;
    if (i + 1 < in.size()) v |= in[i + 1] << 8;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += i + 1 < in.size() ? kB64[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::array<int, 256> lut;
  lut.fill(-1);
  for (int i = 0; i < 64; ++i) lut[static_cast<unsigned char>(kB64[i])] = i;

  std::vector<std::uint8_t> out;
  std::uint32_t acc = 0;
  int nbits = 0;
  std::size_t pad = 0;
  for (char ch : text) {
    if (ch == '=') {
      ++pad;
      continue;
    }
    if (ch == '\n' || ch == '\r' || ch == ' ') continue;
    if (pad > 0) throw DataError("base64: data after padding");
    const int v = lut[static_cast<unsigned char>(ch)];
    if (v < 0) throw DataError("base64: invalid character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    nbits += 6;
    if (nbits >= 8) {
      nbits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> nbits) & 0xFF));
    }
  }
  if (pad > 2) throw DataError("base64: bad padding");
  return out;
}

}  // namespace apb

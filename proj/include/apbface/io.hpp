#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "apbface/image.hpp"

namespace apb {

struct AudioTrack;

// PNG via libpng's simplified API. Gray (1 channel) or RGB (3 channels), 8-bit.
std::vector<std::uint8_t> encode_png(const Grid<std::uint8_t>& img);
Grid<std::uint8_t> decode_png(std::span<const std::uint8_t> bytes);
void write_png(const std::filesystem::path& path, const Grid<std::uint8_t>& img);
Grid<std::uint8_t> read_png(const std::filesystem::path& path);

// [-1, 1] -> [0, 255], rounding to nearest.
Grid<std::uint8_t> to_u8(const FaceImage& img);
FaceImage from_u8(const Grid<std::uint8_t>& img);
// Binary {0,1} -> {0,255} for viewing.
Grid<std::uint8_t> binary_to_u8(const Grid<std::uint8_t>& img);

// Mono WAV: PCM 16-bit or IEEE float 32-bit on read; written as PCM 16-bit or float 32-bit.
AudioTrack read_wav(const std::filesystem::path& path);
AudioTrack decode_wav(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_wav(const AudioTrack& track, bool float32);
void write_wav(const std::filesystem::path& path, const AudioTrack& track, bool float32 = false);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace apb

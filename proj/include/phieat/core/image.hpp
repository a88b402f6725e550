#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace phieat {

// RGB image, float in [0,1], row-major interleaved channels. All in-memory
// math stays floating point; quantization to 8-bit happens once in write_png.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w) : height(h), width(w), data(size_t(h) * w * 3, 0.0f) {}

  float& at(int y, int x, int c) { return data[(size_t(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return data[(size_t(y) * width + x) * 3 + c]; }
};

// Single-channel 8-bit map (selection-scene region masks).
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;

  GrayImage() = default;
  GrayImage(int h, int w) : height(h), width(w), data(size_t(h) * w, 0) {}

  uint8_t& at(int y, int x) { return data[size_t(y) * width + x]; }
  uint8_t at(int y, int x) const { return data[size_t(y) * width + x]; }
};

void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

void write_png(const std::string& path, const GrayImage& img);
GrayImage read_png_gray(const std::string& path);

}  // namespace phieat

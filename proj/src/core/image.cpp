#include "phieat/core/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "phieat/core/errors.hpp"

namespace phieat {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

uint8_t quantize(float v) {
  float c = std::clamp(v, 0.0f, 1.0f);
  return uint8_t(std::lround(c * 255.0f));
}

void write_png_impl(const std::string& path, int height, int width, int channels,
                    const std::vector<uint8_t>& bytes) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  require(fp != nullptr, ErrorKind::io, "cannot open for write: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, ErrorKind::io, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail(ErrorKind::io, "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::io, "png write error: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y)
    rows[y] = const_cast<png_bytep>(bytes.data() + size_t(y) * width * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void read_png_impl(const std::string& path, int& height, int& width, int& channels,
                   std::vector<uint8_t>& bytes) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  require(fp != nullptr, ErrorKind::io, "cannot open for read: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, ErrorKind::io, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail(ErrorKind::io, "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::io, "png read error: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  width = int(png_get_image_width(png, info));
  height = int(png_get_image_height(png, info));
  png_byte color = png_get_color_type(png, info);
  png_byte depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  channels = int(png_get_channels(png, info));
  bytes.resize(size_t(height) * width * channels);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = bytes.data() + size_t(y) * width * channels;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
}

}  // namespace

void write_png(const std::string& path, const Image& img) {
  std::vector<uint8_t> bytes(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i) bytes[i] = quantize(img.data[i]);
  write_png_impl(path, img.height, img.width, 3, bytes);
}

Image read_png(const std::string& path) {
  int h, w, c;
  std::vector<uint8_t> bytes;
  read_png_impl(path, h, w, c, bytes);
  Image img(h, w);
  if (c == 3) {
    for (size_t i = 0; i < bytes.size(); ++i) img.data[i] = float(bytes[i]) / 255.0f;
  } else if (c == 1) {
    for (size_t i = 0; i < bytes.size(); ++i) {
      float v = float(bytes[i]) / 255.0f;
      img.data[3 * i] = img.data[3 * i + 1] = img.data[3 * i + 2] = v;
    }
  } else {
    fail(ErrorKind::io, "unsupported channel count in " + path);
  }
  return img;
}

void write_png(const std::string& path, const GrayImage& img) {
  write_png_impl(path, img.height, img.width, 1, img.data);
}

GrayImage read_png_gray(const std::string& path) {
  int h, w, c;
  std::vector<uint8_t> bytes;
  read_png_impl(path, h, w, c, bytes);
  require(c == 1, ErrorKind::io, "expected single-channel png: " + path);
  GrayImage img(h, w);
  img.data = std::move(bytes);
  return img;
}

}  // namespace phieat

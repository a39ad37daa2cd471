#pragma once

// 8-bit grayscale image files: binary/ASCII PGM read, binary PGM write, PNG read.

#include <png.h>

#include <cctype>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "topodiff/errors.hpp"

namespace topodiff {

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

namespace detail {

inline std::string lower_extension(const std::string& path) {
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return "";
  std::string ext = path.substr(dot + 1);
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return ext;
}

// Next whitespace-delimited header token, skipping '#' comments.
inline std::string pnm_token(std::istream& is) {
  std::string tok;
  char ch;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string ignored;
      std::getline(is, ignored);
      if (!tok.empty()) break;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

inline GrayImage read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image " + path);
  const std::string magic = pnm_token(is);
  if (magic == "P3" || magic == "P6") throw DataError("image " + path + " is not grayscale (" + magic + ")");
  if (magic != "P5" && magic != "P2") throw DataError("image " + path + " is not a PGM file");
  GrayImage img;
  long w = 0, h = 0, maxval = 0;
  try {
    w = std::stol(pnm_token(is));
    h = std::stol(pnm_token(is));
    maxval = std::stol(pnm_token(is));
  } catch (const std::exception&) {
    throw DataError("malformed PGM header in " + path);
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw DataError("unsupported PGM geometry or depth in " + path);
  }
  img.width = static_cast<std::size_t>(w);
  img.height = static_cast<std::size_t>(h);
  img.pixels.resize(img.width * img.height);
  if (magic == "P5") {
    is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (is.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw DataError("truncated PGM " + path);
  } else {
    for (auto& px : img.pixels) {
      long v = -1;
      if (!(is >> v) || v < 0 || v > maxval) throw DataError("bad ASCII PGM sample in " + path);
      px = static_cast<std::uint8_t>(v);
    }
  }
  if (maxval != 255) {
    for (auto& px : img.pixels) px = static_cast<std::uint8_t>((px * 255 + maxval / 2) / maxval);
  }
  return img;
}

inline GrayImage read_png(const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw DataError("cannot open image " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed for " + path);
  }
  GrayImage img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("image " + path + " is not single-channel grayscale");
  }
  const auto depth = png_get_bit_depth(png, info);
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_strip_16(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.pixels.resize(img.width * img.height);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t r = 0; r < img.height; ++r) rows[r] = img.pixels.data() + r * img.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace detail

// Reads an 8-bit grayscale PGM (P5/P2) or PNG, chosen by extension.
inline GrayImage read_gray_image(const std::string& path) {
  const auto ext = detail::lower_extension(path);
  if (ext == "png") return detail::read_png(path);
  if (ext == "pgm" || ext == "pnm") return detail::read_pgm(path);
  throw DataError("unsupported image format for " + path + " (expected .pgm or .png)");
}

inline void write_pgm(const std::string& path, const GrayImage& img) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write image " + path);
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw DataError("failed writing image " + path);
}

}  // namespace topodiff

// SPDX-License-Identifier: Apache-2.0
#include "sfmc/image.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "sfmc/error.hpp"

namespace sfmc {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  return is;
}

// Netpbm header: magic, width, height, maxval, separated by whitespace with
// optional '#' comments, then exactly one whitespace byte.
struct NetpbmHeader {
  std::size_t width = 0, height = 0, maxval = 0;
};

std::string next_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

NetpbmHeader read_netpbm(std::istream& is, const std::string& magic, const std::filesystem::path& path) {
  if (next_token(is) != magic) throw Error(ErrorCode::kIoError, "expected " + magic + " in " + path.string());
  NetpbmHeader h;
  try {
    h.width = std::stoul(next_token(is));
    h.height = std::stoul(next_token(is));
    h.maxval = std::stoul(next_token(is));
  } catch (const std::exception&) {
    throw Error(ErrorCode::kIoError, "malformed header in " + path.string());
  }
  if (h.maxval != 255) throw Error(ErrorCode::kIoError, "only 8-bit netpbm supported: " + path.string());
  return h;
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& rgb) {
  if (rgb.channels != 3) throw Error(ErrorCode::kShapeMismatch, "PPM needs 3 channels");
  auto os = open_out(path);
  os << "P6\n" << rgb.width << " " << rgb.height << "\n255\n";
  std::vector<unsigned char> buf(rgb.pixels() * 3);
  for (std::size_t y = 0; y < rgb.height; ++y)
    for (std::size_t x = 0; x < rgb.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) buf[(y * rgb.width + x) * 3 + c] = to_byte(rgb.at(c, y, x));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  auto is = open_in(path);
  const auto h = read_netpbm(is, "P6", path);
  std::vector<unsigned char> buf(h.width * h.height * 3);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw Error(ErrorCode::kIoError, "truncated " + path.string());
  Image img(3, h.height, h.width);
  for (std::size_t y = 0; y < h.height; ++y)
    for (std::size_t x = 0; x < h.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = buf[(y * h.width + x) * 3 + c] / 255.0;
  return img;
}

void write_pgm(const std::filesystem::path& path, const Image& gray, bool as_mask) {
  if (gray.channels != 1) throw Error(ErrorCode::kShapeMismatch, "PGM needs 1 channel");
  auto os = open_out(path);
  os << "P5\n" << gray.width << " " << gray.height << "\n255\n";
  std::vector<unsigned char> buf(gray.pixels());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = as_mask ? (gray.data[i] > 0.5 ? 255 : 0) : to_byte(gray.data[i]);
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

Image read_pgm(const std::filesystem::path& path, bool as_mask) {
  auto is = open_in(path);
  const auto h = read_netpbm(is, "P5", path);
  std::vector<unsigned char> buf(h.width * h.height);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw Error(ErrorCode::kIoError, "truncated " + path.string());
  Image img(1, h.height, h.width);
  for (std::size_t i = 0; i < buf.size(); ++i)
    img.data[i] = as_mask ? (buf[i] >= 128 ? 1.0 : 0.0) : buf[i] / 255.0;
  return img;
}

static_assert(std::endian::native == std::endian::little, "PFM I/O assumes little-endian");

void write_pfm(const std::filesystem::path& path, const Image& map) {
  if (map.channels != 1) throw Error(ErrorCode::kShapeMismatch, "PFM writer handles 1 channel");
  auto os = open_out(path);
  os << "Pf\n" << map.width << " " << map.height << "\n-1.0\n";
  std::vector<float> row(map.width);
  for (std::size_t r = 0; r < map.height; ++r) {
    const std::size_t y = map.height - 1 - r;
    for (std::size_t x = 0; x < map.width; ++x) row[x] = static_cast<float>(map.at(0, y, x));
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
  }
  if (!os) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

Image read_pfm(const std::filesystem::path& path) {
  auto is = open_in(path);
  std::string magic;
  std::size_t w = 0, h = 0;
  double scale = 0.0;
  if (!(is >> magic >> w >> h >> scale) || magic != "Pf")
    throw Error(ErrorCode::kIoError, "not a single-channel PFM: " + path.string());
  if (scale >= 0.0) throw Error(ErrorCode::kIoError, "big-endian PFM unsupported: " + path.string());
  is.get();  // single whitespace byte after the scale
  Image img(1, h, w);
  std::vector<float> row(w);
  for (std::size_t r = 0; r < h; ++r) {
    if (!is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(w * 4)))
      throw Error(ErrorCode::kIoError, "truncated " + path.string());
    const std::size_t y = h - 1 - r;
    for (std::size_t x = 0; x < w; ++x) img.at(0, y, x) = row[x];
  }
  return img;
}

}  // namespace sfmc

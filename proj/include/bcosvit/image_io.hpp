// Binary PPM (P6, maxval 255) reading and writing for [3 x H x W] images in
// [0, 1], plus BCT1 tensor files.
#pragma once

#include "bcosvit/tensor.hpp"

#include <filesystem>
#include <fstream>

namespace bcosvit {

struct IoError : Error {
  using Error::Error;
};

namespace detail {

inline std::string ppm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(char(ch));
  }
  return tok;
}

inline std::size_t ppm_number(std::istream& is, const char* what) {
  const std::string tok = ppm_token(is);
  if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos || tok.size() > 9)
    throw FormatError(std::string("malformed PPM header: bad ") + what);
  return std::stoul(tok);
}

}  // namespace detail

inline Tensor<float> read_ppm(std::istream& is) {
  const std::string magic = detail::ppm_token(is);
  if (magic == "P3") throw FormatError("unsupported PPM format P3 (ASCII); only binary P6 is supported");
  if (magic != "P6") throw FormatError("not a binary PPM (P6) file");
  const std::size_t w = detail::ppm_number(is, "width");
  const std::size_t h = detail::ppm_number(is, "height");
  const std::size_t maxval = detail::ppm_number(is, "maxval");
  if (w == 0 || h == 0) throw FormatError("malformed PPM header: zero extent");
  if (maxval != 255) throw FormatError("unsupported PPM maxval " + std::to_string(maxval) + " (expected 255)");
  std::vector<unsigned char> buf(w * h * 3);
  is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (std::size_t(is.gcount()) != buf.size())
    throw FormatError("truncated PPM payload: expected " + std::to_string(buf.size()) + " bytes, got " +
                      std::to_string(is.gcount()));
  Tensor<float> out(Dims{3, h, w});
  for (std::size_t p = 0; p < w * h; ++p)
    for (std::size_t c = 0; c < 3; ++c) out[c * w * h + p] = float(buf[p * 3 + c]) / 255.0f;
  return out;
}

inline void write_ppm(std::ostream& os, const Tensor<float>& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("write_ppm: expected 3 x H x W, got " + dims_str(rgb.dims()));
  const std::size_t h = rgb.dim(1), w = rgb.dim(2);
  os << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> buf(w * h * 3);
  for (std::size_t p = 0; p < w * h; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(rgb[c * w * h + p], 0.0f, 1.0f);
      buf[p * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
  os.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  if (!os) throw IoError("PPM write failed");
}

inline Tensor<float> load_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image '" + path.string() + "'");
  return read_ppm(is);
}

inline void save_ppm(const std::filesystem::path& path, const Tensor<float>& rgb) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  write_ppm(os, rgb);
}

template <class T>
void save_bct1(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  write_bct1(os, t);
}

template <class T>
Tensor<T> load_bct1(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  return read_bct1<T>(is);
}

}  // namespace bcosvit

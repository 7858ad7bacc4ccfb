#include "more/io.hpp"

#include <algorithm>
#include <cctype>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "more/errors.hpp"

namespace more {

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>(v >> (8 * b)));
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return v;
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFileError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

void write_ecg(const std::filesystem::path& path, const EcgRecord& ecg) {
  std::vector<unsigned char> bytes{'E', 'C', 'G', '1'};
  put_u32(bytes, static_cast<std::uint32_t>(ecg.leads.rows()));
  put_u32(bytes, static_cast<std::uint32_t>(ecg.leads.cols()));
  put_u32(bytes, static_cast<std::uint32_t>(std::lround(ecg.rate_hz)));
  for (Eigen::Index r = 0; r < ecg.leads.rows(); ++r)
    for (Eigen::Index i = 0; i < ecg.leads.cols(); ++i)
      put_u32(bytes, std::bit_cast<std::uint32_t>(static_cast<float>(ecg.leads(r, i))));
  spit(path, bytes);
}

EcgRecord read_ecg(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  if (bytes.size() < 16 || std::string(bytes.begin(), bytes.begin() + 4) != "ECG1")
    throw SchemaError(path.string() + ": not an ECG1 file");
  const std::uint32_t leads = get_u32(&bytes[4]), length = get_u32(&bytes[8]), rate = get_u32(&bytes[12]);
  if (leads == 0 || length == 0 || rate == 0) throw SchemaError(path.string() + ": empty ECG header field");
  if (bytes.size() != 16 + 4ull * leads * length) throw SchemaError(path.string() + ": payload size mismatch");
  EcgRecord ecg{Eigen::MatrixXd(leads, length), static_cast<double>(rate)};
  const unsigned char* p = bytes.data() + 16;
  for (std::uint32_t r = 0; r < leads; ++r)
    for (std::uint32_t i = 0; i < length; ++i, p += 4) ecg.leads(r, i) = std::bit_cast<float>(get_u32(p));
  return ecg;
}

void write_pgm(const std::filesystem::path& path, const Eigen::MatrixXd& pixels) {
  const std::string header = "P5\n" + std::to_string(pixels.cols()) + " " + std::to_string(pixels.rows()) + "\n255\n";
  std::vector<unsigned char> bytes(header.begin(), header.end());
  for (Eigen::Index y = 0; y < pixels.rows(); ++y)
    for (Eigen::Index x = 0; x < pixels.cols(); ++x) bytes.push_back(to_byte(pixels(y, x)));
  spit(path, bytes);
}

ImageRecord read_pgm(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  std::size_t pos = 0;
  // Reads the next whitespace-delimited header token, skipping comments.
  auto token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != "P5") throw SchemaError(path.string() + ": not a binary PGM");
  long width = 0, height = 0, maxval = 0;
  try {
    width = std::stol(token());
    height = std::stol(token());
    maxval = std::stol(token());
  } catch (const std::exception&) {
    throw SchemaError(path.string() + ": malformed PGM header");
  }
  if (width <= 0 || height <= 0 || maxval != 255) throw SchemaError(path.string() + ": unsupported PGM geometry");
  ++pos;  // single whitespace byte after maxval
  if (bytes.size() - pos != static_cast<std::size_t>(width * height))
    throw SchemaError(path.string() + ": payload size mismatch");
  ImageRecord img{Eigen::MatrixXd(height, width), {}, {}};
  for (long y = 0; y < height; ++y)
    for (long x = 0; x < width; ++x) img.pixels(y, x) = bytes[pos++] / 255.0;
  return img;
}

Eigen::MatrixXd quantize_8bit(const Eigen::MatrixXd& pixels) {
  return pixels.unaryExpr([](double v) { return to_byte(v) / 255.0; });
}

}  // namespace more

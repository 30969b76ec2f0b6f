#include "backdoor/image_io.hpp"

#include <zlib.h>

#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "backdoor/dataset.hpp"
#include "backdoor/error.hpp"

namespace backdoor {

void write_pgm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
  std::vector<char> bytes(img.size());
  const auto px = img.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) {
    bytes[i] = static_cast<char>(static_cast<std::uint8_t>(std::lround(px[i] * 255.0)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(std::istream& in) {
  std::string tok;
  char c = 0;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

}  // namespace

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  if (pgm_token(in) != "P5") throw IoError("not a binary PGM: " + path.string());
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(pgm_token(in));
    h = std::stoul(pgm_token(in));
    maxval = std::stoul(pgm_token(in));
  } catch (const std::exception&) {
    throw IoError("malformed PGM header: " + path.string());
  }
  if (maxval != 255) throw IoError("unsupported PGM maxval in " + path.string());
  std::vector<char> bytes(w * h);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw IoError("truncated PGM: " + path.string());
  }
  std::vector<double> data(w * h);
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<std::uint8_t>(bytes[i]) / 255.0;
  }
  return Image(w, h, std::move(data));
}

namespace {

void put_u32_be(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  buf.push_back(static_cast<std::uint8_t>(v >> 24));
  buf.push_back(static_cast<std::uint8_t>(v >> 16));
  buf.push_back(static_cast<std::uint8_t>(v >> 8));
  buf.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(std::vector<std::uint8_t>& file, const char* type,
               const std::vector<std::uint8_t>& payload) {
  put_u32_be(file, static_cast<std::uint32_t>(payload.size()));
  const std::size_t type_at = file.size();
  file.insert(file.end(), type, type + 4);
  file.insert(file.end(), payload.begin(), payload.end());
  const uLong crc = crc32(0L, file.data() + type_at, static_cast<uInt>(4 + payload.size()));
  put_u32_be(file, static_cast<std::uint32_t>(crc));
}

}  // namespace

void write_png(const RgbImage& img, const std::filesystem::path& path) {
  if (img.data.size() != img.width * img.height * 3) {
    throw Error("RGB raster size does not match its dimensions");
  }
  std::vector<std::uint8_t> file = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

  std::vector<std::uint8_t> ihdr;
  put_u32_be(ihdr, static_cast<std::uint32_t>(img.width));
  put_u32_be(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit, truecolour, deflate, no filter, no interlace
  put_chunk(file, "IHDR", ihdr);

  std::vector<std::uint8_t> raw;
  raw.reserve(img.height * (1 + 3 * img.width));
  for (std::size_t y = 0; y < img.height; ++y) {
    raw.push_back(0);
    const auto* row = img.data.data() + 3 * img.width * y;
    raw.insert(raw.end(), row, row + 3 * img.width);
  }
  uLongf packed_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> packed(packed_len);
  if (compress2(packed.data(), &packed_len, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw IoError("zlib compression failed");
  }
  packed.resize(packed_len);
  put_chunk(file, "IDAT", packed);
  put_chunk(file, "IEND", {});

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace backdoor

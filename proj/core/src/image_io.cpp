#include "loupe/image_io.hpp"

#include <cctype>
#include <fstream>
#include <string>

#include "loupe/error.hpp"

namespace loupe {

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  if (image.max_value != 255 && image.max_value != 65535)
    throw DataError("PGM max value must be 255 or 65535, got " + std::to_string(image.max_value));
  if (image.pixels.size() != image.height * image.width) throw DataError("PGM pixel count does not match its size");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << "P5\n" << image.width << " " << image.height << "\n" << image.max_value << "\n";
  if (image.max_value == 255) {
    std::vector<char> bytes(image.pixels.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      if (image.pixels[i] > 255) throw DataError("8-bit PGM pixel out of range");
      bytes[i] = static_cast<char>(image.pixels[i]);
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  } else {
    std::vector<char> bytes(image.pixels.size() * 2);
    for (std::size_t i = 0; i < image.pixels.size(); ++i) {
      bytes[2 * i] = static_cast<char>(image.pixels[i] >> 8);
      bytes[2 * i + 1] = static_cast<char>(image.pixels[i] & 0xFF);
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

namespace {

std::size_t read_header_number(std::istream& in, const std::string& path) {
  int c = in.get();
  while (in && (std::isspace(c) || c == '#')) {
    if (c == '#')
      while (in && c != '\n') c = in.get();
    c = in.get();
  }
  if (!in || !std::isdigit(c)) throw DataError("malformed PGM header in '" + path + "'");
  std::size_t value = 0;
  while (in && std::isdigit(c)) {
    value = value * 10 + static_cast<std::size_t>(c - '0');
    c = in.get();
  }
  return value; // the single whitespace after the number has been consumed
}

} // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || magic[1] != '5') throw DataError("'" + path.string() + "' is not a binary PGM (P5) file");
  GrayImage img;
  img.width = read_header_number(in, path.string());
  img.height = read_header_number(in, path.string());
  const std::size_t maxval = read_header_number(in, path.string());
  if (maxval != 255 && maxval != 65535)
    throw DataError("unsupported PGM max value " + std::to_string(maxval) + " in '" + path.string() + "'");
  if (img.width == 0 || img.height == 0) throw DataError("PGM '" + path.string() + "' has a zero dimension");
  img.max_value = static_cast<std::uint16_t>(maxval);
  const std::size_t n = img.width * img.height;
  const std::size_t bytes_per = maxval == 255 ? 1 : 2;
  std::vector<unsigned char> bytes(n * bytes_per);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size())
    throw DataError("PGM '" + path.string() + "' is truncated: expected " + std::to_string(bytes.size()) +
                    " payload bytes, got " + std::to_string(in.gcount()));
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    img.pixels[i] = bytes_per == 1 ? bytes[i] : static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]);
  return img;
}

} // namespace loupe

#include "fuseseg/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace fuseseg::data {

namespace {

struct PgmError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_bytes(const std::string& path, int h, int w, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw PgmError("pgm: cannot open for writing: " + path);
  f << "P5\n" << w << ' ' << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw PgmError("pgm: write failed: " + path);
}

int next_token(std::istream& in) {
  // skips whitespace and '#' comment lines, returns a nonnegative integer
  while (true) {
    int c = in.peek();
    if (c == EOF) throw PgmError("pgm: truncated header");
    if (c == '#') {
      std::string line;
      std::getline(in, line);
      continue;
    }
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    break;
  }
  int value = 0;
  if (!(in >> value) || value < 0) throw PgmError("pgm: bad header value");
  return value;
}

std::vector<uint8_t> read_bytes(const std::string& path, int& h, int& w) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw PgmError("pgm: cannot open: " + path);
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (m0 != 'P' || m1 != '5') throw PgmError("pgm: not a binary PGM: " + path);
  w = next_token(f);
  h = next_token(f);
  int maxval = next_token(f);
  if (maxval != 255) throw PgmError("pgm: only 8-bit supported: " + path);
  f.get();  // the single whitespace before pixel data
  std::vector<uint8_t> bytes(static_cast<std::size_t>(h) * w);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw PgmError("pgm: truncated pixel data: " + path);
  }
  return bytes;
}

}  // namespace

void write_pgm(const std::string& path, const GrayImage& img) {
  std::vector<uint8_t> bytes(img.px.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    int q = static_cast<int>(std::lround(img.px[i] * 255.0));
    bytes[i] = static_cast<uint8_t>(std::clamp(q, 0, 255));
  }
  write_bytes(path, img.h, img.w, bytes);
}

void write_pgm_labels(const std::string& path, const LabelImage& img) {
  write_bytes(path, img.h, img.w, img.px);
}

GrayImage read_pgm(const std::string& path) {
  int h = 0, w = 0;
  std::vector<uint8_t> bytes = read_bytes(path, h, w);
  GrayImage img{h, w, std::vector<double>(bytes.size())};
  for (std::size_t i = 0; i < bytes.size(); ++i) img.px[i] = bytes[i] / 255.0;
  return img;
}

LabelImage read_pgm_labels(const std::string& path) {
  int h = 0, w = 0;
  std::vector<uint8_t> bytes = read_bytes(path, h, w);
  return LabelImage{h, w, std::move(bytes)};
}

}  // namespace fuseseg::data

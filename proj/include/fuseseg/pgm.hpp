#pragma once

#include <string>

#include "fuseseg/image.hpp"

namespace fuseseg::data {

// Binary 8-bit PGM (P5). Gray images quantize round(v*255) on write and
// normalize /255 on read; label images carry raw byte values.
void write_pgm(const std::string& path, const GrayImage& img);
void write_pgm_labels(const std::string& path, const LabelImage& img);
GrayImage read_pgm(const std::string& path);
LabelImage read_pgm_labels(const std::string& path);

}  // namespace fuseseg::data

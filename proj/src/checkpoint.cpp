#include "fuseseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

namespace fuseseg::io {

namespace {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const char kMagic[4] = {'F', '4', 'S', 'G'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

uint32_t get_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace

uint32_t crc32(const uint8_t* data, std::size_t n) {
  static uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    init = true;
  }
  uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

void save_checkpoint(const std::string& path, const ParamSet& params) {
  std::vector<uint8_t> buf;
  buf.insert(buf.end(), kMagic, kMagic + 4);
  put_u32(buf, kCheckpointVersion);
  put_u32(buf, static_cast<uint32_t>(params.count()));
  for (const auto& t : params.items()) {
    put_u32(buf, static_cast<uint32_t>(t.name().size()));
    buf.insert(buf.end(), t.name().begin(), t.name().end());
    buf.push_back(0);  // dtype f32
    put_u32(buf, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) put_u32(buf, static_cast<uint32_t>(d));
    for (double v : t.values()) {
      float f = static_cast<float>(v);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(buf, bits);
    }
  }
  put_u32(buf, crc32(buf.data(), buf.size()));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot write " + path);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw CheckpointError("checkpoint: write failed " + path);
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 16) throw CheckpointError("checkpoint: truncated file " + path);
  if (std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw CheckpointError("checkpoint: bad magic in " + path);
  }
  uint32_t stored_crc = get_u32(buf.data() + buf.size() - 4);
  uint32_t actual_crc = crc32(buf.data(), buf.size() - 4);
  if (stored_crc != actual_crc) {
    throw CheckpointError("checkpoint: CRC mismatch in " + path);
  }
  std::size_t pos = 4;
  auto need = [&](std::size_t n) {
    if (pos + n > buf.size() - 4) throw CheckpointError("checkpoint: truncated body in " + path);
  };
  need(8);
  uint32_t version = get_u32(buf.data() + pos);
  pos += 4;
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  uint32_t count = get_u32(buf.data() + pos);
  pos += 4;
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (uint32_t e = 0; e < count; ++e) {
    need(4);
    uint32_t name_len = get_u32(buf.data() + pos);
    pos += 4;
    need(name_len + 5);
    CheckpointEntry ent;
    ent.name.assign(reinterpret_cast<const char*>(buf.data() + pos), name_len);
    pos += name_len;
    uint8_t dtype = buf[pos];
    pos += 1;
    if (dtype != 0) throw CheckpointError("checkpoint: unknown dtype tag in " + path);
    uint32_t ndim = get_u32(buf.data() + pos);
    pos += 4;
    need(static_cast<std::size_t>(ndim) * 4);
    std::size_t numel_v = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      uint32_t dim = get_u32(buf.data() + pos);
      pos += 4;
      ent.shape.push_back(static_cast<int>(dim));
      numel_v *= dim;
    }
    need(numel_v * 4);
    ent.values.resize(numel_v);
    for (std::size_t i = 0; i < numel_v; ++i) {
      uint32_t bits = get_u32(buf.data() + pos);
      pos += 4;
      float fv;
      std::memcpy(&fv, &bits, 4);
      ent.values[i] = static_cast<double>(fv);
    }
    entries.push_back(std::move(ent));
  }
  if (pos != buf.size() - 4) throw CheckpointError("checkpoint: trailing bytes in " + path);
  return entries;
}

void load_checkpoint(const std::string& path, ParamSet& params) {
  std::vector<CheckpointEntry> entries = read_checkpoint(path);
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& t : params.items()) {
    auto it = by_name.find(t.name());
    if (it == by_name.end()) {
      throw CheckpointError("checkpoint: missing parameter '" + t.name() + "' in " + path);
    }
    if (it->second->shape != t.shape()) {
      throw CheckpointError("checkpoint: shape mismatch for '" + t.name() + "': file " +
                            shape_str(it->second->shape) + " vs model " + shape_str(t.shape()));
    }
    t.mutable_values() = it->second->values;
  }
}

}  // namespace fuseseg::io

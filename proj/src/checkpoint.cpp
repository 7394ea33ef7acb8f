#include "mango/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mango {

namespace {

constexpr char kMagic[8] = {'M', 'G', 'O', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: unexpected end of file");
  return v;
}

void write_doubles(std::ostream& os, std::span<const double> v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::istream& is, std::vector<double>& v, size_t n) {
  v.resize(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw std::runtime_error("checkpoint: unexpected end of file");
}

}  // namespace

const LoadedParam& LoadedCheckpoint::at(const std::string& name) const {
  for (const auto& p : params) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("checkpoint has no parameter named " + name);
}

void save_checkpoint(const std::filesystem::path& path, const std::string& meta_json,
                     std::span<const ad::Parameter* const> params, bool with_moments) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  write_pod<uint32_t>(os, static_cast<uint32_t>(meta_json.size()));
  os.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
  write_pod<uint32_t>(os, static_cast<uint32_t>(params.size()));
  for (const ad::Parameter* p : params) {
    write_pod<uint16_t>(os, static_cast<uint16_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    write_pod<uint8_t>(os, with_moments ? 1 : 0);
    write_pod<uint32_t>(os, static_cast<uint32_t>(p->shape.size()));
    for (int d : p->shape) write_pod<int32_t>(os, d);
    write_doubles(os, p->value);
    if (with_moments) {
      write_doubles(os, p->moment1);
      write_doubles(os, p->moment2);
      write_pod<int64_t>(os, p->step_count);
    }
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  LoadedCheckpoint out;
  const auto meta_len = read_pod<uint32_t>(is);
  out.meta_json.resize(meta_len);
  is.read(out.meta_json.data(), meta_len);
  const auto n_params = read_pod<uint32_t>(is);
  out.params.reserve(n_params);
  for (uint32_t i = 0; i < n_params; ++i) {
    LoadedParam p;
    const auto name_len = read_pod<uint16_t>(is);
    p.name.resize(name_len);
    is.read(p.name.data(), name_len);
    const auto flags = read_pod<uint8_t>(is);
    const auto ndim = read_pod<uint32_t>(is);
    for (uint32_t d = 0; d < ndim; ++d) p.shape.push_back(read_pod<int32_t>(is));
    const auto n = static_cast<size_t>(ad::numel(p.shape));
    read_doubles(is, p.value, n);
    if (flags & 1) {
      p.has_moments = true;
      read_doubles(is, p.moment1, n);
      read_doubles(is, p.moment2, n);
      p.step_count = read_pod<int64_t>(is);
    }
    out.params.push_back(std::move(p));
  }
  return out;
}

void restore_params(const LoadedCheckpoint& ckpt, ParamSet& set) {
  for (ad::Parameter* p : set.all()) {
    const LoadedParam& lp = ckpt.at(p->name);
    if (lp.shape != p->shape) {
      throw std::runtime_error("checkpoint shape mismatch for " + p->name + ": file has " +
                               ad::shape_str(lp.shape) + ", model has " +
                               ad::shape_str(p->shape));
    }
    p->value = lp.value;
    if (lp.has_moments) {
      p->moment1 = lp.moment1;
      p->moment2 = lp.moment2;
      p->step_count = lp.step_count;
    }
  }
}

uint64_t fnv1a64(std::span<const uint8_t> bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x00000100000001b3ull;
  }
  return h;
}

uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open file for hashing: " + path.string());
  std::vector<uint8_t> buf(1 << 16);
  uint64_t h = 0xcbf29ce484222325ull;
  while (is) {
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    const auto got = static_cast<size_t>(is.gcount());
    for (size_t i = 0; i < got; ++i) {
      h ^= buf[i];
      h *= 0x00000100000001b3ull;
    }
  }
  return h;
}

std::string hex64(uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[value & 0xF];
    value >>= 4;
  }
  return out;
}

}  // namespace mango

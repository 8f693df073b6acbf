#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "gabornet/data.hpp"
#include "gabornet/errors.hpp"
#include "gabornet/model.hpp"
#include "gabornet/rng.hpp"

namespace gabornet {

// Layout (all integers little-endian):
//   "GCNNCKPT" u32 version
//   u64 len, descriptor text
//   u32 count, { name, u32 rank, u64 dims[rank], f32 payload }   tensors
//   u32 count, { name, u32 rank, u64 dims[rank], f32 payload }   Gabor grids (8 per kernel)
//   u32 count, { name, u64 len, u8 payload }                      masks
//   u8 has_optimizer [u32 count, { name, u64 len, f64 payload }]
//   u64 len, RNG state text
//   u64 FNV-1a of everything above
// Names are u32 length plus bytes.

inline constexpr std::string_view kCheckpointMagic = "GCNNCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
struct Checkpoint {
  Model<T> model;
  std::string rng_state;  // empty when not recorded
  std::optional<std::map<std::string, std::vector<double>>> optimizer;
};

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    out_.append(b, sizeof(U));
  }
  void put_bytes(std::string_view s) { out_.append(s); }
  void put_name(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s);
  }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, in_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string_view get_bytes(std::uint64_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_name() { return std::string(get_bytes(get<std::uint32_t>())); }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > in_.size() - pos_) throw FormatError("checkpoint truncated");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

template <class T>
void put_arrays(ByteWriter& w, const std::map<std::string, NamedArray<T>>& arrays) {
  w.put(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, a] : arrays) {
    w.put_name(name);
    w.put(static_cast<std::uint32_t>(a.dims.size()));
    for (auto d : a.dims) w.put(d);
    for (T v : a.data) w.put(static_cast<float>(v));
  }
}

template <class T>
std::map<std::string, NamedArray<T>> get_arrays(ByteReader& r) {
  std::map<std::string, NamedArray<T>> out;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t j = 0; j < count; ++j) {
    std::string name = r.get_name();
    NamedArray<T> a;
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("checkpoint: tensor '" + name + "' has rank " + std::to_string(rank));
    std::uint64_t n = 1;
    for (std::uint32_t q = 0; q < rank; ++q) {
      a.dims.push_back(r.get<std::uint64_t>());
      if (a.dims.back() != 0 && n > (UINT64_MAX / 4) / a.dims.back()) throw FormatError("checkpoint: tensor too large");
      n *= a.dims.back();
    }
    const std::string_view raw = r.get_bytes(n * sizeof(float));
    a.data.resize(n);
    for (std::uint64_t q = 0; q < n; ++q) {
      float f;
      std::memcpy(&f, raw.data() + q * sizeof(float), sizeof(float));
      a.data[q] = static_cast<T>(f);
    }
    if (!out.emplace(std::move(name), std::move(a)).second) throw FormatError("checkpoint: duplicate tensor name");
  }
  return out;
}

}  // namespace detail

template <class T>
std::string encode_checkpoint(const Model<T>& model, const std::string& rng = {},
                              const std::map<std::string, std::vector<double>>* optimizer = nullptr) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put(kCheckpointVersion);
  const std::string desc = model.describe();
  w.put(static_cast<std::uint64_t>(desc.size()));
  w.put_bytes(desc);
  const StateDict<T> sd = model.state();
  detail::put_arrays(w, sd.tensors);
  detail::put_arrays(w, sd.gabor);
  w.put(static_cast<std::uint32_t>(sd.masks.size()));
  for (const auto& [name, m] : sd.masks) {
    w.put_name(name);
    w.put(static_cast<std::uint64_t>(m.size()));
    w.put_bytes(std::string_view(reinterpret_cast<const char*>(m.data()), m.size()));
  }
  w.put(static_cast<std::uint8_t>(optimizer != nullptr));
  if (optimizer != nullptr) {
    w.put(static_cast<std::uint32_t>(optimizer->size()));
    for (const auto& [name, v] : *optimizer) {
      w.put_name(name);
      w.put(static_cast<std::uint64_t>(v.size()));
      for (double x : v) w.put(x);
    }
  }
  w.put(static_cast<std::uint64_t>(rng.size()));
  w.put_bytes(rng);
  w.put(fnv1a64(w.str()));
  return std::move(w.str());
}

template <class T>
Checkpoint<T> decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  detail::ByteReader head(bytes.substr(kCheckpointMagic.size()));
  const auto version = head.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  if (bytes.size() < kCheckpointMagic.size() + 4 + 8) throw FormatError("checkpoint truncated");
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (fnv1a64(body) != stored) throw IntegrityError("checkpoint checksum mismatch");

  detail::ByteReader r(body.substr(kCheckpointMagic.size() + 4));
  Checkpoint<T> ck;
  const auto desc_len = r.get<std::uint64_t>();
  const std::string desc(r.get_bytes(desc_len));
  ck.model = model_from_descriptor<T>(desc);
  StateDict<T> sd;
  sd.tensors = detail::get_arrays<T>(r);
  sd.gabor = detail::get_arrays<T>(r);
  const auto nmask = r.get<std::uint32_t>();
  for (std::uint32_t j = 0; j < nmask; ++j) {
    std::string name = r.get_name();
    const auto len = r.get<std::uint64_t>();
    const std::string_view raw = r.get_bytes(len);
    sd.masks[name].assign(raw.begin(), raw.end());
  }
  ck.model.load_state(sd);
  if (r.get<std::uint8_t>() != 0) {
    std::map<std::string, std::vector<double>> opt;
    const auto n = r.get<std::uint32_t>();
    for (std::uint32_t j = 0; j < n; ++j) {
      std::string name = r.get_name();
      const auto len = r.get<std::uint64_t>();
      if (len > body.size()) throw FormatError("checkpoint: optimizer entry too large");
      std::vector<double> v(len);
      for (auto& x : v) x = r.get<double>();
      opt[name] = std::move(v);
    }
    ck.optimizer = std::move(opt);
  }
  ck.rng_state = std::string(r.get_bytes(r.get<std::uint64_t>()));
  if (!ck.rng_state.empty()) {
    Rng probe;
    std::istringstream is(ck.rng_state);
    if (!(is >> probe)) throw FormatError("checkpoint: malformed RNG state");
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return ck;
}

/// Writes bytes to `path` through a temporary file and an atomic rename.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create '" + path.parent_path().string() + "': " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const std::string& rng = {},
                     const std::map<std::string, std::vector<double>>* optimizer = nullptr) {
  write_file_atomic(path, encode_checkpoint(model, rng, optimizer));
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file_bytes(path));
}

}  // namespace gabornet

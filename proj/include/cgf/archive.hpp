#pragma once

#include <cgf/tensor.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

// Named-tensor container. On-disk layout, all integers little-endian:
//   bytes 0..3   magic "CGFW"
//   bytes 4..7   u32 version (currently 1)
//   bytes 8..15  u64 manifest byte length
//   manifest     one text line per tensor:
//                "name=<n> dtype=<f32|f64> shape=<d0,d1,...> offset=<bytes>\n"
//   blob         raw values, densely packed in manifest order

namespace cgf {

enum class Dtype { F32, F64 };

inline std::size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }
inline const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

inline Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::F32;
  if (s == "f64") return Dtype::F64;
  throw std::runtime_error("archive: unknown dtype '" + s + "'");
}

template <typename Scalar>
constexpr Dtype dtype_of() {
  return sizeof(Scalar) == 4 ? Dtype::F32 : Dtype::F64;
}

struct TensorEntry {
  std::string name;
  Dtype dtype = Dtype::F64;
  std::vector<std::int64_t> shape;
  std::uint64_t byte_offset = 0;

  std::int64_t element_count() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  std::uint64_t byte_size() const {
    return static_cast<std::uint64_t>(element_count()) * dtype_size(dtype);
  }
};

struct WeightArchive {
  std::vector<TensorEntry> manifest;
  std::vector<unsigned char> blob;

  bool has(const std::string& name) const { return find(name) != nullptr; }

  const TensorEntry* find(const std::string& name) const {
    for (const auto& e : manifest) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  template <typename Scalar>
  void add(const std::string& name, std::vector<std::int64_t> shape, const VecX<Scalar>& values) {
    for (char ch : name) {
      const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
                      (ch >= '0' && ch <= '9') || ch == '.' || ch == '_' || ch == '-';
      if (!ok) throw std::runtime_error("archive: illegal character in tensor name '" + name + "'");
    }
    if (has(name)) throw std::runtime_error("archive: duplicate tensor name '" + name + "'");
    TensorEntry e;
    e.name = name;
    e.dtype = dtype_of<Scalar>();
    e.shape = std::move(shape);
    e.byte_offset = blob.size();
    if (e.element_count() != values.size()) {
      throw std::runtime_error("archive: shape of '" + name + "' wants " +
                               std::to_string(e.element_count()) + " values, got " +
                               std::to_string(values.size()));
    }
    const std::size_t bytes = e.byte_size();
    blob.resize(blob.size() + bytes);
    std::memcpy(blob.data() + e.byte_offset, values.data(), bytes);
    manifest.push_back(std::move(e));
  }

  template <typename Scalar>
  VecX<Scalar> get(const std::string& name) const {
    const TensorEntry* e = find(name);
    if (e == nullptr) throw std::runtime_error("archive: missing tensor '" + name + "'");
    if (e->dtype != dtype_of<Scalar>()) {
      throw std::runtime_error("archive: tensor '" + name + "' is " + dtype_name(e->dtype) +
                               ", requested " + dtype_name(dtype_of<Scalar>()));
    }
    VecX<Scalar> out(e->element_count());
    std::memcpy(out.data(), blob.data() + e->byte_offset, e->byte_size());
    return out;
  }

  void validate() const {
    std::unordered_set<std::string> seen;
    std::uint64_t prev_end = 0;
    bool first = true;
    for (const auto& e : manifest) {
      if (!seen.insert(e.name).second) {
        throw std::runtime_error("archive: duplicate tensor name '" + e.name + "'");
      }
      for (auto d : e.shape) {
        if (d < 1) throw std::runtime_error("archive: non-positive dim in '" + e.name + "'");
      }
      if (!first && e.byte_offset < prev_end) {
        throw std::runtime_error("archive: tensor '" + e.name +
                                 "' overlaps or reorders the previous entry");
      }
      if (e.byte_offset + e.byte_size() > blob.size()) {
        throw std::runtime_error("archive: tensor '" + e.name + "' runs past the blob (needs " +
                                 std::to_string(e.byte_offset + e.byte_size()) + " bytes of " +
                                 std::to_string(blob.size()) + ")");
      }
      prev_end = e.byte_offset + e.byte_size();
      first = false;
    }
    if (prev_end != blob.size()) {
      throw std::runtime_error("archive: blob holds " + std::to_string(blob.size()) +
                               " bytes, manifest accounts for " + std::to_string(prev_end));
    }
  }
};

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

inline constexpr std::uint32_t kArchiveVersion = 1;

inline std::string archive_serialize(const WeightArchive& a) {
  a.validate();
  std::string manifest_text;
  for (const auto& e : a.manifest) {
    manifest_text += "name=" + e.name + " dtype=" + dtype_name(e.dtype) + " shape=";
    for (std::size_t i = 0; i < e.shape.size(); ++i) {
      if (i) manifest_text += ",";
      manifest_text += std::to_string(e.shape[i]);
    }
    manifest_text += " offset=" + std::to_string(e.byte_offset) + "\n";
  }
  std::string out = "CGFW";
  detail::put_u32_le(out, kArchiveVersion);
  detail::put_u64_le(out, manifest_text.size());
  out += manifest_text;
  out.append(reinterpret_cast<const char*>(a.blob.data()), a.blob.size());
  return out;
}

inline void archive_write(const WeightArchive& a, const std::string& path) {
  const std::string bytes = archive_serialize(a);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("archive: cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("archive: short write to '" + path + "'");
}

inline WeightArchive archive_deserialize(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 4, "CGFW") != 0) {
    throw std::runtime_error("archive: bad magic, not a CGFW file");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t version = static_cast<std::uint32_t>(detail::read_le(p + 4, 4));
  if (version != kArchiveVersion) {
    throw std::runtime_error("archive: unsupported version " + std::to_string(version));
  }
  const std::uint64_t manifest_len = detail::read_le(p + 8, 8);
  if (16 + manifest_len > bytes.size()) {
    throw std::runtime_error("archive: manifest length " + std::to_string(manifest_len) +
                             " exceeds the file");
  }
  WeightArchive a;
  const std::string manifest_text = bytes.substr(16, manifest_len);
  std::istringstream lines(manifest_text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    TensorEntry e;
    std::istringstream fields(line);
    std::string field;
    bool saw_name = false, saw_dtype = false, saw_shape = false, saw_offset = false;
    while (fields >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw std::runtime_error("archive: malformed manifest line");
      const std::string key = field.substr(0, eq);
      const std::string val = field.substr(eq + 1);
      if (key == "name") {
        e.name = val;
        saw_name = true;
      } else if (key == "dtype") {
        e.dtype = parse_dtype(val);
        saw_dtype = true;
      } else if (key == "shape") {
        std::istringstream dims(val);
        std::string d;
        while (std::getline(dims, d, ',')) e.shape.push_back(std::stoll(d));
        saw_shape = true;
      } else if (key == "offset") {
        e.byte_offset = std::stoull(val);
        saw_offset = true;
      } else {
        throw std::runtime_error("archive: unknown manifest key '" + key + "'");
      }
    }
    if (!saw_name || !saw_dtype || !saw_shape || !saw_offset) {
      throw std::runtime_error("archive: manifest line missing fields: " + line);
    }
    a.manifest.push_back(std::move(e));
  }
  const std::size_t blob_start = 16 + static_cast<std::size_t>(manifest_len);
  a.blob.assign(bytes.begin() + static_cast<std::ptrdiff_t>(blob_start), bytes.end());
  a.validate();
  return a;
}

inline WeightArchive archive_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("archive: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return archive_deserialize(ss.str());
}

}  // namespace cgf

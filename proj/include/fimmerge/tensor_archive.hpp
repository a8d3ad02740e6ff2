#pragma once

// Named f32 tensor maps and their on-disk form.
//
// File layout (safetensors-compatible):
//   u64 little-endian header length N
//   N bytes of UTF-8 JSON: {"<name>": {"dtype": "F32", "shape": [...],
//                                      "data_offsets": [begin, end]}, ...}
//   contiguous little-endian payload
// The writer emits names in lexicographic order, packs payloads in the same
// order and pads the header with spaces to a multiple of 8 bytes.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fimmerge/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

namespace fimmerge {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::int64_t> s, std::vector<float> d)
      : shape(std::move(s)), data(std::move(d)) {}

  static Tensor zeros(std::vector<std::int64_t> s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(static_cast<std::size_t>(shape_numel(t.shape)), 0.0f);
    return t;
  }

  static std::int64_t shape_numel(const std::vector<std::int64_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::int64_t{1},
                           std::multiplies<>());
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_matrix() const { return shape.size() == 2; }
  std::int64_t rows() const { return shape.at(0); }
  std::int64_t cols() const { return shape.at(1); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Ordered (lexicographic) name -> tensor map.
class TensorArchive {
 public:
  using Map = std::map<std::string, Tensor>;

  void insert(const std::string& name, Tensor t) {
    validate_tensor(name, t);
    auto [it, inserted] = entries_.emplace(name, std::move(t));
    if (!inserted) throw ValidationError("duplicate tensor name: " + name);
  }

  void insert_or_assign(const std::string& name, Tensor t) {
    validate_tensor(name, t);
    entries_.insert_or_assign(name, std::move(t));
  }

  const Tensor& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ValidationError("no tensor named " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ValidationError("no tensor named " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
  }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  friend bool operator==(const TensorArchive&, const TensorArchive&) = default;

 private:
  static void validate_tensor(const std::string& name, const Tensor& t) {
    if (name.empty()) throw ValidationError("empty tensor name");
    for (auto d : t.shape) {
      if (d <= 0) {
        throw ValidationError("tensor " + name + " has non-positive dimension in shape " +
                              shape_string(t.shape));
      }
    }
    if (static_cast<std::int64_t>(t.data.size()) != Tensor::shape_numel(t.shape)) {
      throw ValidationError("tensor " + name + ": element count " +
                            std::to_string(t.data.size()) + " does not match shape " +
                            shape_string(t.shape));
    }
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      if (!std::isfinite(t.data[i])) {
        throw ValidationError("tensor " + name + " has a non-finite value at flat index " +
                              std::to_string(i));
      }
    }
  }

  Map entries_;
};

namespace detail {

inline float bf16_to_f32(std::uint16_t v) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(v) << 16);
}

inline float f16_to_f32(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ffu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  throw FormatError("unsupported dtype " + dtype + " (expected F32, F16 or BF16)");
}

}  // namespace detail

// Serialized file bytes for an archive. Deterministic for equal archives.
inline std::string serialize_archive(const TensorArchive& archive) {
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive) {
    const std::uint64_t bytes = t.numel() * sizeof(float);
    header[name] = {{"dtype", "F32"},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string head = header.dump();
  head.append((8 - head.size() % 8) % 8, ' ');

  std::string out;
  out.reserve(8 + head.size() + offset);
  const std::uint64_t n = head.size();
  char len[8];
  std::memcpy(len, &n, 8);
  out.append(len, 8);
  out += head;
  for (const auto& [_, t] : archive) {
    out.append(reinterpret_cast<const char*>(t.data.data()), t.numel() * sizeof(float));
  }
  return out;
}

// Parses file bytes. Half-precision inputs are widened to f32 and noted in
// `notes` when provided.
inline TensorArchive parse_archive(std::string_view bytes,
                                   std::vector<std::string>* notes = nullptr) {
  if (bytes.size() < 8) throw FormatError("archive shorter than its 8-byte length prefix");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (header_len > bytes.size() - 8) {
    throw FormatError("header length " + std::to_string(header_len) +
                      " exceeds file size " + std::to_string(bytes.size()));
  }
  const std::string_view head = bytes.substr(8, header_len);
  const std::string_view payload = bytes.substr(8 + header_len);

  std::set<std::string> seen;
  std::string dup;
  nlohmann::json::parser_callback_t cb = [&](int depth, nlohmann::json::parse_event_t ev,
                                             nlohmann::json& parsed) {
    if (ev == nlohmann::json::parse_event_t::key && depth == 1) {
      const auto key = parsed.get<std::string>();
      if (!seen.insert(key).second && dup.empty()) dup = key;
    }
    return true;
  };
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head.begin(), head.end(), cb);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed archive header: ") + e.what());
  }
  if (!dup.empty()) throw FormatError("duplicate tensor name in header: " + dup);
  if (!header.is_object()) throw FormatError("archive header is not a JSON object");

  struct Range {
    std::uint64_t begin, end;
    std::string name;
  };
  std::vector<Range> ranges;
  TensorArchive archive;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") continue;
    if (!info.is_object() || !info.contains("dtype") || !info.contains("shape") ||
        !info.contains("data_offsets")) {
      throw FormatError("malformed header entry for " + name);
    }
    std::string dtype;
    std::vector<std::int64_t> shape;
    std::vector<std::uint64_t> offsets;
    try {
      dtype = info.at("dtype").get<std::string>();
      shape = info.at("shape").get<std::vector<std::int64_t>>();
      offsets = info.at("data_offsets").get<std::vector<std::uint64_t>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed header entry for " + name + ": " + e.what());
    }
    if (offsets.size() != 2 || offsets[0] > offsets[1]) {
      throw FormatError("bad data_offsets for " + name);
    }
    for (auto d : shape) {
      if (d <= 0) throw FormatError("non-positive dimension in shape of " + name);
    }
    const std::size_t esize = detail::dtype_size(dtype);
    const auto numel = static_cast<std::uint64_t>(Tensor::shape_numel(shape));
    if (offsets[1] - offsets[0] != numel * esize) {
      throw FormatError("shape/byte-length mismatch for " + name + ": shape " +
                        shape_string(shape) + " needs " + std::to_string(numel * esize) +
                        " bytes, header declares " +
                        std::to_string(offsets[1] - offsets[0]));
    }
    if (offsets[1] > payload.size()) {
      throw FormatError("shape/byte-length mismatch for " + name + ": byte range [" +
                        std::to_string(offsets[0]) + "," + std::to_string(offsets[1]) +
                        ") exceeds payload of " + std::to_string(payload.size()) + " bytes");
    }
    ranges.push_back({offsets[0], offsets[1], name});

    std::vector<float> data(numel);
    const char* src = payload.data() + offsets[0];
    if (dtype == "F32") {
      std::memcpy(data.data(), src, numel * 4);
    } else {
      for (std::uint64_t i = 0; i < numel; ++i) {
        std::uint16_t v;
        std::memcpy(&v, src + 2 * i, 2);
        data[i] = dtype == "BF16" ? detail::bf16_to_f32(v) : detail::f16_to_f32(v);
      }
      if (notes) notes->push_back(name + ": converted " + dtype + " to F32");
    }
    for (std::uint64_t i = 0; i < numel; ++i) {
      if (!std::isfinite(data[i])) {
        throw FormatError("non-finite value in " + name + " at flat index " +
                          std::to_string(i));
      }
    }
    archive.insert(name, Tensor(std::move(shape), std::move(data)));
  }

  std::sort(ranges.begin(), ranges.end(),
            [](const Range& a, const Range& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].begin < ranges[i - 1].end) {
      throw FormatError("overlapping byte ranges: " + ranges[i - 1].name + " and " +
                        ranges[i].name);
    }
  }
  return archive;
}

inline TensorArchive load_archive(const std::filesystem::path& path,
                                  std::vector<std::string>* notes = nullptr) {
  return parse_archive(read_file(path), notes);
}

inline void write_archive(const TensorArchive& archive, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_archive(archive));
}

inline std::string archive_digest(const TensorArchive& archive) {
  return digest_hex(serialize_archive(archive));
}

}  // namespace fimmerge

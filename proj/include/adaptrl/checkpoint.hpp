#pragma once

// Binary tensor container, little-endian throughout:
//
//   magic[4]  version:u32  count:u32
//   count x { name_len:u16  name[name_len] (UTF-8)  rank:u8  dims:u32[rank]
//             payload:f64[prod(dims)] }
//
// "AADA" holds network checkpoints, "AADD" holds datasets. Readers parse the
// whole file before returning, so a malformed file never yields a partial set.

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "adaptrl/networks.hpp"
#include "adaptrl/tensor.hpp"

namespace adaptrl {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Magic = std::array<char, 4>;
inline constexpr Magic kCheckpointMagic{'A', 'A', 'D', 'A'};
inline constexpr Magic kDatasetMagic{'A', 'A', 'D', 'D'};
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

inline void put_u(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFU));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  std::uint64_t u(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError("truncated container");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const Magic& magic, const ParameterSet& tensors) {
  std::string out(magic.begin(), magic.end());
  detail::put_u(out, kContainerVersion, 4);
  detail::put_u(out, tensors.size(), 4);
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw FormatError("tensor name too long: " + name);
    if (t.rank() > 0xFF) throw FormatError("tensor rank too large: " + name);
    detail::put_u(out, name.size(), 2);
    out += name;
    detail::put_u(out, t.rank(), 1);
    for (std::size_t d : t.shape()) {
      if (d > 0xFFFFFFFFULL) throw FormatError("dimension exceeds u32: " + name);
      detail::put_u(out, d, 4);
    }
    for (double v : t.data()) detail::put_u(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  return out;
}

inline ParameterSet decode_container(std::string_view bytes, const Magic& magic) {
  detail::Reader in(bytes);
  const auto head = in.bytes(4);
  if (head != std::string_view(magic.data(), 4)) {
    throw FormatError("bad magic: expected " + std::string(magic.data(), 4));
  }
  const auto version = in.u(4);
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version));
  }
  const auto count = in.u(4);
  ParameterSet out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = static_cast<std::size_t>(in.u(2));
    std::string name(in.bytes(name_len));
    const auto rank = static_cast<std::size_t>(in.u(1));
    Shape shape(rank);
    std::size_t elements = 1;
    for (std::size_t& d : shape) {
      d = static_cast<std::size_t>(in.u(4));
      if (d == 0) throw FormatError("zero dimension in tensor " + name);
      elements *= d;
      if (elements > in.remaining() / 8 + 1) throw FormatError("truncated payload for " + name);
    }
    if (in.remaining() / 8 < elements) throw FormatError("truncated payload for " + name);
    std::vector<double> data(elements);
    for (double& v : data) v = std::bit_cast<double>(in.u(8));
    if (out.contains(name)) throw FormatError("duplicate tensor " + name);
    out.insert(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!in.at_end()) throw FormatError("trailing bytes after last tensor");
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

/// Writes to a sibling temporary and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

// ---- metadata packing ----

/// 64-bit integers are stored as two exact 32-bit halves.
inline Tensor pack_u64(std::uint64_t v) {
  return Tensor({2}, {static_cast<double>(v & 0xFFFFFFFFULL), static_cast<double>(v >> 32)});
}
inline std::uint64_t unpack_u64(const Tensor& t) {
  if (t.size() != 2) throw FormatError("malformed 64-bit metadata entry");
  return static_cast<std::uint64_t>(t[0]) | (static_cast<std::uint64_t>(t[1]) << 32);
}

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Files carry one extra entry, kChecksumEntry, holding the 64-bit FNV-1a hash
/// of the container encoding of every other entry. Payload corruption that
/// leaves the structure intact is caught by it.
inline constexpr std::string_view kChecksumEntry = "meta.checksum";

inline void write_container(const std::filesystem::path& path, const Magic& magic,
                            const ParameterSet& tensors) {
  if (tensors.contains(kChecksumEntry)) throw FormatError("reserved tensor name " + std::string(kChecksumEntry));
  ParameterSet sealed = tensors;
  sealed.insert(std::string(kChecksumEntry), pack_u64(fnv1a(encode_container(magic, tensors))));
  write_file_atomic(path, encode_container(magic, sealed));
}

inline ParameterSet read_container(const std::filesystem::path& path, const Magic& magic) {
  ParameterSet p = decode_container(read_file(path), magic);
  if (!p.contains(kChecksumEntry)) throw FormatError(path.string() + " has no checksum entry");
  const std::uint64_t stored = unpack_u64(p.at(kChecksumEntry));
  p.erase(kChecksumEntry);
  if (fnv1a(encode_container(magic, p)) != stored) throw FormatError(path.string() + " fails its checksum");
  return p;
}

// ---- network checkpoints ----

inline void save_checkpoint(const NetworkBundle& b, const std::filesystem::path& path) {
  ParameterSet out = b.params;
  out.insert("meta.action_count", Tensor({1}, {static_cast<double>(b.action_count)}));
  out.insert("meta.seed", pack_u64(b.seed));
  write_container(path, kCheckpointMagic, out);
}

namespace detail {

// Splits a decoded checkpoint into a bundle, checking every present role
// against the architecture for its action count.
inline NetworkBundle bundle_from_container(ParameterSet raw) {
  if (!raw.contains("meta.action_count") || !raw.contains("meta.seed")) {
    throw FormatError("checkpoint lacks metadata");
  }
  NetworkBundle b;
  b.action_count = static_cast<int>(raw.at("meta.action_count").item());
  b.seed = unpack_u64(raw.at("meta.seed"));
  check_action_count(b.action_count);
  raw.erase("meta.action_count");
  raw.erase("meta.seed");
  std::size_t consumed = 0;
  for (Role r : kRoles) {
    const auto layout = role_layout(r, b.action_count);
    std::size_t present = 0;
    for (const ParamSpec& spec : layout) present += raw.contains(spec.name) ? 1 : 0;
    if (present == 0) continue;
    if (present != layout.size()) {
      throw FormatError("checkpoint has an incomplete " + role_prefix(r) + " role");
    }
    for (const ParamSpec& spec : layout) {
      const Tensor& t = raw.at(spec.name);
      if (t.shape() != spec.shape) {
        throw ShapeError("checkpoint tensor " + spec.name + " has shape " +
                         shape_string(t.shape()) + ", architecture expects " +
                         shape_string(spec.shape));
      }
      b.params.insert(spec.name, t);
    }
    b.roles = b.roles | r;
    consumed += layout.size();
  }
  if (consumed != raw.size()) throw FormatError("checkpoint contains unknown tensors");
  return b;
}

}  // namespace detail

inline NetworkBundle load_checkpoint(const std::filesystem::path& path) {
  return detail::bundle_from_container(read_container(path, kCheckpointMagic));
}

/// Overwrites the roles present in the checkpoint; other roles of `into` keep
/// their current values. Roles missing from `into` are added.
inline NetworkBundle load_checkpoint_into(const std::filesystem::path& path, NetworkBundle into) {
  const NetworkBundle loaded = load_checkpoint(path);
  for (Role r : kRoles) {
    if (!loaded.has(r)) continue;
    if ((r == Role::Policy || r == Role::Value) && loaded.action_count != into.action_count) {
      throw ShapeError("checkpoint heads are for " + std::to_string(loaded.action_count) +
                       " actions, requested architecture has " +
                       std::to_string(into.action_count));
    }
    ensure_role(into, r);
    for (const ParamSpec& spec : role_layout(r, into.action_count))
      into.params.assign(spec.name, loaded.params.at(spec.name));
  }
  return into;
}

}  // namespace adaptrl

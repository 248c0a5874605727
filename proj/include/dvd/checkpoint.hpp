#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvd/tensor.hpp"

namespace dvd {

class FormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, Truncated, Mismatch, Io };
  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint8_t kDtypeF64 = 1;

// DDF1 layout, all integers little-endian:
//   "DDF1"
//   u32 tensor_count
//   per tensor: u32 name_len, name bytes, u8 dtype (1 = f64), u32 ndim, u64 dims[ndim]
//   payloads: f64 values of each tensor in manifest order
std::vector<std::uint8_t> encode_checkpoint(const ParamList& params);
ParamList decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParamList& params);
ParamList load_checkpoint(const std::filesystem::path& path);

/// Copies values from `source` into the identically named tensors of
/// `target`. Every target must be present with a matching shape.
void assign_params(const ParamList& target, const ParamList& source);

namespace bytes {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f64(std::vector<std::uint8_t>& out, double v);

/// Bounds-checked little-endian reader; overruns raise FormatError::Truncated.
class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& data) : data_(data) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str(std::size_t n);
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  const std::vector<std::uint8_t>& data_;
  std::size_t pos_ = 0;
};

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a(const std::vector<std::uint8_t>& data);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& data);

}  // namespace bytes

}  // namespace dvd

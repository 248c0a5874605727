#include "dvd/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <map>

namespace dvd {

namespace bytes {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void Reader::need(std::size_t n) const {
  if (n > data_.size() - pos_) throw FormatError(FormatError::Kind::Truncated, "truncated payload");
}

std::uint8_t Reader::u8() {
  need(1);
  return data_[pos_++];
}

std::uint32_t Reader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
  return v;
}

std::uint64_t Reader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
  return v;
}

double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::str(std::size_t n) {
  need(n);
  std::string s(data_.begin() + static_cast<std::ptrdiff_t>(pos_), data_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
  pos_ += n;
  return s;
}

std::uint64_t fnv1a(const std::vector<std::uint8_t>& data) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto b : data) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw FormatError(FormatError::Kind::Io, "write failed for " + path.string());
}

}  // namespace bytes

std::vector<std::uint8_t> encode_checkpoint(const ParamList& params) {
  std::vector<std::uint8_t> out{'D', 'D', 'F', '1'};
  bytes::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    bytes::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    bytes::put_u8(out, kDtypeF64);
    bytes::put_u32(out, static_cast<std::uint32_t>(p.value.dim()));
    for (auto d : p.value.shape()) bytes::put_u64(out, d);
  }
  for (const auto& p : params) {
    for (double v : p.value.data()) bytes::put_f64(out, v);
  }
  return out;
}

ParamList decode_checkpoint(const std::vector<std::uint8_t>& data) {
  bytes::Reader r(data);
  if (data.size() < 4 || r.str(4) != "DDF1") throw FormatError(FormatError::Kind::BadMagic, "bad magic: not a DDF1 checkpoint");
  const std::uint32_t count = r.u32();
  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.u32());
    if (r.u8() != kDtypeF64) throw FormatError(FormatError::Kind::Mismatch, "unsupported dtype for tensor " + e.name);
    const std::uint32_t ndim = r.u32();
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::uint64_t ext = r.u64();
      if (ext == 0) throw FormatError(FormatError::Kind::Mismatch, "zero extent in tensor " + e.name);
      e.shape.push_back(static_cast<std::size_t>(ext));
    }
    manifest.push_back(std::move(e));
  }
  ParamList out;
  for (auto& e : manifest) {
    std::vector<double> values(numel_of(e.shape));
    for (auto& v : values) v = r.f64();
    out.push_back({e.name, Tensor(e.shape, std::move(values))});
  }
  if (r.remaining() != 0) throw FormatError(FormatError::Kind::Mismatch, "trailing bytes after checkpoint payload");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParamList& params) {
  bytes::write_file(path, encode_checkpoint(params));
}

ParamList load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(bytes::read_file(path)); }

void assign_params(const ParamList& target, const ParamList& source) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& p : source) by_name[p.name] = &p.value;
  for (auto p : target) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError(FormatError::Kind::Mismatch, "checkpoint lacks tensor " + p.name);
    if (it->second->shape() != p.value.shape()) {
      throw FormatError(FormatError::Kind::Mismatch, "shape mismatch for tensor " + p.name + ": " +
                                                         shape_str(it->second->shape()) + " vs " +
                                                         shape_str(p.value.shape()));
    }
    auto dst = p.value.data_mut();
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace dvd

#pragma once

#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "fbdiff/io.hpp"
#include "fbdiff/optim.hpp"
#include "fbdiff/tensor.hpp"

namespace fbdiff {

// FBCK checkpoint layout (little-endian):
//   magic "FBCK" | version u32 = 1 | config length u32 | UTF-8 JSON config |
//   tensor count u32 | per tensor:
//     name length u16 | name | ndim u8 | dims u32 x ndim | f32 payload.
// Writing follows parameter registration order, so rewriting a loaded
// checkpoint reproduces it byte for byte.

struct Checkpoint {
  nlohmann::json config;
  std::vector<std::string> names;
  std::vector<Tensor<float>> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return &tensors[i];
    return nullptr;
  }
};

inline void write_checkpoint(const std::string& path, const nlohmann::json& config,
                             const ParamList<float>& params) {
  std::string buf = "FBCK";
  detail::put_u32(buf, 1);
  const std::string cfg = config.dump();
  detail::put_u32(buf, static_cast<uint32_t>(cfg.size()));
  buf += cfg;
  detail::put_u32(buf, static_cast<uint32_t>(params.size()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names[i];
    const Tensor<float>& t = *params.tensors[i];
    require(name.size() <= 0xFFFF, ErrorCode::InvalidArgument, "tensor name too long");
    std::string rec;
    rec.push_back(static_cast<char>(name.size() & 0xFF));
    rec.push_back(static_cast<char>((name.size() >> 8) & 0xFF));
    rec += name;
    rec.push_back(static_cast<char>(t.ndim()));
    for (size_t d = 0; d < t.ndim(); ++d) detail::put_u32(rec, static_cast<uint32_t>(t.dim(d)));
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
    out.write(reinterpret_cast<const char*>(t.ptr()), t.numel() * 4);
  }
  if (!out) throw Error(ErrorCode::IoFailure, "short write: " + path);
}

namespace detail {

class ByteReader {
 public:
  ByteReader(std::ifstream& in, int64_t size) : in_(in), size_(size) {}

  int64_t offset() const { return offset_; }

  void read(void* dst, int64_t count, const char* what) {
    if (offset_ + count > size_)
      throw Error(ErrorCode::TruncatedPayload,
                  std::string("unexpected end of file while reading ") + what, offset_);
    in_.read(reinterpret_cast<char*>(dst), count);
    if (!in_) throw Error(ErrorCode::IoFailure, std::string("read failed for ") + what, offset_);
    offset_ += count;
  }

  uint32_t read_u32(const char* what) {
    unsigned char b[4];
    read(b, 4, what);
    return get_u32(b);
  }

  uint16_t read_u16(const char* what) {
    unsigned char b[2];
    read(b, 2, what);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
  }

  uint8_t read_u8(const char* what) {
    unsigned char b;
    read(&b, 1, what);
    return b;
  }

  int64_t remaining() const { return size_ - offset_; }

 private:
  std::ifstream& in_;
  int64_t size_;
  int64_t offset_ = 0;
};

}  // namespace detail

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open checkpoint: " + path);
  const int64_t file_size = static_cast<int64_t>(in.tellg());
  in.seekg(0);
  detail::ByteReader r(in, file_size);

  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, "FBCK", 4) != 0)
    throw Error(ErrorCode::BadMagic, "expected magic \"FBCK\"", 0);
  const uint32_t version = r.read_u32("version");
  if (version != 1)
    throw Error(ErrorCode::BadVersion, "unsupported version " + std::to_string(version), 4);

  const uint32_t cfg_len = r.read_u32("config length");
  if (cfg_len > static_cast<uint64_t>(r.remaining()))
    throw Error(ErrorCode::TruncatedPayload, "config block exceeds file size", r.offset());
  std::string cfg(cfg_len, '\0');
  r.read(cfg.data(), cfg_len, "config");

  Checkpoint ck;
  try {
    ck.config = cfg_len ? nlohmann::json::parse(cfg) : nlohmann::json::object();
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::BadCheckpoint, std::string("config parse error: ") + e.what(), 12);
  }

  const uint32_t count = r.read_u32("tensor count");
  if (count > 100000)
    throw Error(ErrorCode::DimOverflow, "implausible tensor count " + std::to_string(count),
                r.offset() - 4);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = r.read_u16("name length");
    std::string name(name_len, '\0');
    r.read(name.data(), name_len, "name");
    const uint8_t ndim = r.read_u8("ndim");
    if (ndim == 0 || ndim > 8)
      throw Error(ErrorCode::DimOverflow, "bad tensor rank " + std::to_string(ndim),
                  r.offset() - 1);
    Shape shape(ndim);
    uint64_t total = 1;
    for (int d = 0; d < ndim; ++d) {
      const uint32_t e = r.read_u32("dim");
      if (e == 0) throw Error(ErrorCode::DimOverflow, "zero extent", r.offset() - 4);
      if (__builtin_mul_overflow(total, uint64_t(e), &total))
        throw Error(ErrorCode::DimOverflow, "dimension product overflows", r.offset() - 4);
      shape[d] = e;
    }
    if (total > static_cast<uint64_t>(detail::kMaxElements) ||
        total * 4 > static_cast<uint64_t>(r.remaining()))
      throw Error(ErrorCode::TruncatedPayload,
                  "tensor \"" + name + "\" declares " + std::to_string(total) +
                      " values but the file is too short",
                  r.offset());
    Tensor<float> t(shape);
    r.read(t.ptr(), int64_t(total) * 4, "tensor payload");
    ck.names.push_back(std::move(name));
    ck.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0)
    throw Error(ErrorCode::TrailingBytes,
                std::to_string(r.remaining()) + " bytes after the last tensor", r.offset());
  return ck;
}

/// Copies checkpoint values into a registered parameter list, matching by
/// name and shape. Any mismatch names the offending tensor.
inline void load_params(const Checkpoint& ck, ParamList<float>& params) {
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names[i];
    const Tensor<float>* src = ck.find(name);
    require(src != nullptr, ErrorCode::BadCheckpoint,
            "checkpoint is missing tensor \"" + name + "\"");
    require(src->shape() == params.tensors[i]->shape(), ErrorCode::BadCheckpoint,
            "checkpoint tensor \"" + name + "\" has shape " + shape_str(src->shape()) +
                ", model expects " + shape_str(params.tensors[i]->shape()));
    params.tensors[i]->vals() = src->vals();
  }
}

}  // namespace fbdiff

#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "fbdiff/tensor.hpp"

namespace fbdiff {

// ---------------------------------------------------------------------------
// FBSQ sequence file
//
// Little-endian layout:
//   magic "FBSQ" | version u32 = 1 | N u32 | C u32 | H u32 | W u32 |
//   dtype u8 = 0 (f32) | 7 reserved zero bytes | payload N*C*H*W f32,
//   row-major (n, then c, h, w).
// ---------------------------------------------------------------------------

namespace detail {

constexpr int64_t kFbsqHeaderBytes = 32;
constexpr int64_t kMaxElements = int64_t(1) << 28;  // 1 GiB of f32, far above any real case

inline void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline uint32_t get_u32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

inline void write_file(const std::string& path, const std::string& header, const float* payload,
                       int64_t count) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open for writing: " + path);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  static_assert(sizeof(float) == 4);
  out.write(reinterpret_cast<const char*>(payload), count * 4);
  if (!out) throw Error(ErrorCode::IoFailure, "short write: " + path);
}

}  // namespace detail

inline void write_fbsq(const std::string& path, const Tensor<float>& frames) {
  require(frames.ndim() == 4, ErrorCode::ShapeMismatch,
          "write_fbsq: frames must be [N,C,H,W], got " + shape_str(frames.shape()));
  std::string header = "FBSQ";
  detail::put_u32(header, 1);
  for (int i = 0; i < 4; ++i) detail::put_u32(header, static_cast<uint32_t>(frames.dim(i)));
  header.push_back('\0');                     // dtype 0 = f32
  header.append(7, '\0');                     // reserved
  detail::write_file(path, header, frames.ptr(), frames.numel());
}

inline Tensor<float> read_fbsq(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open for reading: " + path);
  const int64_t file_size = static_cast<int64_t>(in.tellg());
  in.seekg(0);
  if (file_size < detail::kFbsqHeaderBytes)
    throw Error(ErrorCode::TruncatedPayload, "file shorter than the 32-byte header", file_size);

  unsigned char hdr[detail::kFbsqHeaderBytes];
  in.read(reinterpret_cast<char*>(hdr), detail::kFbsqHeaderBytes);
  if (std::memcmp(hdr, "FBSQ", 4) != 0)
    throw Error(ErrorCode::BadMagic, "expected magic \"FBSQ\"", 0);
  const uint32_t version = detail::get_u32(hdr + 4);
  if (version != 1)
    throw Error(ErrorCode::BadVersion, "unsupported version " + std::to_string(version), 4);
  uint64_t dims[4];
  for (int i = 0; i < 4; ++i) dims[i] = detail::get_u32(hdr + 8 + 4 * i);
  if (hdr[24] != 0)
    throw Error(ErrorCode::BadVersion, "unsupported dtype " + std::to_string(hdr[24]), 24);
  for (int i = 0; i < 7; ++i)
    if (hdr[25 + i] != 0)
      throw Error(ErrorCode::BadVersion, "reserved bytes must be zero", 25 + i);

  uint64_t count = 1;
  for (int i = 0; i < 4; ++i) {
    if (dims[i] == 0)
      throw Error(ErrorCode::DimOverflow, "zero extent in header", 8 + 4 * i);
    if (__builtin_mul_overflow(count, dims[i], &count))
      throw Error(ErrorCode::DimOverflow, "dimension product overflows", 8 + 4 * i);
  }
  const int64_t declared_bytes_avail = file_size - detail::kFbsqHeaderBytes;
  // size mismatch is diagnosed before any allocation
  if (count > static_cast<uint64_t>(declared_bytes_avail) / 4)
    throw Error(ErrorCode::TruncatedPayload,
                "header declares " + std::to_string(count) + " f32 values but only " +
                    std::to_string(declared_bytes_avail) + " payload bytes are present",
                file_size);
  if (count * 4 < static_cast<uint64_t>(declared_bytes_avail))
    throw Error(ErrorCode::TrailingBytes,
                "payload longer than the header declares", detail::kFbsqHeaderBytes + int64_t(count) * 4);
  if (count > static_cast<uint64_t>(detail::kMaxElements))
    throw Error(ErrorCode::DimOverflow, "element count exceeds the sanity cap", 8);

  Tensor<float> out({int64_t(dims[0]), int64_t(dims[1]), int64_t(dims[2]), int64_t(dims[3])});
  in.read(reinterpret_cast<char*>(out.ptr()), static_cast<std::streamsize>(count * 4));
  if (!in)
    throw Error(ErrorCode::TruncatedPayload, "payload read failed", detail::kFbsqHeaderBytes);
  return out;
}

// ---------------------------------------------------------------------------
// PGM export (P5, maxval 255), for human inspection of basis maps
// ---------------------------------------------------------------------------

/// Writes a [H,W] grid of values in [0,1] as a binary PGM.
inline void write_pgm(const std::string& path, const std::vector<float>& img, int64_t H,
                      int64_t W) {
  require(static_cast<int64_t>(img.size()) == H * W, ErrorCode::ShapeMismatch,
          "write_pgm: size mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open for writing: " + path);
  out << "P5\n" << W << " " << H << "\n255\n";
  std::string bytes(H * W, '\0');
  for (int64_t i = 0; i < H * W; ++i) {
    const float v = std::min(1.0f, std::max(0.0f, img[i]));
    bytes[i] = static_cast<char>(std::lround(v * 255.0f));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoFailure, "short write: " + path);
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string case_id;
  std::string path;  // relative to the manifest file
  std::string split; // train | val | test
};

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries)
    arr.push_back({{"case_id", e.case_id}, {"path", e.path}, {"split", e.split}});
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open for writing: " + path);
  out << arr.dump(2) << "\n";
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open manifest: " + path);
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::BadConfig, std::string("manifest parse error: ") + e.what());
  }
  require(arr.is_array(), ErrorCode::BadConfig, "manifest must be a JSON array");
  std::vector<ManifestEntry> out;
  for (const auto& item : arr) {
    require(item.contains("case_id") && item.contains("path") && item.contains("split"),
            ErrorCode::BadConfig, "manifest entry missing case_id/path/split");
    out.push_back({item["case_id"].get<std::string>(), item["path"].get<std::string>(),
                   item["split"].get<std::string>()});
  }
  return out;
}

/// Resolves a manifest-relative path.
inline std::string resolve_manifest_path(const std::string& manifest_path,
                                         const std::string& rel) {
  return (std::filesystem::path(manifest_path).parent_path() / rel).string();
}

}  // namespace fbdiff

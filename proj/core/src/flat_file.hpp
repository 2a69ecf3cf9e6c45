#pragma once

// Versioned flat-array container used for model and agent checkpoints.
//
//   offset 0   4 bytes  magic "FRFA"
//          4   u32 LE   container version (1)
//          8   u64 LE   header length H
//         16   H bytes  UTF-8 JSON header
//       16+H   u64 LE   value count V
//       24+H   V x f64 LE values
//
// The header always carries "format": "fedrank-flat", "version": 1 and a
// "sections" array of {name, offset, length} indexing into the values.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace fedrank::detail {

inline constexpr std::uint32_t kFlatVersion = 1;

struct FlatFile {
  nlohmann::json header;
  std::vector<double> values;

  std::span<const double> section(const std::string& name) const;
};

using FlatSection = std::pair<std::string, std::span<const double>>;

void write_flat_file(const std::filesystem::path& path, nlohmann::json header,
                     const std::vector<FlatSection>& sections);
FlatFile read_flat_file(const std::filesystem::path& path);

void put_u32(std::vector<unsigned char>& out, std::uint32_t v);
void put_u64(std::vector<unsigned char>& out, std::uint64_t v);
void put_f64(std::vector<unsigned char>& out, double v);

/// Bounds-checked little-endian reader; errors carry the byte offset.
class ByteReader {
 public:
  ByteReader(std::vector<unsigned char> bytes, std::string source);

  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  unsigned char u8();
  std::string str(std::size_t n);
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n);

  std::vector<unsigned char> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      const std::vector<unsigned char>& bytes);

}  // namespace fedrank::detail

#include "flat_file.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "fedrank/errors.hpp"

namespace fedrank::detail {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f64(std::vector<unsigned char>& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

ByteReader::ByteReader(std::vector<unsigned char> bytes, std::string source)
    : bytes_(std::move(bytes)), source_(std::move(source)) {}

void ByteReader::need(std::size_t n) {
  if (pos_ + n > bytes_.size()) {
    throw ParseError(source_ + ": unexpected end of data at byte " +
                     std::to_string(pos_));
  }
}

unsigned char ByteReader::u8() {
  need(1);
  return bytes_[pos_++];
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
  pos_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::str(std::size_t n) {
  need(n);
  std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
  pos_ += n;
  return s;
}

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path,
                      const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

std::span<const double> FlatFile::section(const std::string& name) const {
  for (const auto& s : header.at("sections")) {
    if (s.at("name") == name) {
      const auto offset = s.at("offset").get<std::size_t>();
      const auto length = s.at("length").get<std::size_t>();
      if (offset + length > values.size()) {
        throw ParseError("section " + name + " exceeds value array");
      }
      return {values.data() + offset, length};
    }
  }
  throw ParseError("missing section " + name);
}

void write_flat_file(const std::filesystem::path& path, nlohmann::json header,
                     const std::vector<FlatSection>& sections) {
  header["format"] = "fedrank-flat";
  header["version"] = kFlatVersion;
  auto table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, values] : sections) {
    table.push_back({{"name", name}, {"offset", offset}, {"length", values.size()}});
    offset += values.size();
  }
  header["sections"] = std::move(table);
  const std::string text = header.dump();

  std::vector<unsigned char> out{'F', 'R', 'F', 'A'};
  put_u32(out, kFlatVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  put_u64(out, offset);
  for (const auto& [name, values] : sections) {
    for (double v : values) put_f64(out, v);
  }
  write_file_bytes(path, out);
}

FlatFile read_flat_file(const std::filesystem::path& path) {
  ByteReader in(read_file_bytes(path), path.string());
  if (in.str(4) != "FRFA") {
    throw ParseError(path.string() + ": bad magic at byte 0");
  }
  const auto version = in.u32();
  if (version != kFlatVersion) {
    throw ParseError(path.string() + ": unsupported version " +
                     std::to_string(version) + " at byte 4");
  }
  const auto header_len = in.u64();
  const auto header_at = in.offset();
  FlatFile file;
  try {
    file.header = nlohmann::json::parse(in.str(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": bad JSON header at byte " +
                     std::to_string(header_at + e.byte) + ": " + e.what());
  }
  const auto count = in.u64();
  file.values.resize(count);
  for (auto& v : file.values) v = in.f64();
  if (!in.at_end()) {
    throw ParseError(path.string() + ": trailing bytes at byte " +
                     std::to_string(in.offset()));
  }
  return file;
}

}  // namespace fedrank::detail

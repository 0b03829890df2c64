#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fvla/errors.hpp"
#include "fvla/rng.hpp"

namespace fvla {

// ---------------------------------------------------------------------------
// Little-endian binary buffers. All on-disk formats are byte-defined (LE)
// so that content hashes are stable across platforms.
// ---------------------------------------------------------------------------

class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16le(uint16_t v);
  void u32le(uint32_t v);
  void u64le(uint64_t v);
  void f32le(float v);
  void f64le(double v);
  void bytes(const void* p, size_t n);
  void str(const std::string& s) { bytes(s.data(), s.size()); }

  const std::string& buffer() const { return buf_; }
  void write_file(const std::filesystem::path& path) const;

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}
  static ByteReader from_file(const std::filesystem::path& path);

  uint8_t u8();
  uint16_t u16le();
  uint32_t u32le();
  uint64_t u64le();
  float f32le();
  double f64le();
  std::string str(size_t n);
  void raw(void* out, size_t n);

  size_t offset() const { return pos_; }
  size_t size() const { return data_.size(); }
  size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(size_t n) const;
  std::string data_;
  size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Flat key = value text with [section] headers. Used for configs, run
// manifests and episode manifests. '#' starts a comment.
// ---------------------------------------------------------------------------

class KvText {
 public:
  KvText() = default;
  static KvText parse(const std::string& text);
  static KvText load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  void set_int(const std::string& key, long long v);
  void set_double(const std::string& key, double v);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key) const;
  long long get_int_or(const std::string& key, long long fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;

  // Keys are emitted sorted; "sec.key" renders under "[sec]".
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

  const std::map<std::string, std::string>& all() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// Round-trip-exact decimal rendering of a double (shortest %.17g form).
std::string format_double(double v);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// FNV-1a over the file's bytes, as 16 hex chars.
std::string hash_file_hex(const std::filesystem::path& path);
std::string hash_bytes_hex(const std::string& bytes);

}  // namespace fvla

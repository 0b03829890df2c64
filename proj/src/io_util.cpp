#include "fvla/io_util.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace fvla {

void ByteWriter::u16le(uint16_t v) {
  u8(static_cast<uint8_t>(v & 0xff));
  u8(static_cast<uint8_t>(v >> 8));
}

void ByteWriter::u32le(uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void ByteWriter::u64le(uint64_t v) {
  for (int i = 0; i < 8; ++i) u8(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void ByteWriter::f32le(float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  u32le(bits);
}

void ByteWriter::f64le(double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  u64le(bits);
}

void ByteWriter::bytes(const void* p, size_t n) {
  buf_.append(static_cast<const char*>(p), n);
}

void ByteWriter::write_file(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw DataError("short write: " + path.string());
}

ByteReader ByteReader::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ByteReader(ss.str());
}

void ByteReader::need(size_t n) const {
  if (pos_ + n > data_.size()) {
    throw DataError("truncated input at byte offset " + std::to_string(pos_) +
                    ": expected " + std::to_string(n) + " more bytes, have " +
                    std::to_string(data_.size() - pos_));
  }
}

uint8_t ByteReader::u8() {
  need(1);
  return static_cast<uint8_t>(data_[pos_++]);
}

uint16_t ByteReader::u16le() {
  need(2);
  uint16_t v = 0;
  for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<uint8_t>(data_[pos_ + i])) << (8 * i);
  pos_ += 2;
  return v;
}

uint32_t ByteReader::u32le() {
  need(4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(data_[pos_ + i])) << (8 * i);
  pos_ += 4;
  return v;
}

uint64_t ByteReader::u64le() {
  need(8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(data_[pos_ + i])) << (8 * i);
  pos_ += 8;
  return v;
}

float ByteReader::f32le() {
  uint32_t bits = u32le();
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

double ByteReader::f64le() {
  uint64_t bits = u64le();
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

std::string ByteReader::str(size_t n) {
  need(n);
  std::string s = data_.substr(pos_, n);
  pos_ += n;
  return s;
}

void ByteReader::raw(void* out, size_t n) {
  need(n);
  std::memcpy(out, data_.data() + pos_, n);
  pos_ += n;
}

// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvText KvText::parse(const std::string& text) {
  KvText kv;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("malformed section at line " + std::to_string(lineno) + ": " + t);
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value at line " + std::to_string(lineno) + ": " + t);
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("empty key at line " + std::to_string(lineno));
    if (!section.empty()) key = section + "." + key;
    kv.values_[key] = val;
  }
  return kv;
}

KvText KvText::load(const std::filesystem::path& path) {
  return parse(read_text_file(path));
}

void KvText::set(const std::string& key, const std::string& value) { values_[key] = value; }
void KvText::set_int(const std::string& key, long long v) { values_[key] = std::to_string(v); }
void KvText::set_double(const std::string& key, double v) { values_[key] = format_double(v); }

const std::string& KvText::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing key: " + key);
  return it->second;
}

std::string KvText::get_or(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

long long KvText::get_int(const std::string& key) const {
  const std::string& v = get(key);
  try {
    return std::stoll(v);
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " is not an integer: " + v);
  }
}

long long KvText::get_int_or(const std::string& key, long long fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double KvText::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    return std::stod(v);
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " is not a number: " + v);
  }
}

double KvText::get_double_or(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

std::string KvText::serialize() const {
  // std::map keeps keys sorted, which groups section prefixes together.
  std::ostringstream out;
  std::string section;
  for (const auto& [key, value] : values_) {
    size_t dot = key.find('.');
    std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
    std::string bare = dot == std::string::npos ? key : key.substr(dot + 1);
    if (sec != section) {
      section = sec;
      out << "[" << section << "]\n";
    }
    out << bare << " = " << value << "\n";
  }
  return out.str();
}

void KvText::save(const std::filesystem::path& path) const {
  write_text_file(path, serialize());
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  double back = std::strtod(buf, nullptr);
  if (back == v) {
    // Try shorter representations that still round-trip.
    for (int prec = 1; prec < 17; ++prec) {
      char trial[40];
      std::snprintf(trial, sizeof(trial), "%.*g", prec, v);
      if (std::strtod(trial, nullptr) == v) return trial;
    }
  }
  return buf;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw DataError("short write: " + path.string());
}

std::string hash_bytes_hex(const std::string& bytes) {
  uint64_t h = fnv1a(bytes.data(), bytes.size());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string hash_file_hex(const std::filesystem::path& path) {
  return hash_bytes_hex(read_text_file(path));
}

}  // namespace fvla

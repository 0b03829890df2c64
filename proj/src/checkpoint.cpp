#include "fvla/checkpoint.hpp"

#include "fvla/io_util.hpp"

namespace fvla {

void write_checkpoint(const std::filesystem::path& path, const std::vector<ParamRecord>& records) {
  ByteWriter w;
  w.str("FVLA");
  w.u32le(kCheckpointVersion);
  for (const auto& rec : records) {
    if (rec.name.size() > 0xffff) throw DataError("parameter name too long: " + rec.name);
    if (rec.shape.size() > 0xff) throw DataError("parameter rank too large: " + rec.name);
    w.u16le(static_cast<uint16_t>(rec.name.size()));
    w.str(rec.name);
    w.u8(static_cast<uint8_t>(rec.shape.size()));
    long long numel = 1;
    for (int e : rec.shape) {
      w.u32le(static_cast<uint32_t>(e));
      numel *= e;
    }
    if (numel != static_cast<long long>(rec.values.size())) {
      throw DataError("checkpoint record '" + rec.name + "': shape/value count mismatch");
    }
    for (double v : rec.values) w.f64le(v);
  }
  w.write_file(path);
}

std::vector<ParamRecord> read_checkpoint(const std::filesystem::path& path) {
  ByteReader r = ByteReader::from_file(path);
  if (r.size() < 8) throw DataError("checkpoint too short: " + path.string());
  std::string magic = r.str(4);
  if (magic != "FVLA") {
    throw DataError("bad checkpoint magic at byte offset 0 in " + path.string());
  }
  uint32_t version = r.u32le();
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " at byte offset 4");
  }
  std::vector<ParamRecord> records;
  while (!r.at_end()) {
    ParamRecord rec;
    uint16_t name_len = r.u16le();
    rec.name = r.str(name_len);
    uint8_t rank = r.u8();
    long long numel = 1;
    for (int i = 0; i < rank; ++i) {
      uint32_t e = r.u32le();
      if (e == 0) throw DataError("zero extent in record '" + rec.name + "'");
      rec.shape.push_back(static_cast<int>(e));
      numel *= e;
    }
    rec.values.resize(numel);
    for (long long i = 0; i < numel; ++i) rec.values[i] = r.f64le();
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace fvla

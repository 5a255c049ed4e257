#include "elf/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace elf {

namespace {

constexpr char kMagic[4] = {'E', 'L', 'F', '1'};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw IoError("checkpoint: corrupt (truncated)");
  }
  std::uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, data.epoch);
  put_u32(out, static_cast<std::uint32_t>(data.tensors.size()));
  for (const auto& [name, tensor] : data.tensors) {
    require(name.size() <= 0xFFFF, "checkpoint: tensor name too long");
    require(tensor.rank() <= 0xFF, "checkpoint: tensor rank too large");
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<std::uint8_t>(tensor.rank()));
    for (Index d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    out.push_back(0);  // dtype tag: f32
    const float* v = tensor.data();
    for (Index i = 0; i < tensor.size(); ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, &v[i], 4);
      put_u32(out, bits);
    }
  }
  put_u32(out, crc32(out.data(), out.size()));
  return out;
}

CheckpointData decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw IoError("checkpoint: not a checkpoint (bad magic)");
  if (bytes.size() < 8) throw IoError("checkpoint: corrupt (truncated)");
  const std::uint32_t stored_crc = [&] {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
    return v;
  }();
  if (crc32(bytes.data(), bytes.size() - 4) != stored_crc)
    throw IoError("checkpoint: corrupt (CRC mismatch)");

  Reader r{bytes};
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unknown format version " + std::to_string(version));
  CheckpointData data;
  data.epoch = r.u32();
  const std::uint32_t count = r.u32();
  data.tensors.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = r.u16();
    std::string name = r.str(name_len);
    const int rank = r.u8();
    Shape shape(static_cast<std::size_t>(rank));
    for (int d = 0; d < rank; ++d) shape[static_cast<std::size_t>(d)] = r.u32();
    const std::uint8_t dtype = r.u8();
    if (dtype != 0) throw IoError("checkpoint: unknown dtype tag " + std::to_string(dtype));
    const Index n = numel(shape);
    std::vector<float> values(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      const std::uint32_t bits = r.u32();
      std::memcpy(&values[static_cast<std::size_t>(i)], &bits, 4);
    }
    data.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  if (r.pos != bytes.size() - 4) throw IoError("checkpoint: corrupt (trailing bytes)");
  return data;
}

void write_checkpoint_file(const std::string& path, const CheckpointData& data) {
  const std::vector<std::uint8_t> bytes = encode_checkpoint(data);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("checkpoint: write failed for '" + path + "'");
}

CheckpointData read_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace elf

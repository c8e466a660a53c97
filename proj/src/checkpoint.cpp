#include "rsoup/checkpoint.hpp"

#include <zlib.h>

#include <cstring>

#include "binary_io.hpp"

namespace rsoup {

namespace {

constexpr char kMagic[8] = {'S', 'O', 'U', 'P', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kDtypeF32 = 0;

std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.str(ck.arch.id());
  w.u64(ck.params.schema_hash());
  w.u32(static_cast<std::uint32_t>(ck.lineage.size()));
  for (const auto& r : ck.lineage) {
    w.str(r.op);
    w.u32(static_cast<std::uint32_t>(r.threats.size()));
    for (const auto& t : r.threats) {
      w.str(norm_name(t.norm));
      w.f64(t.epsilon);
    }
    w.f64(r.epochs);
    w.u32(static_cast<std::uint32_t>(r.soup_weights.size()));
    for (double v : r.soup_weights) w.f64(v);
  }
  w.f64(ck.val_clean_acc);
  w.f64(ck.val_robust_acc);
  w.u64(ck.seed);
  w.u32(static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& e : ck.params.entries()) {
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.u64(d);
    w.u8(kDtypeF32);
    for (float v : e.tensor.data()) w.f32(v);
  }
  std::vector<std::uint8_t> out = w.buffer();
  const std::uint32_t crc = crc32_of(out.data(), out.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
  return out;
}

std::uint32_t checkpoint_checksum(const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  detail::ByteReader r(bytes.data() + bytes.size() - 4, 4);
  return r.u32();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes,
                             const std::optional<ArchSpec>& expected) {
  if (bytes.size() < sizeof kMagic + 8) throw ChecksumError("checkpoint: file too short");
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader tail(bytes.data() + body, 4);
  const std::uint32_t stored = tail.u32();
  if (crc32_of(bytes.data(), body) != stored) {
    throw ChecksumError("checkpoint: checksum mismatch (corrupt or truncated file)");
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw DataError("checkpoint: bad magic bytes");
  }
  detail::ByteReader r(bytes.data() + sizeof kMagic, body - sizeof kMagic);
  Checkpoint ck;
  try {
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
      throw DataError("checkpoint: unsupported format version " + std::to_string(version) +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
    }
    try {
      ck.arch = ArchSpec::parse(r.str());
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("checkpoint: ") + e.what());
    }
    const std::uint64_t schema = r.u64();
    const std::uint32_t n_lineage = r.u32();
    for (std::uint32_t i = 0; i < n_lineage; ++i) {
      LineageRecord rec;
      rec.op = r.str();
      const std::uint32_t nt = r.u32();
      for (std::uint32_t t = 0; t < nt; ++t) {
        ThreatSpec th;
        th.norm = parse_norm(r.str());
        th.epsilon = r.f64();
        rec.threats.push_back(th);
      }
      rec.epochs = r.f64();
      const std::uint32_t nw = r.u32();
      for (std::uint32_t k = 0; k < nw; ++k) rec.soup_weights.push_back(r.f64());
      ck.lineage.push_back(std::move(rec));
    }
    ck.val_clean_acc = r.f64();
    ck.val_robust_acc = r.f64();
    ck.seed = r.u64();
    const std::uint32_t n_tensors = r.u32();
    std::vector<NamedTensor<float>> entries;
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
      NamedTensor<float> e;
      e.name = r.str();
      const std::uint32_t nd = r.u32();
      Shape shape(nd);
      for (auto& d : shape) d = r.u64();
      if (r.u8() != kDtypeF32) throw DataError("checkpoint: unsupported dtype in '" + e.name + "'");
      const std::size_t n = shape_numel(shape);
      if (n > r.remaining() / 4) throw ChecksumError("checkpoint: tensor '" + e.name + "' truncated");
      e.tensor = Tensor<float>(shape);
      for (auto& v : e.tensor.data()) v = r.f32();
      entries.push_back(std::move(e));
    }
    if (r.remaining() != 0) throw DataError("checkpoint: trailing bytes before checksum");
    ck.params = ParamVector(std::move(entries));
    if (ck.params.schema_hash() != schema) {
      throw SchemaError("checkpoint: stored schema hash does not match its tensors");
    }
  } catch (const detail::TruncatedError&) {
    throw ChecksumError("checkpoint: truncated record");
  }
  if (expected && !(*expected == ck.arch)) {
    throw SchemaError("checkpoint: architecture " + ck.arch.id() + " but " + expected->id() +
                      " was expected");
  }
  ck.validate();
  return ck;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  return detail::read_file_bytes(path.string());
}

void write_bytes_once(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  detail::write_file_bytes(path.string(), bytes);
}

void write_text_once(const std::filesystem::path& path, const std::string& text) {
  detail::write_file_bytes(path.string(), std::vector<std::uint8_t>(text.begin(), text.end()));
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  ck.validate();
  write_bytes_once(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ArchSpec>& expected) {
  return decode_checkpoint(read_bytes(path), expected);
}

}  // namespace rsoup

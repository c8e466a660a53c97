#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "rsoup/data.hpp"
#include "rsoup/training.hpp"

namespace rsoup {

// Layout, all little-endian:
//   "SOUPCKPT" | u32 version | str arch id | u64 schema hash
//   u32 #lineage { str op | u32 #threats { str norm | f64 eps } | f64 epochs
//                  | u32 #weights { f64 } }
//   f64 val clean | f64 val robust | u64 seed
//   u32 #tensors { str name | u32 ndim | u64 dims... | u8 dtype (0 = f32) | payload }
//   u32 CRC-32 of everything before it
// Strings are u32 length + bytes.
inline constexpr std::uint32_t kCheckpointVersion = 1;

class ChecksumError : public DataError {
 public:
  using DataError::DataError;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
// Throws ChecksumError on a bad checksum or truncation, DataError on a bad
// magic or version, SchemaError when the stored or expected schema disagrees.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes,
                             const std::optional<ArchSpec>& expected = std::nullopt);

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ArchSpec>& expected = std::nullopt);

// CRC-32 stored in the encoded file.
std::uint32_t checkpoint_checksum(const Checkpoint& ck);

// Raw byte helpers shared with the command layer.
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes_once(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_once(const std::filesystem::path& path, const std::string& text);

}  // namespace rsoup

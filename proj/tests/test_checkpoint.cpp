#include <filesystem>

#include "doctest.h"
#include "rsoup/checkpoint.hpp"

#include <zlib.h>

using namespace rsoup;

namespace {

Checkpoint sample() {
  Checkpoint ck;
  ck.arch = ArchSpec::parse("mlp-6/1x4x4/3");
  Network<float> net(ck.arch);
  net.init(11);
  ck.params = extract(net);
  ck.lineage = {{"train", {{Norm::linf, 0.05}}, 30.0, {}},
                {"soup", {{Norm::linf, 0.05}, {Norm::l2, 0.5}}, 0.0, {0.4, 0.6}}};
  ck.val_clean_acc = 0.75;
  ck.val_robust_acc = 0.5;
  ck.seed = 42;
  return ck;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("encode and decode round-trip") {
  const auto ck = sample();
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes, ck.arch);
  CHECK(back.params == ck.params);
  CHECK(back.lineage == ck.lineage);
  CHECK(back.val_clean_acc == ck.val_clean_acc);
  CHECK(back.seed == 42);
  CHECK(encode_checkpoint(back) == bytes);
}

TEST_CASE("save, load and save again is byte-identical") {
  const auto dir = temp_dir("rsoup_test_ckpt");
  save_checkpoint(sample(), dir / "a.ckpt");
  save_checkpoint(load_checkpoint(dir / "a.ckpt"), dir / "b.ckpt");
  CHECK(read_bytes(dir / "a.ckpt") == read_bytes(dir / "b.ckpt"));
  CHECK_THROWS(save_checkpoint(sample(), dir / "a.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("corruption and truncation fail the checksum") {
  auto bytes = encode_checkpoint(sample());
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(decode_checkpoint(flipped), ChecksumError);
  bytes.resize(bytes.size() - 7);
  CHECK_THROWS_AS(decode_checkpoint(bytes), ChecksumError);
  CHECK_THROWS_AS(decode_checkpoint(std::vector<std::uint8_t>(3, 0)), ChecksumError);
}

TEST_CASE("a different expected architecture is a schema error") {
  const auto bytes = encode_checkpoint(sample());
  CHECK_THROWS_AS(decode_checkpoint(bytes, ArchSpec::parse("mlp-7/1x4x4/3")), SchemaError);
}

TEST_CASE("checksum helper matches the stored trailer") {
  const auto ck = sample();
  const auto bytes = encode_checkpoint(ck);
  const std::uint32_t stored = bytes[bytes.size() - 4] | (bytes[bytes.size() - 3] << 8) |
                               (bytes[bytes.size() - 2] << 16) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
  CHECK(checkpoint_checksum(ck) == stored);
}

TEST_CASE("an unknown version is rejected") {
  auto bytes = encode_checkpoint(sample());
  bytes[8] = 9;
  bytes.resize(bytes.size() - 4);
  const auto crc = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
  try {
    decode_checkpoint(bytes);
    FAIL("expected DataError");
  } catch (const ChecksumError&) {
    FAIL("version must not be reported as a checksum failure");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
}

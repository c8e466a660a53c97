#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rsoup/data.hpp"

namespace rsoup {

enum class CorruptionKind { gaussian_noise, blur, pixelate, quantize, contrast };

inline constexpr std::array<CorruptionKind, 5> kAllCorruptions{
    CorruptionKind::gaussian_noise, CorruptionKind::blur, CorruptionKind::pixelate,
    CorruptionKind::quantize, CorruptionKind::contrast};

std::string corruption_name(CorruptionKind k);
CorruptionKind parse_corruption(const std::string& s);

// Severity tables, index 0 is severity 1:
//   gaussian_noise  sigma        0.04 0.08 0.12 0.18 0.26
//   blur            box radius   1 2 3 4 5
//   pixelate        block size   2 3 4 6 8
//   quantize        levels       32 16 8 5 3
//   contrast        scale        0.75 0.6 0.45 0.3 0.2 (around 0.5)
double severity_parameter(CorruptionKind kind, int severity);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;
  std::uint64_t seed = 0;

  void validate() const;
  std::string name() const;  // e.g. "pixelate-3"
  friend bool operator==(const CorruptionSpec&, const CorruptionSpec&) = default;
};

// Primitives on one [C,H,W] image; all clip to [0,1].
std::vector<float> add_gaussian_noise(std::span<const float> image, double sigma,
                                      std::uint64_t seed, std::uint64_t image_index);
std::vector<float> box_blur(std::span<const float> image, std::size_t channels,
                            std::size_t height, std::size_t width, int radius);
std::vector<float> pixelate(std::span<const float> image, std::size_t channels,
                            std::size_t height, std::size_t width, int block);
// Level midpoints: q(x) = (min(floor(x * L), L - 1) + 0.5) / L. With
// block_average set, 2x2 blocks are averaged first.
std::vector<float> quantize(std::span<const float> image, std::size_t channels,
                            std::size_t height, std::size_t width, int levels,
                            bool block_average = false);
std::vector<float> adjust_contrast(std::span<const float> image, double scale);

// Throws DataError if any pixel lies outside [0,1]. The noise pattern depends
// on (spec.seed, image_index) only, so it scales with severity.
std::vector<float> apply_corruption(std::span<const float> image, std::size_t channels,
                                    std::size_t height, std::size_t width,
                                    const CorruptionSpec& spec, std::uint64_t image_index = 0);

struct ShiftedDataset {
  std::string base_id;
  std::uint64_t base_digest = 0;
  CorruptionSpec spec;
  Dataset data;
};

ShiftedDataset corrupt_dataset(const Dataset& base, const CorruptionSpec& spec);

// One shifted copy per (kind, severity), kinds outermost.
std::vector<ShiftedDataset> build_shift_suite(const Dataset& base,
                                              std::span<const CorruptionKind> kinds,
                                              std::span<const int> severities,
                                              std::uint64_t seed);

// Mean over images of the per-pixel RMS difference.
double mean_pixel_distance(const Dataset& a, const Dataset& b);

// On-disk cache: one raw dataset per entry plus suite.json.
void save_shift_suite(std::span<const ShiftedDataset> suite, const std::filesystem::path& dir);
std::vector<ShiftedDataset> load_shift_suite(const std::filesystem::path& dir);

}  // namespace rsoup

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rsoup/tensor.hpp"

namespace rsoup {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Labeled images in [0,1], stored [N,C,H,W].
struct Dataset {
  std::string id;
  Tensor<float> images;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  std::size_t image_dim() const { return channels() * height() * width(); }
  std::span<const float> image(std::size_t i) const {
    return images.data().subspan(i * image_dim(), image_dim());
  }

  Dataset subset(std::span<const std::size_t> indices, std::string new_id) const;
  // Batch tensor [B,C,H,W] for the given rows.
  Tensor<float> gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  // Digest over shape, pixels and labels.
  std::uint64_t digest() const;
  void validate() const;
};

// Bundled 10-class problem: noisy renderings of bars, lines, outlines, filled
// blobs and crosses at jittered positions, sizes and intensities. Labels cycle
// 0..9 so every prefix of length 10m is balanced.
Dataset generate_shapes(std::size_t n, std::uint64_t seed, std::size_t side = 16,
                        std::string id = "shapes");

// Deterministic (train, validation) split holding out `fraction` of the points.
std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double fraction,
                                          std::uint64_t seed);

// Raw-array layout: a JSON manifest next to little-endian float32 pixels and
// int32 labels.
void save_raw_dataset(const Dataset& data, const std::filesystem::path& manifest,
                      const nlohmann::json& extra = nlohmann::json::object());
Dataset load_raw_dataset(const std::filesystem::path& manifest);

}  // namespace rsoup

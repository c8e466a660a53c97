#include "rsoup/shifts.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "binary_io.hpp"
#include "rsoup/parallel.hpp"

namespace rsoup {

namespace {

constexpr double kNoiseSigma[] = {0.04, 0.08, 0.12, 0.18, 0.26};
constexpr double kBlurRadius[] = {1, 2, 3, 4, 5};
constexpr double kPixelateBlock[] = {2, 3, 4, 6, 8};
constexpr double kQuantizeLevels[] = {32, 16, 8, 5, 3};
constexpr double kContrastScale[] = {0.75, 0.6, 0.45, 0.3, 0.2};

constexpr std::uint64_t kNoiseStream = 0x6e0153;

float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

void check_dims(std::span<const float> image, std::size_t c, std::size_t h, std::size_t w) {
  if (image.size() != c * h * w) {
    throw std::invalid_argument("corruption: image has " + std::to_string(image.size()) +
                                " values, expected " + std::to_string(c * h * w));
  }
}

}  // namespace

std::string corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::blur: return "blur";
    case CorruptionKind::pixelate: return "pixelate";
    case CorruptionKind::quantize: return "quantize";
    case CorruptionKind::contrast: return "contrast";
  }
  return "?";
}

CorruptionKind parse_corruption(const std::string& s) {
  for (auto k : kAllCorruptions)
    if (corruption_name(k) == s) return k;
  throw std::invalid_argument("unknown corruption '" + s +
                              "' (gaussian_noise, blur, pixelate, quantize, contrast)");
}

double severity_parameter(CorruptionKind kind, int severity) {
  if (severity < 1 || severity > 5) {
    throw std::invalid_argument("severity must be in 1..5, got " + std::to_string(severity));
  }
  const auto i = static_cast<std::size_t>(severity - 1);
  switch (kind) {
    case CorruptionKind::gaussian_noise: return kNoiseSigma[i];
    case CorruptionKind::blur: return kBlurRadius[i];
    case CorruptionKind::pixelate: return kPixelateBlock[i];
    case CorruptionKind::quantize: return kQuantizeLevels[i];
    case CorruptionKind::contrast: return kContrastScale[i];
  }
  return 0.0;
}

void CorruptionSpec::validate() const { severity_parameter(kind, severity); }

std::string CorruptionSpec::name() const {
  return corruption_name(kind) + "-" + std::to_string(severity);
}

std::vector<float> add_gaussian_noise(std::span<const float> image, double sigma,
                                      std::uint64_t seed, std::uint64_t image_index) {
  auto rng = make_rng(seed, kNoiseStream, image_index);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<float> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    out[i] = clip01(static_cast<double>(image[i]) + sigma * normal(rng));
  }
  return out;
}

std::vector<float> box_blur(std::span<const float> image, std::size_t channels,
                            std::size_t height, std::size_t width, int radius) {
  check_dims(image, channels, height, width);
  if (radius < 0) throw std::invalid_argument("box_blur: negative radius");
  const long H = static_cast<long>(height), W = static_cast<long>(width), r = radius;
  const double norm = 1.0 / static_cast<double>((2 * r + 1) * (2 * r + 1));
  std::vector<float> out(image.size());
  std::vector<double> rows(height * width);
  for (std::size_t c = 0; c < channels; ++c) {
    const float* src = image.data() + c * height * width;
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        double s = 0.0;
        for (long k = -r; k <= r; ++k) s += src[y * W + std::clamp(x + k, 0L, W - 1)];
        rows[static_cast<std::size_t>(y * W + x)] = s;
      }
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        double s = 0.0;
        for (long k = -r; k <= r; ++k)
          s += rows[static_cast<std::size_t>(std::clamp(y + k, 0L, H - 1) * W + x)];
        out[c * height * width + static_cast<std::size_t>(y * W + x)] = clip01(s * norm);
      }
  }
  return out;
}

std::vector<float> pixelate(std::span<const float> image, std::size_t channels,
                            std::size_t height, std::size_t width, int block) {
  check_dims(image, channels, height, width);
  if (block < 1) throw std::invalid_argument("pixelate: block size must be >= 1");
  const auto b = static_cast<std::size_t>(block);
  std::vector<float> out(image.size());
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t off = c * height * width;
    for (std::size_t by = 0; by < height; by += b)
      for (std::size_t bx = 0; bx < width; bx += b) {
        const std::size_t ey = std::min(height, by + b), ex = std::min(width, bx + b);
        double s = 0.0;
        for (std::size_t y = by; y < ey; ++y)
          for (std::size_t x = bx; x < ex; ++x) s += image[off + y * width + x];
        const float v = clip01(s / static_cast<double>((ey - by) * (ex - bx)));
        for (std::size_t y = by; y < ey; ++y)
          for (std::size_t x = bx; x < ex; ++x) out[off + y * width + x] = v;
      }
  }
  return out;
}

std::vector<float> quantize(std::span<const float> image, std::size_t channels,
                            std::size_t height, std::size_t width, int levels,
                            bool block_average) {
  check_dims(image, channels, height, width);
  if (levels < 1) throw std::invalid_argument("quantize: levels must be >= 1");
  std::vector<float> src = block_average ? pixelate(image, channels, height, width, 2)
                                         : std::vector<float>(image.begin(), image.end());
  const double L = levels;
  for (auto& v : src) {
    const double q = std::min(std::floor(static_cast<double>(v) * L), L - 1.0);
    v = static_cast<float>((q + 0.5) / L);
  }
  return src;
}

std::vector<float> adjust_contrast(std::span<const float> image, double scale) {
  std::vector<float> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    out[i] = clip01(0.5 + scale * (static_cast<double>(image[i]) - 0.5));
  }
  return out;
}

std::vector<float> apply_corruption(std::span<const float> image, std::size_t channels,
                                    std::size_t height, std::size_t width,
                                    const CorruptionSpec& spec, std::uint64_t image_index) {
  check_dims(image, channels, height, width);
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (!(image[i] >= 0.0f && image[i] <= 1.0f)) {
      throw DataError("corruption: pixel " + std::to_string(i) + " = " +
                      std::to_string(image[i]) + " outside [0,1]");
    }
  }
  const double p = severity_parameter(spec.kind, spec.severity);
  switch (spec.kind) {
    case CorruptionKind::gaussian_noise: return add_gaussian_noise(image, p, spec.seed, image_index);
    case CorruptionKind::blur:
      return box_blur(image, channels, height, width, static_cast<int>(p));
    case CorruptionKind::pixelate:
      return pixelate(image, channels, height, width, static_cast<int>(p));
    case CorruptionKind::quantize:
      return quantize(image, channels, height, width, static_cast<int>(p));
    case CorruptionKind::contrast: return adjust_contrast(image, p);
  }
  return {};
}

ShiftedDataset corrupt_dataset(const Dataset& base, const CorruptionSpec& spec) {
  spec.validate();
  ShiftedDataset s;
  s.base_id = base.id;
  s.base_digest = base.digest();
  s.spec = spec;
  s.data.id = base.id + "/" + spec.name();
  s.data.labels = base.labels;
  s.data.classes = base.classes;
  s.data.images = Tensor<float>(base.images.shape());
  const std::size_t d = base.image_dim();
  parallel_for(base.size(), 64, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto out =
          apply_corruption(base.image(i), base.channels(), base.height(), base.width(), spec, i);
      std::copy(out.begin(), out.end(), s.data.images.raw() + i * d);
    }
  });
  return s;
}

std::vector<ShiftedDataset> build_shift_suite(const Dataset& base,
                                              std::span<const CorruptionKind> kinds,
                                              std::span<const int> severities,
                                              std::uint64_t seed) {
  std::vector<ShiftedDataset> suite;
  suite.reserve(kinds.size() * severities.size());
  for (auto k : kinds)
    for (int s : severities) suite.push_back(corrupt_dataset(base, {k, s, seed}));
  return suite;
}

double mean_pixel_distance(const Dataset& a, const Dataset& b) {
  if (a.images.shape() != b.images.shape()) {
    throw std::invalid_argument("mean_pixel_distance: shape " + shape_to_string(a.images.shape()) +
                                " vs " + shape_to_string(b.images.shape()));
  }
  if (a.size() == 0) throw DataError("mean_pixel_distance: empty datasets");
  const std::size_t d = a.image_dim();
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a.image(i), y = b.image(i);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(x[j]) - static_cast<double>(y[j]);
      s += diff * diff;
    }
    total += std::sqrt(s / static_cast<double>(d));
  }
  return total / static_cast<double>(a.size());
}

void save_shift_suite(std::span<const ShiftedDataset> suite, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (const auto& s : suite) {
    const std::string file = s.spec.name() + ".json";
    nlohmann::json meta = {{"kind", corruption_name(s.spec.kind)},
                           {"severity", s.spec.severity},
                           {"seed", s.spec.seed},
                           {"base_id", s.base_id},
                           {"base_digest", hex64(s.base_digest)}};
    save_raw_dataset(s.data, dir / file, meta);
    meta["manifest"] = file;
    index.push_back(meta);
  }
  const std::string text = nlohmann::json{{"format", "rsoup-shift-suite-v1"}, {"entries", index}}
                               .dump(2) + "\n";
  detail::write_file_bytes((dir / "suite.json").string(),
                           std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<ShiftedDataset> load_shift_suite(const std::filesystem::path& dir) {
  std::vector<ShiftedDataset> suite;
  try {
    std::ifstream in(dir / "suite.json");
    if (!in) throw DataError("cannot open shift suite index in '" + dir.string() + "'");
    const auto j = nlohmann::json::parse(in);
    if (j.at("format") != "rsoup-shift-suite-v1") throw DataError("unknown shift suite format");
    for (const auto& e : j.at("entries")) {
      ShiftedDataset s;
      s.spec = {parse_corruption(e.at("kind")), e.at("severity").get<int>(),
                e.at("seed").get<std::uint64_t>()};
      s.spec.validate();
      s.base_id = e.at("base_id");
      s.base_digest = std::stoull(e.at("base_digest").get<std::string>(), nullptr, 16);
      s.data = load_raw_dataset(dir / e.at("manifest").get<std::string>());
      suite.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("shift suite '" + dir.string() + "': " + e.what());
  }
  return suite;
}

}  // namespace rsoup

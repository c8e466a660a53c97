#include "rsoup/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "binary_io.hpp"
#include "rsoup/parallel.hpp"

namespace rsoup {

namespace detail {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes,
                      bool allow_overwrite) {
  if (!allow_overwrite && std::filesystem::exists(path)) {
    throw DataError("refusing to overwrite existing output '" + path + "'");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to '" + path + "'");
}

}  // namespace detail

Dataset Dataset::subset(std::span<const std::size_t> indices, std::string new_id) const {
  Dataset out;
  out.id = std::move(new_id);
  out.images = gather(indices);
  out.labels = gather_labels(indices);
  out.classes = classes;
  return out;
}

Tensor<float> Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t d = image_dim();
  Tensor<float> out({indices.size(), channels(), height(), width()});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= size()) throw DataError("gather: index out of range in '" + id + "'");
    const auto src = image(indices[r]);
    std::copy(src.begin(), src.end(), out.raw() + r * d);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

std::uint64_t Dataset::digest() const {
  Fnv1a h;
  for (auto d : images.shape()) h.update_value(static_cast<std::uint64_t>(d));
  h.update(images.raw(), images.size() * sizeof(float));
  for (int y : labels) h.update_value(static_cast<std::int32_t>(y));
  h.update_value(static_cast<std::uint64_t>(classes));
  return h.digest();
}

void Dataset::validate() const {
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw DataError("dataset '" + id + "': images " + shape_to_string(images.shape()) + " vs " +
                    std::to_string(labels.size()) + " labels");
  }
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw DataError("dataset '" + id + "': label " + std::to_string(y) + " out of range");
  for (float v : images.data())
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("dataset '" + id + "': pixel outside [0,1]");
}

namespace {

// Signed "inside" test for each class in continuous coordinates centered on
// (cx, cy) with half-extent r and stroke half-width t.
bool inside(int cls, double x, double y, double r, double t) {
  const double ax = std::abs(x), ay = std::abs(y);
  const double rad = std::sqrt(x * x + y * y);
  switch (cls) {
    case 0: return ay <= t && ax <= r;                                  // horizontal bar
    case 1: return ax <= t && ay <= r;                                  // vertical bar
    case 2: return std::abs(x - y) <= t * std::sqrt(2.0) && ax <= r && ay <= r;  // "\"
    case 3: return std::abs(x + y) <= t * std::sqrt(2.0) && ax <= r && ay <= r;  // "/"
    case 4: return std::max(ax, ay) <= r && std::max(ax, ay) >= r - 2 * t;       // square outline
    case 5: return std::max(ax, ay) <= r * 0.8;                         // filled square
    case 6: return rad <= r && rad >= r - 2 * t;                        // ring
    case 7: return rad <= r * 0.85;                                     // disk
    case 8: return (ax <= t && ay <= r) || (ay <= t && ax <= r);         // plus
    default:
      return (std::abs(x - y) <= t * std::sqrt(2.0) || std::abs(x + y) <= t * std::sqrt(2.0)) &&
             ax <= r && ay <= r;                                        // x
  }
}

}  // namespace

Dataset generate_shapes(std::size_t n, std::uint64_t seed, std::size_t side, std::string id) {
  constexpr std::size_t kClasses = 10;
  Dataset out;
  out.id = std::move(id);
  out.classes = kClasses;
  out.images = Tensor<float>({n, 1, side, side});
  out.labels.resize(n);
  const double s = static_cast<double>(side);
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % kClasses);
    out.labels[i] = cls;
    auto rng = make_rng(seed, 0x5aa9e5, i);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    const double r = s * (0.22 + 0.16 * u(rng));
    const double t = s * (0.045 + 0.04 * u(rng));
    const double cx = s / 2 + (u(rng) - 0.5) * s * 0.25;
    const double cy = s / 2 + (u(rng) - 0.5) * s * 0.25;
    const double fg = 0.55 + 0.45 * u(rng);
    const double bg = 0.25 * u(rng);
    const double sigma = 0.03 + 0.05 * u(rng);
    // Low-frequency background gradient.
    const double gx = (u(rng) - 0.5) * 0.2, gy = (u(rng) - 0.5) * 0.2;
    float* img = out.images.raw() + i * side * side;
    for (std::size_t py = 0; py < side; ++py) {
      for (std::size_t px = 0; px < side; ++px) {
        const double x = static_cast<double>(px) + 0.5 - cx;
        const double y = static_cast<double>(py) + 0.5 - cy;
        double v = bg + gx * x / s + gy * y / s;
        if (inside(cls, x, y, r, t)) v = fg;
        v += sigma * noise(rng);
        img[py * side + px] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double fraction,
                                          std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw DataError("split_holdout: fraction in [0,1)");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto rng = make_rng(seed, 0x5b117);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_hold = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> hold(idx.begin(), idx.begin() + static_cast<long>(n_hold));
  std::vector<std::size_t> keep(idx.begin() + static_cast<long>(n_hold), idx.end());
  std::sort(hold.begin(), hold.end());
  std::sort(keep.begin(), keep.end());
  return {data.subset(keep, data.id + "/train"), data.subset(hold, data.id + "/val")};
}

void save_raw_dataset(const Dataset& data, const std::filesystem::path& manifest,
                      const nlohmann::json& extra) {
  const std::string stem = manifest.stem().string();
  const auto dir = manifest.parent_path();
  const std::string img_name = stem + ".f32", lab_name = stem + ".i32";

  detail::ByteWriter img, lab;
  for (float v : data.images.data()) img.f32(v);
  for (int y : data.labels) lab.u32(static_cast<std::uint32_t>(y));
  detail::write_file_bytes((dir / img_name).string(), img.buffer());
  detail::write_file_bytes((dir / lab_name).string(), lab.buffer());

  nlohmann::json j = extra;
  j["format"] = "rsoup-raw-v1";
  j["id"] = data.id;
  j["n"] = data.size();
  j["channels"] = data.channels();
  j["height"] = data.height();
  j["width"] = data.width();
  j["classes"] = data.classes;
  j["images"] = img_name;
  j["labels"] = lab_name;
  j["digest"] = hex64(data.digest());
  const std::string text = j.dump(2) + "\n";
  detail::write_file_bytes(manifest.string(), std::vector<std::uint8_t>(text.begin(), text.end()));
}

Dataset load_raw_dataset(const std::filesystem::path& manifest) {
  nlohmann::json j;
  try {
    std::ifstream in(manifest);
    if (!in) throw DataError("cannot open dataset manifest '" + manifest.string() + "'");
    j = nlohmann::json::parse(in);
    if (j.at("format") != "rsoup-raw-v1") throw DataError("unknown dataset format");
  } catch (const nlohmann::json::exception& e) {
    throw DataError("dataset manifest '" + manifest.string() + "': " + e.what());
  }
  Dataset d;
  const auto dir = manifest.parent_path();
  const std::size_t n = j.at("n"), c = j.at("channels"), h = j.at("height"), w = j.at("width");
  d.id = j.value("id", manifest.stem().string());
  d.classes = j.at("classes");
  const auto img = detail::read_file_bytes((dir / j.at("images").get<std::string>()).string());
  const auto lab = detail::read_file_bytes((dir / j.at("labels").get<std::string>()).string());
  if (img.size() != n * c * h * w * 4 || lab.size() != n * 4) {
    throw DataError("dataset '" + d.id + "': payload size does not match manifest");
  }
  d.images = Tensor<float>({n, c, h, w});
  detail::ByteReader ri(img.data(), img.size()), rl(lab.data(), lab.size());
  for (auto& v : d.images.data()) v = ri.f32();
  d.labels.resize(n);
  for (auto& y : d.labels) y = static_cast<int>(rl.u32());
  d.validate();
  if (j.contains("digest") && j["digest"] != hex64(d.digest())) {
    throw DataError("dataset '" + d.id + "': digest mismatch");
  }
  return d;
}

}  // namespace rsoup

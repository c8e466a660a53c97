#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "rsoup/shifts.hpp"

using namespace rsoup;

namespace {

const Dataset& base() {
  static const Dataset d = generate_shapes(40, 5);
  return d;
}

std::vector<float> ramp_image(std::size_t n) {
  std::vector<float> img(n);
  for (std::size_t i = 0; i < n; ++i) img[i] = static_cast<float>(i) / static_cast<float>(n - 1);
  return img;
}

}  // namespace

TEST_CASE("corruption names round-trip") {
  for (auto k : kAllCorruptions) CHECK(parse_corruption(corruption_name(k)) == k);
  CHECK_THROWS(parse_corruption("fog"));
  CHECK((CorruptionSpec{CorruptionKind::pixelate, 3, 0}.name() == "pixelate-3"));
  CHECK_THROWS(CorruptionSpec{CorruptionKind::blur, 6, 0}.validate());
  CHECK_THROWS(CorruptionSpec{CorruptionKind::blur, 0, 0}.validate());
}

TEST_CASE("degenerate parameters leave the image unchanged") {
  const auto img = ramp_image(16);
  CHECK(box_blur(img, 1, 4, 4, 0) == img);
  CHECK(pixelate(img, 1, 4, 4, 1) == img);
  CHECK(adjust_contrast(img, 1.0) == img);
  CHECK(add_gaussian_noise(img, 0.0, 1, 0) == img);
}

TEST_CASE("two-level quantization") {
  const std::vector<float> img{0.0f, 0.2f, 0.49f, 0.5f, 0.8f, 1.0f};
  const auto q = quantize(img, 1, 2, 3, 2);
  const std::vector<float> expect{0.25f, 0.25f, 0.25f, 0.75f, 0.75f, 0.75f};
  CHECK(q == expect);
}

TEST_CASE("pixelate averages blocks") {
  const std::vector<float> img{0.0f, 0.2f, 0.4f, 0.6f};
  const auto p = pixelate(img, 1, 2, 2, 2);
  for (float v : p) CHECK(v == doctest::Approx(0.3f));
}

TEST_CASE("contrast scales around the mid level") {
  const std::vector<float> img{0.0f, 0.5f, 1.0f};
  const auto c = adjust_contrast(img, 0.5);
  CHECK(c[0] == doctest::Approx(0.25f));
  CHECK(c[1] == doctest::Approx(0.5f));
  CHECK(c[2] == doctest::Approx(0.75f));
}

TEST_CASE("pixels outside the unit range are rejected") {
  std::vector<float> img(16, 0.5f);
  img[3] = 1.5f;
  CHECK_THROWS_AS(apply_corruption(img, 1, 4, 4, {CorruptionKind::blur, 1, 0}), DataError);
}

TEST_CASE("the suite has 25 deterministic datasets with growing distance") {
  const std::vector<int> sev{1, 2, 3, 4, 5};
  const auto a = build_shift_suite(base(), kAllCorruptions, sev, 9);
  const auto b = build_shift_suite(base(), kAllCorruptions, sev, 9);
  REQUIRE(a.size() == 25);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].data.digest() == b[i].data.digest());
    CHECK(a[i].base_digest == base().digest());
    a[i].data.validate();
  }
  for (std::size_t k = 0; k < 5; ++k) {
    double prev = 0.0;
    for (std::size_t s = 0; s < 5; ++s) {
      const double d = mean_pixel_distance(base(), a[k * 5 + s].data);
      CAPTURE(a[k * 5 + s].data.id);
      CHECK(d > prev);
      prev = d;
    }
  }
}

TEST_CASE("suites survive a save and load") {
  const auto dir = std::filesystem::temp_directory_path() / "rsoup_test_suite";
  std::filesystem::remove_all(dir);
  const std::vector<CorruptionKind> kinds{CorruptionKind::gaussian_noise, CorruptionKind::quantize};
  const std::vector<int> sev{2, 4};
  const auto suite = build_shift_suite(base(), kinds, sev, 3);
  save_shift_suite(suite, dir);
  const auto back = load_shift_suite(dir);
  REQUIRE(back.size() == suite.size());
  for (std::size_t i = 0; i < suite.size(); ++i) {
    CHECK(back[i].spec == suite[i].spec);
    CHECK(back[i].base_digest == suite[i].base_digest);
    CHECK(back[i].data.digest() == suite[i].data.digest());
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_shift_suite(dir), DataError);
}

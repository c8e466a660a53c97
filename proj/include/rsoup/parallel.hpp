#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>

namespace rsoup {

// Worker cap for parallel_for. Defaults to the hardware concurrency.
void set_num_threads(std::size_t n);
std::size_t num_threads();

// Runs fn(begin, end) over [0, n) split into fixed blocks of `grain` items.
// Block boundaries never depend on the thread count, so any per-block
// computation produces the same result serially and in parallel. Nested
// calls from inside a worker run serially.
void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& fn);

// Deterministic generator for a (seed, stream, index) triple.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);
std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

// FNV-1a 64-bit digest.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n);
  template <typename T>
  void update_value(const T& v) {
    update(&v, sizeof(T));
  }
  void update_string(const std::string& s);
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 14695981039346656037ULL;
};

std::string hex64(std::uint64_t v);

}  // namespace rsoup

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace nhgcat {

// Counter-based random stream (Philox4x32-10). A stream is fully identified by
// (seed, label, counter): two streams with different labels never share a key,
// and any draw can be replayed by reconstructing the stream at its counter.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view label, std::uint64_t counter = 0);

  // Child stream whose label is `label() + "/" + sub`.
  RngStream derive(std::string_view sub) const;

  std::uint64_t next_u64();
  // Uniform on the open interval (0, 1).
  double uniform();
  // Standard normal via Box-Muller on a single counter block.
  double normal();
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  std::uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }
  std::uint64_t counter() const { return counter_; }

 private:
  struct Block {
    std::uint32_t w[4];
  };
  Block generate();

  std::uint64_t seed_;
  std::string label_;
  std::uint64_t key_;
  std::uint64_t counter_;
};

std::uint64_t hash_label(std::string_view label);

}  // namespace nhgcat

#include "revid/rng.hpp"

namespace revid {

namespace {
std::uint32_t lo(std::uint64_t x) { return static_cast<std::uint32_t>(x); }
std::uint32_t hi(std::uint64_t x) { return static_cast<std::uint32_t>(x >> 32); }
}  // namespace

Stream::Stream(std::uint64_t seed, std::uint64_t firm, std::int64_t period, std::uint32_t purpose) {
  auto p = static_cast<std::uint64_t>(period);
  std::seed_seq seq{lo(seed), hi(seed), lo(firm), hi(firm), lo(p), hi(p), purpose, 0x5eedu};
  eng_.seed(seq);
}

std::uint64_t substream_seed(std::uint64_t master, std::uint64_t index) {
  std::seed_seq seq{lo(master), hi(master), lo(index), hi(index), 0xab1eu};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

}  // namespace revid

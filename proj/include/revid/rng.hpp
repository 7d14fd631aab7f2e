#pragma once

#include <cstdint>
#include <random>

namespace revid {

// Independent stream per (seed, firm, period, purpose). Draws do not depend
// on the order in which firms or periods are simulated.
class Stream {
 public:
  Stream(std::uint64_t seed, std::uint64_t firm, std::int64_t period, std::uint32_t purpose = 0);

  double normal() { return normal_(eng_); }
  double uniform() { return unif_(eng_); }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 eng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
};

// Named substream seed derived from a master seed.
std::uint64_t substream_seed(std::uint64_t master, std::uint64_t index);

}  // namespace revid

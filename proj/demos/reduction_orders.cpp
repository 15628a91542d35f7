// Same data, different hardware: the sum of one vector and trace(M^T M) under every
// built-in backend profile.

#include <cstdio>
#include <random>

#include "hwbd/numerics.hpp"
#include "hwbd/profile.hpp"

int main() {
  std::mt19937_64 rng(42);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  std::vector<float> v(1000);
  for (auto& x : v) x = gauss(rng) * 1e3f;

  std::printf("%-20s %-16s %-16s\n", "profile", "sum(v)", "trace(M^T M)");
  const auto profiles = hwbd::builtin_profiles();
  const auto frob = hwbd::frobenius_demo(100, 0.01f, profiles);
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    const float s = hwbd::reduce_sum(v, profiles[i]);
    std::printf("%-20s %-16.9g %-16.9g\n", profiles[i].name.c_str(), s, frob[i]);
  }
}

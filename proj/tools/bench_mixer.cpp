// Wall-clock scaling check for one mixer: doubling the token-grid side
// quadruples tokens, so time per forward should grow ~4x (allowing cache
// effects). Not part of the test suite; run by hand when curious.

#include "vik/mixer.hpp"

#include <chrono>
#include <cstdio>
#include <vector>

using namespace vik;

int main(int argc, char** argv) {
  const int channels = argc > 1 ? std::atoi(argv[1]) : 32;
  const int repeats = argc > 2 ? std::atoi(argv[2]) : 3;
  const std::vector<int> sides = {28, 56, 112};

  std::printf("mixer forward, C=%d, p=2, M=8, k=5, r=32, %d repeats\n", channels, repeats);
  double prev = 0;
  for (int side : sides) {
    Rng rng(7);
    MixerParams<float> m;
    mixer_init(m, channels, side, side, 2, 8, 5, 32, BasisKind::kRbf, 1, rng);
    TensorF x = random_uniform<float>({1, channels, side, side}, rng, -1.f, 1.f);
    mixer_forward(x, m);  // warm
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < repeats; ++r) mixer_forward(x, m);
    const auto t1 = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count() / repeats;
    if (prev > 0)
      std::printf("side %4d  tokens %7d  %10.2f ms  x%.2f per 4x tokens\n", side, side * side,
                  ms, ms / prev);
    else
      std::printf("side %4d  tokens %7d  %10.2f ms\n", side, side * side, ms);
    prev = ms;
  }
  return 0;
}

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "eqtrack/graph.hpp"
#include "eqtrack/rng.hpp"

using namespace eqtrack;
using namespace eqtrack::diff;

// The float training path runs on the system sgemm. This pins it against the
// local double kernel on every GEMM shape the model actually issues, so a
// miscompiled or buggy vendor kernel fails loudly here instead of silently
// corrupting training. (The vendor dgemm on this CPU family is known-bad for
// several of these shapes, which is why the double path uses the local
// kernel in the first place.)
TEST_CASE("system sgemm agrees with the local reference on model shapes") {
  struct Case {
    int m, n, k;
  };
  // conv-as-GEMM and dense shapes at batch 4 (columns scale linearly with
  // batch and do not change the kernel selection class)
  const int B = 4;
  const std::vector<Case> cases = {
      {16, B * 1024, 5 * 9},    // encoder entry conv
      {16, B * 1024, 16 * 9},   // 32x32 stack
      {64, B * 1024, 16 * 9},   {128, B * 1024, 64 * 9},
      {128, B * 256, 128},      // 1x1 после pooling
      {512, B * 256, 128 * 9},  {256, B * 64, 512},
      {B, 1024, 16384},         // fc stack
      {B, 512, 1024},           {B, 128, 512},   {B, 40, 128},
      {32, B * 8 * 1024, 18},   // decoder stack over folded containers
      {32, B * 8 * 1024, 32},   {16, B * 8 * 1024, 32},
      {16, B * 8 * 1024, 16 * 9}, {1, B * 8 * 1024, 16 * 9},
  };
  rng::Stream rs(99);
  for (const auto& c : cases) {
    for (int combo = 0; combo < 3; ++combo) {
      // NN (forward), NT (weight grad), TN (input grad)
      const bool ta = combo == 2, tb = combo == 1;
      const int ar = ta ? c.k : c.m, ac = ta ? c.m : c.k;
      const int br = tb ? c.n : c.k, bc = tb ? c.k : c.n;
      std::vector<float> af(static_cast<std::size_t>(ar) * ac);
      std::vector<float> bf(static_cast<std::size_t>(br) * bc);
      std::vector<double> ad(af.size()), bd(bf.size());
      for (std::size_t i = 0; i < af.size(); ++i) {
        ad[i] = rs.uniform(-1, 1);
        af[i] = static_cast<float>(ad[i]);
      }
      for (std::size_t i = 0; i < bf.size(); ++i) {
        bd[i] = rs.uniform(-1, 1);
        bf[i] = static_cast<float>(bd[i]);
      }
      std::vector<float> cf(static_cast<std::size_t>(c.m) * c.n);
      std::vector<double> cd(cf.size());
      gemm(ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, c.m, c.n, c.k, 1.0f,
           af.data(), ac, bf.data(), bc, 0.0f, cf.data(), c.n);
      gemm(ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, c.m, c.n, c.k, 1.0,
           ad.data(), ac, bd.data(), bc, 0.0, cd.data(), c.n);
      double worst = 0;
      for (std::size_t i = 0; i < cf.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(cf[i]) - cd[i]));
      INFO("m=" << c.m << " n=" << c.n << " k=" << c.k << " ta=" << ta << " tb=" << tb);
      // float accumulation noise only: well under 1e-2 for k <= 16384
      REQUIRE(worst < 5e-2 * std::sqrt(static_cast<double>(c.k)) * 1e-2 + 1e-3);
    }
  }
}

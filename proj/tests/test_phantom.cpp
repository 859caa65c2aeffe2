#include <cmath>
#include <limits>
#include <set>
#include <tuple>

#include <gtest/gtest.h>

#include "tkpinn/phantom.hpp"

using namespace tkp;

TEST(GammaVariate, ZeroUpToOnset) {
  const auto g = GammaVariateAif::defaults();
  EXPECT_EQ(g(g.t0), 0.0);
  EXPECT_EQ(g(0.0), 0.0);
  EXPECT_GT(g(g.t0 + 0.01), 0.0);
}

TEST(GammaVariate, PeakAtShapeTimesScale) {
  const auto g = GammaVariateAif::defaults();
  const double tp = g.t0 + g.alpha * g.beta;
  EXPECT_DOUBLE_EQ(g.peak_time(), tp);
  for (double d : {-1e-3, 1e-3, -1e-2, 1e-2}) EXPECT_LT(g(tp + d), g(tp));
  EXPECT_NEAR(g.peak_value(), 5.0e-3, 1e-15);
}

TEST(GammaVariate, SampledPeakMatchesClosedForm) {
  const auto g = GammaVariateAif::defaults();
  const auto s = g.sample(TimeGrid{});
  // Closed form A s^a exp(-s/b) written out independently.
  const double A = g.amplitude, a = 2.5, b = 0.12, t0 = 0.1;
  double best = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double t = 0.02 * i;
    const double v = t <= t0 ? 0.0 : A * std::pow(t - t0, a) * std::exp(-(t - t0) / b);
    best = std::max(best, v);
    EXPECT_NEAR(s.values[static_cast<std::size_t>(i)], v, 1e-18);
  }
  EXPECT_NEAR(s.max(), best, 1e-18);
}

TEST(GammaVariate, RejectsNonPositiveShape) {
  EXPECT_THROW(GammaVariateAif::with_peak(5e-3, 0.1, 0.0, 0.12), InvalidInput);
  EXPECT_THROW(GammaVariateAif::with_peak(5e-3, 0.1, 2.5, -1.0), InvalidInput);
}

TEST(ParameterGrid, CoversAll144Combinations) {
  const auto blocks = build_parameter_grid();
  ASSERT_EQ(blocks.size(), 144u);
  std::set<std::tuple<double, double, double, double>> seen, expected;
  for (const auto& p : blocks) seen.insert({p.Fp, p.vp, p.ve, p.PS});
  for (double fp : {0.5, 1.0, 1.5, 2.0})
    for (double vp : {0.02, 0.05, 0.1, 0.2})
      for (double ve : {0.1, 0.2, 0.5})
        for (double ps : {0.5, 1.5, 2.5}) expected.insert({fp, vp, ve, ps});
  EXPECT_EQ(seen, expected);
}

TEST(ParameterGrid, OriginBlockAndAxisAssignment) {
  const auto blocks = build_parameter_grid();
  EXPECT_EQ(blocks[0], (KineticParams{0.5, 0.02, 0.1, 0.5}));
  const ParameterGrid g;
  for (std::size_t bz = 0; bz < 3; ++bz)
    for (std::size_t by = 0; by < 12; ++by)
      for (std::size_t bx = 0; bx < 4; ++bx) {
        const auto& p = blocks[(bz * 12 + by) * 4 + bx];
        EXPECT_EQ(p.Fp, g.fp[bx]);
        EXPECT_EQ(p.vp, g.vp[by / 3]);
        EXPECT_EQ(p.ve, g.ve[by % 3]);
        EXPECT_EQ(p.PS, g.ps[bz]);
      }
}

TEST(Dro, DimensionsAndBlockTruth) {
  DroConfig c;
  c.snr = std::numeric_limits<double>::infinity();
  const auto v = generate_dro(c);
  EXPECT_EQ(v.dims, (VolumeDims{40, 120, 3}));
  EXPECT_EQ(v.grid.n, 100u);
  EXPECT_EQ(v.curves.size(), 40u * 120u * 3u * 100u);
  const auto blocks = build_parameter_grid();
  for (std::size_t z = 0; z < 3; ++z)
    for (std::size_t y = 0; y < 120; ++y)
      for (std::size_t x = 0; x < 40; ++x) {
        const std::size_t i = v.dims.index(x, y, z);
        ASSERT_EQ(v.truth[i], blocks[(z * 12 + y / 10) * 4 + x / 10]);
      }
  // Each slice has one PS value.
  for (std::size_t z = 0; z < 3; ++z) {
    std::set<double> ps;
    for (std::size_t i = 0; i < v.dims.slice_size(); ++i) ps.insert(v.truth[z * v.dims.slice_size() + i].PS);
    EXPECT_EQ(ps.size(), 1u);
  }
}

TEST(Dro, NoiselessCurvesEqualSolverOutput) {
  DroConfig c;
  c.snr = std::numeric_limits<double>::infinity();
  const auto v = generate_dro(c);
  const auto aif = c.aif.sample(c.grid);
  for (std::size_t pix : {0ul, 517ul, 4799ul, 9000ul, 14399ul}) {
    const auto clean = solve_2cxm(v.truth[pix], aif, c.substeps).tissue.values;
    const auto curve = v.curve(pix);
    for (std::size_t i = 0; i < 100; ++i) ASSERT_EQ(curve[i], clean[i]);
  }
}

TEST(Dro, BlocksShareCleanCurvesAndAreNonNegative) {
  DroConfig c;
  c.snr = std::numeric_limits<double>::infinity();
  const auto v = generate_dro(c);
  for (std::size_t i = 0; i < v.truth.size(); ++i) {
    const auto curve = v.curve(i);
    const auto& clean = v.block_curves[v.block_of[i]];
    for (std::size_t t = 0; t < 100; ++t) {
      ASSERT_EQ(curve[t], clean[t]);
      ASSERT_GE(clean[t], 0.0);
    }
  }
}

TEST(Dro, SameSeedIsBitIdentical) {
  DroConfig c;
  c.seed = 42;
  const auto a = generate_dro(c);
  const auto b = generate_dro(c);
  EXPECT_EQ(a.curves, b.curves);
  c.seed = 43;
  EXPECT_NE(generate_dro(c).curves, a.curves);
}

TEST(Dro, NoiseIsUnclipped) {
  DroConfig c;
  c.seed = 9;
  const auto v = generate_dro(c);
  EXPECT_TRUE(std::any_of(v.curves.begin(), v.curves.end(), [](double x) { return x < 0.0; }));
}

TEST(Dro, PooledNoiseWithinFifteenPercent) {
  DroConfig c;
  c.seed = 11;
  const auto v = generate_dro(c);
  int within = 0, total = 0;
  for (std::size_t pix = 0; pix < v.truth.size(); pix += 13) {
    const auto& clean = v.block_curves[v.block_of[pix]];
    const double sigma = *std::max_element(clean.begin(), clean.end()) / 17.5;
    const auto curve = v.curve(pix);
    double ss = 0.0;
    for (std::size_t t = 0; t < 100; ++t) ss += (curve[t] - clean[t]) * (curve[t] - clean[t]);
    within += std::abs(std::sqrt(ss / 100.0) / sigma - 1.0) < 0.15;
    ++total;
  }
  // For 100 samples the sample std lies within 15% of sigma with probability ~0.97.
  EXPECT_GT(static_cast<double>(within) / total, 0.93);
}

TEST(Dro, MeanReferencedSnrUsesCurveMean) {
  const std::vector<double> clean{0.0, 1.0, 2.0, 3.0};
  EXPECT_DOUBLE_EQ(noise_sigma(clean, 10.0, SnrReference::Peak), 0.3);
  EXPECT_DOUBLE_EQ(noise_sigma(clean, 10.0, SnrReference::Mean), 0.15);
  EXPECT_EQ(noise_sigma(clean, std::numeric_limits<double>::infinity(), SnrReference::Peak), 0.0);
}

TEST(Dro, MiniGridHas16Blocks) {
  DroConfig c;
  c.parameters = ParameterGrid::mini();
  const auto v = generate_dro(c);
  EXPECT_EQ(v.dims, (VolumeDims{40, 40, 1}));
  std::set<std::pair<double, double>> fv;
  for (const auto& p : v.truth) {
    fv.insert({p.Fp, p.vp});
    EXPECT_EQ(p.ve, 0.2);
    EXPECT_EQ(p.PS, 1.5);
  }
  EXPECT_EQ(fv.size(), 16u);
}

TEST(Dro, RejectsNonPositiveSnr) {
  DroConfig c;
  c.snr = 0.0;
  EXPECT_THROW(generate_dro(c), InvalidInput);
}

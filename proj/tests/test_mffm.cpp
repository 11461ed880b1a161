#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "mmfusion/gradcheck.hpp"
#include "mmfusion/mffm.hpp"
#include "support.hpp"

namespace mmfusion {
namespace {

using testing::random_tensor;

MffmConfig small(std::size_t c = 4) {
  MffmConfig m;
  m.pooled_h = 2;
  m.pooled_w = 3;
  m.channels = c;
  m.post_channels = {3, c};
  return m;
}

void randomise(ParamStore<double>& p, std::uint64_t seed) {
  for (auto& [name, e] : p.entries()) e.value = random_tensor<double>(e.value.dims(), seed + name.size() * 7919, -0.5, 0.5);
}

void set_identity(ParamStore<double>& p, const std::string& prefix) {
  Tensor<double>& w = p.value(prefix + ".w");
  w.fill(0);
  for (std::size_t i = 0; i < w.dim(0); ++i) w.at(i, i) = 1;
  p.value(prefix + ".b").fill(0);
}

TEST(MffmConfig, DefaultsAndRejections) {
  const MffmConfig d;
  EXPECT_EQ(d.pooled_h, 25u);
  EXPECT_EQ(d.pooled_w, 22u);
  EXPECT_EQ(d.tokens(), 550u);
  EXPECT_EQ(d.channels, 256u);
  EXPECT_EQ(d.post_channels, (std::vector<std::size_t>{128, 256}));
  EXPECT_EQ(d.residual_mode, ResidualMode::kLiteralValue);
  MffmConfig bad = d;
  bad.pooled_h = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = d;
  bad.post_channels = {128, 64};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(PoolAndEncode, ConstantMapGivesConstantTokens) {
  const MffmConfig m = small();
  ParamStore<double> p(1);
  init_mffm_params(p, m);
  Tape<double> tape(false);
  auto t = pool_and_encode(tape.constant(Tensor<double>::full({4, 7, 5}, 1.5)),
                           tape.constant(random_tensor<double>({4, 3, 2}, 2)), m, p);
  EXPECT_EQ(t.lidar.dims(), (Shape{6, 4}));
  EXPECT_EQ(t.image.dims(), (Shape{6, 4}));
  for (double v : t.lidar.value().data()) EXPECT_DOUBLE_EQ(v, 1.5);
}

TEST(PoolAndEncode, DefaultGridUsesEightByEightWindows) {
  const MffmConfig d;
  ParamStore<float> p(0);
  init_mffm_params(p, d);
  const auto f_l = random_tensor<float>({256, 200, 176}, 3);
  Tape<float> tape(false);
  auto t = pool_and_encode(tape.constant(f_l), tape.constant(random_tensor<float>({256, 39, 11}, 4)), d, p);
  ASSERT_EQ(t.lidar.dims(), (Shape{550, 256}));
  for (std::size_t token : {0u, 1u, 22u, 549u}) {
    const std::size_t ty = token / 22, tx = token % 22;
    for (std::size_t ch : {0u, 255u}) {
      double s = 0;
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) s += f_l.at(ch, ty * 8 + y, tx * 8 + x);
      EXPECT_NEAR(t.lidar.value().at(token, ch), s / 64, 1e-6);
    }
  }
}

TEST(PoolAndEncode, SameSizeIsFlattening) {
  const MffmConfig m = small();
  ParamStore<double> p(1);
  init_mffm_params(p, m);
  const auto f_l = random_tensor<double>({4, 2, 3}, 5);
  Tape<double> tape(false);
  auto t = pool_and_encode(tape.constant(f_l), tape.constant(f_l), m, p);
  for (std::size_t tok = 0; tok < 6; ++tok)
    for (std::size_t ch = 0; ch < 4; ++ch) EXPECT_EQ(t.lidar.value().at(tok, ch), f_l[ch * 6 + tok]);
}

TEST(PoolAndEncode, ChannelMismatchIsShapeError) {
  const MffmConfig m = small();
  ParamStore<double> p(1);
  init_mffm_params(p, m);
  Tape<double> tape(false);
  EXPECT_THROW(pool_and_encode(tape.constant(Tensor<double>({4, 2, 3})), tape.constant(Tensor<double>({3, 2, 3})), m, p),
               ShapeError);
}

TEST(ProjectQkv, IdentityAndZeroPaths) {
  const MffmConfig m = small();
  ParamStore<double> p(2);
  init_mffm_params(p, m);
  set_identity(p, "mffm.phi");
  Tape<double> tape(false);
  const auto lidar = random_tensor<double>({6, 4}, 6);
  auto qkv = project_qkv(TokenPair<double>{tape.constant(lidar), tape.constant(Tensor<double>({6, 4}))}, p);
  EXPECT_EQ(qkv.q.value(), lidar);
  for (double v : qkv.k.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : qkv.v.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(ProjectQkv, TwoTokenScalarHandEvaluation) {
  MffmConfig m = small(1);
  m.post_channels = {};
  ParamStore<double> p;
  init_mffm_params(p, m);
  p.value("mffm.phi.w")[0] = 2;
  p.value("mffm.phi.b")[0] = 1;
  p.value("mffm.psi.w")[0] = -1;
  p.value("mffm.psi.b")[0] = 0.5;
  p.value("mffm.vartheta.w")[0] = 3;
  p.value("mffm.vartheta.b")[0] = 0;
  Tape<double> tape(false);
  auto qkv = project_qkv(TokenPair<double>{tape.constant(Tensor<double>({2, 1}, {1, 3})),
                                           tape.constant(Tensor<double>({2, 1}, {-1, 2}))},
                         p);
  EXPECT_EQ(qkv.q.value().storage(), (std::vector<double>{3, 7}));
  EXPECT_EQ(qkv.k.value().storage(), (std::vector<double>{1.5, -1.5}));
  EXPECT_EQ(qkv.v.value().storage(), (std::vector<double>{-3, 6}));
}

TEST(CrossAttention, SoftmaxOfTwoAndSix) {
  Tape<double> tape(false);
  auto r = cross_attention(tape.constant(Tensor<double>({1, 1}, {2})), tape.constant(Tensor<double>({2, 1}, {1, 3})),
                           tape.constant(Tensor<double>({2, 1}, {0, 1})));
  const double e4 = std::exp(4.0);
  EXPECT_NEAR(r.weights.value()[0], 1 / (1 + e4), 1e-15);
  EXPECT_NEAR(r.weights.value()[1], e4 / (1 + e4), 1e-15);
  EXPECT_NEAR(r.weights.value()[0], 0.0180, 5e-5);
  EXPECT_NEAR(r.weights.value()[1], 0.9820, 5e-5);
}

TEST(CrossAttention, EqualKeysAverageValues) {
  Tape<double> tape(false);
  Tensor<double> k({4, 3});
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t c = 0; c < 3; ++c) k.at(j, c) = 0.1 * static_cast<double>(c);
  const auto v = random_tensor<double>({4, 3}, 7);
  auto r = cross_attention(tape.constant(random_tensor<double>({2, 3}, 8)), tape.constant(k), tape.constant(v));
  for (double w : r.weights.value().data()) EXPECT_NEAR(w, 0.25, 1e-15);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double mean = (v.at(0, c) + v.at(1, c) + v.at(2, c) + v.at(3, c)) / 4;
      EXPECT_NEAR(r.attended.value().at(i, c), mean, 1e-15);
    }
}

TEST(CrossAttention, SingleToken) {
  Tape<double> tape(false);
  const auto v = random_tensor<double>({1, 5}, 9);
  auto r = cross_attention(tape.constant(random_tensor<double>({1, 5}, 1)), tape.constant(random_tensor<double>({1, 5}, 2)),
                           tape.constant(v));
  EXPECT_EQ(r.weights.value().storage(), (std::vector<double>{1.0}));
  EXPECT_EQ(r.attended.value(), v);
}

TEST(CrossAttention, NonFiniteLogitsAreNumericError) {
  Tape<double> tape(false);
  EXPECT_THROW(cross_attention(tape.constant(Tensor<double>({1, 1}, {INFINITY})),
                               tape.constant(Tensor<double>({2, 1}, {1, 2})), tape.constant(Tensor<double>({2, 1}))),
               NumericError);
}

TEST(CrossAttention, RowsAreStochasticAndShiftInvariant) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tape<double> tape(false);
    const auto q = random_tensor<double>({5, 4}, seed, -3, 3);
    const auto k = random_tensor<double>({5, 4}, seed + 100, -3, 3);
    auto w = cross_attention(tape.constant(q), tape.constant(k), tape.constant(Tensor<double>({5, 4}))).weights.value();
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_GT(w.at(i, j), 0.0);
        EXPECT_LE(w.at(i, j), 1.0);
        s += w.at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    // Shifting every key by the same vector adds q_i . u to each logit of row i.
    Tensor<double> k2 = k;
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t c = 0; c < 4; ++c) k2.at(j, c) += 0.3 * static_cast<double>(c + 1);
    auto w2 = cross_attention(tape.constant(q), tape.constant(k2), tape.constant(Tensor<double>({5, 4}))).weights.value();
    EXPECT_LT(testing::max_abs_diff(w, w2), 1e-6);
  }
}

TEST(Fuse, ZeroImageIsIdentityBeforeTheStack) {
  const MffmConfig m = small();
  ParamStore<double> p(3);
  init_mffm_params(p, m);
  const auto f_l = random_tensor<double>({4, 6, 5}, 10);
  Tape<double> tape(false);
  auto out = mffm_forward(tape.constant(f_l), tape.constant(Tensor<double>({4, 3, 2})), m, p);
  EXPECT_EQ(out.pre_stack.value(), f_l);
}

TEST(Fuse, ConstantImageTokensShiftEveryCell) {
  MffmConfig m = small(1);
  ParamStore<double> p;
  init_mffm_params(p, m);
  set_identity(p, "mffm.gamma");
  const auto f_l = random_tensor<double>({1, 6, 5}, 11);
  Tape<double> tape(false);
  auto fused = fuse_pre_stack(tape.constant(f_l), tape.constant(Tensor<double>::full({6, 1}, 0.25)),
                              tape.constant(Tensor<double>::full({6, 1}, 0.5)), tape.constant(Tensor<double>({6, 1})), m,
                              p)
                   .value();
  for (std::size_t i = 0; i < f_l.numel(); ++i) EXPECT_DOUBLE_EQ(fused[i], f_l[i] + 0.75);
}

TEST(Fuse, QuerySideResidualUsesLidarTokens) {
  MffmConfig m = small(1);
  m.residual_mode = ResidualMode::kQuerySide;
  ParamStore<double> p;
  init_mffm_params(p, m);
  set_identity(p, "mffm.gamma");
  const auto f_l = Tensor<double>({1, 2, 3});
  Tape<double> tape(false);
  auto fused = fuse_pre_stack(tape.constant(f_l), tape.constant(Tensor<double>({6, 1})),
                              tape.constant(Tensor<double>::full({6, 1}, 9.0)),
                              tape.constant(Tensor<double>::full({6, 1}, 2.0)), m, p)
                   .value();
  for (double v : fused.data()) EXPECT_EQ(v, 2.0);
}

TEST(Fuse, TwoTokenScalarHandEvaluation) {
  // f_L = [1, 2], f_I = [0, 1], every projection the identity: logits [[0, 1], [0, 2]],
  // f_F = f_L + W V + V.
  MffmConfig m;
  m.pooled_h = 1;
  m.pooled_w = 2;
  m.channels = 1;
  m.post_channels = {};
  ParamStore<double> p;
  init_mffm_params(p, m);
  for (const char* l : {"mffm.phi", "mffm.psi", "mffm.vartheta", "mffm.gamma"}) set_identity(p, l);
  Tape<double> tape(false);
  auto out = mffm_forward(tape.constant(Tensor<double>({1, 1, 2}, {1, 2})),
                          tape.constant(Tensor<double>({1, 1, 2}, {0, 1})), m, p);
  const double e = std::exp(1.0), e2 = std::exp(2.0);
  EXPECT_NEAR(out.fused.value()[0], 1 + e / (1 + e), 1e-15);
  EXPECT_NEAR(out.fused.value()[1], 2 + 1 + e2 / (1 + e2), 1e-15);
}

// Straight-line forward pass for maps whose pooled grid tiles f_L exactly and whose
// image map is one row high (so its pooling is a row broadcast plus column means).
struct MffmOracle {
  const ParamStore<double>& p;
  const MffmConfig& m;

  using Map = std::vector<std::vector<std::vector<double>>>;

  static Map from(const Tensor<double>& t) {
    Map out(t.dim(0), std::vector<std::vector<double>>(t.dim(1), std::vector<double>(t.dim(2))));
    for (std::size_t c = 0; c < t.dim(0); ++c)
      for (std::size_t y = 0; y < t.dim(1); ++y)
        for (std::size_t x = 0; x < t.dim(2); ++x) out[c][y][x] = t.at(c, y, x);
    return out;
  }

  static double bilinear(const std::vector<std::vector<double>>& a, std::size_t oy, std::size_t ox, std::size_t H,
                         std::size_t W) {
    const std::size_t h = a.size(), w = a[0].size();
    auto coord = [](std::size_t o, std::size_t out, std::size_t in, std::size_t& i0, std::size_t& i1, double& t) {
      double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      i0 = static_cast<std::size_t>(std::floor(s));
      i1 = std::min(i0 + 1, in - 1);
      t = s - static_cast<double>(i0);
    };
    std::size_t y0, y1, x0, x1;
    double ty, tx;
    coord(oy, H, h, y0, y1, ty);
    coord(ox, W, w, x0, x1, tx);
    return (1 - ty) * ((1 - tx) * a[y0][x0] + tx * a[y0][x1]) + ty * ((1 - tx) * a[y1][x0] + tx * a[y1][x1]);
  }

  std::vector<double> project(const std::string& l, const std::vector<double>& x) const {
    const auto& w = p.value(l + ".w");
    const auto& b = p.value(l + ".b");
    std::vector<double> y(w.dim(0));
    for (std::size_t k = 0; k < y.size(); ++k) {
      y[k] = b[k];
      for (std::size_t j = 0; j < x.size(); ++j) y[k] += w.at(k, j) * x[j];
    }
    return y;
  }

  Map conv(const Map& x, const std::string& l, std::size_t stride) const {
    const auto& w = p.value(l + ".w");
    const auto& b = p.value(l + ".b");
    const std::size_t cin = x.size(), h = x[0].size(), wd = x[0][0].size();
    const std::size_t oh = (h + 2 - 3) / stride + 1, ow = (wd + 2 - 3) / stride + 1;
    Map out(w.dim(0), std::vector<std::vector<double>>(oh, std::vector<double>(ow)));
    for (std::size_t o = 0; o < w.dim(0); ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double s = b[o];
          for (std::size_t i = 0; i < cin; ++i)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const long iy = static_cast<long>(y * stride + ky) - 1, ix = static_cast<long>(xx * stride + kx) - 1;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                s += w[((o * cin + i) * 3 + ky) * 3 + kx] * x[i][iy][ix];
              }
          out[o][y][xx] = s;
        }
    return out;
  }

  Map run(const Tensor<double>& f_l, const Tensor<double>& f_i) const {
    const std::size_t C = m.channels, ph = m.pooled_h, pw = m.pooled_w, n = ph * pw;
    const std::size_t H = f_l.dim(1), W = f_l.dim(2), wy = H / ph, wx = W / pw;
    const auto& pos_l = p.value("mffm.pos_lidar");
    const auto& pos_i = p.value("mffm.pos_image");
    std::vector<std::vector<double>> lt(n, std::vector<double>(C)), it(n, std::vector<double>(C));
    for (std::size_t ty = 0; ty < ph; ++ty)
      for (std::size_t tx = 0; tx < pw; ++tx)
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0;
          for (std::size_t y = 0; y < wy; ++y)
            for (std::size_t x = 0; x < wx; ++x) s += f_l.at(c, ty * wy + y, tx * wx + x);
          lt[ty * pw + tx][c] = s / static_cast<double>(wy * wx) + pos_l.at(c, ty, tx);
          const std::size_t iw = f_i.dim(2) / pw;
          double si = 0;
          for (std::size_t x = 0; x < iw; ++x) si += f_i.at(c, 0, tx * iw + x);
          it[ty * pw + tx][c] = si / static_cast<double>(iw) + pos_i.at(c, ty, tx);
        }
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      q[t] = project("mffm.phi", lt[t]);
      k[t] = project("mffm.psi", it[t]);
      v[t] = project("mffm.vartheta", it[t]);
    }
    Map small_map(C, std::vector<std::vector<double>>(ph, std::vector<double>(pw)));
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logit(n);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < C; ++c) s += q[i][c] * k[j][c];
        logit[j] = s / std::sqrt(static_cast<double>(C));
        mx = std::max(mx, logit[j]);
      }
      double z = 0;
      for (double& l : logit) z += (l = std::exp(l - mx));
      std::vector<double> a(C, 0.0);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = 0; c < C; ++c) a[c] += logit[j] / z * v[j][c];
      for (std::size_t c = 0; c < C; ++c) a[c] += v[i][c];
      const auto g = project("mffm.gamma", a);
      for (std::size_t c = 0; c < C; ++c) small_map[c][i / pw][i % pw] = g[c];
    }
    Map pre = from(f_l);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) pre[c][y][x] += bilinear(small_map[c], y, x, H, W);
    Map down = conv(pre, "mffm.down", 2);
    for (auto& ch : down)
      for (auto& r : ch)
        for (double& val : r) val = std::max(0.0, val);
    Map back(down.size(), std::vector<std::vector<double>>(H, std::vector<double>(W)));
    for (std::size_t c = 0; c < down.size(); ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) back[c][y][x] = bilinear(down[c], y, x, H, W);
    return conv(back, "mffm.up", 1);
  }
};

TEST(MffmForward, MatchesStraightLineOracle) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const MffmConfig m = small();
    ParamStore<double> p(seed);
    init_mffm_params(p, m);
    randomise(p, seed);
    const auto f_l = random_tensor<double>({4, 4, 6}, seed + 20);
    const auto f_i = random_tensor<double>({4, 1, 6}, seed + 30);
    Tape<double> tape(false);
    const auto got = mffm_forward(tape.constant(f_l), tape.constant(f_i), m, p).fused.value();
    const auto expect = MffmOracle{p, m}.run(f_l, f_i);
    ASSERT_EQ(got.dims(), (Shape{4, 4, 6}));
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 6; ++x) EXPECT_NEAR(got.at(c, y, x), expect[c][y][x], 1e-6);
  }
}

TEST(MffmForward, DefaultOutputDims) {
  const MffmConfig d;
  ParamStore<float> p(0);
  init_mffm_params(p, d);
  Tape<float> tape(false);
  auto out = mffm_forward(tape.constant(random_tensor<float>({256, 200, 176}, 1)),
                          tape.constant(random_tensor<float>({256, 39, 11}, 2)), d, p);
  EXPECT_EQ(out.fused.dims(), (Shape{256, 200, 176}));
  EXPECT_EQ(out.weights.dims(), (Shape{550, 550}));
}

TEST(MffmForward, OutputMatchesLidarDimsForRandomConfigs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SplitMix64 rng(seed);
    MffmConfig m;
    m.channels = 1 + rng.below(4);
    m.pooled_h = 1 + rng.below(4);
    m.pooled_w = 1 + rng.below(4);
    m.residual_mode = rng.below(2) ? ResidualMode::kLiteralValue : ResidualMode::kQuerySide;
    m.post_channels = rng.below(2) ? std::vector<std::size_t>{} : std::vector<std::size_t>{1 + rng.below(3), m.channels};
    ParamStore<double> p(seed);
    init_mffm_params(p, m);
    const std::size_t h = 1 + rng.below(9), w = 1 + rng.below(9);
    Tape<double> tape(false);
    auto out = mffm_forward(tape.constant(random_tensor<double>({m.channels, h, w}, seed)),
                            tape.constant(random_tensor<double>({m.channels, 1 + rng.below(5), 1 + rng.below(5)}, seed + 1)),
                            m, p);
    EXPECT_EQ(out.fused.dims(), (Shape{m.channels, h, w})) << seed;
  }
}

TEST(MffmForward, GradientsMatchFiniteDifferences) {
  const MffmConfig m = small();
  ParamStore<double> p(4);
  init_mffm_params(p, m);
  randomise(p, 4);
  const auto f_l = random_tensor<double>({4, 5, 4}, 1);
  const auto f_i = random_tensor<double>({4, 3, 2}, 2);
  const auto r = random_tensor<double>({4, 5, 4}, 3);
  Objective<double> f = [&](Tape<double>& t, ParamStore<double>& s) {
    return sum(mul(mffm_forward(t.constant(f_l), t.constant(f_i), m, s).fused, t.constant(r)));
  };
  GradCheckOptions opt;
  opt.tolerance = 1e-5;
  const auto report = grad_check(f, p, opt);
  EXPECT_TRUE(report.pass) << report.worst_name << " " << report.max_rel_error;
}

}  // namespace
}  // namespace mmfusion

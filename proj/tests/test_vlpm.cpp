#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "mmfusion/gradcheck.hpp"
#include "mmfusion/vlpm.hpp"
#include "support.hpp"

namespace mmfusion {
namespace {

using testing::random_tensor;

using Vec = std::vector<double>;

/// Builds a batch directly from per-voxel point lists, padded to `slots` rows.
VoxelBatch make_batch(const std::vector<std::vector<Point>>& voxels, std::size_t slots) {
  VoxelBatch b;
  b.max_points = slots;
  b.grid = GridDims{64, 64, 4};
  b.points.assign(voxels.size() * slots * 4, 0.0f);
  for (std::size_t k = 0; k < voxels.size(); ++k) {
    b.indices.push_back({static_cast<std::int32_t>(k), 0, 0});
    b.counts.push_back(static_cast<std::uint32_t>(voxels[k].size()));
    double m[4] = {0, 0, 0, 0};
    for (std::size_t s = 0; s < voxels[k].size(); ++s) {
      const Point& p = voxels[k][s];
      const float v[4] = {p.x, p.y, p.z, p.r};
      for (int c = 0; c < 4; ++c) {
        b.points[(k * slots + s) * 4 + c] = v[c];
        m[c] += v[c];
      }
    }
    for (double c : m) b.means.push_back(static_cast<float>(c / static_cast<double>(voxels[k].size())));
  }
  return b;
}

std::vector<std::vector<Point>> random_voxels(std::uint64_t seed, std::size_t k, std::size_t max_n) {
  SplitMix64 rng(seed);
  std::vector<std::vector<Point>> out(k);
  for (auto& v : out) {
    const std::size_t n = 1 + rng.below(max_n);
    const double x0 = rng.uniform(0, 10), y0 = rng.uniform(-5, 5), z0 = rng.uniform(-2, 0);
    for (std::size_t i = 0; i < n; ++i) {
      v.push_back({static_cast<float>(x0 + rng.uniform(0, 0.4)), static_cast<float>(y0 + rng.uniform(0, 0.4)),
                   static_cast<float>(z0 + rng.uniform(0, 0.5)), static_cast<float>(rng.uniform())});
    }
  }
  return out;
}

/// Initialised VLPM parameters with every bias randomised as well.
template <Real T>
ParamStore<T> random_vlpm_params(const VlpmConfig& config, std::uint64_t seed) {
  ParamStore<T> p(seed);
  init_vlpm_params(p, config);
  std::uint64_t salt = 0;
  for (auto& [name, e] : p.entries()) {
    if (name.back() == '1' || name.back() == '2') {
      if (name[name.size() - 2] == 'b') e.value = random_tensor<T>(e.value.dims(), seed * 131 + ++salt, -0.3, 0.3);
    }
  }
  return p;
}

void set_fc(ParamStore<double>& p, const std::string& prefix, Vec w1, Vec b1, Vec w2, Vec b2) {
  auto assign = [&](const std::string& n, Vec v) {
    Tensor<double>& t = p.value(prefix + "." + n);
    ASSERT_EQ(t.numel(), v.size()) << prefix << "." << n;
    std::copy(v.begin(), v.end(), t.data().begin());
  };
  assign("w1", std::move(w1));
  assign("b1", std::move(b1));
  assign("w2", std::move(w2));
  assign("b2", std::move(b2));
}

// relu(x + y + z) for a 3 -> 1 -> 1 block.
void set_sum3(ParamStore<double>& p, const std::string& prefix, double out_bias = 0) {
  set_fc(p, prefix, {1, 1, 1}, {0}, {1}, {out_bias});
}
// relu(u) + out_bias for a 1 -> 1 -> 1 block.
void set_unit(ParamStore<double>& p, const std::string& prefix, double out_bias = 0) {
  set_fc(p, prefix, {1}, {0}, {1}, {out_bias});
}

VlpmConfig scalar_config() {
  VlpmConfig c;
  c.feature_dim = 1;
  return c;
}

TEST(PointAttention, TwoPointScalarHandEvaluation) {
  // c1 = (1, 0, 0), c2 = (0, 2, 0), features 3 and 0.5, stage 2 (d_in = 1).
  // Q = K = (1, 2), V = (3, 0.5), p_ij = relu(s_i - s_j) = [[0, 0], [1, 0]],
  // w_ij = relu(Q_i - K_j + p_ij) + 1 = [[1, 1], [3, 1]], f = (3.5, 9.5).
  const VlpmConfig c = scalar_config();
  ParamStore<double> p;
  init_vlpm_params(p, c);
  for (const char* b : {"pam2.alpha", "pam2.beta", "pam2.delta"}) set_sum3(p, b);
  set_unit(p, "pam2.gamma");
  set_unit(p, "pam2.epsilon", 1.0);
  Tape<double> tape;
  auto f = point_attention(tape.constant(Tensor<double>({2, 3}, {1, 0, 0, 0, 2, 0})),
                           tape.constant(Tensor<double>({2, 1}, {3, 0.5})), p, c, 2)
               .value();
  EXPECT_EQ(f.storage(), (Vec{3.5, 9.5}));
}

TEST(PointAttention, SinglePointUnitWeight) {
  VlpmConfig c;
  c.feature_dim = 3;
  c.hidden.gamma = 6;
  ParamStore<double> p(1);
  init_vlpm_params(p, c);
  // gamma = identity through [I; -I] and [I, -I]; epsilon outputs ones.
  Tensor<double>& w1 = p.value("pam2.gamma.w1");
  Tensor<double>& w2 = p.value("pam2.gamma.w2");
  w1.fill(0);
  w2.fill(0);
  for (std::size_t i = 0; i < 3; ++i) {
    w1.at(i, i) = 1;
    w1.at(i + 3, i) = -1;
    w2.at(i, i) = 1;
    w2.at(i, i + 3) = -1;
  }
  p.value("pam2.epsilon.w2").fill(0);
  p.value("pam2.epsilon.b2").fill(1);
  const auto feat = random_tensor<double>({1, 3}, 5);
  Tape<double> tape;
  auto f = point_attention(tape.constant(random_tensor<double>({1, 3}, 6)), tape.constant(feat), p, c, 2).value();
  EXPECT_EQ(f, feat);
}

TEST(PointAttention, DuplicatePointsAgree) {
  VlpmConfig c;
  c.feature_dim = 4;
  auto p = random_vlpm_params<double>(c, 2);
  Tensor<double> coords({2, 3}, {0.3, -0.2, 0.7, 0.3, -0.2, 0.7});
  Tensor<double> feats({2, 4}, {0.1, 0.9, -0.4, 0.2, 0.1, 0.9, -0.4, 0.2});
  Tape<double> tape;
  auto f = point_attention(tape.constant(coords), tape.constant(feats), p, c, 1).value();
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(f.at(0, j), f.at(1, j));
}

TEST(PointAttention, EmptyVoxelIsDomainError) {
  VlpmConfig c;
  auto p = random_vlpm_params<double>(c, 0);
  Tape<double> tape;
  EXPECT_THROW(point_attention(tape.constant(Tensor<double>({0, 3})), tape.constant(Tensor<double>({0, 4})), p, c, 1),
               DomainError);
}

TEST(DynamicWeights, SinglePointUnitWeight) {
  VlpmConfig c;
  c.feature_dim = 3;
  auto p = random_vlpm_params<double>(c, 3);
  p.value("dwm.theta.w2").fill(0);
  p.value("dwm.theta.b2").fill(1);
  const auto feat = random_tensor<double>({1, 3}, 8);
  Tape<double> tape;
  auto out = dynamic_weights(tape.constant(random_tensor<double>({1, 3}, 9)), tape.constant(feat),
                             tape.constant(random_tensor<double>({1, 3}, 10)), p, c)
                 .value();
  EXPECT_EQ(out.storage(), feat.storage());
}

TEST(DynamicWeights, PointsAtMeanShareOneWeight) {
  VlpmConfig c;
  c.feature_dim = 3;
  auto p = random_vlpm_params<double>(c, 4);
  const Tensor<double> mean({1, 3}, {0.4, -0.1, 0.2});
  Tensor<double> coords({3, 3});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t a = 0; a < 3; ++a) coords.at(i, a) = mean[a];
  const auto feats = random_tensor<double>({3, 3}, 11);
  Tape<double> tape;
  auto out = dynamic_weights(tape.constant(coords), tape.constant(feats), tape.constant(mean), p, c).value();
  auto w = dynamic_weights(tape.constant(Tensor<double>({1, 3}, mean.storage())),
                           tape.constant(Tensor<double>::full({1, 3}, 1.0)), tape.constant(mean), p, c)
               .value();
  for (std::size_t j = 0; j < 3; ++j) {
    const double total = feats.at(0, j) + feats.at(1, j) + feats.at(2, j);
    EXPECT_NEAR(out[j], w[j] * total, 1e-12);
  }
}

TEST(DynamicWeights, TwoPointScalarHandEvaluation) {
  // c_mean = (0.5, 1, 0): zeta = 1.5, eta = (1, 2), w = relu(zeta - eta) + 1 = (1.5, 1),
  // output = 1.5 * 3 + 1 * 0.5 = 5.
  const VlpmConfig c = scalar_config();
  ParamStore<double> p;
  init_vlpm_params(p, c);
  set_sum3(p, "dwm.zeta");
  set_sum3(p, "dwm.eta");
  set_unit(p, "dwm.theta", 1.0);
  Tape<double> tape;
  auto out = dynamic_weights(tape.constant(Tensor<double>({2, 3}, {1, 0, 0, 0, 2, 0})),
                             tape.constant(Tensor<double>({2, 1}, {3, 0.5})),
                             tape.constant(Tensor<double>({1, 3}, {0.5, 1, 0})), p, c)
                 .value();
  EXPECT_EQ(out.storage(), (Vec{5.0}));
}

TEST(DynamicWeights, WidthMismatchIsShapeError) {
  VlpmConfig c;
  c.feature_dim = 3;
  auto p = random_vlpm_params<double>(c, 4);
  Tape<double> tape;
  EXPECT_THROW(dynamic_weights(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({2, 5})),
                               tape.constant(Tensor<double>({1, 3})), p, c),
               ShapeError);
}

// Straight-line re-evaluation of the point attention and dynamic weights equations.
struct Oracle {
  const ParamStore<double>& p;
  const VlpmConfig& c;

  Vec fc(const std::string& prefix, const Vec& x) const {
    const auto& w1 = p.value(prefix + ".w1");
    const auto& b1 = p.value(prefix + ".b1");
    const auto& w2 = p.value(prefix + ".w2");
    const auto& b2 = p.value(prefix + ".b2");
    const std::size_t hidden = w1.dim(0), in = w1.dim(1), out = w2.dim(0);
    Vec h(hidden);
    for (std::size_t k = 0; k < hidden; ++k) {
      double s = b1[k];
      for (std::size_t j = 0; j < in; ++j) s += w1.at(k, j) * x[j];
      h[k] = std::max(0.0, s);
    }
    Vec y(out);
    for (std::size_t k = 0; k < out; ++k) {
      double s = b2[k];
      for (std::size_t j = 0; j < hidden; ++j) s += w2.at(k, j) * h[j];
      y[k] = s;
    }
    return y;
  }

  Vec voxel(const std::vector<Point>& pts, const float* mean) const {
    const std::size_t n = pts.size(), d = c.feature_dim;
    auto norm = [&](double v, int a) { return (v - c.coord_offset[a]) / c.coord_scale[a]; };
    std::vector<Vec> coord(n), feat(n);
    for (std::size_t i = 0; i < n; ++i) {
      coord[i] = {norm(pts[i].x, 0), norm(pts[i].y, 1), norm(pts[i].z, 2)};
      feat[i] = {coord[i][0], coord[i][1], coord[i][2], static_cast<double>(pts[i].r)};
    }
    for (std::size_t s = 1; s <= c.num_pam_stages; ++s) {
      const std::string pre = "pam" + std::to_string(s);
      std::vector<Vec> next(n, Vec(d, 0.0));
      for (std::size_t i = 0; i < n; ++i) {
        const Vec q = fc(pre + ".alpha", coord[i]);
        std::vector<Vec> w(n);
        for (std::size_t j = 0; j < n; ++j) {
          const Vec k = fc(pre + ".beta", coord[j]);
          const Vec pe = fc(pre + ".delta", {coord[i][0] - coord[j][0], coord[i][1] - coord[j][1],
                                             coord[i][2] - coord[j][2]});
          Vec arg(d);
          for (std::size_t ch = 0; ch < d; ++ch) arg[ch] = q[ch] - k[ch] + pe[ch];
          w[j] = fc(pre + ".epsilon", arg);
        }
        if (c.normalize_pam_weights) {
          for (std::size_t ch = 0; ch < d; ++ch) {
            double mx = -INFINITY, z = 0;
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, w[j][ch]);
            for (std::size_t j = 0; j < n; ++j) z += std::exp(w[j][ch] - mx);
            for (std::size_t j = 0; j < n; ++j) w[j][ch] = std::exp(w[j][ch] - mx) / z;
          }
        }
        for (std::size_t j = 0; j < n; ++j) {
          const Vec v = fc(pre + ".gamma", feat[j]);
          for (std::size_t ch = 0; ch < d; ++ch) next[i][ch] += w[j][ch] * v[ch];
        }
      }
      feat = next;
    }
    const Vec cm{norm(mean[0], 0), norm(mean[1], 1), norm(mean[2], 2)};
    const Vec z = fc("dwm.zeta", cm);
    Vec out(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec e = fc("dwm.eta", coord[i]);
      Vec diff(d);
      for (std::size_t ch = 0; ch < d; ++ch) diff[ch] = z[ch] - e[ch];
      const Vec w = fc("dwm.theta", diff);
      for (std::size_t ch = 0; ch < d; ++ch) out[ch] += w[ch] * feat[i][ch];
    }
    return out;
  }
};

class VlpmOracle : public ::testing::TestWithParam<bool> {};

TEST_P(VlpmOracle, ThreeVoxelBatchMatchesBruteForce) {
  VlpmConfig c;
  c.feature_dim = 5;
  c.hidden.alpha = 3;
  c.hidden.epsilon = 7;
  c.normalize_pam_weights = GetParam();
  c.coord_offset = {-2.0, -6.0, -3.0};
  c.coord_scale = {6.0, 5.0, 2.0};
  const auto voxels = random_voxels(0, 3, 5);
  const VoxelBatch batch = make_batch(voxels, 5);
  auto p = random_vlpm_params<double>(c, 0);
  Tape<double> tape(false);
  const auto got = vlpm_forward(tape, batch, c, p).value();
  ASSERT_EQ(got.dims(), (Shape{3, 5}));
  const Oracle oracle{p, c};
  for (std::size_t k = 0; k < 3; ++k) {
    const Vec expect = oracle.voxel(voxels[k], batch.mean(k));
    for (std::size_t ch = 0; ch < 5; ++ch) EXPECT_NEAR(got.at(k, ch), expect[ch], 1e-12) << k << "," << ch;
  }
}

INSTANTIATE_TEST_SUITE_P(Normalisation, VlpmOracle, ::testing::Bool());

TEST(VlpmForward, EmptyBatch) {
  VlpmConfig c;
  auto p = random_vlpm_params<float>(c, 0);
  Tape<float> tape(false);
  EXPECT_EQ(vlpm_forward(tape, make_batch({}, 5), c, p).value().dims(), (Shape{0, 16}));
}

TEST(VlpmForward, SinglePointVoxelsComposeTheSinglePointPaths) {
  VlpmConfig c;
  c.feature_dim = 4;
  auto p = random_vlpm_params<double>(c, 6);
  const auto voxels = random_voxels(3, 4, 1);
  const VoxelBatch batch = make_batch(voxels, 3);
  Tape<double> tape(false);
  const auto got = vlpm_forward(tape, batch, c, p).value();
  for (std::size_t k = 0; k < voxels.size(); ++k) {
    const Point& pt = voxels[k][0];
    auto coord = tape.constant(Tensor<double>({1, 3}, {pt.x, pt.y, pt.z}));
    auto f = tape.constant(Tensor<double>({1, 4}, {pt.x, pt.y, pt.z, pt.r}));
    for (std::size_t s = 1; s <= 2; ++s) f = point_attention(coord, f, p, c, s);
    const auto mean = tape.constant(Tensor<double>({1, 3}, {batch.mean(k)[0], batch.mean(k)[1], batch.mean(k)[2]}));
    const auto out = dynamic_weights(coord, f, mean, p, c).value();
    for (std::size_t ch = 0; ch < 4; ++ch) EXPECT_EQ(got.at(k, ch), out[ch]);
  }
}

TEST(VlpmForward, PermutationInvariance) {
  VlpmConfig c;
  auto p = random_vlpm_params<float>(c, 1);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto voxels = random_voxels(seed + 50, 1, 5);
    Tape<float> tape(false);
    const auto a = vlpm_forward(tape, make_batch(voxels, 5), c, p).value();
    std::reverse(voxels[0].begin(), voxels[0].end());
    const auto b = vlpm_forward(tape, make_batch(voxels, 5), c, p).value();
    EXPECT_LT(testing::max_abs_diff(a, b), 1e-5);
  }
}

TEST(VlpmForward, PaddingIsNeverRead) {
  VlpmConfig c;
  auto p = random_vlpm_params<float>(c, 2);
  const auto voxels = random_voxels(7, 5, 4);
  VoxelBatch wide = make_batch(voxels, 9);
  // Garbage in the padding rows must not reach the output either.
  for (std::size_t k = 0; k < wide.size(); ++k)
    for (std::size_t s = wide.counts[k]; s < 9; ++s)
      for (int ch = 0; ch < 4; ++ch) wide.points[(k * 9 + s) * 4 + ch] = 1e6f;
  Tape<float> tape(false);
  EXPECT_EQ(vlpm_forward(tape, make_batch(voxels, 4), c, p).value(), vlpm_forward(tape, wide, c, p).value());
}

TEST(VlpmForward, VoxelsAreIndependent) {
  VlpmConfig c;
  auto p = random_vlpm_params<double>(c, 3);
  auto voxels = random_voxels(8, 4, 4);
  Tape<double> tape(false);
  const auto a = vlpm_forward(tape, make_batch(voxels, 4), c, p).value();
  voxels[2][0].x += 0.05f;
  voxels[2][0].r = 0.9f;
  const auto b = vlpm_forward(tape, make_batch(voxels, 4), c, p).value();
  for (std::size_t k = 0; k < 4; ++k) {
    bool changed = false;
    for (std::size_t ch = 0; ch < c.feature_dim; ++ch) changed |= a.at(k, ch) != b.at(k, ch);
    EXPECT_EQ(changed, k == 2) << k;
  }
}

TEST(VlpmForward, MeanBaselineAndRawPointModes) {
  VlpmConfig c;
  c.mean_baseline = true;
  ParamStore<double> none;
  init_vlpm_params(none, c);
  EXPECT_EQ(none.size(), 0u);
  const auto voxels = random_voxels(4, 3, 3);
  const VoxelBatch batch = make_batch(voxels, 3);
  Tape<double> tape(false);
  const auto m = vlpm_forward(tape, batch, c, none).value();
  for (std::size_t k = 0; k < 3; ++k)
    for (int ch = 0; ch < 4; ++ch) EXPECT_EQ(m.at(k, ch), static_cast<double>(batch.mean(k)[ch]));

  VlpmConfig raw;
  raw.dwm_input = DwmInput::kRawPoints;
  auto p = random_vlpm_params<double>(raw, 5);
  EXPECT_EQ(vlpm_forward(tape, batch, raw, p).value().dims(), (Shape{3, 4}));
}

TEST(VlpmForward, GradientsMatchFiniteDifferences) {
  VlpmConfig c;
  c.feature_dim = 3;
  c.normalize_pam_weights = true;
  auto p = random_vlpm_params<double>(c, 9);
  const VoxelBatch batch = make_batch(random_voxels(10, 3, 3), 3);
  const auto readout = random_tensor<double>({3, 3}, 12);
  Objective<double> f = [&](Tape<double>& t, ParamStore<double>& s) {
    return sum(mul(vlpm_forward(t, batch, c, s), t.constant(readout)));
  };
  GradCheckOptions opt;
  opt.tolerance = 1e-5;
  const auto report = grad_check(f, p, opt);
  EXPECT_TRUE(report.pass) << report.worst_name << " " << report.max_rel_error;
  EXPECT_EQ(report.entries.size(), p.size());
}

}  // namespace
}  // namespace mmfusion

#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "smoothnet/net.hpp"
#include "smoothnet/sdv.hpp"

using namespace smoothnet;
using namespace smoothnet::net;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::InvariantViolation;
}

Tensor random_input(std::mt19937_64& rng, int n, int s) {
  Tensor t(n, 1, s);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : t.data) v = u(rng) < 0.4 ? u(rng) : 0.0;
  return t;
}

Architecture tiny_arch(int dim = 4) {
  return parse_architecture("conv:3:3:1:1,bn,relu,dropout:0.3,conv:D:final:1:0,bn,l2norm", 4, dim);
}

double weighted_sum(const RowMatrix& d, const RowMatrix& up) { return (d.array() * up.array()).sum(); }

}  // namespace

TEST(Architecture, PresetsReduceToDescriptor) {
  for (const char* preset : {"default", "compact"}) {
    const auto arch = parse_architecture(preset, 16, 32);
    EXPECT_EQ(layer_extents(arch).back(), 1);
    EXPECT_EQ(output_dim(arch), 32);
    EXPECT_EQ(arch.layers.back().kind, LayerKind::L2Norm);
  }
  const auto def = parse_architecture("default", 16, 16);
  int convs = 0;
  for (const auto& l : def.layers) convs += l.kind == LayerKind::Conv3d;
  EXPECT_EQ(convs, 7);
  EXPECT_EQ(def.layers[def.layers.size() - 3].kernel, 4);  // 16 -> 8 -> 4, final conv spans 4^3
}

TEST(Architecture, Rejections) {
  EXPECT_EQ(code_of([] { parse_architecture("conv:4:3:1:1,l2norm", 16, 8); }), ErrorCode::BadArchitecture);
  EXPECT_EQ(code_of([] { parse_architecture("conv:4:x:1:1", 16, 8); }), ErrorCode::BadArchitecture);
  EXPECT_EQ(code_of([] { parse_architecture("pool", 16, 8); }), ErrorCode::BadArchitecture);
  EXPECT_EQ(code_of([] { parse_architecture("conv:4:3:3:1,conv:D:final:1:0", 16, 8); }), ErrorCode::BadArchitecture);
  EXPECT_EQ(code_of([] { parse_architecture("dropout:1.0,conv:D:final:1:0", 16, 8); }), ErrorCode::BadArchitecture);
}

TEST(Init, OrthogonalRowsScaledByGain) {
  const auto p = init_params(parse_architecture("default", 16, 32), 7);
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& s = p.arch.layers[li];
    if (s.kind != LayerKind::Conv3d) continue;
    const int fan_in = s.in_channels * s.kernel * s.kernel * s.kernel;
    Eigen::Map<const RowMatrix> w(p.layers[li].weight.data(), s.out_channels, fan_in);
    const Eigen::MatrixXd gram = s.out_channels <= fan_in ? Eigen::MatrixXd(w * w.transpose()) : Eigen::MatrixXd(w.transpose() * w);
    EXPECT_LT((gram - 0.36 * Eigen::MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff(), 1e-6) << li;
    for (double b : p.layers[li].bias) EXPECT_EQ(b, 0.01);
  }
}

TEST(Init, WideLayerGetsOrthonormalColumns) {
  // First conv of a 1-channel k1 net: 8 outputs from a fan-in of 1.
  const auto arch = parse_architecture("conv:8:1:1:0,conv:D:final:1:0", 2, 3);
  const auto p = init_params(arch, 1);
  Eigen::Map<const RowMatrix> w(p.layers[0].weight.data(), 8, 1);
  EXPECT_NEAR((w.transpose() * w)(0, 0), 0.36, 1e-12);
}

TEST(Init, DeterministicAndBatchNormDefaults) {
  const auto arch = parse_architecture("compact", 16, 16);
  const auto a = init_params(arch, 42), b = init_params(arch, 42), c = init_params(arch, 43);
  EXPECT_TRUE(a.same_values(b));
  EXPECT_FALSE(a.same_values(c));
  for (std::size_t li = 0; li < a.layers.size(); ++li) {
    if (arch.layers[li].kind != LayerKind::BatchNorm) continue;
    for (double m : a.layers[li].running_mean) EXPECT_EQ(m, 0.0);
    for (double v : a.layers[li].running_var) EXPECT_EQ(v, 1.0);
  }
}

TEST(Forward, ZeroGridGivesFiniteUnitVector) {
  const auto p = init_params(parse_architecture("compact", 16, 16), 3);
  const std::vector<SdvGrid> grids{SdvGrid(16)};
  for (auto mode : {Mode::Infer, Mode::Train}) {
    const auto out = forward(p, grids, mode, 1);
    ASSERT_TRUE(out.descriptors.allFinite());
    if (mode == Mode::Infer) {
      EXPECT_NEAR(out.descriptors.row(0).norm(), 1.0, 1e-9);
    }
  }
}

TEST(Forward, UnitNormBothModes) {
  std::mt19937_64 rng(4);
  const auto p = init_params(parse_architecture("compact", 16, 16), 4);
  const auto x = random_input(rng, 6, 16);
  for (auto mode : {Mode::Infer, Mode::Train}) {
    const auto out = forward(p, x, mode, 9);
    for (int i = 0; i < out.descriptors.rows(); ++i) EXPECT_NEAR(out.descriptors.row(i).norm(), 1.0, 1e-9);
  }
}

TEST(Forward, InferIsPureAndPerSample) {
  std::mt19937_64 rng(5);
  const auto p = init_params(parse_architecture("compact", 16, 8), 5);
  auto x = random_input(rng, 3, 16);
  std::copy_n(x.sample(0), x.sample_size(), x.sample(2));
  const auto a = forward(p, x, Mode::Infer, 1).descriptors;
  const auto b = forward(p, x, Mode::Infer, 99).descriptors;
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.row(0), a.row(2));
  Tensor single(1, 1, 16);
  std::copy_n(x.sample(1), x.sample_size(), single.sample(0));
  EXPECT_EQ(forward(p, single, Mode::Infer).descriptors.row(0), a.row(1));
}

TEST(Forward, HandComputedConvolution) {
  // 2^3 input, single 2^3 kernel: output = sum(w * x) + b.
  const auto arch = parse_architecture("conv:1:2:1:0", 2, 1);
  auto p = init_params(arch, 0);
  Tensor x(1, 1, 2);
  for (int i = 0; i < 8; ++i) {
    x.data[static_cast<std::size_t>(i)] = i + 1;
    p.layers[0].weight[static_cast<std::size_t>(i)] = (i % 2 == 0 ? 1.0 : -0.5);
  }
  p.layers[0].bias[0] = 0.25;
  // (1+3+5+7) - 0.5*(2+4+6+8) + 0.25 = 16 - 10 + 0.25
  EXPECT_DOUBLE_EQ(forward(p, x, Mode::Infer).descriptors(0, 0), 6.25);
}

TEST(Forward, ImpulseKernelShifts) {
  // One-hot at (kz,ky,kx) = (1,1,2) with pad 1: y(z,y,x) = x(z, y, x+1).
  const auto spec = LayerSpec::conv(1, 1, 3, 1, 1);
  LayerParams lp;
  lp.weight.assign(27, 0.0);
  lp.weight[(1 * 3 + 1) * 3 + 2] = 1.0;
  lp.bias.assign(1, 0.0);
  std::mt19937_64 rng(6);
  const auto x = random_input(rng, 1, 5);
  const auto y = detail::conv_forward(x, spec, lp);
  for (int z = 0; z < 5; ++z) {
    for (int yy = 0; yy < 5; ++yy) {
      for (int xx = 0; xx < 5; ++xx) {
        const double expect = xx + 1 < 5 ? x.data[static_cast<std::size_t>((z * 5 + yy) * 5 + xx + 1)] : 0.0;
        EXPECT_EQ(y.data[static_cast<std::size_t>((z * 5 + yy) * 5 + xx)], expect);
      }
    }
  }
}

TEST(Forward, StridedOutputExtent) {
  const auto g = detail::geometry(LayerSpec::conv(1, 2, 3, 2, 1), 16);
  EXPECT_EQ(g.out_s, 8);
}

TEST(Forward, ShapeMismatch) {
  const auto p = init_params(parse_architecture("compact", 16, 8), 5);
  const std::vector<SdvGrid> wrong{SdvGrid(8)};
  EXPECT_EQ(code_of([&] { forward(p, wrong, Mode::Infer); }), ErrorCode::ShapeMismatch);
}

TEST(Forward, DropoutMasksFollowSeed) {
  std::mt19937_64 rng(7);
  const auto p = init_params(tiny_arch(), 8);
  const auto x = random_input(rng, 4, 4);
  const auto a = forward(p, x, Mode::Train, 5);
  const auto b = forward(p, x, Mode::Train, 5);
  const auto c = forward(p, x, Mode::Train, 6);
  EXPECT_EQ(a.descriptors, b.descriptors);
  EXPECT_NE(a.descriptors, c.descriptors);
  const auto& mask = a.cache.layers[3].aux;
  ASSERT_EQ(mask.size(), 4u * 3 * 64);
  const auto dropped = std::count(mask.begin(), mask.end(), 0.0);
  EXPECT_GT(dropped, 0);
  EXPECT_LT(dropped, static_cast<long>(mask.size()));
  for (double m : mask) EXPECT_TRUE(m == 0.0 || std::abs(m - 1.0 / 0.7) < 1e-15);
}

TEST(Backward, ZeroUpstreamZeroGradients) {
  std::mt19937_64 rng(8);
  const auto p = init_params(tiny_arch(), 9);
  const auto fwd = forward(p, random_input(rng, 4, 4), Mode::Train, 1);
  const auto g = backward(p, fwd.cache, RowMatrix::Zero(4, 4));
  for (const auto& t : g.weight) {
    for (double v : t) EXPECT_EQ(v, 0.0);
  }
  for (const auto& t : g.bias) {
    for (double v : t) EXPECT_EQ(v, 0.0);
  }
}

TEST(Backward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto p = init_params(tiny_arch(), 10);
  const auto x = random_input(rng, 4, 4);
  RowMatrix up(4, 4);
  std::normal_distribution<double> g;
  for (int i = 0; i < up.size(); ++i) up.data()[i] = g(rng);
  const auto fwd = forward(p, x, Mode::Train, 3);
  const auto grads = backward(p, fwd.cache, up);
  const auto rep = smoothnet::testing::gradient_check(
      p, grads, [&](const NetworkParams& q) { return weighted_sum(forward(q, x, Mode::Train, 3).descriptors, up); },
      [&](const NetworkParams& q) { return smoothnet::testing::relu_pattern(forward(q, x, Mode::Train, 3).cache, q.arch); });
  EXPECT_EQ(rep.checked, 3u * 27 + 3 + 4u * 3 * 64 + 4);
  EXPECT_LE(rep.worst, 1e-4) << rep.worst_where;
}

TEST(Backward, FiniteDifferencesThroughStridedStack) {
  std::mt19937_64 rng(10);
  const auto arch = parse_architecture("conv:2:3:2:1,bn,relu,conv:3:3:1:1,bn,relu,conv:D:final:1:0,bn,l2norm", 6, 3);
  auto p = init_params(arch, 11);
  const auto x = random_input(rng, 3, 6);
  RowMatrix up(3, 3);
  std::normal_distribution<double> g;
  for (int i = 0; i < up.size(); ++i) up.data()[i] = g(rng);
  const auto grads = backward(p, forward(p, x, Mode::Train).cache, up);
  const auto rep = smoothnet::testing::gradient_check(
      p, grads, [&](const NetworkParams& q) { return weighted_sum(forward(q, x, Mode::Train).descriptors, up); },
      [&](const NetworkParams& q) { return smoothnet::testing::relu_pattern(forward(q, x, Mode::Train).cache, q.arch); });
  EXPECT_LE(rep.worst, 1e-4) << rep.worst_where;
}

TEST(Backward, StaleCacheDetected) {
  std::mt19937_64 rng(11);
  auto p = init_params(tiny_arch(), 12);
  const auto x = random_input(rng, 4, 4);
  const auto infer = forward(p, x, Mode::Infer);
  EXPECT_EQ(code_of([&] { backward(p, infer.cache, RowMatrix::Zero(4, 4)); }), ErrorCode::StaleCache);
  const auto train = forward(p, x, Mode::Train, 1);
  update_running_stats(p, train.cache, 0.99);
  EXPECT_EQ(code_of([&] { backward(p, train.cache, RowMatrix::Zero(4, 4)); }), ErrorCode::StaleCache);
}

TEST(RunningStats, MomentumUpdate) {
  std::mt19937_64 rng(12);
  auto p = init_params(tiny_arch(), 13);
  const auto fwd = forward(p, random_input(rng, 4, 4), Mode::Train, 1);
  update_running_stats(p, fwd.cache, 0.99);
  for (int ch = 0; ch < 3; ++ch) {
    EXPECT_NEAR(p.layers[1].running_mean[ch], 0.01 * fwd.cache.layers[1].batch_mean[ch], 1e-17);
    EXPECT_NEAR(p.layers[1].running_var[ch], 0.99 + 0.01 * fwd.cache.layers[1].batch_var[ch], 1e-15);
  }
}

// --- weight files ------------------------------------------------------------

TEST(WeightFile, RoundTripIsStable) {
  auto p = init_params(parse_architecture("compact", 16, 16), 14);
  p.layers[1].running_mean[0] = 0.125;
  const auto bytes = format_params(p);
  const auto back = parse_params(bytes);
  EXPECT_EQ(format_params(back), bytes);
  EXPECT_EQ(back.arch.layers.size(), p.arch.layers.size());
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    for (std::size_t i = 0; i < p.layers[li].weight.size(); ++i) {
      EXPECT_EQ(back.layers[li].weight[i], static_cast<double>(static_cast<float>(p.layers[li].weight[i])));
    }
  }
  // Params already on the f32 grid come back bit-identical.
  EXPECT_TRUE(parse_params(format_params(back)).same_values(back));

  const auto path = std::filesystem::temp_directory_path() / "smoothnet_net_weights.sdvw";
  save_params(path, back);
  EXPECT_TRUE(load_params(path, back.arch).same_values(back));
  EXPECT_EQ(code_of([&] { load_params(path, parse_architecture("compact", 16, 8)); }), ErrorCode::ShapeMismatch);
  EXPECT_EQ(code_of([&] { load_params(path, parse_architecture("default", 16, 16)); }), ErrorCode::ShapeMismatch);
}

TEST(WeightFile, CorruptInputs) {
  const auto bytes = format_params(init_params(tiny_arch(), 15));
  EXPECT_EQ(code_of([&] { parse_params("SDVX" + bytes.substr(4)); }), ErrorCode::BadMagic);
  std::string v = bytes;
  v[4] = 9;
  EXPECT_EQ(code_of([&] { parse_params(v); }), ErrorCode::VersionMismatch);
  for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{20}}) {
    const auto c = code_of([&] { parse_params(bytes.substr(0, cut)); });
    EXPECT_TRUE(c == ErrorCode::TruncatedPayload || c == ErrorCode::ShapeMismatch);
  }
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 1000; ++trial) {
    std::string f = bytes;
    for (int k = 0; k < 3; ++k) f[rng() % f.size()] = static_cast<char>(rng());
    try {
      parse_params(f);
    } catch (const Error&) {
    }
  }
}

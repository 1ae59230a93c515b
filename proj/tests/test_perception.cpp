#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "horec/perception.hpp"
#include "support/gradcheck.hpp"

using namespace horec;
namespace ts = horec::testsupport;

namespace {

Tensor<float> random_f32(Shape s, Rng& rng, float lo, float hi) {
  Tensor<float> t(std::move(s));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

percept::DepthNetConfig tiny_depth_cfg(int hw) {
  percept::DepthNetConfig cfg;
  cfg.encoder.widths = {2, 2, 2, 2};
  cfg.encoder.norm_groups = 1;
  cfg.encoder.input_hw = hw;
  cfg.decoder_widths = {2, 2, 2, 2};
  return cfg;
}

}  // namespace

TEST_CASE("depth output matches input resolution and stays nonnegative") {
  for (int hw : {64, 96, 128}) {
    nn::ParamStore<float> ps;
    Rng rng(3);
    percept::DepthNet<float> net(ps, "dn", tiny_depth_cfg(hw), rng);
    Rng drng(4);
    auto rgb = ad::Var<float>::constant(random_f32({1, 3, hw, hw}, drng, 0.f, 1.f));
    auto out = net(rgb);
    REQUIRE(out.value().dim(0) == 1);
    REQUIRE(out.value().dim(1) == 1);
    REQUIRE(out.value().dim(2) == hw);
    REQUIRE(out.value().dim(3) == hw);
    for (std::int64_t i = 0; i < out.value().numel(); ++i)
      REQUIRE(out.value()[i] >= 0.0f);

    auto out2 = net(rgb);
    for (std::int64_t i = 0; i < out.value().numel(); ++i)
      REQUIRE(out.value()[i] == out2.value()[i]);
  }
}

TEST_CASE("depth estimator rejects mismatched inputs") {
  nn::ParamStore<float> ps;
  Rng rng(3);
  percept::DepthNet<float> net(ps, "dn", tiny_depth_cfg(32), rng);
  auto bad = ad::Var<float>::constant(Tensor<float>::zeros({1, 3, 16, 16}));
  REQUIRE_THROWS_WITH(net(bad), Catch::Matchers::ContainsSubstring("dimension mismatch"));
  auto bad_ch = ad::Var<float>::constant(Tensor<float>::zeros({1, 4, 32, 32}));
  REQUIRE_THROWS_WITH(net(bad_ch), Catch::Matchers::ContainsSubstring("dimension mismatch"));
}

TEST_CASE("masked depth loss hits its closed-form fixtures") {
  Rng rng(7);
  Shape s{1, 1, 24, 24};
  Tensor<double> truth(s);
  Tensor<std::uint8_t> mask(s);
  std::int64_t valid = 0;
  for (std::int64_t i = 0; i < truth.numel(); ++i) {
    mask[i] = rng.uniform() < 0.6 ? 1 : 0;
    truth[i] = mask[i] ? rng.uniform(200.0, 800.0) : 0.0;
    valid += mask[i];
  }
  REQUIRE(valid > 0);

  SECTION("identical prediction") {
    auto pred = ad::Var<double>::leaf(truth, true);
    auto parts = percept::depth_loss<double>(pred, truth, mask);
    REQUIRE(parts.l1.item() == 0.0);
    REQUIRE(parts.ssim_mean == 1.0);
    REQUIRE(parts.ssim_term.item() == 1.0 / 1000.0);
    REQUIRE(parts.total.item() == 0.001);
  }

  SECTION("constant 1 mm offset") {
    Tensor<double> shifted = truth;
    for (std::int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += 1.0;
    auto pred = ad::Var<double>::leaf(shifted, false);
    // keep at least one trainable node so backward() stays legal elsewhere
    auto parts = percept::depth_loss<double>(pred, truth, mask);
    REQUIRE(parts.l1.item() == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(parts.total.item() > parts.ssim_term.item());
  }

  SECTION("offsets are always detected") {
    for (double c : {-40.0, -2.0, 5.0, 120.0}) {
      Tensor<double> shifted = truth;
      for (std::int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += c;
      auto pred = ad::Var<double>::leaf(shifted, false);
      auto parts = percept::depth_loss<double>(pred, truth, mask);
      REQUIRE(parts.l1.item() == Catch::Approx(std::abs(c)).margin(1e-9));
    }
  }

  SECTION("empty mask is an error") {
    Tensor<std::uint8_t> none(s);
    auto pred = ad::Var<double>::leaf(truth, false);
    REQUIRE_THROWS_WITH(percept::depth_loss<double>(pred, truth, none),
                        Catch::Matchers::ContainsSubstring("no foreground"));
  }
}

TEST_CASE("ssim matches a direct single-window reference") {
  Rng rng(19);
  Shape s{1, 1, 32, 32};
  Tensor<double> xa(s), yb(s);
  for (std::int64_t i = 0; i < xa.numel(); ++i) {
    xa[i] = rng.uniform(100.0, 900.0);
    yb[i] = rng.uniform(100.0, 900.0);
  }
  double range = 750.0;
  auto map = percept::ssim_map<double>(ad::Var<double>::constant(xa),
                                       ad::Var<double>::constant(yb), range);

  // Independent pixel-level reference at an interior pixel (15,15): direct
  // Gaussian-weighted moments over the 11x11 patch.
  const double sigma = 1.5;
  double wsum = 0.0;
  double w[11][11];
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      double di = i - 5, dj = j - 5;
      w[i][j] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
      wsum += w[i][j];
    }
  double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      double ww = w[i][j] / wsum;
      double xv = xa.at(0, 0, 10 + i, 10 + j), yv = yb.at(0, 0, 10 + i, 10 + j);
      mx += ww * xv;
      my += ww * yv;
      mxx += ww * xv * xv;
      myy += ww * yv * yv;
      mxy += ww * xv * yv;
    }
  double sx = mxx - mx * mx, sy = myy - my * my, sxy = mxy - mx * my;
  double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
  double want = ((2 * mx * my + c1) * (2 * sxy + c2)) /
                ((mx * mx + my * my + c1) * (sx + sy + c2));
  REQUIRE(map.value().at(0, 0, 15, 15) == Catch::Approx(want).margin(1e-9));
}

TEST_CASE("ssim is symmetric, capped at one, and maximal only on identity") {
  Rng rng(23);
  Shape s{1, 1, 20, 20};
  Tensor<double> a(s), b(s);
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    a[i] = rng.uniform(0.0, 500.0);
    b[i] = rng.uniform(0.0, 500.0);
  }
  auto va = ad::Var<double>::constant(a);
  auto vb = ad::Var<double>::constant(b);
  auto ab = percept::ssim_map<double>(va, vb, 500.0);
  auto ba = percept::ssim_map<double>(vb, va, 500.0);
  double mean_ab = 0;
  for (std::int64_t i = 0; i < ab.value().numel(); ++i) {
    REQUIRE(ab.value()[i] == ba.value()[i]);
    REQUIRE(ab.value()[i] <= 1.0 + 1e-12);
    mean_ab += ab.value()[i];
  }
  mean_ab /= static_cast<double>(ab.value().numel());
  REQUIRE(mean_ab < 1.0);

  auto aa = percept::ssim_map<double>(va, va, 500.0);
  for (std::int64_t i = 0; i < aa.value().numel(); ++i)
    REQUIRE(aa.value()[i] == 1.0);
}

TEST_CASE("depth loss gradient matches finite differences on a 16x16 toy") {
  nn::ParamStore<double> ps;
  Rng rng(11);
  percept::DepthNet<double> net(ps, "dn", tiny_depth_cfg(16), rng);
  // Zero-initialized biases leave some preactivations exactly at the relu
  // kink, where central differences straddle the corner; jitter every
  // parameter so the check runs at a smooth point.
  for (auto* p : ps.with_prefix("dn"))
    for (std::int64_t i = 0; i < p->value().numel(); ++i)
      p->value()[i] += rng.uniform(-0.08, 0.08);
  Rng drng(13);
  Tensor<double> rgb_t({1, 3, 16, 16});
  for (std::int64_t i = 0; i < rgb_t.numel(); ++i) rgb_t[i] = drng.uniform(0.0, 1.0);
  Tensor<double> truth({1, 1, 16, 16});
  Tensor<std::uint8_t> mask({1, 1, 16, 16});
  for (std::int64_t i = 0; i < truth.numel(); ++i) {
    mask[i] = drng.uniform() < 0.5 ? 1 : 0;
    truth[i] = mask[i] ? drng.uniform(100.0, 900.0) : 0.0;
  }

  auto loss = [&]() {
    auto pred = net(ad::Var<double>::constant(rgb_t));
    return percept::depth_loss<double>(pred, truth, mask).total;
  };
  auto rep = ts::fd_check_params(ps.with_prefix("dn"), loss, 4);
  INFO("coords " << rep.coords_checked << " max rel err " << rep.max_rel_err);
  REQUIRE(rep.coords_checked > 30);
  REQUIRE(rep.max_rel_err <= 1e-4);
}

TEST_CASE("branch encoders separate and the shared variant balances parameters") {
  percept::BranchEncodersConfig cfg;
  cfg.encoder.input_hw = 96;

  nn::ParamStore<float> ps;
  Rng rng(41);
  percept::BranchEncoders<float> two(ps, "enc", cfg, rng);

  Rng drng(43);
  auto rgb = ad::Var<float>::constant(random_f32({1, 3, 96, 96}, drng, 0.f, 1.f));
  auto depth = ad::Var<float>::constant(random_f32({1, 1, 96, 96}, drng, 300.f, 700.f));
  auto fh = two.encode(rgb, depth, percept::Branch::hand);
  auto fo = two.encode(rgb, depth, percept::Branch::object);
  REQUIRE(fh.value().dim(1) == 512);
  REQUIRE(fo.value().dim(1) == 512);
  double diff = 0;
  for (std::int64_t i = 0; i < fh.value().numel(); ++i)
    diff = std::max(diff, std::abs(static_cast<double>(fh.value()[i]) - fo.value()[i]));
  REQUIRE(diff > 1e-4);

  auto numel_of = [](nn::ParamStore<float>& store, const std::string& prefix) {
    std::int64_t n = 0;
    for (auto* p : store.with_prefix(prefix)) n += p->value().numel();
    return n;
  };
  std::int64_t two_total = numel_of(ps, "enc.hand") + numel_of(ps, "enc.obj");

  percept::BranchEncodersConfig shared_cfg = cfg;
  shared_cfg.shared = true;
  nn::ParamStore<float> ps2;
  Rng rng2(41);
  percept::BranchEncoders<float> shared(ps2, "enc", shared_cfg, rng2);
  auto fsh = shared.encode(rgb, depth, percept::Branch::hand);
  auto fso = shared.encode(rgb, depth, percept::Branch::object);
  for (std::int64_t i = 0; i < fsh.value().numel(); ++i)
    REQUIRE(fsh.value()[i] == fso.value()[i]);

  std::int64_t shared_total = numel_of(ps2, "enc.shared");
  double ratio = static_cast<double>(shared_total) / static_cast<double>(two_total);
  INFO("two-branch " << two_total << " shared " << shared_total << " ratio " << ratio);
  REQUIRE(ratio >= 0.8);
  REQUIRE(ratio <= 1.2);
}

TEST_CASE("rows of a batch encode independently") {
  percept::BranchEncodersConfig cfg;
  cfg.encoder.widths = {4, 4, 4, 4};
  cfg.encoder.norm_groups = 2;
  cfg.encoder.feature_dim = 32;
  cfg.encoder.input_hw = 32;
  nn::ParamStore<float> ps;
  Rng rng(51);
  percept::BranchEncoders<float> enc(ps, "enc", cfg, rng);

  Rng drng(53);
  auto rgb = random_f32({3, 3, 32, 32}, drng, 0.f, 1.f);
  auto depth = random_f32({3, 1, 32, 32}, drng, 300.f, 700.f);
  auto batch = enc.encode(ad::Var<float>::constant(rgb),
                          ad::Var<float>::constant(depth), percept::Branch::hand);
  for (int r = 0; r < 3; ++r) {
    Tensor<float> rgb1({1, 3, 32, 32}), d1({1, 1, 32, 32});
    std::memcpy(rgb1.data(), rgb.data() + r * 3 * 32 * 32, sizeof(float) * 3 * 32 * 32);
    std::memcpy(d1.data(), depth.data() + r * 32 * 32, sizeof(float) * 32 * 32);
    auto one = enc.encode(ad::Var<float>::constant(rgb1),
                          ad::Var<float>::constant(d1), percept::Branch::hand);
    for (std::int64_t c = 0; c < one.value().dim(1); ++c)
      REQUIRE(std::abs(one.value().at(0, c) - batch.value().at(r, c)) <= 1e-5f);
  }
}

TEST_CASE("channel concatenation is laid out correctly and differentiable") {
  Rng rng(61);
  auto a = ts::random_tensor({2, 2, 3, 3}, rng);
  auto b = ts::random_tensor({2, 1, 3, 3}, rng);
  auto cat = ad::concat_channels(ad::Var<double>::constant(a),
                                 ad::Var<double>::constant(b));
  REQUIRE(cat.value().dim(1) == 3);
  for (int n = 0; n < 2; ++n)
    for (int h = 0; h < 3; ++h)
      for (int wd = 0; wd < 3; ++wd) {
        REQUIRE(cat.value().at(n, 0, h, wd) == a.at(n, 0, h, wd));
        REQUIRE(cat.value().at(n, 1, h, wd) == a.at(n, 1, h, wd));
        REQUIRE(cat.value().at(n, 2, h, wd) == b.at(n, 0, h, wd));
      }

  auto ct = ts::random_tensor({2, 3, 3, 3}, rng);
  auto build = [&](const std::vector<ts::VarD>& leaves) {
    return ad::sum_all(ad::mul(ad::concat_channels(leaves[0], leaves[1]),
                               ts::VarD::constant(ct)));
  };
  auto rep = ts::fd_check(build, {a, b}, 12);
  REQUIRE(rep.max_rel_err <= 1e-6);
}

TEST_CASE("encode rejects mismatched shapes") {
  percept::BranchEncodersConfig cfg;
  cfg.encoder.widths = {2, 2, 2, 2};
  cfg.encoder.norm_groups = 1;
  cfg.encoder.input_hw = 16;
  nn::ParamStore<float> ps;
  Rng rng(71);
  percept::BranchEncoders<float> enc(ps, "enc", cfg, rng);
  auto rgb = ad::Var<float>::constant(Tensor<float>::zeros({1, 3, 16, 16}));
  auto depth_bad = ad::Var<float>::constant(Tensor<float>::zeros({1, 1, 8, 8}));
  REQUIRE_THROWS_WITH(enc.encode(rgb, depth_bad, percept::Branch::hand),
                      Catch::Matchers::ContainsSubstring("dimension mismatch"));
}

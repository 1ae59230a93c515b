#include <catch2/catch_amalgamated.hpp>

#include "horec/autodiff.hpp"
#include "horec/tensor.hpp"
#include "support/gradcheck.hpp"

using horec::Rng;
using horec::Shape;
using horec::Tensor;
namespace ad = horec::ad;
namespace ts = horec::testsupport;
using VarD = ad::Var<double>;

namespace {

// Contracts the op output against a fixed random cotangent so the full
// Jacobian is exercised, not just the row sums.
ts::BuildFn against_cotangent(std::function<VarD(const std::vector<VarD>&)> op,
                              Tensor<double> cot) {
  return [op = std::move(op), cot = std::move(cot)](const std::vector<VarD>& in) {
    return ad::sum_all(ad::mul(op(in), VarD::constant(cot)));
  };
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor<float> t({2, 3, 4});
  REQUIRE(t.numel() == 24);
  t.at(1, 2, 3) = 5.0f;
  REQUIRE(t[23] == 5.0f);
  REQUIRE_THROWS_AS(t.reshaped({5, 5}), horec::Error);
  auto d = t.cast<double>();
  REQUIRE(d[23] == 5.0);
}

TEST_CASE("value reuse accumulates gradients across both uses") {
  auto x = VarD::leaf(Tensor<double>::scalar(3.0), true);
  auto y = ad::add(ad::mul(x, x), x);  // x^2 + x
  ad::backward(y);
  REQUIRE(x.grad()[0] == Catch::Approx(7.0).margin(1e-12));
}

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(11);
  Tensor<double> a = ts::random_tensor({3, 5}, rng, 0.2, 2.0);
  Tensor<double> b = ts::random_tensor({3, 5}, rng, 0.5, 1.5);
  Tensor<double> cot = ts::random_tensor({3, 5}, rng);

  auto check2 = [&](auto op) {
    auto rep = ts::fd_check(
        against_cotangent([op](const std::vector<VarD>& in) { return op(in[0], in[1]); }, cot),
        {a, b}, 15);
    REQUIRE(rep.max_rel_err < 1e-6);
  };
  check2([](VarD x, VarD y) { return ad::add(x, y); });
  check2([](VarD x, VarD y) { return ad::sub(x, y); });
  check2([](VarD x, VarD y) { return ad::mul(x, y); });
  check2([](VarD x, VarD y) { return ad::div(x, y); });

  auto check1 = [&](auto op, double lo, double hi) {
    Tensor<double> x = ts::random_tensor({3, 5}, rng, lo, hi);
    auto rep = ts::fd_check(
        against_cotangent([op](const std::vector<VarD>& in) { return op(in[0]); }, cot),
        {x}, 15);
    REQUIRE(rep.max_rel_err < 1e-5);
  };
  check1([](VarD x) { return ad::relu(x); }, 0.1, 2.0);
  check1([](VarD x) { return ad::relu(x); }, -2.0, -0.1);
  check1([](VarD x) { return ad::sigmoid(x); }, -2.0, 2.0);
  check1([](VarD x) { return ad::tanh_op(x); }, -2.0, 2.0);
  check1([](VarD x) { return ad::softplus(x); }, -3.0, 3.0);
  check1([](VarD x) { return ad::abs_op(x); }, 0.2, 2.0);
  check1([](VarD x) { return ad::square(x); }, -2.0, 2.0);
  check1([](VarD x) { return ad::scale(x, 2.5); }, -1.0, 1.0);
  check1([](VarD x) { return ad::clamp_min(x, 0.5); }, 0.7, 2.0);
  check1([](VarD x) { return ad::clamp_min(x, 0.5); }, -1.0, 0.3);
}

TEST_CASE("reductions and masked mean match finite differences") {
  Rng rng(12);
  Tensor<double> x = ts::random_tensor({4, 6}, rng);
  auto rep = ts::fd_check(
      [](const std::vector<VarD>& in) { return ad::mean_all(in[0]); }, {x}, 24);
  REQUIRE(rep.max_rel_err < 1e-7);

  Tensor<std::uint8_t> mask({4, 6});
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    mask[i] = static_cast<std::uint8_t>(rng.uniform() < 0.5 ? 1 : 0);
  mask[0] = 1;
  rep = ts::fd_check(
      [mask](const std::vector<VarD>& in) { return ad::masked_mean(in[0], mask); },
      {x}, 24);
  REQUIRE(rep.max_rel_err < 1e-7);

  Tensor<std::uint8_t> empty({4, 6});
  auto v = VarD::leaf(x, true);
  REQUIRE_THROWS_AS(ad::masked_mean(v, empty), horec::Error);
}

TEST_CASE("shape ops: slice, concat, broadcast, scalar product") {
  Rng rng(13);
  Tensor<double> a = ts::random_tensor({4, 6}, rng);
  Tensor<double> b = ts::random_tensor({4, 3}, rng);
  Tensor<double> row = ts::random_tensor({6}, rng);
  Tensor<double> s = ts::random_tensor({1}, rng, 0.5, 2.0);

  {
    Tensor<double> cot = ts::random_tensor({2, 6}, rng);
    auto rep = ts::fd_check(
        against_cotangent(
            [](const std::vector<VarD>& in) { return ad::slice_rows(in[0], 1, 2); }, cot),
        {a}, 24);
    REQUIRE(rep.max_rel_err < 1e-7);
  }
  {
    Tensor<double> cot = ts::random_tensor({4, 2}, rng);
    auto rep = ts::fd_check(
        against_cotangent(
            [](const std::vector<VarD>& in) { return ad::slice_cols(in[0], 3, 2); }, cot),
        {a}, 24);
    REQUIRE(rep.max_rel_err < 1e-7);
  }
  {
    Tensor<double> cot = ts::random_tensor({4, 9}, rng);
    auto rep = ts::fd_check(
        against_cotangent(
            [](const std::vector<VarD>& in) { return ad::concat_cols(in[0], in[1]); },
            cot),
        {a, b}, 20);
    REQUIRE(rep.max_rel_err < 1e-7);
    auto va = VarD::constant(a);
    auto vb = VarD::constant(b);
    auto cc = ad::concat_cols(va, vb);
    auto back = ad::slice_cols(cc, 0, 6);
    for (std::int64_t i = 0; i < a.numel(); ++i)
      REQUIRE(back.value()[i] == a[i]);
  }
  {
    Tensor<double> cot = ts::random_tensor({4, 6}, rng);
    auto rep = ts::fd_check(
        against_cotangent(
            [](const std::vector<VarD>& in) { return ad::add_row_broadcast(in[0], in[1]); },
            cot),
        {a, row}, 20);
    REQUIRE(rep.max_rel_err < 1e-7);
    rep = ts::fd_check(
        against_cotangent(
            [](const std::vector<VarD>& in) { return ad::mul_scalar_var(in[0], in[1]); },
            cot),
        {a, s}, 20);
    REQUIRE(rep.max_rel_err < 1e-7);
  }
}

TEST_CASE("matmul and linear match finite differences and Eigen") {
  Rng rng(14);
  Tensor<double> x = ts::random_tensor({3, 4}, rng);
  Tensor<double> w = ts::random_tensor({5, 4}, rng);
  Tensor<double> bias = ts::random_tensor({5}, rng);
  Tensor<double> cot = ts::random_tensor({3, 5}, rng);

  auto y = ad::linear(VarD::constant(x), VarD::constant(w), VarD::constant(bias));
  Eigen::MatrixXd ref = x.mat() * w.mat().transpose();
  ref.rowwise() += bias.flat().transpose();
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 5; ++j)
      REQUIRE(y.value().at(i, j) == Catch::Approx(ref(i, j)).margin(1e-12));

  auto rep = ts::fd_check(
      against_cotangent(
          [](const std::vector<VarD>& in) { return ad::linear(in[0], in[1], in[2]); },
          cot),
      {x, w, bias}, 20);
  REQUIRE(rep.max_rel_err < 1e-6);

  Tensor<double> b2 = ts::random_tensor({4, 6}, rng);
  Tensor<double> cot2 = ts::random_tensor({3, 6}, rng);
  rep = ts::fd_check(
      against_cotangent(
          [](const std::vector<VarD>& in) { return ad::matmul(in[0], in[1]); }, cot2),
      {x, b2}, 20);
  REQUIRE(rep.max_rel_err < 1e-6);
}

namespace {

// Direct convolution, no im2col: the independent reference.
Tensor<double> conv2d_naive(const Tensor<double>& x, const Tensor<double>& w,
                            const Tensor<double>& b, std::int64_t stride,
                            std::int64_t pad) {
  auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  auto oh = (H + 2 * pad - kh) / stride + 1;
  auto ow = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> y({N, O, oh, ow});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) {
          double acc = b[o];
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t ki = 0; ki < kh; ++ki)
              for (std::int64_t kj = 0; kj < kw; ++kj) {
                std::int64_t ii = i * stride - pad + ki;
                std::int64_t jj = j * stride - pad + kj;
                if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                acc += x.at(n, c, ii, jj) * w.at(o, c, ki, kj);
              }
          y.at(n, o, i, j) = acc;
        }
  return y;
}

}  // namespace

TEST_CASE("conv2d matches a direct convolution and finite differences") {
  Rng rng(15);
  for (auto [stride, pad, k] : {std::tuple{1, 1, 3}, {2, 1, 3}, {1, 2, 5}, {1, 0, 1}}) {
    Tensor<double> x = ts::random_tensor({2, 3, 6, 7}, rng);
    Tensor<double> w = ts::random_tensor({4, 3, k, k}, rng);
    Tensor<double> b = ts::random_tensor({4}, rng);
    auto y = ad::conv2d(VarD::constant(x), VarD::constant(w), VarD::constant(b),
                        stride, pad);
    auto ref = conv2d_naive(x, w, b, stride, pad);
    REQUIRE(y.value().shape() == ref.shape());
    for (std::int64_t i = 0; i < ref.numel(); ++i)
      REQUIRE(y.value()[i] == Catch::Approx(ref[i]).margin(1e-10));

    Tensor<double> cot = ts::random_tensor(ref.shape(), rng);
    auto rep = ts::fd_check(
        against_cotangent(
            [stride, pad](const std::vector<VarD>& in) {
              return ad::conv2d(in[0], in[1], in[2], stride, pad);
            },
            cot),
        {x, w, b}, 12);
    REQUIRE(rep.max_rel_err < 1e-5);
  }
}

TEST_CASE("upsample, pooling and group norm match finite differences") {
  Rng rng(16);
  Tensor<double> x = ts::random_tensor({2, 4, 3, 5}, rng);
  {
    Tensor<double> cot = ts::random_tensor({2, 4, 6, 10}, rng);
    auto rep = ts::fd_check(
        against_cotangent(
            [](const std::vector<VarD>& in) { return ad::upsample_nearest2(in[0]); },
            cot),
        {x}, 20);
    REQUIRE(rep.max_rel_err < 1e-7);
  }
  {
    Tensor<double> cot = ts::random_tensor({2, 4}, rng);
    auto rep = ts::fd_check(
        against_cotangent(
            [](const std::vector<VarD>& in) { return ad::global_avg_pool(in[0]); }, cot),
        {x}, 20);
    REQUIRE(rep.max_rel_err < 1e-7);
  }
  {
    Tensor<double> gamma = ts::random_tensor({4}, rng, 0.5, 1.5);
    Tensor<double> beta = ts::random_tensor({4}, rng);
    Tensor<double> cot = ts::random_tensor({2, 4, 3, 5}, rng);
    auto rep = ts::fd_check(
        against_cotangent(
            [](const std::vector<VarD>& in) {
              return ad::group_norm(in[0], in[1], in[2], 2, 1e-5);
            },
            cot),
        {x, gamma, beta}, 20);
    REQUIRE(rep.max_rel_err < 1e-5);
  }
}

TEST_CASE("group norm output for one row is independent of batch company") {
  Rng rng(17);
  Tensor<double> x1 = ts::random_tensor({1, 4, 3, 3}, rng);
  Tensor<double> x3({3, 4, 3, 3});
  for (std::int64_t i = 0; i < x1.numel(); ++i) x3[i] = x1[i];
  for (std::int64_t i = x1.numel(); i < x3.numel(); ++i) x3[i] = rng.uniform(-2, 2);
  Tensor<double> gamma({4}, 1.0), beta({4}, 0.0);
  auto y1 = ad::group_norm(VarD::constant(x1), VarD::constant(gamma),
                           VarD::constant(beta), 2, 1e-5);
  auto y3 = ad::group_norm(VarD::constant(x3), VarD::constant(gamma),
                           VarD::constant(beta), 2, 1e-5);
  for (std::int64_t i = 0; i < x1.numel(); ++i)
    REQUIRE(y1.value()[i] == y3.value()[i]);
}

TEST_CASE("backward on a non-scalar or constant root is rejected") {
  auto x = VarD::leaf(Tensor<double>({2, 2}, 1.0), true);
  REQUIRE_THROWS_AS(ad::backward(ad::scale(x, 2.0)), horec::Error);
  auto c = VarD::constant(Tensor<double>::scalar(1.0));
  REQUIRE_THROWS_AS(ad::backward(ad::scale(c, 2.0)), horec::Error);
}

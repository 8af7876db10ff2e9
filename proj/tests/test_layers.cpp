#include <cmath>
#include <numbers>

#include "doctest.h"
#include "mvapad/gradcheck.hpp"
#include "mvapad/layers.hpp"
#include "test_util.hpp"

using namespace mvapad;
using mvapad::testing::random_readout;
using mvapad::testing::random_tensor;

namespace {

// Direct nested-loop cross-correlation, independent of the im2col path.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), K = w.dim(2);
  const std::size_t OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - K) / stride + 1;
  Tensor out({B, O, OH, OW}, DType::f64);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double acc = b.at(o);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < K; ++ky)
              for (std::size_t kx = 0; kx < K; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += x.at(((n * C + c) * H + iy) * W + ix) * w.at(((o * C + c) * K + ky) * K + kx);
              }
          out.set(((n * O + o) * OH + oy) * OW + ox, acc);
        }
  return out;
}

// Scan-order max over each window; returns values and the flat argmax.
std::pair<Tensor, std::vector<std::size_t>> naive_maxpool(const Tensor& x, std::size_t k, std::size_t s) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = (H - k) / s + 1, OW = (W - k) / s + 1;
  Tensor out({B, C, OH, OW}, DType::f64);
  std::vector<std::size_t> arg;
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        double best = -INFINITY;
        std::size_t at = 0;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t i = p * H * W + (oy * s + ky) * W + ox * s + kx;
            if (x.at(i) > best) {
              best = x.at(i);
              at = i;
            }
          }
        out.set((p * OH + oy) * OW + ox, best);
        arg.push_back(at);
      }
  return {out, arg};
}

}  // namespace

TEST_CASE("conv2d forward") {
  SUBCASE("1x1 identity kernel reproduces the input") {
    Rng rng(1);
    const Tensor x = random_tensor({2, 3, 5, 5}, rng);
    Tensor w({3, 3, 1, 1}, DType::f64);
    for (std::size_t c = 0; c < 3; ++c) w.set(c * 3 + c, 1.0);
    const Var y = conv2d(Var(x), Var(w), Var(Tensor({3}, DType::f64)), 1, 0);
    CHECK(y.value().identical(x));
  }

  SUBCASE("11x11 stride 4 pad 2 maps 224 to 55") {
    CHECK(conv_output_size(224, 11, 4, 2) == 55);
    CHECK(conv_output_size(23, 11, 4, 2) == 5);
    CHECK(conv_output_size(27, 3, 1, 1) == 27);
    CHECK_THROWS_AS(conv_output_size(5, 11, 4, 2), DimensionError);
  }

  SUBCASE("matches a direct nested-loop oracle") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      const std::size_t stride = 1 + seed % 2, pad = seed % 3;
      const Tensor x = random_tensor({2, 3, 9, 9}, rng);
      const Tensor w = random_tensor({4, 3, 3, 3}, rng);
      const Tensor b = random_tensor({4}, rng);
      const Tensor got = conv2d(Var(x), Var(w), Var(b), stride, pad).value();
      const Tensor want = naive_conv(x, w, b, stride, pad);
      REQUIRE(got.shape() == want.shape());
      for (std::size_t i = 0; i < got.numel(); ++i) REQUIRE(std::abs(got.at(i) - want.at(i)) < 1e-5);
    }
  }

  SUBCASE("shape errors") {
    const Var x(Tensor({1, 2, 8, 8}, DType::f64));
    CHECK_THROWS_AS(conv2d(x, Var(Tensor({4, 3, 3, 3}, DType::f64)), Var(Tensor({4}, DType::f64)), 1, 1),
                    DimensionError);
    CHECK_THROWS_AS(conv2d(x, Var(Tensor({4, 2, 11, 11}, DType::f64)), Var(Tensor({4}, DType::f64)), 1, 0),
                    DimensionError);
  }
}

TEST_CASE("pooling") {
  SUBCASE("constant input") {
    const Var x(Tensor::full({1, 2, 7, 7}, 0.25, DType::f64));
    const Tensor y = maxpool2d(x, 3, 2).value();
    CHECK(y.shape() == Shape{1, 2, 3, 3});
    for (double v : y.to_vector()) CHECK(v == 0.25);
  }

  SUBCASE("avgpool of a 6x6 patch of ones") {
    const Var x(Tensor::full({1, 1, 6, 6}, 1.0, DType::f64), true);
    const Var y = avgpool2d(x, 6, 6);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.value().item() == doctest::Approx(1.0).epsilon(1e-15));
    backward(sum(y));
    for (double g : x.grad().to_vector()) CHECK(g == doctest::Approx(1.0 / 36.0).epsilon(1e-15));
  }

  SUBCASE("maxpool matches a scan-order oracle exactly, including gradient routing") {
    Rng rng(3);
    const Tensor xv = random_tensor({1, 2, 13, 13}, rng);
    const Var x(xv, true);
    const Var y = maxpool2d(x, 3, 2);
    const auto [want, arg] = naive_maxpool(xv, 3, 2);
    CHECK(y.value().identical(want));
    backward(sum(y));
    std::vector<double> expected(xv.numel(), 0.0);
    for (auto i : arg) expected[i] += 1.0;
    CHECK(x.grad().to_vector() == expected);
  }

  SUBCASE("ties route to the first maximum in scan order") {
    const Var x(Tensor::full({1, 1, 3, 3}, 1.0, DType::f64), true);
    backward(sum(maxpool2d(x, 3, 2)));
    CHECK(x.grad().at(0) == 1.0);
    for (std::size_t i = 1; i < 9; ++i) CHECK(x.grad().at(i) == 0.0);
  }

  SUBCASE("window larger than input") {
    CHECK_THROWS_AS(maxpool2d(Var(Tensor({1, 1, 2, 2})), 3, 2), DimensionError);
    CHECK_THROWS_AS(avgpool2d(Var(Tensor({1, 1, 5, 5})), 6, 6), DimensionError);
  }

  SUBCASE("output sizes obey the formula") {
    for (std::size_t in = 3; in < 40; ++in) {
      for (std::size_t k : {2u, 3u, 6u}) {
        for (std::size_t s : {1u, 2u, 6u}) {
          if (k > in) continue;
          const Var x(Tensor({1, 1, in, in}));
          const std::size_t expected = (in - k) / s + 1;
          REQUIRE(maxpool2d(x, k, s).shape()[2] == expected);
          REQUIRE(avgpool2d(x, k, s).shape()[3] == expected);
        }
      }
    }
  }
}

TEST_CASE("batchnorm") {
  SUBCASE("already standardized batch is a fixed point") {
    const Tensor x = Tensor::from({4, 1}, std::vector<double>{-1.5, -0.5, 0.5, 1.5});
    // mean 0, biased var 1.25: rescale to unit variance
    Tensor xs = x;
    for (std::size_t i = 0; i < 4; ++i) xs.set(i, x.at(i) / std::sqrt(1.25));
    BatchNormLayer bn(1, DType::f64);
    const Tensor y = bn.forward(Var(xs), Mode::train).value();
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(y.at(i) - xs.at(i)) < 1e-5);
  }

  SUBCASE("eval mode uses running statistics") {
    BatchNormLayer bn(1, DType::f64);
    bn.gamma.mutable_value().set(0, 2.0);
    bn.beta.mutable_value().set(0, 3.0);
    const Tensor y = bn.forward(Var(Tensor::full({1, 1}, 1.0, DType::f64)), Mode::eval).value();
    CHECK(y.item() == doctest::Approx(2.0 / std::sqrt(1.0 + 1e-5) + 3.0).epsilon(1e-15));
  }

  SUBCASE("train mode updates running stats with unbiased variance and momentum 0.1") {
    BatchNormLayer bn(1, DType::f64);
    const Tensor x = Tensor::from({4, 1}, std::vector<double>{1, 2, 3, 6});
    bn.forward(Var(x), Mode::train);
    // mean 3, unbiased var (4+1+0+9)/3
    CHECK(bn.running_mean.at(0) == doctest::Approx(0.3));
    CHECK(bn.running_var.at(0) == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0));
  }

  SUBCASE("train mode with a single value per channel is rejected") {
    BatchNormLayer bn(3, DType::f64);
    CHECK_THROWS_AS(bn.forward(Var(Tensor({1, 3}, DType::f64)), Mode::train), ContractError);
    CHECK_NOTHROW(bn.forward(Var(Tensor({1, 3, 2, 1}, DType::f64)), Mode::train));
    CHECK_NOTHROW(bn.forward(Var(Tensor({1, 3}, DType::f64)), Mode::eval));
  }

  SUBCASE("train-mode gradcheck on random 4x3") {
    Rng rng(8);
    const auto report = gradcheck(
        [](const std::vector<Var>& in) { return random_readout(batchnorm_train(in[0], in[1], in[2], 1e-5), 77); },
        {random_tensor({4, 3}, rng), random_tensor({3}, rng, DType::f64, 0.5, 1.5), random_tensor({3}, rng)});
    CHECK(report.max_rel_error < 1e-5);
  }
}

TEST_CASE("dropout") {
  Rng rng(4);
  const Tensor xv = random_tensor({3, 5}, rng, DType::f32);
  const Var x(xv);

  DropoutLayer eval_drop(0.5, Rng(1));
  CHECK(eval_drop.forward(x, Mode::eval).value().identical(xv));
  DropoutLayer zero_drop(0.0, Rng(1));
  CHECK(zero_drop.forward(x, Mode::train).value().identical(xv));
  CHECK_THROWS_AS(DropoutLayer(1.0, Rng(1)), ContractError);
  CHECK_THROWS_AS(DropoutLayer(-0.1, Rng(1)), ContractError);

  SUBCASE("rate 0.5 keeps half the units scaled by two") {
    const std::size_t n = 100000;
    DropoutLayer drop(0.5, Rng(2024));
    const Tensor ones = Tensor::full({n}, 1.0);
    const Tensor y = drop.forward(Var(ones), Mode::train).value();
    std::size_t kept = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = y.at(i);
      REQUIRE((v == 0.0 || v == 2.0));
      kept += v != 0.0;
      total += v;
    }
    const double frac = static_cast<double>(kept) / n;
    CHECK(frac > 0.49);
    CHECK(frac < 0.51);
    // E[dropout(x)] = x within 2%.
    CHECK(total / n == doctest::Approx(1.0).epsilon(0.02));
  }

  SUBCASE("fixed-mask gradient") {
    Rng r(9);
    DropoutLayer drop(0.5, Rng(5));
    const Tensor mask = drop.draw_mask({4, 6}, DType::f64);
    const auto report = gradcheck(
        [&](const std::vector<Var>& in) { return random_readout(apply_mask(in[0], mask), 3); },
        {random_tensor({4, 6}, r)});
    CHECK(report.max_rel_error < 1e-5);
  }
}

TEST_CASE("linear") {
  Tensor eye({3, 3}, DType::f64);
  for (std::size_t i = 0; i < 3; ++i) eye.set(i * 4, 1.0);
  Rng rng(12);
  const Tensor xv = random_tensor({2, 3}, rng);
  CHECK(linear(Var(xv), Var(eye), Var(Tensor({3}, DType::f64))).value().identical(xv));

  Rng init(1);
  LinearLayer fc(256, 2048, init);
  CHECK(fc.weight.shape() == Shape{2048, 256});
  CHECK(fc.forward(Var(Tensor({1, 256}))).shape() == Shape{1, 2048});
  CHECK_THROWS_AS(fc.forward(Var(Tensor({1, 255}))), DimensionError);

  const auto report = gradcheck(
      [](const std::vector<Var>& in) { return random_readout(linear(in[0], in[1], in[2]), 5); },
      {random_tensor({3, 5}, rng), random_tensor({4, 5}, rng), random_tensor({4}, rng)});
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("softmax cross-entropy") {
  const std::vector<int> zero{0}, one{1};
  const Var uniform(Tensor::from({1, 2}, std::vector<double>{0, 0}));
  CHECK(softmax_cross_entropy(uniform, zero).value().item() == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  CHECK(softmax_cross_entropy(uniform, one).value().item() == doctest::Approx(0.693147).epsilon(1e-6));

  Rng rng(31);
  const Tensor logits = random_tensor({8, 2}, rng, DType::f64, -3.0, 3.0);
  std::vector<int> labels;
  for (int i = 0; i < 8; ++i) labels.push_back(static_cast<int>(rng.below(2)));

  SUBCASE("shift invariance") {
    Tensor shifted = logits;
    for (std::size_t i = 0; i < shifted.numel(); ++i) shifted.set(i, shifted.at(i) + 123.25);
    const double a = softmax_cross_entropy(Var(logits), labels).value().item();
    const double b = softmax_cross_entropy(Var(shifted), labels).value().item();
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
  }

  SUBCASE("gradcheck") {
    const auto report = gradcheck(
        [&](const std::vector<Var>& in) { return softmax_cross_entropy(in[0], labels); }, {logits});
    CHECK(report.max_rel_error < 1e-6);
  }

  SUBCASE("large logits stay finite") {
    const Var big(Tensor::from({1, 2}, std::vector<double>{1000, -1000}));
    CHECK(std::isfinite(softmax_cross_entropy(big, one).value().item()));
  }

  const std::vector<int> bad{2};
  CHECK_THROWS_AS(softmax_cross_entropy(uniform, bad), ContractError);
}

TEST_CASE("initialization") {
  Rng a(77), b(77);
  LinearLayer la(256, 2048, a), lb(256, 2048, b);
  CHECK(la.weight.value().identical(lb.weight.value()));
  for (double v : la.bias.value().to_vector()) CHECK(v == 0.0);

  // Kaiming-uniform on [-r, r]: sigma = r / sqrt(3); the sample mean of n
  // draws must sit within 3 sigma / sqrt(n) of zero.
  const auto w = la.weight.value().to_vector();
  double mean = 0.0, sq = 0.0, lo = 0.0, hi = 0.0;
  for (double v : w) {
    mean += v;
    sq += v * v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double n = static_cast<double>(w.size());
  mean /= n;
  const double bound = kaiming_uniform_bound(256);
  const double sigma = bound / std::sqrt(3.0);
  CHECK(std::abs(mean) < 3.0 * sigma / std::sqrt(n));
  CHECK(std::sqrt(sq / n) == doctest::Approx(sigma).epsilon(0.01));
  CHECK(lo >= -bound);
  CHECK(hi <= bound);

  BatchNormLayer bn(5);
  for (double v : bn.gamma.value().to_vector()) CHECK(v == 1.0);
  for (double v : bn.beta.value().to_vector()) CHECK(v == 0.0);
  for (double v : bn.running_mean.to_vector()) CHECK(v == 0.0);
  for (double v : bn.running_var.to_vector()) CHECK(v == 1.0);
}

TEST_CASE("property: every layer passes f64 gradcheck on random small shapes") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    Rng rng(500 + seed);
    const std::size_t batch = 1 + rng.below(2), in_c = 1 + rng.below(3), out_c = 1 + rng.below(3);

    // 3x3 pad 1 conv on a small map.
    const std::size_t h = 4 + rng.below(4);
    const auto c3 = gradcheck(
        [&](const std::vector<Var>& in) { return random_readout(conv2d(in[0], in[1], in[2], 1, 1), seed); },
        {random_tensor({batch, in_c, h, h}, rng), random_tensor({out_c, in_c, 3, 3}, rng),
         random_tensor({out_c}, rng)});
    CHECK(c3.max_rel_error < 1e-5);

    // 11x11 stride 4 pad 2 conv.
    const std::size_t h11 = 11 + rng.below(13);
    const auto c11 = gradcheck(
        [&](const std::vector<Var>& in) { return random_readout(conv2d(in[0], in[1], in[2], 4, 2), seed); },
        {random_tensor({1, 1, h11, h11}, rng), random_tensor({2, 1, 11, 11}, rng), random_tensor({2}, rng)});
    CHECK(c11.max_rel_error < 1e-5);

    const auto mp = gradcheck(
        [&](const std::vector<Var>& in) { return random_readout(maxpool2d(in[0], 3, 2), seed); },
        {random_tensor({batch, in_c, 3 + rng.below(8), 3 + rng.below(8)}, rng)});
    CHECK(mp.max_rel_error < 1e-5);

    const std::size_t ak = 2 + rng.below(2);
    const auto ap = gradcheck(
        [&](const std::vector<Var>& in) { return random_readout(avgpool2d(in[0], ak, 2), seed); },
        {random_tensor({batch, in_c, 6, 6}, rng)});
    CHECK(ap.max_rel_error < 1e-5);

    const auto bn = gradcheck(
        [&](const std::vector<Var>& in) { return random_readout(batchnorm_train(in[0], in[1], in[2], 1e-5), seed); },
        {random_tensor({2, in_c, 3, 3}, rng), random_tensor({in_c}, rng, DType::f64, 0.5, 1.5),
         random_tensor({in_c}, rng)});
    CHECK(bn.max_rel_error < 1e-5);

    const Tensor rm = random_tensor({in_c}, rng), rv = random_tensor({in_c}, rng, DType::f64, 0.5, 2.0);
    const auto bne = gradcheck(
        [&](const std::vector<Var>& in) {
          return random_readout(batchnorm_eval(in[0], in[1], in[2], rm, rv, 1e-5), seed);
        },
        {random_tensor({batch, in_c}, rng), random_tensor({in_c}, rng), random_tensor({in_c}, rng)});
    CHECK(bne.max_rel_error < 1e-5);

    const auto li = gradcheck(
        [&](const std::vector<Var>& in) { return random_readout(linear(in[0], in[1], in[2]), seed); },
        {random_tensor({batch, 5}, rng), random_tensor({3, 5}, rng), random_tensor({3}, rng)});
    CHECK(li.max_rel_error < 1e-5);

    std::vector<int> labels;
    for (std::size_t i = 0; i < batch + 2; ++i) labels.push_back(static_cast<int>(rng.below(2)));
    const auto ce = gradcheck(
        [&](const std::vector<Var>& in) { return softmax_cross_entropy(in[0], labels); },
        {random_tensor({batch + 2, 2}, rng, DType::f64, -2.0, 2.0)});
    CHECK(ce.max_rel_error < 1e-5);
  }
}

TEST_CASE("eval-mode forward is deterministic") {
  Rng rng(2);
  Conv2dLayer conv(1, 4, 3, 1, 1, rng);
  BatchNormLayer bn(4);
  const Var x(random_tensor({2, 1, 8, 8}, rng, DType::f32));
  bn.forward(conv.forward(x), Mode::train);
  const Tensor a = bn.forward(conv.forward(x), Mode::eval).value();
  const Tensor b = bn.forward(conv.forward(x), Mode::eval).value();
  CHECK(a.identical(b));
}

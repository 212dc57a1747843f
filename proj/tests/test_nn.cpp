#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "msac/error.hpp"
#include "msac/nn/layers.hpp"

#include <functional>
#include <random>

using namespace msac::nn;

namespace {

std::mt19937_64 rng(42);

void fill_normal(float* data, std::size_t n, float stddev = 1.0f) {
  std::normal_distribution<float> g(0.0f, stddev);
  for (std::size_t i = 0; i < n; ++i) data[i] = g(rng);
}

Tensor random_tensor(int n, int c, int h, int w) {
  Tensor t(n, c, h, w);
  fill_normal(t.data.data(), t.size());
  return t;
}

double dot(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

// Central difference of `objective` with respect to values[i], compared to
// `analytic`. Tolerances reflect float32 forward passes.
void check_fd(float* values, std::size_t count, const std::function<double()>& objective, const float* analytic,
              float h = 1e-2f, double tol = 2e-2) {
  for (std::size_t i = 0; i < count; ++i) {
    const float orig = values[i];
    values[i] = orig + h;
    const double lp = objective();
    values[i] = orig - h;
    const double lm = objective();
    values[i] = orig;
    const double fd = (lp - lm) / (2.0 * h);
    CHECK(analytic[i] == doctest::Approx(fd).epsilon(tol).scale(std::max(1.0, std::abs(fd))));
  }
}

}  // namespace

TEST_CASE("conv2d same padding keeps spatial shape and matches a direct convolution") {
  Conv2d conv(2, 3, 3, 5, true);
  conv.init(rng);
  fill_normal(conv.bias.value.data(), 3);
  const Tensor x = random_tensor(2, 2, 6, 7);
  const Tensor y = conv.forward(x);
  REQUIRE(y.same_shape(Tensor(2, 3, 6, 7)));
  const auto w = conv.weight.matrix();
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 3; ++o)
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 7; ++j) {
          double acc = conv.bias.value[o];
          for (int c = 0; c < 2; ++c)
            for (int dy = 0; dy < 3; ++dy)
              for (int dx = 0; dx < 5; ++dx) {
                const int si = i + dy - 1, sj = j + dx - 2;
                if (si < 0 || si >= 6 || sj < 0 || sj >= 7) continue;
                acc += w(o, (c * 3 + dy) * 5 + dx) * x.at(n, c, si, sj);
              }
          CHECK(y.at(n, o, i, j) == doctest::Approx(acc).epsilon(1e-5));
        }
}

TEST_CASE("conv2d with zero input and no bias outputs zero") {
  Conv2d conv(1, 4, 11, 1, false);
  conv.init(rng);
  const Tensor y = conv.forward(Tensor(1, 1, 30, 8));
  for (float v : y.data) CHECK(v == 0.0f);
}

TEST_CASE("conv2d gradients match finite differences") {
  for (auto [kh, kw] : {std::pair{3, 3}, std::pair{11, 1}, std::pair{1, 1}, std::pair{5, 5}}) {
    Conv2d conv(2, 3, kh, kw, true);
    conv.init(rng);
    Tensor x = random_tensor(2, 2, 5, 4);
    Tensor r = random_tensor(2, 3, 5, 4);
    auto objective = [&] { return dot(conv.forward(x).data, r.data); };
    conv.weight.zero_grad();
    conv.bias.zero_grad();
    const Tensor dx = conv.backward(x, r);
    check_fd(x.data.data(), x.size(), objective, dx.data.data());
    check_fd(conv.weight.value.data(), conv.weight.numel(), objective, conv.weight.grad.data());
    check_fd(conv.bias.value.data(), conv.bias.numel(), objective, conv.bias.grad.data());
    const Tensor dx2 = conv.backward_input(x, r);
    CHECK(dx2.data == dx.data);
  }
}

TEST_CASE("batch norm training gradients match finite differences") {
  BatchNorm bn(3);
  fill_normal(bn.gamma.value.data(), 3);
  fill_normal(bn.beta.value.data(), 3);
  Tensor x = random_tensor(3, 3, 2, 3);
  Tensor r = random_tensor(3, 3, 2, 3);
  auto objective = [&] {
    BatchNorm::Cache c;
    return dot(bn.forward(x, true, c).data, r.data);
  };
  BatchNorm::Cache cache;
  bn.forward(x, true, cache);
  const Tensor dx = bn.backward(r, cache);
  check_fd(x.data.data(), x.size(), objective, dx.data.data(), 1e-2f, 3e-2);
  check_fd(bn.gamma.value.data(), 3, objective, bn.gamma.grad.data());
  check_fd(bn.beta.value.data(), 3, objective, bn.beta.grad.data());

  RowMatrix m(5, 4), rm(5, 4);
  fill_normal(m.data(), m.size());
  fill_normal(rm.data(), rm.size());
  BatchNorm bn1(4);
  auto objective1 = [&] {
    BatchNorm::Cache c;
    return static_cast<double>(bn1.forward(m, true, c).cwiseProduct(rm).sum());
  };
  BatchNorm::Cache c1;
  bn1.forward(m, true, c1);
  const RowMatrix dm = bn1.backward(rm, c1);
  check_fd(m.data(), m.size(), objective1, dm.data(), 1e-2f, 3e-2);
}

TEST_CASE("batch norm eval mode uses running statistics") {
  BatchNorm bn(2);
  Tensor x = random_tensor(8, 2, 3, 3);
  for (float& v : x.data) v = 2.0f * v + 5.0f;
  for (int step = 0; step < 200; ++step) {
    BatchNorm::Cache c;
    bn.forward(x, true, c);
    bn.update_running(c);
  }
  BatchNorm::Cache train_cache, eval_cache;
  const Tensor yt = bn.forward(x, true, train_cache);
  const Tensor ye = bn.forward(x, false, eval_cache);
  // running var is the unbiased estimate, so eval output is slightly shrunk
  for (std::size_t i = 0; i < yt.size(); ++i) CHECK(ye.data[i] == doctest::Approx(yt.data[i]).epsilon(0.05).scale(1.0));
}

TEST_CASE("linear gradients match finite differences") {
  Linear fc(4, 3, true);
  fc.init(rng);
  RowMatrix x(2, 4), r(2, 3);
  fill_normal(x.data(), x.size());
  fill_normal(r.data(), r.size());
  auto objective = [&] { return static_cast<double>(fc.forward(x).cwiseProduct(r).sum()); };
  const RowMatrix dx = fc.backward(x, r);
  check_fd(x.data(), x.size(), objective, dx.data());
  check_fd(fc.weight.value.data(), fc.weight.numel(), objective, fc.weight.grad.data());
  check_fd(fc.bias.value.data(), fc.bias.numel(), objective, fc.bias.grad.data());
}

TEST_CASE("average pooling uses ceil mode and its gradient matches finite differences") {
  Tensor x = random_tensor(1, 2, 5, 3);
  const Tensor y = avg_pool2x2(x);
  CHECK(y.h == 3);
  CHECK(y.w == 2);
  CHECK(y.at(0, 1, 2, 1) == doctest::Approx(x.at(0, 1, 4, 2)));
  CHECK(y.at(0, 0, 2, 0) == doctest::Approx((x.at(0, 0, 4, 0) + x.at(0, 0, 4, 1)) / 2.0f));
  Tensor r = random_tensor(1, 2, 3, 2);
  const Tensor dx = avg_pool2x2_backward(x, r);
  check_fd(x.data.data(), x.size(), [&] { return dot(avg_pool2x2(x).data, r.data); }, dx.data.data());
}

TEST_CASE("concat and split are inverse") {
  const Tensor a = random_tensor(2, 1, 3, 3), b = random_tensor(2, 2, 3, 3);
  const Tensor cat = concat_channels({a, b});
  CHECK(cat.c == 3);
  const auto parts = split_channels(cat, {1, 2});
  CHECK(parts[0].data == a.data);
  CHECK(parts[1].data == b.data);
}

TEST_CASE("gradient reversal") {
  RowMatrix x(2, 3), g(2, 3);
  fill_normal(x.data(), x.size());
  fill_normal(g.data(), g.size());
  const GradientReversal one(1.0f), half(0.5f), off(0.0f);
  CHECK(one.forward(x) == x);
  CHECK(one.backward(g) == -g);
  CHECK(half.backward(g).isApprox(-0.5f * g));
  CHECK((off.backward(g).array() == 0.0f).all());
  CHECK_THROWS_AS(GradientReversal(-1.0f), msac::Error);
}

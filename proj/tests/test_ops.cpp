#include <doctest.h>

#include <cmath>
#include <numeric>

#include "testing.hpp"
#include "utm/ops.hpp"

using namespace utm;
using utm::testing::grad_check;
using utm::testing::random_tensor;

namespace {

// Weighted sum so every output element gets a distinct upstream gradient.
Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  auto w = random_tensor<double>(y.shape(), seed, 1.0, false);
  return ops::sum_all(ops::mul(y, w));
}

void check_grad(const std::function<Tensor<double>()>& loss, Tensor<double>& x, double tol = 1e-7) {
  const auto r = grad_check(loss, x);
  CHECK(r.rel_error < tol);
}

}  // namespace

TEST_CASE("tensor construction and indexing") {
  auto t = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == 6);
  CHECK(t.dim(-1) == 3);
  CHECK(t.at({1, 2}) == 6.0f);
  CHECK_THROWS_AS(Tensor<float>::from({2, 2}, {1, 2, 3}), ShapeError);
  CHECK(Tensor<double>::scalar(2.5).item() == 2.5);
  CHECK_THROWS_AS(t.item(), ShapeError);
}

TEST_CASE("backward needs a scalar") {
  auto x = Tensor<double>::full({3}, 1.0, true);
  CHECK_THROWS_AS(ops::scale(x, 2.0).backward(), ShapeError);
}

TEST_CASE("gradients accumulate across uses of a leaf") {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  auto y = ops::sum_all(ops::add(ops::mul(x, x), x));  // sum x^2 + x
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(5.0));
}

TEST_CASE("no-grad guard records nothing") {
  auto x = Tensor<double>::full({2}, 1.0, true);
  {
    NoGradGuard guard;
    auto y = ops::scale(x, 3.0);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.is_leaf());
  }
  CHECK(NoGradGuard::grad_enabled());
}

TEST_CASE("matmul matches a hand product and rejects mismatches") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 1}, {5, 6});
  auto c = ops::matmul(a, b);
  CHECK(c.at({0, 0}) == 17.0);
  CHECK(c.at({1, 0}) == 39.0);
  CHECK_THROWS_AS(ops::matmul(a, Tensor<double>::zeros({3, 1})), ShapeError);
}

TEST_CASE("broadcast is trailing-dims only") {
  auto a = Tensor<double>::zeros({2, 3});
  CHECK_NOTHROW(ops::add(a, Tensor<double>::zeros({3})));
  CHECK_THROWS_AS(ops::add(a, Tensor<double>::zeros({2})), ShapeError);
  CHECK_THROWS_AS(ops::mul(a, Tensor<double>::zeros({3, 2})), ShapeError);
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  auto x = Tensor<double>::from({2, 3}, {1000, 1001, 1002, -5, 0, 5});
  auto y = ops::softmax(x, -1);
  for (int r = 0; r < 2; ++r) {
    double s = 0;
    for (int j = 0; j < 3; ++j) s += y.at({r, j});
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(std::isfinite(y.at({0, 2})));
}

TEST_CASE("cross entropy of uniform logits is ln V") {
  auto logits = Tensor<double>::zeros({4, 11});
  std::vector<std::int32_t> targets = {0, 3, 7, 10};
  CHECK(ops::cross_entropy(logits, targets).item() == doctest::Approx(std::log(11.0)).epsilon(1e-12));
  std::vector<std::int32_t> bad = {0, 3, 7, 11};
  CHECK_THROWS_AS(ops::cross_entropy(logits, bad), std::out_of_range);
}

TEST_CASE("cross entropy mask averages over selected rows") {
  auto logits = Tensor<double>::from({2, 2}, {0, 0, 10, -10});
  std::vector<std::int32_t> targets = {0, 0};
  std::vector<std::uint8_t> mask = {1, 0};
  CHECK(ops::cross_entropy(logits, targets, mask).item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("embedding rejects out-of-range ids") {
  auto table = Tensor<double>::zeros({4, 2});
  std::vector<std::int32_t> ids = {0, 4};
  CHECK_THROWS_AS(ops::embedding(table, ids, {2}), std::out_of_range);
}

TEST_CASE("rope at position zero is the identity and preserves norms") {
  auto x = random_tensor<double>({1, 3, 2, 4}, 5, 1.0, false);
  std::vector<std::int64_t> pos = {0, 7, 30};
  auto y = ops::rope(x, pos);
  for (int j = 0; j < 2; ++j) {
    for (int d = 0; d < 4; ++d) CHECK(y.at({0, 0, j, d}) == doctest::Approx(x.at({0, 0, j, d})));
  }
  for (int r = 0; r < 3; ++r) {
    for (int j = 0; j < 2; ++j) {
      double nx = 0, ny = 0;
      for (int d = 0; d < 4; ++d) {
        nx += x.at({0, r, j, d}) * x.at({0, r, j, d});
        ny += y.at({0, r, j, d}) * y.at({0, r, j, d});
      }
      CHECK(ny == doctest::Approx(nx));
    }
  }
}

TEST_CASE("rope scores depend only on relative position") {
  auto q = random_tensor<double>({1, 1, 1, 8}, 1, 1.0, false);
  auto k = random_tensor<double>({1, 1, 1, 8}, 2, 1.0, false);
  auto dot_at = [&](std::int64_t pq, std::int64_t pk) {
    std::vector<std::int64_t> a = {pq}, b = {pk};
    auto rq = ops::rope(q, a), rk = ops::rope(k, b);
    double s = 0;
    for (int d = 0; d < 8; ++d) s += rq.data()[static_cast<std::size_t>(d)] * rk.data()[static_cast<std::size_t>(d)];
    return s;
  };
  CHECK(dot_at(5, 2) == doctest::Approx(dot_at(13, 10)));
}

TEST_CASE("finite-difference gradients of every op") {
  SUBCASE("matmul 2d weight") {
    auto a = random_tensor<double>({2, 3, 4}, 1);
    auto b = random_tensor<double>({4, 5}, 2);
    check_grad([&] { return probe(ops::matmul(a, b)); }, a);
    check_grad([&] { return probe(ops::matmul(a, b)); }, b);
  }
  SUBCASE("batched matmul") {
    auto a = random_tensor<double>({2, 3, 4}, 3);
    auto b = random_tensor<double>({2, 4, 2}, 4);
    check_grad([&] { return probe(ops::matmul(a, b)); }, a);
    check_grad([&] { return probe(ops::matmul(a, b)); }, b);
  }
  SUBCASE("add sub mul with broadcast") {
    auto a = random_tensor<double>({3, 4}, 5);
    auto b = random_tensor<double>({4}, 6);
    check_grad([&] { return probe(ops::add(a, b)); }, b);
    check_grad([&] { return probe(ops::sub(a, b)); }, b);
    check_grad([&] { return probe(ops::mul(a, b)); }, a);
    check_grad([&] { return probe(ops::mul(a, b)); }, b);
  }
  SUBCASE("scale_rows") {
    auto x = random_tensor<double>({2, 3, 4}, 7);
    auto w = random_tensor<double>({2, 3}, 8);
    check_grad([&] { return probe(ops::scale_rows(x, w)); }, x);
    check_grad([&] { return probe(ops::scale_rows(x, w)); }, w);
  }
  SUBCASE("pointwise") {
    auto x = random_tensor<double>({3, 5}, 9);
    check_grad([&] { return probe(ops::sigmoid(x)); }, x);
    check_grad([&] { return probe(ops::erf(x)); }, x);
    check_grad([&] { return probe(ops::silu(x)); }, x);
    check_grad([&] { return probe(ops::add_scalar(ops::scale(x, 0.5), 2.0)); }, x);
  }
  SUBCASE("softmax on inner and outer axes") {
    auto x = random_tensor<double>({3, 4, 5}, 10);
    check_grad([&] { return probe(ops::softmax(x, -1)); }, x);
    check_grad([&] { return probe(ops::softmax(x, 1)); }, x);
  }
  SUBCASE("shape ops") {
    auto x = random_tensor<double>({2, 3, 4}, 11);
    auto y = random_tensor<double>({2, 1, 4}, 12);
    check_grad([&] { return probe(ops::transpose(x, 0, 2)); }, x);
    check_grad([&] { return probe(ops::slice(x, 1, 1, 2)); }, x);
    check_grad([&] { return probe(ops::reshape(x, {6, 4})); }, x);
    const Tensor<double> parts[2] = {x, y};
    check_grad([&] { return probe(ops::concat(std::span<const Tensor<double>>(parts), 1)); }, y);
    check_grad([&] { return probe(ops::sum(x, 1)); }, x);
    check_grad([&] { return probe(ops::mean(x, 0)); }, x);
    check_grad([&] { return ops::mean_all(ops::mul(x, x)); }, x);
  }
  SUBCASE("embedding") {
    auto table = random_tensor<double>({5, 3}, 13);
    std::vector<std::int32_t> ids = {4, 0, 4, 2};
    check_grad([&] { return probe(ops::embedding(table, ids, {2, 2})); }, table);
  }
  SUBCASE("norms") {
    auto x = random_tensor<double>({2, 3, 2, 4}, 14);
    auto gain = random_tensor<double>({4}, 15);
    auto head_gain = random_tensor<double>({2}, 16);
    check_grad([&] { return probe(ops::rms_norm(x, gain, 1e-6)); }, x);
    check_grad([&] { return probe(ops::rms_norm(x, gain, 1e-6)); }, gain);
    check_grad([&] { return probe(ops::head_rms_norm(x, head_gain, 1e-6)); }, x);
    check_grad([&] { return probe(ops::head_rms_norm(x, head_gain, 1e-6)); }, head_gain);
  }
  SUBCASE("rope") {
    auto x = random_tensor<double>({2, 3, 2, 4}, 17);
    std::vector<std::int64_t> pos = {0, 4, 9};
    check_grad([&] { return probe(ops::rope(x, pos)); }, x);
  }
  SUBCASE("cross entropy with mask") {
    auto logits = random_tensor<double>({2, 3, 6}, 18);
    std::vector<std::int32_t> targets = {1, 5, 0, 2, 2, 3};
    std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0, 1};
    check_grad([&] { return ops::cross_entropy(logits, targets, mask); }, logits);
  }
}

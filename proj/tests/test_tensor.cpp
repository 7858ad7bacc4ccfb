#include <doctest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <cmath>
#include <limits>

#include "more/rng.hpp"
#include "more/tensor.hpp"

using namespace more;
using T = Tensor<double>;
using Fn = std::function<T(const T&)>;

namespace {

T random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Eigen::ArrayXd v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(lo, hi);
  return T(std::move(shape), v);
}

T mat(Index r, Index c, std::initializer_list<double> values) {
  return T({r, c}, Eigen::Map<const Eigen::ArrayXd>(values.begin(), static_cast<Index>(values.size())));
}

// Weighted sum so that every output element gets a distinct upstream gradient.
T probe(const T& y, std::uint64_t seed = 99) { return sum(mul(y, random_tensor(y.shape(), seed))); }

}  // namespace

TEST_CASE("matmul forward examples") {
  T eye = mat(2, 2, {1, 0, 0, 1});
  T a = mat(2, 2, {1, 2, 3, 4});
  CHECK((matmul(eye, a).value() == a.value()).all());
  CHECK((matmul(a, T::zeros({2, 2})).value() == 0.0).all());
  CHECK_THROWS_AS(matmul(a, T::zeros({3, 2})), DimensionError);
}

TEST_CASE("matmul gradient matches finite differences") {
  T b = random_tensor({4, 2}, 2);
  CHECK(grad_check<double>([&](const T& a) { return sum(matmul(a, b)); }, random_tensor({3, 4}, 1)) < 1e-6);
  T a = random_tensor({3, 4}, 3);
  CHECK(grad_check<double>([&](const T& x) { return sum(matmul(a, x)); }, b) < 1e-6);
}

TEST_CASE("softmax examples") {
  T u = softmax(T({3}, Eigen::ArrayXd::Zero(3)));
  for (Index i = 0; i < 3; ++i) CHECK(u.value()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  T big = softmax(T({2}, Eigen::Array2d(1000.0, 0.0)));
  CHECK(std::abs(big.value()[0] - 1.0) < 1e-12);
  CHECK(std::abs(big.value()[1]) < 1e-12);

  // High-precision oracle for [1,2,3].
  using Quad = boost::multiprecision::cpp_bin_float_quad;
  Quad denom = exp(Quad(1)) + exp(Quad(2)) + exp(Quad(3));
  T s = softmax(T({3}, Eigen::Array3d(1, 2, 3)));
  for (int i = 0; i < 3; ++i) {
    const double expected = static_cast<double>(exp(Quad(i + 1)) / denom);
    CHECK(std::abs(s.value()[i] - expected) < 1e-15);
  }

  T withnan = softmax(T({3}, Eigen::Array3d(1, std::numeric_limits<double>::quiet_NaN(), 3)));
  CHECK(withnan.value().isNaN().all());
}

TEST_CASE("softmax rows are distributions along any axis") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    T x = random_tensor({3, 4, 5}, seed, -30, 30);
    for (Index axis = 0; axis < 3; ++axis) {
      T y = softmax(x, axis);
      CHECK((y.value() >= 0).all());
      // sum over the chosen axis
      Eigen::ArrayXd totals = Eigen::ArrayXd::Zero(x.size() / x.dim(axis));
      const Index inner = axis == 2 ? 1 : (axis == 1 ? 5 : 20);
      const Index extent = x.dim(axis);
      for (Index i = 0; i < x.size(); ++i) {
        const Index outer_i = i / (extent * inner), inner_i = i % inner;
        totals[outer_i * inner + inner_i] += y.value()[i];
      }
      CHECK(((totals - 1.0).abs() < 1e-9).all());
    }
  }
}

TEST_CASE("conv1d examples") {
  T x({1, 4}, Eigen::Array4d(1, 2, 3, 4));
  T identity({1, 1, 1}, Eigen::ArrayXd::Ones(1));
  CHECK((conv1d(x, identity, T(), 1).value() == x.value()).all());

  T ones({1, 4}, Eigen::ArrayXd::Ones(4));
  T box({1, 1, 2}, Eigen::ArrayXd::Ones(2));
  T y = conv1d(ones, box, T(), 2);
  CHECK(y.shape() == Shape{1, 2});
  CHECK((y.value() == 2.0).all());

  CHECK_THROWS_AS(conv1d(x, T({1, 1, 5}, Eigen::ArrayXd::Ones(5)), T(), 1), DimensionError);
}

TEST_CASE("conv1d gradients") {
  T w = random_tensor({3, 2, 4}, 5);
  T bias = random_tensor({3}, 6);
  T x = random_tensor({2, 2, 11}, 7);
  CHECK(grad_check<double>([&](const T& v) { return probe(conv1d(v, w, bias, 3)); }, x) < 1e-6);
  CHECK(grad_check<double>([&](const T& v) { return probe(conv1d(x, v, bias, 3)); }, w) < 1e-6);
  CHECK(grad_check<double>([&](const T& v) { return probe(conv1d(x, w, v, 3)); }, bias) < 1e-6);
}

TEST_CASE("batch_norm and relu examples") {
  T x({3, 2}, Eigen::ArrayXd::Constant(6, 4.0));
  T gamma({2}, Eigen::Array2d(2.0, 3.0));
  T beta({2}, Eigen::Array2d(0.5, -1.0));
  T rm = T::zeros({2}), rv = T::full({2}, 1.0);
  T y = batch_norm(x, gamma, beta, rm, rv, true);
  for (Index r = 0; r < 3; ++r) {
    CHECK(y.value()[r * 2] == 0.5);
    CHECK(y.value()[r * 2 + 1] == -1.0);
  }
  // running stats moved toward the batch mean
  CHECK(rm.value()[0] == doctest::Approx(0.4));

  T r = relu(T({3}, Eigen::Array3d(-1, 0, 2)));
  CHECK(r.value()[0] == 0.0);
  CHECK(r.value()[1] == 0.0);
  CHECK(r.value()[2] == 2.0);
}

TEST_CASE("batch_norm eval mode uses running statistics") {
  T x = random_tensor({4, 3, 5}, 11);
  T gamma = random_tensor({3}, 12), beta = random_tensor({3}, 13);
  T rm({3}, Eigen::Array3d(0.1, -0.2, 0.3)), rv({3}, Eigen::Array3d(1.5, 0.5, 2.0));
  T y = batch_norm(x, gamma, beta, rm, rv, false);
  for (Index b = 0; b < 4; ++b)
    for (Index c = 0; c < 3; ++c)
      for (Index l = 0; l < 5; ++l) {
        const Index i = (b * 3 + c) * 5 + l;
        const double expected =
            (x.value()[i] - rm.value()[c]) / std::sqrt(rv.value()[c] + 1e-5) * gamma.value()[c] + beta.value()[c];
        CHECK(y.value()[i] == doctest::Approx(expected).epsilon(1e-14));
      }
  CHECK(rm.value()[0] == 0.1);  // untouched
}

TEST_CASE("grad_check oracle examples") {
  // Inputs on a dyadic grid keep every partial sum exact, so the
  // difference quotient of a linear function is exact too.
  T grid({5}, (Eigen::ArrayXd(5) << 0.5, -0.25, 3.0, 1.125, -7.0).finished());
  CHECK(grad_check<double>([](const T& x) { return sum(x); }, grid) == 0.0);
  CHECK(grad_check<double>([](const T& x) { return sum(x); }, random_tensor({5}, 1)) < 1e-9);
  const double err = grad_check<double>([](const T& x) { return mul(x, x); }, T::scalar(3.0), 1e-5);
  CHECK(err < 1e-9);
  T x = T::scalar(3.0, true);
  mul(x, x).backward();
  CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("composite MLP gradient") {
  T w1 = random_tensor({5, 7}, 21), b1 = random_tensor({7}, 22), w2 = random_tensor({7, 3}, 23);
  T gamma = random_tensor({7}, 24, 0.5, 1.5), beta = random_tensor({7}, 25);
  auto mlp = [&](const T& x) {
    T rm = T::zeros({7}), rv = T::full({7}, 1.0);
    T h = relu(batch_norm(add(matmul(x, w1), b1), gamma, beta, rm, rv, true));
    return probe(matmul(h, w2));
  };
  CHECK(grad_check<double>(mlp, random_tensor({6, 5}, 20)) < 1e-6);
  CHECK(grad_check_params<double>([&] { return mlp(random_tensor({6, 5}, 20)); }, {w1, b1, w2, gamma, beta}) < 1e-6);
}

TEST_CASE("every differentiable op passes the finite-difference check over 10 seeds") {
  const std::vector<std::pair<const char*, std::function<T(const T&, std::uint64_t)>>> ops = {
      {"add_broadcast", [](const T& x, auto s) { return probe(add(x, random_tensor({4}, s + 1))); }},
      {"add_rhs", [](const T& x, auto s) { return probe(add(random_tensor({2, 3, 4}, s + 1), x)); }},
      {"sub", [](const T& x, auto s) { return probe(sub(random_tensor({3, 4}, s + 1), x)); }},
      {"mul", [](const T& x, auto s) { return probe(mul(x, random_tensor({3, 4}, s + 1))); }},
      {"mul_scalar", [](const T& x, auto s) { return probe(mul_scalar(random_tensor({2, 2}, s), slice(reshape(x, {12}), 0, 3, 4))); }},
      {"exp", [](const T& x, auto) { return probe(exp(x)); }},
      {"log", [](const T& x, auto) { return probe(log(add(mul(x, x), T::full({4}, 0.5)))); }},
      {"relu", [](const T& x, auto) { return probe(relu(x)); }},
      {"gelu", [](const T& x, auto) { return probe(gelu(scale(x, 3.0))); }},
      {"mean", [](const T& x, auto) { return mean(mul(x, x)); }},
      {"softmax0", [](const T& x, auto) { return probe(softmax(x, 0)); }},
      {"softmax1", [](const T& x, auto) { return probe(softmax(x, 1)); }},
      {"log_softmax", [](const T& x, auto) { return probe(log_softmax(scale(x, 4.0), -1)); }},
      {"layer_norm", [](const T& x, auto s) {
         return probe(layer_norm(x, random_tensor({4}, s + 1), random_tensor({4}, s + 2)));
       }},
      {"batch_norm", [](const T& x, auto s) {
         T rm = T::zeros({4}), rv = T::full({4}, 1.0);
         return probe(batch_norm(x, random_tensor({4}, s + 1), random_tensor({4}, s + 2), rm, rv, true));
       }},
      {"l2_normalize", [](const T& x, auto) { return probe(l2_normalize_rows(x)); }},
      {"transpose", [](const T& x, auto) { return probe(transpose(x)); }},
      {"matmul", [](const T& x, auto s) { return probe(matmul(x, random_tensor({4, 5}, s + 1))); }},
      {"bmm", [](const T& x, auto s) {
         return probe(bmm(reshape(x, {3, 2, 2}), random_tensor({3, 2, 3}, s + 1)));
       }},
      {"bmm_nt", [](const T& x, auto) {
         T r = reshape(x, {3, 2, 2});
         return probe(bmm_nt(r, r));
       }},
      {"dot_nt", [](const T& x, auto s) { return probe(dot_nt(x, random_tensor({5, 4}, s + 1))); }},
      {"concat", [](const T& x, auto s) { return probe(concat<double>({x, random_tensor({3, 2}, s)}, 1)); }},
      {"slice", [](const T& x, auto) { return probe(slice(x, 1, 1, 3)); }},
      {"pick", [](const T& x, auto) { return probe(pick(x, {3, 0, 2})); }},
      {"embedding", [](const T& x, auto) { return probe(embedding(x, {2, 0, 2, 1})); }},
      {"expand", [](const T& x, auto) { return probe(expand(x, {2, 3, 4})); }},
      {"split_merge_heads", [](const T& x, auto) {
         T h = split_heads(reshape(x, {1, 3, 4}), 2);
         return probe(merge_heads(mul(h, h), 2));
       }},
      {"patchify", [](const T& x, auto) { return probe(patchify(reshape(x, {1, 2, 6}), 2)); }},
      {"bce", [](const T& x, auto) { return bce_with_logits(x, T({3, 4}, (Eigen::ArrayXd(12) << 1, 0, 1, -1, 0, 0, 1, 1, 0, 1, 0, 1).finished())); }},
      {"cross_entropy", [](const T& x, auto) { return cross_entropy(x, {0, 3, 1}); }},
  };
  for (const auto& [name, op] : ops) {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      T x = random_tensor({3, 4}, 1000 + seed);
      worst = std::max(worst, grad_check<double>([&](const T& v) { return op(v, seed); }, x));
    }
    INFO(name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("backward replay is bit-stable") {
  auto run = [] {
    T w = random_tensor({4, 4}, 8);
    w.set_requires_grad(true);
    T x = random_tensor({3, 4}, 9);
    T y = mean(softmax(matmul(gelu(matmul(x, w)), w)));
    y.backward();
    return Eigen::ArrayXd(w.grad());
  };
  CHECK((run() == run()).all());
}

TEST_CASE("no-grad mode records nothing") {
  T w = random_tensor({2, 2}, 1);
  w.set_requires_grad(true);
  NoGradGuard guard;
  T y = sum(matmul(w, w));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(T({2, 2}, Eigen::ArrayXd::Zero(3)), DimensionError);
  CHECK_THROWS_AS(add(T::zeros({2, 3}), T::zeros({2})), DimensionError);
  CHECK_THROWS_AS(l2_normalize_rows(T::zeros({2, 3})), NumericError);
  CHECK_THROWS_AS(embedding(T::zeros({3, 2}), {3}), ParameterError);
}

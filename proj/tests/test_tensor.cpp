#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"

using namespace elf;
using T = Tensor<double>;

TEST_CASE("elementwise basics") {
  T a({2}, {1, 2});
  T b({2}, {3, 4});
  T s = add(a, b);
  CHECK(s.at(0) == 4);
  CHECK(s.at(1) == 6);

  T r = relu(T({3}, {-1, 0, 2}));
  CHECK(r.at(0) == 0);
  CHECK(r.at(1) == 0);
  CHECK(r.at(2) == 2);

  CHECK(sigmoid(T::zeros({1})).at(0) == doctest::Approx(0.5));
  CHECK(square(T({2}, {3, -2})).at(1) == 4);
  CHECK(elf::sqrt(T({1}, {9})).at(0) == doctest::Approx(3));
  CHECK_THROWS_AS(elf::sqrt(T({1}, {-1})), TensorError);
}

TEST_CASE("broadcast forms") {
  T x({2, 3, 2, 2}, std::vector<double>(24, 1.0));
  T c({3}, {10, 20, 30});
  T y = add(x, c);  // per-channel over N,H,W
  CHECK(y.at(0) == 11);
  CHECK(y.at(4) == 21);   // channel 1 block starts at 4
  CHECK(y.at(8) == 31);

  T g({2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
  T z = mul(x, g);  // same-rank dim-1 broadcast
  CHECK(z.at(0) == 1);
  CHECK(z.at(23) == 6);

  T k = mul(x, T::scalar(2.0));
  CHECK(k.at(7) == 2);

  CHECK_THROWS_AS(add(T::zeros({2, 3}), T::zeros({3, 2})), TensorError);
  CHECK_THROWS_AS(add(T::zeros({4}), T::zeros({2, 3, 2, 2})), TensorError);
}

TEST_CASE("broadcast backward reduces over broadcast dims") {
  Tape<double> tape;
  T x = tape.leaf(T({2, 2, 2, 2}, std::vector<double>(16, 1.0)));
  T c = tape.leaf(T({2}, {1.0, 2.0}));
  T loss = reduce_sum(mul(x, c));
  tape.backward(loss);
  T gc = tape.grad(c);
  CHECK(gc.at(0) == doctest::Approx(8));  // 8 positions per channel
  CHECK(gc.at(1) == doctest::Approx(8));
  T gx = tape.grad(x);
  CHECK(gx.at(0) == doctest::Approx(1));
  CHECK(gx.at(4) == doctest::Approx(2));
}

TEST_CASE("matmul") {
  T eye({2, 2}, {1, 0, 0, 1});
  T m({2, 2}, {5, 6, 7, 8});
  CHECK(test::max_abs_diff(matmul(eye, m), m) == 0);

  T a({1, 2}, {1, 2});
  T b({2, 1}, {3, 4});
  CHECK(matmul(a, b).at(0) == doctest::Approx(11));

  T z = matmul(T::zeros({2, 3}), T({3, 2}, {1, 2, 3, 4, 5, 6}));
  CHECK(test::max_abs(z) == 0);

  CHECK_THROWS_AS(matmul(T::zeros({2, 3}), T::zeros({2, 2})), TensorError);

  // batched
  T ba = random_uniform<double>({3, 2, 4}, -1, 1, 1);
  T bb = random_uniform<double>({3, 4, 5}, -1, 1, 2);
  T y = matmul(ba, bb);
  CHECK(y.shape() == Shape{3, 2, 5});
  double acc = 0;
  for (Index k = 0; k < 4; ++k) acc += ba.at(1 * 8 + 0 * 4 + k) * bb.at(1 * 20 + k * 5 + 2);
  CHECK(y.at(1 * 10 + 0 * 5 + 2) == doctest::Approx(acc));
}

TEST_CASE("conv2d oracle values") {
  // 1x1 kernel of value 2, bias 0
  T x({1, 1, 2, 2}, {1, 2, 3, 4});
  T w({1, 1, 1, 1}, {2});
  T y = conv2d(x, T::zeros({1}).defined() ? w : w, T::zeros({1}), 1, 0);
  y = conv2d(x, w, T::zeros({1}), 1, 0);
  CHECK(test::max_abs_diff(y, T({1, 1, 2, 2}, {2, 4, 6, 8})) == 0);

  // 3x3 all-ones kernel, zero padding 1, constant image c -> center 9c
  const double c = 0.37;
  T xc = T::full({1, 1, 5, 5}, c);
  T w9 = T::ones({1, 1, 3, 3});
  T y9 = conv2d(xc, w9, T::zeros({1}), 1, 1);
  CHECK(y9.at(2 * 5 + 2) == doctest::Approx(9 * c));
  CHECK(y9.at(0) == doctest::Approx(4 * c));  // corner sees 4 taps

  // delta kernel reproduces the input
  T wd = T::zeros({2, 2, 3, 3});
  {
    std::vector<double> v(wd.values());
    v[0 * 18 + 0 * 9 + 4] = 1.0;  // out0 <- in0 center
    v[1 * 18 + 1 * 9 + 4] = 1.0;  // out1 <- in1 center
    wd = T({2, 2, 3, 3}, std::move(v));
  }
  T xi = random_uniform<double>({1, 2, 6, 6}, -1, 1, 3);
  CHECK(test::max_abs_diff(conv2d(xi, wd, T::zeros({2}), 1, 1), xi) == 0);

  // non-integral output size
  CHECK_THROWS_AS(conv2d(T::zeros({1, 1, 6, 6}), T::zeros({1, 1, 3, 3}), T::zeros({1}), 2, 0),
                  TensorError);
}

TEST_CASE("depthwise conv") {
  // per-channel delta kernels -> identity
  T wd = T::zeros({3, 1, 3, 3});
  {
    std::vector<double> v(wd.values());
    for (int ch = 0; ch < 3; ++ch) v[static_cast<std::size_t>(ch * 9 + 4)] = 1.0;
    wd = T({3, 1, 3, 3}, std::move(v));
  }
  T x = random_uniform<double>({2, 3, 5, 5}, -1, 1, 4);
  CHECK(test::max_abs_diff(depthwise_conv2d(x, wd, T::zeros({3}), 1, 1), x) == 0);

  // channel independence: perturbing channel 1 leaves channels 0,2 unchanged
  T w = random_uniform<double>({3, 1, 3, 3}, -1, 1, 5);
  T b = random_uniform<double>({3}, -1, 1, 6);
  T y0 = depthwise_conv2d(x, w, b, 1, 1);
  std::vector<double> xv(x.values());
  for (Index i = 25; i < 50; ++i) xv[static_cast<std::size_t>(i)] += 0.5;  // img0, channel 1
  T y1 = depthwise_conv2d(T({2, 3, 5, 5}, std::move(xv)), w, b, 1, 1);
  for (Index img = 0; img < 2; ++img)
    for (Index ch = 0; ch < 3; ++ch) {
      double diff = 0;
      for (Index p = 0; p < 25; ++p) {
        const Index i = (img * 3 + ch) * 25 + p;
        diff = std::max(diff, std::abs(y0.at(i) - y1.at(i)));
      }
      if (img == 0 && ch == 1) CHECK(diff > 0);
      else CHECK(diff == 0);
    }

  // zeroing channel j's filter zeroes only output channel j (bias zero)
  std::vector<double> wv(w.values());
  for (int i = 0; i < 9; ++i) wv[9 + i] = 0;
  T yz = depthwise_conv2d(x, T({3, 1, 3, 3}, std::move(wv)), T::zeros({3}), 1, 1);
  for (Index p = 0; p < 25; ++p) CHECK(yz.at(25 + p) == 0);
}

TEST_CASE("bilinear resize") {
  T c = T::full({1, 2, 3, 5}, 0.6);
  CHECK(test::max_abs(sub(bilinear_resize(c, 7, 9), T::full({1, 2, 7, 9}, 0.6))) <
        1e-12);

  T q({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(bilinear_resize(q, 1, 1).at(0) == doctest::Approx(2.5));

  // up then down of a constant image round-trips exactly
  T u = bilinear_resize(c, 6, 10);
  CHECK(test::max_abs_diff(bilinear_resize(u, 3, 5), c) < 1e-12);

  // identity when sizes match
  T x = random_uniform<double>({1, 1, 4, 6}, -1, 1, 7);
  CHECK(test::max_abs_diff(bilinear_resize(x, 4, 6), x) == 0);

  // linearity
  T xx = random_uniform<double>({1, 3, 8, 8}, -1, 1, 8);
  T yy = random_uniform<double>({1, 3, 8, 8}, -1, 1, 9);
  T lhs = bilinear_resize(add(scale(xx, 2.0), scale(yy, -0.7)), 5, 11);
  T rhs = add(scale(bilinear_resize(xx, 5, 11), 2.0), scale(bilinear_resize(yy, 5, 11), -0.7));
  CHECK(test::max_abs_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("softmax") {
  T u = softmax(T::full({1, 4}, 3.0), -1);
  for (Index i = 0; i < 4; ++i) CHECK(u.at(i) == doctest::Approx(0.25));

  T s = softmax(T({2}, {2, 0}), 0);
  CHECK(s.at(0) == doctest::Approx(0.8808).epsilon(1e-3));
  CHECK(s.at(1) == doctest::Approx(0.1192).epsilon(1e-3));

  T x = random_uniform<double>({3, 5, 4}, -3, 3, 10);
  T y = softmax(x, 1);
  for (Index o = 0; o < 3; ++o)
    for (Index in = 0; in < 4; ++in) {
      double sum = 0;
      for (Index j = 0; j < 5; ++j) sum += y.at(o * 20 + j * 4 + in);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  // shift invariance
  T y2 = softmax(add_scalar(x, 13.4), 1);
  CHECK(test::max_abs_diff(y, y2) < 1e-12);
}

TEST_CASE("layer_norm") {
  T g = T::ones({3});
  T b = T::zeros({3});
  // constant channel vector -> zeros
  T x = T::full({1, 3, 2, 2}, 0.8);
  CHECK(test::max_abs(layer_norm(x, g, b, 1e-9)) < 1e-4);
  // beta shift: output = beta when input constant
  T bb({3}, {1, 2, 3});
  T y = layer_norm(x, g, bb, 1e-9);
  CHECK(y.at(0) == doctest::Approx(1));
  CHECK(y.at(4) == doctest::Approx(2));
  CHECK(y.at(8) == doctest::Approx(3));
  // [1,-1] normalizes to itself as eps -> 0
  T two({1, 2, 1, 1}, {1, -1});
  T yn = layer_norm(two, T::ones({2}), T::zeros({2}), 1e-12);
  CHECK(yn.at(0) == doctest::Approx(1).epsilon(1e-5));
  CHECK(yn.at(1) == doctest::Approx(-1).epsilon(1e-5));
}

TEST_CASE("reductions") {
  CHECK(reduce_mean(T({3}, {1, 2, 3})).item() == doctest::Approx(2));
  T gap = global_avg_pool(T::full({2, 3, 4, 4}, 0.25));
  CHECK(gap.shape() == Shape{2, 3, 1, 1});
  CHECK(test::max_abs(sub(gap, T::full({2, 3, 1, 1}, 0.25))) < 1e-12);

  Tape<double> tape;
  T x = tape.leaf(random_uniform<double>({4, 5}, -1, 1, 11));
  tape.backward(reduce_sum(x));
  CHECK(test::max_abs(sub(tape.grad(x), T::ones({4, 5}))) == 0);
}

TEST_CASE("concat and split") {
  T a = random_uniform<double>({2, 2, 3, 3}, -1, 1, 12);
  T b = random_uniform<double>({2, 3, 3, 3}, -1, 1, 13);
  T y = concat<double>({a, b}, 1);
  CHECK(y.shape() == Shape{2, 5, 3, 3});
  auto parts = split(y, 1, {2, 3});
  CHECK(test::max_abs_diff(parts[0], a) == 0);
  CHECK(test::max_abs_diff(parts[1], b) == 0);
  CHECK(test::max_abs_diff(concat<double>({a}, 1), a) == 0);
  CHECK_THROWS_AS(concat<double>({a, T::zeros({2, 3, 4, 3})}, 1), TensorError);
}

TEST_CASE("backward basics") {
  // loss = sum(x*x): grad = 2x
  Tape<double> tape;
  T x0 = random_uniform<double>({6}, -2, 2, 14);
  T x = tape.leaf(x0);
  tape.backward(reduce_sum(mul(x, x)));
  CHECK(test::max_abs_diff(tape.grad(x), scale(x0, 2.0)) < 1e-12);

  // untouched leaf gets zeros; mean grad = 1/n
  Tape<double> t2;
  T y = t2.leaf(x0);
  T z = t2.leaf(x0);
  t2.backward(reduce_mean(y));
  CHECK(test::max_abs(t2.grad(z)) == 0);
  CHECK(test::max_abs(sub(t2.grad(y), T::full({6}, 1.0 / 6))) < 1e-15);

  // two uses of the same leaf accumulate: grad of sum(x+x) is 2
  Tape<double> t3;
  T w = t3.leaf(x0);
  t3.backward(reduce_sum(add(w, w)));
  CHECK(test::max_abs(sub(t3.grad(w), T::full({6}, 2.0))) == 0);
}

TEST_CASE("tape errors") {
  Tape<double> tape;
  T x = tape.leaf(T::ones({3}));
  T y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), TensorError);  // not scalar
  T loss = reduce_sum(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), TensorError);  // consumed

  Tape<double> t1, t2;
  T a = t1.leaf(T::ones({2}));
  T b = t2.leaf(T::ones({2}));
  CHECK_THROWS_AS(add(a, b), TensorError);  // mixed graphs
}

TEST_CASE("finiteness guard") {
  T big = T::full({4}, 1e308);
  CHECK_THROWS_AS(mul(big, big), TensorError);
  finite_checks() = false;
  CHECK_NOTHROW(mul(big, big));
  finite_checks() = true;
}

TEST_CASE("finite_diff_check oracle cases") {
  // quadratic: essentially exact
  T x = random_uniform<double>({8}, -1, 1, 15);
  auto quad = [](const T& t) { return reduce_sum(mul(t, t)); };
  GradReport r = finite_diff_check<double>("quad", quad, x, 1e-5, 1e-4, 100, 1);
  CHECK(r.pass);
  CHECK(r.max_rel_error < 1e-6);

  // deliberately scaled analytic gradient is rejected at tol 1e-4
  Tape<double> tape;
  T leaf = tape.leaf(x);
  tape.backward(quad(leaf));
  T wrong = scale(tape.grad(leaf), 1.01);
  GradReport bad = finite_diff_compare<double>("quad_scaled", quad, x, wrong, 1e-5, 1e-4, 100, 2);
  CHECK(!bad.pass);
  CHECK(bad.max_rel_error > 1e-3);

  // constant fn: both gradients zero
  auto constant = [](const T& t) { return add_scalar(scale(reduce_sum(t), 0.0), 5.0); };
  GradReport rc = finite_diff_check<double>("constant", constant, x, 1e-5, 1e-4, 50, 3);
  CHECK(rc.pass);
  CHECK(rc.max_abs_error == 0);
}

TEST_CASE("per-op gradcheck suite") {
  GradSuiteOptions opt;
  opt.probes = 40;  // the full 100-probe sweep runs in the acceptance suite
  for (const GradReport& r : gradcheck_ops(opt)) {
    INFO(r.op_name, " rel=", r.max_rel_error);
    CHECK(r.pass);
  }
}

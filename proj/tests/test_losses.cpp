#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "elf/losses.hpp"
#include "test_util.hpp"

using namespace elf;
using T = Tensor<double>;

namespace {

// Reference SSIM: direct transcription of the windowed-moments formula with
// plain loops; shares no code with the library implementation.
double ssim_reference(const T& a, const T& b, int win, double sigma, double c1, double c2) {
  const Index c = a.dim(1), h = a.dim(2), w = a.dim(3), n = a.dim(0);
  std::vector<double> k(static_cast<std::size_t>(win) * win);
  double ksum = 0;
  const double mid = (win - 1) / 2.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      const double v = std::exp(-((i - mid) * (i - mid) + (j - mid) * (j - mid)) / (2 * sigma * sigma));
      k[static_cast<std::size_t>(i * win + j)] = v;
      ksum += v;
    }
  for (double& v : k) v /= ksum;

  double total = 0;
  Index count = 0;
  for (Index img = 0; img < n; ++img)
    for (Index ch = 0; ch < c; ++ch)
      for (Index y = 0; y + win <= h; ++y)
        for (Index x = 0; x + win <= w; ++x) {
          double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
          for (int i = 0; i < win; ++i)
            for (int j = 0; j < win; ++j) {
              const double wv = k[static_cast<std::size_t>(i * win + j)];
              const double av = a.at(((img * c + ch) * h + y + i) * w + x + j);
              const double bv = b.at(((img * c + ch) * h + y + i) * w + x + j);
              mx += wv * av;
              my += wv * bv;
              mxx += wv * av * av;
              myy += wv * bv * bv;
              mxy += wv * av * bv;
            }
          const double sx = mxx - mx * mx, sy = myy - my * my, sxy = mxy - mx * my;
          total += ((2 * mx * my + c1) * (2 * sxy + c2)) /
                   ((mx * mx + my * my + c1) * (sx + sy + c2));
          ++count;
        }
  return total / static_cast<double>(count);
}

double charbonnier_reference(const T& a, const T& b, double eps) {
  double total = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = a.at(i) - b.at(i);
    total += std::sqrt(d * d + eps * eps);
  }
  return total / static_cast<double>(a.size());
}

}  // namespace

TEST_CASE("charbonnier oracle values") {
  T x = random_uniform<double>({2, 3, 4, 4}, 0, 1, 1);
  CHECK(std::abs(charbonnier(x, x, 1e-3).item() - 1e-3) < 1e-15);

  T zero = T::zeros({10});
  CHECK(charbonnier(T::full({10}, 3e-3), zero, 1e-3).item() ==
        doctest::Approx(3.16227766e-3).epsilon(1e-8));
  CHECK(charbonnier(T::ones({10}), zero, 1e-3).item() ==
        doctest::Approx(1.0000005).epsilon(1e-9));

  // >= eps, equality iff pred == gt
  T y = random_uniform<double>({2, 3, 4, 4}, 0, 1, 2);
  CHECK(charbonnier(x, y, 1e-3).item() > 1e-3);

  CHECK_THROWS_AS(charbonnier(x, zero, 1e-3), TensorError);
}

TEST_CASE("ssim oracle values") {
  LossConfig cfg;
  T x = random_uniform<double>({1, 3, 16, 16}, 0, 1, 3);
  CHECK(ssim(x, x, cfg).item() == doctest::Approx(1.0).epsilon(1e-12));

  T a = T::zeros({1, 3, 16, 16});
  T b = T::ones({1, 3, 16, 16});
  const double expected = cfg.c1 / (1 + cfg.c1);  // constant-image closed form
  CHECK(ssim(a, b, cfg).item() == doctest::Approx(expected).epsilon(1e-6));
  CHECK(expected == doctest::Approx(9.999e-5).epsilon(1e-3));

  T y = random_uniform<double>({1, 3, 16, 16}, 0, 1, 4);
  CHECK(ssim(x, y, cfg).item() == doctest::Approx(ssim(y, x, cfg).item()).epsilon(1e-12));
  CHECK(std::abs(ssim(x, y, cfg).item()) <= 1.0);

  CHECK_THROWS_AS(ssim(T::zeros({1, 3, 8, 8}), T::zeros({1, 3, 8, 8}), cfg), TensorError);
}

TEST_CASE("loss_stage and loss_total closed forms") {
  LossConfig cfg;
  T x = random_uniform<double>({1, 3, 16, 16}, 0.1, 0.9, 5);
  CHECK(loss_stage(x, x, cfg).item() == doctest::Approx(-0.149).epsilon(1e-9));

  LossConfig no_ssim = cfg;
  no_ssim.use_ssim = false;
  CHECK(loss_stage(x, x, no_ssim).item() == charbonnier(x, x, 1e-3).item());

  T y = random_uniform<double>({1, 3, 16, 16}, 0.1, 0.9, 6);
  CHECK(loss_total(x, x, y, y, cfg).item() == doctest::Approx(-0.298).epsilon(1e-9));

  LossConfig l0 = cfg;
  l0.lambda = 0;
  CHECK(loss_total(x, y, x, y, l0).item() == doctest::Approx(loss_stage(x, y, cfg).item()));

  // affine in lambda
  LossConfig l2 = cfg;
  l2.lambda = 2;
  const double s1 = loss_stage(x, y, cfg).item();
  const double s2 = loss_stage(y, x, cfg).item();
  CHECK(loss_total(x, y, y, x, l2).item() == doctest::Approx(s1 + 2 * s2).epsilon(1e-12));
}

TEST_CASE("loss_total matches direct formula transcription") {
  LossConfig cfg;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    T ds = random_uniform<double>({1, 3, 12, 12}, 0, 1, 10 + seed);
    T gs = random_uniform<double>({1, 3, 12, 12}, 0, 1, 20 + seed);
    T rf = random_uniform<double>({1, 3, 16, 16}, 0, 1, 30 + seed);
    T gf = random_uniform<double>({1, 3, 16, 16}, 0, 1, 40 + seed);
    const double ref =
        charbonnier_reference(ds, gs, cfg.eps) +
        cfg.alpha * ssim_reference(ds, gs, cfg.ssim_window, cfg.ssim_sigma, cfg.c1, cfg.c2) +
        cfg.lambda * (charbonnier_reference(rf, gf, cfg.eps) +
                      cfg.alpha * ssim_reference(rf, gf, cfg.ssim_window, cfg.ssim_sigma, cfg.c1,
                                                 cfg.c2));
    CHECK(loss_total(ds, gs, rf, gf, cfg).item() == doctest::Approx(ref).epsilon(1e-10));
  }
}

TEST_CASE("psnr") {
  T gt = T::full({1, 3, 8, 8}, 0.3);
  CHECK(std::isinf(psnr(gt, gt)));
  CHECK(psnr(add_scalar(gt, 0.1), gt) == doctest::Approx(20.0).epsilon(1e-9));
  CHECK(psnr(T::zeros({2, 2}), T::ones({2, 2})) == doctest::Approx(0.0));

  // strictly decreasing with uniform noise amplitude
  T base = random_uniform<double>({1, 3, 8, 8}, 0.2, 0.8, 7);
  double prev = std::numeric_limits<double>::infinity();
  for (double amp : {0.01, 0.03, 0.1, 0.3}) {
    T noisy = add(base, random_uniform<double>({1, 3, 8, 8}, amp * 0.5, amp, 8));
    const double v = psnr(noisy, base);
    CHECK(v < prev);
    prev = v;
  }
}

#pragma once

#include <limits>

#include "elf/ops.hpp"

namespace elf {

/// Composite objective constants. alpha weighs the (maximized) structural
/// term, lambda balances the two stages, eps is the Charbonnier penalty.
/// SSIM follows the unit-data-range convention: 11-tap Gaussian window,
/// sigma 1.5, C1=(0.01)^2, C2=(0.03)^2.
struct LossConfig {
  double alpha = -0.15;
  double lambda = 1.0;
  double eps = 1e-3;
  int ssim_window = 11;
  double ssim_sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
  bool use_ssim = true;

  void validate() const {
    require(eps > 0, "loss: eps must be > 0");
    require(ssim_window >= 1 && ssim_window % 2 == 1, "loss: ssim window must be odd");
    require(ssim_sigma > 0, "loss: ssim sigma must be > 0");
  }
};

/// mean(sqrt((pred-gt)^2 + eps^2)); smooth everywhere, >= eps with equality
/// iff pred == gt.
template <typename S>
Tensor<S> charbonnier(const Tensor<S>& pred, const Tensor<S>& gt, S eps) {
  require(pred.shape() == gt.shape(), "charbonnier: shape mismatch " + shape_str(pred.shape()) +
                                          " vs " + shape_str(gt.shape()));
  Tensor<S> d = sub(pred, gt);
  return reduce_mean(sqrt(add_scalar(square(d), eps * eps)));
}

namespace detail {

template <typename S>
Tensor<S> gaussian_window(Index channels, int window, double sigma) {
  std::vector<double> taps(static_cast<std::size_t>(window));
  const double mid = (window - 1) / 2.0;
  double sum = 0;
  for (int i = 0; i < window; ++i) {
    taps[static_cast<std::size_t>(i)] = std::exp(-0.5 * (i - mid) * (i - mid) / (sigma * sigma));
    sum += taps[static_cast<std::size_t>(i)];
  }
  std::vector<S> w(static_cast<std::size_t>(channels * window * window));
  for (Index c = 0; c < channels; ++c)
    for (int i = 0; i < window; ++i)
      for (int j = 0; j < window; ++j)
        w[static_cast<std::size_t>((c * window + i) * window + j)] = static_cast<S>(
            taps[static_cast<std::size_t>(i)] * taps[static_cast<std::size_t>(j)] / (sum * sum));
  return Tensor<S>(Shape{channels, 1, window, window}, std::move(w));
}

}  // namespace detail

/// Mean SSIM over valid window positions and channels; differentiable.
/// Local moments come from a Gaussian-weighted depthwise convolution.
template <typename S>
Tensor<S> ssim(const Tensor<S>& pred, const Tensor<S>& gt, const LossConfig& cfg) {
  require(pred.shape() == gt.shape(), "ssim: shape mismatch");
  require(pred.rank() == 4, "ssim: inputs must be [N,C,H,W]");
  require(pred.dim(2) >= cfg.ssim_window && pred.dim(3) >= cfg.ssim_window,
          "ssim: image smaller than window");
  const Tensor<S> win = detail::gaussian_window<S>(pred.dim(1), cfg.ssim_window, cfg.ssim_sigma);
  const Tensor<S> none;
  auto blur = [&](const Tensor<S>& t) { return depthwise_conv2d(t, win, none, Index{1}, Index{0}); };

  Tensor<S> mu_x = blur(pred);
  Tensor<S> mu_y = blur(gt);
  Tensor<S> mu_xx = square(mu_x);
  Tensor<S> mu_yy = square(mu_y);
  Tensor<S> mu_xy = mul(mu_x, mu_y);
  Tensor<S> sigma_x = sub(blur(square(pred)), mu_xx);
  Tensor<S> sigma_y = sub(blur(square(gt)), mu_yy);
  Tensor<S> sigma_xy = sub(blur(mul(pred, gt)), mu_xy);

  const S c1 = static_cast<S>(cfg.c1), c2 = static_cast<S>(cfg.c2);
  Tensor<S> num = mul(add_scalar(scale(mu_xy, S(2)), c1), add_scalar(scale(sigma_xy, S(2)), c2));
  Tensor<S> den = mul(add_scalar(add(mu_xx, mu_yy), c1), add_scalar(add(sigma_x, sigma_y), c2));
  return reduce_mean(div(num, den));
}

/// Per-stage objective: charbonnier + alpha * ssim. With alpha < 0,
/// minimizing the loss maximizes structural similarity.
template <typename S>
Tensor<S> loss_stage(const Tensor<S>& pred, const Tensor<S>& gt, const LossConfig& cfg) {
  Tensor<S> l = charbonnier(pred, gt, static_cast<S>(cfg.eps));
  if (cfg.use_ssim) l = add(l, scale(ssim(pred, gt, cfg), static_cast<S>(cfg.alpha)));
  return l;
}

/// Joint two-stage objective: stage-1 pair + lambda * stage-2 pair.
template <typename S>
Tensor<S> loss_total(const Tensor<S>& derained_sub, const Tensor<S>& gt_sub,
                     const Tensor<S>& restored_full, const Tensor<S>& gt_full,
                     const LossConfig& cfg) {
  Tensor<S> l1 = loss_stage(derained_sub, gt_sub, cfg);
  Tensor<S> l2 = loss_stage(restored_full, gt_full, cfg);
  return add(l1, scale(l2, static_cast<S>(cfg.lambda)));
}

/// Peak signal-to-noise ratio at unit data range; +inf when pred == gt.
template <typename S>
double psnr(const Tensor<S>& pred, const Tensor<S>& gt) {
  require(pred.shape() == gt.shape(), "psnr: shape mismatch");
  double mse = 0;
  const Index n = pred.size();
  for (Index i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.at(i)) - static_cast<double>(gt.at(i));
    mse += d * d;
  }
  mse /= static_cast<double>(n);
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

/// Metric-flavored SSIM (plain double, no grad).
template <typename S>
double ssim_metric(const Tensor<S>& pred, const Tensor<S>& gt, const LossConfig& cfg = {}) {
  return static_cast<double>(ssim(pred.detached(), gt.detached(), cfg).item());
}

}  // namespace elf

#pragma once

#include "elf/tensor.hpp"

namespace elf {

enum class DegradationKind { rain, lowlight };

/// Seedable procedural degradation description. Ranges are sampled per
/// image; generation is a pure function of (spec, seed).
struct DegradationSpec {
  DegradationKind kind = DegradationKind::rain;

  // rain streak population
  int streak_count_min = 40;
  int streak_count_max = 120;
  double angle_min_deg = -20.0, angle_max_deg = 20.0;  // from vertical
  double length_min = 8.0, length_max = 24.0;          // px
  double width_min = 1.2, width_max = 2.6;             // px
  double intensity_min = 0.06, intensity_max = 0.30;   // additive, in [0,0.6]
  double blur_sigma_min = 0.3, blur_sigma_max = 1.2;

  // low-light
  double gamma_min = 1.5, gamma_max = 2.8;
  double gain_min = 0.4, gain_max = 0.9;
  double noise_sigma = 0.01;

  std::uint64_t seed = 0;

  void validate() const {
    require(streak_count_min >= 0 && streak_count_max >= streak_count_min,
            "spec: bad streak count range");
    require(angle_max_deg >= angle_min_deg, "spec: bad angle range");
    require(length_min > 0 && length_max >= length_min, "spec: bad length range");
    require(width_min > 0 && width_max >= width_min, "spec: bad width range");
    require(intensity_min >= 0 && intensity_max >= intensity_min && intensity_max <= 0.6,
            "spec: intensity range must lie in [0,0.6]");
    require(blur_sigma_min > 0 && blur_sigma_max >= blur_sigma_min, "spec: bad blur range");
    require(gamma_min > 0 && gamma_max >= gamma_min, "spec: bad gamma range");
    require(gain_min > 0 && gain_max >= gain_min, "spec: bad gain range");
    require(noise_sigma >= 0, "spec: noise sigma must be >= 0");
  }
};

/// One (clean, degraded, degradation layer) triple, planar [3,H,W] in [0,1].
struct Sample {
  Tensor<float> clean;
  Tensor<float> degraded;
  Tensor<float> degradation_map;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t spec_seed, std::uint64_t call_seed) {
  std::uint64_t s = spec_seed ^ (0x9E3779B97F4A7C15ull + call_seed);
  splitmix64(s);
  return s;
}

/// Separable Gaussian blur with reflected edges, in place.
inline void gaussian_blur(std::vector<float>& img, Index h, Index w, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    taps[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += taps[static_cast<std::size_t>(i + radius)];
  }
  for (double& t : taps) t /= sum;

  auto reflect = [](Index i, Index n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return std::clamp<Index>(i, 0, n - 1);
  };
  std::vector<float> tmp(img.size());
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i)
        acc += taps[static_cast<std::size_t>(i + radius)] *
               img[static_cast<std::size_t>(y * w + reflect(x + i, w))];
      tmp[static_cast<std::size_t>(y * w + x)] = static_cast<float>(acc);
    }
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i)
        acc += taps[static_cast<std::size_t>(i + radius)] *
               tmp[static_cast<std::size_t>(reflect(y + i, h) * w + x)];
      img[static_cast<std::size_t>(y * w + x)] = static_cast<float>(acc);
    }
}

}  // namespace detail

/// Additive rain: anti-aliased capsule streaks, Gaussian-blurred, composited
/// over the clean image with clipping. degraded = clip(clean + map), map >= 0.
inline Sample synth_rain(const Tensor<float>& clean, const DegradationSpec& spec,
                         std::uint64_t seed) {
  spec.validate();
  require(clean.rank() == 3 && clean.dim(0) == 3, "synth_rain: clean must be [3,H,W]");
  const Index h = clean.dim(1), w = clean.dim(2);
  std::uint64_t rng = detail::mix_seed(spec.seed, seed);

  std::vector<float> layer(static_cast<std::size_t>(h * w), 0.0f);
  const int count = spec.streak_count_min +
                    static_cast<int>(splitmix64(rng) %
                                     static_cast<std::uint64_t>(spec.streak_count_max -
                                                                spec.streak_count_min + 1));
  for (int s = 0; s < count; ++s) {
    const double cx = uniform_in(rng, 0, static_cast<double>(w));
    const double cy = uniform_in(rng, 0, static_cast<double>(h));
    const double angle = uniform_in(rng, spec.angle_min_deg, spec.angle_max_deg) * M_PI / 180.0;
    const double len = uniform_in(rng, spec.length_min, spec.length_max);
    const double width = uniform_in(rng, spec.width_min, spec.width_max);
    const double intensity = uniform_in(rng, spec.intensity_min, spec.intensity_max);
    const double dx = std::sin(angle), dy = std::cos(angle);  // from vertical
    const double x0 = cx - dx * len / 2, y0 = cy - dy * len / 2;
    const double x1 = cx + dx * len / 2, y1 = cy + dy * len / 2;

    const double margin = width / 2 + 1.5;
    const Index ylo = std::max<Index>(0, static_cast<Index>(std::floor(std::min(y0, y1) - margin)));
    const Index yhi = std::min<Index>(h - 1, static_cast<Index>(std::ceil(std::max(y0, y1) + margin)));
    const Index xlo = std::max<Index>(0, static_cast<Index>(std::floor(std::min(x0, x1) - margin)));
    const Index xhi = std::min<Index>(w - 1, static_cast<Index>(std::ceil(std::max(x0, x1) + margin)));
    const double seg_len2 = (x1 - x0) * (x1 - x0) + (y1 - y0) * (y1 - y0);
    for (Index py = ylo; py <= yhi; ++py) {
      for (Index px = xlo; px <= xhi; ++px) {
        // distance from pixel center to the segment
        double t = seg_len2 > 0
                       ? ((px - x0) * (x1 - x0) + (py - y0) * (y1 - y0)) / seg_len2
                       : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double qx = x0 + t * (x1 - x0), qy = y0 + t * (y1 - y0);
        const double dist = std::hypot(px - qx, py - qy);
        const double coverage = std::clamp(0.5 + (width / 2 - dist), 0.0, 1.0);  // 1px AA band
        layer[static_cast<std::size_t>(py * w + px)] += static_cast<float>(intensity * coverage);
      }
    }
  }
  const double sigma = uniform_in(rng, spec.blur_sigma_min, spec.blur_sigma_max);
  detail::gaussian_blur(layer, h, w, sigma);

  std::vector<float> map(static_cast<std::size_t>(3 * h * w));
  std::vector<float> degraded(static_cast<std::size_t>(3 * h * w));
  const float* cd = clean.data();
  for (Index c = 0; c < 3; ++c)
    for (Index p = 0; p < h * w; ++p) {
      const std::size_t i = static_cast<std::size_t>(c * h * w + p);
      map[i] = layer[static_cast<std::size_t>(p)];
      degraded[i] = std::min(1.0f, std::max(0.0f, cd[i] + map[i]));
    }
  return {clean, Tensor<float>(Shape{3, h, w}, std::move(degraded)),
          Tensor<float>(Shape{3, h, w}, std::move(map))};
}

/// Low-light: degraded = clip(gain * clean^gamma + noise);
/// map = clip(clean - degraded, 0, 1).
inline Sample synth_lowlight(const Tensor<float>& clean, const DegradationSpec& spec,
                             std::uint64_t seed) {
  spec.validate();
  require(clean.rank() == 3 && clean.dim(0) == 3, "synth_lowlight: clean must be [3,H,W]");
  std::uint64_t rng = detail::mix_seed(spec.seed, seed ^ 0x10117ull);
  const double gamma = uniform_in(rng, spec.gamma_min, spec.gamma_max);
  const double gain = uniform_in(rng, spec.gain_min, spec.gain_max);

  std::vector<float> degraded(static_cast<std::size_t>(clean.size()));
  std::vector<float> map(static_cast<std::size_t>(clean.size()));
  for (Index i = 0; i < clean.size(); ++i) {
    const double v = gain * std::pow(static_cast<double>(clean.at(i)), gamma) +
                     spec.noise_sigma * normal01(rng);
    degraded[static_cast<std::size_t>(i)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    map[static_cast<std::size_t>(i)] = static_cast<float>(
        std::clamp(static_cast<double>(clean.at(i)) - degraded[static_cast<std::size_t>(i)], 0.0, 1.0));
  }
  return {clean, Tensor<float>(clean.shape(), std::move(degraded)),
          Tensor<float>(clean.shape(), std::move(map))};
}

inline Sample synth(const Tensor<float>& clean, const DegradationSpec& spec, std::uint64_t seed) {
  return spec.kind == DegradationKind::rain ? synth_rain(clean, spec, seed)
                                            : synth_lowlight(clean, spec, seed);
}

/// Identical random window across clean/degraded/map. `multiple` carries the
/// model's divisibility constraint for the patch side.
inline Sample crop_patch(const Sample& s, Index size, std::uint64_t& rng, Index multiple = 1) {
  const Index h = s.clean.dim(1), w = s.clean.dim(2);
  require(size >= 1 && size <= std::min(h, w), "crop_patch: size too large");
  require(multiple >= 1 && size % multiple == 0,
          "crop_patch: size " + std::to_string(size) + " not divisible by " +
              std::to_string(multiple));
  const Index y0 = static_cast<Index>(splitmix64(rng) % static_cast<std::uint64_t>(h - size + 1));
  const Index x0 = static_cast<Index>(splitmix64(rng) % static_cast<std::uint64_t>(w - size + 1));
  auto window = [&](const Tensor<float>& t) {
    std::vector<float> out(static_cast<std::size_t>(3 * size * size));
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < size; ++y)
        for (Index x = 0; x < size; ++x)
          out[static_cast<std::size_t>((c * size + y) * size + x)] =
              t.at((c * h + y0 + y) * w + x0 + x);
    return Tensor<float>(Shape{3, size, size}, std::move(out));
  };
  return {window(s.clean), window(s.degraded), window(s.degradation_map)};
}

/// Random horizontal flip, applied identically to all three tensors.
inline Sample augment(const Sample& s, std::uint64_t& rng) {
  if (uniform01(rng) < 0.5) return s;
  const Index h = s.clean.dim(1), w = s.clean.dim(2);
  auto flip = [&](const Tensor<float>& t) {
    std::vector<float> out(static_cast<std::size_t>(t.size()));
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x)
          out[static_cast<std::size_t>((c * h + y) * w + x)] = t.at((c * h + y) * w + (w - 1 - x));
    return Tensor<float>(t.shape(), std::move(out));
  };
  return {flip(s.clean), flip(s.degraded), flip(s.degradation_map)};
}

/// Procedural clean source: mixed low-frequency sinusoids plus two octaves of
/// bilinear value noise, squashed into a comfortable [0,1] interior range.
inline Tensor<float> texture_image(std::uint64_t seed, Index h, Index w) {
  std::uint64_t rng = seed * 0x9E3779B97F4A7C15ull + 0x7E7Eull;
  std::vector<float> img(static_cast<std::size_t>(3 * h * w));

  struct Wave {
    double fx, fy, phase, amp[3];
  };
  std::vector<Wave> waves(4);
  for (Wave& wv : waves) {
    const double freq = uniform_in(rng, 0.5, 3.0);
    const double theta = uniform_in(rng, 0, 2 * M_PI);
    wv.fx = freq * std::cos(theta) / static_cast<double>(w);
    wv.fy = freq * std::sin(theta) / static_cast<double>(h);
    wv.phase = uniform_in(rng, 0, 2 * M_PI);
    for (double& a : wv.amp) a = uniform_in(rng, 0.1, 0.45);
  }
  // value-noise grids, bilinearly upsampled
  const Index g1 = 6, g2 = 12;
  std::vector<double> n1(static_cast<std::size_t>(g1 * g1)), n2(static_cast<std::size_t>(g2 * g2));
  for (double& v : n1) v = uniform_in(rng, -1, 1);
  for (double& v : n2) v = uniform_in(rng, -1, 1);
  auto value_noise = [](const std::vector<double>& grid, Index g, double u, double v) {
    const double gx = u * static_cast<double>(g - 1), gy = v * static_cast<double>(g - 1);
    const Index x0 = std::min<Index>(g - 2, static_cast<Index>(gx));
    const Index y0 = std::min<Index>(g - 2, static_cast<Index>(gy));
    const double fx = gx - static_cast<double>(x0), fy = gy - static_cast<double>(y0);
    const double a = grid[static_cast<std::size_t>(y0 * g + x0)];
    const double b = grid[static_cast<std::size_t>(y0 * g + x0 + 1)];
    const double c = grid[static_cast<std::size_t>((y0 + 1) * g + x0)];
    const double d = grid[static_cast<std::size_t>((y0 + 1) * g + x0 + 1)];
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy;
  };

  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const double u = static_cast<double>(x) / static_cast<double>(w);
      const double v = static_cast<double>(y) / static_cast<double>(h);
      const double noise =
          0.3 * value_noise(n1, g1, u, v) + 0.15 * value_noise(n2, g2, u, v);
      for (Index c = 0; c < 3; ++c) {
        double acc = 0;
        for (const Wave& wv : waves)
          acc += wv.amp[c] * std::sin(2 * M_PI * (wv.fx * x + wv.fy * y) + wv.phase);
        const double val = 0.5 + 0.4 * std::tanh(acc + noise);
        img[static_cast<std::size_t>((c * h + y) * w + x)] = static_cast<float>(val);
      }
    }
  }
  return Tensor<float>(Shape{3, h, w}, std::move(img));
}

/// Normalized ITU-R 601 luma histogram over [0,1].
inline std::vector<double> luminance_histogram(const Tensor<float>& img, int bins) {
  require(img.rank() == 3 && img.dim(0) == 3, "luminance_histogram: image must be [3,H,W]");
  const Index hw = img.dim(1) * img.dim(2);
  std::vector<double> hist(static_cast<std::size_t>(bins), 0.0);
  for (Index p = 0; p < hw; ++p) {
    const double y = 0.299 * img.at(p) + 0.587 * img.at(hw + p) + 0.114 * img.at(2 * hw + p);
    int b = static_cast<int>(y * bins);
    b = std::clamp(b, 0, bins - 1);
    hist[static_cast<std::size_t>(b)] += 1.0;
  }
  for (double& v : hist) v /= static_cast<double>(hw);
  return hist;
}

inline double histogram_l1(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "histogram_l1: bin count mismatch");
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
  return d;
}

}  // namespace elf

#pragma once

#include <string>

#include "elf/tensor.hpp"

namespace elf {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Load an 8-bit RGB PNG as a planar [3,H,W] tensor in [0,1] (v/255).
Tensor<float> load_png(const std::string& path);

/// Save a [3,H,W] tensor as 8-bit RGB PNG; values are clamped to [0,1] and
/// quantized round-half-up, so save-load-save is byte-stable.
void save_png(const Tensor<float>& image, const std::string& path);

inline std::uint8_t quantize_u8(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<std::uint8_t>(std::floor(c * 255.0f + 0.5f));
}

/// Reflect-pad (no edge repetition) a [C,H,W] image on the bottom/right up to
/// target_h x target_w. Pad amounts must be < side - 1.
template <typename S>
Tensor<S> pad_reflect(const Tensor<S>& img, Index target_h, Index target_w) {
  require(img.rank() == 3, "pad_reflect: image must be [C,H,W]");
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  require(target_h >= h && target_w >= w, "pad_reflect: target smaller than image");
  require(target_h - h <= h - 1 && target_w - w <= w - 1,
          "pad_reflect: pad exceeds reflectable size");
  std::vector<S> out(static_cast<std::size_t>(c * target_h * target_w));
  const S* src = img.data();
  for (Index ch = 0; ch < c; ++ch) {
    for (Index y = 0; y < target_h; ++y) {
      const Index sy = y < h ? y : 2 * h - 2 - y;
      for (Index x = 0; x < target_w; ++x) {
        const Index sx = x < w ? x : 2 * w - 2 - x;
        out[static_cast<std::size_t>((ch * target_h + y) * target_w + x)] =
            src[(ch * h + sy) * w + sx];
      }
    }
  }
  return Tensor<S>(Shape{c, target_h, target_w}, std::move(out));
}

/// Top-left crop of a [C,H,W] image.
template <typename S>
Tensor<S> crop_top_left(const Tensor<S>& img, Index out_h, Index out_w) {
  require(img.rank() == 3, "crop_top_left: image must be [C,H,W]");
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  require(out_h <= h && out_w <= w, "crop_top_left: crop larger than image");
  std::vector<S> out(static_cast<std::size_t>(c * out_h * out_w));
  const S* src = img.data();
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < out_h; ++y)
      for (Index x = 0; x < out_w; ++x)
        out[static_cast<std::size_t>((ch * out_h + y) * out_w + x)] = src[(ch * h + y) * w + x];
  return Tensor<S>(Shape{c, out_h, out_w}, std::move(out));
}

template <typename S>
Tensor<S> clip01(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (S& v : out) v = std::min(S(1), std::max(S(0), v));
  return Tensor<S>(x.shape(), std::move(out));
}

}  // namespace elf

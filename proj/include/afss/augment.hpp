#pragma once

// Paired image/mask augmentation: flip, crop-and-resize, rotate about the
// centre. Both tensors go through one inverse pixel mapping, so the mask always
// follows its image. Images are resampled bilinearly with border clamping;
// masks use nearest lookup and read 0 outside the frame, so they stay binary.

#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>

#include "afss/tensor.hpp"

namespace afss {

struct AugmentParams {
  double angle_deg = 0.0;
  double crop_scale = 1.0;  // side of the crop window as a fraction of the image
  double crop_x = 0.0;      // window origin as a fraction of the free margin, in [0,1]
  double crop_y = 0.0;
  bool hflip = false;
  bool vflip = false;

  static AugmentParams identity() { return {}; }
};

struct AugmentRanges {
  double max_rotation_deg = 30.0;
  double min_crop_scale = 0.7;
  double max_crop_scale = 1.0;
  double flip_probability = 0.5;
  std::size_t max_retries = 8;

  void validate() const {
    if (max_rotation_deg < 0 || !(min_crop_scale > 0 && min_crop_scale <= max_crop_scale && max_crop_scale <= 1) ||
        flip_probability < 0 || flip_probability > 1) {
      throw std::invalid_argument("augmentation ranges out of bounds");
    }
  }
};

inline AugmentParams sample_augmentation(const AugmentRanges& r, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  AugmentParams p;
  p.angle_deg = (2.0 * u01(rng) - 1.0) * r.max_rotation_deg;
  p.crop_scale = r.min_crop_scale + (r.max_crop_scale - r.min_crop_scale) * u01(rng);
  p.crop_x = u01(rng);
  p.crop_y = u01(rng);
  p.hflip = u01(rng) < r.flip_probability;
  p.vflip = u01(rng) < r.flip_probability;
  return p;
}

struct AugmentedPair {
  Tensor<float> image;  // (C,H,W)
  Tensor<float> mask;   // (H,W)
};

// image (C,H,W), mask (H,W).
inline AugmentedPair apply_augmentation(const Tensor<float>& image, const Tensor<float>& mask, const AugmentParams& p) {
  require_rank(image, 3, "augment image");
  require_rank(mask, 2, "augment mask");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (mask.dim(0) != h || mask.dim(1) != w) throw ShapeError("augment: mask and image differ in resolution");
  if (!(p.crop_scale > 0 && p.crop_scale <= 1)) throw std::invalid_argument("augment: crop_scale must lie in (0,1]");

  AugmentedPair out{Tensor<float>(image.shape()), Tensor<float>(mask.shape())};
  const double theta = p.angle_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  const double fw = static_cast<double>(w), fh = static_cast<double>(h);
  const double cx = 0.5 * fw, cy = 0.5 * fh;
  const double ox = p.crop_x * (1.0 - p.crop_scale) * fw, oy = p.crop_y * (1.0 - p.crop_scale) * fh;

  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      // output pixel centre -> undo rotation -> undo crop -> undo flips
      const double ux = static_cast<double>(x) + 0.5 - cx, uy = static_cast<double>(y) + 0.5 - cy;
      double sx = ct * ux + st * uy + cx;
      double sy = -st * ux + ct * uy + cy;
      sx = ox + sx * p.crop_scale;
      sy = oy + sy * p.crop_scale;
      if (p.hflip) sx = fw - sx;
      if (p.vflip) sy = fh - sy;

      const bool inside = sx >= 0 && sx < fw && sy >= 0 && sy < fh;
      out.mask[y * w + x] =
          inside ? mask[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)] : 0.f;

      const double px = std::clamp(sx - 0.5, 0.0, fw - 1.0), py = std::clamp(sy - 0.5, 0.0, fh - 1.0);
      const auto x0 = static_cast<std::size_t>(px), y0 = static_cast<std::size_t>(py);
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double ax = px - static_cast<double>(x0), ay = py - static_cast<double>(y0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = (1 - ay) * ((1 - ax) * image.at(ch, y0, x0) + ax * image.at(ch, y0, x1)) +
                         ay * ((1 - ax) * image.at(ch, y1, x0) + ax * image.at(ch, y1, x1));
        out.image.at(ch, y, x) = static_cast<float>(v);
      }
    }
  return out;
}

// Draws parameters until the augmented mask keeps some foreground. nullopt once
// the retry budget is spent.
inline std::optional<AugmentedPair> augment_nonempty(const Tensor<float>& image, const Tensor<float>& mask,
                                                     const AugmentRanges& ranges, std::mt19937_64& rng) {
  for (std::size_t attempt = 0; attempt <= ranges.max_retries; ++attempt) {
    AugmentedPair pair = apply_augmentation(image, mask, sample_augmentation(ranges, rng));
    for (float v : pair.mask.values())
      if (v > 0.5f) return pair;
  }
  return std::nullopt;
}

}  // namespace afss

#pragma once
// Separable Gaussian smoothing with zero padding and mask renormalisation.

#include <nullfwe/volume.hpp>

#include <cmath>
#include <numbers>
#include <vector>

namespace nullfwe {

inline double fwhm_to_sigma(double fwhm) { return fwhm / (2.0 * std::sqrt(2.0 * std::numbers::ln2)); }

/// Unit-sum sampled Gaussian, index 0 at offset -radius.
inline std::vector<double> gaussian_kernel_1d(double sigma_vox) {
  if (sigma_vox <= 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(6.0 * sigma_vox));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int j = -radius; j <= radius; ++j) {
    const double w = std::exp(-0.5 * j * j / (sigma_vox * sigma_vox));
    k[static_cast<std::size_t>(j + radius)] = w;
    sum += w;
  }
  for (auto& w : k) w /= sum;
  return k;
}

namespace detail {

// In-place convolution of `v` along `axis` with zero padding.
inline void convolve_axis(std::vector<double>& v, const GridMeta& g, int axis, const std::vector<double>& k) {
  if (k.size() == 1) return;
  const int radius = static_cast<int>(k.size() / 2);
  const int n = axis == 0 ? g.nx : axis == 1 ? g.ny : g.nz;
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? static_cast<std::size_t>(g.nx)
                                                       : static_cast<std::size_t>(g.nx) * g.ny;
  const std::size_t lines = g.size() / static_cast<std::size_t>(n);
  std::vector<double> line(static_cast<std::size_t>(n)), out(static_cast<std::size_t>(n));
  for (std::size_t l = 0; l < lines; ++l) {
    // Base offset of the l-th line orthogonal to `axis`.
    std::size_t base;
    if (axis == 0) {
      base = l * static_cast<std::size_t>(g.nx);
    } else if (axis == 1) {
      const std::size_t x = l % static_cast<std::size_t>(g.nx), z = l / static_cast<std::size_t>(g.nx);
      base = x + z * static_cast<std::size_t>(g.nx) * g.ny;
    } else {
      base = l;
    }
    for (int i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = v[base + static_cast<std::size_t>(i) * stride];
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      const int lo = std::max(-radius, -i), hi = std::min(radius, n - 1 - i);
      for (int j = lo; j <= hi; ++j)
        acc += k[static_cast<std::size_t>(j + radius)] * line[static_cast<std::size_t>(i + j)];
      out[static_cast<std::size_t>(i)] = acc;
    }
    for (int i = 0; i < n; ++i) v[base + static_cast<std::size_t>(i) * stride] = out[static_cast<std::size_t>(i)];
  }
}

inline void smooth_in_place(std::vector<double>& v, const GridMeta& g, double fwhm_mm) {
  const std::array<double, 3> d = g.voxel_mm();
  for (int axis = 0; axis < 3; ++axis)
    convolve_axis(v, g, axis, gaussian_kernel_1d(fwhm_to_sigma(fwhm_mm) / d[static_cast<std::size_t>(axis)]));
}

}  // namespace detail

/// Smooths inside `mask`: result = K*(v.m) / K*(m) on the mask, 0 outside.
inline Volume gaussian_smooth(const Volume& vol, double fwhm_mm, const Mask& mask) {
  if (!(fwhm_mm >= 0.0) || !std::isfinite(fwhm_mm)) throw DomainError("smoothing FWHM must be >= 0");
  require_same_grid(vol.meta(), mask.meta(), "smoothing volume and mask");
  const GridMeta& g = vol.meta();
  std::vector<double> num(g.size()), den(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    den[i] = mask[i] ? 1.0 : 0.0;
    num[i] = mask[i] ? vol[i] : 0.0;
  }
  if (fwhm_mm == 0.0) return Volume(g, std::move(num));
  detail::smooth_in_place(num, g, fwhm_mm);
  detail::smooth_in_place(den, g, fwhm_mm);
  for (std::size_t i = 0; i < g.size(); ++i) num[i] = (mask[i] && den[i] > 0.0) ? num[i] / den[i] : 0.0;
  return Volume(g, std::move(num));
}

/// Smooths over the whole grid; the grid box acts as the mask.
inline Volume gaussian_smooth(const Volume& vol, double fwhm_mm) {
  if (!(fwhm_mm >= 0.0) || !std::isfinite(fwhm_mm)) throw DomainError("smoothing FWHM must be >= 0");
  if (fwhm_mm == 0.0) return vol;
  return gaussian_smooth(vol, fwhm_mm, Mask(vol.meta(), true));
}

}  // namespace nullfwe

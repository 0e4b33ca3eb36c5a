#pragma once

#include <cmath>

namespace bzf::detail {

// Shared bilinear kernel for H x W x C row-major maps. Locations are
// (x, y) in texel units; out-of-bounds texels contribute zero, so both the
// value and its gradients vanish smoothly outside the map.

// out[c] += weight * map(x, y, c)
inline void bilinear_value(const double* map, int h, int w, int c, double x,
                           double y, double* out, double weight = 1.0) {
  if (!(std::isfinite(x) && std::isfinite(y))) return;
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  const int xs[2] = {x0, x0 + 1};
  const int ys[2] = {y0, y0 + 1};
  const double wx[2] = {1.0 - fx, fx};
  const double wy[2] = {1.0 - fy, fy};
  for (int iy = 0; iy < 2; ++iy) {
    if (ys[iy] < 0 || ys[iy] >= h) continue;
    for (int ix = 0; ix < 2; ++ix) {
      if (xs[ix] < 0 || xs[ix] >= w) continue;
      const double tap = weight * wy[iy] * wx[ix];
      if (tap == 0.0) continue;
      const double* texel =
          map + (static_cast<size_t>(ys[iy]) * w + xs[ix]) * c;
      for (int ch = 0; ch < c; ++ch) out[ch] += tap * texel[ch];
    }
  }
}

// Given upstream gradient u[c] w.r.t. the sampled value, accumulates the
// map gradient (if gmap != nullptr) and the location gradient (*gx, *gy).
inline void bilinear_backward(const double* map, int h, int w, int c, double x,
                              double y, const double* u, double* gmap,
                              double* gx, double* gy) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  const int xs[2] = {x0, x0 + 1};
  const int ys[2] = {y0, y0 + 1};
  const double wx[2] = {1.0 - fx, fx};
  const double wy[2] = {1.0 - fy, fy};
  // d(tap)/dx has sign -1 for the left column, +1 for the right; same for y.
  const double sx[2] = {-1.0, 1.0};
  const double sy[2] = {-1.0, 1.0};
  for (int iy = 0; iy < 2; ++iy) {
    if (ys[iy] < 0 || ys[iy] >= h) continue;
    for (int ix = 0; ix < 2; ++ix) {
      if (xs[ix] < 0 || xs[ix] >= w) continue;
      const size_t off = (static_cast<size_t>(ys[iy]) * w + xs[ix]) * c;
      const double* texel = map + off;
      double dot = 0.0;
      for (int ch = 0; ch < c; ++ch) dot += u[ch] * texel[ch];
      if (gmap != nullptr) {
        const double tap = wy[iy] * wx[ix];
        double* gt = gmap + off;
        for (int ch = 0; ch < c; ++ch) gt[ch] += tap * u[ch];
      }
      if (gx != nullptr) *gx += sx[ix] * wy[iy] * dot;
      if (gy != nullptr) *gy += sy[iy] * wx[ix] * dot;
    }
  }
}

}  // namespace bzf::detail

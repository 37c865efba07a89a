#include "guideseg/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "guideseg/layers.hpp"

namespace guideseg {

std::vector<double> guidance_heatmap(const Volume<float>& base, const Volume<float>& guided, int out_h,
                                     int out_w) {
  if (base.shape != guided.shape) throw std::invalid_argument("heatmap volumes differ in shape");
  const int H = base.height(), W = base.width(), C = base.channels();
  const std::size_t plane = base.shape.plane();
  Volume<double> norm(Shape{1, H, W});
  for (std::size_t p = 0; p < plane; ++p) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) {
      const double d = static_cast<double>(guided.data[c * plane + p]) - base.data[c * plane + p];
      s += d * d;
    }
    norm.data[p] = std::sqrt(s);
  }
  const Volume<double> up = resize_bilinear(norm, out_h, out_w);
  std::vector<double> heat(up.data.begin(), up.data.end());
  const auto [lo_it, hi_it] = std::minmax_element(heat.begin(), heat.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > 0.0)) return std::vector<double>(heat.size(), 0.0);
  // a uniform nonzero difference has no contrast; report it as full strength
  if (hi - lo <= 0.0) return std::vector<double>(heat.size(), 1.0);
  for (double& v : heat) v = (v - lo) / (hi - lo);
  return heat;
}

Raster heatmap_to_raster(const std::vector<double>& heat, int height, int width) {
  if (heat.size() != static_cast<std::size_t>(height) * width) {
    throw std::invalid_argument("heatmap size does not match raster dimensions");
  }
  Raster r;
  r.width = width;
  r.height = height;
  r.channels = 1;
  r.pixels.resize(heat.size());
  for (std::size_t i = 0; i < heat.size(); ++i) {
    r.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(heat[i], 0.0, 1.0) * 255.0));
  }
  return r;
}

}  // namespace guideseg

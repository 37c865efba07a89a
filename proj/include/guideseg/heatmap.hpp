#pragma once

#include <vector>

#include "guideseg/image_io.hpp"
#include "guideseg/volume.hpp"

namespace guideseg {

/// Where guidance acted: per-position L2 norm over channels of (guided - base),
/// bilinearly upsampled to out_h x out_w and min-max normalized to [0,1].
/// An all-zero difference gives an all-zero map. Row-major output.
std::vector<double> guidance_heatmap(const Volume<float>& base, const Volume<float>& guided, int out_h,
                                     int out_w);

/// 8-bit grayscale raster of a [0,1] map.
Raster heatmap_to_raster(const std::vector<double>& heat, int height, int width);

}  // namespace guideseg

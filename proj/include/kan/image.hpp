#pragma once

#include <string>
#include <vector>

#include "kan/common.hpp"

namespace kan {

// Interleaved 8-bit image, channels = 1 (gray) or 3 (RGB).
struct ImageU8 {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<unsigned char> pixels;  // row-major, HWC

    std::size_t idx(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
};

// Dispatches on the file's magic bytes: PNG, JPEG or uncompressed BMP.
ImageU8 decode_image_file(const std::string& path);

// 8-bit RGB (channels 3) or grayscale (channels 1) PNG with fixed settings;
// identical input produces identical bytes.
void write_png(const std::string& path, const ImageU8& image);

// Bilinear resample of planar float data (C x H x W), align-corners mapping.
// Exact at grid points that land on integer source coordinates.
inline void resize_bilinear_chw(const float* src, int channels, int sh, int sw, float* dst,
                                int dh, int dw) {
    require<ContractError>(sh >= 1 && sw >= 1 && dh >= 1 && dw >= 1,
                           "resize_bilinear_chw: degenerate dimensions");
    const double sy = dh > 1 ? static_cast<double>(sh - 1) / (dh - 1) : 0.0;
    const double sx = dw > 1 ? static_cast<double>(sw - 1) / (dw - 1) : 0.0;
    for (int c = 0; c < channels; ++c) {
        const float* plane = src + static_cast<std::size_t>(c) * sh * sw;
        float* out = dst + static_cast<std::size_t>(c) * dh * dw;
        for (int y = 0; y < dh; ++y) {
            const double fy = y * sy;
            const int y0 = static_cast<int>(fy);
            const int y1 = y0 + 1 < sh ? y0 + 1 : y0;
            const double wy = fy - y0;
            for (int x = 0; x < dw; ++x) {
                const double fx = x * sx;
                const int x0 = static_cast<int>(fx);
                const int x1 = x0 + 1 < sw ? x0 + 1 : x0;
                const double wx = fx - x0;
                const double v = (1 - wy) * ((1 - wx) * plane[y0 * sw + x0] + wx * plane[y0 * sw + x1]) +
                                 wy * ((1 - wx) * plane[y1 * sw + x0] + wx * plane[y1 * sw + x1]);
                out[y * dw + x] = static_cast<float>(v);
            }
        }
    }
}

// 256-entry blue-to-red colormap used for heatmap overlays.
inline void heat_colormap(int level, unsigned char rgb[3]) {
    const int v = level < 0 ? 0 : (level > 255 ? 255 : level);
    rgb[0] = static_cast<unsigned char>(v);
    rgb[1] = 0;
    rgb[2] = static_cast<unsigned char>(255 - v);
}

}  // namespace kan

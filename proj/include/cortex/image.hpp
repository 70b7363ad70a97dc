#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "cortex/common.hpp"

namespace cortex {

// 8-bit RGB raster. Stored row-major, interleaved channels; PPM (P6)
// round-trips losslessly.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> rgb;  // height*width*3

    std::uint8_t& at(int y, int x, int ch) {
        return rgb[static_cast<std::size_t>((y * width + x) * 3 + ch)];
    }
    std::uint8_t at(int y, int x, int ch) const {
        return rgb[static_cast<std::size_t>((y * width + x) * 3 + ch)];
    }
    bool operator==(const Image& o) const {
        return height == o.height && width == o.width && rgb == o.rgb;
    }
    std::uint64_t digest() const {
        std::uint64_t h = fnv1a64(&height, sizeof(height));
        h = fnv1a64(&width, sizeof(width), h);
        return rgb.empty() ? h : fnv1a64(rgb.data(), rgb.size(), h);
    }
};

std::string encode_ppm(const Image& img);
Image decode_ppm(const std::string& bytes);
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

// Non-overlapping patch flattening: one row per stride x stride patch in
// row-major patch order; entries are (y, x, channel) row-major in [0, 1].
template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> image_patches(const Image& img,
                                                               int stride) {
    if (stride < 1 || img.height % stride != 0 || img.width % stride != 0)
        throw ShapeError("image_patches: image dimensions not divisible by stride");
    const int gh = img.height / stride;
    const int gw = img.width / stride;
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> out(gh * gw,
                                                         stride * stride * 3);
    for (int py = 0; py < gh; ++py) {
        for (int px = 0; px < gw; ++px) {
            Eigen::Index row = static_cast<Eigen::Index>(py) * gw + px;
            Eigen::Index col = 0;
            for (int y = 0; y < stride; ++y)
                for (int x = 0; x < stride; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        out(row, col++) = static_cast<S>(
                                              img.at(py * stride + y, px * stride + x, ch)) /
                                          S(255);
        }
    }
    return out;
}

}  // namespace cortex

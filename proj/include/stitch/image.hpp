#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stitch {

// Planar float image, channels x height x width, values in [0,1].
struct Image {
    int channels = 0, h = 0, w = 0;
    std::vector<float> data;

    Image() = default;
    Image(int c, int h_, int w_, float fill = 0.f)
        : channels(c), h(h_), w(w_), data((size_t)c * h_ * w_, fill) {}

    float& at(int c, int y, int x) { return data[((size_t)c * h + y) * w + x]; }
    float at(int c, int y, int x) const { return data[((size_t)c * h + y) * w + x]; }
    size_t size() const { return data.size(); }

    // Quantizes to the 8-bit grid used by the on-disk formats.
    Image quantized() const;
};

// Binary (P6/P5) 8-bit image IO. Values are mapped [0,1] <-> [0,255] with
// round-to-nearest, so write followed by read reproduces written bytes
// exactly.
void write_ppm(const std::string& path, const Image& img);   // 3-channel
Image read_ppm(const std::string& path);
void write_pgm(const std::string& path, const Image& img);   // 1-channel
Image read_pgm(const std::string& path);

// Nearest-neighbour resize of a planar multi-channel map.
std::vector<float> resize_nearest(const std::vector<float>& src, int channels, int sh, int sw,
                                  int dh, int dw);

}  // namespace stitch

#include "stitch/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace stitch {

namespace {

uint8_t to_byte(float v) {
    float x = std::clamp(v, 0.f, 1.f) * 255.f;
    return (uint8_t)(x + 0.5f);
}

void skip_ws_and_comments(std::istream& in) {
    int c = in.peek();
    while (c == '#' || std::isspace(c)) {
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else {
            in.get();
        }
        c = in.peek();
    }
}

void read_header(std::istream& in, const char* magic, int& w, int& h) {
    std::string m;
    in >> m;
    if (m != magic) throw std::runtime_error(std::string("bad magic, expected ") + magic + " got " + m);
    skip_ws_and_comments(in);
    int maxval;
    in >> w;
    skip_ws_and_comments(in);
    in >> h;
    skip_ws_and_comments(in);
    in >> maxval;
    if (maxval != 255) throw std::runtime_error("only 8-bit images supported");
    in.get();  // single whitespace before raster
}

}  // namespace

Image Image::quantized() const {
    Image out(channels, h, w);
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = to_byte(data[i]) / 255.f;
    return out;
}

void write_ppm(const std::string& path, const Image& img) {
    if (img.channels != 3) throw std::runtime_error("write_ppm needs 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<uint8_t> row((size_t)img.w * 3);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) row[x * 3 + c] = to_byte(img.at(c, y, x));
        out.write((const char*)row.data(), (std::streamsize)row.size());
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    int w, h;
    read_header(in, "P6", w, h);
    Image img(3, h, w);
    std::vector<uint8_t> row((size_t)w * 3);
    for (int y = 0; y < h; ++y) {
        in.read((char*)row.data(), (std::streamsize)row.size());
        if (!in) throw std::runtime_error("truncated PPM: " + path);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = row[x * 3 + c] / 255.f;
    }
    return img;
}

void write_pgm(const std::string& path, const Image& img) {
    if (img.channels != 1) throw std::runtime_error("write_pgm needs 1 channel");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out << "P5\n" << img.w << " " << img.h << "\n255\n";
    std::vector<uint8_t> row((size_t)img.w);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) row[x] = to_byte(img.at(0, y, x));
        out.write((const char*)row.data(), (std::streamsize)row.size());
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

Image read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    int w, h;
    read_header(in, "P5", w, h);
    Image img(1, h, w);
    std::vector<uint8_t> row((size_t)w);
    for (int y = 0; y < h; ++y) {
        in.read((char*)row.data(), (std::streamsize)row.size());
        if (!in) throw std::runtime_error("truncated PGM: " + path);
        for (int x = 0; x < w; ++x) img.at(0, y, x) = row[x] / 255.f;
    }
    return img;
}

std::vector<float> resize_nearest(const std::vector<float>& src, int channels, int sh, int sw,
                                  int dh, int dw) {
    std::vector<float> dst((size_t)channels * dh * dw);
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < dh; ++y) {
            int sy = std::min(sh - 1, (int)(((int64_t)y * sh + sh / 2) / dh));
            for (int x = 0; x < dw; ++x) {
                int sx = std::min(sw - 1, (int)(((int64_t)x * sw + sw / 2) / dw));
                dst[((size_t)c * dh + y) * dw + x] = src[((size_t)c * sh + sy) * sw + sx];
            }
        }
    return dst;
}

}  // namespace stitch

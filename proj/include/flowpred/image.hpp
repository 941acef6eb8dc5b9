#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "flowpred/error.hpp"

namespace flowpred {

// Interleaved (row, col, channel) raster with values in [0, 1]. Grayscale
// images have channels == 1, color images 3.
struct Image {
    int width = 0, height = 0, channels = 0;
    std::vector<float> pix;

    Image() = default;
    Image(int w, int h, int c)
        : width(w), height(h), channels(c),
          pix(static_cast<std::size_t>(w) * h * c, 0.0f) {}

    std::size_t idx(int x, int y, int c = 0) const {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
    float& at(int x, int y, int c = 0) { return pix[idx(x, y, c)]; }
    float at(int x, int y, int c = 0) const { return pix[idx(x, y, c)]; }
};

namespace detail {

inline int pnm_next_int(std::istream& is, const std::string& path) {
    // Skips whitespace and '#' comments between header tokens.
    int ch = is.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = is.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = is.get();
    }
    if (ch == EOF || !std::isdigit(ch)) throw DataError(path + ": malformed PNM header");
    long val = 0;
    while (ch != EOF && std::isdigit(ch)) {
        val = val * 10 + (ch - '0');
        if (val > 1 << 30) throw DataError(path + ": header value out of range");
        ch = is.get();
    }
    if (ch != EOF) is.unget();
    return static_cast<int>(val);
}

}  // namespace detail

// Binary PGM (P5) / PPM (P6), 8-bit only.
inline Image read_image(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open image " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    int channels = 0;
    if (m0 == 'P' && m1 == '5') channels = 1;
    else if (m0 == 'P' && m1 == '6') channels = 3;
    else throw DataError(path + ": expected P5 or P6 magic");
    const int w = detail::pnm_next_int(is, path);
    const int h = detail::pnm_next_int(is, path);
    const int maxval = detail::pnm_next_int(is, path);
    if (w < 1 || h < 1) throw DataError(path + ": nonpositive image dimensions");
    if (maxval != 255) throw DataError(path + ": only maxval 255 is supported, got " +
                                       std::to_string(maxval));
    is.get();  // the single whitespace byte before the raster
    Image img(w, h, channels);
    std::vector<std::uint8_t> raw(img.pix.size());
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(is.gcount()) != raw.size())
        throw DataError(path + ": truncated raster, expected " + std::to_string(raw.size()) +
                        " bytes, got " + std::to_string(is.gcount()));
    for (std::size_t i = 0; i < raw.size(); ++i) img.pix[i] = raw[i] / 255.0f;
    return img;
}

inline void write_image(const Image& img, const std::string& path) {
    if (img.channels != 1 && img.channels != 3)
        throw DataError("write_image: channels must be 1 or 3");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os << (img.channels == 1 ? "P5" : "P6") << "\n"
       << img.width << " " << img.height << "\n255\n";
    std::vector<std::uint8_t> raw(img.pix.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const float v = std::min(1.0f, std::max(0.0f, img.pix[i]));
        raw[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!os) throw DataError("short write to " + path);
}

inline Image to_grayscale(const Image& img) {
    if (img.channels == 1) return img;
    Image g(img.width, img.height, 1);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            g.at(x, y) = 0.299f * img.at(x, y, 0) + 0.587f * img.at(x, y, 1) +
                         0.114f * img.at(x, y, 2);
    return g;
}

// Nearest-neighbor resize; sample centers map proportionally.
inline Image resize_nearest(const Image& img, int new_w, int new_h) {
    if (new_w == img.width && new_h == img.height) return img;
    Image out(new_w, new_h, img.channels);
    for (int y = 0; y < new_h; ++y) {
        const int sy = std::min(img.height - 1,
                                static_cast<int>((y + 0.5) * img.height / new_h));
        for (int x = 0; x < new_w; ++x) {
            const int sx = std::min(img.width - 1,
                                    static_cast<int>((x + 0.5) * img.width / new_w));
            for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(sx, sy, c);
        }
    }
    return out;
}

}  // namespace flowpred

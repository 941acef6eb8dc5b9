#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "flowpred/image.hpp"

namespace flowpred {

// Canny edge detection with fixed, documented choices so results are
// comparable across runs: Gaussian blur (sigma 1.4, radius ceil(3*sigma),
// replicate border), Sobel gradients, four-bin non-maximum suppression
// keeping plateaus (>= against both neighbors), and 8-connected hysteresis
// with strict thresholds at low/high fractions of the maximum gradient
// magnitude.
struct CannyParams {
    double sigma = 1.4;
    double low_frac = 0.1;
    double high_frac = 0.3;
};

namespace detail {

inline constexpr double kPi = 3.14159265358979323846;

inline std::vector<double> gaussian_blur(const std::vector<double>& gray, int w, int h,
                                         double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    const int size = 2 * radius + 1;
    std::vector<double> kernel(static_cast<std::size_t>(size) * size);
    double sum = 0.0;
    for (int ky = -radius; ky <= radius; ++ky)
        for (int kx = -radius; kx <= radius; ++kx) {
            const double v = std::exp(-(kx * kx + ky * ky) / (2.0 * sigma * sigma));
            kernel[static_cast<std::size_t>(ky + radius) * size + (kx + radius)] = v;
            sum += v;
        }
    for (auto& v : kernel) v /= sum;

    std::vector<double> out(gray.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int ky = -radius; ky <= radius; ++ky) {
                const int sy = std::min(h - 1, std::max(0, y + ky));
                for (int kx = -radius; kx <= radius; ++kx) {
                    const int sx = std::min(w - 1, std::max(0, x + kx));
                    acc += kernel[static_cast<std::size_t>(ky + radius) * size + (kx + radius)] *
                           gray[static_cast<std::size_t>(sy) * w + sx];
                }
            }
            out[static_cast<std::size_t>(y) * w + x] = acc;
        }
    return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> canny_edges(const Image& img, const CannyParams& p = {}) {
    const Image gray_img = to_grayscale(img);
    const int w = img.width, h = img.height;
    std::vector<double> gray(static_cast<std::size_t>(w) * h);
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = gray_img.pix[i];
    const std::vector<double> blur = detail::gaussian_blur(gray, w, h, p.sigma);

    auto at = [&](const std::vector<double>& buf, int x, int y) {
        return buf[static_cast<std::size_t>(std::min(h - 1, std::max(0, y))) * w +
                   std::min(w - 1, std::max(0, x))];
    };
    std::vector<double> mag(gray.size()), angle(gray.size());
    double max_mag = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double gx = -at(blur, x - 1, y - 1) + at(blur, x + 1, y - 1) -
                              2.0 * at(blur, x - 1, y) + 2.0 * at(blur, x + 1, y) -
                              at(blur, x - 1, y + 1) + at(blur, x + 1, y + 1);
            const double gy = -at(blur, x - 1, y - 1) - 2.0 * at(blur, x, y - 1) -
                              at(blur, x + 1, y - 1) + at(blur, x - 1, y + 1) +
                              2.0 * at(blur, x, y + 1) + at(blur, x + 1, y + 1);
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            mag[i] = std::sqrt(gx * gx + gy * gy);
            double a = std::atan2(gy, gx) * (180.0 / detail::kPi);
            if (a < 0.0) a += 180.0;
            angle[i] = a;
            if (mag[i] > max_mag) max_mag = mag[i];
        }

    std::vector<std::uint8_t> edges(gray.size(), 0);
    if (max_mag == 0.0) return edges;

    // Non-maximum suppression along the quantized gradient direction; out of
    // bounds counts as zero, plateaus survive.
    std::vector<double> nms(gray.size(), 0.0);
    auto mag_at = [&](int x, int y) {
        if (x < 0 || x >= w || y < 0 || y >= h) return 0.0;
        return mag[static_cast<std::size_t>(y) * w + x];
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            const double a = angle[i];
            double n1, n2;
            if (a < 22.5 || a >= 157.5) {
                n1 = mag_at(x - 1, y);
                n2 = mag_at(x + 1, y);
            } else if (a < 67.5) {
                n1 = mag_at(x + 1, y - 1);
                n2 = mag_at(x - 1, y + 1);
            } else if (a < 112.5) {
                n1 = mag_at(x, y - 1);
                n2 = mag_at(x, y + 1);
            } else {
                n1 = mag_at(x - 1, y - 1);
                n2 = mag_at(x + 1, y + 1);
            }
            if (mag[i] >= n1 && mag[i] >= n2) nms[i] = mag[i];
        }

    const double high = p.high_frac * max_mag;
    const double low = p.low_frac * max_mag;
    std::vector<std::uint8_t> state(gray.size(), 0);  // 1 = weak, 2 = strong
    std::vector<std::size_t> stack;
    for (std::size_t i = 0; i < nms.size(); ++i) {
        if (nms[i] > high) {
            state[i] = 2;
            stack.push_back(i);
            edges[i] = 1;
        } else if (nms[i] > low) {
            state[i] = 1;
        }
    }
    while (!stack.empty()) {
        const std::size_t i = stack.back();
        stack.pop_back();
        const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (dx == 0 && dy == 0) continue;
                const int nx = x + dx, ny = y + dy;
                if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
                const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
                if (state[ni] == 1 && !edges[ni]) {
                    edges[ni] = 1;
                    stack.push_back(ni);
                }
            }
    }
    return edges;
}

}  // namespace flowpred

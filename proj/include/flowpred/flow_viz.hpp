#pragma once

#include <array>
#include <cmath>

#include "flowpred/flow.hpp"
#include "flowpred/image.hpp"

namespace flowpred {

namespace detail {

// The Middlebury flow color wheel: 55 hues split over six transitions whose
// lengths follow perceptual similarity (more shades between red and yellow
// than between yellow and green).
inline constexpr int kRY = 15, kYG = 6, kGC = 4, kCB = 11, kBM = 13, kMR = 6;
inline constexpr int kWheelSize = kRY + kYG + kGC + kCB + kBM + kMR;

inline const std::array<std::array<int, 3>, kWheelSize>& color_wheel() {
    static const auto wheel = [] {
        std::array<std::array<int, 3>, kWheelSize> w{};
        int k = 0;
        for (int i = 0; i < kRY; ++i, ++k) w[k] = {255, 255 * i / kRY, 0};
        for (int i = 0; i < kYG; ++i, ++k) w[k] = {255 - 255 * i / kYG, 255, 0};
        for (int i = 0; i < kGC; ++i, ++k) w[k] = {0, 255, 255 * i / kGC};
        for (int i = 0; i < kCB; ++i, ++k) w[k] = {0, 255 - 255 * i / kCB, 255};
        for (int i = 0; i < kBM; ++i, ++k) w[k] = {255 * i / kBM, 0, 255};
        for (int i = 0; i < kMR; ++i, ++k) w[k] = {255, 0, 255 - 255 * i / kMR};
        return w;
    }();
    return wheel;
}

// rad in [0, 1]: hue from the wheel, whitened toward rad = 0. rad > 1 is
// out of range and rendered darkened.
inline void flow_color(double u, double v, double rad, float* rgb) {
    const auto& wheel = color_wheel();
    const double a = std::atan2(-v, -u) / 3.14159265358979323846;
    const double fk = (a + 1.0) / 2.0 * (kWheelSize - 1);
    const int k0 = static_cast<int>(fk);
    const int k1 = (k0 + 1) % kWheelSize;
    const double f = fk - k0;
    for (int c = 0; c < 3; ++c) {
        double col = (1.0 - f) * (wheel[k0][c] / 255.0) + f * (wheel[k1][c] / 255.0);
        if (rad <= 1.0)
            col = 1.0 - rad * (1.0 - col);  // zero motion fades to white
        else
            col *= 0.75;
        rgb[c] = static_cast<float>(col);
    }
}

}  // namespace detail

// Direction encodes hue, magnitude (normalized by max_magnitude) encodes
// saturation; zero flow is white. max_magnitude <= 0 normalizes by the
// largest vector in the field.
inline Image visualize_flow(const FlowField& f, double max_magnitude = 0.0) {
    double maxmag = max_magnitude;
    if (maxmag <= 0.0) {
        for (int y = 0; y < f.height; ++y)
            for (int x = 0; x < f.width; ++x)
                maxmag = std::max(maxmag, std::hypot(f.u(x, y), f.v(x, y)));
        if (maxmag == 0.0) maxmag = 1.0;
    }
    Image img(f.width, f.height, 3);
    float rgb[3];
    for (int y = 0; y < f.height; ++y)
        for (int x = 0; x < f.width; ++x) {
            const double u = f.u(x, y), v = f.v(x, y);
            detail::flow_color(u, v, std::hypot(u, v) / maxmag, rgb);
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = rgb[c];
        }
    return img;
}

}  // namespace flowpred

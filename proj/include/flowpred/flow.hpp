#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "flowpred/error.hpp"

namespace flowpred {

// Dense motion field in pixels/frame; u is positive rightward, v positive
// downward. Stored row-major, u and v interleaved per pixel.
struct FlowField {
    int width = 0, height = 0;
    std::vector<double> uv;

    FlowField() = default;
    FlowField(int w, int h) : width(w), height(h), uv(static_cast<std::size_t>(w) * h * 2, 0.0) {}

    std::size_t idx(int x, int y) const { return (static_cast<std::size_t>(y) * width + x) * 2; }
    double& u(int x, int y) { return uv[idx(x, y)]; }
    double u(int x, int y) const { return uv[idx(x, y)]; }
    double& v(int x, int y) { return uv[idx(x, y) + 1]; }
    double v(int x, int y) const { return uv[idx(x, y) + 1]; }
};

inline constexpr float kFloMagic = 202021.25f;  // spells "PIEH" in bytes

// Middlebury .flo: f32 magic, i32 width, i32 height, then h*w*(u,v) as f32.
inline FlowField read_flo(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open flow file " + path);
    float magic = 0.0f;
    is.read(reinterpret_cast<char*>(&magic), 4);
    if (!is || magic != kFloMagic)
        throw DataError(path + ": bad magic at offset 0, expected 202021.25");
    std::int32_t w = 0, h = 0;
    is.read(reinterpret_cast<char*>(&w), 4);
    is.read(reinterpret_cast<char*>(&h), 4);
    if (!is) throw DataError(path + ": truncated header at offset 4");
    if (w <= 0 || h <= 0)
        throw DataError(path + ": nonpositive dimensions " + std::to_string(w) + "x" +
                        std::to_string(h) + " at offset 4");
    FlowField f(w, h);
    std::vector<float> raw(f.uv.size());
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
    if (static_cast<std::size_t>(is.gcount()) != raw.size() * 4)
        throw DataError(path + ": truncated payload at offset " +
                        std::to_string(12 + is.gcount()));
    for (std::size_t i = 0; i < raw.size(); ++i) f.uv[i] = raw[i];
    return f;
}

inline void write_flo(const FlowField& f, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path + " for writing");
    const float magic = kFloMagic;
    const std::int32_t w = f.width, h = f.height;
    os.write(reinterpret_cast<const char*>(&magic), 4);
    os.write(reinterpret_cast<const char*>(&w), 4);
    os.write(reinterpret_cast<const char*>(&h), 4);
    std::vector<float> raw(f.uv.size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<float>(f.uv[i]);
    os.write(reinterpret_cast<const char*>(raw.data()),
             static_cast<std::streamsize>(raw.size() * 4));
    if (!os) throw DataError("short write to " + path);
}

inline FlowField average_flows(const std::vector<FlowField>& fields) {
    if (fields.empty()) throw DataError("average_flows: empty field list");
    const int w = fields[0].width, h = fields[0].height;
    for (const auto& f : fields)
        if (f.width != w || f.height != h)
            throw DataError("average_flows: dimension mismatch, " + std::to_string(f.width) +
                            "x" + std::to_string(f.height) + " vs " + std::to_string(w) + "x" +
                            std::to_string(h));
    FlowField out(w, h);
    for (std::size_t i = 0; i < out.uv.size(); ++i) {
        double s = 0.0;
        for (const auto& f : fields) s += f.uv[i];
        out.uv[i] = s / static_cast<double>(fields.size());
    }
    return out;
}

// The M x N partition of a length: cell i covers [lo, hi). The last cell
// absorbs any remainder so every pixel belongs to exactly one cell.
inline std::pair<int, int> cell_bounds(int total, int parts, int i) {
    const int base = total / parts;
    const int lo = i * base;
    const int hi = (i == parts - 1) ? total : lo + base;
    return {lo, hi};
}

// Pools a dense field to grid resolution: cell (i, j) holds the mean vector
// over its pixels. Output width = n (columns), height = m (rows).
inline FlowField cell_mean_field(const FlowField& f, int m, int n) {
    if (m < 1 || n < 1 || m > f.height || n > f.width)
        throw DataError("cell_mean_field: grid " + std::to_string(m) + "x" + std::to_string(n) +
                        " does not fit field " + std::to_string(f.height) + "x" +
                        std::to_string(f.width));
    FlowField out(n, m);
    for (int i = 0; i < m; ++i) {
        const auto [y0, y1] = cell_bounds(f.height, m, i);
        for (int j = 0; j < n; ++j) {
            const auto [x0, x1] = cell_bounds(f.width, n, j);
            double su = 0.0, sv = 0.0;
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) {
                    su += f.u(x, y);
                    sv += f.v(x, y);
                }
            const double cnt = static_cast<double>((y1 - y0) * (x1 - x0));
            out.u(j, i) = su / cnt;
            out.v(j, i) = sv / cnt;
        }
    }
    return out;
}

// Nearest-neighbor spatial resize. Vectors are motion in pixels, so they
// scale with the per-axis resize factors.
inline FlowField resize_flow_nearest(const FlowField& f, int new_w, int new_h) {
    if (new_w == f.width && new_h == f.height) return f;
    FlowField out(new_w, new_h);
    const double su = static_cast<double>(new_w) / f.width;
    const double sv = static_cast<double>(new_h) / f.height;
    for (int y = 0; y < new_h; ++y) {
        const int sy = std::min(f.height - 1, static_cast<int>((y + 0.5) * f.height / new_h));
        for (int x = 0; x < new_w; ++x) {
            const int sx = std::min(f.width - 1, static_cast<int>((x + 0.5) * f.width / new_w));
            out.u(x, y) = f.u(sx, sy) * su;
            out.v(x, y) = f.v(sx, sy) * sv;
        }
    }
    return out;
}

}  // namespace flowpred

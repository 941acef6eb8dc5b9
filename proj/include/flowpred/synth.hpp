#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "flowpred/error.hpp"
#include "flowpred/flow.hpp"
#include "flowpred/image.hpp"
#include "flowpred/rng.hpp"

namespace flowpred {

// Textured sprites translating at constant velocity over a static textured
// background. Ground truth is exact by construction: a pixel covered by a
// sprite carries that sprite's velocity, everything else is (0, 0).

enum class SpriteShape { Rectangle, Disc };

struct SpriteSpec {
    SpriteShape shape = SpriteShape::Rectangle;
    std::uint64_t texture_seed = 0;
    double x = 0.0, y = 0.0;    // rect: top-left corner; disc: center
    int w = 0, h = 0;           // rect extent
    double radius = 0.0;        // disc radius
    double vu = 0.0, vv = 0.0;  // pixels/frame
    double intensity = 0.8;     // mean texture brightness
    double jitter = 0.12;       // texture amplitude around intensity
};

struct SyntheticSceneSpec {
    int width = 64, height = 64;
    int frames = 5;
    std::uint64_t background_seed = 0;
    std::vector<SpriteSpec> sprites;
};

namespace detail {

inline double hash01(std::uint64_t seed, std::int64_t a, std::int64_t b, std::int64_t c) {
    std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(a + 1)) ^
                      (0xc2b2ae3d27d4eb4fULL * static_cast<std::uint64_t>(b + 2)) ^
                      (0x165667b19e3779f9ULL * static_cast<std::uint64_t>(c + 3));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return static_cast<double>(z >> 11) * 0x1.0p-53;
}

inline bool sprite_covers(const SpriteSpec& s, double t, int px, int py, int* lx, int* ly) {
    const double sx = s.x + t * s.vu, sy = s.y + t * s.vv;
    if (s.shape == SpriteShape::Rectangle) {
        const int x0 = static_cast<int>(std::llround(sx));
        const int y0 = static_cast<int>(std::llround(sy));
        if (px < x0 || px >= x0 + s.w || py < y0 || py >= y0 + s.h) return false;
        *lx = px - x0;
        *ly = py - y0;
        return true;
    }
    const double dx = px - sx, dy = py - sy;
    if (dx * dx + dy * dy > s.radius * s.radius) return false;
    *lx = static_cast<int>(std::llround(dx + s.radius));
    *ly = static_cast<int>(std::llround(dy + s.radius));
    return true;
}

}  // namespace detail

inline void validate(const SyntheticSceneSpec& spec) {
    if (spec.width < 1 || spec.height < 1 || spec.frames < 1)
        throw DataError("scene spec: canvas and frame count must be positive");
    for (std::size_t i = 0; i < spec.sprites.size(); ++i) {
        const auto& s = spec.sprites[i];
        if (!std::isfinite(s.vu) || !std::isfinite(s.vv))
            throw DataError("sprite " + std::to_string(i) + ": velocity must be finite");
        bool inside = false;
        if (s.shape == SpriteShape::Rectangle)
            inside = s.w >= 1 && s.h >= 1 && s.x >= 0 && s.y >= 0 &&
                     s.x + s.w <= spec.width && s.y + s.h <= spec.height;
        else
            inside = s.radius > 0 && s.x - s.radius >= 0 && s.y - s.radius >= 0 &&
                     s.x + s.radius <= spec.width && s.y + s.radius <= spec.height;
        if (!inside)
            throw DataError("sprite " + std::to_string(i) + " is not inside the canvas at frame 0");
    }
}

// Renders all frames and the per-frame ground-truth flow. Sprites are painted
// in list order, so later sprites occlude earlier ones; flow follows the same
// painter's order.
inline std::pair<std::vector<Image>, std::vector<FlowField>> synthesize_sequence(
    const SyntheticSceneSpec& spec) {
    validate(spec);
    std::vector<Image> images;
    std::vector<FlowField> flows;
    images.reserve(spec.frames);
    flows.reserve(spec.frames);
    for (int t = 0; t < spec.frames; ++t) {
        Image img(spec.width, spec.height, 3);
        FlowField flow(spec.width, spec.height);
        for (int py = 0; py < spec.height; ++py)
            for (int px = 0; px < spec.width; ++px) {
                for (int c = 0; c < 3; ++c)
                    img.at(px, py, c) = static_cast<float>(
                        0.5 + 0.16 * (detail::hash01(spec.background_seed, px, py, c) - 0.5));
                // Walk sprites top-most last; the last hit wins.
                for (const auto& s : spec.sprites) {
                    int lx = 0, ly = 0;
                    if (!detail::sprite_covers(s, t, px, py, &lx, &ly)) continue;
                    for (int c = 0; c < 3; ++c) {
                        const double v =
                            s.intensity + s.jitter * (detail::hash01(s.texture_seed, lx, ly, c) - 0.5);
                        img.at(px, py, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
                    }
                    flow.u(px, py) = s.vu;
                    flow.v(px, py) = s.vv;
                }
            }
        images.push_back(std::move(img));
        flows.push_back(std::move(flow));
    }
    return {std::move(images), std::move(flows)};
}

// ---------------------------------------------------------------------------
// Texture-cue dataset: rectangles whose brightness determines their motion.
// Bright sprites always move one way, dark sprites the opposite way, so a
// single static frame fully determines the correct prediction.

struct CueDatasetOptions {
    int count = 200;
    int size = 64;
    int frames = 5;
    int min_sprites = 1, max_sprites = 3;
    double speed = 3.0;
    bool vertical = false;  // cue along v instead of u
    std::uint64_t seed = 1;
};

inline SyntheticSceneSpec make_cue_scene(const CueDatasetOptions& opt, Rng& rng) {
    SyntheticSceneSpec scene;
    scene.width = scene.height = opt.size;
    scene.frames = opt.frames;
    scene.background_seed = rng.next_u64();
    const int n_sprites =
        opt.min_sprites + static_cast<int>(rng.index(opt.max_sprites - opt.min_sprites + 1));
    const double travel = opt.speed * opt.frames;
    for (int k = 0; k < n_sprites; ++k) {
        SpriteSpec s;
        s.shape = SpriteShape::Rectangle;
        s.texture_seed = rng.next_u64();
        s.w = 10 + static_cast<int>(rng.index(11));
        s.h = 10 + static_cast<int>(rng.index(11));
        const bool bright = rng.coin();
        s.intensity = bright ? rng.uniform(0.82, 0.95) : rng.uniform(0.05, 0.18);
        s.jitter = 0.1;
        const double dir = bright ? opt.speed : -opt.speed;
        if (opt.vertical) {
            s.vu = 0.0;
            s.vv = dir;
        } else {
            s.vu = dir;
            s.vv = 0.0;
        }
        // Keep the whole trajectory inside the canvas.
        const double lo_x = 1.0 + (s.vu < 0 ? travel : 0.0);
        const double hi_x = opt.size - 1.0 - s.w - (s.vu > 0 ? travel : 0.0);
        const double lo_y = 1.0 + (s.vv < 0 ? travel : 0.0);
        const double hi_y = opt.size - 1.0 - s.h - (s.vv > 0 ? travel : 0.0);
        if (hi_x < lo_x || hi_y < lo_y)
            throw DataError("cue scene: canvas too small for speed * frames travel");
        s.x = std::floor(rng.uniform(lo_x, hi_x + 1.0));
        s.y = std::floor(rng.uniform(lo_y, hi_y + 1.0));
        scene.sprites.push_back(s);
    }
    return scene;
}

struct SynthDatasetPaths {
    std::string manifest;           // image <TAB> first min(5, frames) flows
    std::string sequence_manifest;  // image <TAB> all `frames` flows
};

// Writes `count` scenes (frame-0 image as PPM plus one .flo per frame) and
// the two manifests into `dir`.
inline SynthDatasetPaths write_cue_dataset(const std::string& dir, const CueDatasetOptions& opt) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    Rng rng(split_seed(opt.seed, 0x5c3e));
    SynthDatasetPaths out;
    out.manifest = (fs::path(dir) / "manifest.txt").string();
    out.sequence_manifest = (fs::path(dir) / "sequences.txt").string();
    std::ofstream mf(out.manifest), sf(out.sequence_manifest);
    if (!mf || !sf) throw DataError("cannot create manifests in " + dir);
    const int label_flows = std::min(5, opt.frames);
    char buf[64];
    for (int i = 0; i < opt.count; ++i) {
        const auto scene = make_cue_scene(opt, rng);
        auto [images, flows] = synthesize_sequence(scene);
        std::snprintf(buf, sizeof buf, "scene_%04d.ppm", i);
        const std::string img_name = buf;
        write_image(images[0], (fs::path(dir) / img_name).string());
        std::vector<std::string> flo_names;
        for (int t = 0; t < opt.frames; ++t) {
            std::snprintf(buf, sizeof buf, "scene_%04d_f%d.flo", i, t);
            flo_names.emplace_back(buf);
            write_flo(flows[t], (fs::path(dir) / flo_names.back()).string());
        }
        mf << img_name;
        for (int t = 0; t < label_flows; ++t) mf << (t == 0 ? "\t" : " ") << flo_names[t];
        mf << "\n";
        sf << img_name;
        for (int t = 0; t < opt.frames; ++t) sf << (t == 0 ? "\t" : " ") << flo_names[t];
        sf << "\n";
    }
    return out;
}

}  // namespace flowpred

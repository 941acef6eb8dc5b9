#pragma once

#include "flowpred/error.hpp"
#include "flowpred/flow.hpp"
#include "flowpred/image.hpp"

namespace flowpred {

struct AugmentParams {
    bool flip = false;  // horizontal mirror
    int crop_x = 0, crop_y = 0;
    int crop_w = -1, crop_h = -1;  // -1 means full frame
};

// Applies the identical crop to image and label field, then (optionally)
// mirrors both. The mirror negates the u component of every flow vector; v is
// untouched.
inline std::pair<Image, FlowField> augment(const Image& img, const FlowField& flow,
                                           const AugmentParams& p) {
    if (img.width != flow.width || img.height != flow.height)
        throw DataError("augment: image " + std::to_string(img.width) + "x" +
                        std::to_string(img.height) + " and flow " + std::to_string(flow.width) +
                        "x" + std::to_string(flow.height) + " differ");
    const int cw = p.crop_w < 0 ? img.width : p.crop_w;
    const int ch = p.crop_h < 0 ? img.height : p.crop_h;
    if (cw < 1 || ch < 1 || p.crop_x < 0 || p.crop_y < 0 || p.crop_x + cw > img.width ||
        p.crop_y + ch > img.height)
        throw DataError("augment: crop " + std::to_string(cw) + "x" + std::to_string(ch) +
                        "+" + std::to_string(p.crop_x) + "+" + std::to_string(p.crop_y) +
                        " out of bounds for " + std::to_string(img.width) + "x" +
                        std::to_string(img.height));
    Image oi(cw, ch, img.channels);
    FlowField of(cw, ch);
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) {
            const int dx = p.flip ? cw - 1 - x : x;
            for (int c = 0; c < img.channels; ++c)
                oi.at(dx, y, c) = img.at(p.crop_x + x, p.crop_y + y, c);
            of.u(dx, y) = (p.flip ? -1.0 : 1.0) * flow.u(p.crop_x + x, p.crop_y + y);
            of.v(dx, y) = flow.v(p.crop_x + x, p.crop_y + y);
        }
    return {std::move(oi), std::move(of)};
}

}  // namespace flowpred

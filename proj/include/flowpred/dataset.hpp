#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "flowpred/augment.hpp"
#include "flowpred/error.hpp"
#include "flowpred/flow.hpp"
#include "flowpred/image.hpp"

namespace flowpred {

// One training/eval record: an image and the flow files averaged into its
// label.
struct ManifestEntry {
    std::string image_path;
    std::vector<std::string> flow_paths;
};

// Text manifest, one record per line: image_path <TAB> flo_1 ... flo_k.
// Relative paths are resolved against the manifest's own directory.
inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open manifest " + path);
    const auto base = std::filesystem::path(path).parent_path();
    auto resolve = [&base](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp.string() : (base / fp).string();
    };
    std::vector<ManifestEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw DataError(path + ":" + std::to_string(lineno) +
                            ": expected 'image<TAB>flo...' record");
        ManifestEntry e;
        e.image_path = resolve(line.substr(0, tab));
        std::istringstream rest(line.substr(tab + 1));
        std::string tok;
        while (rest >> tok) e.flow_paths.push_back(resolve(tok));
        if (e.flow_paths.empty())
            throw DataError(path + ":" + std::to_string(lineno) + ": record has no flow files");
        entries.push_back(std::move(e));
    }
    if (entries.empty()) throw DataError(path + ": manifest is empty");
    return entries;
}

struct Example {
    Image image;
    FlowField flow;  // the averaged label field, same size as the image
};

inline Example load_example(const ManifestEntry& e) {
    Example ex;
    ex.image = read_image(e.image_path);
    std::vector<FlowField> fields;
    fields.reserve(e.flow_paths.size());
    for (const auto& p : e.flow_paths) fields.push_back(read_flo(p));
    ex.flow = average_flows(fields);
    if (ex.flow.width != ex.image.width || ex.flow.height != ex.image.height)
        throw DataError(e.image_path + ": image is " + std::to_string(ex.image.width) + "x" +
                        std::to_string(ex.image.height) + " but flow label is " +
                        std::to_string(ex.flow.width) + "x" + std::to_string(ex.flow.height));
    return ex;
}

// Scales so that both axes cover factor * (tw, th), then center-crops when
// asked. factor > 1 leaves slack for random cropping.
inline Example cover_resize(Example ex, int tw, int th, double factor) {
    const double scale =
        factor * std::max(static_cast<double>(tw) / ex.image.width,
                          static_cast<double>(th) / ex.image.height);
    int nw = static_cast<int>(std::ceil(ex.image.width * scale));
    int nh = static_cast<int>(std::ceil(ex.image.height * scale));
    nw = std::max(nw, tw);
    nh = std::max(nh, th);
    if (nw != ex.image.width || nh != ex.image.height) {
        ex.image = resize_nearest(ex.image, nw, nh);
        ex.flow = resize_flow_nearest(ex.flow, nw, nh);
    }
    return ex;
}

// Deterministic eval/train-without-augmentation path: short-side resize to
// the input size, then a single center crop.
inline Example fit_to_input(Example ex, int tw, int th) {
    ex = cover_resize(std::move(ex), tw, th, 1.0);
    AugmentParams crop;
    crop.crop_x = (ex.image.width - tw) / 2;
    crop.crop_y = (ex.image.height - th) / 2;
    crop.crop_w = tw;
    crop.crop_h = th;
    auto [img, flow] = augment(ex.image, ex.flow, crop);
    return {std::move(img), std::move(flow)};
}

// Loads every entry, reporting and skipping unreadable ones. Throws when
// nothing loads.
template <typename Prepare>
inline std::pair<std::vector<Example>, int> load_examples(const std::vector<ManifestEntry>& entries,
                                                          Prepare prepare, std::ostream& log) {
    std::vector<Example> out;
    out.reserve(entries.size());
    int skipped = 0;
    for (const auto& e : entries) {
        try {
            out.push_back(prepare(load_example(e)));
        } catch (const DataError& err) {
            ++skipped;
            log << "skipping " << e.image_path << ": " << err.what() << "\n";
        }
    }
    if (out.empty())
        throw DataError("all " + std::to_string(entries.size()) + " manifest entries failed to load");
    if (skipped > 0) log << "skipped " << skipped << " of " << entries.size() << " entries\n";
    return {std::move(out), skipped};
}

}  // namespace flowpred

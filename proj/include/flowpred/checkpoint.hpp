#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "flowpred/error.hpp"
#include "flowpred/net.hpp"

namespace flowpred {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

// Little-endian container: 8 magic bytes, u32 format version, u64 iteration
// counter, u32 record count, then per record (u32 name length, name bytes,
// u32 rank, u32 dims[rank], f32 payload).
inline constexpr std::array<char, 8> kNetMagic = {'F', 'C', 'N', 'E', 'T', '1', '\0', '\0'};
inline constexpr std::array<char, 8> kMultiFrameMagic = {'F', 'C', 'M', 'F', '1', '\0', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

struct CheckpointFile {
    std::array<char, 8> magic = kNetMagic;
    std::uint32_t version = kCheckpointVersion;
    std::uint64_t iteration = 0;
    std::vector<TensorRecord> records;
};

namespace detail {

template <typename T>
void put(std::ostream& os, T x) {
    os.write(reinterpret_cast<const char*>(&x), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path, const char* what) {
    T x;
    is.read(reinterpret_cast<char*>(&x), sizeof(T));
    if (!is)
        throw DataError(path + ": truncated while reading " + what + " at offset " +
                        std::to_string(static_cast<long long>(is.tellg())));
    return x;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const CheckpointFile& f) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os.write(f.magic.data(), f.magic.size());
    detail::put(os, f.version);
    detail::put(os, f.iteration);
    detail::put(os, static_cast<std::uint32_t>(f.records.size()));
    for (const auto& r : f.records) {
        detail::put(os, static_cast<std::uint32_t>(r.name.size()));
        os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        detail::put(os, static_cast<std::uint32_t>(r.dims.size()));
        std::uint64_t count = 1;
        for (std::uint32_t d : r.dims) {
            detail::put(os, d);
            count *= d;
        }
        if (count != r.data.size())
            throw DataError("record " + r.name + ": dims imply " + std::to_string(count) +
                            " values, payload has " + std::to_string(r.data.size()));
        os.write(reinterpret_cast<const char*>(r.data.data()),
                 static_cast<std::streamsize>(r.data.size() * sizeof(float)));
    }
    if (!os) throw DataError("short write to " + path);
}

inline CheckpointFile read_checkpoint(const std::string& path,
                                      const std::array<char, 8>& expected_magic) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path);
    CheckpointFile f;
    is.read(f.magic.data(), f.magic.size());
    if (!is || f.magic != expected_magic)
        throw DataError(path + ": bad magic, expected \"" +
                        std::string(expected_magic.data()) + "\"");
    f.version = detail::get<std::uint32_t>(is, path, "version");
    if (f.version != kCheckpointVersion)
        throw DataError(path + ": unsupported format version " + std::to_string(f.version));
    f.iteration = detail::get<std::uint64_t>(is, path, "iteration");
    const auto n = detail::get<std::uint32_t>(is, path, "record count");
    f.records.resize(n);
    for (auto& r : f.records) {
        const auto name_len = detail::get<std::uint32_t>(is, path, "name length");
        r.name.resize(name_len);
        is.read(r.name.data(), name_len);
        if (!is) throw DataError(path + ": truncated tensor name");
        const auto rank = detail::get<std::uint32_t>(is, path, "rank");
        r.dims.resize(rank);
        std::uint64_t count = 1;
        for (auto& d : r.dims) {
            d = detail::get<std::uint32_t>(is, path, "dim");
            count *= d;
        }
        r.data.resize(count);
        is.read(reinterpret_cast<char*>(r.data.data()),
                static_cast<std::streamsize>(count * sizeof(float)));
        if (!is) throw DataError(path + ": truncated payload of record " + r.name);
    }
    return f;
}

// NetworkParams <-> container. Tensors are written rank-4; the per-channel
// input mean rides along as a rank-1 record.
inline constexpr const char* kInputMeanRecord = "input.mean";

inline CheckpointFile to_checkpoint(const NetworkParams& params,
                                    const std::array<char, 8>& magic = kNetMagic) {
    CheckpointFile f;
    f.magic = magic;
    f.iteration = params.iteration;
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        const Tensor4& t = params.tensors[i];
        TensorRecord r;
        r.name = params.names[i];
        r.dims = {static_cast<std::uint32_t>(t.dims.n), static_cast<std::uint32_t>(t.dims.c),
                  static_cast<std::uint32_t>(t.dims.h), static_cast<std::uint32_t>(t.dims.w)};
        r.data.reserve(t.size());
        for (double x : t.v) r.data.push_back(static_cast<float>(x));
        f.records.push_back(std::move(r));
    }
    if (!params.input_mean.empty()) {
        TensorRecord r;
        r.name = kInputMeanRecord;
        r.dims = {static_cast<std::uint32_t>(params.input_mean.size())};
        for (double x : params.input_mean) r.data.push_back(static_cast<float>(x));
        f.records.push_back(std::move(r));
    }
    return f;
}

inline NetworkParams from_checkpoint(const CheckpointFile& f) {
    NetworkParams params;
    params.iteration = f.iteration;
    for (const auto& r : f.records) {
        if (r.name == kInputMeanRecord) {
            params.input_mean.assign(r.data.begin(), r.data.end());
            continue;
        }
        if (r.dims.size() != 4)
            throw DataError("record " + r.name + ": expected rank 4, got rank " +
                            std::to_string(r.dims.size()));
        Tensor4 t(static_cast<int>(r.dims[0]), static_cast<int>(r.dims[1]),
                  static_cast<int>(r.dims[2]), static_cast<int>(r.dims[3]));
        for (std::size_t i = 0; i < r.data.size(); ++i) t.v[i] = r.data[i];
        params.names.push_back(r.name);
        params.tensors.push_back(std::move(t));
    }
    return params;
}

inline void save_params(const std::string& path, const NetworkParams& params,
                        const std::array<char, 8>& magic = kNetMagic) {
    write_checkpoint(path, to_checkpoint(params, magic));
}

inline NetworkParams load_params(const std::string& path,
                                 const std::array<char, 8>& magic = kNetMagic) {
    return from_checkpoint(read_checkpoint(path, magic));
}

}  // namespace flowpred

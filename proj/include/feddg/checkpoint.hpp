#pragma once

// Parameter checkpoint container. Byte layout, all integers little-endian:
//
//   bytes 0..3   magic "FDCK"
//   bytes 4..5   version, u16 (currently 1)
//   bytes 6..9   manifest length in bytes, u32
//   manifest     UTF-8 JSON array of {"name": str, "shape": [int...],
//                "dtype": "f32", "offset": int} where offset is the byte
//                offset of the tensor inside the payload
//   payload      concatenated float32 values, row-major, little-endian
//
// Offsets are contiguous in manifest order, so payload length is checkable
// from the manifest alone.

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "feddg/autodiff.hpp"

namespace feddg::ad {

template <class S>
std::vector<uint8_t> serialize_params(const ParamSetT<S>& params) {
    nlohmann::json manifest = nlohmann::json::array();
    size_t offset = 0;
    for (size_t i = 0; i < params.size(); ++i) {
        manifest.push_back({{"name", params.names[i]},
                            {"shape", params.tensors[i].shape()},
                            {"dtype", "f32"},
                            {"offset", offset}});
        offset += params.tensors[i].numel() * sizeof(float);
    }
    const std::string mstr = manifest.dump();

    std::vector<uint8_t> out;
    out.reserve(10 + mstr.size() + offset);
    for (char m : {'F', 'D', 'C', 'K'}) out.push_back(static_cast<uint8_t>(m));
    const uint16_t version = 1;
    out.push_back(version & 0xff);
    out.push_back(version >> 8);
    const uint32_t mlen = static_cast<uint32_t>(mstr.size());
    for (int b = 0; b < 4; ++b) out.push_back((mlen >> (8 * b)) & 0xff);
    out.insert(out.end(), mstr.begin(), mstr.end());
    for (const auto& t : params.tensors)
        for (S x : t.value()) {
            const float f = static_cast<float>(x);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            for (int b = 0; b < 4; ++b) out.push_back((bits >> (8 * b)) & 0xff);
        }
    return out;
}

template <class S>
ParamSetT<S> deserialize_params(const std::vector<uint8_t>& bytes, bool requires_grad = true) {
    if (bytes.size() < 10 || bytes[0] != 'F' || bytes[1] != 'D' || bytes[2] != 'C' || bytes[3] != 'K')
        throw std::runtime_error("checkpoint: bad magic");
    const uint16_t version = bytes[4] | (bytes[5] << 8);
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
    uint32_t mlen = 0;
    for (int b = 0; b < 4; ++b) mlen |= static_cast<uint32_t>(bytes[6 + b]) << (8 * b);
    if (bytes.size() < 10 + mlen) throw std::runtime_error("checkpoint: truncated manifest");
    const auto manifest =
        nlohmann::json::parse(bytes.begin() + 10, bytes.begin() + 10 + mlen);
    const size_t payload_start = 10 + mlen;

    ParamSetT<S> params;
    size_t expect_offset = 0;
    for (const auto& entry : manifest) {
        const std::string name = entry.at("name");
        const Shape shape = entry.at("shape").get<Shape>();
        if (entry.at("dtype") != "f32") throw std::runtime_error("checkpoint: unsupported dtype");
        const size_t offset = entry.at("offset");
        if (offset != expect_offset) throw std::runtime_error("checkpoint: non-contiguous offsets");
        const size_t n = numel_of(shape);
        if (payload_start + offset + n * 4 > bytes.size())
            throw std::runtime_error("checkpoint: truncated payload");
        std::vector<S> data(n);
        for (size_t i = 0; i < n; ++i) {
            uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<uint32_t>(bytes[payload_start + offset + 4 * i + b]) << (8 * b);
            float f;
            std::memcpy(&f, &bits, 4);
            data[i] = static_cast<S>(f);
        }
        params.add(name, TensorT<S>::leaf(shape, std::move(data), requires_grad));
        expect_offset = offset + n * 4;
    }
    if (payload_start + expect_offset != bytes.size())
        throw std::runtime_error("checkpoint: trailing bytes");
    return params;
}

template <class S>
void save_checkpoint(const ParamSetT<S>& params, const std::string& path) {
    const auto bytes = serialize_params(params);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

template <class S>
ParamSetT<S> load_checkpoint(const std::string& path, bool requires_grad = true) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_params<S>(bytes, requires_grad);
}

}  // namespace feddg::ad

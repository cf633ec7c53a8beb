#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tkgqa/errors.hpp"
#include "tkgqa/tensor.hpp"

// Checkpoints store raw IEEE-754 doubles; the byte order baked into the
// format is little-endian.
static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace tkgqa {

using json = nlohmann::json;

namespace detail {
inline constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline int b64_value(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
}
}  // namespace detail

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        std::uint32_t v = (std::uint32_t(bytes[i]) << 16) | (std::uint32_t(bytes[i + 1]) << 8) |
                          std::uint32_t(bytes[i + 2]);
        out.push_back(detail::kB64Alphabet[(v >> 18) & 63]);
        out.push_back(detail::kB64Alphabet[(v >> 12) & 63]);
        out.push_back(detail::kB64Alphabet[(v >> 6) & 63]);
        out.push_back(detail::kB64Alphabet[v & 63]);
    }
    std::size_t rem = bytes.size() - i;
    if (rem == 1) {
        std::uint32_t v = std::uint32_t(bytes[i]) << 16;
        out.push_back(detail::kB64Alphabet[(v >> 18) & 63]);
        out.push_back(detail::kB64Alphabet[(v >> 12) & 63]);
        out.push_back('=');
        out.push_back('=');
    } else if (rem == 2) {
        std::uint32_t v = (std::uint32_t(bytes[i]) << 16) | (std::uint32_t(bytes[i + 1]) << 8);
        out.push_back(detail::kB64Alphabet[(v >> 18) & 63]);
        out.push_back(detail::kB64Alphabet[(v >> 12) & 63]);
        out.push_back(detail::kB64Alphabet[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
    if (text.size() % 4 != 0) throw DataError("base64: length not a multiple of 4");
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            char c = text[i + k];
            if (c == '=') {
                // Padding may only appear in the last one or two positions.
                if (i + 4 != text.size() || k < 2) throw DataError("base64: bad padding");
                v[k] = 0;
                ++pad;
            } else {
                if (pad) throw DataError("base64: data after padding");
                v[k] = detail::b64_value(c);
                if (v[k] < 0) throw DataError(std::string("base64: invalid character '") + c + "'");
            }
        }
        std::uint32_t word = (std::uint32_t(v[0]) << 18) | (std::uint32_t(v[1]) << 12) |
                             (std::uint32_t(v[2]) << 6) | std::uint32_t(v[3]);
        out.push_back(std::uint8_t((word >> 16) & 0xff));
        if (pad < 2) out.push_back(std::uint8_t((word >> 8) & 0xff));
        if (pad < 1) out.push_back(std::uint8_t(word & 0xff));
    }
    return out;
}

// Doubles round-trip bit-exactly: the payload is the raw IEEE representation.
inline std::string encode_doubles(const std::vector<double>& values) {
    std::vector<std::uint8_t> bytes(values.size() * sizeof(double));
    if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
    return base64_encode(bytes);
}

inline std::vector<double> decode_doubles(const std::string& text) {
    std::vector<std::uint8_t> bytes = base64_decode(text);
    if (bytes.size() % sizeof(double) != 0)
        throw DataError("decoded payload is not a whole number of doubles");
    std::vector<double> values(bytes.size() / sizeof(double));
    if (!values.empty()) std::memcpy(values.data(), bytes.data(), bytes.size());
    return values;
}

inline json tensor_to_json(const Tensor& t) {
    json j;
    j["shape"] = t.shape;
    j["data"] = encode_doubles(t.data);
    return j;
}

inline Tensor tensor_from_json(const json& j, const std::string& what) {
    if (!j.is_object() || !j.contains("shape") || !j.contains("data"))
        throw DataError(what + ": expected {shape, data} object");
    std::vector<std::size_t> shape = j["shape"].get<std::vector<std::size_t>>();
    std::vector<double> data = decode_doubles(j["data"].get<std::string>());
    if (Tensor::count(shape) != data.size())
        throw DataError(what + ": shape/data size mismatch, shape wants " +
                        std::to_string(Tensor::count(shape)) + " values, payload has " +
                        std::to_string(data.size()));
    return Tensor(std::move(shape), std::move(data));
}

inline json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw DataError("invalid JSON in " + path + ": " + e.what());
    }
    return j;
}

// Write-to-staging-then-rename so a crash mid-write never leaves a
// truncated checkpoint behind.
inline void save_json_atomic(const json& j, const std::string& path) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw DataError("cannot write " + tmp);
        out << j.dump(2) << '\n';
        if (!out) throw DataError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline std::uint64_t require_u64(const json& j, const std::string& key) {
    if (!j.contains(key)) throw DataError("missing field: " + key);
    return j[key].get<std::uint64_t>();
}

inline void require_field_eq(const json& j, const std::string& key, std::uint64_t expected) {
    std::uint64_t found = require_u64(j, key);
    if (found != expected)
        throw DataError(key + " mismatch: expected " + std::to_string(expected) + ", found " +
                        std::to_string(found));
}

}  // namespace tkgqa

#include "cnnaudit/encoding.hpp"

#include "cnnaudit/errors.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace cnnaudit {

static_assert(std::endian::native == std::endian::little, "artifact encoding assumes little-endian hosts");

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) {
        return {};
    }
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int written = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                        static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(written));
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    if (text.empty()) {
        return {};
    }
    if (text.size() % 4 != 0) {
        throw ParseError("base64 payload length is not a multiple of 4");
    }
    std::vector<std::uint8_t> out(3 * text.size() / 4);
    const int written = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                        static_cast<int>(text.size()));
    if (written < 0) {
        throw ParseError("invalid base64 payload");
    }
    std::size_t padding = 0;
    if (text.back() == '=') {
        ++padding;
        if (text[text.size() - 2] == '=') {
            ++padding;
        }
    }
    out.resize(static_cast<std::size_t>(written) - padding);
    return out;
}

namespace {

template <typename T>
std::string encode_array(std::span<const T> values) {
    const auto* raw = reinterpret_cast<const std::uint8_t*>(values.data());
    return base64_encode({raw, values.size() * sizeof(T)});
}

template <typename T>
std::vector<T> decode_array(std::string_view text) {
    const auto bytes = base64_decode(text);
    if (bytes.size() % sizeof(T) != 0) {
        throw ParseError("packed array has a truncated element");
    }
    std::vector<T> out(bytes.size() / sizeof(T));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

} // namespace

std::string encode_f32(std::span<const float> values) { return encode_array(values); }
std::vector<float> decode_f32(std::string_view text) { return decode_array<float>(text); }
std::string encode_f64(std::span<const double> values) { return encode_array(values); }
std::vector<double> decode_f64(std::string_view text) { return decode_array<double>(text); }

double round_sig6(double value) {
    if (!std::isfinite(value) || value == 0.0) {
        return value == 0.0 ? 0.0 : value;
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", value);
    return std::strtod(buf, nullptr);
}

std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (const char ch : text) {
        hash ^= static_cast<std::uint8_t>(ch);
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

} // namespace cnnaudit

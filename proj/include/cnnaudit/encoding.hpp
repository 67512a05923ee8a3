#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cnnaudit {

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Little-endian float32 / float64 arrays packed as base64.
std::string encode_f32(std::span<const float> values);
std::vector<float> decode_f32(std::string_view text);
std::string encode_f64(std::span<const double> values);
std::vector<double> decode_f64(std::string_view text);

/// Rounds to 6 significant digits (the artifact's float precision).
double round_sig6(double value);

/// 64-bit FNV-1a; used to derive per-item seeds from string ids.
std::uint64_t fnv1a(std::string_view text);

} // namespace cnnaudit

#include "cnnaudit/encoding.hpp"
#include "cnnaudit/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

using namespace cnnaudit;

namespace {
std::vector<std::uint8_t> bytes(std::string_view s) {
    return {s.begin(), s.end()};
}
} // namespace

TEST_CASE("base64 matches the standard test vectors") {
    const std::pair<const char*, const char*> vectors[] = {
        {"", ""}, {"f", "Zg=="}, {"fo", "Zm8="}, {"foo", "Zm9v"},
        {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="}, {"foobar", "Zm9vYmFy"},
    };
    for (const auto& [plain, encoded] : vectors) {
        CHECK(base64_encode(bytes(plain)) == encoded);
        CHECK(base64_decode(encoded) == bytes(plain));
    }
}

TEST_CASE("base64 rejects malformed payloads") {
    CHECK_THROWS_AS(base64_decode("abc"), ParseError);
    CHECK_THROWS_AS(base64_decode("a$c="), ParseError);
}

TEST_CASE("packed float arrays round-trip exactly") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 100.0);
    std::vector<double> d(257);
    std::vector<float> f(129);
    for (auto& v : d) {
        v = n(rng);
    }
    for (auto& v : f) {
        v = static_cast<float>(n(rng));
    }
    d.push_back(std::numeric_limits<double>::denorm_min());
    CHECK(decode_f64(encode_f64(d)) == d);
    CHECK(decode_f32(encode_f32(f)) == f);
    CHECK(decode_f32(encode_f32(std::vector<float>{})).empty());
    CHECK_THROWS_AS(decode_f64(encode_f32(std::vector<float>{1.0f})), ParseError);
}

TEST_CASE("float32 packing is little-endian") {
    const float one = 1.0f; // 0x3f800000
    CHECK(encode_f32(std::span<const float>(&one, 1)) == base64_encode(std::vector<std::uint8_t>{0x00, 0x00, 0x80, 0x3f}));
}

TEST_CASE("round_sig6 keeps six significant digits") {
    CHECK(round_sig6(0.123456789) == 0.123457);
    CHECK(round_sig6(123456789.0) == 123457000.0);
    CHECK(round_sig6(-2.5e-9) == -2.5e-9);
    CHECK(round_sig6(0.0) == 0.0);
    CHECK(round_sig6(round_sig6(1.0 / 3.0)) == round_sig6(1.0 / 3.0));
}

TEST_CASE("fnv1a matches the published 64-bit offsets") {
    CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
}

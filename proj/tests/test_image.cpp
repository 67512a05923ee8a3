#include "cnnaudit/errors.hpp"
#include "cnnaudit/image.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace cnnaudit;
using testsupport::TempDir;

TEST_CASE("bilinear resize with half-pixel centres") {
    Tensor3 src(1, 2, 2);
    src.values = {0, 1, 2, 3};
    const Tensor3 up = resize_bilinear(src, 4, 4);
    // Source coordinates per output index: 0, 0.25, 0.75, 1 after edge clamping.
    const double s[4] = {0.0, 0.25, 0.75, 1.0};
    for (std::size_t y = 0; y < 4; ++y) {
        for (std::size_t x = 0; x < 4; ++x) {
            CHECK(up.at(0, y, x) == doctest::Approx(2.0 * s[y] + s[x]));
        }
    }
    CHECK(resize_bilinear(src, 2, 2) == src);

    Tensor3 wide(2, 1, 4);
    wide.values = {0, 2, 4, 6, 1, 1, 1, 1};
    const Tensor3 down = resize_bilinear(wide, 1, 2);
    CHECK(down.values[0] == doctest::Approx(1.0));
    CHECK(down.values[1] == doctest::Approx(5.0));
    CHECK(down.values[2] == doctest::Approx(1.0));
    CHECK_THROWS_AS(resize_bilinear(Tensor3{}, 2, 2), RejectedInputError);
}

TEST_CASE("crop copies the box and rejects boxes outside the image") {
    Image img(1, 3, 4);
    for (std::size_t i = 0; i < img.values.size(); ++i) {
        img.values[i] = static_cast<double>(i);
    }
    const Image c = crop(img, 1, 2, 2, 2);
    CHECK(c.values == std::vector<double>{6, 7, 10, 11});
    CHECK_THROWS_AS(crop(img, 2, 0, 2, 2), RejectedInputError);
    CHECK_THROWS_AS(crop(img, 0, 3, 1, 2), RejectedInputError);
}

TEST_CASE("PNG round trip keeps 8-bit precision") {
    TempDir dir("png");
    std::mt19937_64 rng(5);
    for (std::size_t channels : {1u, 3u}) {
        const Image img = testsupport::random_image(channels, 7, 5, rng);
        const auto path = dir / ("img" + std::to_string(channels) + ".png");
        write_png(path, img);
        const Image back = read_png(path);
        REQUIRE(back.channels == channels);
        REQUIRE(back.height == 7);
        REQUIRE(back.width == 5);
        for (std::size_t i = 0; i < img.values.size(); ++i) {
            CHECK(std::abs(back.values[i] - img.values[i]) <= 0.5 / 255.0 + 1e-12);
        }
    }
    CHECK_THROWS_AS(read_png(dir / "missing.png"), ParseError);
    CHECK_THROWS_AS(write_png(dir / "two.png", Image(2, 2, 2)), RejectedInputError);
}

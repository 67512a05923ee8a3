#include "cnnaudit/errors.hpp"
#include "cnnaudit/saliency.hpp"

#include "support.hpp"

#include <doctest.h>

using namespace cnnaudit;

namespace {

Tensor3 grid(std::size_t h, std::size_t w, std::vector<double> v) {
    Tensor3 t(1, h, w);
    t.values = std::move(v);
    return t;
}

} // namespace

TEST_CASE("grad_cam_map: hand-computed single channel") {
    const Tensor3 a = grid(2, 2, {0, 2, 4, 0});
    const Tensor3 cam = grad_cam_map(a, grid(2, 2, {1, 1, 1, 1}));
    CHECK(cam.values == std::vector<double>{0.0, 0.5, 1.0, 0.0});
    const Tensor3 dead = grad_cam_map(a, grid(2, 2, {-1, -1, -1, -1}));
    CHECK(dead.values == std::vector<double>(4, 0.0));
}

TEST_CASE("grad_cam_map: scale covariance and range") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor3 a(5, 3, 4), d(5, 3, 4);
        for (auto& v : a.values) v = std::abs(g(rng));
        for (auto& v : d.values) v = g(rng);
        const Tensor3 cam = grad_cam_map(a, d);
        for (const double v : cam.values) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        Tensor3 a2 = a, d2 = d;
        for (auto& v : a2.values) v *= 3.7;
        for (auto& v : d2.values) v *= 3.7;
        CHECK(testsupport::max_abs_difference(grad_cam_map(a2, d2), cam) < 1e-12);
    }
}

TEST_CASE("grad_cam agrees with a finite-difference recomputation") {
    std::mt19937_64 rng(12);
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        const auto model = testsupport::tiny_classifier(seed, 3);
        const Image img = testsupport::random_image(3, 8, 8, rng);
        for (const std::string layer : {"conv_a", "conv_b"}) {
            for (std::size_t k = 0; k < 3; ++k) {
                const SaliencyMap m = grad_cam(model, img, k, layer, "x");
                CHECK(m.image_id == "x");
                CHECK(m.layer_id == layer);
                CHECK_FALSE(m.upsampled);
                const Tensor3 oracle = testsupport::fd_grad_cam(model, img, k, layer);
                REQUIRE(m.heatmap.same_shape(oracle));
                CHECK(testsupport::max_abs_difference(m.heatmap, oracle) < 1e-2);
            }
        }
        const SaliencyMap m = grad_cam(model, img, 0, "conv_b");
        CHECK(grad_cam(model, img, 0, "conv_b").heatmap == m.heatmap);
    }
}

TEST_CASE("grad_cam reports non-differentiable backends") {
    ConvNetClassifier frozen(testsupport::tiny_net(3), {"a", "b"}, testsupport::plain_preprocessing(3, 8, 8), {}, {},
                             false);
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(grad_cam(frozen, testsupport::random_image(3, 8, 8, rng), 0, "conv_b"), CapabilityError);
}

TEST_CASE("upsampling keeps the map in range and reaches input size") {
    SaliencyMap m;
    m.heatmap = grid(2, 2, {0, 0.5, 1, 0});
    const SaliencyMap up = upsample_to_input(m, testsupport::plain_preprocessing(3, 8, 8));
    CHECK(up.upsampled);
    CHECK(up.heatmap.height == 8);
    CHECK(up.heatmap.width == 8);
    for (const double v : up.heatmap.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(up.heatmap.at(0, 7, 0) == doctest::Approx(1.0));
    CHECK(up.heatmap.at(0, 0, 0) == doctest::Approx(0.0));
}

TEST_CASE("viridis endpoints and overlay blending") {
    const auto lo = viridis(0.0), hi = viridis(1.0);
    CHECK(lo[0] == doctest::Approx(0.267).epsilon(0.01));
    CHECK(lo[2] == doctest::Approx(0.329).epsilon(0.01));
    CHECK(hi[0] == doctest::Approx(0.993).epsilon(0.01));
    CHECK(hi[1] == doctest::Approx(0.906).epsilon(0.01));
    CHECK(viridis(-3.0) == lo);
    CHECK(viridis(7.0) == hi);

    const Image base(3, 2, 2, 0.2);
    const Image out = render_overlay(base, grid(2, 2, {0, 1, 1, 0}));
    CHECK(out.channels == 3);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(out.at(c, 0, 0) == doctest::Approx(0.5 * 0.2 + 0.5 * lo[c]));
        CHECK(out.at(c, 0, 1) == doctest::Approx(0.5 * 0.2 + 0.5 * hi[c]));
    }
}

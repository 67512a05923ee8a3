#include "cnnaudit/errors.hpp"
#include "cnnaudit/model_backend.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace cnnaudit;
using testsupport::plain_preprocessing;

namespace {

ConvStage stage(const std::string& id, std::size_t in, std::size_t out, std::size_t k, bool relu) {
    ConvStage s;
    s.id = id;
    s.in_channels = in;
    s.out_channels = out;
    s.kernel = k;
    s.relu = relu;
    s.weight.assign(out * in * k * k, 0.0);
    s.bias.assign(out, 0.0);
    return s;
}

LinearHead head(Pooling pooling, std::size_t inputs, std::size_t outputs) {
    LinearHead h;
    h.pooling = pooling;
    h.inputs = inputs;
    h.outputs = outputs;
    h.weight.assign(inputs * outputs, 0.0);
    h.bias.assign(outputs, 0.0);
    return h;
}

/// Two stacked 1x1 identity layers on a 1-channel grid.
ConvNetClassifier identity_classifier(std::size_t h, std::size_t w) {
    ConvNet net;
    for (const char* id : {"layer1", "layer2"}) {
        auto s = stage(id, 1, 1, 1, false);
        s.weight[0] = 1.0;
        net.stages.push_back(s);
    }
    auto hd = head(Pooling::GlobalAverage, 1, 2);
    hd.weight[0] = 1.0; // class 0 score = mean of the layer; class 1 ignores it
    net.head = hd;
    return ConvNetClassifier(net, {"mean", "constant"}, plain_preprocessing(1, h, w));
}

} // namespace

TEST_CASE("constant-zero model predicts the lowest index") {
    ConvNet net;
    net.stages.push_back(stage("conv", 3, 2, 3, true));
    net.head = head(Pooling::GlobalAverage, 2, 2);
    const ConvNetClassifier model(net, {"a", "b"}, plain_preprocessing(3, 5, 5));
    std::mt19937_64 rng(1);
    const auto p = model.predict(testsupport::random_image(3, 5, 5, rng));
    CHECK(p.scores == std::vector<double>{0.0, 0.0});
    CHECK(p.label == 0);
}

TEST_CASE("linear toy model scores class 1 as the pixel sum") {
    ConvNet net;
    auto s = stage("id", 1, 1, 1, false);
    s.weight[0] = 1.0;
    net.stages.push_back(s);
    auto hd = head(Pooling::Flatten, 16, 2);
    std::fill(hd.weight.begin() + 16, hd.weight.end(), 1.0);
    net.head = hd;
    const ConvNetClassifier model(net, {"zero", "sum"}, plain_preprocessing(1, 4, 4));
    const auto p = model.predict(Image(1, 4, 4, 1.0));
    CHECK(p.scores[0] == 0.0);
    CHECK(p.scores[1] == doctest::Approx(16.0));
    CHECK(p.label == 1);
}

TEST_CASE("score vector length equals the class count") {
    for (std::size_t classes : {2u, 3u, 7u}) {
        const auto model = testsupport::tiny_classifier(classes, classes);
        std::mt19937_64 rng(classes);
        CHECK(model.predict(testsupport::random_image(3, 8, 8, rng)).scores.size() == classes);
        CHECK(model.info().class_names.size() == classes);
    }
}

TEST_CASE("argmax breaks ties toward the lowest index") {
    CHECK(argmax(std::vector<double>{1, 3, 3, 2}) == 1);
    CHECK(argmax(std::vector<double>{0, 0}) == 0);
}

TEST_CASE("capture_activations: identity layer, determinism and request order") {
    const auto model = identity_classifier(2, 2);
    Image img(1, 2, 2);
    img.values = {1, 2, 3, 4};
    const std::vector<std::string> one = {"layer1"};
    const auto a = model.capture_activations(img, one);
    REQUIRE(a.size() == 1);
    CHECK(a[0].values.values == img.values);
    CHECK(model.capture_activations(img, one)[0].values == a[0].values);

    const std::vector<std::string> order = {"layer2", "layer1"};
    const auto both = model.capture_activations(img, order);
    CHECK(both[0].layer_id == "layer2");
    CHECK(both[1].layer_id == "layer1");
    const std::vector<std::string> bad = {"nope"};
    CHECK_THROWS_AS(model.capture_activations(img, bad), LookupError);
}

TEST_CASE("feature vectors average-pool the feature layer") {
    ConvNet net;
    auto s = stage("consts", 1, 3, 1, false);
    s.bias = {1.0, 2.0, 3.0};
    net.stages.push_back(s);
    net.head = head(Pooling::GlobalAverage, 3, 2);
    const ConvNetClassifier model(net, {"a", "b"}, plain_preprocessing(1, 4, 4));
    std::mt19937_64 rng(2);
    const Image img = testsupport::random_image(1, 4, 4, rng);
    CHECK(model.feature_vector(img) == std::vector<double>{1.0, 2.0, 3.0});
    CHECK(model.feature_vector(img) == model.feature_vector(Image(img)));
}

TEST_CASE("feature vector matches a hand-computed forward pass") {
    ConvNet net;
    auto s = stage("conv", 1, 2, 3, true);
    s.w(0, 0, 1, 1) = 2.0; // channel 0: relu(2x + 1)
    s.bias = {1.0, -0.5};
    s.w(1, 0, 0, 0) = 1.0; // channel 1: relu(x(y-1, x-1) - 0.5), zero padded
    net.stages.push_back(s);
    net.head = head(Pooling::GlobalAverage, 2, 2);
    const ConvNetClassifier model(net, {"a", "b"}, plain_preprocessing(1, 4, 4));
    Image img(1, 4, 4);
    for (std::size_t i = 0; i < 16; ++i) {
        img.values[i] = static_cast<double>(i) / 15.0;
    }
    double c0 = 0.0, c1 = 0.0;
    for (std::size_t y = 0; y < 4; ++y) {
        for (std::size_t x = 0; x < 4; ++x) {
            c0 += std::max(0.0, 2.0 * img.at(0, y, x) + 1.0);
            const double shifted = (y > 0 && x > 0) ? img.at(0, y - 1, x - 1) : 0.0;
            c1 += std::max(0.0, shifted - 0.5);
        }
    }
    const auto f = model.feature_vector(img);
    CHECK(f[0] == doctest::Approx(c0 / 16.0));
    CHECK(f[1] == doctest::Approx(c1 / 16.0));
}

TEST_CASE("class gradient of a layer mean is uniform") {
    const auto model = identity_classifier(3, 5);
    std::mt19937_64 rng(3);
    const Image img = testsupport::random_image(1, 3, 5, rng);
    const Tensor3 g = model.class_gradient(img, 0, "layer1");
    for (double v : g.values) {
        CHECK(v == doctest::Approx(1.0 / 15.0));
    }
    const Tensor3 zero = model.class_gradient(img, 1, "layer2");
    for (double v : zero.values) {
        CHECK(v == 0.0);
    }
    CHECK_THROWS_AS(model.class_gradient(img, 2, "layer1"), LookupError);
}

TEST_CASE("class gradient matches finite differences through the layer") {
    const auto model = testsupport::tiny_classifier(5, 3);
    std::mt19937_64 rng(8);
    for (const std::string layer : {"conv_a", "conv_b"}) {
        const Image img = testsupport::random_image(3, 8, 8, rng);
        const std::size_t cls = rng() % 3;
        const Tensor3 g = model.class_gradient(img, cls, layer);
        const std::vector<std::string> ids = {layer};
        const Tensor3 act = model.capture_activations(img, ids)[0].values;
        const double h = 1e-6;
        for (int k = 0; k < 20; ++k) {
            const std::size_t i = rng() % act.values.size();
            Tensor3 plus = act, minus = act;
            plus.values[i] += h;
            minus.values[i] -= h;
            const double fd =
                (model.scores_from_layer(layer, plus)[cls] - model.scores_from_layer(layer, minus)[cls]) / (2 * h);
            const double err = std::abs(fd - g.values[i]) / std::max({std::abs(fd), std::abs(g.values[i]), 1e-6});
            CHECK(err < 1e-3);
        }
    }
}

TEST_CASE("non-differentiable backends refuse gradients") {
    const ConvNetClassifier model(testsupport::tiny_net(1), {"a", "b"}, plain_preprocessing(3, 8, 8), "", "", false);
    CHECK_THROWS_AS(model.class_gradient(Image(3, 8, 8), 0, "conv_b"), CapabilityError);
    CHECK_FALSE(model.info().differentiable);
}

TEST_CASE("inputs are resized, grey images replicated, wrong channel counts rejected") {
    const auto model = testsupport::tiny_classifier(6);
    std::mt19937_64 rng(4);
    const Image big = testsupport::random_image(3, 16, 12, rng);
    CHECK(model.predict(big).scores.size() == 2);
    Image grey = testsupport::random_image(1, 8, 8, rng);
    Image rgb(3, 8, 8);
    for (std::size_t c = 0; c < 3; ++c) {
        std::copy(grey.values.begin(), grey.values.end(), rgb.channel(c).begin());
    }
    CHECK(model.predict(grey).scores == model.predict(rgb).scores);
    CHECK_THROWS_AS(model.predict(Image(2, 8, 8)), RejectedInputError);
}

TEST_CASE("layer manifest and checkpoint round trip") {
    testsupport::TempDir dir("ckpt");
    const auto model = testsupport::tiny_classifier(12, 3);
    const auto& info = model.info();
    REQUIRE(info.layers.size() == 2);
    CHECK(info.layers[0].id == "conv_a");
    CHECK(info.layers[0].height == 4); // pooled
    CHECK(info.layers[1].channels == 5);
    CHECK(info.feature_layer == "conv_b");
    CHECK(info.saliency_layer == "conv_b");
    CHECK(ClassifierInfo::from_json(info.to_json()) == info);

    model.save(dir / "model.json");
    const auto loaded = load_classifier(dir / "model.json");
    CHECK(loaded->info() == info);
    CHECK(loaded->network() == model.network());

    auto j = model.checkpoint_json();
    j["format"] = "something.else";
    CHECK_THROWS_AS(classifier_from_json(j), ParseError);
    j = model.checkpoint_json();
    j["version"] = 99;
    CHECK_THROWS_AS(classifier_from_json(j), VersionError);
    CHECK_THROWS_AS(ConvNetClassifier(testsupport::tiny_net(1), {"only"}, plain_preprocessing(3, 8, 8)), ConfigError);
}

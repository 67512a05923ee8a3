#include "cnnaudit/convnet.hpp"
#include "cnnaudit/errors.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace cnnaudit;

namespace {

ConvNet shift_sum_net(bool pool, Pooling pooling) {
    ConvNet net;
    ConvStage s;
    s.id = "only";
    s.in_channels = 1;
    s.out_channels = 1;
    s.kernel = 3;
    s.relu = true;
    s.max_pool = pool;
    s.weight.assign(9, 0.0);
    s.w(0, 0, 1, 1) = 1.0; // out(y,x) = in(y,x) + in(y,x+1)
    s.w(0, 0, 1, 2) = 1.0;
    s.bias = {-4.0};
    net.stages.push_back(s);
    LinearHead h;
    h.pooling = pooling;
    h.inputs = pooling == Pooling::Flatten ? (pool ? 1 : 9) : 1;
    h.outputs = 2;
    h.weight.assign(h.inputs * 2, 0.0);
    h.weight[0] = 2.0;
    h.weight[h.inputs] = -1.0;
    h.bias = {0.5, 0.0};
    net.head = h;
    return net;
}

Tensor3 grid_1_to_9() {
    Tensor3 t(1, 3, 3);
    t.values = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    return t;
}

double weighted_scores(const ConvNet& net, const Tensor3& input, const std::vector<double>& r) {
    const auto scores = net.forward(input).scores;
    double s = 0.0;
    for (std::size_t k = 0; k < r.size(); ++k) {
        s += r[k] * scores[k];
    }
    return s;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

} // namespace

TEST_CASE("forward pass matches a hand-computed convolution, ReLU and pooling") {
    // conv + bias: [[-1,1,-1],[5,7,2],[11,13,5]]; ReLU zeroes the negatives.
    const ConvNet plain = shift_sum_net(false, Pooling::GlobalAverage);
    const auto t = plain.forward(grid_1_to_9());
    CHECK(t.stages[0].pre_activation.values == std::vector<double>{-1, 1, -1, 5, 7, 2, 11, 13, 5});
    CHECK(t.stages[0].output.values == std::vector<double>{0, 1, 0, 5, 7, 2, 11, 13, 5});
    CHECK(t.pooled[0] == doctest::Approx(44.0 / 9.0));
    CHECK(t.scores[0] == doctest::Approx(2.0 * 44.0 / 9.0 + 0.5));
    CHECK(t.scores[1] == doctest::Approx(-44.0 / 9.0));

    // 2x2 max pool on a 3x3 grid keeps the top-left window only.
    const ConvNet pooled = shift_sum_net(true, Pooling::Flatten);
    const auto p = pooled.forward(grid_1_to_9());
    CHECK(p.last_output().height == 1);
    CHECK(p.last_output().values == std::vector<double>{7});
    CHECK(p.scores == std::vector<double>{14.5, -7.0});
}

TEST_CASE("forward from an intermediate stage reuses the later stages") {
    const ConvNet net = testsupport::tiny_net(4);
    std::mt19937_64 rng(1);
    const Image img = testsupport::random_image(3, 8, 8, rng);
    const auto full = net.forward(img);
    const auto tail = net.forward(full.output_of(0), 1);
    CHECK(tail.scores == full.scores);
    const auto head_only = net.forward(full.last_output(), net.stages.size());
    CHECK(head_only.scores == full.scores);
}

TEST_CASE("backprop matches central finite differences") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        for (Pooling pooling : {Pooling::GlobalAverage, Pooling::Flatten}) {
            ConvNet net = testsupport::tiny_net(seed, 2, 6, 6, 3, pooling);
            std::mt19937_64 rng(seed * 7);
            const Image input = testsupport::random_image(2, 6, 6, rng);
            std::normal_distribution<double> n(0.0, 1.0);
            const std::vector<double> r = {n(rng), n(rng), n(rng)};

            const auto trace = net.forward(input);
            ParameterGradients g = net.zero_gradients();
            const Tensor3 d_last = net.backward_head(trace, r, &g);
            const Tensor3 d_input = net.backward_stages(trace, d_last, 0, &g);

            const double h = 1e-6;
            for (int k = 0; k < 20; ++k) {
                const std::size_t s = rng() % net.stages.size();
                const std::size_t i = rng() % net.stages[s].weight.size();
                ConvNet plus = net, minus = net;
                plus.stages[s].weight[i] += h;
                minus.stages[s].weight[i] -= h;
                const double fd = (weighted_scores(plus, input, r) - weighted_scores(minus, input, r)) / (2 * h);
                CHECK(rel_err(g.weight[s][i], fd) < 1e-3);
            }
            for (std::size_t s = 0; s < net.stages.size(); ++s) {
                for (std::size_t i = 0; i < net.stages[s].bias.size(); ++i) {
                    ConvNet plus = net, minus = net;
                    plus.stages[s].bias[i] += h;
                    minus.stages[s].bias[i] -= h;
                    const double fd = (weighted_scores(plus, input, r) - weighted_scores(minus, input, r)) / (2 * h);
                    CHECK(rel_err(g.bias[s][i], fd) < 1e-3);
                }
            }
            for (std::size_t i = 0; i < net.head->weight.size(); i += 3) {
                ConvNet plus = net, minus = net;
                plus.head->weight[i] += h;
                minus.head->weight[i] -= h;
                const double fd = (weighted_scores(plus, input, r) - weighted_scores(minus, input, r)) / (2 * h);
                CHECK(rel_err(g.head_weight[i], fd) < 1e-3);
            }
            for (int k = 0; k < 20; ++k) {
                const std::size_t i = rng() % input.values.size();
                Tensor3 plus = input, minus = input;
                plus.values[i] += h;
                minus.values[i] -= h;
                const double fd = (weighted_scores(net, plus, r) - weighted_scores(net, minus, r)) / (2 * h);
                CHECK(rel_err(d_input.values[i], fd) < 1e-3);
            }
        }
    }
}

TEST_CASE("SGD step moves against the gradient") {
    ConvNet net = testsupport::tiny_net(9);
    const ConvNet before = net;
    ParameterGradients g = net.zero_gradients();
    g.weight[0][0] = 2.0;
    g.head_bias[1] = -1.0;
    net.apply_sgd(g, 0.5);
    CHECK(net.stages[0].weight[0] == doctest::Approx(before.stages[0].weight[0] - 1.0));
    CHECK(net.head->bias[1] == doctest::Approx(before.head->bias[1] + 0.5));
    CHECK(net.stages[1].weight == before.stages[1].weight);
}

TEST_CASE("network description round-trips through JSON") {
    const ConvNet net = testsupport::tiny_net(21, 3, 8, 8, 4, Pooling::Flatten);
    CHECK(ConvNet::from_json(net.to_json()) == net);
    auto j = net.to_json();
    j["stages"][0]["kernel"] = 2;
    CHECK_THROWS_AS(ConvNet::from_json(j), ParseError);
    CHECK_THROWS_AS(ConvNet::from_json(nlohmann::json::object()), ParseError);
}

TEST_CASE("shape mismatches are rejected") {
    const ConvNet net = testsupport::tiny_net(2);
    CHECK_THROWS_AS(net.forward(Tensor3(2, 8, 8)), RejectedInputError);
}

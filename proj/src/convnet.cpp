#include "cnnaudit/convnet.hpp"

#include "cnnaudit/encoding.hpp"
#include "cnnaudit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace cnnaudit {

namespace {

void conv_forward(const ConvStage& s, const Tensor3& in, Tensor3& out) {
    const std::size_t h = in.height, w = in.width, k = s.kernel;
    const auto pad = static_cast<long>(k / 2);
    out = Tensor3(s.out_channels, h, w);
    for (std::size_t o = 0; o < s.out_channels; ++o) {
        auto plane = out.channel(o);
        std::fill(plane.begin(), plane.end(), s.bias[o]);
        for (std::size_t i = 0; i < s.in_channels; ++i) {
            const auto src = in.channel(i);
            for (std::size_t ky = 0; ky < k; ++ky) {
                const long dy = static_cast<long>(ky) - pad;
                const std::size_t y_lo = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
                const std::size_t y_hi = dy > 0 ? h - static_cast<std::size_t>(dy) : h;
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const long dx = static_cast<long>(kx) - pad;
                    const std::size_t x_lo = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
                    const std::size_t x_hi = dx > 0 ? w - static_cast<std::size_t>(dx) : w;
                    const double wt = s.weight[((o * s.in_channels + i) * k + ky) * k + kx];
                    if (wt == 0.0) {
                        continue;
                    }
                    for (std::size_t y = y_lo; y < y_hi; ++y) {
                        const double* row = src.data() + static_cast<long>(y) * static_cast<long>(w) + dy * static_cast<long>(w);
                        double* dst = plane.data() + y * w;
                        for (std::size_t x = x_lo; x < x_hi; ++x) {
                            dst[x] += wt * row[static_cast<long>(x) + dx];
                        }
                    }
                }
            }
        }
    }
}

// Accumulates weight/bias grads and returns the input gradient.
Tensor3 conv_backward(const ConvStage& s, const Tensor3& in, const Tensor3& d_out, std::vector<double>* d_weight,
                      std::vector<double>* d_bias) {
    const std::size_t h = in.height, w = in.width, k = s.kernel;
    const auto pad = static_cast<long>(k / 2);
    Tensor3 d_in(in.channels, h, w);
    for (std::size_t o = 0; o < s.out_channels; ++o) {
        const auto g = d_out.channel(o);
        if (d_bias != nullptr) {
            double sum = 0.0;
            for (const double v : g) {
                sum += v;
            }
            (*d_bias)[o] += sum;
        }
        for (std::size_t i = 0; i < s.in_channels; ++i) {
            const auto src = in.channel(i);
            auto dsrc = d_in.channel(i);
            for (std::size_t ky = 0; ky < k; ++ky) {
                const long dy = static_cast<long>(ky) - pad;
                const std::size_t y_lo = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
                const std::size_t y_hi = dy > 0 ? h - static_cast<std::size_t>(dy) : h;
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const long dx = static_cast<long>(kx) - pad;
                    const std::size_t x_lo = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
                    const std::size_t x_hi = dx > 0 ? w - static_cast<std::size_t>(dx) : w;
                    const std::size_t widx = ((o * s.in_channels + i) * k + ky) * k + kx;
                    const double wt = s.weight[widx];
                    double acc = 0.0;
                    for (std::size_t y = y_lo; y < y_hi; ++y) {
                        const long offset = (static_cast<long>(y) + dy) * static_cast<long>(w);
                        const double* row = src.data() + offset;
                        double* drow = dsrc.data() + offset;
                        const double* grow = g.data() + y * w;
                        for (std::size_t x = x_lo; x < x_hi; ++x) {
                            const long sx = static_cast<long>(x) + dx;
                            acc += grow[x] * row[sx];
                            drow[sx] += wt * grow[x];
                        }
                    }
                    if (d_weight != nullptr) {
                        (*d_weight)[widx] += acc;
                    }
                }
            }
        }
    }
    return d_in;
}

void max_pool_forward(const Tensor3& in, Tensor3& out, std::vector<std::size_t>& argmax) {
    const std::size_t oh = in.height / 2, ow = in.width / 2;
    out = Tensor3(in.channels, oh, ow);
    argmax.assign(out.values.size(), 0);
    for (std::size_t c = 0; c < in.channels; ++c) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                std::size_t best = (c * in.height + 2 * y) * in.width + 2 * x;
                for (std::size_t dy = 0; dy < 2; ++dy) {
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t idx = (c * in.height + 2 * y + dy) * in.width + 2 * x + dx;
                        if (in.values[idx] > in.values[best]) {
                            best = idx;
                        }
                    }
                }
                const std::size_t o = (c * oh + y) * ow + x;
                out.values[o] = in.values[best];
                argmax[o] = best;
            }
        }
    }
}

std::vector<double> decode_sized(const nlohmann::json& j, std::size_t expected, const char* what) {
    auto values = decode_f64(j.get<std::string>());
    if (values.size() != expected) {
        throw ParseError(std::string("checkpoint tensor '") + what + "' has the wrong size");
    }
    return values;
}

} // namespace

void ParameterGradients::add(const ParameterGradients& other) {
    for (std::size_t s = 0; s < weight.size(); ++s) {
        for (std::size_t i = 0; i < weight[s].size(); ++i) {
            weight[s][i] += other.weight[s][i];
        }
        for (std::size_t i = 0; i < bias[s].size(); ++i) {
            bias[s][i] += other.bias[s][i];
        }
    }
    for (std::size_t i = 0; i < head_weight.size(); ++i) {
        head_weight[i] += other.head_weight[i];
    }
    for (std::size_t i = 0; i < head_bias.size(); ++i) {
        head_bias[i] += other.head_bias[i];
    }
}

void ParameterGradients::scale(double factor) {
    for (auto& v : weight) {
        for (auto& x : v) x *= factor;
    }
    for (auto& v : bias) {
        for (auto& x : v) x *= factor;
    }
    for (auto& x : head_weight) x *= factor;
    for (auto& x : head_bias) x *= factor;
}

std::vector<double> global_average_pool(const Tensor3& t) {
    std::vector<double> out(t.channels, 0.0);
    const double n = static_cast<double>(t.plane_size());
    for (std::size_t c = 0; c < t.channels; ++c) {
        double sum = 0.0;
        for (const double v : t.channel(c)) {
            sum += v;
        }
        out[c] = sum / n;
    }
    return out;
}

Tensor3 global_average_pool_backward(std::span<const double> d_pooled, std::size_t channels, std::size_t height,
                                     std::size_t width) {
    Tensor3 d(channels, height, width);
    const double n = static_cast<double>(height * width);
    for (std::size_t c = 0; c < channels; ++c) {
        auto plane = d.channel(c);
        std::fill(plane.begin(), plane.end(), d_pooled[c] / n);
    }
    return d;
}

std::vector<double> head_pool(Pooling pooling, const Tensor3& t) {
    return pooling == Pooling::GlobalAverage ? global_average_pool(t) : t.values;
}

ConvNet ConvNet::random(std::size_t input_channels, std::size_t input_height, std::size_t input_width,
                        const std::vector<StageShape>& shapes, std::optional<std::size_t> classes, Pooling pooling,
                        std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ConvNet net;
    std::size_t channels = input_channels, h = input_height, w = input_width;
    for (const auto& shape : shapes) {
        ConvStage s;
        s.id = shape.id;
        s.in_channels = channels;
        s.out_channels = shape.out_channels;
        s.kernel = shape.kernel;
        s.relu = shape.relu;
        s.max_pool = shape.max_pool;
        const double fan_in = static_cast<double>(channels * shape.kernel * shape.kernel);
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        s.weight.resize(shape.out_channels * channels * shape.kernel * shape.kernel);
        for (auto& v : s.weight) {
            v = dist(rng);
        }
        s.bias.assign(shape.out_channels, 0.0);
        channels = shape.out_channels;
        if (shape.max_pool) {
            h /= 2;
            w /= 2;
        }
        net.stages.push_back(std::move(s));
    }
    if (classes) {
        LinearHead head;
        head.pooling = pooling;
        head.inputs = pooling == Pooling::GlobalAverage ? channels : channels * h * w;
        head.outputs = *classes;
        std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(head.inputs)));
        head.weight.resize(head.inputs * head.outputs);
        for (auto& v : head.weight) {
            v = dist(rng);
        }
        head.bias.assign(head.outputs, 0.0);
        net.head = std::move(head);
    }
    return net;
}

std::optional<std::size_t> ConvNet::stage_index(const std::string& id) const {
    for (std::size_t i = 0; i < stages.size(); ++i) {
        if (stages[i].id == id) {
            return i;
        }
    }
    return std::nullopt;
}

ForwardTrace ConvNet::forward(const Tensor3& input, std::size_t first_stage) const {
    ForwardTrace trace;
    trace.first_stage = first_stage;
    const Tensor3* current = &input;
    for (std::size_t s = first_stage; s < stages.size(); ++s) {
        const ConvStage& stage = stages[s];
        if (current->channels != stage.in_channels) {
            throw RejectedInputError("stage '" + stage.id + "' expects " + std::to_string(stage.in_channels) +
                                     " channels, got " + std::to_string(current->channels));
        }
        StageTrace st;
        st.input = *current;
        conv_forward(stage, st.input, st.pre_activation);
        st.activated = st.pre_activation;
        if (stage.relu) {
            for (auto& v : st.activated.values) {
                v = std::max(v, 0.0);
            }
        }
        if (stage.max_pool) {
            max_pool_forward(st.activated, st.output, st.pool_argmax);
        } else {
            st.output = st.activated;
        }
        trace.stages.push_back(std::move(st));
        current = &trace.stages.back().output;
    }
    if (head) {
        trace.pooled = head_pool(head->pooling, *current);
        if (trace.pooled.size() != head->inputs) {
            throw RejectedInputError("head expects " + std::to_string(head->inputs) + " features, got " +
                                     std::to_string(trace.pooled.size()));
        }
        trace.scores.assign(head->outputs, 0.0);
        for (std::size_t k = 0; k < head->outputs; ++k) {
            double acc = head->bias[k];
            for (std::size_t d = 0; d < head->inputs; ++d) {
                acc += head->weight[k * head->inputs + d] * trace.pooled[d];
            }
            trace.scores[k] = acc;
        }
    }
    return trace;
}

Tensor3 ConvNet::backward_head(const ForwardTrace& trace, std::span<const double> d_scores,
                               ParameterGradients* grads) const {
    if (!head) {
        throw CapabilityError("network has no classification head");
    }
    std::vector<double> d_pooled(head->inputs, 0.0);
    for (std::size_t k = 0; k < head->outputs; ++k) {
        const double g = d_scores[k];
        if (g == 0.0) {
            continue;
        }
        if (grads != nullptr) {
            grads->head_bias[k] += g;
        }
        for (std::size_t d = 0; d < head->inputs; ++d) {
            d_pooled[d] += g * head->weight[k * head->inputs + d];
            if (grads != nullptr) {
                grads->head_weight[k * head->inputs + d] += g * trace.pooled[d];
            }
        }
    }
    const Tensor3& last = trace.last_output();
    if (head->pooling == Pooling::GlobalAverage) {
        return global_average_pool_backward(d_pooled, last.channels, last.height, last.width);
    }
    Tensor3 d(last.channels, last.height, last.width);
    d.values = std::move(d_pooled);
    return d;
}

Tensor3 ConvNet::backward_stages(const ForwardTrace& trace, Tensor3 d_output, std::size_t down_to,
                                 ParameterGradients* grads) const {
    for (std::size_t s = stages.size(); s-- > std::max(down_to, trace.first_stage);) {
        const ConvStage& stage = stages[s];
        const StageTrace& st = trace.stages[s - trace.first_stage];
        Tensor3 d_act;
        if (stage.max_pool) {
            d_act = Tensor3(st.activated.channels, st.activated.height, st.activated.width);
            for (std::size_t o = 0; o < d_output.values.size(); ++o) {
                d_act.values[st.pool_argmax[o]] += d_output.values[o];
            }
        } else {
            d_act = std::move(d_output);
        }
        if (stage.relu) {
            for (std::size_t i = 0; i < d_act.values.size(); ++i) {
                if (st.pre_activation.values[i] <= 0.0) {
                    d_act.values[i] = 0.0;
                }
            }
        }
        d_output = conv_backward(stage, st.input, d_act, grads ? &grads->weight[s] : nullptr,
                                 grads ? &grads->bias[s] : nullptr);
    }
    return d_output;
}

ParameterGradients ConvNet::zero_gradients() const {
    ParameterGradients g;
    for (const auto& s : stages) {
        g.weight.emplace_back(s.weight.size(), 0.0);
        g.bias.emplace_back(s.bias.size(), 0.0);
    }
    if (head) {
        g.head_weight.assign(head->weight.size(), 0.0);
        g.head_bias.assign(head->bias.size(), 0.0);
    }
    return g;
}

void ConvNet::apply_sgd(const ParameterGradients& grads, double learning_rate) {
    for (std::size_t s = 0; s < stages.size(); ++s) {
        for (std::size_t i = 0; i < stages[s].weight.size(); ++i) {
            stages[s].weight[i] -= learning_rate * grads.weight[s][i];
        }
        for (std::size_t i = 0; i < stages[s].bias.size(); ++i) {
            stages[s].bias[i] -= learning_rate * grads.bias[s][i];
        }
    }
    if (head) {
        for (std::size_t i = 0; i < head->weight.size(); ++i) {
            head->weight[i] -= learning_rate * grads.head_weight[i];
        }
        for (std::size_t i = 0; i < head->bias.size(); ++i) {
            head->bias[i] -= learning_rate * grads.head_bias[i];
        }
    }
}

nlohmann::json ConvNet::to_json() const {
    nlohmann::json j;
    j["stages"] = nlohmann::json::array();
    for (const auto& s : stages) {
        j["stages"].push_back({{"id", s.id},
                               {"in_channels", s.in_channels},
                               {"out_channels", s.out_channels},
                               {"kernel", s.kernel},
                               {"relu", s.relu},
                               {"max_pool", s.max_pool},
                               {"weight", encode_f64(s.weight)},
                               {"bias", encode_f64(s.bias)}});
    }
    if (head) {
        j["head"] = {{"pooling", head->pooling == Pooling::GlobalAverage ? "global_average" : "flatten"},
                     {"inputs", head->inputs},
                     {"outputs", head->outputs},
                     {"weight", encode_f64(head->weight)},
                     {"bias", encode_f64(head->bias)}};
    } else {
        j["head"] = nullptr;
    }
    return j;
}

ConvNet ConvNet::from_json(const nlohmann::json& j) {
    ConvNet net;
    try {
        for (const auto& js : j.at("stages")) {
            ConvStage s;
            s.id = js.at("id").get<std::string>();
            s.in_channels = js.at("in_channels").get<std::size_t>();
            s.out_channels = js.at("out_channels").get<std::size_t>();
            s.kernel = js.at("kernel").get<std::size_t>();
            if (s.kernel % 2 == 0) {
                throw ParseError("stage '" + s.id + "' has an even kernel size");
            }
            s.relu = js.at("relu").get<bool>();
            s.max_pool = js.at("max_pool").get<bool>();
            s.weight = decode_sized(js.at("weight"), s.out_channels * s.in_channels * s.kernel * s.kernel, "weight");
            s.bias = decode_sized(js.at("bias"), s.out_channels, "bias");
            net.stages.push_back(std::move(s));
        }
        if (j.contains("head") && !j.at("head").is_null()) {
            const auto& jh = j.at("head");
            LinearHead h;
            const auto pooling = jh.at("pooling").get<std::string>();
            if (pooling == "global_average") {
                h.pooling = Pooling::GlobalAverage;
            } else if (pooling == "flatten") {
                h.pooling = Pooling::Flatten;
            } else {
                throw ParseError("unknown head pooling '" + pooling + "'");
            }
            h.inputs = jh.at("inputs").get<std::size_t>();
            h.outputs = jh.at("outputs").get<std::size_t>();
            h.weight = decode_sized(jh.at("weight"), h.inputs * h.outputs, "head.weight");
            h.bias = decode_sized(jh.at("bias"), h.outputs, "head.bias");
            net.head = std::move(h);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed network description: ") + e.what());
    }
    return net;
}

} // namespace cnnaudit

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "eseg/graph.hpp"

namespace eseg {

inline Tensor with_bumped(const Tensor& t, std::int64_t i, double delta) {
    if (t.dtype() == DType::F32) {
        auto d = t.data<float>();
        std::vector<float> v(d.begin(), d.end());
        v[static_cast<std::size_t>(i)] += static_cast<float>(delta);
        return Tensor::from_f32(t.shape(), std::move(v));
    }
    auto d = t.data<double>();
    std::vector<double> v(d.begin(), d.end());
    v[static_cast<std::size_t>(i)] += delta;
    return Tensor::from_f64(t.shape(), std::move(v));
}

struct GradCheckReport {
    bool pass = true;
    double max_err = 0.0;      // worst |analytic - numeric| / max(1, |a|, |n|)
    std::string worst = "";    // "param[i]" or "input[i]" of the worst element
    std::int64_t checked = 0;  // elements compared
};

// Central finite differences against the reverse-mode sweep on a scalar-loss
// graph. Buffers (running statistics) are not differentiated and are skipped.
inline GradCheckReport check_graph_gradients(const Graph& g, const ParamStore& store,
                                             const std::map<std::string, Tensor>& inputs,
                                             int loss_node, ExecMode mode, double tol = 1e-4,
                                             double h = 1e-5) {
    const Trace trace = forward_trace(g, store, inputs, mode);
    const Gradients analytic = backward(g, store, trace, loss_node);

    auto loss_with = [&](const ParamStore& s, const std::map<std::string, Tensor>& in) {
        const Trace t = forward_trace(g, s, in, mode);
        return t.values[static_cast<std::size_t>(loss_node)].scalar_value();
    };

    GradCheckReport report;
    auto compare = [&](double a, double num, const std::string& label) {
        const double err = std::abs(a - num) / std::max({1.0, std::abs(a), std::abs(num)});
        ++report.checked;
        if (err > report.max_err) {
            report.max_err = err;
            report.worst = label;
        }
        if (err > tol) report.pass = false;
    };

    for (const auto& [name, spec] : g.params) {
        const Tensor& value = store.get(name);
        auto ait = analytic.params.find(name);
        for (std::int64_t i = 0; i < value.elems(); ++i) {
            ParamStore plus = store, minus = store;
            plus.set(name, with_bumped(value, i, h));
            minus.set(name, with_bumped(value, i, -h));
            const double num = (loss_with(plus, inputs) - loss_with(minus, inputs)) / (2 * h);
            const double a = ait == analytic.params.end() ? 0.0 : ait->second.item(i);
            compare(a, num, name + "[" + std::to_string(i) + "]");
        }
    }
    for (const auto& [name, t] : inputs) {
        auto ait = analytic.inputs.find(name);
        for (std::int64_t i = 0; i < t.elems(); ++i) {
            auto plus = inputs, minus = inputs;
            plus[name] = with_bumped(t, i, h);
            minus[name] = with_bumped(t, i, -h);
            const double num = (loss_with(store, plus) - loss_with(store, minus)) / (2 * h);
            const double a = ait == analytic.inputs.end() ? 0.0 : ait->second.item(i);
            compare(a, num, name + "[" + std::to_string(i) + "]");
        }
    }
    return report;
}

// Random composite graph over the full op set, sized for finite differences.
// Returns the graph; the final node is a scalar reduce_sum loss. in_shape
// receives the input size the op sampling assumed; feed exactly that shape.
inline Graph random_graph(Rng& rng, Shape& in_shape, int max_ops = 20) {
    GraphBuilder b;
    const int channels = static_cast<int>(rng.uniform_int(1, 3));
    const int x0 = b.input("x", channels);
    std::vector<int> pool = {x0};
    // conservative spatial tracker so sampled windows always fit
    std::map<int, std::pair<int, int>> hw;
    hw[x0] = {static_cast<int>(rng.uniform_int(4, 6)), static_cast<int>(rng.uniform_int(4, 6))};
    in_shape = Shape{1, channels, hw[x0].first, hw[x0].second};
    const int ops = static_cast<int>(rng.uniform_int(3, max_ops - 1));
    for (int i = 0; i < ops; ++i) {
        const int src = pool[static_cast<std::size_t>(rng.uniform_int(
            0, static_cast<std::int64_t>(pool.size()) - 1))];
        const auto [h, w] = hw.at(src);
        const std::string name = "n" + std::to_string(i);
        const int kind = static_cast<int>(rng.uniform_int(0, 11));
        int out = -1;
        std::pair<int, int> out_hw = {h, w};
        switch (kind) {
            case 0: {
                const int k = rng.bernoulli(0.5) && h >= 3 && w >= 3 ? 3 : 1;
                const int oc = static_cast<int>(rng.uniform_int(1, 3));
                out = b.conv(name, src, oc, k, 1, k / 2);
                break;
            }
            case 1: {
                const int k = h >= 3 && w >= 3 ? 3 : 1;
                out = b.depthwise(name, src, k, 1, k / 2);
                break;
            }
            case 2: {
                if (h < 2 || w < 2) break;
                const PoolKind pk = rng.bernoulli(0.5) ? PoolKind::Avg : PoolKind::Max;
                out = b.pool(name, src, pk, 2, 2, 0);
                out_hw = {h / 2, w / 2};
                break;
            }
            case 3:
                out = b.global_avg_pool(name, src);
                out_hw = {1, 1};
                break;
            case 4: {
                if (h > 4 || w > 4) break;
                const ResizeMode m = rng.bernoulli(0.5) ? ResizeMode::Bilinear : ResizeMode::Nearest;
                out = b.upsample(name, src, 2, m);
                out_hw = {h * 2, w * 2};
                break;
            }
            case 5: out = b.batch_norm(name, src); break;
            case 6: {
                const ActKind a = static_cast<ActKind>(rng.uniform_int(0, 2));
                out = b.activation(name, src, a);
                break;
            }
            case 7: out = b.bias_add(name, src); break;
            case 8: {
                std::vector<int> same;
                for (int cand : pool)
                    if (hw.at(cand) == hw.at(src) && b.channels(cand) == b.channels(src))
                        same.push_back(cand);
                const int other = same[static_cast<std::size_t>(rng.uniform_int(
                    0, static_cast<std::int64_t>(same.size()) - 1))];
                out = b.add(name, {src, other});
                break;
            }
            case 9: {
                const int gate = b.global_avg_pool(name + "_gate", src);
                out = b.mul(name, src, gate);
                break;
            }
            case 10: {
                std::vector<int> same;
                for (int cand : pool)
                    if (hw.at(cand) == hw.at(src) && b.channels(cand) == b.channels(src))
                        same.push_back(cand);
                const int other = same[static_cast<std::size_t>(rng.uniform_int(
                    0, static_cast<std::int64_t>(same.size()) - 1))];
                const FuseMode fm = rng.bernoulli(0.5) ? FuseMode::FastNorm : FuseMode::Softmax;
                out = b.fuse(name, {src, other}, fm);
                break;
            }
            default: {
                std::vector<double> cs = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
                std::vector<int> same;
                for (int cand : pool)
                    if (hw.at(cand) == hw.at(src) && b.channels(cand) == b.channels(src))
                        same.push_back(cand);
                const int other = same[static_cast<std::size_t>(rng.uniform_int(
                    0, static_cast<std::int64_t>(same.size()) - 1))];
                out = b.fuse_fixed(name, {src, other}, cs);
                break;
            }
        }
        if (out < 0) continue;
        hw[out] = out_hw;
        pool.push_back(out);
    }
    const int loss = b.reduce_sum("loss", pool.back());
    b.mark_output("loss", loss);
    return b.finish();
}

// ---------------------------------------------------------------------------
// Standard finite-difference battery: one case per differentiable kernel,
// plus seeded random composite graphs. Shared by the test suite and the CLI.

struct KernelGradCase {
    std::string label;
    Graph graph;
    bool smooth = true;  // false: keep inputs away from kink points
};

namespace detail {

inline Graph single_op_graph(const std::function<int(GraphBuilder&, int)>& body,
                             int channels = 2) {
    GraphBuilder b;
    const int x = b.input("x", channels);
    const int y = body(b, x);
    b.mark_output("loss", b.reduce_sum("loss", y));
    return b.finish();
}

inline Tensor fd_input(Rng& rng, Shape s, bool smooth) {
    Tensor x = random_uniform<double>(s, rng, -1.0, 1.0);
    if (smooth) return x;
    auto d = x.data<double>();
    std::vector<double> v(d.begin(), d.end());
    for (auto& e : v)
        if (std::abs(e) < 0.05) e = e < 0.0 ? e - 0.1 : e + 0.1;
    return Tensor::from_f64(s, std::move(v));
}

}  // namespace detail

inline std::vector<KernelGradCase> kernel_gradient_cases() {
    auto mk = [](const char* label, std::function<int(GraphBuilder&, int)> body,
                 bool smooth = true) {
        return KernelGradCase{label, detail::single_op_graph(body), smooth};
    };
    return {
        mk("conv3x3", [](GraphBuilder& b, int x) { return b.conv("y", x, 3, 3, 1, 1); }),
        mk("conv1x1s2", [](GraphBuilder& b, int x) { return b.conv("y", x, 2, 1, 2, 0); }),
        mk("depthwise3x3", [](GraphBuilder& b, int x) { return b.depthwise("y", x, 3, 1, 1); }),
        mk("avgpool", [](GraphBuilder& b, int x) { return b.pool("y", x, PoolKind::Avg, 3, 2, 1); }),
        mk("maxpool", [](GraphBuilder& b, int x) { return b.pool("y", x, PoolKind::Max, 2, 2, 0); },
           false),
        mk("global_avg_pool", [](GraphBuilder& b, int x) { return b.global_avg_pool("y", x); }),
        mk("bilinear_upsample",
           [](GraphBuilder& b, int x) { return b.upsample("y", x, 2, ResizeMode::Bilinear); }),
        mk("nearest_upsample",
           [](GraphBuilder& b, int x) { return b.upsample("y", x, 2, ResizeMode::Nearest); }),
        mk("batch_norm", [](GraphBuilder& b, int x) { return b.batch_norm("y", x); }),
        mk("relu", [](GraphBuilder& b, int x) { return b.activation("y", x, ActKind::Relu); },
           false),
        mk("silu", [](GraphBuilder& b, int x) { return b.activation("y", x, ActKind::Silu); }),
        mk("sigmoid",
           [](GraphBuilder& b, int x) { return b.activation("y", x, ActKind::Sigmoid); }),
        mk("bias_add", [](GraphBuilder& b, int x) { return b.bias_add("y", x); }),
        mk("add", [](GraphBuilder& b, int x) { return b.add("y", {x, x}); }),
        mk("mul_gate",
           [](GraphBuilder& b, int x) {
               const int g = b.global_avg_pool("g", x);
               return b.mul("y", x, g);
           }),
        mk("fuse_softmax",
           [](GraphBuilder& b, int x) {
               const int t = b.activation("t", x, ActKind::Silu);
               return b.fuse("y", {x, t}, FuseMode::Softmax);
           }),
        mk("fuse_fastnorm",
           [](GraphBuilder& b, int x) {
               const int t = b.activation("t", x, ActKind::Sigmoid);
               return b.fuse("y", {x, t}, FuseMode::FastNorm);
           }),
        mk("fuse_fixed",
           [](GraphBuilder& b, int x) {
               const int t = b.activation("t", x, ActKind::Silu);
               return b.fuse_fixed("y", {x, t}, {0.3, 1.2});
           }),
    };
}

struct NamedGradReport {
    std::string label;
    GradCheckReport report;
};

// Each kernel case over `trials` seeded inputs, alternating train/infer
// execution. The per-label report keeps the worst error seen.
inline std::vector<NamedGradReport> run_kernel_gradchecks(std::uint64_t seed, int trials = 3,
                                                          double tol = 1e-4) {
    std::vector<NamedGradReport> out;
    for (const auto& c : kernel_gradient_cases()) {
        NamedGradReport named{c.label, {}};
        for (int trial = 0; trial < trials; ++trial) {
            Rng rng(seed + static_cast<std::uint64_t>(trial) * 7919);
            const ParamStore store =
                init_params(c.graph, seed ^ (static_cast<std::uint64_t>(trial) + 1), DType::F64);
            const Tensor x = detail::fd_input(rng, {1, 2, 4, 4}, c.smooth);
            const ExecMode mode = trial % 2 ? ExecMode::Train : ExecMode::Infer;
            const auto r = check_graph_gradients(c.graph, store, {{"x", x}},
                                                 c.graph.output_id("loss"), mode, tol);
            named.report.pass = named.report.pass && r.pass;
            named.report.checked += r.checked;
            if (r.max_err > named.report.max_err) {
                named.report.max_err = r.max_err;
                named.report.worst = r.worst;
            }
        }
        out.push_back(std::move(named));
    }
    return out;
}

inline std::vector<NamedGradReport> run_random_graph_gradchecks(std::uint64_t seed,
                                                                int trials = 25,
                                                                double tol = 1e-4) {
    std::vector<NamedGradReport> out;
    for (int trial = 0; trial < trials; ++trial) {
        Rng rng(seed + static_cast<std::uint64_t>(trial));
        Shape in_shape;
        const Graph g = random_graph(rng, in_shape);
        const ParamStore store =
            init_params(g, seed ^ (static_cast<std::uint64_t>(trial) + 101), DType::F64);
        Rng drng(seed + 5000 + static_cast<std::uint64_t>(trial));
        const Tensor x = random_uniform<double>(in_shape, drng, -0.8, 0.8);
        const ExecMode mode = trial % 2 ? ExecMode::Train : ExecMode::Infer;
        out.push_back({"graph-" + std::to_string(trial),
                       check_graph_gradients(g, store, {{"x", x}}, g.output_id("loss"), mode,
                                             tol)});
    }
    return out;
}

}  // namespace eseg

#pragma once

#include <array>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "eseg/common.hpp"
#include "eseg/kernels.hpp"
#include "eseg/tensor.hpp"

namespace eseg {

enum class OpKind {
    Input,
    Conv2d,
    DepthwiseConv2d,
    Pool2d,
    GlobalAvgPool,
    Resize,
    BatchNorm,
    Activation,
    BiasAdd,
    Add,
    Mul,
    FuseWeighted,
    ReduceSum,
};

inline const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "input";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::DepthwiseConv2d: return "depthwise_conv2d";
        case OpKind::Pool2d: return "pool2d";
        case OpKind::GlobalAvgPool: return "global_avg_pool";
        case OpKind::Resize: return "resize";
        case OpKind::BatchNorm: return "batch_norm";
        case OpKind::Activation: return "activation";
        case OpKind::BiasAdd: return "bias_add";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::FuseWeighted: return "fuse_weighted";
        default: return "reduce_sum";
    }
}

inline OpKind op_kind_from_name(const std::string& s) {
    static const std::map<std::string, OpKind> table = {
        {"input", OpKind::Input},
        {"conv2d", OpKind::Conv2d},
        {"depthwise_conv2d", OpKind::DepthwiseConv2d},
        {"pool2d", OpKind::Pool2d},
        {"global_avg_pool", OpKind::GlobalAvgPool},
        {"resize", OpKind::Resize},
        {"batch_norm", OpKind::BatchNorm},
        {"activation", OpKind::Activation},
        {"bias_add", OpKind::BiasAdd},
        {"add", OpKind::Add},
        {"mul", OpKind::Mul},
        {"fuse_weighted", OpKind::FuseWeighted},
        {"reduce_sum", OpKind::ReduceSum},
    };
    auto it = table.find(s);
    if (it == table.end()) fail("unknown op kind '", s, "'");
    return it->second;
}

struct NodeAttrs {
    int kernel = 1;
    int stride = 1;
    int padding = 0;
    int out_channels = 0;           // Conv2d
    int channels = 0;               // Input
    int scale = 1;                  // Resize: integer upsampling factor
    PoolKind pool = PoolKind::Avg;
    ActKind act = ActKind::Relu;
    ResizeMode resize = ResizeMode::Nearest;
    FuseMode fuse = FuseMode::FastNorm;
    double eps = 0.0;               // BatchNorm or FuseWeighted
    double momentum = 0.0;          // BatchNorm
    std::vector<double> coeffs;     // FuseWeighted in Fixed mode
};

struct Node {
    int id = -1;
    std::string name;
    OpKind kind = OpKind::Input;
    std::vector<int> inputs;
    NodeAttrs attrs;
    std::vector<std::string> params;   // role-ordered; see builder
    std::vector<std::string> buffers;  // BatchNorm running stats
};

enum class InitKind { HeNormal, Ones, Zeros };

inline const char* init_kind_name(InitKind k) {
    switch (k) {
        case InitKind::HeNormal: return "he_normal";
        case InitKind::Ones: return "ones";
        default: return "zeros";
    }
}

inline InitKind init_kind_from_name(const std::string& s) {
    if (s == "he_normal") return InitKind::HeNormal;
    if (s == "ones") return InitKind::Ones;
    if (s == "zeros") return InitKind::Zeros;
    fail("unknown init kind '", s, "'");
}

struct ParamSpec {
    Shape shape;
    InitKind init = InitKind::Zeros;
};

// Block-level metadata the deploy passes operate on. Rewrites match these
// annotations instead of pattern-matching raw node chains.
struct BlockAnnotation {
    std::string kind;   // "mbconv", "fused_mbconv", "se", "head", "output_upsample"
    std::string scope;  // name prefix the block's nodes were emitted under
    int entry = -1;     // node feeding the block
    int exit = -1;      // final node of the block
    std::map<std::string, double> attrs;
    std::map<std::string, int> roles;  // named interior nodes, e.g. "fuse"
    std::vector<int> nodes;            // every node inside the block, ascending
};

struct Graph {
    std::vector<Node> nodes;  // topologically ordered; node id == index
    std::map<std::string, int> inputs;
    std::map<std::string, int> outputs;
    std::map<std::string, ParamSpec> params;
    std::map<std::string, ParamSpec> buffers;
    std::vector<BlockAnnotation> blocks;
    int divisibility = 1;  // required divisor of input H and W

    const Node& node(int id) const {
        if (id < 0 || id >= static_cast<int>(nodes.size())) fail("node id ", id, " out of range");
        return nodes[static_cast<std::size_t>(id)];
    }

    int output_id(const std::string& name) const {
        auto it = outputs.find(name);
        if (it == outputs.end()) fail("graph has no output '", name, "'");
        return it->second;
    }
};

// Output channel count of each node, independent of input resolution.
inline int node_channels(const Graph& g, int id) {
    const Node& n = g.node(id);
    switch (n.kind) {
        case OpKind::Input: return n.attrs.channels;
        case OpKind::Conv2d: return n.attrs.out_channels;
        case OpKind::ReduceSum: return 1;
        default: return node_channels(g, n.inputs.at(0));
    }
}

class GraphBuilder {
public:
    explicit GraphBuilder(int divisibility = 1) { g_.divisibility = divisibility; }

    // Scope prefixes node and parameter names: push("stem") makes "stem/conv".
    void push_scope(const std::string& s) { scopes_.push_back(s); }
    void pop_scope() {
        if (scopes_.empty()) fail("scope stack empty");
        scopes_.pop_back();
    }

    std::string scoped(const std::string& name) const {
        std::string out;
        for (const auto& s : scopes_) {
            out += s;
            out += '/';
        }
        out += name;
        return out;
    }

    int input(const std::string& name, int channels) {
        Node n;
        n.kind = OpKind::Input;
        n.attrs.channels = channels;
        const int id = emit(name, std::move(n));
        g_.inputs[scoped(name)] = id;
        return id;
    }

    int conv(const std::string& name, int x, int out_ch, int kernel, int stride, int padding) {
        Node n;
        n.kind = OpKind::Conv2d;
        n.inputs = {x};
        n.attrs.kernel = kernel;
        n.attrs.stride = stride;
        n.attrs.padding = padding;
        n.attrs.out_channels = out_ch;
        const int ic = node_channels(g_, x);
        n.params = {param(scoped(name) + ".weight",
                          Shape{out_ch, ic, kernel, kernel}, InitKind::HeNormal)};
        return emit(name, std::move(n));
    }

    int depthwise(const std::string& name, int x, int kernel, int stride, int padding) {
        Node n;
        n.kind = OpKind::DepthwiseConv2d;
        n.inputs = {x};
        n.attrs.kernel = kernel;
        n.attrs.stride = stride;
        n.attrs.padding = padding;
        const int c = node_channels(g_, x);
        n.params = {param(scoped(name) + ".weight", Shape{c, 1, kernel, kernel},
                          InitKind::HeNormal)};
        return emit(name, std::move(n));
    }

    int pool(const std::string& name, int x, PoolKind kind, int kernel, int stride, int padding) {
        Node n;
        n.kind = OpKind::Pool2d;
        n.inputs = {x};
        n.attrs.kernel = kernel;
        n.attrs.stride = stride;
        n.attrs.padding = padding;
        n.attrs.pool = kind;
        return emit(name, std::move(n));
    }

    int global_avg_pool(const std::string& name, int x) {
        Node n;
        n.kind = OpKind::GlobalAvgPool;
        n.inputs = {x};
        return emit(name, std::move(n));
    }

    int upsample(const std::string& name, int x, int scale, ResizeMode mode) {
        if (scale < 1) fail("upsample scale must be >= 1, got ", scale);
        Node n;
        n.kind = OpKind::Resize;
        n.inputs = {x};
        n.attrs.scale = scale;
        n.attrs.resize = mode;
        return emit(name, std::move(n));
    }

    int batch_norm(const std::string& name, int x, double eps = 1e-3, double momentum = 0.01) {
        Node n;
        n.kind = OpKind::BatchNorm;
        n.inputs = {x};
        n.attrs.eps = eps;
        n.attrs.momentum = momentum;
        const int c = node_channels(g_, x);
        const Shape cs{1, c, 1, 1};
        n.params = {param(scoped(name) + ".gamma", cs, InitKind::Ones),
                    param(scoped(name) + ".beta", cs, InitKind::Zeros)};
        n.buffers = {buffer(scoped(name) + ".running_mean", cs, InitKind::Zeros),
                     buffer(scoped(name) + ".running_var", cs, InitKind::Ones)};
        return emit(name, std::move(n));
    }

    int activation(const std::string& name, int x, ActKind kind) {
        Node n;
        n.kind = OpKind::Activation;
        n.inputs = {x};
        n.attrs.act = kind;
        return emit(name, std::move(n));
    }

    int bias_add(const std::string& name, int x) {
        Node n;
        n.kind = OpKind::BiasAdd;
        n.inputs = {x};
        const int c = node_channels(g_, x);
        n.params = {param(scoped(name) + ".bias", Shape{1, c, 1, 1}, InitKind::Zeros)};
        return emit(name, std::move(n));
    }

    int add(const std::string& name, std::vector<int> xs) {
        Node n;
        n.kind = OpKind::Add;
        n.inputs = std::move(xs);
        return emit(name, std::move(n));
    }

    int mul(const std::string& name, int x, int gate) {
        Node n;
        n.kind = OpKind::Mul;
        n.inputs = {x, gate};
        return emit(name, std::move(n));
    }

    int fuse(const std::string& name, std::vector<int> xs, FuseMode mode, double eps = 1e-4) {
        Node n;
        n.kind = OpKind::FuseWeighted;
        n.attrs.fuse = mode;
        n.attrs.eps = eps;
        const auto m = static_cast<std::int64_t>(xs.size());
        n.inputs = std::move(xs);
        if (mode != FuseMode::Fixed)
            n.params = {param(scoped(name) + ".weights", Shape{1, m, 1, 1}, InitKind::Ones)};
        return emit(name, std::move(n));
    }

    int fuse_fixed(const std::string& name, std::vector<int> xs, std::vector<double> coeffs) {
        Node n;
        n.kind = OpKind::FuseWeighted;
        n.attrs.fuse = FuseMode::Fixed;
        n.attrs.coeffs = std::move(coeffs);
        n.inputs = std::move(xs);
        return emit(name, std::move(n));
    }

    int reduce_sum(const std::string& name, int x) {
        Node n;
        n.kind = OpKind::ReduceSum;
        n.inputs = {x};
        return emit(name, std::move(n));
    }

    void mark_output(const std::string& name, int id) { g_.outputs[name] = id; }

    void annotate(BlockAnnotation b) { g_.blocks.push_back(std::move(b)); }

    int channels(int id) const { return node_channels(g_, id); }

    const Graph& peek() const { return g_; }

    Graph finish() { return std::move(g_); }

private:
    int emit(const std::string& name, Node n) {
        const std::string full = scoped(name);
        if (names_.count(full)) fail("duplicate node name '", full, "'");
        for (int in : n.inputs)
            if (in < 0 || in >= static_cast<int>(g_.nodes.size()))
                fail("node '", full, "' references unknown input ", in);
        n.id = static_cast<int>(g_.nodes.size());
        n.name = full;
        names_.insert(full);
        g_.nodes.push_back(std::move(n));
        return g_.nodes.back().id;
    }

    std::string param(const std::string& name, Shape s, InitKind init) {
        if (g_.params.count(name) || g_.buffers.count(name))
            fail("duplicate parameter name '", name, "'");
        g_.params[name] = ParamSpec{s, init};
        return name;
    }

    std::string buffer(const std::string& name, Shape s, InitKind init) {
        if (g_.params.count(name) || g_.buffers.count(name))
            fail("duplicate buffer name '", name, "'");
        g_.buffers[name] = ParamSpec{s, init};
        return name;
    }

    Graph g_;
    std::vector<std::string> scopes_;
    std::set<std::string> names_;
};

// ---------------------------------------------------------------------------
// Shape inference

inline Shape infer_node_shape(const Graph& g, const Node& n, const std::vector<Shape>& shapes) {
    auto in_shape = [&](std::size_t i) -> const Shape& {
        return shapes[static_cast<std::size_t>(n.inputs.at(i))];
    };
    switch (n.kind) {
        case OpKind::Input: fail("input shape must be provided");
        case OpKind::Conv2d: {
            const Shape x = in_shape(0);
            if (x.c != g.params.at(n.params[0]).shape.c)
                fail_shape("node '", n.name, "': input channels ", x.c, " != weight in-channels ",
                           g.params.at(n.params[0]).shape.c);
            check_conv_padding(n.attrs.kernel, n.attrs.padding);
            return Shape{x.n, n.attrs.out_channels,
                         conv_out_extent(x.h, n.attrs.kernel, n.attrs.stride, n.attrs.padding),
                         conv_out_extent(x.w, n.attrs.kernel, n.attrs.stride, n.attrs.padding)};
        }
        case OpKind::DepthwiseConv2d: {
            const Shape x = in_shape(0);
            check_conv_padding(n.attrs.kernel, n.attrs.padding);
            return Shape{x.n, x.c,
                         conv_out_extent(x.h, n.attrs.kernel, n.attrs.stride, n.attrs.padding),
                         conv_out_extent(x.w, n.attrs.kernel, n.attrs.stride, n.attrs.padding)};
        }
        case OpKind::Pool2d: {
            const Shape x = in_shape(0);
            return Shape{x.n, x.c,
                         conv_out_extent(x.h, n.attrs.kernel, n.attrs.stride, n.attrs.padding),
                         conv_out_extent(x.w, n.attrs.kernel, n.attrs.stride, n.attrs.padding)};
        }
        case OpKind::GlobalAvgPool: {
            const Shape x = in_shape(0);
            return Shape{x.n, x.c, 1, 1};
        }
        case OpKind::Resize: {
            const Shape x = in_shape(0);
            return Shape{x.n, x.c, x.h * n.attrs.scale, x.w * n.attrs.scale};
        }
        case OpKind::BatchNorm:
        case OpKind::Activation:
        case OpKind::BiasAdd:
            return in_shape(0);
        case OpKind::Add:
        case OpKind::FuseWeighted: {
            const Shape s = in_shape(0);
            for (std::size_t i = 1; i < n.inputs.size(); ++i)
                if (!(in_shape(i) == s))
                    fail_shape("node '", n.name, "': operand shapes differ: ", s.str(), " vs ",
                               in_shape(i).str());
            return s;
        }
        case OpKind::Mul: {
            const Shape a = in_shape(0), b = in_shape(1);
            if (!(a == b) && !(b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1))
                fail_shape("node '", n.name, "': gate shape ", b.str(), " incompatible with ",
                           a.str());
            return a;
        }
        default: {  // ReduceSum
            (void)in_shape(0);
            return Shape{1, 1, 1, 1};
        }
    }
}

inline std::vector<Shape> infer_shapes(const Graph& g, const std::map<std::string, Shape>& inputs) {
    std::vector<Shape> shapes(g.nodes.size());
    for (const auto& [name, id] : g.inputs) {
        auto it = inputs.find(name);
        if (it == inputs.end()) fail("missing input shape for '", name, "'");
        const Shape s = it->second;
        if (!s.valid()) fail_shape("input '", name, "' shape invalid: ", s.str());
        if (s.c != g.node(id).attrs.channels)
            fail_shape("input '", name, "' expects ", g.node(id).attrs.channels, " channels, got ",
                       s.c);
        if (g.divisibility > 1 && (s.h % g.divisibility || s.w % g.divisibility))
            fail_shape("input '", name, "' spatial dims ", s.h, "x", s.w,
                       " must be divisible by ", g.divisibility);
        shapes[static_cast<std::size_t>(id)] = s;
    }
    for (const Node& n : g.nodes) {
        if (n.kind == OpKind::Input) {
            if (!shapes[static_cast<std::size_t>(n.id)].valid())
                fail("missing input shape for '", n.name, "'");
            continue;
        }
        for (int in : n.inputs)
            if (in >= n.id) fail("graph is not topologically ordered at node '", n.name, "'");
        shapes[static_cast<std::size_t>(n.id)] = infer_node_shape(g, n, shapes);
    }
    return shapes;
}

inline std::map<std::string, Shape> single_input_shapes(const Graph& g, Shape s) {
    if (g.inputs.size() != 1) fail("graph has ", g.inputs.size(), " inputs, expected 1");
    return {{g.inputs.begin()->first, s}};
}

// ---------------------------------------------------------------------------
// Parameters

struct ParamStore {
    std::map<std::string, Tensor> values;

    const Tensor& get(const std::string& name) const {
        auto it = values.find(name);
        if (it == values.end()) fail("unbound parameter '", name, "'");
        return it->second;
    }

    void set(const std::string& name, Tensor t) { values[name] = std::move(t); }
    bool has(const std::string& name) const { return values.count(name) != 0; }
};

inline Tensor init_tensor(const ParamSpec& spec, DType dt, Rng& rng) {
    switch (spec.init) {
        case InitKind::Ones: return Tensor::filled(spec.shape, dt, 1.0);
        case InitKind::Zeros: return Tensor::zeros(spec.shape, dt);
        default: {
            // fan-out scaling as in the reference backbone implementations
            const Shape s = spec.shape;
            const double fan_out = static_cast<double>(s.h * s.w * s.n);
            return random_normal(s, dt, rng, 0.0, std::sqrt(2.0 / fan_out));
        }
    }
}

// Deterministic: iterates by name so the same (graph, seed) always produces
// identical values, independent of build order.
inline ParamStore init_params(const Graph& g, std::uint64_t seed, DType dt = DType::F32) {
    ParamStore store;
    Rng rng(seed);
    for (const auto& [name, spec] : g.params) {
        Rng sub = rng.fork(static_cast<std::uint64_t>(std::hash<std::string>{}(name)));
        store.set(name, init_tensor(spec, dt, sub));
    }
    for (const auto& [name, spec] : g.buffers) store.set(name, init_tensor(spec, dt, rng));
    return store;
}

// ---------------------------------------------------------------------------
// Execution

enum class ExecMode { Train, Infer };

struct Trace {
    ExecMode mode = ExecMode::Infer;
    std::vector<Tensor> values;                    // per node
    std::vector<Tensor> bn_mean, bn_var;           // per node, Train mode BatchNorm only
    std::map<std::string, Tensor> buffer_updates;  // new running stats (Train mode)
};

inline Tensor eval_node(const Graph& g, const Node& n, const ParamStore& store, Trace& trace) {
    auto in = [&](std::size_t i) -> const Tensor& {
        return trace.values[static_cast<std::size_t>(n.inputs.at(i))];
    };
    switch (n.kind) {
        case OpKind::Input: fail("input tensor missing for '", n.name, "'");
        case OpKind::Conv2d:
            return conv2d(in(0), store.get(n.params[0]), n.attrs.stride, n.attrs.padding);
        case OpKind::DepthwiseConv2d:
            return depthwise_conv2d(in(0), store.get(n.params[0]), n.attrs.stride,
                                    n.attrs.padding);
        case OpKind::Pool2d:
            return pool2d(in(0), n.attrs.pool, n.attrs.kernel, n.attrs.stride, n.attrs.padding);
        case OpKind::GlobalAvgPool: return global_avg_pool(in(0));
        case OpKind::Resize: {
            const Shape s = in(0).shape();
            return resize(in(0), s.h * n.attrs.scale, s.w * n.attrs.scale, n.attrs.resize);
        }
        case OpKind::BatchNorm: {
            const Tensor& gamma = store.get(n.params[0]);
            const Tensor& beta = store.get(n.params[1]);
            const Tensor& rm = store.get(n.buffers[0]);
            const Tensor& rv = store.get(n.buffers[1]);
            if (trace.mode == ExecMode::Train) {
                auto r = batch_norm_train(in(0), gamma, beta, rm, rv, n.attrs.eps,
                                          n.attrs.momentum);
                trace.bn_mean[static_cast<std::size_t>(n.id)] = r.batch_mean;
                trace.bn_var[static_cast<std::size_t>(n.id)] = r.batch_var;
                trace.buffer_updates[n.buffers[0]] = r.new_running_mean;
                trace.buffer_updates[n.buffers[1]] = r.new_running_var;
                return r.y;
            }
            return batch_norm_infer(in(0), gamma, beta, rm, rv, n.attrs.eps);
        }
        case OpKind::Activation: return activate(in(0), n.attrs.act);
        case OpKind::BiasAdd: return bias_add(in(0), store.get(n.params[0]));
        case OpKind::Add: {
            std::vector<Tensor> xs;
            xs.reserve(n.inputs.size());
            for (std::size_t i = 0; i < n.inputs.size(); ++i) xs.push_back(in(i));
            return add(xs);
        }
        case OpKind::Mul: return mul(in(0), in(1));
        case OpKind::FuseWeighted: {
            std::vector<Tensor> xs;
            xs.reserve(n.inputs.size());
            for (std::size_t i = 0; i < n.inputs.size(); ++i) xs.push_back(in(i));
            std::vector<double> coeffs;
            if (n.attrs.fuse == FuseMode::Fixed) {
                coeffs = n.attrs.coeffs;
            } else {
                const Tensor& w = store.get(n.params[0]);
                std::vector<double> raw(static_cast<std::size_t>(w.elems()));
                for (std::int64_t i = 0; i < w.elems(); ++i) raw[static_cast<std::size_t>(i)] = w.item(i);
                coeffs = fuse_coeffs(n.attrs.fuse, raw, n.attrs.eps);
            }
            return fuse_weighted(xs, coeffs);
        }
        default: return reduce_sum(in(0));
    }
}

inline Trace forward_trace(const Graph& g, const ParamStore& store,
                           const std::map<std::string, Tensor>& inputs, ExecMode mode) {
    Trace trace;
    trace.mode = mode;
    trace.values.resize(g.nodes.size());
    trace.bn_mean.resize(g.nodes.size());
    trace.bn_var.resize(g.nodes.size());
    for (const auto& [name, id] : g.inputs) {
        auto it = inputs.find(name);
        if (it == inputs.end()) fail("missing input '", name, "'");
        if (it->second.shape().c != g.node(id).attrs.channels)
            fail_shape("input '", name, "' expects ", g.node(id).attrs.channels,
                       " channels, got ", it->second.shape().c);
        if (g.divisibility > 1 && (it->second.shape().h % g.divisibility ||
                                   it->second.shape().w % g.divisibility))
            fail_shape("input '", name, "' spatial dims must be divisible by ", g.divisibility);
        trace.values[static_cast<std::size_t>(id)] = it->second;
    }
    for (const Node& n : g.nodes) {
        if (n.kind == OpKind::Input) {
            if (!trace.values[static_cast<std::size_t>(n.id)].defined())
                fail("missing input '", n.name, "'");
            continue;
        }
        trace.values[static_cast<std::size_t>(n.id)] = eval_node(g, n, store, trace);
    }
    return trace;
}

inline std::map<std::string, Tensor> forward(const Graph& g, const ParamStore& store,
                                             const std::map<std::string, Tensor>& inputs,
                                             ExecMode mode = ExecMode::Infer) {
    const Trace trace = forward_trace(g, store, inputs, mode);
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : g.outputs)
        out[name] = trace.values[static_cast<std::size_t>(id)];
    return out;
}

struct Gradients {
    std::map<std::string, Tensor> params;  // by parameter name
    std::map<std::string, Tensor> inputs;  // by graph input name
};

inline void accumulate_grad(Tensor& slot, const Tensor& g) {
    slot = slot.defined() ? add({slot, g}) : g;
}

// Reverse-mode sweep from per-node output gradients. seed maps node id ->
// gradient tensor; typically one entry for the output the loss touched.
inline Gradients backward_from(const Graph& g, const ParamStore& store, const Trace& trace,
                               const std::map<int, Tensor>& seed) {
    std::vector<Tensor> grad(g.nodes.size());
    for (const auto& [id, t] : seed) {
        if (!(t.shape() == trace.values[static_cast<std::size_t>(id)].shape()))
            fail_shape("gradient seed shape ", t.shape().str(), " != value shape ",
                       trace.values[static_cast<std::size_t>(id)].shape().str(), " at node ",
                       id);
        accumulate_grad(grad[static_cast<std::size_t>(id)], t);
    }
    Gradients out;
    auto param_grad = [&](const std::string& name, const Tensor& t) {
        auto it = out.params.find(name);
        if (it == out.params.end())
            out.params.emplace(name, t);
        else
            it->second = add({it->second, t});
    };
    for (auto rit = g.nodes.rbegin(); rit != g.nodes.rend(); ++rit) {
        const Node& n = *rit;
        Tensor& gout = grad[static_cast<std::size_t>(n.id)];
        if (!gout.defined()) continue;
        auto value = [&](int id) -> const Tensor& {
            return trace.values[static_cast<std::size_t>(id)];
        };
        auto flow = [&](int id, const Tensor& t) {
            accumulate_grad(grad[static_cast<std::size_t>(id)], t);
        };
        switch (n.kind) {
            case OpKind::Input: break;
            case OpKind::Conv2d: {
                auto [dx, dw] = conv2d_backward(value(n.inputs[0]), store.get(n.params[0]),
                                                n.attrs.stride, n.attrs.padding, gout);
                flow(n.inputs[0], dx);
                param_grad(n.params[0], dw);
                break;
            }
            case OpKind::DepthwiseConv2d: {
                auto [dx, dw] = depthwise_conv2d_backward(value(n.inputs[0]),
                                                          store.get(n.params[0]), n.attrs.stride,
                                                          n.attrs.padding, gout);
                flow(n.inputs[0], dx);
                param_grad(n.params[0], dw);
                break;
            }
            case OpKind::Pool2d:
                flow(n.inputs[0], pool2d_backward(value(n.inputs[0]), n.attrs.pool, n.attrs.kernel,
                                                  n.attrs.stride, n.attrs.padding, gout));
                break;
            case OpKind::GlobalAvgPool:
                flow(n.inputs[0], global_avg_pool_backward(value(n.inputs[0]), gout));
                break;
            case OpKind::Resize:
                flow(n.inputs[0], resize_backward(value(n.inputs[0]), n.attrs.resize, gout));
                break;
            case OpKind::BatchNorm: {
                std::array<Tensor, 3> r;
                if (trace.mode == ExecMode::Train) {
                    r = batch_norm_backward_train(value(n.inputs[0]), store.get(n.params[0]),
                                                  trace.bn_mean[static_cast<std::size_t>(n.id)],
                                                  trace.bn_var[static_cast<std::size_t>(n.id)],
                                                  n.attrs.eps, gout);
                } else {
                    r = batch_norm_backward_infer(value(n.inputs[0]), store.get(n.params[0]),
                                                  store.get(n.buffers[0]), store.get(n.buffers[1]),
                                                  n.attrs.eps, gout);
                }
                flow(n.inputs[0], r[0]);
                param_grad(n.params[0], r[1]);
                param_grad(n.params[1], r[2]);
                break;
            }
            case OpKind::Activation:
                flow(n.inputs[0], activate_backward(value(n.inputs[0]), n.attrs.act, gout));
                break;
            case OpKind::BiasAdd: {
                auto [dx, db] = bias_add_backward(value(n.inputs[0]), gout);
                flow(n.inputs[0], dx);
                param_grad(n.params[0], db);
                break;
            }
            case OpKind::Add:
                for (int in : n.inputs) flow(in, gout);
                break;
            case OpKind::Mul: {
                auto [da, db] = mul_backward(value(n.inputs[0]), value(n.inputs[1]), gout);
                flow(n.inputs[0], da);
                flow(n.inputs[1], db);
                break;
            }
            case OpKind::FuseWeighted: {
                std::vector<Tensor> xs;
                xs.reserve(n.inputs.size());
                for (int in : n.inputs) xs.push_back(value(in));
                std::vector<double> raw;
                if (n.attrs.fuse == FuseMode::Fixed) {
                    raw = n.attrs.coeffs;
                } else {
                    const Tensor& w = store.get(n.params[0]);
                    raw.resize(static_cast<std::size_t>(w.elems()));
                    for (std::int64_t i = 0; i < w.elems(); ++i)
                        raw[static_cast<std::size_t>(i)] = w.item(i);
                }
                auto r = fuse_weighted_backward(xs, raw, n.attrs.fuse, n.attrs.eps, gout);
                for (std::size_t i = 0; i < n.inputs.size(); ++i)
                    flow(n.inputs[i], r.dinputs[i]);
                if (!r.dweights.empty()) {
                    const DType dt = gout.dtype();
                    Tensor dw = dt == DType::F32
                                    ? Tensor::vec<float>(std::vector<float>(r.dweights.begin(),
                                                                            r.dweights.end()))
                                    : Tensor::vec<double>(std::vector<double>(r.dweights.begin(),
                                                                              r.dweights.end()));
                    param_grad(n.params[0], dw);
                }
                break;
            }
            default:
                flow(n.inputs[0], reduce_sum_backward(value(n.inputs[0]), gout));
                break;
        }
    }
    for (const auto& [name, id] : g.inputs)
        if (grad[static_cast<std::size_t>(id)].defined())
            out.inputs[name] = grad[static_cast<std::size_t>(id)];
    return out;
}

// Scalar-loss entry point: seeds the sweep with d(loss)/d(loss) = 1.
inline Gradients backward(const Graph& g, const ParamStore& store, const Trace& trace,
                          int loss_node) {
    const Tensor& loss = trace.values.at(static_cast<std::size_t>(loss_node));
    if (loss.elems() != 1)
        fail_shape("loss node must be scalar, got shape ", loss.shape().str());
    return backward_from(g, store, trace, {{loss_node, Tensor::filled(Shape{1, 1, 1, 1},
                                                                      loss.dtype(), 1.0)}});
}

}  // namespace eseg

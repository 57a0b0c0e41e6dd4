#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "eseg/graph.hpp"

namespace eseg {

struct NodeCost {
    int id = -1;
    std::int64_t params = 0;
    std::int64_t flops = 0;
};

struct CostReport {
    std::int64_t total_params = 0;
    std::int64_t total_flops = 0;
    std::int64_t peak_activation_elems = 0;
    std::vector<NodeCost> per_node;
};

inline std::int64_t node_param_count(const Graph& g, const Node& n) {
    std::int64_t total = 0;
    for (const auto& p : n.params) {
        const ParamSpec& spec = g.params.at(p);
        if (spec.shape.elems() <= 0) fail("parameter '", p, "' has no bound shape");
        total += spec.shape.elems();
    }
    return total;  // running stats are buffers, not counted
}

inline std::int64_t count_params(const Graph& g) {
    std::int64_t total = 0;
    for (const Node& n : g.nodes) total += node_param_count(g, n);
    return total;
}

// MAC convention: one multiply-accumulate = one FLOP. Pointwise ops cost one
// per output element, batch norm two, m-way sums m-1, weighted fusion m.
inline std::int64_t node_flop_count(const Graph& g, const Node& n,
                                    const std::vector<Shape>& shapes) {
    const std::int64_t out = shapes[static_cast<std::size_t>(n.id)].elems();
    auto in_elems = [&](std::size_t i) {
        return shapes[static_cast<std::size_t>(n.inputs.at(i))].elems();
    };
    switch (n.kind) {
        case OpKind::Input: return 0;
        case OpKind::Conv2d: {
            const std::int64_t ic = g.params.at(n.params[0]).shape.c;
            return out * n.attrs.kernel * n.attrs.kernel * ic;
        }
        case OpKind::DepthwiseConv2d: return out * n.attrs.kernel * n.attrs.kernel;
        case OpKind::BatchNorm: return 2 * out;
        case OpKind::Add: return (static_cast<std::int64_t>(n.inputs.size()) - 1) * out;
        case OpKind::FuseWeighted: return static_cast<std::int64_t>(n.inputs.size()) * out;
        case OpKind::ReduceSum: return in_elems(0);
        default: return out;  // pool, resize, activation, bias, mul, global pool
    }
}

inline std::int64_t count_flops(const Graph& g, const std::map<std::string, Shape>& inputs) {
    const auto shapes = infer_shapes(g, inputs);
    std::int64_t total = 0;
    for (const Node& n : g.nodes) total += node_flop_count(g, n, shapes);
    return total;
}

// Peak of the live-tensor footprint over the topological schedule: a value
// stays live from its producing step until its last consumer (graph outputs
// stay live to the end).
inline std::int64_t peak_activation_elems(const Graph& g, const std::vector<Shape>& shapes) {
    const int count = static_cast<int>(g.nodes.size());
    std::vector<int> last_use(g.nodes.size());
    for (const Node& n : g.nodes) {
        last_use[static_cast<std::size_t>(n.id)] = n.id;
        for (int in : n.inputs)
            last_use[static_cast<std::size_t>(in)] =
                std::max(last_use[static_cast<std::size_t>(in)], n.id);
    }
    for (const auto& [name, id] : g.outputs) last_use[static_cast<std::size_t>(id)] = count - 1;
    std::int64_t peak = 0, live = 0;
    std::vector<std::vector<int>> expiring(g.nodes.size());
    for (int i = 0; i < count; ++i)
        expiring[static_cast<std::size_t>(last_use[static_cast<std::size_t>(i)])].push_back(i);
    for (int t = 0; t < count; ++t) {
        live += shapes[static_cast<std::size_t>(t)].elems();
        peak = std::max(peak, live);
        for (int id : expiring[static_cast<std::size_t>(t)])
            live -= shapes[static_cast<std::size_t>(id)].elems();
    }
    return peak;
}

inline CostReport cost_report(const Graph& g, const std::map<std::string, Shape>& inputs) {
    const auto shapes = infer_shapes(g, inputs);
    CostReport r;
    r.per_node.reserve(g.nodes.size());
    for (const Node& n : g.nodes) {
        NodeCost c;
        c.id = n.id;
        c.params = node_param_count(g, n);
        c.flops = node_flop_count(g, n, shapes);
        r.total_params += c.params;
        r.total_flops += c.flops;
        r.per_node.push_back(c);
    }
    r.peak_activation_elems = peak_activation_elems(g, shapes);
    return r;
}

struct ReceptiveField {
    std::int64_t rf = 1;
    std::int64_t jump = 1;
};

// Composition along the maximal path: windowed ops grow rf by (k-1)*jump and
// multiply jump by their stride. Upsampling shrinks the effective jump (never
// below 1); joins take the widest contributor. A gate input (Mul operand 1)
// modulates values globally, so the field tracks the primary operand only.
inline std::vector<ReceptiveField> receptive_fields(const Graph& g,
                                                    const std::vector<Shape>& shapes) {
    std::vector<ReceptiveField> rf(g.nodes.size());
    std::vector<bool> reached(g.nodes.size(), false);
    for (const Node& n : g.nodes) {
        auto at = [&](std::size_t i) -> const ReceptiveField& {
            return rf[static_cast<std::size_t>(n.inputs.at(i))];
        };
        auto in_reached = [&](std::size_t i) {
            return reached[static_cast<std::size_t>(n.inputs.at(i))];
        };
        ReceptiveField& out = rf[static_cast<std::size_t>(n.id)];
        switch (n.kind) {
            case OpKind::Input:
                out = {1, 1};
                reached[static_cast<std::size_t>(n.id)] = true;
                continue;
            case OpKind::Conv2d:
            case OpKind::DepthwiseConv2d:
            case OpKind::Pool2d:
                if (!in_reached(0)) continue;
                out.rf = at(0).rf + (n.attrs.kernel - 1) * at(0).jump;
                out.jump = at(0).jump * n.attrs.stride;
                break;
            case OpKind::GlobalAvgPool:
            case OpKind::ReduceSum: {
                if (!in_reached(0)) continue;
                const Shape& s = shapes[static_cast<std::size_t>(n.inputs[0])];
                out.rf = at(0).rf + (std::max(s.h, s.w) - 1) * at(0).jump;
                out.jump = at(0).jump;
                break;
            }
            case OpKind::Resize:
                if (!in_reached(0)) continue;
                out.rf = at(0).rf;
                out.jump = std::max<std::int64_t>(1, at(0).jump / n.attrs.scale);
                break;
            case OpKind::Add:
            case OpKind::FuseWeighted: {
                bool any = false;
                out = {1, 1};
                for (std::size_t i = 0; i < n.inputs.size(); ++i) {
                    if (!in_reached(i)) continue;
                    any = true;
                    out.rf = std::max(out.rf, at(i).rf);
                    out.jump = std::max(out.jump, at(i).jump);
                }
                if (!any) continue;
                break;
            }
            default:  // BatchNorm, Activation, BiasAdd, Mul (primary operand)
                if (!in_reached(0)) continue;
                out = at(0);
                break;
        }
        reached[static_cast<std::size_t>(n.id)] = true;
    }
    for (std::size_t i = 0; i < reached.size(); ++i)
        if (!reached[i]) rf[i] = {0, 0};
    return rf;
}

inline ReceptiveField receptive_field(const Graph& g, int node_id,
                                      const std::map<std::string, Shape>& inputs) {
    if (node_id < 0 || node_id >= static_cast<int>(g.nodes.size()))
        fail("no node with id ", node_id);
    const auto shapes = infer_shapes(g, inputs);
    const auto rf = receptive_fields(g, shapes);
    const ReceptiveField r = rf[static_cast<std::size_t>(node_id)];
    if (r.rf < 1) fail("node ", node_id, " is not reachable from any input");
    return r;
}

}  // namespace eseg

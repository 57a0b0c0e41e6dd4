#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "eseg/backbone.hpp"
#include "eseg/cost.hpp"
#include "eseg/model.hpp"

namespace eseg {

// Outcome of one rewrite pass. The shape verdict is always recomputed by
// running shape inference over both graphs at the reference input, never
// assumed from the construction.
struct RewriteReport {
    std::string pass;
    int matched = 0;
    int replaced = 0;
    std::int64_t param_delta = 0;
    std::int64_t flop_delta = 0;
    Shape reference;  // input shape the flop delta and verdict were measured at
    bool shapes_preserved = false;
};

struct RewriteResult {
    Graph graph;
    RewriteReport report;
};

namespace detail {

// Rewrites rebuild the whole graph through a fresh builder. Blocks to replace
// are re-emitted from their annotation metadata; everything else is copied
// verbatim with remapped input ids.
struct RebuildPlan {
    std::set<int> reemit_fused;    // block annotation index -> fused re-emission
    std::set<int> reemit_regular;  // separable conv pair -> one regular conv
    std::set<int> splice;          // block annotation index -> delete, exit = entry
    bool swap_act = false;
    ActKind act_from = ActKind::Silu;
    ActKind act_to = ActKind::Relu;
    bool zero_se_attr = false;  // surviving block annotations lose their SE mark
};

inline int copy_node(GraphBuilder& b, const Node& n, const std::vector<int>& remap,
                     const RebuildPlan& plan) {
    std::vector<int> ins;
    ins.reserve(n.inputs.size());
    for (int i : n.inputs) {
        const int m = remap.at(static_cast<std::size_t>(i));
        if (m < 0) fail("node '", n.name, "' consumes a node removed by the rewrite");
        ins.push_back(m);
    }
    switch (n.kind) {
        case OpKind::Input: return b.input(n.name, n.attrs.channels);
        case OpKind::Conv2d:
            return b.conv(n.name, ins[0], n.attrs.out_channels, n.attrs.kernel, n.attrs.stride,
                          n.attrs.padding);
        case OpKind::DepthwiseConv2d:
            return b.depthwise(n.name, ins[0], n.attrs.kernel, n.attrs.stride, n.attrs.padding);
        case OpKind::Pool2d:
            return b.pool(n.name, ins[0], n.attrs.pool, n.attrs.kernel, n.attrs.stride,
                          n.attrs.padding);
        case OpKind::GlobalAvgPool: return b.global_avg_pool(n.name, ins[0]);
        case OpKind::Resize: return b.upsample(n.name, ins[0], n.attrs.scale, n.attrs.resize);
        case OpKind::BatchNorm:
            return b.batch_norm(n.name, ins[0], n.attrs.eps, n.attrs.momentum);
        case OpKind::Activation: {
            ActKind a = n.attrs.act;
            if (plan.swap_act && a == plan.act_from) a = plan.act_to;
            return b.activation(n.name, ins[0], a);
        }
        case OpKind::BiasAdd: return b.bias_add(n.name, ins[0]);
        case OpKind::Add: return b.add(n.name, std::move(ins));
        case OpKind::Mul: return b.mul(n.name, ins[0], ins[1]);
        case OpKind::FuseWeighted:
            if (n.attrs.fuse == FuseMode::Fixed)
                return b.fuse_fixed(n.name, std::move(ins), n.attrs.coeffs);
            return b.fuse(n.name, std::move(ins), n.attrs.fuse, n.attrs.eps);
        case OpKind::ReduceSum: return b.reduce_sum(n.name, ins[0]);
    }
    fail("node '", n.name, "' has an unknown op kind");
}

// Reconstructs the emission parameters of an annotated encoder block. The
// activation and norm settings are read back from the block's interior nodes
// so earlier rewrites (activation swaps) carry through.
inline BlockParams fused_params_from(const Graph& g, const BlockAnnotation& a) {
    BlockParams p;
    p.kind = BlockKind::FusedMBConv;
    p.in_ch = static_cast<int>(a.attrs.at("in_ch"));
    p.out_ch = static_cast<int>(a.attrs.at("out_ch"));
    p.expansion = a.attrs.at("expansion");
    p.kernel = static_cast<int>(a.attrs.at("kernel"));
    p.stride = static_cast<int>(a.attrs.at("stride"));
    p.se_ch = static_cast<int>(a.attrs.at("se_ch"));
    bool act_found = false, bn_found = false;
    for (int id : a.nodes) {
        const Node& n = g.node(id);
        if (!bn_found && n.kind == OpKind::BatchNorm) {
            p.bn_eps = n.attrs.eps;
            p.bn_momentum = n.attrs.momentum;
            bn_found = true;
        }
        if (!act_found && n.kind == OpKind::Activation) {
            p.act = n.attrs.act;
            act_found = true;
        }
    }
    return p;
}

inline Graph rebuild(const Graph& g, const RebuildPlan& plan) {
    GraphBuilder b(g.divisibility);
    const auto count = static_cast<int>(g.nodes.size());
    std::vector<int> remap(static_cast<std::size_t>(count), -1);
    std::vector<char> skipped(static_cast<std::size_t>(count), 0);
    std::map<int, int> trigger;  // first node of a replaced block -> annotation index
    std::map<int, std::pair<int, int>> emitted;  // annotation index -> new id range

    std::set<int> replaced = plan.reemit_fused;
    replaced.insert(plan.reemit_regular.begin(), plan.reemit_regular.end());
    replaced.insert(plan.splice.begin(), plan.splice.end());
    for (int ai : replaced) {
        const BlockAnnotation& a = g.blocks.at(static_cast<std::size_t>(ai));
        if (a.nodes.empty()) fail("block annotation '", a.scope, "' lists no nodes");
        for (int id : a.nodes) skipped[static_cast<std::size_t>(id)] = 1;
        trigger[a.nodes.front()] = ai;
    }

    for (int id = 0; id < count; ++id) {
        const auto t = trigger.find(id);
        if (t != trigger.end()) {
            const BlockAnnotation& a = g.blocks.at(static_cast<std::size_t>(t->second));
            const int entry = remap.at(static_cast<std::size_t>(a.entry));
            if (entry < 0) fail("block under '", a.scope, "' enters at a removed node");
            const int emit_from = static_cast<int>(b.peek().nodes.size());
            if (plan.splice.count(t->second)) {
                remap[static_cast<std::size_t>(a.exit)] = entry;
            } else if (plan.reemit_regular.count(t->second)) {
                // same receptive footprint as the depthwise + pointwise pair
                const auto oc = static_cast<int>(a.attrs.at("out_ch"));
                const auto k = static_cast<int>(a.attrs.at("kernel"));
                double eps = 1e-3, momentum = 0.01;
                ActKind act = ActKind::Relu;
                for (int nid : a.nodes) {
                    const Node& n = g.node(nid);
                    if (n.kind == OpKind::BatchNorm) {
                        eps = n.attrs.eps;
                        momentum = n.attrs.momentum;
                    }
                    if (n.kind == OpKind::Activation) act = n.attrs.act;
                }
                int cur = b.conv(a.scope + "conv", entry, oc, k, 1, k / 2);
                cur = b.batch_norm(a.scope + "bn", cur, eps, momentum);
                remap[static_cast<std::size_t>(a.exit)] =
                    b.activation(a.scope + "act", cur, act);
            } else {
                std::string scope = a.scope;
                if (!scope.empty() && scope.back() == '/') scope.pop_back();
                if (!scope.empty()) b.push_scope(scope);
                remap[static_cast<std::size_t>(a.exit)] =
                    emit_fused_mbconv(b, entry, fused_params_from(g, a));
                if (!scope.empty()) b.pop_scope();
            }
            emitted[t->second] = {emit_from, static_cast<int>(b.peek().nodes.size())};
        }
        if (skipped[static_cast<std::size_t>(id)]) continue;
        remap[static_cast<std::size_t>(id)] =
            copy_node(b, g.nodes[static_cast<std::size_t>(id)], remap, plan);
    }

    for (const auto& [name, id] : g.outputs) {
        const int m = remap.at(static_cast<std::size_t>(id));
        if (m < 0) fail("output '", name, "' points into a removed block");
        b.mark_output(name, m);
    }

    // Surviving annotations are carried over with remapped ids. Annotations
    // whose nodes were all replaced are dropped; re-emitted blocks have
    // already annotated themselves.
    for (const BlockAnnotation& a : g.blocks) {
        bool alive = false;
        for (int id : a.nodes)
            if (!skipped[static_cast<std::size_t>(id)]) alive = true;
        if (!alive) continue;
        BlockAnnotation c;
        c.kind = a.kind;
        c.scope = a.scope;
        c.entry = remap.at(static_cast<std::size_t>(a.entry));
        c.exit = remap.at(static_cast<std::size_t>(a.exit));
        if (c.entry < 0 || c.exit < 0)
            fail("annotation '", a.scope, "' lost its boundary in the rewrite");
        c.attrs = a.attrs;
        if (plan.zero_se_attr && (c.kind == "mbconv" || c.kind == "fused_mbconv"))
            c.attrs["se_ch"] = 0;
        for (const auto& [role, rid] : a.roles) {
            const int m = remap.at(static_cast<std::size_t>(rid));
            if (m < 0) fail("annotation '", a.scope, "' role '", role, "' was removed");
            c.roles[role] = m;
        }
        std::set<int> kept;
        for (int id : a.nodes) {
            const int m = remap.at(static_cast<std::size_t>(id));
            if (m >= 0) kept.insert(m);
        }
        // a replaced block nested inside this annotation contributes its
        // replacement nodes, keeping cost attribution (e.g. head flops) exact
        const std::set<int> members(a.nodes.begin(), a.nodes.end());
        for (const auto& [ai, range] : emitted) {
            const BlockAnnotation& inner = g.blocks.at(static_cast<std::size_t>(ai));
            bool contained = !inner.nodes.empty();
            for (int id : inner.nodes)
                if (!members.count(id)) contained = false;
            if (!contained) continue;
            for (int id = range.first; id < range.second; ++id) kept.insert(id);
        }
        c.nodes.assign(kept.begin(), kept.end());
        b.annotate(std::move(c));
    }
    return b.finish();
}

// Smallest legal input for the graph; used when the caller gives no reference.
inline Shape default_reference(const Graph& g) {
    const auto& [name, id] = *g.inputs.begin();
    (void)name;
    const std::int64_t side = 8LL * g.divisibility;
    return Shape{1, node_channels(g, id), side, side};
}

inline RewriteReport make_report(const std::string& pass, const Graph& before,
                                 const Graph& after, int matched, Shape reference) {
    RewriteReport r;
    r.pass = pass;
    r.matched = matched;
    r.replaced = matched;
    if (before.inputs.size() != 1)
        fail("rewrite reports need a graph with exactly one input, got ",
             before.inputs.size());
    r.reference = reference.valid() ? reference : default_reference(before);
    const auto in_before = single_input_shapes(before, r.reference);
    const auto in_after = single_input_shapes(after, r.reference);
    r.param_delta = count_params(after) - count_params(before);
    r.flop_delta = count_flops(after, in_after) - count_flops(before, in_before);
    const auto shapes_before = infer_shapes(before, in_before);
    const auto shapes_after = infer_shapes(after, in_after);
    r.shapes_preserved = true;
    for (const auto& [name, id] : before.outputs) {
        const Shape sb = shapes_before.at(static_cast<std::size_t>(id));
        const Shape sa = shapes_after.at(static_cast<std::size_t>(after.output_id(name)));
        if (!(sb == sa)) r.shapes_preserved = false;
    }
    return r;
}

}  // namespace detail

// Replaces every annotated inverted-bottleneck block with its fused form: the
// 1x1 expansion and k x k depthwise pair become one regular k x k convolution.
// The new convolutions are freshly initialized; this is an architecture
// transform for retraining, not a weight-preserving optimization.
inline RewriteResult rewrite_fuse_mbconv(const Graph& g, Shape reference = {}) {
    if (g.blocks.empty())
        fail("fuse-mbconv needs block annotations; this graph carries none");
    detail::RebuildPlan plan;
    for (std::size_t i = 0; i < g.blocks.size(); ++i) {
        const BlockAnnotation& a = g.blocks[i];
        if (a.kind != "mbconv") continue;
        const auto in_ch = static_cast<int>(a.attrs.at("in_ch"));
        const auto se_ch = static_cast<int>(a.attrs.at("se_ch"));
        if (static_cast<int>(in_ch * a.attrs.at("expansion")) == in_ch && se_ch > 0)
            fail("block under '", a.scope,
                 "' expands by 1 and carries squeeze-excitation; the fused form cannot "
                 "express that (run remove-se first)");
        plan.reemit_fused.insert(static_cast<int>(i));
    }
    const auto matched = static_cast<int>(plan.reemit_fused.size());
    if (matched == 0) return {g, detail::make_report("fuse-mbconv", g, g, 0, reference)};
    Graph out = detail::rebuild(g, plan);
    RewriteReport rep = detail::make_report("fuse-mbconv", g, out, matched, reference);
    return {std::move(out), std::move(rep)};
}

// Deletes every squeeze-excitation sub-block, replacing the gated multiply
// with the identity. All other parameters keep their names and shapes.
inline RewriteResult rewrite_remove_se(const Graph& g, Shape reference = {}) {
    detail::RebuildPlan plan;
    plan.zero_se_attr = true;
    for (std::size_t i = 0; i < g.blocks.size(); ++i)
        if (g.blocks[i].kind == "se") plan.splice.insert(static_cast<int>(i));
    const auto matched = static_cast<int>(plan.splice.size());
    if (matched == 0) return {g, detail::make_report("remove-se", g, g, 0, reference)};
    Graph out = detail::rebuild(g, plan);
    RewriteReport rep = detail::make_report("remove-se", g, out, matched, reference);
    return {std::move(out), std::move(rep)};
}

// Substitutes one activation kind for another on every matching node.
inline RewriteResult rewrite_swap_activation(const Graph& g, ActKind from = ActKind::Silu,
                                             ActKind to = ActKind::Relu,
                                             Shape reference = {}) {
    int matched = 0;
    for (const Node& n : g.nodes)
        if (n.kind == OpKind::Activation && n.attrs.act == from) ++matched;
    if (matched == 0) return {g, detail::make_report("swap-activation", g, g, 0, reference)};
    detail::RebuildPlan plan;
    plan.swap_act = true;
    plan.act_from = from;
    plan.act_to = to;
    Graph out = detail::rebuild(g, plan);
    RewriteReport rep = detail::make_report("swap-activation", g, out, matched, reference);
    return {std::move(out), std::move(rep)};
}

// Collapses every annotated depthwise + pointwise pair into one regular
// convolution with the same receptive field and output channels. Like the
// block fusion, replacement convolutions start from fresh initialization.
inline RewriteResult rewrite_fuse_separable(const Graph& g, Shape reference = {}) {
    detail::RebuildPlan plan;
    for (std::size_t i = 0; i < g.blocks.size(); ++i)
        if (g.blocks[i].kind == "sep_conv") plan.reemit_regular.insert(static_cast<int>(i));
    const auto matched = static_cast<int>(plan.reemit_regular.size());
    if (matched == 0) return {g, detail::make_report("fuse-separable", g, g, 0, reference)};
    Graph out = detail::rebuild(g, plan);
    RewriteReport rep = detail::make_report("fuse-separable", g, out, matched, reference);
    return {std::move(out), std::move(rep)};
}

// Moves the decoder and prediction head one pyramid level up (P2 to P3). This
// is a construction-time change: the returned config builds the shifted model.
inline ModelConfig rewrite_shift_base_level(const ModelConfig& cfg) {
    if (cfg.min_level == 3) fail("model '", cfg.name, "' is already at base level 3");
    if (cfg.min_level != 2)
        fail("shift-base-level expects a model at base level 2, got ", cfg.min_level);
    ModelConfig out = cfg;
    out.min_level = 3;
    return out;
}

inline const std::vector<std::string>& rewrite_pass_names() {
    static const std::vector<std::string> names{"remove-se", "swap-activation", "fuse-mbconv",
                                                "fuse-separable"};
    return names;
}

// Runs the whole inference-friendly recipe in order: strip squeeze-excitation,
// swap SiLU for ReLU, fuse inverted bottlenecks, fuse separable pairs. The
// result carries no depthwise convolutions, gates, or smooth activations.
inline std::pair<Graph, std::vector<RewriteReport>> optimize_for_inference(
    const Graph& g, Shape reference = {}) {
    std::vector<RewriteReport> reports;
    RewriteResult r = rewrite_remove_se(g, reference);
    reports.push_back(r.report);
    r = rewrite_swap_activation(r.graph, ActKind::Silu, ActKind::Relu, reference);
    reports.push_back(r.report);
    r = rewrite_fuse_mbconv(r.graph, reference);
    reports.push_back(r.report);
    r = rewrite_fuse_separable(r.graph, reference);
    reports.push_back(r.report);
    return {std::move(r.graph), std::move(reports)};
}

inline RewriteResult run_rewrite_pass(const std::string& name, const Graph& g,
                                      Shape reference = {}) {
    if (name == "fuse-mbconv") return rewrite_fuse_mbconv(g, reference);
    if (name == "fuse-separable") return rewrite_fuse_separable(g, reference);
    if (name == "remove-se") return rewrite_remove_se(g, reference);
    if (name == "swap-activation")
        return rewrite_swap_activation(g, ActKind::Silu, ActKind::Relu, reference);
    std::string known;
    for (const auto& n : rewrite_pass_names()) {
        if (!known.empty()) known += ", ";
        known += n;
    }
    fail("unknown rewrite pass '", name, "'; available: ", known);
}

}  // namespace eseg

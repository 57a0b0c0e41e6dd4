#pragma once

#include <map>
#include <string>
#include <vector>

#include "eseg/graph.hpp"

namespace eseg {

enum class ConvStyle { Separable, Regular };
enum class FpnTopology { BiFpn, Fpn };

inline const char* conv_style_name(ConvStyle s) {
    return s == ConvStyle::Separable ? "separable" : "regular";
}

inline ConvStyle conv_style_from_name(const std::string& s) {
    if (s == "separable") return ConvStyle::Separable;
    if (s == "regular") return ConvStyle::Regular;
    fail("unknown conv style '", s, "'");
}

inline const char* fpn_topology_name(FpnTopology t) { return t == FpnTopology::BiFpn ? "bifpn" : "fpn"; }

inline FpnTopology fpn_topology_from_name(const std::string& s) {
    if (s == "bifpn") return FpnTopology::BiFpn;
    if (s == "fpn") return FpnTopology::Fpn;
    fail("unknown fusion topology '", s, "'");
}

struct FpnConfig {
    int min_level = 2;
    int max_level = 9;
    int channels = 96;
    int repeats = 4;
    FpnTopology topology = FpnTopology::BiFpn;
    ConvStyle conv_style = ConvStyle::Separable;
    ActKind activation = ActKind::Silu;
    double bn_eps = 1e-3;
    double bn_momentum = 0.01;
    double fuse_eps = 1e-4;
};

inline void check_fpn_config(const FpnConfig& cfg) {
    if (cfg.min_level >= cfg.max_level)
        fail("fusion levels must satisfy min < max, got [", cfg.min_level, ", ", cfg.max_level, "]");
    if (cfg.channels % 8) fail("fusion channels must be a multiple of 8, got ", cfg.channels);
    if (cfg.repeats < 1) fail("fusion repeats must be >= 1, got ", cfg.repeats);
}

// 3x3 feature conv in the configured style, then BN + activation. Separable
// keeps one BN after the pointwise conv, as in the reference decoders.
inline int emit_style_conv(GraphBuilder& b, const std::string& name, int x, int channels,
                           const FpnConfig& cfg) {
    int cur = x;
    if (cfg.conv_style == ConvStyle::Separable) {
        const int first = static_cast<int>(b.peek().nodes.size());
        const int in_ch = b.channels(x);
        cur = b.depthwise(name + "/dw", cur, 3, 1, 1);
        cur = b.conv(name + "/pw", cur, channels, 1, 1, 0);
        cur = b.batch_norm(name + "/bn", cur, cfg.bn_eps, cfg.bn_momentum);
        cur = b.activation(name + "/act", cur, cfg.activation);
        // annotated so deploy can swap the pair for one regular conv
        BlockAnnotation a;
        a.kind = "sep_conv";
        a.scope = b.scoped(name) + "/";
        a.entry = x;
        a.exit = cur;
        a.attrs = {{"in_ch", static_cast<double>(in_ch)},
                   {"out_ch", static_cast<double>(channels)},
                   {"kernel", 3.0}};
        for (int id = first; id <= cur; ++id) a.nodes.push_back(id);
        b.annotate(a);
        return cur;
    }
    cur = b.conv(name + "/conv", cur, channels, 3, 1, 1);
    cur = b.batch_norm(name + "/bn", cur, cfg.bn_eps, cfg.bn_momentum);
    return b.activation(name + "/act", cur, cfg.activation);
}

inline std::map<int, int> project_taps(GraphBuilder& b, const std::map<int, int>& taps,
                                       const FpnConfig& cfg) {
    std::map<int, int> proj;
    for (int i = cfg.min_level; i <= cfg.max_level; ++i) {
        auto it = taps.find(i);
        if (it == taps.end()) fail("fusion requires a tap at level P", i);
        const std::string name = "proj/p" + std::to_string(i);
        int cur = b.conv(name + "/conv", it->second, cfg.channels, 1, 1, 0);
        proj[i] = b.batch_norm(name + "/bn", cur, cfg.bn_eps, cfg.bn_momentum);
    }
    return proj;
}

// One bidirectional layer: top-down pass fusing each level with the upsampled
// level above, then bottom-up fusing the projection, the top-down node, and
// the downsampled level below. Fusions are fast-normalized weighted sums.
inline std::map<int, int> emit_bifpn_layer(GraphBuilder& b, const std::map<int, int>& in,
                                           const FpnConfig& cfg) {
    const int lo = cfg.min_level, hi = cfg.max_level;
    std::map<int, int> td, out;
    td[hi] = in.at(hi);
    for (int i = hi - 1; i >= lo; --i) {
        const std::string p = "p" + std::to_string(i);
        const int up = b.upsample(p + "/up", td.at(i + 1), 2, ResizeMode::Nearest);
        const int f = b.fuse(p + "/td_fuse", {in.at(i), up}, FuseMode::FastNorm, cfg.fuse_eps);
        td[i] = emit_style_conv(b, p + "/td", f, cfg.channels, cfg);
    }
    out[lo] = td.at(lo);
    for (int i = lo + 1; i <= hi; ++i) {
        const std::string p = "p" + std::to_string(i);
        const int down = b.pool(p + "/down", out.at(i - 1), PoolKind::Avg, 3, 2, 1);
        std::vector<int> srcs = i < hi ? std::vector<int>{in.at(i), td.at(i), down}
                                       : std::vector<int>{in.at(i), down};
        const int f = b.fuse(p + "/bu_fuse", std::move(srcs), FuseMode::FastNorm, cfg.fuse_eps);
        out[i] = emit_style_conv(b, p + "/bu", f, cfg.channels, cfg);
    }
    return out;
}

inline std::map<int, int> build_bifpn(GraphBuilder& b, const std::map<int, int>& taps,
                                      const FpnConfig& cfg) {
    check_fpn_config(cfg);
    b.push_scope("fpn");
    std::map<int, int> cur = project_taps(b, taps, cfg);
    for (int r = 0; r < cfg.repeats; ++r) {
        b.push_scope("l" + std::to_string(r));
        cur = emit_bifpn_layer(b, cur, cfg);
        b.pop_scope();
    }
    b.pop_scope();
    return cur;
}

// Top-down-only baseline: lateral 1x1 projections, upsample-and-add, 3x3
// smoothing conv on every fused level. The top level is projection only.
inline std::map<int, int> build_fpn(GraphBuilder& b, const std::map<int, int>& taps,
                                    const FpnConfig& cfg) {
    if (cfg.min_level == cfg.max_level) {
        // degenerate single level: lateral projection only
        b.push_scope("fpn");
        std::map<int, int> proj;
        const std::string name = "proj/p" + std::to_string(cfg.min_level);
        int cur = b.conv(name + "/conv", taps.at(cfg.min_level), cfg.channels, 1, 1, 0);
        proj[cfg.min_level] = b.batch_norm(name + "/bn", cur, cfg.bn_eps, cfg.bn_momentum);
        b.pop_scope();
        return proj;
    }
    check_fpn_config(cfg);
    b.push_scope("fpn");
    std::map<int, int> lat = project_taps(b, taps, cfg);
    std::map<int, int> out;
    out[cfg.max_level] = lat.at(cfg.max_level);
    int above = lat.at(cfg.max_level);
    for (int i = cfg.max_level - 1; i >= cfg.min_level; --i) {
        const std::string p = "p" + std::to_string(i);
        const int up = b.upsample(p + "/up", above, 2, ResizeMode::Nearest);
        const int sum = b.add(p + "/add", {lat.at(i), up});
        out[i] = emit_style_conv(b, p + "/smooth", sum, cfg.channels, cfg);
        above = out[i];
    }
    b.pop_scope();
    return out;
}

struct HeadResult {
    int logits = -1;     // full-resolution logits node
    int fuse_node = -1;  // softmax-weighted sum over levels
};

// Softmax-weighted multi-scale sum at the base level, one 3x3 feature conv,
// 1x1 classifier with bias, then bilinear upsample to input resolution. The
// head annotation covers everything up to the classifier; the final upsample
// is a separate output stage.
inline HeadResult emit_prediction_head(GraphBuilder& b, const std::map<int, int>& levels,
                                       const FpnConfig& cfg, int num_classes) {
    if (num_classes < 2) fail("prediction head needs at least 2 classes, got ", num_classes);
    const int target = cfg.min_level;
    b.push_scope("head");
    const int first = static_cast<int>(b.peek().nodes.size());
    std::vector<int> ups;
    for (int i = cfg.min_level; i <= cfg.max_level; ++i) {
        auto it = levels.find(i);
        if (it == levels.end()) fail("prediction head missing decoder level P", i);
        int x = it->second;
        if (i > target)
            x = b.upsample("up_p" + std::to_string(i), x, 1 << (i - target), ResizeMode::Bilinear);
        ups.push_back(x);
    }
    const int fused = b.fuse("fuse", std::move(ups), FuseMode::Softmax);
    const int feat = emit_style_conv(b, "conv", fused, cfg.channels, cfg);
    const int cls = b.conv("classifier", feat, num_classes, 1, 1, 0);
    const int cls_b = b.bias_add("classifier_bias", cls);

    BlockAnnotation head;
    head.kind = "head";
    head.scope = b.scoped("");
    head.entry = levels.at(cfg.min_level);
    head.exit = cls_b;
    head.attrs = {{"target_level", static_cast<double>(target)},
                  {"num_classes", static_cast<double>(num_classes)}};
    head.roles["fuse"] = fused;
    for (int id = first; id <= cls_b; ++id) head.nodes.push_back(id);
    b.annotate(head);

    const int logits = b.upsample("logits", cls_b, 1 << target, ResizeMode::Bilinear);
    BlockAnnotation up;
    up.kind = "output_upsample";
    up.scope = b.scoped("");
    up.entry = cls_b;
    up.exit = logits;
    up.nodes = {logits};
    b.annotate(up);
    b.pop_scope();
    return {logits, fused};
}

struct FoldResult {
    Graph graph;
    std::string dropped_param;
    std::vector<double> coeffs;
};

// Bakes the trained softmax over head weights into fixed convex coefficients.
// Topology and every other parameter name are unchanged, so the folded graph
// runs against the same store.
inline FoldResult fold_head_softmax(const Graph& g, const ParamStore& store) {
    const BlockAnnotation* head = nullptr;
    for (const auto& a : g.blocks)
        if (a.kind == "head") head = &a;
    if (!head) fail("graph has no head annotation to fold");
    const int fuse_id = head->roles.at("fuse");
    FoldResult r;
    r.graph = g;
    Node& node = r.graph.nodes[static_cast<std::size_t>(fuse_id)];
    if (node.kind != OpKind::FuseWeighted) fail("head fuse role is not a fusion node");
    if (node.attrs.fuse == FuseMode::Fixed) {
        r.coeffs = node.attrs.coeffs;  // already folded
        return r;
    }
    const Tensor& w = store.get(node.params.at(0));
    std::vector<double> raw(static_cast<std::size_t>(w.elems()));
    for (std::int64_t i = 0; i < w.elems(); ++i) raw[static_cast<std::size_t>(i)] = w.item(i);
    r.coeffs = fuse_coeffs(node.attrs.fuse, raw, node.attrs.eps);
    r.dropped_param = node.params.at(0);
    node.attrs.fuse = FuseMode::Fixed;
    node.attrs.coeffs = r.coeffs;
    node.params.clear();
    r.graph.params.erase(r.dropped_param);
    return r;
}

}  // namespace eseg

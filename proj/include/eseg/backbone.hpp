#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "eseg/graph.hpp"

namespace eseg {

enum class BlockKind { MBConv, FusedMBConv };

inline const char* block_kind_name(BlockKind k) {
    return k == BlockKind::MBConv ? "mbconv" : "fused_mbconv";
}

inline BlockKind block_kind_from_name(const std::string& s) {
    if (s == "mbconv") return BlockKind::MBConv;
    if (s == "fused_mbconv") return BlockKind::FusedMBConv;
    fail("unknown block kind '", s, "'");
}

struct BlockSpec {
    BlockKind kind = BlockKind::MBConv;
    double expansion = 1.0;
    int kernel = 3;
    int stride = 1;
    double se_ratio = 0.0;  // 0 disables squeeze-excitation
    int in_ch = 0;
    int out_ch = 0;
    int repeats = 1;
};

struct BackboneConfig {
    std::vector<BlockSpec> stage_table;
    double width_mult = 1.0;
    double depth_mult = 1.0;
    int stem_ch = 32;
    ActKind activation = ActKind::Silu;
    double bn_eps = 1e-3;
    double bn_momentum = 0.01;
};

// Width scaling: round to the nearest multiple of 8, floor 8, bumped up one
// step when plain rounding would lose more than 10%.
inline int round_filters(int base, double width_mult) {
    const double f = base * width_mult;
    int out = std::max(8, static_cast<int>(f + 4.0) / 8 * 8);
    if (out < 0.9 * f) out += 8;
    return out;
}

inline int round_repeats(int base, double depth_mult) {
    return static_cast<int>(std::ceil(base * depth_mult));
}

// Seven-stage base table with the classic layout: strides 1,2,2,2,1,2,1 give
// cumulative strides 2..32 after the stride-2 stem.
inline std::vector<BlockSpec> default_stage_table(BlockKind kind, double se_ratio) {
    const int widths[7] = {16, 24, 40, 80, 112, 192, 320};
    const int repeats[7] = {1, 2, 2, 3, 3, 4, 1};
    const int kernels[7] = {3, 3, 5, 3, 5, 5, 3};
    const int strides[7] = {1, 2, 2, 2, 1, 2, 1};
    std::vector<BlockSpec> table(7);
    int in_ch = 32;
    for (int i = 0; i < 7; ++i) {
        table[static_cast<std::size_t>(i)] = BlockSpec{
            kind,     i == 0 ? 1.0 : 6.0, kernels[i], strides[i], se_ratio,
            in_ch,    widths[i],          repeats[i]};
        in_ch = widths[i];
    }
    return table;
}

struct BlockParams {
    BlockKind kind = BlockKind::MBConv;
    int in_ch = 0;
    int out_ch = 0;
    double expansion = 1.0;
    int kernel = 3;
    int stride = 1;
    int se_ch = 0;  // 0 disables SE
    ActKind act = ActKind::Silu;
    double bn_eps = 1e-3;
    double bn_momentum = 0.01;
};

// Squeeze-excitation: global pool, bottleneck 1x1 convs (with bias), sigmoid
// gate multiplied back onto the input. Annotated so deploy can excise it.
inline int emit_se(GraphBuilder& b, int x, int channels, int se_ch, ActKind act) {
    const int first = static_cast<int>(b.peek().nodes.size());
    b.push_scope("se");
    const int pooled = b.global_avg_pool("pool", x);
    const int reduce = b.conv("reduce", pooled, se_ch, 1, 1, 0);
    const int reduce_b = b.bias_add("reduce_bias", reduce);
    const int mid = b.activation("act", reduce_b, act);
    const int expand = b.conv("expand", mid, channels, 1, 1, 0);
    const int expand_b = b.bias_add("expand_bias", expand);
    const int gate = b.activation("gate", expand_b, ActKind::Sigmoid);
    const int out = b.mul("scale", x, gate);
    BlockAnnotation a;
    a.kind = "se";
    a.scope = b.scoped("");
    a.entry = x;
    a.exit = out;
    a.attrs["channels"] = channels;
    a.attrs["se_channels"] = se_ch;
    a.attrs["ratio"] = static_cast<double>(se_ch) / channels;
    for (int id = first; id <= out; ++id) a.nodes.push_back(id);
    b.annotate(a);
    b.pop_scope();
    return out;
}

// Inverted bottleneck: 1x1 expand, depthwise k x k, optional SE, linear 1x1
// projection; residual when the block keeps resolution and channel count.
inline int emit_mbconv(GraphBuilder& b, int x, const BlockParams& p) {
    const int first = static_cast<int>(b.peek().nodes.size());
    const int mid = static_cast<int>(p.in_ch * p.expansion);
    int cur = x;
    if (mid != p.in_ch) {
        cur = b.conv("expand", cur, mid, 1, 1, 0);
        cur = b.batch_norm("expand_bn", cur, p.bn_eps, p.bn_momentum);
        cur = b.activation("expand_act", cur, p.act);
    }
    cur = b.depthwise("dw", cur, p.kernel, p.stride, p.kernel / 2);
    cur = b.batch_norm("dw_bn", cur, p.bn_eps, p.bn_momentum);
    cur = b.activation("dw_act", cur, p.act);
    if (p.se_ch > 0) cur = emit_se(b, cur, mid, p.se_ch, p.act);
    cur = b.conv("project", cur, p.out_ch, 1, 1, 0);
    cur = b.batch_norm("project_bn", cur, p.bn_eps, p.bn_momentum);
    if (p.stride == 1 && p.in_ch == p.out_ch) cur = b.add("residual", {x, cur});
    BlockAnnotation a;
    a.kind = "mbconv";
    a.scope = b.scoped("");
    a.entry = x;
    a.exit = cur;
    a.attrs = {{"in_ch", static_cast<double>(p.in_ch)},
               {"out_ch", static_cast<double>(p.out_ch)},
               {"expansion", p.expansion},
               {"kernel", static_cast<double>(p.kernel)},
               {"stride", static_cast<double>(p.stride)},
               {"se_ch", static_cast<double>(p.se_ch)}};
    for (int id = first; id <= cur; ++id) a.nodes.push_back(id);
    b.annotate(a);
    return cur;
}

// Regular k x k expand followed by a linear 1x1 projection; collapses to one
// conv when the expansion ratio is 1.
inline int emit_fused_mbconv(GraphBuilder& b, int x, const BlockParams& p) {
    const int first = static_cast<int>(b.peek().nodes.size());
    const int mid = static_cast<int>(p.in_ch * p.expansion);
    int cur = x;
    if (mid != p.in_ch) {
        cur = b.conv("expand", cur, mid, p.kernel, p.stride, p.kernel / 2);
        cur = b.batch_norm("expand_bn", cur, p.bn_eps, p.bn_momentum);
        cur = b.activation("expand_act", cur, p.act);
        if (p.se_ch > 0) cur = emit_se(b, cur, mid, p.se_ch, p.act);
        cur = b.conv("project", cur, p.out_ch, 1, 1, 0);
        cur = b.batch_norm("project_bn", cur, p.bn_eps, p.bn_momentum);
    } else {
        if (p.se_ch > 0) fail("fused block with expansion 1 cannot carry SE");
        cur = b.conv("conv", cur, p.out_ch, p.kernel, p.stride, p.kernel / 2);
        cur = b.batch_norm("bn", cur, p.bn_eps, p.bn_momentum);
        cur = b.activation("act", cur, p.act);
    }
    if (p.stride == 1 && p.in_ch == p.out_ch) cur = b.add("residual", {x, cur});
    BlockAnnotation a;
    a.kind = "fused_mbconv";
    a.scope = b.scoped("");
    a.entry = x;
    a.exit = cur;
    a.attrs = {{"in_ch", static_cast<double>(p.in_ch)},
               {"out_ch", static_cast<double>(p.out_ch)},
               {"expansion", p.expansion},
               {"kernel", static_cast<double>(p.kernel)},
               {"stride", static_cast<double>(p.stride)},
               {"se_ch", static_cast<double>(p.se_ch)}};
    for (int id = first; id <= cur; ++id) a.nodes.push_back(id);
    b.annotate(a);
    return cur;
}

inline int emit_block(GraphBuilder& b, int x, const BlockParams& p) {
    return p.kind == BlockKind::MBConv ? emit_mbconv(b, x, p) : emit_fused_mbconv(b, x, p);
}

// Builds the scaled encoder and returns tap nodes P1..P5 (the last block of
// each stride regime).
inline std::map<int, int> build_backbone(GraphBuilder& b, int input, const BackboneConfig& cfg) {
    if (cfg.stage_table.empty()) fail("backbone stage table is empty");
    b.push_scope("enc");
    const int stem_ch = round_filters(cfg.stem_ch, cfg.width_mult);
    int cur = b.conv("stem/conv", input, stem_ch, 3, 2, 1);
    cur = b.batch_norm("stem/bn", cur, cfg.bn_eps, cfg.bn_momentum);
    cur = b.activation("stem/act", cur, cfg.activation);

    std::map<int, int> taps;
    int stride_total = 2;
    int in_ch = stem_ch;
    const auto& table = cfg.stage_table;
    for (std::size_t si = 0; si < table.size(); ++si) {
        const BlockSpec& spec = table[si];
        const int out_ch = round_filters(spec.out_ch, cfg.width_mult);
        const int repeats = round_repeats(spec.repeats, cfg.depth_mult);
        b.push_scope("s" + std::to_string(si + 1));
        for (int r = 0; r < repeats; ++r) {
            BlockParams p;
            p.kind = spec.kind;
            p.in_ch = in_ch;
            p.out_ch = out_ch;
            p.expansion = spec.expansion;
            p.kernel = spec.kernel;
            p.stride = r == 0 ? spec.stride : 1;
            if (spec.se_ratio > 0.0)
                p.se_ch = std::max(1, static_cast<int>(in_ch * spec.se_ratio));
            p.act = cfg.activation;
            p.bn_eps = cfg.bn_eps;
            p.bn_momentum = cfg.bn_momentum;
            b.push_scope("b" + std::to_string(r));
            cur = emit_block(b, cur, p);
            b.pop_scope();
            in_ch = out_ch;
            if (r == 0) stride_total *= spec.stride;
        }
        b.pop_scope();
        const bool regime_ends =
            si + 1 == table.size() || table[si + 1].stride == 2;
        if (regime_ends) {
            int level = 0;
            for (int s = stride_total; s > 1; s /= 2) ++level;
            if ((1 << level) != stride_total)
                fail("stage table produced non power-of-two stride ", stride_total);
            taps[level] = cur;
        }
    }
    b.pop_scope();
    if (!taps.count(5)) fail("stage table strides do not reach 32 (P5)");
    return taps;
}

// Extends P5 to deeper levels with stride-2 average pooling (no parameters).
inline void extend_pyramid(GraphBuilder& b, std::map<int, int>& taps, int max_level,
                           PoolKind pool = PoolKind::Avg) {
    if (max_level < 6 || max_level > 9)
        fail("pyramid extension level must be in [6, 9], got ", max_level);
    if (!taps.count(5)) fail("pyramid extension requires a P5 tap");
    int cur = taps.at(5);
    for (int level = 6; level <= max_level; ++level) {
        cur = b.pool("p" + std::to_string(level), cur, pool, 3, 2, 1);
        taps[level] = cur;
    }
}

}  // namespace eseg

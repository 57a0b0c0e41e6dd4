#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "eseg/backbone.hpp"
#include "eseg/cost.hpp"
#include "eseg/fusion.hpp"
#include "eseg/graph.hpp"

namespace eseg {

struct ModelConfig {
    std::string name = "custom";
    // encoder
    double width_mult = 1.0;
    double depth_mult = 1.0;
    BlockKind block_kind = BlockKind::MBConv;
    double se_ratio = 0.25;  // 0 disables SE
    ActKind activation = ActKind::Silu;
    int stem_ch = 32;
    // decoder + head
    int channels = 96;
    int repeats = 4;
    FpnTopology topology = FpnTopology::BiFpn;
    ConvStyle conv_style = ConvStyle::Separable;
    int min_level = 2;
    int max_level = 9;
    int num_classes = 19;
    // norm
    double bn_eps = 1e-3;
    double bn_momentum = 0.01;
};

inline void check_model_config(const ModelConfig& cfg) {
    if (cfg.min_level < 2 || cfg.min_level > 3)
        fail("model base level must be 2 or 3, got ", cfg.min_level);
    if (cfg.max_level < 5 || cfg.max_level > 9)
        fail("model max level must be in [5, 9], got ", cfg.max_level);
    if (cfg.min_level >= cfg.max_level) fail("model needs min_level < max_level");
    if (cfg.num_classes < 2) fail("model needs at least 2 classes");
}

inline BackboneConfig backbone_config(const ModelConfig& cfg) {
    BackboneConfig bc;
    bc.stage_table = default_stage_table(cfg.block_kind, cfg.se_ratio);
    bc.width_mult = cfg.width_mult;
    bc.depth_mult = cfg.depth_mult;
    bc.stem_ch = cfg.stem_ch;
    bc.activation = cfg.activation;
    bc.bn_eps = cfg.bn_eps;
    bc.bn_momentum = cfg.bn_momentum;
    return bc;
}

inline FpnConfig fpn_config(const ModelConfig& cfg) {
    FpnConfig fc;
    fc.min_level = cfg.min_level;
    fc.max_level = cfg.max_level;
    fc.channels = cfg.channels;
    fc.repeats = cfg.repeats;
    fc.topology = cfg.topology;
    fc.conv_style = cfg.conv_style;
    fc.activation = cfg.activation;
    fc.bn_eps = cfg.bn_eps;
    fc.bn_momentum = cfg.bn_momentum;
    return fc;
}

// Full segmentation network: encoder taps P1..P5, pooled extension to
// max_level, fusion decoder over [min_level, max_level], multi-scale head.
// Output "logits" is at input resolution.
inline Graph build_model(const ModelConfig& cfg) {
    check_model_config(cfg);
    GraphBuilder b(1 << cfg.max_level);
    const int image = b.input("image", 3);
    auto taps = build_backbone(b, image, backbone_config(cfg));
    if (cfg.max_level > 5) extend_pyramid(b, taps, cfg.max_level);
    std::map<int, int> decoder_taps;
    for (int i = cfg.min_level; i <= cfg.max_level; ++i) decoder_taps[i] = taps.at(i);
    const FpnConfig fc = fpn_config(cfg);
    const auto outs = cfg.topology == FpnTopology::BiFpn ? build_bifpn(b, decoder_taps, fc)
                                                         : build_fpn(b, decoder_taps, fc);
    const HeadResult head = emit_prediction_head(b, outs, fc, cfg.num_classes);
    b.mark_output("logits", head.logits);
    return b.finish();
}

// Encoder-plus-pyramid-only graph with each level exported, for ablations.
inline Graph build_pyramid_graph(const ModelConfig& cfg) {
    GraphBuilder b(1 << cfg.max_level);
    const int image = b.input("image", 3);
    auto taps = build_backbone(b, image, backbone_config(cfg));
    if (cfg.max_level > 5) extend_pyramid(b, taps, cfg.max_level);
    for (const auto& [level, id] : taps) b.mark_output("p" + std::to_string(level), id);
    return b.finish();
}

// Structural identity: op kinds, attributes, wiring, and outputs; node and
// parameter names are deliberately excluded.
inline std::string topology_signature(const Graph& g) {
    std::ostringstream os;
    for (const Node& n : g.nodes) {
        os << op_kind_name(n.kind) << '[';
        os << 'k' << n.attrs.kernel << 's' << n.attrs.stride << 'p' << n.attrs.padding;
        os << 'o' << n.attrs.out_channels << 'c' << n.attrs.channels << 'f' << n.attrs.scale;
        os << pool_kind_name(n.attrs.pool)[0] << act_kind_name(n.attrs.act)
           << resize_mode_name(n.attrs.resize)[0] << fuse_mode_name(n.attrs.fuse)[0];
        os << 'e' << n.attrs.eps << 'm' << n.attrs.momentum;
        for (double c : n.attrs.coeffs) os << '~' << c;
        os << "](";
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            if (i) os << ',';
            os << n.inputs[i];
        }
        os << ");";
    }
    os << "out:";
    for (const auto& [name, id] : g.outputs) os << name << '=' << id << ';';
    os << "div:" << g.divisibility;
    return os.str();
}

inline std::uint64_t topology_hash(const Graph& g) {
    const std::string s = topology_signature(g);
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// The six published size tiers. Regular tiers pair MBConv encoders with
// separable decoder convs; Lite tiers build GPU-friendly graphs natively.
inline std::vector<ModelConfig> model_zoo() {
    auto lite = [](const std::string& name, double w, double d, int ch, int rep) {
        ModelConfig m;
        m.name = name;
        m.width_mult = w;
        m.depth_mult = d;
        m.block_kind = BlockKind::FusedMBConv;
        m.se_ratio = 0.0;
        m.activation = ActKind::Relu;
        m.channels = ch;
        m.repeats = rep;
        m.conv_style = ConvStyle::Regular;
        m.min_level = 3;
        return m;
    };
    auto regular = [](const std::string& name, double w, double d, int ch, int rep) {
        ModelConfig m;
        m.name = name;
        m.width_mult = w;
        m.depth_mult = d;
        m.channels = ch;
        m.repeats = rep;
        return m;
    };
    return {
        lite("eseg-lite-s", 0.4, 0.6, 64, 1), lite("eseg-lite-m", 0.6, 1.0, 80, 2),
        lite("eseg-lite-l", 1.0, 1.0, 96, 3), regular("eseg-s", 1.0, 1.1, 96, 4),
        regular("eseg-m", 1.4, 1.8, 192, 5),  regular("eseg-l", 2.0, 3.1, 288, 6),
    };
}

inline ModelConfig zoo_entry(const std::string& name) {
    for (const auto& m : model_zoo())
        if (m.name == name) return m;
    std::string names;
    for (const auto& m : model_zoo()) {
        if (!names.empty()) names += ", ";
        names += m.name;
    }
    fail("unknown model '", name, "'; available: ", names);
}

// FLOPs attributed to annotated head blocks (the fused multi-scale sum, the
// feature conv, and the classifier). The final full-resolution upsample is an
// output stage with a cost independent of head placement, so it is excluded.
inline std::int64_t head_flops(const Graph& g, const std::map<std::string, Shape>& inputs) {
    const auto shapes = infer_shapes(g, inputs);
    std::int64_t total = 0;
    for (const auto& a : g.blocks) {
        if (a.kind != "head") continue;
        for (int id : a.nodes) total += node_flop_count(g, g.node(id), shapes);
    }
    return total;
}

}  // namespace eseg

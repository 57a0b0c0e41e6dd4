#include <gtest/gtest.h>

#include <map>

#include "eseg/backbone.hpp"
#include "eseg/cost.hpp"

using namespace eseg;

TEST(RoundFilters, KnownValues) {
    EXPECT_EQ(round_filters(32, 1.0), 32);
    EXPECT_EQ(round_filters(32, 0.4), 16);
    EXPECT_EQ(round_filters(8, 0.1), 8);
    EXPECT_EQ(round_filters(16, 0.4), 8);
    EXPECT_EQ(round_filters(24, 0.4), 16);  // 9.6 rounds to 8, losing >10%, bumped
    EXPECT_EQ(round_filters(320, 2.0), 640);
    EXPECT_EQ(round_filters(112, 1.4), 160);
}

TEST(RoundFilters, BumpsWhenRoundingLosesMoreThanTenPercent) {
    // 10 rounds down to 8, a 20% loss, so the result moves up a step.
    EXPECT_EQ(round_filters(10, 1.0), 16);
    // 12 rounds up to 16 already.
    EXPECT_EQ(round_filters(12, 1.0), 16);
}

TEST(RoundFilters, AlwaysPositiveMultipleOfEight) {
    const double mults[] = {0.1, 0.25, 0.4, 0.6, 1.0, 1.1, 1.4, 2.0, 3.7};
    for (int base = 1; base <= 400; ++base) {
        for (double m : mults) {
            const int out = round_filters(base, m);
            ASSERT_GE(out, 8) << base << " x " << m;
            ASSERT_EQ(out % 8, 0) << base << " x " << m;
            ASSERT_GE(out + 4, base * m * 0.9) << base << " x " << m;
        }
    }
}

TEST(RoundRepeats, KnownValues) {
    EXPECT_EQ(round_repeats(3, 1.0), 3);
    EXPECT_EQ(round_repeats(3, 1.1), 4);
    EXPECT_EQ(round_repeats(4, 0.6), 3);
    EXPECT_EQ(round_repeats(1, 3.1), 4);
    EXPECT_EQ(round_repeats(2, 1.8), 4);
}

TEST(StageTable, BaseLayout) {
    const auto table = default_stage_table(BlockKind::MBConv, 0.25);
    ASSERT_EQ(table.size(), 7u);
    const int widths[7] = {16, 24, 40, 80, 112, 192, 320};
    const int repeats[7] = {1, 2, 2, 3, 3, 4, 1};
    const int kernels[7] = {3, 3, 5, 3, 5, 5, 3};
    const int strides[7] = {1, 2, 2, 2, 1, 2, 1};
    int in_ch = 32;
    for (int i = 0; i < 7; ++i) {
        const BlockSpec& s = table[static_cast<std::size_t>(i)];
        EXPECT_EQ(s.out_ch, widths[i]) << "stage " << i + 1;
        EXPECT_EQ(s.repeats, repeats[i]) << "stage " << i + 1;
        EXPECT_EQ(s.kernel, kernels[i]) << "stage " << i + 1;
        EXPECT_EQ(s.stride, strides[i]) << "stage " << i + 1;
        EXPECT_DOUBLE_EQ(s.expansion, i == 0 ? 1.0 : 6.0) << "stage " << i + 1;
        EXPECT_DOUBLE_EQ(s.se_ratio, 0.25) << "stage " << i + 1;
        EXPECT_EQ(s.in_ch, in_ch) << "stage " << i + 1;
        in_ch = s.out_ch;
    }
}

namespace {

struct Built {
    Graph graph;
    std::map<int, int> taps;
};

Built make_backbone(const BackboneConfig& cfg) {
    GraphBuilder b;
    const int image = b.input("image", 3);
    auto taps = build_backbone(b, image, cfg);
    for (const auto& [level, id] : taps) b.mark_output("p" + std::to_string(level), id);
    return {b.finish(), taps};
}

BackboneConfig regular_cfg(double w, double d) {
    BackboneConfig cfg;
    cfg.stage_table = default_stage_table(BlockKind::MBConv, 0.25);
    cfg.width_mult = w;
    cfg.depth_mult = d;
    return cfg;
}

BackboneConfig lite_cfg(double w, double d) {
    BackboneConfig cfg;
    cfg.stage_table = default_stage_table(BlockKind::FusedMBConv, 0.0);
    cfg.width_mult = w;
    cfg.depth_mult = d;
    cfg.activation = ActKind::Relu;
    return cfg;
}

}  // namespace

TEST(Backbone, TapLevelsAndStrides) {
    const Built built = make_backbone(regular_cfg(1.0, 1.0));
    ASSERT_EQ(built.taps.size(), 5u);
    const auto shapes =
        infer_shapes(built.graph, single_input_shapes(built.graph, {1, 3, 512, 512}));
    for (int level = 1; level <= 5; ++level) {
        ASSERT_TRUE(built.taps.count(level));
        const Shape s = shapes[static_cast<std::size_t>(built.taps.at(level))];
        EXPECT_EQ(s.h, 512 >> level) << "P" << level;
        EXPECT_EQ(s.w, 512 >> level) << "P" << level;
    }
    EXPECT_EQ(shapes[static_cast<std::size_t>(built.taps.at(5))].h, 16);
}

TEST(Backbone, TapChannelsFollowWidthRounding) {
    const int base[5] = {16, 24, 40, 112, 320};  // stages 1, 2, 3, 5, 7
    for (double w : {0.4, 0.6, 1.0, 1.4, 2.0}) {
        const Built built = make_backbone(regular_cfg(w, 1.0));
        for (int level = 1; level <= 5; ++level) {
            EXPECT_EQ(node_channels(built.graph, built.taps.at(level)),
                      round_filters(base[level - 1], w))
                << "P" << level << " at width " << w;
        }
    }
}

TEST(Backbone, DepthScalingChangesBlockCount) {
    auto count_blocks = [](const Graph& g) {
        int n = 0;
        for (const auto& a : g.blocks)
            if (a.kind == "mbconv" || a.kind == "fused_mbconv") ++n;
        return n;
    };
    EXPECT_EQ(count_blocks(make_backbone(regular_cfg(1.0, 1.0)).graph), 16);
    // ceil scaling per stage at depth 1.8: 2,4,4,6,6,8,2
    EXPECT_EQ(count_blocks(make_backbone(regular_cfg(1.0, 1.8)).graph), 32);
}

TEST(Backbone, SqueezeExcitationBottleneckShapes) {
    GraphBuilder b;
    const int x = b.input("x", 64);
    BlockParams p;
    p.kind = BlockKind::MBConv;
    p.in_ch = 64;
    p.out_ch = 64;
    p.expansion = 1.0;
    p.se_ch = 16;  // quarter of the 64 input channels
    b.mark_output("y", emit_mbconv(b, x, p));
    const Graph g = b.finish();
    const auto shapes = infer_shapes(g, single_input_shapes(g, {2, 64, 8, 8}));
    int reduce = -1, expand = -1, scale = -1;
    for (const Node& n : g.nodes) {
        if (n.name == "se/reduce") reduce = n.id;
        if (n.name == "se/expand") expand = n.id;
        if (n.name == "se/scale") scale = n.id;
    }
    ASSERT_GE(reduce, 0);
    ASSERT_GE(expand, 0);
    ASSERT_GE(scale, 0);
    EXPECT_EQ(shapes[static_cast<std::size_t>(reduce)], (Shape{2, 16, 1, 1}));
    EXPECT_EQ(shapes[static_cast<std::size_t>(expand)], (Shape{2, 64, 1, 1}));
    EXPECT_EQ(shapes[static_cast<std::size_t>(scale)], (Shape{2, 64, 8, 8}));
    // the bottleneck convs carry biases; the block records its gating ratio
    bool found = false;
    for (const auto& a : g.blocks) {
        if (a.kind != "se") continue;
        found = true;
        EXPECT_DOUBLE_EQ(a.attrs.at("ratio"), 0.25);
        EXPECT_EQ(static_cast<int>(a.attrs.at("se_channels")), 16);
    }
    EXPECT_TRUE(found);
}

TEST(Backbone, LiteGraphsHaveNoMBConvNoSqueezeExcitation) {
    const Built built = make_backbone(lite_cfg(0.4, 0.6));
    int mb = 0, fused = 0, se = 0;
    for (const auto& a : built.graph.blocks) {
        if (a.kind == "mbconv") ++mb;
        if (a.kind == "fused_mbconv") ++fused;
        if (a.kind == "se") ++se;
    }
    EXPECT_EQ(mb, 0);
    EXPECT_EQ(se, 0);
    EXPECT_GT(fused, 0);
    for (const Node& n : built.graph.nodes) {
        EXPECT_NE(n.kind, OpKind::DepthwiseConv2d) << n.name;
        if (n.kind == OpKind::Activation) EXPECT_NE(n.attrs.act, ActKind::Silu) << n.name;
    }
}

TEST(Backbone, RegularGraphsUseDepthwiseAndGating) {
    const Built built = make_backbone(regular_cfg(1.0, 1.0));
    int dw = 0, mul = 0;
    for (const Node& n : built.graph.nodes) {
        if (n.kind == OpKind::DepthwiseConv2d) ++dw;
        if (n.kind == OpKind::Mul) ++mul;
    }
    EXPECT_EQ(dw, 16);   // one per block
    EXPECT_EQ(mul, 16);  // one SE gate per block
}

TEST(Backbone, ResidualOnlyWhenShapePreserved) {
    const Built built = make_backbone(regular_cfg(1.0, 1.0));
    for (const auto& a : built.graph.blocks) {
        if (a.kind != "mbconv") continue;
        const bool has_residual =
            built.graph.node(a.exit).kind == OpKind::Add;
        const bool preserved = static_cast<int>(a.attrs.at("stride")) == 1 &&
                               a.attrs.at("in_ch") == a.attrs.at("out_ch");
        EXPECT_EQ(has_residual, preserved) << a.scope;
    }
}

TEST(Backbone, ProjectionStageIsLinear) {
    // the 1x1 projection ends with plain batch norm, never an activation
    const Built built = make_backbone(regular_cfg(1.0, 1.0));
    for (const Node& n : built.graph.nodes) {
        if (n.kind != OpKind::Activation) continue;
        const Node& src = built.graph.node(n.inputs.at(0));
        if (src.kind != OpKind::BatchNorm) continue;
        const Node& pre = built.graph.node(src.inputs.at(0));
        EXPECT_EQ(pre.name.find("project"), std::string::npos) << pre.name;
    }
}

TEST(Backbone, FusedExpansionOneIsSingleConv) {
    GraphBuilder b;
    const int x = b.input("x", 16);
    BlockParams p;
    p.kind = BlockKind::FusedMBConv;
    p.in_ch = 16;
    p.out_ch = 24;
    p.expansion = 1.0;
    p.act = ActKind::Relu;
    b.mark_output("y", emit_fused_mbconv(b, x, p));
    const Graph g = b.finish();
    int convs = 0;
    for (const Node& n : g.nodes)
        if (n.kind == OpKind::Conv2d) ++convs;
    EXPECT_EQ(convs, 1);

    BlockParams bad = p;
    bad.se_ch = 4;
    GraphBuilder b2;
    const int x2 = b2.input("x", 16);
    EXPECT_THROW(emit_fused_mbconv(b2, x2, bad), Error);
}

TEST(ExtendPyramid, HalvesResolutionPerLevel) {
    GraphBuilder b;
    const int image = b.input("image", 3);
    auto taps = build_backbone(b, image, regular_cfg(1.0, 1.0));
    const std::int64_t params_before = count_params(b.peek());
    extend_pyramid(b, taps, 9);
    for (int level = 5; level <= 9; ++level)
        b.mark_output("p" + std::to_string(level), taps.at(level));
    const Graph g = b.finish();
    EXPECT_EQ(count_params(g), params_before);  // pooling adds no parameters
    const auto shapes = infer_shapes(g, single_input_shapes(g, {1, 3, 512, 512}));
    const int c5 = node_channels(g, taps.at(5));
    for (int level = 6; level <= 9; ++level) {
        const Shape s = shapes[static_cast<std::size_t>(taps.at(level))];
        EXPECT_EQ(s.h, 512 >> level) << "P" << level;
        EXPECT_EQ(s.w, 512 >> level) << "P" << level;
        EXPECT_EQ(s.c, c5) << "P" << level;
    }
}

TEST(ExtendPyramid, AveragePoolingPreservesConstants) {
    GraphBuilder b;
    const int x = b.input("x", 4);
    std::map<int, int> taps{{5, x}};
    extend_pyramid(b, taps, 9);
    b.mark_output("p9", taps.at(9));
    const Graph g = b.finish();
    ParamStore store;
    const Tensor in = Tensor::filled({1, 4, 16, 16}, DType::F64, 0.625);
    const Tensor out = forward(g, store, {{"x", in}}).at("p9");
    EXPECT_EQ(out.shape(), (Shape{1, 4, 1, 1}));
    for (std::int64_t i = 0; i < out.elems(); ++i) EXPECT_DOUBLE_EQ(out.item(i), 0.625);
}

TEST(ExtendPyramid, RejectsBadLevels) {
    GraphBuilder b;
    const int x = b.input("x", 4);
    std::map<int, int> taps{{5, x}};
    EXPECT_THROW(extend_pyramid(b, taps, 5), Error);
    EXPECT_THROW(extend_pyramid(b, taps, 10), Error);
    std::map<int, int> no_p5{{4, x}};
    EXPECT_THROW(extend_pyramid(b, no_p5, 7), Error);
}

TEST(Backbone, EmptyStageTableRejected) {
    GraphBuilder b;
    const int image = b.input("image", 3);
    BackboneConfig cfg;
    EXPECT_THROW(build_backbone(b, image, cfg), Error);
}

#include <gtest/gtest.h>

#include <set>
#include <string>
#include <vector>

#include "eseg/deploy.hpp"

using namespace eseg;

namespace {

// one annotated encoder block under a scope, the way build_backbone emits them
Graph block_graph(BlockParams p, BlockKind kind = BlockKind::MBConv) {
    p.kind = kind;
    GraphBuilder b;
    const int image = b.input("image", p.in_ch);
    b.push_scope("b0");
    const int out = emit_block(b, image, p);
    b.pop_scope();
    b.mark_output("out", out);
    return b.finish();
}

BlockParams plain_mbconv() {
    BlockParams p;
    p.in_ch = 32;
    p.out_ch = 32;
    p.expansion = 4.0;
    p.kernel = 3;
    p.stride = 1;
    p.se_ch = 0;
    return p;
}

int count_kind(const Graph& g, OpKind k) {
    int n = 0;
    for (const Node& node : g.nodes)
        if (node.kind == k) ++n;
    return n;
}

int count_act(const Graph& g, ActKind a) {
    int n = 0;
    for (const Node& node : g.nodes)
        if (node.kind == OpKind::Activation && node.attrs.act == a) ++n;
    return n;
}

int count_blocks(const Graph& g, const std::string& kind) {
    int n = 0;
    for (const BlockAnnotation& a : g.blocks)
        if (a.kind == kind) ++n;
    return n;
}

std::int64_t conv_weight_params(const Graph& g) {
    std::int64_t total = 0;
    for (const Node& n : g.nodes)
        if (n.kind == OpKind::Conv2d || n.kind == OpKind::DepthwiseConv2d)
            for (const auto& name : n.params) total += g.params.at(name).shape.elems();
    return total;
}

testing::AssertionResult graphs_identical(const Graph& a, const Graph& b) {
    if (a.nodes.size() != b.nodes.size())
        return testing::AssertionFailure()
               << "node counts differ: " << a.nodes.size() << " vs " << b.nodes.size();
    for (std::size_t i = 0; i < a.nodes.size(); ++i) {
        const Node& x = a.nodes[i];
        const Node& y = b.nodes[i];
        if (x.name != y.name || x.kind != y.kind || x.inputs != y.inputs ||
            x.params != y.params || x.buffers != y.buffers)
            return testing::AssertionFailure() << "node " << i << " differs: '" << x.name
                                               << "' vs '" << y.name << "'";
        if (x.attrs.kernel != y.attrs.kernel || x.attrs.stride != y.attrs.stride ||
            x.attrs.padding != y.attrs.padding || x.attrs.act != y.attrs.act ||
            x.attrs.out_channels != y.attrs.out_channels)
            return testing::AssertionFailure() << "node " << i << " attrs differ";
    }
    if (a.outputs != b.outputs) return testing::AssertionFailure() << "outputs differ";
    if (a.blocks.size() != b.blocks.size())
        return testing::AssertionFailure()
               << "annotation counts differ: " << a.blocks.size() << " vs " << b.blocks.size();
    for (std::size_t i = 0; i < a.blocks.size(); ++i) {
        const BlockAnnotation& x = a.blocks[i];
        const BlockAnnotation& y = b.blocks[i];
        if (x.kind != y.kind || x.scope != y.scope || x.entry != y.entry || x.exit != y.exit ||
            x.attrs != y.attrs || x.roles != y.roles || x.nodes != y.nodes)
            return testing::AssertionFailure() << "annotation " << i << " differs (" << x.scope
                                               << " vs " << y.scope << ")";
    }
    auto specs_equal = [](const std::map<std::string, ParamSpec>& p,
                          const std::map<std::string, ParamSpec>& q) {
        if (p.size() != q.size()) return false;
        for (const auto& [name, spec] : p) {
            auto it = q.find(name);
            if (it == q.end() || !(it->second.shape == spec.shape) ||
                it->second.init != spec.init)
                return false;
        }
        return true;
    };
    if (!specs_equal(a.params, b.params)) return testing::AssertionFailure() << "params differ";
    if (!specs_equal(a.buffers, b.buffers))
        return testing::AssertionFailure() << "buffers differ";
    return testing::AssertionSuccess();
}

}  // namespace

TEST(FuseMbconv, RewritesBlockToSingleConv) {
    const Graph g = block_graph(plain_mbconv());
    const auto [out, report] = rewrite_fuse_mbconv(g, {1, 32, 16, 16});
    EXPECT_EQ(report.matched, 1);
    EXPECT_EQ(report.replaced, 1);
    EXPECT_TRUE(report.shapes_preserved);
    EXPECT_EQ(count_kind(out, OpKind::DepthwiseConv2d), 0);
    EXPECT_EQ(count_blocks(out, "mbconv"), 0);
    EXPECT_EQ(count_blocks(out, "fused_mbconv"), 1);
    EXPECT_EQ(count_kind(out, OpKind::Add), 1);  // residual survives

    bool found_expand = false;
    for (const Node& n : out.nodes)
        if (n.name == "b0/expand" && n.kind == OpKind::Conv2d) {
            found_expand = true;
            EXPECT_EQ(n.attrs.kernel, 3);  // the expansion conv takes over the spatial kernel
        }
    EXPECT_TRUE(found_expand);
}

TEST(FuseMbconv, ParamDeltaMatchesHandCount) {
    // e=4, k=3, 32ch: dw 3x3 on 128 (1152) + 1x1 expand (4096) become one
    // 3x3 expand (36864); conv weights grow by 31616, and the depthwise
    // norm pair (256) goes away with its conv, so the net delta is 31360.
    const Graph g = block_graph(plain_mbconv());
    const auto [out, report] = rewrite_fuse_mbconv(g, {1, 32, 16, 16});
    EXPECT_EQ(conv_weight_params(out) - conv_weight_params(g), 31616);
    EXPECT_EQ(report.param_delta, 31360);
    EXPECT_EQ(count_params(out), count_params(g) + 31360);
    EXPECT_EQ(report.flop_delta,
              count_flops(out, single_input_shapes(out, {1, 32, 16, 16})) -
                  count_flops(g, single_input_shapes(g, {1, 32, 16, 16})));
    EXPECT_GT(report.flop_delta, 0);
    EXPECT_EQ(report.reference, (Shape{1, 32, 16, 16}));
}

TEST(FuseMbconv, KeepsSqueezeExcitationWhenExpanding) {
    BlockParams p = plain_mbconv();
    p.se_ch = 8;
    const Graph g = block_graph(p);
    const auto [out, report] = rewrite_fuse_mbconv(g, {1, 32, 16, 16});
    EXPECT_EQ(report.matched, 1);
    EXPECT_TRUE(report.shapes_preserved);
    EXPECT_EQ(count_blocks(out, "se"), 1);
    EXPECT_EQ(count_act(out, ActKind::Sigmoid), 1);
    EXPECT_EQ(count_kind(out, OpKind::DepthwiseConv2d), 0);
}

TEST(FuseMbconv, ExpansionOneWithSeIsRejected) {
    BlockParams p = plain_mbconv();
    p.expansion = 1.0;
    p.se_ch = 8;
    const Graph g = block_graph(p);
    try {
        rewrite_fuse_mbconv(g, {1, 32, 16, 16});
        FAIL() << "expected a rejection";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("remove-se"), std::string::npos);
    }
}

TEST(FuseMbconv, NoMatchesLeavesGraphUntouched) {
    const Graph g = block_graph(plain_mbconv(), BlockKind::FusedMBConv);
    const auto [out, report] = rewrite_fuse_mbconv(g, {1, 32, 16, 16});
    EXPECT_EQ(report.matched, 0);
    EXPECT_EQ(report.param_delta, 0);
    EXPECT_EQ(report.flop_delta, 0);
    EXPECT_TRUE(report.shapes_preserved);
    EXPECT_TRUE(graphs_identical(g, out));
}

TEST(FuseMbconv, UnannotatedGraphIsRejected) {
    GraphBuilder b;
    const int image = b.input("image", 8);
    b.mark_output("out", b.conv("c", image, 8, 3, 1, 1));
    const Graph g = b.finish();
    EXPECT_THROW(rewrite_fuse_mbconv(g), Error);
}

TEST(FuseMbconv, Idempotent) {
    const Graph g = block_graph(plain_mbconv());
    const auto first = rewrite_fuse_mbconv(g, {1, 32, 16, 16});
    const auto second = rewrite_fuse_mbconv(first.graph, {1, 32, 16, 16});
    EXPECT_EQ(second.report.matched, 0);
    EXPECT_TRUE(graphs_identical(first.graph, second.graph));
}

TEST(FuseMbconv, ConvertsWholeEncoder) {
    BackboneConfig cfg;
    cfg.stage_table = default_stage_table(BlockKind::MBConv, 0.0);
    cfg.width_mult = 0.4;
    cfg.depth_mult = 0.5;
    GraphBuilder b;
    const int image = b.input("image", 3);
    const auto taps = build_backbone(b, image, cfg);
    for (const auto& [level, id] : taps) b.mark_output("p" + std::to_string(level), id);
    const Graph g = b.finish();
    ASSERT_GT(count_kind(g, OpKind::DepthwiseConv2d), 0);

    const auto [out, report] = rewrite_fuse_mbconv(g, {1, 3, 64, 64});
    EXPECT_EQ(report.matched, count_blocks(g, "mbconv"));
    EXPECT_EQ(count_kind(out, OpKind::DepthwiseConv2d), 0);
    EXPECT_EQ(count_blocks(out, "mbconv"), 0);
    EXPECT_TRUE(report.shapes_preserved);
}

TEST(RemoveSe, SplicesGateOut) {
    BlockParams p = plain_mbconv();
    p.se_ch = 8;
    const Graph g = block_graph(p);
    const auto [out, report] = rewrite_remove_se(g, {1, 32, 16, 16});
    EXPECT_EQ(report.matched, 1);
    EXPECT_TRUE(report.shapes_preserved);
    EXPECT_EQ(count_kind(out, OpKind::GlobalAvgPool), 0);
    EXPECT_EQ(count_kind(out, OpKind::Mul), 0);
    EXPECT_EQ(count_act(out, ActKind::Sigmoid), 0);
    EXPECT_EQ(count_blocks(out, "se"), 0);
    // two 1x1 convs of the bottleneck plus their biases, nothing else
    const std::int64_t se_params = 2 * 128 * 8 + 8 + 128;
    EXPECT_EQ(report.param_delta, -se_params);
}

TEST(RemoveSe, KeepsEveryOtherParameter) {
    BlockParams p = plain_mbconv();
    p.se_ch = 8;
    const Graph g = block_graph(p);
    const auto [out, report] = rewrite_remove_se(g, {1, 32, 16, 16});
    std::set<std::string> before, after;
    for (const auto& [name, spec] : g.params)
        if (name.find("/se/") == std::string::npos) before.insert(name);
    for (const auto& [name, spec] : out.params) after.insert(name);
    EXPECT_EQ(before, after);
}

TEST(RemoveSe, ParentAnnotationDropsSeMark) {
    BlockParams p = plain_mbconv();
    p.se_ch = 8;
    const Graph g = block_graph(p);
    const auto [out, report] = rewrite_remove_se(g, {1, 32, 16, 16});
    ASSERT_EQ(out.blocks.size(), 1u);
    const BlockAnnotation& a = out.blocks[0];
    EXPECT_EQ(a.kind, "mbconv");
    EXPECT_EQ(a.attrs.at("se_ch"), 0.0);
    for (std::size_t i = 0; i < a.nodes.size(); ++i) {
        EXPECT_LT(a.nodes[i], static_cast<int>(out.nodes.size()));
        if (i) EXPECT_GT(a.nodes[i], a.nodes[i - 1]);
    }
}

TEST(RemoveSe, SeFreeGraphUnchanged) {
    const Graph g = block_graph(plain_mbconv());
    const auto [out, report] = rewrite_remove_se(g, {1, 32, 16, 16});
    EXPECT_EQ(report.matched, 0);
    EXPECT_TRUE(graphs_identical(g, out));
}

TEST(RemoveSe, Idempotent) {
    BlockParams p = plain_mbconv();
    p.se_ch = 8;
    const auto first = rewrite_remove_se(block_graph(p), {1, 32, 16, 16});
    const auto second = rewrite_remove_se(first.graph, {1, 32, 16, 16});
    EXPECT_EQ(second.report.matched, 0);
    EXPECT_TRUE(graphs_identical(first.graph, second.graph));
}

TEST(SwapActivation, ReplacesOnlyTheRequestedKind) {
    BlockParams p = plain_mbconv();
    p.se_ch = 8;
    p.act = ActKind::Silu;
    const Graph g = block_graph(p);
    const int silu_before = count_act(g, ActKind::Silu);
    ASSERT_GT(silu_before, 0);
    const auto [out, report] = rewrite_swap_activation(g, ActKind::Silu, ActKind::Relu,
                                                       {1, 32, 16, 16});
    EXPECT_EQ(report.matched, silu_before);
    EXPECT_EQ(report.param_delta, 0);
    EXPECT_EQ(report.flop_delta, 0);
    EXPECT_TRUE(report.shapes_preserved);
    EXPECT_EQ(count_act(out, ActKind::Silu), 0);
    EXPECT_EQ(count_act(out, ActKind::Relu), silu_before);
    EXPECT_EQ(count_act(out, ActKind::Sigmoid), count_act(g, ActKind::Sigmoid));
}

TEST(SwapActivation, NoMatchesLeavesGraphUntouched) {
    BlockParams p = plain_mbconv();
    p.act = ActKind::Relu;
    const Graph g = block_graph(p);
    const auto [out, report] = rewrite_swap_activation(g, ActKind::Silu, ActKind::Relu);
    EXPECT_EQ(report.matched, 0);
    EXPECT_TRUE(graphs_identical(g, out));
}

TEST(SwapActivation, OutputsZeroWhereSmoothActWasNegative) {
    GraphBuilder b;
    const int x = b.input("image", 1);
    b.mark_output("out", b.activation("a", x, ActKind::Silu));
    const Graph g = b.finish();
    const auto [swapped, report] = rewrite_swap_activation(g, ActKind::Silu, ActKind::Relu,
                                                           {1, 1, 2, 2});
    const ParamStore store;
    const Tensor in = Tensor::from_f64({1, 1, 2, 2}, {-1.0, -2.0, -0.5, 3.0});
    const Tensor before = forward(g, store, {{"image", in}}).at("out");
    const Tensor after = forward(swapped, store, {{"image", in}}).at("out");
    EXPECT_LT(before.item(0), 0.0);
    EXPECT_EQ(after.item(0), 0.0);
    EXPECT_EQ(after.item(1), 0.0);
    EXPECT_EQ(after.item(2), 0.0);
    EXPECT_DOUBLE_EQ(after.item(3), 3.0);
}

TEST(SwapActivation, Idempotent) {
    BlockParams p = plain_mbconv();
    const auto first = rewrite_swap_activation(block_graph(p), ActKind::Silu, ActKind::Relu,
                                               {1, 32, 16, 16});
    const auto second = rewrite_swap_activation(first.graph, ActKind::Silu, ActKind::Relu,
                                                {1, 32, 16, 16});
    EXPECT_EQ(second.report.matched, 0);
    EXPECT_TRUE(graphs_identical(first.graph, second.graph));
}

TEST(Passes, RemoveSeAndSwapActivationCommute) {
    BlockParams p = plain_mbconv();
    p.se_ch = 8;
    const Graph g = block_graph(p);
    const Graph a = rewrite_swap_activation(rewrite_remove_se(g).graph).graph;
    const Graph b = rewrite_remove_se(rewrite_swap_activation(g).graph).graph;
    EXPECT_TRUE(graphs_identical(a, b));
    EXPECT_EQ(topology_signature(a), topology_signature(b));
}

TEST(Passes, FullPipelineStripsGpuUnfriendlyOps) {
    ModelConfig cfg = zoo_entry("eseg-s");
    cfg.width_mult = 0.4;
    cfg.depth_mult = 0.5;
    cfg.channels = 24;
    cfg.repeats = 1;
    cfg.num_classes = 5;
    const Graph g = build_model(cfg);
    ASSERT_GT(count_blocks(g, "se"), 0);
    ASSERT_GT(count_act(g, ActKind::Silu), 0);
    ASSERT_GT(count_kind(g, OpKind::DepthwiseConv2d), 0);

    const Shape ref{1, 3, 512, 512};
    const auto [out, reports] = optimize_for_inference(g, ref);
    ASSERT_EQ(reports.size(), 4u);
    for (const RewriteReport& r : reports) {
        EXPECT_TRUE(r.shapes_preserved) << r.pass;
        EXPECT_GT(r.matched, 0) << r.pass;
    }

    EXPECT_EQ(count_blocks(out, "se"), 0);
    EXPECT_EQ(count_act(out, ActKind::Silu), 0);
    EXPECT_EQ(count_act(out, ActKind::Sigmoid), 0);
    EXPECT_EQ(count_kind(out, OpKind::DepthwiseConv2d), 0);
    EXPECT_EQ(count_blocks(out, "mbconv"), 0);
    EXPECT_EQ(count_blocks(out, "sep_conv"), 0);

    const auto shapes = infer_shapes(out, single_input_shapes(out, ref));
    const Shape logits = shapes.at(static_cast<std::size_t>(out.output_id("logits")));
    EXPECT_EQ(logits, (Shape{1, 5, 512, 512}));

    // running the whole recipe again finds nothing left to rewrite
    const auto [again, reports2] = optimize_for_inference(out, ref);
    for (const RewriteReport& r : reports2) EXPECT_EQ(r.matched, 0) << r.pass;
    EXPECT_TRUE(graphs_identical(out, again));
}

TEST(FuseSeparable, CollapsesPairToRegularConv) {
    GraphBuilder b;
    const int image = b.input("image", 16);
    FpnConfig fc;
    fc.channels = 16;
    fc.conv_style = ConvStyle::Separable;
    fc.activation = ActKind::Relu;
    const int out_id = emit_style_conv(b, "f", image, 16, fc);
    b.mark_output("out", out_id);
    const Graph g = b.finish();
    ASSERT_EQ(count_blocks(g, "sep_conv"), 1);

    const auto [out, report] = rewrite_fuse_separable(g, {1, 16, 8, 8});
    EXPECT_EQ(report.matched, 1);
    EXPECT_TRUE(report.shapes_preserved);
    EXPECT_EQ(count_kind(out, OpKind::DepthwiseConv2d), 0);
    EXPECT_EQ(count_blocks(out, "sep_conv"), 0);
    // 3x3 regular conv replaces 3x3 depthwise + 1x1 pointwise
    EXPECT_EQ(report.param_delta, 9 * 16 * 16 - (9 * 16 + 16 * 16));
    bool found = false;
    for (const Node& n : out.nodes)
        if (n.name == "f/conv" && n.kind == OpKind::Conv2d) {
            found = true;
            EXPECT_EQ(n.attrs.kernel, 3);
            EXPECT_EQ(n.attrs.padding, 1);
        }
    EXPECT_TRUE(found);
}

TEST(FuseSeparable, HeadCostStaysAttributedAfterRewrite) {
    ModelConfig cfg = zoo_entry("eseg-s");
    cfg.width_mult = 0.4;
    cfg.depth_mult = 0.5;
    cfg.channels = 24;
    cfg.repeats = 1;
    cfg.num_classes = 5;
    const Graph g = build_model(cfg);
    const Shape ref{1, 3, 512, 512};
    const auto [out, report] = rewrite_fuse_separable(g, ref);
    EXPECT_GT(report.matched, 0);
    // the head's interior conv was replaced; its cost must still count
    const std::int64_t before = head_flops(g, single_input_shapes(g, ref));
    const std::int64_t after = head_flops(out, single_input_shapes(out, ref));
    EXPECT_GT(after, before);  // regular conv costs more than the separable pair
    EXPECT_LT(after, 9 * before);
}

TEST(FuseSeparable, Idempotent) {
    ModelConfig cfg = zoo_entry("eseg-s");
    cfg.width_mult = 0.4;
    cfg.depth_mult = 0.5;
    cfg.channels = 24;
    cfg.repeats = 1;
    cfg.num_classes = 5;
    const Graph g = build_model(cfg);
    const auto first = rewrite_fuse_separable(g, {1, 3, 512, 512});
    const auto second = rewrite_fuse_separable(first.graph, {1, 3, 512, 512});
    EXPECT_EQ(second.report.matched, 0);
    EXPECT_TRUE(graphs_identical(first.graph, second.graph));
}

TEST(Passes, DispatcherKnowsEveryPass) {
    BlockParams p = plain_mbconv();
    p.se_ch = 8;
    const Graph g = block_graph(p);
    for (const std::string& name : rewrite_pass_names()) {
        const auto r = run_rewrite_pass(name, g, {1, 32, 16, 16});
        EXPECT_EQ(r.report.pass, name);
    }
    EXPECT_THROW(run_rewrite_pass("inline-bn", g), Error);
}

TEST(ShiftBaseLevel, MovesTheConfigUpOneLevel) {
    const ModelConfig cfg = zoo_entry("eseg-s");
    ASSERT_EQ(cfg.min_level, 2);
    const ModelConfig shifted = rewrite_shift_base_level(cfg);
    EXPECT_EQ(shifted.min_level, 3);
    EXPECT_EQ(shifted.max_level, cfg.max_level);
    EXPECT_EQ(shifted.channels, cfg.channels);
    EXPECT_EQ(shifted.num_classes, cfg.num_classes);
}

TEST(ShiftBaseLevel, RejectsModelsAlreadyAtThree) {
    const ModelConfig cfg = zoo_entry("eseg-lite-s");
    ASSERT_EQ(cfg.min_level, 3);
    try {
        rewrite_shift_base_level(cfg);
        FAIL() << "expected a rejection";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("already"), std::string::npos);
    }
}

TEST(ShiftBaseLevel, HeadCostDropsToAQuarter) {
    const ModelConfig cfg = zoo_entry("eseg-s");
    const ModelConfig shifted = rewrite_shift_base_level(cfg);
    const Shape ref{1, 3, 512, 1024};
    const Graph before = build_model(cfg);
    const Graph after = build_model(shifted);
    const double ratio =
        static_cast<double>(head_flops(after, single_input_shapes(after, ref))) /
        static_cast<double>(head_flops(before, single_input_shapes(before, ref)));
    EXPECT_GT(ratio, 0.25 / 1.05);
    EXPECT_LT(ratio, 0.25 * 1.05);
}

TEST(ShiftBaseLevel, ShiftedBuildMatchesNativeTopology) {
    ModelConfig base2 = zoo_entry("eseg-lite-s");
    base2.min_level = 2;  // hypothetical lower-base variant of the same model
    const ModelConfig shifted = rewrite_shift_base_level(base2);
    const Graph native = build_model(zoo_entry("eseg-lite-s"));
    const Graph rebuilt = build_model(shifted);
    EXPECT_EQ(topology_signature(native), topology_signature(rebuilt));
}

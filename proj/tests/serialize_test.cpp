#include "eseg/serialize.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <unistd.h>

namespace {

using namespace eseg;
namespace fs = std::filesystem;

std::string repo_path(const std::string& rel) {
    return (fs::path(ESEG_SOURCE_DIR) / rel).string();
}

class TempDir {
public:
    TempDir() {
        dir_ = fs::temp_directory_path() / ("eseg_ser_" + std::to_string(counter_++) + "_" +
                                            std::to_string(::getpid()));
        fs::create_directories(dir_);
    }
    ~TempDir() { fs::remove_all(dir_); }
    std::string path(const std::string& name) const { return (dir_ / name).string(); }

private:
    static inline int counter_ = 0;
    fs::path dir_;
};

::testing::AssertionResult graphs_identical(const Graph& a, const Graph& b) {
    if (a.nodes.size() != b.nodes.size())
        return ::testing::AssertionFailure()
               << "node count " << a.nodes.size() << " vs " << b.nodes.size();
    for (std::size_t i = 0; i < a.nodes.size(); ++i) {
        const Node &x = a.nodes[i], &y = b.nodes[i];
        if (x.id != y.id || x.name != y.name || x.kind != y.kind || x.inputs != y.inputs ||
            x.params != y.params || x.buffers != y.buffers)
            return ::testing::AssertionFailure() << "node " << i << " differs ('" << x.name
                                                 << "' vs '" << y.name << "')";
        const NodeAttrs &p = x.attrs, &q = y.attrs;
        if (p.kernel != q.kernel || p.stride != q.stride || p.padding != q.padding ||
            p.out_channels != q.out_channels || p.channels != q.channels || p.scale != q.scale ||
            p.pool != q.pool || p.act != q.act || p.resize != q.resize || p.fuse != q.fuse ||
            p.eps != q.eps || p.momentum != q.momentum || p.coeffs != q.coeffs)
            return ::testing::AssertionFailure() << "node " << i << " attrs differ";
    }
    if (a.inputs != b.inputs || a.outputs != b.outputs)
        return ::testing::AssertionFailure() << "graph interface differs";
    if (a.divisibility != b.divisibility)
        return ::testing::AssertionFailure() << "divisibility differs";
    auto spec_eq = [](const std::map<std::string, ParamSpec>& m,
                      const std::map<std::string, ParamSpec>& n) {
        if (m.size() != n.size()) return false;
        for (const auto& [k, v] : m) {
            auto it = n.find(k);
            if (it == n.end() || !(it->second.shape == v.shape) || it->second.init != v.init)
                return false;
        }
        return true;
    };
    if (!spec_eq(a.params, b.params)) return ::testing::AssertionFailure() << "params differ";
    if (!spec_eq(a.buffers, b.buffers)) return ::testing::AssertionFailure() << "buffers differ";
    if (a.blocks.size() != b.blocks.size())
        return ::testing::AssertionFailure() << "annotation count differs";
    for (std::size_t i = 0; i < a.blocks.size(); ++i) {
        const BlockAnnotation &x = a.blocks[i], &y = b.blocks[i];
        if (x.kind != y.kind || x.scope != y.scope || x.entry != y.entry || x.exit != y.exit ||
            x.attrs != y.attrs || x.roles != y.roles || x.nodes != y.nodes)
            return ::testing::AssertionFailure() << "annotation " << i << " differs";
    }
    return ::testing::AssertionSuccess();
}

ModelConfig tiny_config() {
    ModelConfig cfg = zoo_entry("eseg-lite-s");
    cfg.max_level = 6;
    cfg.channels = 16;
    cfg.repeats = 1;
    cfg.num_classes = 4;
    return cfg;
}

TEST(GraphJson, RoundtripPreservesEverything) {
    const Graph g = build_model(tiny_config());
    const Graph back = graph_from_json(graph_to_json(g));
    EXPECT_TRUE(graphs_identical(g, back));
    EXPECT_EQ(topology_signature(g), topology_signature(back));
}

TEST(GraphJson, RoundtrippedGraphRunsIdentically) {
    const Graph g = build_model(tiny_config());
    const ParamStore store = init_params(g, 5, DType::F32);
    const Graph back = graph_from_json(graph_to_json(g));
    Rng rng(6);
    const Tensor image = random_uniform<float>({1, 3, 64, 64}, rng, 0.0, 1.0);
    const Tensor a = forward(g, store, {{"image", image}}).at("logits");
    const Tensor b = forward(back, store, {{"image", image}}).at("logits");
    EXPECT_EQ(max_abs_diff(a, b), 0.0);
}

TEST(GraphJson, RoundtrippedAnnotationsStillDriveRewrites) {
    const Graph g = build_model(tiny_config());
    const Graph back = graph_from_json(graph_to_json(g));
    const auto [rewritten, report] = rewrite_fuse_separable(back);
    EXPECT_EQ(report.matched, static_cast<int>([&] {
                  int n = 0;
                  for (const auto& a : g.blocks) n += a.kind == "sep_conv";
                  return n;
              }()));
    EXPECT_TRUE(report.shapes_preserved);
}

TEST(GraphJson, RejectsWrongSchemaVersionAndShuffledNodes) {
    const Graph g = build_model(tiny_config());
    json doc = graph_to_json(g);
    doc["schema_version"] = 99;
    EXPECT_THROW(graph_from_json(doc), Error);

    json doc2 = graph_to_json(g);
    std::swap(doc2["nodes"][0], doc2["nodes"][1]);
    EXPECT_THROW(graph_from_json(doc2), Error);
}

TEST(GraphJson, FileRoundtripAndSchemaValidation) {
    TempDir tmp;
    const Graph g = build_model(tiny_config());
    save_graph(tmp.path("g.json"), g);
    const Graph back = load_graph(tmp.path("g.json"));
    EXPECT_TRUE(graphs_identical(g, back));
    validate_against_schema_file(repo_path("schemas/graph.schema.json"), graph_to_json(g));
    detail::write_file(tmp.path("junk.json"), "{not json");
    EXPECT_THROW(load_graph(tmp.path("junk.json")), Error);
}

TEST(ModelConfigJson, RoundtripsTheWholeZoo) {
    for (const ModelConfig& cfg : model_zoo()) {
        const ModelConfig back = model_config_from_json(model_config_to_json(cfg));
        EXPECT_EQ(back.name, cfg.name);
        EXPECT_EQ(back.width_mult, cfg.width_mult);
        EXPECT_EQ(back.depth_mult, cfg.depth_mult);
        EXPECT_EQ(back.block_kind, cfg.block_kind);
        EXPECT_EQ(back.se_ratio, cfg.se_ratio);
        EXPECT_EQ(back.activation, cfg.activation);
        EXPECT_EQ(back.stem_ch, cfg.stem_ch);
        EXPECT_EQ(back.channels, cfg.channels);
        EXPECT_EQ(back.repeats, cfg.repeats);
        EXPECT_EQ(back.topology, cfg.topology);
        EXPECT_EQ(back.conv_style, cfg.conv_style);
        EXPECT_EQ(back.min_level, cfg.min_level);
        EXPECT_EQ(back.max_level, cfg.max_level);
        EXPECT_EQ(back.num_classes, cfg.num_classes);
        validate_against_schema_file(repo_path("schemas/model-config.schema.json"),
                                     model_config_to_json(cfg));
    }
}

TEST(ModelConfigJson, AppliesDefaultsAndValidates) {
    const json minimal{{"width_mult", 1.0}, {"depth_mult", 1.0}, {"channels", 96}, {"repeats", 4}};
    const ModelConfig cfg = model_config_from_json(minimal);
    EXPECT_EQ(cfg.min_level, 2);
    EXPECT_EQ(cfg.num_classes, 19);
    EXPECT_EQ(cfg.block_kind, BlockKind::MBConv);

    json bad = minimal;
    bad["min_level"] = 7;  // violates min < max constraint checking
    EXPECT_THROW(model_config_from_json(bad), Error);
    json badact = minimal;
    badact["activation"] = "tanh";
    EXPECT_THROW(model_config_from_json(badact), Error);
}

TEST(ModelConfigJson, ShippedZooFilesMatchTheBuiltinTable) {
    for (const ModelConfig& want : model_zoo()) {
        const ModelConfig got = load_model_config(repo_path("configs/" + want.name + ".json"));
        EXPECT_EQ(got.name, want.name);
        EXPECT_EQ(got.width_mult, want.width_mult);
        EXPECT_EQ(got.depth_mult, want.depth_mult);
        EXPECT_EQ(got.channels, want.channels);
        EXPECT_EQ(got.repeats, want.repeats);
        EXPECT_EQ(got.block_kind, want.block_kind);
        EXPECT_EQ(got.activation, want.activation);
        EXPECT_EQ(got.conv_style, want.conv_style);
        EXPECT_EQ(got.min_level, want.min_level);
        EXPECT_EQ(got.max_level, want.max_level);
    }
}

TEST(Reports, ValidateAgainstTheirSchemas) {
    CostReport cr;
    cr.total_params = 123;
    cr.total_flops = 456;
    cr.peak_activation_elems = 7;
    validate_against_schema_file(repo_path("schemas/cost-report.schema.json"),
                                 cost_report_to_json("eseg-s", {1, 3, 1024, 2048}, cr));

    ConfusionMatrix cm(3);
    cm.at(0, 0) = 5;
    cm.at(1, 1) = 2;
    cm.at(1, 2) = 1;
    validate_against_schema_file(repo_path("schemas/metric-report.schema.json"),
                                 metric_report_to_json(cm));
    const std::string csv = metric_report_to_csv(cm);
    EXPECT_NE(csv.find("class,iou,present"), std::string::npos);
    EXPECT_NE(csv.find("miou,"), std::string::npos);

    RewriteReport rr;
    rr.pass = "remove-se";
    rr.reference = {1, 3, 512, 512};
    rr.shapes_preserved = true;
    validate_against_schema_file(repo_path("schemas/rewrite-report.schema.json"),
                                 rewrite_report_to_json(rr));
}

TEST(SchemaValidation, CatchesStructuralMistakes) {
    const json schema{{"type", "object"},
                      {"required", json::array({"a"})},
                      {"additionalProperties", false},
                      {"properties",
                       {{"a", {{"type", "integer"}, {"minimum", 0}}},
                        {"b", {{"enum", json::array({"x", "y"})}}}}}};
    validate_schema(schema, json{{"a", 3}, {"b", "x"}});
    EXPECT_THROW(validate_schema(schema, json{{"b", "x"}}), Error);           // missing a
    EXPECT_THROW(validate_schema(schema, json{{"a", -1}}), Error);            // below minimum
    EXPECT_THROW(validate_schema(schema, json{{"a", 1}, {"b", "z"}}), Error);  // enum
    EXPECT_THROW(validate_schema(schema, json{{"a", 1}, {"c", 0}}), Error);    // extra key
    EXPECT_THROW(validate_schema(schema, json::array()), Error);               // type
}

}  // namespace

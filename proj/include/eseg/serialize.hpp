#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "eseg/deploy.hpp"
#include "eseg/io.hpp"
#include "eseg/metrics.hpp"
#include "eseg/model.hpp"

namespace eseg {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Graph documents (schema: schemas/graph.schema.json)

constexpr int kGraphSchemaVersion = 1;

namespace detail {

inline json shape_to_json(const Shape& s) { return json::array({s.n, s.c, s.h, s.w}); }

inline Shape shape_from_json(const json& j) {
    if (!j.is_array() || j.size() != 4) fail("shape must be a 4-element array");
    return {j[0].get<std::int64_t>(), j[1].get<std::int64_t>(), j[2].get<std::int64_t>(),
            j[3].get<std::int64_t>()};
}

inline json node_to_json(const Node& n) {
    json j{{"id", n.id}, {"name", n.name}, {"kind", op_kind_name(n.kind)}};
    if (!n.inputs.empty()) j["inputs"] = n.inputs;
    if (!n.params.empty()) j["params"] = n.params;
    if (!n.buffers.empty()) j["buffers"] = n.buffers;

    json a = json::object();
    const NodeAttrs& at = n.attrs;
    const NodeAttrs def{};
    switch (n.kind) {
        case OpKind::Input:
            a["channels"] = at.channels;
            break;
        case OpKind::Conv2d:
            a["out_channels"] = at.out_channels;
            [[fallthrough]];
        case OpKind::DepthwiseConv2d:
            a["kernel"] = at.kernel;
            a["stride"] = at.stride;
            a["padding"] = at.padding;
            break;
        case OpKind::Pool2d:
            a["kernel"] = at.kernel;
            a["stride"] = at.stride;
            a["padding"] = at.padding;
            a["pool"] = pool_kind_name(at.pool);
            break;
        case OpKind::Resize:
            a["scale"] = at.scale;
            a["resize"] = resize_mode_name(at.resize);
            break;
        case OpKind::BatchNorm:
            a["eps"] = at.eps;
            a["momentum"] = at.momentum;
            break;
        case OpKind::Activation:
            a["act"] = act_kind_name(at.act);
            break;
        case OpKind::FuseWeighted:
            a["fuse"] = fuse_mode_name(at.fuse);
            a["eps"] = at.eps;
            if (!at.coeffs.empty()) a["coeffs"] = at.coeffs;
            break;
        default:
            break;  // GlobalAvgPool, BiasAdd, Add, Mul, ReduceSum carry no attrs
    }
    if (!a.empty()) j["attrs"] = std::move(a);
    return j;
}

inline Node node_from_json(const json& j) {
    Node n;
    n.id = j.at("id").get<int>();
    n.name = j.at("name").get<std::string>();
    n.kind = op_kind_from_name(j.at("kind").get<std::string>());
    if (j.contains("inputs")) n.inputs = j["inputs"].get<std::vector<int>>();
    if (j.contains("params")) n.params = j["params"].get<std::vector<std::string>>();
    if (j.contains("buffers")) n.buffers = j["buffers"].get<std::vector<std::string>>();
    const json a = j.value("attrs", json::object());
    NodeAttrs& at = n.attrs;
    at.kernel = a.value("kernel", at.kernel);
    at.stride = a.value("stride", at.stride);
    at.padding = a.value("padding", at.padding);
    at.out_channels = a.value("out_channels", at.out_channels);
    at.channels = a.value("channels", at.channels);
    at.scale = a.value("scale", at.scale);
    at.eps = a.value("eps", at.eps);
    at.momentum = a.value("momentum", at.momentum);
    if (a.contains("pool")) at.pool = pool_kind_from_name(a["pool"].get<std::string>());
    if (a.contains("act")) at.act = act_kind_from_name(a["act"].get<std::string>());
    if (a.contains("resize")) at.resize = resize_mode_from_name(a["resize"].get<std::string>());
    if (a.contains("fuse")) at.fuse = fuse_mode_from_name(a["fuse"].get<std::string>());
    if (a.contains("coeffs")) at.coeffs = a["coeffs"].get<std::vector<double>>();
    return n;
}

inline json block_to_json(const BlockAnnotation& a) {
    json j{{"kind", a.kind}, {"scope", a.scope}, {"entry", a.entry},
           {"exit", a.exit},  {"nodes", a.nodes}};
    if (!a.attrs.empty()) j["attrs"] = a.attrs;
    if (!a.roles.empty()) j["roles"] = a.roles;
    return j;
}

inline BlockAnnotation block_from_json(const json& j) {
    BlockAnnotation a;
    a.kind = j.at("kind").get<std::string>();
    a.scope = j.at("scope").get<std::string>();
    a.entry = j.at("entry").get<int>();
    a.exit = j.at("exit").get<int>();
    a.nodes = j.at("nodes").get<std::vector<int>>();
    if (j.contains("attrs")) a.attrs = j["attrs"].get<std::map<std::string, double>>();
    if (j.contains("roles")) a.roles = j["roles"].get<std::map<std::string, int>>();
    return a;
}

}  // namespace detail

inline json graph_to_json(const Graph& g) {
    json nodes = json::array();
    for (const Node& n : g.nodes) nodes.push_back(detail::node_to_json(n));
    json params = json::object();
    for (const auto& [name, spec] : g.params)
        params[name] = {{"shape", detail::shape_to_json(spec.shape)},
                        {"init", init_kind_name(spec.init)}};
    json buffers = json::object();
    for (const auto& [name, spec] : g.buffers)
        buffers[name] = {{"shape", detail::shape_to_json(spec.shape)},
                         {"init", init_kind_name(spec.init)}};
    json blocks = json::array();
    for (const BlockAnnotation& a : g.blocks) blocks.push_back(detail::block_to_json(a));
    return {{"schema_version", kGraphSchemaVersion},
            {"divisibility", g.divisibility},
            {"inputs", g.inputs},
            {"outputs", g.outputs},
            {"nodes", std::move(nodes)},
            {"params", std::move(params)},
            {"buffers", std::move(buffers)},
            {"blocks", std::move(blocks)}};
}

inline Graph graph_from_json(const json& j) {
    const int version = j.at("schema_version").get<int>();
    if (version != kGraphSchemaVersion)
        fail("unsupported graph schema version ", version, ", expected ", kGraphSchemaVersion);
    Graph g;
    g.divisibility = j.at("divisibility").get<int>();
    g.inputs = j.at("inputs").get<std::map<std::string, int>>();
    g.outputs = j.at("outputs").get<std::map<std::string, int>>();
    for (const auto& nj : j.at("nodes")) {
        Node n = detail::node_from_json(nj);
        if (n.id != static_cast<int>(g.nodes.size()))
            fail("graph nodes must be listed in id order; got id ", n.id, " at position ",
                 g.nodes.size());
        g.nodes.push_back(std::move(n));
    }
    for (const auto& [name, spec] : j.at("params").items())
        g.params[name] = {detail::shape_from_json(spec.at("shape")),
                          init_kind_from_name(spec.at("init").get<std::string>())};
    for (const auto& [name, spec] : j.at("buffers").items())
        g.buffers[name] = {detail::shape_from_json(spec.at("shape")),
                           init_kind_from_name(spec.at("init").get<std::string>())};
    for (const auto& bj : j.at("blocks")) g.blocks.push_back(detail::block_from_json(bj));
    for (const auto& [name, id] : g.inputs) g.node(id);  // bounds checks
    for (const auto& [name, id] : g.outputs) g.node(id);
    return g;
}

inline void save_graph(const std::string& path, const Graph& g) {
    detail::write_file(path, graph_to_json(g).dump(1) + "\n");
}

inline Graph load_graph(const std::string& path) {
    try {
        return graph_from_json(json::parse(detail::read_file(path)));
    } catch (const json::exception& e) {
        fail(path, ": unreadable graph document: ", e.what());
    }
}

// ---------------------------------------------------------------------------
// Model configs (schema: schemas/model-config.schema.json)

inline json model_config_to_json(const ModelConfig& cfg) {
    return {{"name", cfg.name},
            {"width_mult", cfg.width_mult},
            {"depth_mult", cfg.depth_mult},
            {"block_kind", block_kind_name(cfg.block_kind)},
            {"se_ratio", cfg.se_ratio},
            {"activation", act_kind_name(cfg.activation)},
            {"stem_ch", cfg.stem_ch},
            {"channels", cfg.channels},
            {"repeats", cfg.repeats},
            {"topology", fpn_topology_name(cfg.topology)},
            {"conv_style", conv_style_name(cfg.conv_style)},
            {"min_level", cfg.min_level},
            {"max_level", cfg.max_level},
            {"num_classes", cfg.num_classes},
            {"bn_eps", cfg.bn_eps},
            {"bn_momentum", cfg.bn_momentum}};
}

inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.name = j.value("name", cfg.name);
    cfg.width_mult = j.at("width_mult").get<double>();
    cfg.depth_mult = j.at("depth_mult").get<double>();
    if (j.contains("block_kind"))
        cfg.block_kind = block_kind_from_name(j["block_kind"].get<std::string>());
    cfg.se_ratio = j.value("se_ratio", cfg.se_ratio);
    if (j.contains("activation"))
        cfg.activation = act_kind_from_name(j["activation"].get<std::string>());
    cfg.stem_ch = j.value("stem_ch", cfg.stem_ch);
    cfg.channels = j.at("channels").get<int>();
    cfg.repeats = j.at("repeats").get<int>();
    if (j.contains("topology"))
        cfg.topology = fpn_topology_from_name(j["topology"].get<std::string>());
    if (j.contains("conv_style"))
        cfg.conv_style = conv_style_from_name(j["conv_style"].get<std::string>());
    cfg.min_level = j.value("min_level", cfg.min_level);
    cfg.max_level = j.value("max_level", cfg.max_level);
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    cfg.bn_eps = j.value("bn_eps", cfg.bn_eps);
    cfg.bn_momentum = j.value("bn_momentum", cfg.bn_momentum);
    check_model_config(cfg);
    return cfg;
}

inline void save_model_config(const std::string& path, const ModelConfig& cfg) {
    detail::write_file(path, model_config_to_json(cfg).dump(2) + "\n");
}

inline ModelConfig load_model_config(const std::string& path) {
    try {
        return model_config_from_json(json::parse(detail::read_file(path)));
    } catch (const json::exception& e) {
        fail(path, ": unreadable model config: ", e.what());
    }
}

// ---------------------------------------------------------------------------
// Report documents

inline json cost_report_to_json(const std::string& model, const Shape& input,
                                const CostReport& r) {
    return {{"model", model},
            {"input", detail::shape_to_json(input)},
            {"params", r.total_params},
            {"flops", r.total_flops},
            {"peak_activation_elems", r.peak_activation_elems}};
}

inline json metric_report_to_json(const ConfusionMatrix& cm) {
    const ClassIou per = per_class_iou(cm);
    json classes = json::array();
    for (std::size_t c = 0; c < per.iou.size(); ++c)
        classes.push_back({{"class", c}, {"iou", per.iou[c]}, {"present", bool(per.present[c])}});
    return {{"classes", cm.num_classes},
            {"miou", miou(cm)},
            {"pixel_accuracy", pixel_accuracy(cm)},
            {"per_class", std::move(classes)}};
}

inline std::string metric_report_to_csv(const ConfusionMatrix& cm) {
    std::ostringstream ss;
    ss << "class,iou,present\n";
    const ClassIou per = per_class_iou(cm);
    for (std::size_t c = 0; c < per.iou.size(); ++c)
        ss << c << ',' << per.iou[c] << ',' << (per.present[c] ? 1 : 0) << '\n';
    ss << "miou," << miou(cm) << ",\n";
    return std::move(ss).str();
}

inline json rewrite_report_to_json(const RewriteReport& r) {
    return {{"pass", r.pass},
            {"matched", r.matched},
            {"replaced", r.replaced},
            {"param_delta", r.param_delta},
            {"flop_delta", r.flop_delta},
            {"reference_input", detail::shape_to_json(r.reference)},
            {"shapes_preserved", r.shapes_preserved}};
}

// ---------------------------------------------------------------------------
// Structural validation against the shipped schema documents. Supports the
// subset of JSON Schema those documents use: type, properties, required,
// additionalProperties, items, enum, and numeric minimum.

inline void validate_schema(const json& schema, const json& doc, const std::string& at = "$") {
    if (schema.contains("enum")) {
        for (const auto& v : schema["enum"])
            if (v == doc) return;
        fail(at, ": value not in schema enum");
    }
    if (schema.contains("type")) {
        const std::string t = schema["type"].get<std::string>();
        const bool ok = (t == "object" && doc.is_object()) || (t == "array" && doc.is_array()) ||
                        (t == "string" && doc.is_string()) ||
                        (t == "integer" && doc.is_number_integer()) ||
                        (t == "number" && doc.is_number()) ||
                        (t == "boolean" && doc.is_boolean()) || (t == "null" && doc.is_null());
        if (!ok) fail(at, ": expected ", t, ", got ", doc.type_name());
    }
    if (schema.contains("minimum") && doc.is_number() &&
        doc.get<double>() < schema["minimum"].get<double>())
        fail(at, ": value ", doc.get<double>(), " below schema minimum");
    if (doc.is_object()) {
        if (schema.contains("required"))
            for (const auto& k : schema["required"])
                if (!doc.contains(k.get<std::string>()))
                    fail(at, ": missing required key '", k.get<std::string>(), "'");
        const json props = schema.value("properties", json::object());
        for (const auto& [k, v] : doc.items()) {
            if (props.contains(k))
                validate_schema(props[k], v, at + "." + k);
            else if (schema.contains("additionalProperties")) {
                if (schema["additionalProperties"].is_boolean()) {
                    if (!schema["additionalProperties"].get<bool>())
                        fail(at, ": unexpected key '", k, "'");
                } else {
                    validate_schema(schema["additionalProperties"], v, at + "." + k);
                }
            }
        }
    }
    if (doc.is_array() && schema.contains("items"))
        for (std::size_t i = 0; i < doc.size(); ++i)
            validate_schema(schema["items"], doc[i], at + "[" + std::to_string(i) + "]");
}

inline void validate_against_schema_file(const std::string& schema_path, const json& doc) {
    json schema;
    try {
        schema = json::parse(detail::read_file(schema_path));
    } catch (const json::exception& e) {
        fail(schema_path, ": unreadable schema: ", e.what());
    }
    validate_schema(schema, doc);
}

}  // namespace eseg

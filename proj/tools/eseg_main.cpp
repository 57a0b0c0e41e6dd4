#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "eseg/gradcheck.hpp"
#include "eseg/selftrain.hpp"
#include "eseg/serialize.hpp"
#include "eseg/train.hpp"

namespace {

using eseg::json;

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string fmt_count(std::int64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%" PRId64, v);
    return buf;
}

// "1024x2048" -> {h, w}
std::pair<std::int64_t, std::int64_t> parse_hw(const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos) eseg::fail("expected HxW, e.g. 1024x2048, got '", s, "'");
    std::int64_t h = 0, w = 0;
    try {
        h = std::stoll(s.substr(0, x));
        w = std::stoll(s.substr(x + 1));
    } catch (const std::exception&) {
        eseg::fail("expected HxW, e.g. 1024x2048, got '", s, "'");
    }
    if (h < 1 || w < 1) eseg::fail("input size must be positive, got ", h, "x", w);
    return {h, w};
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (const char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

// A model flag takes either a zoo name or a path to a model-config JSON file.
eseg::ModelConfig resolve_model(const std::string& arg) {
    if (arg.size() > 5 && arg.substr(arg.size() - 5) == ".json") return eseg::load_model_config(arg);
    return eseg::zoo_entry(arg);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) eseg::fail(path, ": cannot open for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) eseg::fail(path, ": write failed");
}

int cmd_summarize(const std::string& model, const std::string& input_hw,
                  const std::string& graph_path) {
    const eseg::ModelConfig cfg = resolve_model(model);
    const auto [h, w] = parse_hw(input_hw);
    const eseg::Graph g = eseg::build_model(cfg);
    if (!graph_path.empty()) eseg::save_graph(graph_path, g);
    const eseg::Shape in{1, 3, h, w};
    const eseg::CostReport cost = eseg::cost_report(g, {{"image", in}});
    std::cout << "model              " << cfg.name << "\n"
              << "input              " << h << "x" << w << "\n"
              << "params             " << fmt_count(cost.total_params) << "\n"
              << "flops              " << fmt_count(cost.total_flops) << "\n"
              << "peak activations   " << fmt_count(cost.peak_activation_elems) << " elems\n";
    std::cout << eseg::cost_report_to_json(cfg.name, in, cost).dump(2) << "\n";
    return 0;
}

int cmd_ablate_levels(const std::string& model, const std::string& levels,
                      const std::string& input_hw) {
    const eseg::ModelConfig base = resolve_model(model);
    const auto [h, w] = parse_hw(input_hw);
    std::cout << "max_level,params,flops\n";
    for (const std::string& tok : split_list(levels)) {
        int lvl = 0;
        try {
            lvl = std::stoi(tok);
        } catch (const std::exception&) {
            eseg::fail("max level list entry '", tok, "' is not an integer");
        }
        eseg::ModelConfig cfg = base;
        cfg.max_level = lvl;
        const eseg::Graph g = eseg::build_model(cfg);
        const eseg::CostReport cost = eseg::cost_report(g, {{"image", {1, 3, h, w}}});
        std::cout << lvl << "," << fmt_count(cost.total_params) << "," << fmt_count(cost.total_flops) << "\n";
    }
    return 0;
}

int cmd_ablate_fusion(const std::string& model, const std::string& topologies,
                      const std::string& input_hw) {
    const eseg::ModelConfig base = resolve_model(model);
    const auto [h, w] = parse_hw(input_hw);
    std::cout << "topology,channels,params,flops\n";
    for (const std::string& tok : split_list(topologies)) {
        eseg::ModelConfig cfg = base;
        cfg.topology = eseg::fpn_topology_from_name(tok);
        // Plain top-down fusion halves the per-level work, so it gets twice
        // the channel budget to keep the comparison at matched capacity.
        if (cfg.topology == eseg::FpnTopology::Fpn) cfg.channels = base.channels * 2;
        const eseg::Graph g = eseg::build_model(cfg);
        const eseg::CostReport cost = eseg::cost_report(g, {{"image", {1, 3, h, w}}});
        std::cout << tok << "," << cfg.channels << "," << fmt_count(cost.total_params) << ","
                  << fmt_count(cost.total_flops) << "\n";
    }
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, int trials, int graphs) {
    bool all_pass = true;
    for (const auto& r : eseg::run_kernel_gradchecks(seed, trials)) {
        all_pass = all_pass && r.report.pass;
        std::cout << "op " << r.label << " " << (r.report.pass ? "pass" : "FAIL")
                  << " max_err=" << fmt_double(r.report.max_err) << " checked=" << r.report.checked
                  << "\n";
    }
    for (const auto& r : eseg::run_random_graph_gradchecks(seed, graphs)) {
        all_pass = all_pass && r.report.pass;
        std::cout << r.label << " " << (r.report.pass ? "pass" : "FAIL")
                  << " max_err=" << fmt_double(r.report.max_err) << " checked=" << r.report.checked
                  << "\n";
    }
    if (!all_pass) eseg::fail("gradient check failed; see per-op report on stdout");
    return 0;
}

eseg::TrainConfig train_config_from_json(const json& j) {
    eseg::TrainConfig cfg;
    cfg.steps = j.value("steps", cfg.steps);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lr0 = j.value("lr0", cfg.lr0);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.ema_decay = j.value("ema_decay", cfg.ema_decay);
    cfg.eval_with_ema = j.value("eval_with_ema", cfg.eval_with_ema);
    cfg.eval_every = j.value("eval_every", cfg.eval_every);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("dtype")) cfg.dtype = eseg::dtype_from_name(j.at("dtype").get<std::string>());
    if (j.contains("ohem")) {
        const json& o = j.at("ohem");
        cfg.ohem.prob_threshold = o.value("prob_threshold", cfg.ohem.prob_threshold);
        cfg.ohem.min_kept_fraction = o.value("min_kept_fraction", cfg.ohem.min_kept_fraction);
        cfg.ohem.ignore_index = o.value("ignore_index", cfg.ohem.ignore_index);
    }
    if (j.contains("aug")) {
        const json& a = j.at("aug");
        cfg.aug.scale_lo = a.value("scale_lo", cfg.aug.scale_lo);
        cfg.aug.scale_hi = a.value("scale_hi", cfg.aug.scale_hi);
        cfg.aug.crop_h = a.value("crop_h", cfg.aug.crop_h);
        cfg.aug.crop_w = a.value("crop_w", cfg.aug.crop_w);
        cfg.aug.hflip_p = a.value("hflip_p", cfg.aug.hflip_p);
        cfg.aug.ignore_index = a.value("ignore_index", cfg.aug.ignore_index);
    }
    return cfg;
}

eseg::SyntheticDatasetSpec synthetic_spec_from_json(const json& j) {
    eseg::SyntheticDatasetSpec spec;
    spec.height = j.value("height", spec.height);
    spec.width = j.value("width", spec.width);
    spec.classes = j.value("classes", spec.classes);
    spec.shapes_per_image = j.value("shapes_per_image", spec.shapes_per_image);
    spec.count = j.value("count", spec.count);
    spec.seed = j.value("seed", spec.seed);
    eseg::check_synthetic_spec(spec);
    return spec;
}

std::string trace_to_csv(const std::vector<eseg::StepRecord>& trace) {
    std::string csv = "step,lr,loss,miou\n";
    for (const auto& rec : trace) {
        csv += fmt_count(rec.step) + "," + fmt_double(rec.lr) + "," + fmt_double(rec.loss) + ",";
        if (rec.has_miou) csv += fmt_double(rec.miou);
        csv += "\n";
    }
    return csv;
}

json trace_to_json(const std::string& model, const eseg::TrainConfig& cfg,
                   const eseg::TrainResult& result) {
    json steps = json::array();
    double final_miou = 0.0;
    for (const auto& rec : result.trace) {
        json row{{"step", rec.step}, {"lr", rec.lr}, {"loss", rec.loss}};
        if (rec.has_miou) {
            row["miou"] = rec.miou;
            final_miou = rec.miou;
        }
        steps.push_back(std::move(row));
    }
    return json{{"model", model},
                {"steps", cfg.steps},
                {"seed", cfg.seed},
                {"final_miou", final_miou},
                {"trace", std::move(steps)},
                {"all_ignored_batches", result.all_ignored_batches}};
}

int cmd_train(const std::string& config_path, const std::string& out_dir, std::int64_t seed) {
    json cfg_json;
    try {
        std::ifstream f(config_path, std::ios::binary);
        if (!f) eseg::fail(config_path, ": cannot open");
        cfg_json = json::parse(f);
    } catch (const json::exception& e) {
        eseg::fail(config_path, ": ", e.what());
    }

    eseg::ModelConfig model;
    const json& mj = cfg_json.at("model");
    if (mj.is_string()) {
        model = resolve_model(mj.get<std::string>());
    } else {
        model = eseg::model_config_from_json(mj);
    }

    std::vector<eseg::Sample> train_data, val_data;
    const json& dj = cfg_json.at("data");
    if (dj.contains("dir")) {
        eseg::Dataset ds = eseg::load_dataset(dj.at("dir").get<std::string>());
        train_data = std::move(ds.samples);
        if (dj.contains("val_dir"))
            val_data = eseg::load_dataset(dj.at("val_dir").get<std::string>()).samples;
    } else if (dj.contains("synthetic")) {
        const eseg::SyntheticDatasetSpec spec = synthetic_spec_from_json(dj.at("synthetic"));
        const int val_count = dj.value("val_count", 0);
        for (int i = 0; i < spec.count; ++i) train_data.push_back(eseg::synthesize_sample(spec, i));
        for (int i = 0; i < val_count; ++i)
            val_data.push_back(eseg::synthesize_sample(spec, spec.count + i));
    } else {
        eseg::fail(config_path, ": data section needs either \"dir\" or \"synthetic\"");
    }
    if (train_data.empty()) eseg::fail("training set is empty");

    eseg::TrainConfig tc = train_config_from_json(cfg_json.value("train", json::object()));
    if (seed >= 0) tc.seed = static_cast<std::uint64_t>(seed);

    const eseg::Graph g = eseg::build_model(model);
    const eseg::TrainResult result = eseg::train_loop(g, train_data, val_data, tc);

    std::filesystem::create_directories(out_dir);
    const double final_lr = result.trace.empty() ? tc.lr0 : result.trace.back().lr;
    eseg::save_checkpoint(out_dir + "/checkpoint.bin",
                          eseg::checkpoint_from_training(result.store, result.ema, tc.steps,
                                                         final_lr));
    write_text(out_dir + "/trace.csv", trace_to_csv(result.trace));
    const json tj = trace_to_json(model.name, tc, result);
    write_text(out_dir + "/trace.json", tj.dump(2) + "\n");

    std::cout << "model       " << model.name << "\n"
              << "steps       " << tc.steps << "\n"
              << "final loss  " << fmt_double(result.trace.empty() ? 0.0 : result.trace.back().loss)
              << "\n"
              << "final miou  " << fmt_double(tj.at("final_miou").get<double>()) << "\n"
              << "wrote       " << out_dir << "/checkpoint.bin, trace.csv, trace.json\n";
    return 0;
}

int cmd_eval(const std::string& model, const std::string& ckpt_path, const std::string& data_dir,
             bool csv, bool use_ema) {
    const eseg::ModelConfig cfg = resolve_model(model);
    const eseg::Graph g = eseg::build_model(cfg);
    const auto [store, ema] = eseg::training_from_checkpoint(eseg::load_checkpoint(ckpt_path));
    const eseg::ParamStore params = use_ema ? eseg::ema_params(ema, store) : store;
    const eseg::Dataset ds = eseg::load_dataset(data_dir);
    const eseg::ConfusionMatrix cm =
        eseg::evaluate_confusion(g, params, ds.samples, cfg.num_classes, 255);
    if (csv) {
        std::cout << eseg::metric_report_to_csv(cm);
    } else {
        std::cout << eseg::metric_report_to_json(cm).dump(2) << "\n";
    }
    return 0;
}

int cmd_pseudolabel(const std::string& model, const std::string& ckpt_path,
                    const std::string& images_dir, const std::string& out_dir,
                    const std::string& scales, bool flip, double threshold) {
    const eseg::ModelConfig cfg = resolve_model(model);
    const eseg::Graph g = eseg::build_model(cfg);
    const auto [store, ema] = eseg::training_from_checkpoint(eseg::load_checkpoint(ckpt_path));
    (void)ema;

    eseg::PseudoLabelConfig pl;
    pl.scales.clear();
    for (const std::string& tok : split_list(scales)) {
        try {
            pl.scales.push_back(std::stod(tok));
        } catch (const std::exception&) {
            eseg::fail("scale list entry '", tok, "' is not a number");
        }
    }
    pl.use_flip = flip;
    pl.threshold = threshold;
    eseg::check_pseudolabel_config(pl);

    json manifest;
    try {
        std::ifstream f(images_dir + "/manifest.json", std::ios::binary);
        if (!f) eseg::fail(images_dir, "/manifest.json: cannot open");
        manifest = json::parse(f);
    } catch (const json::exception& e) {
        eseg::fail(images_dir, "/manifest.json: ", e.what());
    }

    std::filesystem::create_directories(out_dir);
    json items = json::array();
    int index = 0;
    for (const auto& item : manifest.at("items")) {
        const std::string image_name = item.at("image").get<std::string>();
        const eseg::Tensor image = eseg::load_ppm(images_dir + "/" + image_name);
        const eseg::Tensor probs = eseg::multiscale_infer(g, store, image, pl);
        const eseg::Tensor label = eseg::pseudolabel(probs, pl);
        char name[32];
        std::snprintf(name, sizeof(name), "lab_%05d.pgm", index);
        eseg::save_pgm(out_dir + "/" + name, label);
        items.push_back(json{{"image", image_name}, {"label", name}});
        ++index;
    }
    const json out_manifest{{"source", images_dir}, {"threshold", threshold},
                            {"scales", pl.scales}, {"flip", flip},
                            {"count", index},      {"items", std::move(items)}};
    write_text(out_dir + "/manifest.json", out_manifest.dump(2) + "\n");
    std::cout << "wrote " << index << " pseudo-label maps to " << out_dir << "\n";
    return 0;
}

int cmd_rewrite(const std::string& pass, const std::string& in_path, const std::string& out_path,
                const std::string& report_path, const std::string& input_hw) {
    eseg::Shape reference{};
    if (!input_hw.empty()) {
        const auto [h, w] = parse_hw(input_hw);
        reference = {1, 3, h, w};
    }

    if (pass == "shift-base-level") {
        const eseg::ModelConfig before = eseg::load_model_config(in_path);
        const eseg::ModelConfig after = eseg::rewrite_shift_base_level(before);
        eseg::save_model_config(out_path, after);
        if (!report_path.empty()) {
            const eseg::Graph gb = eseg::build_model(before);
            const eseg::Graph ga = eseg::build_model(after);
            const eseg::Shape ref =
                reference.valid()
                    ? reference
                    : eseg::Shape{1, 3, 2 * gb.divisibility, 2 * gb.divisibility};
            eseg::RewriteReport rep;
            rep.pass = "shift-base-level";
            rep.matched = 1;
            rep.replaced = 1;
            rep.reference = ref;
            const eseg::CostReport cb = eseg::cost_report(gb, {{"image", ref}});
            const eseg::CostReport ca = eseg::cost_report(ga, {{"image", ref}});
            rep.param_delta = ca.total_params - cb.total_params;
            rep.flop_delta = ca.total_flops - cb.total_flops;
            rep.shapes_preserved = true;  // the final upsample restores input resolution
            write_text(report_path, eseg::rewrite_report_to_json(rep).dump(2) + "\n");
        }
        std::cout << "shifted " << before.name << " base level " << before.min_level << " -> "
                  << after.min_level << "\n";
        return 0;
    }

    const eseg::Graph g = eseg::load_graph(in_path);
    json reports = json::array();
    eseg::Graph out;
    if (pass == "all") {
        auto [graph, reps] = eseg::optimize_for_inference(g, reference);
        out = std::move(graph);
        for (const auto& r : reps) reports.push_back(eseg::rewrite_report_to_json(r));
    } else {
        eseg::RewriteResult r = eseg::run_rewrite_pass(pass, g, reference);
        out = std::move(r.graph);
        reports.push_back(eseg::rewrite_report_to_json(r.report));
    }
    eseg::save_graph(out_path, out);
    if (!report_path.empty()) {
        const json doc = reports.size() == 1 ? reports.front() : reports;
        write_text(report_path, doc.dump(2) + "\n");
    }
    for (const auto& r : reports)
        std::cout << r.at("pass").get<std::string>() << ": matched " << r.at("matched")
                  << ", replaced " << r.at("replaced") << "\n";
    return 0;
}

int cmd_gen_data(const std::string& out_dir, std::int64_t height, std::int64_t width, int classes,
                 int shapes, int count, std::uint64_t seed) {
    eseg::SyntheticDatasetSpec spec;
    spec.height = height;
    spec.width = width;
    spec.classes = classes;
    spec.shapes_per_image = shapes;
    spec.count = count;
    spec.seed = seed;
    eseg::check_synthetic_spec(spec);
    eseg::gen_synthetic(spec, out_dir);
    std::cout << "wrote " << count << " samples to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"segmentation architecture laboratory"};
    app.require_subcommand(1);

    std::string model = "eseg-s";
    std::string input_hw = "1024x2048";
    std::string levels = "5,7,9";
    std::string topologies = "fpn,bifpn";
    std::uint64_t seed = 0;
    int trials = 3;
    int graphs = 25;
    std::string config_path;
    std::string out_dir = "eseg-out";
    std::int64_t seed_override = -1;
    std::string ckpt_path;
    std::string data_dir;
    bool as_csv = false;
    bool use_ema = false;
    std::string images_dir;
    std::string scales = "1.0";
    bool flip = false;
    double threshold = 0.5;
    std::string pass_name;
    std::string in_path;
    std::string out_path;
    std::string report_path;
    std::string rewrite_hw;
    std::int64_t height = 64, width = 64;
    int classes = 4, shapes = 6, count = 16;

    CLI::App* summarize = app.add_subcommand("summarize", "parameter and flop accounting");
    summarize->add_option("--model", model, "zoo entry or model-config JSON file");
    summarize->add_option("--input-hw", input_hw, "input size as HxW");
    std::string graph_path;
    summarize->add_option("--save-graph", graph_path, "also write the built graph as JSON");

    CLI::App* ablate_levels =
        app.add_subcommand("ablate-levels", "cost sweep over feature pyramid depth");
    ablate_levels->add_option("--model", model, "zoo entry or model-config JSON file");
    ablate_levels->add_option("--max-levels", levels, "comma-separated top levels");
    ablate_levels->add_option("--input-hw", input_hw, "input size as HxW");

    CLI::App* ablate_fusion =
        app.add_subcommand("ablate-fusion", "cost comparison across fusion topologies");
    ablate_fusion->add_option("--model", model, "zoo entry or model-config JSON file");
    ablate_fusion->add_option("--topology", topologies, "comma-separated topologies");
    ablate_fusion->add_option("--input-hw", input_hw, "input size as HxW");

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    gradcheck->add_option("--seed", seed, "rng seed");
    gradcheck->add_option("--trials", trials, "seeded inputs per kernel");
    gradcheck->add_option("--graphs", graphs, "random composite graphs");

    CLI::App* train = app.add_subcommand("train", "run the training loop from a JSON config");
    train->add_option("--config", config_path, "training config JSON")->required();
    train->add_option("--out-dir", out_dir, "output directory");
    train->add_option("--seed", seed_override, "override the config seed");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--model", model, "zoo entry or model-config JSON file")->required();
    eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_flag("--csv", as_csv, "emit CSV instead of JSON");
    eval->add_flag("--ema", use_ema, "evaluate the moving-average weights");

    CLI::App* pseudolabel =
        app.add_subcommand("pseudolabel", "write predicted label maps for a directory of images");
    pseudolabel->add_option("--model", model, "zoo entry or model-config JSON file")->required();
    pseudolabel->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    pseudolabel->add_option("--images", images_dir, "dataset directory to label")->required();
    pseudolabel->add_option("--out", out_dir, "output directory")->required();
    pseudolabel->add_option("--scales", scales, "comma-separated inference scales");
    pseudolabel->add_flag("--flip", flip, "average in horizontally flipped passes");
    pseudolabel->add_option("--threshold", threshold, "confidence needed to keep a pixel");

    CLI::App* rewrite = app.add_subcommand("rewrite", "apply a graph rewrite pass");
    rewrite->add_option("--pass", pass_name, "remove-se | swap-activation | fuse-mbconv | fuse-separable | all | shift-base-level")
        ->required();
    rewrite->add_option("--in", in_path, "input graph JSON (model-config JSON for shift-base-level)")
        ->required();
    rewrite->add_option("--out", out_path, "output file")->required();
    rewrite->add_option("--report", report_path, "write a rewrite report JSON here");
    rewrite->add_option("--input-hw", rewrite_hw, "reference input as HxW for the report");

    CLI::App* gen_data = app.add_subcommand("gen-data", "write a synthetic dataset");
    gen_data->add_option("--out", out_dir, "output directory")->required();
    gen_data->add_option("--height", height, "image height");
    gen_data->add_option("--width", width, "image width");
    gen_data->add_option("--classes", classes, "number of classes including background");
    gen_data->add_option("--shapes", shapes, "shapes per image");
    gen_data->add_option("--count", count, "number of samples");
    gen_data->add_option("--seed", seed, "rng seed");

    auto active_name = [&]() -> std::string {
        for (const CLI::App* sub : app.get_subcommands())
            return sub->get_name();
        return "";
    };

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << json{{"error", e.what()}, {"command", active_name()}}.dump() << "\n";
        return 1;
    }

    try {
        if (*summarize) return cmd_summarize(model, input_hw, graph_path);
        if (*ablate_levels) return cmd_ablate_levels(model, levels, input_hw);
        if (*ablate_fusion) return cmd_ablate_fusion(model, topologies, input_hw);
        if (*gradcheck) return cmd_gradcheck(seed, trials, graphs);
        if (*train) return cmd_train(config_path, out_dir, seed_override);
        if (*eval) return cmd_eval(model, ckpt_path, data_dir, as_csv, use_ema);
        if (*pseudolabel)
            return cmd_pseudolabel(model, ckpt_path, images_dir, out_dir, scales, flip, threshold);
        if (*rewrite) return cmd_rewrite(pass_name, in_path, out_path, report_path, rewrite_hw);
        if (*gen_data) return cmd_gen_data(out_dir, height, width, classes, shapes, count, seed);
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"command", active_name()}}.dump() << "\n";
        return 1;
    }
    return 0;
}

// scratch driver: probes desk-scale training settings (not installed)
#include <chrono>
#include <cstdio>

#include "eseg/io.hpp"
#include "eseg/model.hpp"
#include "eseg/train.hpp"

using namespace eseg;

int main(int argc, char** argv) {
    ModelConfig mc;
    mc.name = "eseg-desk";
    mc.width_mult = 0.25;
    mc.depth_mult = argc > 1 ? std::atof(argv[1]) : 0.6;
    mc.block_kind = BlockKind::FusedMBConv;
    mc.se_ratio = 0.0;
    mc.activation = ActKind::Relu;
    mc.stem_ch = 32;
    mc.channels = 32;
    mc.repeats = 1;
    mc.conv_style = ConvStyle::Regular;
    mc.min_level = 3;
    mc.max_level = argc > 2 ? std::atoi(argv[2]) : 6;
    mc.num_classes = 4;
    mc.bn_momentum = argc > 3 ? std::atof(argv[3]) : 0.1;
    const Graph g = build_model(mc);
    std::printf("nodes=%zu params=%lld\n", g.nodes.size(),
                static_cast<long long>(count_params(g)));

    SyntheticDatasetSpec spec;
    spec.height = 64;
    spec.width = 64;
    spec.classes = 4;
    spec.shapes_per_image = 6;
    spec.count = 256;
    spec.seed = 7;
    std::vector<Sample> train;
    for (int i = 0; i < spec.count; ++i) train.push_back(synthesize_sample(spec, i));
    std::vector<Sample> val;
    for (int i = 0; i < 32; ++i) val.push_back(synthesize_sample(spec, spec.count + i));

    TrainConfig tc;
    tc.steps = argc > 4 ? std::atoi(argv[4]) : 200;
    tc.batch_size = 8;
    tc.lr0 = argc > 5 ? std::atof(argv[5]) : 0.2;
    tc.weight_decay = 1e-4;
    tc.eval_every = 50;
    tc.seed = 1;

    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult r = train_loop(g, train, val, tc);
    const auto secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    for (const auto& rec : r.trace)
        if (rec.has_miou)
            std::printf("step %4lld lr %.4f loss %.4f miou %.4f\n",
                        static_cast<long long>(rec.step), rec.lr, rec.loss, rec.miou);
    const double train_miou = evaluate_miou(g, r.store, train, 4, 255);
    std::printf("train_time=%.1fs  val_miou(final)=%.4f  train_miou=%.4f\n", secs,
                r.trace.back().miou, train_miou);
    return 0;
}

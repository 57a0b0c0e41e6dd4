// Prints the parameter/FLOP budget of every model in the zoo at the standard
// benchmark resolution, plus receptive fields of the topmost pyramid level.

#include <cstdio>

#include "eseg/cost.hpp"
#include "eseg/model.hpp"

int main() {
    using namespace eseg;
    const Shape input{1, 3, 1024, 2048};
    std::printf("%-10s %12s %16s %18s\n", "model", "params", "flops", "peak elems");
    for (const ModelConfig& cfg : model_zoo()) {
        const Graph g = build_model(cfg);
        const CostReport r = cost_report(g, single_input_shapes(g, input));
        std::printf("%-10s %12lld %16lld %18lld\n", cfg.name.c_str(),
                    static_cast<long long>(r.total_params), static_cast<long long>(r.total_flops),
                    static_cast<long long>(r.peak_activation_elems));
    }
    return 0;
}

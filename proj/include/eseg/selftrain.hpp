#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eseg/train.hpp"

namespace eseg {

struct PseudoLabelConfig {
    std::vector<double> scales{1.0};
    bool use_flip = false;
    double threshold = 0.5;
    int ignore_index = 255;
};

inline void check_pseudolabel_config(const PseudoLabelConfig& cfg) {
    if (cfg.scales.empty()) fail("pseudo-labeling needs at least one inference scale");
    for (double s : cfg.scales)
        if (!(s > 0.0)) fail("inference scale must be positive, got ", s);
    if (!(cfg.threshold > 0.0) || !(cfg.threshold < 1.0))
        fail("confidence threshold must lie in (0, 1), got ", cfg.threshold);
}

namespace detail {

// one inference pass: scale, pad to the model's divisibility, run, softmax,
// crop the padding away, resize the probabilities back to the original grid
inline Tensor scaled_pass(const Graph& g, const ParamStore& store, const Tensor& image,
                          double scale) {
    const Shape is = image.shape();
    Tensor img = image;
    const auto sh = std::max<std::int64_t>(1, std::llround(static_cast<double>(is.h) * scale));
    const auto sw = std::max<std::int64_t>(1, std::llround(static_cast<double>(is.w) * scale));
    if (sh != is.h || sw != is.w) img = bilinear_resize(img, sh, sw);

    const std::int64_t div = g.divisibility;
    const std::int64_t ph = (sh + div - 1) / div * div;
    const std::int64_t pw = (sw + div - 1) / div * div;
    if (ph != sh || pw != sw) img = pad_bottom_right(img, ph, pw, channel_means(img));

    const auto outs = forward(g, store, {{g.inputs.begin()->first, img}}, ExecMode::Infer);
    auto it = outs.find("logits");
    if (it == outs.end()) fail("model graph has no 'logits' output");
    Tensor probs = softmax_channels(it->second.astype(DType::F64));
    if (probs.shape().h != ph || probs.shape().w != pw)
        fail_shape("model output ", probs.shape().str(), " does not match its input grid ",
                   ph, "x", pw);
    if (ph != sh || pw != sw) probs = crop(probs, 0, 0, sh, sw);
    if (sh != is.h || sw != is.w) probs = bilinear_resize(probs, is.h, is.w);
    return probs;
}

}  // namespace detail

// Averaged per-pixel class distribution over the configured scales, plus a
// horizontally flipped pass per scale when enabled. All passes carry equal
// weight; the order of averaging follows the scale list for determinism.
inline Tensor multiscale_infer(const Graph& g, const ParamStore& store, const Tensor& image,
                               const PseudoLabelConfig& cfg) {
    check_pseudolabel_config(cfg);
    if (g.inputs.size() != 1) fail("multi-scale inference needs a single-input model");
    const Shape is = image.shape();
    std::vector<double> acc(static_cast<std::size_t>(is.n * is.h * is.w *
                                                     node_channels(g, g.output_id("logits"))),
                            0.0);
    Shape ps;
    int passes = 0;
    auto accumulate = [&](const Tensor& probs) {
        ps = probs.shape();
        for (std::int64_t i = 0; i < probs.elems(); ++i)
            acc[static_cast<std::size_t>(i)] += probs.item(i);
        ++passes;
    };
    for (double s : cfg.scales) {
        accumulate(detail::scaled_pass(g, store, image, s));
        if (cfg.use_flip)
            accumulate(detail::hflip(detail::scaled_pass(g, store, detail::hflip(image), s)));
    }
    for (double& v : acc) v /= passes;
    return Tensor::from_f64(ps, std::move(acc));
}

// Hard labels from a probability map: the argmax class where its probability
// strictly exceeds the threshold, the ignore label everywhere else.
inline Tensor pseudolabel(const Tensor& probs, const PseudoLabelConfig& cfg) {
    check_pseudolabel_config(cfg);
    const Shape s = probs.shape();
    if (s.c < 2) fail("probability map needs at least 2 classes, got ", s.c);
    const std::int64_t hw = s.h * s.w;
    std::vector<float> out(static_cast<std::size_t>(s.n * hw));
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t p = 0; p < hw; ++p) {
            double total = 0.0;
            double best = -1.0;
            std::int64_t arg = 0;
            for (std::int64_t c = 0; c < s.c; ++c) {
                const double v = probs.item((n * s.c + c) * hw + p);
                total += v;
                if (v > best) {
                    best = v;
                    arg = c;
                }
            }
            if (std::abs(total - 1.0) > 1e-4)
                fail("probabilities at pixel ", n * hw + p, " sum to ", total,
                     ", not a distribution");
            out[static_cast<std::size_t>(n * hw + p)] =
                best > cfg.threshold ? static_cast<float>(arg)
                                     : static_cast<float>(cfg.ignore_index);
        }
    return Tensor::from_f32({s.n, 1, s.h, s.w}, std::move(out));
}

// ---------------------------------------------------------------------------
// Half-and-half batch mixing

struct MixedBatchSampler {
    std::int64_t labeled_count = 0;
    std::int64_t pseudo_count = 0;
    double ratio = 0.5;  // fraction of each batch drawn from the labeled pool
    Rng rng{0};
};

struct BatchItem {
    std::int64_t index = 0;
    bool labeled = true;
};

// One batch manifest: the labeled share first, then the pseudo share, both
// sampled with replacement. Deterministic given the sampler's seed; repeated
// calls advance its generator.
inline std::vector<BatchItem> mix_batches(MixedBatchSampler& sampler, int batch_size) {
    if (batch_size < 1) fail("batch size must be positive, got ", batch_size);
    if (sampler.ratio < 0.0 || sampler.ratio > 1.0)
        fail("labeled ratio must lie in [0, 1], got ", sampler.ratio);
    const double want = sampler.ratio * batch_size;
    const auto labeled_n = std::llround(want);
    if (std::abs(want - static_cast<double>(labeled_n)) > 1e-9)
        fail("ratio ", sampler.ratio, " does not split a batch of ", batch_size,
             " into whole items");
    const std::int64_t pseudo_n = batch_size - labeled_n;
    if (labeled_n > 0 && sampler.labeled_count < 1) fail("labeled source is empty");
    if (pseudo_n > 0 && sampler.pseudo_count < 1) fail("pseudo source is empty");

    std::vector<BatchItem> manifest;
    manifest.reserve(static_cast<std::size_t>(batch_size));
    for (std::int64_t i = 0; i < labeled_n; ++i)
        manifest.push_back({sampler.rng.uniform_int(0, sampler.labeled_count - 1), true});
    for (std::int64_t i = 0; i < pseudo_n; ++i)
        manifest.push_back({sampler.rng.uniform_int(0, sampler.pseudo_count - 1), false});
    return manifest;
}

}  // namespace eseg

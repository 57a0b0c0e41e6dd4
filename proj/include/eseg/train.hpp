#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "eseg/graph.hpp"
#include "eseg/metrics.hpp"

namespace eseg {

namespace detail {

// materializes a tensor from a flat-index value generator
template <typename Fn>
Tensor build_tensor(Shape s, DType dt, Fn&& value_at) {
    if (dt == DType::F32) {
        std::vector<float> v(static_cast<std::size_t>(s.elems()));
        for (std::int64_t i = 0; i < s.elems(); ++i)
            v[static_cast<std::size_t>(i)] = static_cast<float>(value_at(i));
        return Tensor::from_f32(s, std::move(v));
    }
    std::vector<double> v(static_cast<std::size_t>(s.elems()));
    for (std::int64_t i = 0; i < s.elems(); ++i) v[static_cast<std::size_t>(i)] = value_at(i);
    return Tensor::from_f64(s, std::move(v));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Loss

struct OhemConfig {
    double prob_threshold = 0.7;
    double min_kept_fraction = 1.0 / 16.0;
    int ignore_index = 255;
};

inline void check_ohem_config(const OhemConfig& cfg) {
    if (!(cfg.prob_threshold > 0.0 && cfg.prob_threshold <= 1.0))
        fail("hard-example probability threshold must be in (0, 1], got ", cfg.prob_threshold);
    if (!(cfg.min_kept_fraction > 0.0 && cfg.min_kept_fraction <= 1.0))
        fail("minimum kept fraction must be in (0, 1], got ", cfg.min_kept_fraction);
}

struct LossResult {
    double loss = 0.0;
    Tensor dlogits;
    std::int64_t kept = 0;
    std::int64_t valid = 0;
    bool all_ignored = false;
};

// Per-pixel softmax cross-entropy with online hard-example mining: a pixel is
// kept while the probability of its true class stays below the threshold, and
// when too few qualify the hardest min_kept_fraction of the valid pixels are
// kept instead. Returns the mean over kept pixels and its logits gradient.
inline LossResult cross_entropy_ohem(const Tensor& logits, const Tensor& labels,
                                     const OhemConfig& cfg) {
    check_ohem_config(cfg);
    const Shape ls = logits.shape();
    const Shape ys = labels.shape();
    if (ls.c < 2) fail("loss needs at least 2 classes, got ", ls.c);
    if (ys.c != 1 || ys.n != ls.n || ys.h != ls.h || ys.w != ls.w)
        fail_shape("labels ", ys.str(), " do not match logits ", ls.str());

    const std::int64_t hw = ls.h * ls.w;
    const std::int64_t pixels = ls.n * hw;
    const std::int64_t k = ls.c;

    struct Pixel {
        double prob;       // probability of the true class
        std::int64_t idx;  // flat pixel index (n*hw + p)
        int label;
    };
    std::vector<Pixel> valid;
    valid.reserve(static_cast<std::size_t>(pixels));
    std::vector<double> logp(static_cast<std::size_t>(pixels * k));
    bool finite = true;

    for (std::int64_t n = 0; n < ls.n; ++n) {
        for (std::int64_t p = 0; p < hw; ++p) {
            const std::int64_t pix = n * hw + p;
            const double lv = labels.item(pix);
            const int label = static_cast<int>(lv);
            if (static_cast<double>(label) != lv ||
                (label != cfg.ignore_index && (label < 0 || label >= k)))
                fail("label value ", lv, " is not a class in [0, ", k, ") or the ignore label ",
                     cfg.ignore_index);
            if (label == cfg.ignore_index) continue;
            double mx = logits.item((n * k) * hw + p);
            for (std::int64_t c = 1; c < k; ++c)
                mx = std::max(mx, logits.item((n * k + c) * hw + p));
            double denom = 0.0;
            for (std::int64_t c = 0; c < k; ++c)
                denom += std::exp(logits.item((n * k + c) * hw + p) - mx);
            const double log_denom = std::log(denom);
            for (std::int64_t c = 0; c < k; ++c)
                logp[static_cast<std::size_t>(pix * k + c)] =
                    logits.item((n * k + c) * hw + p) - mx - log_denom;
            if (!std::isfinite(logp[static_cast<std::size_t>(pix * k + label)])) finite = false;
            valid.push_back(
                {std::exp(logp[static_cast<std::size_t>(pix * k + label)]), pix, label});
        }
    }

    LossResult out;
    if (!finite) {
        // Propagate the blow-up as a NaN loss instead of selecting pixels by
        // NaN probabilities; callers abort on a non-finite loss.
        out.loss = std::numeric_limits<double>::quiet_NaN();
        out.valid = static_cast<std::int64_t>(valid.size());
        out.dlogits = Tensor::zeros(ls, logits.dtype());
        return out;
    }
    out.valid = static_cast<std::int64_t>(valid.size());
    if (valid.empty()) {
        out.all_ignored = true;
        out.dlogits = Tensor::zeros(ls, logits.dtype());
        return out;
    }

    std::vector<const Pixel*> kept;
    kept.reserve(valid.size());
    for (const Pixel& px : valid)
        if (px.prob < cfg.prob_threshold) kept.push_back(&px);
    const auto floor_kept =
        static_cast<std::int64_t>(cfg.min_kept_fraction * static_cast<double>(valid.size()));
    const std::int64_t min_kept = std::max<std::int64_t>(1, floor_kept);
    if (static_cast<std::int64_t>(kept.size()) < min_kept) {
        std::vector<const Pixel*> order;
        order.reserve(valid.size());
        for (const Pixel& px : valid) order.push_back(&px);
        std::sort(order.begin(), order.end(), [](const Pixel* a, const Pixel* b) {
            return a->prob != b->prob ? a->prob < b->prob : a->idx < b->idx;
        });
        order.resize(static_cast<std::size_t>(
            std::min<std::int64_t>(min_kept, static_cast<std::int64_t>(order.size()))));
        kept = std::move(order);
    }
    out.kept = static_cast<std::int64_t>(kept.size());

    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(out.kept);
    std::vector<double> grad(static_cast<std::size_t>(ls.elems()), 0.0);
    for (const Pixel* px : kept) {
        total -= logp[static_cast<std::size_t>(px->idx * k + px->label)];
        const std::int64_t n = px->idx / hw;
        const std::int64_t p = px->idx % hw;
        for (std::int64_t c = 0; c < k; ++c) {
            const double soft = std::exp(logp[static_cast<std::size_t>(px->idx * k + c)]);
            grad[static_cast<std::size_t>((n * k + c) * hw + p)] =
                (soft - (c == px->label ? 1.0 : 0.0)) * inv;
        }
    }
    out.loss = total * inv;
    out.dlogits = detail::build_tensor(ls, logits.dtype(),
                                       [&](std::int64_t i) { return grad[static_cast<std::size_t>(i)]; });
    return out;
}

// ---------------------------------------------------------------------------
// Schedules and parameter updates

inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0) {
    if (total_steps < 1) fail("schedule needs at least 1 step, got ", total_steps);
    if (step < 0 || step > total_steps)
        fail("schedule step ", step, " outside [0, ", total_steps, "]");
    constexpr double pi = 3.14159265358979323846;
    return 0.5 * lr0 *
           (1.0 + std::cos(pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

struct SgdState {
    std::map<std::string, Tensor> velocity;
};

// Classic momentum update over every entry in grads: v <- m*v + g + wd*p,
// then p <- p - lr*v. Parameters without a gradient are untouched.
inline void sgd_step(ParamStore& params, const std::map<std::string, Tensor>& grads,
                     SgdState& state, double lr, double momentum, double weight_decay) {
    for (const auto& [name, grad] : grads) {
        auto it = params.values.find(name);
        if (it == params.values.end()) fail("gradient for unknown parameter '", name, "'");
        const Tensor& param = it->second;
        if (!(param.shape() == grad.shape()))
            fail_shape("gradient shape ", grad.shape().str(), " does not match parameter '",
                       name, "' ", param.shape().str());
        check_same_dtype(param, grad, "sgd_step");
        auto vit = state.velocity.find(name);
        if (vit == state.velocity.end())
            vit = state.velocity.emplace(name, Tensor::zeros(param.shape(), param.dtype())).first;
        const Tensor& vel = vit->second;
        const Tensor new_vel = detail::build_tensor(param.shape(), param.dtype(), [&](std::int64_t i) {
            return momentum * vel.item(i) + grad.item(i) + weight_decay * param.item(i);
        });
        const Tensor new_param = detail::build_tensor(param.shape(), param.dtype(), [&](std::int64_t i) {
            return param.item(i) - lr * new_vel.item(i);
        });
        vit->second = new_vel;
        it->second = new_param;
    }
}

struct EmaState {
    double decay = 0.999;
    std::map<std::string, Tensor> shadow;
};

// Shadow copies of the trainable parameters (running statistics excluded).
inline EmaState ema_init(const Graph& g, const ParamStore& params, double decay = 0.999) {
    EmaState state;
    state.decay = decay;
    for (const auto& [name, spec] : g.params) state.shadow.emplace(name, params.get(name));
    return state;
}

inline void ema_update(EmaState& state, const ParamStore& params) {
    for (auto& [name, shadow] : state.shadow) {
        const Tensor& p = params.get(name);
        if (!(p.shape() == shadow.shape()))
            fail_shape("moving-average shape ", shadow.shape().str(),
                       " does not match parameter '", name, "' ", p.shape().str());
        const Tensor& prev = shadow;
        const double d = state.decay;
        shadow = detail::build_tensor(p.shape(), p.dtype(), [&](std::int64_t i) {
            return d * prev.item(i) + (1.0 - d) * p.item(i);
        });
    }
}

// Store with shadow values swapped in for the trainable parameters; running
// statistics and anything else pass through.
inline ParamStore ema_params(const EmaState& state, const ParamStore& base) {
    ParamStore out = base;
    for (const auto& [name, shadow] : state.shadow) out.values[name] = shadow;
    return out;
}

// ---------------------------------------------------------------------------
// Data augmentation

struct Sample {
    Tensor image;  // (1, c, h, w)
    Tensor label;  // (1, 1, h, w)
};

struct AugmentConfig {
    double scale_lo = 1.0;
    double scale_hi = 1.0;
    int crop_h = 0;  // 0 keeps the full extent
    int crop_w = 0;
    double hflip_p = 0.0;
    int ignore_index = 255;
};

namespace detail {

inline Tensor pad_bottom_right(const Tensor& x, std::int64_t out_h, std::int64_t out_w,
                               const std::vector<double>& fill) {
    const Shape s = x.shape();
    if (s.h == out_h && s.w == out_w) return x;
    const Shape os{s.n, s.c, out_h, out_w};
    return build_tensor(os, x.dtype(), [&](std::int64_t i) {
        const std::int64_t xw = i % out_w;
        const std::int64_t y = (i / out_w) % out_h;
        const std::int64_t c = (i / (out_w * out_h)) % s.c;
        const std::int64_t n = i / (out_w * out_h * s.c);
        if (y >= s.h || xw >= s.w) return fill[static_cast<std::size_t>(c)];
        return x.item(((n * s.c + c) * s.h + y) * s.w + xw);
    });
}

inline Tensor crop(const Tensor& x, std::int64_t oy, std::int64_t ox, std::int64_t h,
                   std::int64_t w) {
    const Shape s = x.shape();
    const Shape os{s.n, s.c, h, w};
    return build_tensor(os, x.dtype(), [&](std::int64_t i) {
        const std::int64_t xw = i % w;
        const std::int64_t y = (i / w) % h;
        const std::int64_t c = (i / (w * h)) % s.c;
        const std::int64_t n = i / (w * h * s.c);
        return x.item(((n * s.c + c) * s.h + (y + oy)) * s.w + (xw + ox));
    });
}

inline Tensor hflip(const Tensor& x) {
    const Shape s = x.shape();
    return build_tensor(s, x.dtype(), [&](std::int64_t i) {
        const std::int64_t xw = i % s.w;
        return x.item(i - xw + (s.w - 1 - xw));
    });
}

inline std::vector<double> channel_means(const Tensor& x) {
    const Shape s = x.shape();
    std::vector<double> means(static_cast<std::size_t>(s.c), 0.0);
    const std::int64_t hw = s.h * s.w;
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t c = 0; c < s.c; ++c) {
            double sum = 0.0;
            for (std::int64_t p = 0; p < hw; ++p) sum += x.item((n * s.c + c) * hw + p);
            means[static_cast<std::size_t>(c)] += sum / static_cast<double>(hw * s.n);
        }
    return means;
}

}  // namespace detail

// Scale jitter (bilinear image, nearest labels), pad when the crop outgrows
// the scaled extent (mean pixel for the image, ignore label for the targets),
// random crop, random horizontal flip. Draw order is fixed: scale, crop row,
// crop column, flip.
inline Sample augment(const Tensor& image, const Tensor& label, Rng& rng,
                      const AugmentConfig& cfg) {
    const Shape is = image.shape();
    const Shape ys = label.shape();
    if (ys.h != is.h || ys.w != is.w || ys.c != 1 || ys.n != is.n)
        fail_shape("label map ", ys.str(), " does not match image ", is.str());
    if (cfg.scale_lo > cfg.scale_hi || cfg.scale_lo <= 0.0)
        fail("scale range [", cfg.scale_lo, ", ", cfg.scale_hi, "] is invalid");

    const double u = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    Tensor img = image;
    Tensor lab = label;
    const auto sh = std::max<std::int64_t>(1, std::llround(static_cast<double>(is.h) * u));
    const auto sw = std::max<std::int64_t>(1, std::llround(static_cast<double>(is.w) * u));
    if (sh != is.h || sw != is.w) {
        img = bilinear_resize(img, sh, sw);
        lab = nearest_resize(lab, sh, sw);
    }

    const std::int64_t ch = cfg.crop_h > 0 ? cfg.crop_h : img.shape().h;
    const std::int64_t cw = cfg.crop_w > 0 ? cfg.crop_w : img.shape().w;
    if (img.shape().h < ch || img.shape().w < cw) {
        const std::int64_t ph = std::max(img.shape().h, ch);
        const std::int64_t pw = std::max(img.shape().w, cw);
        img = detail::pad_bottom_right(img, ph, pw, detail::channel_means(img));
        lab = detail::pad_bottom_right(lab, ph, pw, {static_cast<double>(cfg.ignore_index)});
    }
    const std::int64_t oy = rng.uniform_int(0, img.shape().h - ch);
    const std::int64_t ox = rng.uniform_int(0, img.shape().w - cw);
    if (img.shape().h != ch || img.shape().w != cw) {
        img = detail::crop(img, oy, ox, ch, cw);
        lab = detail::crop(lab, oy, ox, ch, cw);
    }
    if (rng.bernoulli(cfg.hflip_p)) {
        img = detail::hflip(img);
        lab = detail::hflip(lab);
    }
    return {img, lab};
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    std::int64_t steps = 200;
    int batch_size = 8;
    double lr0 = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0;
    double ema_decay = 0.999;
    bool eval_with_ema = false;
    std::int64_t eval_every = 0;  // 0 evaluates only after the final step
    OhemConfig ohem;
    AugmentConfig aug;
    std::uint64_t seed = 0;
    DType dtype = DType::F32;
};

struct StepRecord {
    std::int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double miou = 0.0;
    bool has_miou = false;
};

struct TrainResult {
    ParamStore store;  // trained parameters and running statistics
    EmaState ema;
    std::vector<StepRecord> trace;
    std::int64_t all_ignored_batches = 0;
};

namespace detail {

inline Tensor batch_concat(const std::vector<Tensor>& xs) {
    const Shape s0 = xs.front().shape();
    std::int64_t n = 0;
    for (const Tensor& x : xs) {
        const Shape s = x.shape();
        if (s.c != s0.c || s.h != s0.h || s.w != s0.w)
            fail_shape("cannot batch ", s.str(), " with ", s0.str());
        check_same_dtype(x, xs.front(), "batch");
        n += s.n;
    }
    const std::int64_t per = s0.c * s0.h * s0.w;
    return build_tensor({n, s0.c, s0.h, s0.w}, xs.front().dtype(), [&](std::int64_t i) {
        std::int64_t sample = i / per, rest = i % per;
        std::size_t which = 0;
        while (sample >= xs[which].shape().n) {
            sample -= xs[which].shape().n;
            ++which;
        }
        return xs[which].item(sample * per + rest);
    });
}

}  // namespace detail

inline ConfusionMatrix evaluate_confusion(const Graph& g, const ParamStore& store,
                                           const std::vector<Sample>& data, int num_classes,
                                           int ignore_index) {
    ConfusionMatrix cm(num_classes, ignore_index);
    for (const Sample& s : data) {
        const Tensor logits =
            forward(g, store, {{"image", s.image}}, ExecMode::Infer).at("logits");
        Tensor pred = argmax_channels(logits);
        if (pred.shape().h != s.label.shape().h || pred.shape().w != s.label.shape().w)
            pred = nearest_resize(pred, s.label.shape().h, s.label.shape().w);
        accumulate(cm, pred, s.label);
    }
    return cm;
}

inline double evaluate_miou(const Graph& g, const ParamStore& store,
                            const std::vector<Sample>& data, int num_classes, int ignore_index) {
    return miou(evaluate_confusion(g, store, data, num_classes, ignore_index));
}

// Deterministic end-to-end loop: cosine schedule, hard-example-mined loss on
// logits at label resolution, momentum updates, moving-average shadows, and
// running-statistic refresh each step.
inline TrainResult train_loop(const Graph& g, const std::vector<Sample>& train_data,
                              const std::vector<Sample>& eval_data, const TrainConfig& cfg) {
    if (train_data.empty()) fail("training needs a nonempty dataset");
    if (cfg.batch_size < 1) fail("batch size must be >= 1, got ", cfg.batch_size);
    check_ohem_config(cfg.ohem);

    TrainResult result;
    result.store = init_params(g, cfg.seed, cfg.dtype);
    result.ema = ema_init(g, result.store, cfg.ema_decay);
    SgdState sgd;
    Rng root(cfg.seed);
    const int logits_id = g.output_id("logits");
    const int num_classes = node_channels(g, logits_id);

    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        const double lr = cosine_lr(step, cfg.steps, cfg.lr0);
        Rng srng = root.fork(static_cast<std::uint64_t>(step) + 1);
        std::vector<Tensor> images, labels;
        images.reserve(static_cast<std::size_t>(cfg.batch_size));
        labels.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto idx = static_cast<std::size_t>(
                srng.uniform_int(0, static_cast<std::int64_t>(train_data.size()) - 1));
            Sample s = augment(train_data[idx].image, train_data[idx].label, srng, cfg.aug);
            images.push_back(s.image.dtype() == cfg.dtype ? s.image : s.image.astype(cfg.dtype));
            labels.push_back(std::move(s.label));
        }
        const Tensor image = detail::batch_concat(images);
        const Tensor label = detail::batch_concat(labels);

        Trace trace = forward_trace(g, result.store, {{"image", image}}, ExecMode::Train);
        const Tensor& logits = trace.values[static_cast<std::size_t>(logits_id)];
        const bool needs_resize =
            logits.shape().h != label.shape().h || logits.shape().w != label.shape().w;
        const Tensor at_label_res =
            needs_resize ? bilinear_resize(logits, label.shape().h, label.shape().w) : logits;
        const LossResult loss = cross_entropy_ohem(at_label_res, label, cfg.ohem);
        if (!std::isfinite(loss.loss))
            fail("loss diverged at step ", step, " (", loss.loss, "); lr was ", lr);
        if (loss.all_ignored) ++result.all_ignored_batches;

        const Tensor seed_grad = needs_resize
                                     ? resize_backward(logits, ResizeMode::Bilinear, loss.dlogits)
                                     : loss.dlogits;
        const Gradients grads = backward_from(g, result.store, trace, {{logits_id, seed_grad}});
        sgd_step(result.store, grads.params, sgd, lr, cfg.momentum, cfg.weight_decay);
        for (const auto& [name, value] : trace.buffer_updates) result.store.set(name, value);
        ema_update(result.ema, result.store);

        StepRecord rec;
        rec.step = step;
        rec.lr = lr;
        rec.loss = loss.loss;
        const bool last = step + 1 == cfg.steps;
        const bool scheduled = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if (!eval_data.empty() && (scheduled || last)) {
            const ParamStore eval_store =
                cfg.eval_with_ema ? ema_params(result.ema, result.store) : result.store;
            rec.miou =
                evaluate_miou(g, eval_store, eval_data, num_classes, cfg.ohem.ignore_index);
            rec.has_miou = true;
        }
        result.trace.push_back(rec);
    }
    return result;
}

}  // namespace eseg

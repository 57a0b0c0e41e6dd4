#pragma once

#include <cstdint>
#include <vector>

#include "eseg/tensor.hpp"

namespace eseg {

// Row = ground truth, column = prediction. Pixels whose truth equals
// ignore_index never enter the counts.
struct ConfusionMatrix {
    int num_classes = 0;
    int ignore_index = 255;
    std::vector<std::int64_t> counts;

    ConfusionMatrix(int k, int ignore = 255)
        : num_classes(k), ignore_index(ignore),
          counts(static_cast<std::size_t>(k) * static_cast<std::size_t>(k), 0) {
        if (k < 2) fail("confusion matrix needs at least 2 classes, got ", k);
    }

    std::int64_t& at(int truth, int pred) {
        return counts[static_cast<std::size_t>(truth) * static_cast<std::size_t>(num_classes) +
                      static_cast<std::size_t>(pred)];
    }
    std::int64_t at(int truth, int pred) const {
        return counts[static_cast<std::size_t>(truth) * static_cast<std::size_t>(num_classes) +
                      static_cast<std::size_t>(pred)];
    }

    std::int64_t total() const {
        std::int64_t t = 0;
        for (std::int64_t c : counts) t += c;
        return t;
    }

    void merge(const ConfusionMatrix& other) {
        if (other.num_classes != num_classes)
            fail("cannot merge confusion matrices with ", other.num_classes, " and ",
                 num_classes, " classes");
        if (other.ignore_index != ignore_index)
            fail("cannot merge confusion matrices with different ignore labels");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    }
};

namespace detail {

inline int class_id(const Tensor& t, std::int64_t i, int k, int ignore, const char* what) {
    const double v = t.item(i);
    const int c = static_cast<int>(v);
    if (static_cast<double>(c) == v && (c == ignore || (c >= 0 && c < k))) return c;
    fail(what, " value ", v, " is not a class in [0, ", k, ") or the ignore label ", ignore);
}

}  // namespace detail

inline void accumulate(ConfusionMatrix& cm, const Tensor& pred, const Tensor& truth) {
    if (!(pred.shape() == truth.shape()))
        fail_shape("label map shapes differ: ", pred.shape().str(), " vs ", truth.shape().str());
    for (std::int64_t i = 0; i < truth.elems(); ++i) {
        const int t = detail::class_id(truth, i, cm.num_classes, cm.ignore_index, "truth");
        if (t == cm.ignore_index) continue;
        const int p = detail::class_id(pred, i, cm.num_classes, cm.ignore_index, "prediction");
        if (p == cm.ignore_index)
            fail("prediction is the ignore label at a counted pixel (index ", i, ")");
        ++cm.at(t, p);
    }
}

enum class ZeroUnion { Exclude, CountAsZero };

struct ClassIou {
    std::vector<double> iou;    // zero for classes without support
    std::vector<bool> present;  // true when the union is nonzero
};

inline ClassIou per_class_iou(const ConfusionMatrix& cm) {
    const int k = cm.num_classes;
    ClassIou out;
    out.iou.assign(static_cast<std::size_t>(k), 0.0);
    out.present.assign(static_cast<std::size_t>(k), false);
    for (int c = 0; c < k; ++c) {
        std::int64_t row = 0, col = 0;
        for (int j = 0; j < k; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        const std::int64_t inter = cm.at(c, c);
        const std::int64_t uni = row + col - inter;
        if (uni > 0) {
            out.iou[static_cast<std::size_t>(c)] =
                static_cast<double>(inter) / static_cast<double>(uni);
            out.present[static_cast<std::size_t>(c)] = true;
        }
    }
    return out;
}

inline double miou(const ConfusionMatrix& cm, ZeroUnion policy = ZeroUnion::Exclude) {
    const ClassIou per = per_class_iou(cm);
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < cm.num_classes; ++c) {
        sum += per.iou[static_cast<std::size_t>(c)];
        if (per.present[static_cast<std::size_t>(c)]) ++present;
    }
    if (present == 0) fail("mean IoU is undefined: no class has any support");
    const int denom = policy == ZeroUnion::Exclude ? present : cm.num_classes;
    return sum / denom;
}

inline double pixel_accuracy(const ConfusionMatrix& cm) {
    const std::int64_t total = cm.total();
    if (total == 0) fail("pixel accuracy is undefined: confusion matrix is empty");
    std::int64_t trace = 0;
    for (int c = 0; c < cm.num_classes; ++c) trace += cm.at(c, c);
    return static_cast<double>(trace) / static_cast<double>(total);
}

// Channel-wise argmax to a label map; ties resolve to the lowest class index.
inline Tensor argmax_channels(const Tensor& x) {
    const Shape s = x.shape();
    const std::int64_t hw = s.h * s.w;
    std::vector<float> out(static_cast<std::size_t>(s.n * hw));
    for (std::int64_t n = 0; n < s.n; ++n) {
        for (std::int64_t p = 0; p < hw; ++p) {
            int best = 0;
            double best_v = x.item((n * s.c) * hw + p);
            for (std::int64_t c = 1; c < s.c; ++c) {
                const double v = x.item((n * s.c + c) * hw + p);
                if (v > best_v) {
                    best_v = v;
                    best = static_cast<int>(c);
                }
            }
            out[static_cast<std::size_t>(n * hw + p)] = static_cast<float>(best);
        }
    }
    return Tensor::from_f32({s.n, 1, s.h, s.w}, std::move(out));
}

}  // namespace eseg

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "eseg/common.hpp"

namespace eseg {

// Dense 4-d NCHW tensor, row-major (n-major, w-minor), immutable after
// construction. Payload is shared, so copies are cheap and tensors are safe
// to hand across threads.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape s, DType dt) { return filled(s, dt, 0.0); }

    static Tensor filled(Shape s, DType dt, double value) {
        check_shape(s);
        if (dt == DType::F32) {
            return Tensor(s, std::make_shared<std::vector<float>>(
                                 static_cast<std::size_t>(s.elems()), static_cast<float>(value)));
        }
        return Tensor(s, std::make_shared<std::vector<double>>(
                             static_cast<std::size_t>(s.elems()), value));
    }

    static Tensor from_f32(Shape s, std::vector<float> data) {
        check_shape(s);
        if (static_cast<std::int64_t>(data.size()) != s.elems())
            fail_shape("tensor payload length ", data.size(), " does not match shape ", s.str());
        return Tensor(s, std::make_shared<std::vector<float>>(std::move(data)));
    }

    static Tensor from_f64(Shape s, std::vector<double> data) {
        check_shape(s);
        if (static_cast<std::int64_t>(data.size()) != s.elems())
            fail_shape("tensor payload length ", data.size(), " does not match shape ", s.str());
        return Tensor(s, std::make_shared<std::vector<double>>(std::move(data)));
    }

    template <typename T>
    static Tensor from(Shape s, std::vector<T> data) {
        if constexpr (std::is_same_v<T, float>)
            return from_f32(s, std::move(data));
        else
            return from_f64(s, std::move(data));
    }

    static Tensor scalar(double v, DType dt) { return filled(Shape{1, 1, 1, 1}, dt, v); }

    // 1-d parameter vector stored as (1, len, 1, 1)
    template <typename T>
    static Tensor vec(std::vector<T> data) {
        const auto len = static_cast<std::int64_t>(data.size());
        return from<T>(Shape{1, len, 1, 1}, std::move(data));
    }

    const Shape& shape() const { return shape_; }
    DType dtype() const { return dtype_; }
    std::int64_t elems() const { return shape_.elems(); }
    bool defined() const { return f32_ != nullptr || f64_ != nullptr; }

    template <typename T>
    std::span<const T> data() const {
        if constexpr (std::is_same_v<T, float>) {
            if (dtype_ != DType::F32 || !f32_) fail("tensor is not f32");
            return std::span<const T>(f32_->data(), f32_->size());
        } else {
            static_assert(std::is_same_v<T, double>);
            if (dtype_ != DType::F64 || !f64_) fail("tensor is not f64");
            return std::span<const T>(f64_->data(), f64_->size());
        }
    }

    template <typename T>
    T at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data<T>()[static_cast<std::size_t>(index(n, c, h, w))];
    }

    std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }

    // element as double regardless of storage type
    double item(std::int64_t i) const {
        return dtype_ == DType::F32 ? static_cast<double>((*f32_)[static_cast<std::size_t>(i)])
                                    : (*f64_)[static_cast<std::size_t>(i)];
    }

    double scalar_value() const {
        if (elems() != 1) fail_shape("expected scalar tensor, got shape ", shape_.str());
        return item(0);
    }

    Tensor astype(DType dt) const {
        if (dt == dtype_) return *this;
        if (dt == DType::F32) {
            std::vector<float> out(static_cast<std::size_t>(elems()));
            auto src = data<double>();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(src[i]);
            return from_f32(shape_, std::move(out));
        }
        std::vector<double> out(static_cast<std::size_t>(elems()));
        auto src = data<float>();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(src[i]);
        return from_f64(shape_, std::move(out));
    }

private:
    Tensor(Shape s, std::shared_ptr<std::vector<float>> d)
        : shape_(s), dtype_(DType::F32), f32_(std::move(d)) {}
    Tensor(Shape s, std::shared_ptr<std::vector<double>> d)
        : shape_(s), dtype_(DType::F64), f64_(std::move(d)) {}

    static void check_shape(const Shape& s) {
        if (!s.valid()) fail_shape("all tensor dims must be positive, got ", s.str());
    }

    Shape shape_{};
    DType dtype_ = DType::F32;
    std::shared_ptr<const std::vector<float>> f32_;
    std::shared_ptr<const std::vector<double>> f64_;
};

inline void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        fail(op, ": mixed element types ", dtype_name(a.dtype()), " vs ", dtype_name(b.dtype()));
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
    if (a.dtype() == DType::F32) {
        auto x = a.data<float>(), y = b.data<float>();
        return std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0;
    }
    auto x = a.data<double>(), y = b.data<double>();
    return std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) fail_shape("max_abs_diff: shapes ", a.shape().str(), " vs ", b.shape().str());
    double m = 0.0;
    for (std::int64_t i = 0; i < a.elems(); ++i) m = std::max(m, std::abs(a.item(i) - b.item(i)));
    return m;
}

template <typename T>
Tensor random_uniform(Shape s, Rng& rng, double lo, double hi) {
    std::vector<T> v(static_cast<std::size_t>(s.elems()));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Tensor::from<T>(s, std::move(v));
}

template <typename T>
Tensor random_normal(Shape s, Rng& rng, double mean, double stddev) {
    std::vector<T> v(static_cast<std::size_t>(s.elems()));
    for (auto& x : v) x = static_cast<T>(rng.normal(mean, stddev));
    return Tensor::from<T>(s, std::move(v));
}

inline Tensor random_uniform(Shape s, DType dt, Rng& rng, double lo, double hi) {
    return dt == DType::F32 ? random_uniform<float>(s, rng, lo, hi)
                            : random_uniform<double>(s, rng, lo, hi);
}

inline Tensor random_normal(Shape s, DType dt, Rng& rng, double mean, double stddev) {
    return dt == DType::F32 ? random_normal<float>(s, rng, mean, stddev)
                            : random_normal<double>(s, rng, mean, stddev);
}

}  // namespace eseg

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace eseg {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline std::size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }
inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

inline DType dtype_from_name(const std::string& s) {
    if (s == "f32") return DType::F32;
    if (s == "f64") return DType::F64;
    throw Error("unknown element type '" + s + "' (expected f32 or f64)");
}

// 4-d NCHW shape. All dims must be positive.
struct Shape {
    std::int64_t n = 0;
    std::int64_t c = 0;
    std::int64_t h = 0;
    std::int64_t w = 0;

    std::int64_t elems() const { return n * c * h * w; }
    bool valid() const { return n > 0 && c > 0 && h > 0 && w > 0; }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        std::ostringstream os;
        os << "(" << n << "," << c << "," << h << "," << w << ")";
        return os.str();
    }
};

template <typename... Args>
[[noreturn]] inline void fail_shape(Args&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    throw ShapeError(os.str());
}

template <typename... Args>
[[noreturn]] inline void fail(Args&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    throw Error(os.str());
}

inline int thread_count() {
    static const int n = [] {
        if (const char* s = std::getenv("ESEG_THREADS")) {
            const int v = std::atoi(s);
            if (v >= 1) return std::min(v, 64);
        }
        const unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : static_cast<int>(std::min(hc, 16u));
    }();
    return n;
}

// Splits [begin, end) into contiguous chunks, one per worker. Each index is
// visited exactly once; fn must not depend on the partitioning for results to
// stay deterministic across thread counts.
template <typename Fn>
void parallel_for(std::int64_t begin, std::int64_t end, Fn&& fn) {
    const std::int64_t total = end - begin;
    if (total <= 0) return;
    const int workers = static_cast<int>(std::min<std::int64_t>(thread_count(), total));
    if (workers <= 1) {
        for (std::int64_t i = begin; i < end; ++i) fn(i);
        return;
    }
    const std::int64_t chunk = (total + workers - 1) / workers;
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(workers));
    for (int t = 0; t < workers; ++t) {
        const std::int64_t lo = begin + t * chunk;
        const std::int64_t hi = std::min(end, lo + chunk);
        if (lo >= hi) break;
        threads.emplace_back([lo, hi, &fn] {
            for (std::int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : threads) th.join();
}

// Deterministic RNG used everywhere randomness is needed. splitmix64 core,
// same stream on every platform (std distributions are not portable).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        // Box-Muller, one draw per call for a fixed consumption pattern
        double u1 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586476925286766559;
        return mean + stddev * r * std::cos(two_pi * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Independent child stream, stable in (seed, key)
    Rng fork(std::uint64_t key) const {
        std::uint64_t z = state_ ^ (0x9e3779b97f4a7c15ULL * (key + 1));
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        return Rng(z ^ (z >> 27));
    }

private:
    std::uint64_t state_;
};

}  // namespace eseg

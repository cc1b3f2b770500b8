// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense numeric core built on row-major matrices. matmul sums in a fixed order
// so a row split over parallel_for never changes a bit.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

namespace finermoe {

enum class ErrorCode {
    shape_mismatch,
    empty_input,
    invalid_config,
    unknown_preset,
    out_of_range,
    io_failure,
    truncated_payload,
    bad_magic,
    unknown_dtype,
    bad_manifest,
    invalid_argument,
};

inline const char* to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::shape_mismatch: return "shape mismatch";
        case ErrorCode::empty_input: return "empty input";
        case ErrorCode::invalid_config: return "invalid config";
        case ErrorCode::unknown_preset: return "unknown preset";
        case ErrorCode::out_of_range: return "out of range";
        case ErrorCode::io_failure: return "I/O failure";
        case ErrorCode::truncated_payload: return "truncated payload";
        case ErrorCode::bad_magic: return "bad magic";
        case ErrorCode::unknown_dtype: return "unknown dtype";
        case ErrorCode::bad_manifest: return "bad manifest";
        case ErrorCode::invalid_argument: return "invalid argument";
    }
    return "error";
}

/// Every failure in the library is reported as an Error carrying a code, so
/// callers (and tests) can tell the failure modes apart without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

// ---------------------------------------------------------------------------
// Execution settings

namespace detail {
inline std::atomic<unsigned>& thread_setting() {
    static std::atomic<unsigned> n{1};
    return n;
}
}  // namespace detail

inline unsigned num_threads() noexcept { return detail::thread_setting().load(); }

namespace detail {
inline bool& inside_parallel_region() noexcept {
    thread_local bool inside = false;
    return inside;
}
}  // namespace detail

inline void set_num_threads(unsigned n) noexcept { detail::thread_setting().store(n == 0 ? 1 : n); }

/// Restores the previous thread count on scope exit.
class ScopedThreads {
public:
    explicit ScopedThreads(unsigned n) : saved_(num_threads()) { set_num_threads(n); }
    ~ScopedThreads() { set_num_threads(saved_); }
    ScopedThreads(const ScopedThreads&) = delete;
    ScopedThreads& operator=(const ScopedThreads&) = delete;

private:
    unsigned saved_;
};

/// Calls fn(i) for i in [0, n). Work is split into contiguous chunks; each
/// index is handled by exactly one thread, so as long as fn(i) only writes
/// outputs owned by i the result does not depend on the thread count.
/// Nested calls run serially on the calling thread.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t threads = std::min<std::size_t>(num_threads(), n);
    if (threads <= 1 || detail::inside_parallel_region()) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t chunk = (n + threads - 1) / threads;
    auto run = [&fn](std::size_t lo, std::size_t hi) {
        detail::inside_parallel_region() = true;
        for (std::size_t i = lo; i < hi; ++i) fn(i);
        detail::inside_parallel_region() = false;
    };
    {
        std::vector<std::jthread> pool;
        pool.reserve(threads - 1);
        for (std::size_t t = 1; t < threads; ++t) {
            const std::size_t lo = t * chunk;
            const std::size_t hi = std::min(n, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(run, lo, hi);
        }
        run(0, std::min(n, chunk));
    }
}

// ---------------------------------------------------------------------------
// Matrix

template <class T>
class Matrix {
    static_assert(std::is_floating_point_v<T>);

public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw Error(ErrorCode::shape_mismatch, "matrix data length " + std::to_string(data_.size()) +
                                                       " does not match " + std::to_string(rows_) + "x" +
                                                       std::to_string(cols_));
        }
    }
    Matrix(std::initializer_list<std::initializer_list<T>> rows) : rows_(rows.size()) {
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw Error(ErrorCode::shape_mismatch, "ragged matrix literal");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }

    std::string shape_string() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    bool operator==(const Matrix& o) const = default;

    /// Columns [c0, c1) as a new matrix.
    Matrix col_block(std::size_t c0, std::size_t c1) const { return block(0, rows_, c0, c1); }

    /// Rows [r0, r1) x columns [c0, c1) as a new matrix.
    Matrix block(std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) const {
        if (r0 > r1 || r1 > rows_ || c0 > c1 || c1 > cols_) {
            throw Error(ErrorCode::out_of_range, "block out of range for " + shape_string());
        }
        Matrix out(r1 - r0, c1 - c0);
        for (std::size_t r = r0; r < r1; ++r) {
            std::copy(data_.begin() + r * cols_ + c0, data_.begin() + r * cols_ + c1, out.row(r - r0).begin());
        }
        return out;
    }

    /// Writes `src` with its top-left corner at (r0, c0).
    void set_block(std::size_t r0, std::size_t c0, const Matrix& src) {
        if (r0 + src.rows() > rows_ || c0 + src.cols() > cols_) {
            throw Error(ErrorCode::out_of_range, "set_block " + src.shape_string() + " into " + shape_string());
        }
        for (std::size_t r = 0; r < src.rows(); ++r) {
            std::copy(src.row(r).begin(), src.row(r).end(), data_.begin() + (r0 + r) * cols_ + c0);
        }
    }

    Matrix transposed() const {
        Matrix out(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
        return out;
    }

    template <class U>
    Matrix<U> cast() const {
        std::vector<U> v(data_.begin(), data_.end());
        return Matrix<U>(rows_, cols_, std::move(v));
    }

    Matrix& operator+=(const Matrix& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        require_same_shape(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Matrix& operator*=(T s) noexcept {
        for (auto& v : data_) v *= s;
        return *this;
    }
    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(Matrix a, T s) { return a *= s; }

private:
    void require_same_shape(const Matrix& o, const char* op) const {
        if (o.rows_ != rows_ || o.cols_ != cols_) {
            throw Error(ErrorCode::shape_mismatch,
                        std::string("operator") + op + ": " + shape_string() + " vs " + o.shape_string());
        }
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

// ---------------------------------------------------------------------------
// Kernels

/// Accumulator precision for dot products. `wide` accumulates float inputs in
/// double (verification builds); double inputs always accumulate in double.
enum class Accumulation { native, wide };

namespace detail {
inline std::atomic<Accumulation>& accumulation_setting() {
    static std::atomic<Accumulation> a{Accumulation::native};
    return a;
}
}  // namespace detail

inline Accumulation default_accumulation() noexcept { return detail::accumulation_setting().load(); }
inline void set_default_accumulation(Accumulation a) noexcept { detail::accumulation_setting().store(a); }

namespace detail {
inline std::atomic<std::uint64_t>& flop_counter() {
    static std::atomic<std::uint64_t> n{0};
    return n;
}
inline std::atomic<bool>& flop_counting() {
    static std::atomic<bool> on{false};
    return on;
}
}  // namespace detail

/// Counts matmul FLOPs (2 m k n per product) issued while alive. Not reentrant.
class FlopCounter {
public:
    FlopCounter() {
        detail::flop_counter().store(0);
        detail::flop_counting().store(true);
    }
    ~FlopCounter() { detail::flop_counting().store(false); }
    FlopCounter(const FlopCounter&) = delete;
    FlopCounter& operator=(const FlopCounter&) = delete;

    std::uint64_t count() const noexcept { return detail::flop_counter().load(); }
};

template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b, Accumulation acc = default_accumulation()) {
    if (a.cols() != b.rows()) {
        throw Error(ErrorCode::shape_mismatch,
                    "matmul: cannot multiply " + a.shape_string() + " by " + b.shape_string());
    }
    if (detail::flop_counting().load(std::memory_order_relaxed)) {
        detail::flop_counter().fetch_add(2ULL * a.rows() * a.cols() * b.cols(), std::memory_order_relaxed);
    }
    Matrix<T> out(a.rows(), b.cols());
    const std::size_t inner = a.cols();
    const std::size_t n = b.cols();
    auto kernel = [&]<class Acc>(std::size_t i, Acc) {
        // Each output element sums its k terms in ascending order.
        std::vector<Acc> buf(n, Acc{0});
        const auto arow = a.row(i);
        for (std::size_t k = 0; k < inner; ++k) {
            const Acc aik = static_cast<Acc>(arow[k]);
            const auto brow = b.row(k);
            for (std::size_t j = 0; j < n; ++j) buf[j] += aik * static_cast<Acc>(brow[j]);
        }
        auto orow = out.row(i);
        for (std::size_t j = 0; j < n; ++j) orow[j] = static_cast<T>(buf[j]);
    };
    if (acc == Accumulation::wide) {
        // Never narrower than T itself (long double stays long double).
        using Wide = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;
        parallel_for(a.rows(), [&](std::size_t i) { kernel(i, Wide{}); });
    } else {
        parallel_for(a.rows(), [&](std::size_t i) { kernel(i, T{}); });
    }
    return out;
}

template <class T>
T sigmoid(T x) noexcept {
    return T{1} / (T{1} + std::exp(-x));
}

template <class T>
T silu(T x) noexcept {
    return x * sigmoid(x);
}

/// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x))).
template <class T>
T silu_grad(T x) noexcept {
    const T s = sigmoid(x);
    return s * (T{1} + x * (T{1} - s));
}

/// Numerically stable softmax (max subtracted, normalizer accumulated in
/// double or in T if T is wider).
template <class T>
std::vector<T> softmax(std::span<const T> v) {
    using W = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;
    if (v.empty()) throw Error(ErrorCode::empty_input, "softmax of an empty vector");
    const T mx = *std::max_element(v.begin(), v.end());
    std::vector<W> e(v.size());
    W sum = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        e[i] = std::exp(static_cast<W>(v[i]) - static_cast<W>(mx));
        sum += e[i];
    }
    std::vector<T> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(e[i] / sum);
    return out;
}

template <class T>
std::vector<T> softmax(const std::vector<T>& v) {
    return softmax(std::span<const T>(v));
}

/// Row-wise softmax.
template <class T>
Matrix<T> softmax_rows(const Matrix<T>& m) {
    Matrix<T> out(m.rows(), m.cols());
    parallel_for(m.rows(), [&](std::size_t r) {
        const auto s = softmax(m.row(r));
        std::copy(s.begin(), s.end(), out.row(r).begin());
    });
    return out;
}

template <class T>
T max_abs(const Matrix<T>& m) noexcept {
    T mx{0};
    for (T v : m.values()) mx = std::max(mx, std::abs(v));
    return mx;
}

template <class T>
bool all_finite(const Matrix<T>& m) noexcept {
    return std::all_of(m.values().begin(), m.values().end(), [](T v) { return std::isfinite(v); });
}

/// max |a - b| / max(max |b|, tiny): the norm-wise relative error used by the
/// oracle comparisons.
template <class T>
double max_relative_error(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw Error(ErrorCode::shape_mismatch, "compare " + a.shape_string() + " with " + b.shape_string());
    }
    double diff = 0.0;
    double ref = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(static_cast<double>(a.values()[i]) - static_cast<double>(b.values()[i])));
        ref = std::max(ref, std::abs(static_cast<double>(b.values()[i])));
    }
    return diff / std::max(ref, std::numeric_limits<double>::min());
}

// ---------------------------------------------------------------------------
// Rng

/// xoshiro256** seeded through splitmix64. Integer output is identical on every
/// platform; real-valued draws go through the documented conversions below.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
        std::uint64_t sm = seed;
        for (auto& s : state_) s = splitmix64(sm);
    }

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() noexcept {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw Error(ErrorCode::invalid_argument, "Rng::below(0)");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    /// Standard normal via Box-Muller (both variates used).
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

    /// Derives an independent stream, e.g. one per expert.
    Rng fork(std::uint64_t stream) const noexcept {
        std::uint64_t sm = seed_ ^ (0x9E3779B97F4A7C15ULL * (stream + 1));
        return Rng(splitmix64(sm));
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }
    static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
        std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::uint64_t state_[4]{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <class T>
Matrix<T> random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
    Matrix<T> m(rows, cols);
    for (auto& v : m.values()) v = static_cast<T>(rng.normal(0.0, stddev));
    return m;
}

template <class T>
Matrix<T> random_uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Matrix<T> m(rows, cols);
    for (auto& v : m.values()) v = static_cast<T>(rng.uniform(lo, hi));
    return m;
}

}  // namespace finermoe

// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major f64 tensors and the differentiable primitives used by the
// tiny ViT. Every forward primitive has a matching closed-form backward.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tgr {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        check_dims();
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (data_.size() != shape_numel(shape_))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double& at(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) noexcept {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const noexcept {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    // Last-axis row view for tensors viewed as [rows x last_dim].
    std::span<double> row(std::size_t r) noexcept {
        const std::size_t d = shape_.back();
        return {data_.data() + r * d, d};
    }
    std::span<const double> row(std::size_t r) const noexcept {
        const std::size_t d = shape_.back();
        return {data_.data() + r * d, d};
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != data_.size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    void fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor& operator*=(double s) noexcept {
        for (double& v : data_) v *= s;
        return *this;
    }

    // Value equality; -0.0 == 0.0. Use bit_equal for bit-identity checks.
    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

    void require_same_shape(const Tensor& o, const char* what) const {
        if (shape_ != o.shape_)
            throw DimensionError(std::string(what) + ": shape " + shape_str(shape_) + " vs " +
                                 shape_str(o.shape_));
    }

private:
    void check_dims() const {
        for (std::size_t d : shape_)
            if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

inline bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
    return true;
}

inline bool all_finite(const Tensor& t) noexcept {
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
inline Tensor operator*(Tensor a, double s) { return a *= s; }

inline Tensor operator-(const Tensor& a, const Tensor& b) {
    a.require_same_shape(b, "-");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

inline double sum(const Tensor& t) noexcept {
    double s = 0.0;
    for (double v : t.data()) s += v;
    return s;
}

inline double sum_squares(const Tensor& t) noexcept {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    return s;
}

inline double l1_norm(const Tensor& t) noexcept {
    double s = 0.0;
    for (double v : t.data()) s += std::abs(v);
    return s;
}

inline double max_abs(const Tensor& t) noexcept {
    double m = 0.0;
    for (double v : t.data()) m = std::max(m, std::abs(v));
    return m;
}

inline std::size_t argmax(std::span<const double> v) noexcept {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ---------------------------------------------------------------------------
// Matrix products. Summation over the inner dimension is sequential.
// ---------------------------------------------------------------------------

namespace detail {
inline void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw DimensionError(std::string(what) + ": expected rank-2, got " + shape_str(t.shape()));
}
}  // namespace detail

// out[m x n] += a[m x k] * b[k x n], raw row-major buffers. Rows are
// processed four at a time; each output entry still accumulates over k in
// order, so the result matches the naive triple loop bit for bit.
inline void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                     std::size_t n) noexcept {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        double* o0 = out + i * n;
        double* o1 = o0 + n;
        double* o2 = o1 + n;
        double* o3 = o2 + n;
        const double* a0 = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
            const double* br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double bv = br[j];
                o0[j] += v0 * bv;
                o1[j] += v1 * bv;
                o2[j] += v2 * bv;
                o3[j] += v3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        double* o = out + i * n;
        const double* ar = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ar[p];
            const double* br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
        }
    }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Tensor out({a.dim(0), b.dim(1)});
    gemm_acc(a.data().data(), b.data().data(), out.data().data(), a.dim(0), a.dim(1), b.dim(1));
    return out;
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank2(a, "transpose");
    Tensor out({a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
    return out;
}

// a[m x k] * b[n x k]^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul_nt");
    detail::require_rank2(b, "matmul_nt");
    if (a.dim(1) != b.dim(1))
        throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    Tensor out({a.dim(0), b.dim(0)});
    const Tensor bt = transpose(b);
    gemm_acc(a.data().data(), bt.data().data(), out.data().data(), a.dim(0), a.dim(1), b.dim(0));
    return out;
}

// a[k x m]^T * b[k x n]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul_tn");
    detail::require_rank2(b, "matmul_tn");
    if (a.dim(0) != b.dim(0))
        throw DimensionError("matmul_tn: " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
    Tensor out({a.dim(1), b.dim(1)});
    const Tensor at = transpose(a);
    gemm_acc(at.data().data(), b.data().data(), out.data().data(), a.dim(1), a.dim(0), b.dim(1));
    return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last axis
// ---------------------------------------------------------------------------

inline void softmax_row(std::span<const double> x, std::span<double> y) noexcept {
    const double mx = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = std::exp(x[i] - mx);
        z += y[i];
    }
    for (double& v : y) v /= z;
}

inline Tensor softmax(const Tensor& x) {
    if (x.rank() == 0 || x.empty()) throw DimensionError("softmax: empty tensor");
    Tensor y(x.shape());
    const std::size_t rows = x.size() / x.shape().back();
    for (std::size_t r = 0; r < rows; ++r) softmax_row(x.row(r), y.row(r));
    return y;
}

// dx = y * (dy - <dy, y>) per row.
inline void softmax_backward_row(std::span<const double> y, std::span<const double> dy,
                                 std::span<double> dx) noexcept {
    double dot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += dy[i] * y[i];
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] * (dy[i] - dot);
}

inline Tensor softmax_backward(const Tensor& y, const Tensor& dy) {
    y.require_same_shape(dy, "softmax_backward");
    Tensor dx(y.shape());
    const std::size_t rows = y.size() / y.shape().back();
    for (std::size_t r = 0; r < rows; ++r) softmax_backward_row(y.row(r), dy.row(r), dx.row(r));
    return dx;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormOutput {
    Tensor y;
    Tensor xhat;              // normalized input, same shape as x
    std::vector<double> rstd;  // one per row
};

struct LayerNormGrads {
    Tensor dx;
    Tensor dgamma;
    Tensor dbeta;
};

inline LayerNormOutput layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                  double eps = kLayerNormEps) {
    if (x.rank() == 0) throw DimensionError("layer_norm: rank-0 input");
    const std::size_t d = x.shape().back();
    if (gamma.size() != d || beta.size() != d)
        throw DimensionError("layer_norm: affine parameters must have length " + std::to_string(d));
    if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
    const std::size_t rows = x.size() / d;
    LayerNormOutput out{Tensor(x.shape()), Tensor(x.shape()), std::vector<double>(rows)};
    for (std::size_t r = 0; r < rows; ++r) {
        const auto xr = x.row(r);
        double mean = 0.0;
        for (double v : xr) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : xr) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + eps);
        out.rstd[r] = rstd;
        auto xh = out.xhat.row(r);
        auto yr = out.y.row(r);
        for (std::size_t i = 0; i < d; ++i) {
            xh[i] = (xr[i] - mean) * rstd;
            yr[i] = xh[i] * gamma[i] + beta[i];
        }
    }
    return out;
}

inline LayerNormGrads layer_norm_backward(const LayerNormOutput& fwd, const Tensor& gamma, const Tensor& dy) {
    fwd.xhat.require_same_shape(dy, "layer_norm_backward");
    const std::size_t d = dy.shape().back();
    const std::size_t rows = dy.size() / d;
    LayerNormGrads g{Tensor(dy.shape()), Tensor({d}), Tensor({d})};
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto dyr = dy.row(r);
        const auto xh = fwd.xhat.row(r);
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            dxhat[i] = dyr[i] * gamma[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
            g.dgamma[i] += dyr[i] * xh[i];
            g.dbeta[i] += dyr[i];
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        auto dxr = g.dx.row(r);
        for (std::size_t i = 0; i < d; ++i)
            dxr[i] = fwd.rstd[r] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
    }
    return g;
}

// ---------------------------------------------------------------------------
// GELU, tanh approximation:
//   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
// ---------------------------------------------------------------------------

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

inline double gelu_scalar(double x) noexcept {
    return 0.5 * x * (1.0 + std::tanh(detail::kGeluC * (x + detail::kGeluA * x * x * x)));
}

inline double gelu_grad_scalar(double x) noexcept {
    const double u = detail::kGeluC * (x + detail::kGeluA * x * x * x);
    const double t = std::tanh(u);
    const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline Tensor gelu(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
    return y;
}

inline Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
    x.require_same_shape(dy, "gelu_backward");
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * gelu_grad_scalar(x[i]);
    return dx;
}

// ---------------------------------------------------------------------------
// Moments: mean and population variance over every entry.
// ---------------------------------------------------------------------------

struct Moments {
    double mean;
    double variance;
};

inline Moments moments(std::span<const double> x) {
    if (x.empty()) throw DomainError("moments: empty input");
    const double n = static_cast<double>(x.size());
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    return {mean, var / n};
}

inline Moments moments(const Tensor& x) { return moments(x.data()); }

// ---------------------------------------------------------------------------
// Rng: xoshiro256** seeded through splitmix64. The integer stream is fully
// determined by the seed on every platform.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept { reseed(seed); }

    void reseed(std::uint64_t seed) noexcept {
        std::uint64_t x = seed;
        for (auto& s : s_) s = splitmix64(x);
    }

    static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() noexcept {
        const std::uint64_t result = std::rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = std::rotl(s_[3], 45);
        return result;
    }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw DomainError("Rng::below: empty range");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v;
        do v = next_u64();
        while (v >= limit);
        return v % n;
    }

    // Box-Muller, one draw per call.
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

private:
    std::uint64_t s_[4]{};
};

}  // namespace tgr

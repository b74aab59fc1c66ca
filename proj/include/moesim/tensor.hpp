#pragma once

// Dense row-major double tensors plus the small set of linear-algebra and
// reduction kernels the rest of the library is built on. Everything is
// deterministic: no hidden parallelism, no fast-math reassociation.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace moesim {

/// Thrown when an operation's preconditions reject the input.
struct invalid_input : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a computation produces or meets non-finite values. Training
/// loops treat this as an anomaly signal, not a programming error.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shp) : shape(std::move(shp)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
    }

    Tensor(std::vector<std::int64_t> shp, std::vector<double> values)
        : shape(std::move(shp)), data(std::move(values)) {
        if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
            throw invalid_input("tensor: data length does not match shape");
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& shp) {
        std::int64_t n = 1;
        for (std::int64_t d : shp) {
            if (d <= 0) throw invalid_input("tensor: shape entries must be positive");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<std::int64_t> shp) { return Tensor(std::move(shp)); }

    static Tensor full(std::vector<std::int64_t> shp, double v) {
        Tensor t(std::move(shp));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor identity(std::int64_t n) {
        Tensor t({n, n});
        for (std::int64_t i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i * n + i)] = 1.0;
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t ndim() const { return static_cast<std::int64_t>(shape.size()); }
    std::int64_t dim(std::int64_t i) const { return shape[static_cast<std::size_t>(i)]; }

    std::int64_t rows() const { assert(ndim() == 2); return shape[0]; }
    std::int64_t cols() const { assert(ndim() == 2); return shape[1]; }

    double& operator()(std::int64_t r, std::int64_t c) {
        assert(ndim() == 2 && r >= 0 && r < rows() && c >= 0 && c < cols());
        return data[static_cast<std::size_t>(r * cols() + c)];
    }
    double operator()(std::int64_t r, std::int64_t c) const {
        assert(ndim() == 2 && r >= 0 && r < rows() && c >= 0 && c < cols());
        return data[static_cast<std::size_t>(r * cols() + c)];
    }
    double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) throw invalid_input(std::string(what) + ": shape mismatch");
}

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor c = a;
    for (double& v : c.data) v *= s;
    return c;
}

/// y += alpha * x
inline void axpy(double alpha, const Tensor& x, Tensor& y) {
    check_same_shape(x, y, "axpy");
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += alpha * x.data[i];
}

inline double dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double l2_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

/// Global L2 norm over a group of tensors (flattened concatenation).
inline double l2_norm(const std::vector<const Tensor*>& group) {
    double s = 0.0;
    for (const Tensor* t : group)
        for (double v : t->data) s += v * v;
    return std::sqrt(s);
}

// ---- matmul family ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw invalid_input("matmul: operands must be 2-d");
    if (a.cols() != b.rows()) throw invalid_input("matmul: inner dimensions do not match");
    const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({m, n});
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t l = 0; l < k; ++l) {
            const double av = a(i, l);
            const double* brow = &b.data[static_cast<std::size_t>(l * n)];
            double* crow = &c.data[static_cast<std::size_t>(i * n)];
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

/// a^T * b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw invalid_input("matmul_tn: operands must be 2-d");
    if (a.rows() != b.rows()) throw invalid_input("matmul_tn: inner dimensions do not match");
    const std::int64_t m = a.cols(), k = a.rows(), n = b.cols();
    Tensor c({m, n});
    for (std::int64_t l = 0; l < k; ++l) {
        const double* arow = &a.data[static_cast<std::size_t>(l * m)];
        const double* brow = &b.data[static_cast<std::size_t>(l * n)];
        for (std::int64_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = &c.data[static_cast<std::size_t>(i * n)];
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

/// a * b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw invalid_input("matmul_nt: operands must be 2-d");
    if (a.cols() != b.cols()) throw invalid_input("matmul_nt: inner dimensions do not match");
    const std::int64_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor c({m, n});
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = &a.data[static_cast<std::size_t>(i * k)];
        double* crow = &c.data[static_cast<std::size_t>(i * n)];
        for (std::int64_t j = 0; j < n; ++j) {
            const double* brow = &b.data[static_cast<std::size_t>(j * k)];
            double s = 0.0;
            for (std::int64_t l = 0; l < k; ++l) s += arow[l] * brow[l];
            crow[j] = s;
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw invalid_input("transpose: operand must be 2-d");
    Tensor c({a.cols(), a.rows()});
    for (std::int64_t i = 0; i < a.rows(); ++i)
        for (std::int64_t j = 0; j < a.cols(); ++j) c(j, i) = a(i, j);
    return c;
}

// ---- softmax / logsumexp over the last axis ----

inline Tensor softmax(const Tensor& logits) {
    if (logits.ndim() < 1) throw invalid_input("softmax: scalar input");
    if (!logits.all_finite()) throw invalid_input("softmax: non-finite logits");
    const std::int64_t n = logits.shape.back();
    const std::int64_t rows = logits.numel() / n;
    Tensor out = logits;
    for (std::int64_t r = 0; r < rows; ++r) {
        double* row = &out.data[static_cast<std::size_t>(r * n)];
        double mx = row[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (std::int64_t j = 0; j < n; ++j) row[j] /= sum;
    }
    return out;
}

/// Per-row logsumexp of a [rows x n] view over the last axis, max-shifted.
inline std::vector<double> logsumexp_rows(const Tensor& logits) {
    const std::int64_t n = logits.shape.back();
    const std::int64_t rows = logits.numel() / n;
    std::vector<double> out(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = &logits.data[static_cast<std::size_t>(r * n)];
        double mx = row[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        out[static_cast<std::size_t>(r)] = mx + std::log(sum);
    }
    return out;
}

// ---- top-k selection ----

/// k largest entries as (index, value) pairs, values non-increasing.
/// Ties are broken toward the lower index; the result is a pure function of
/// the input on every platform.
inline std::vector<std::pair<std::int64_t, double>> topk(const std::vector<double>& values,
                                                         std::int64_t k) {
    const std::int64_t n = static_cast<std::int64_t>(values.size());
    if (k < 1 || k > n) throw invalid_input("topk: k out of range");
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
        const double va = values[static_cast<std::size_t>(a)];
        const double vb = values[static_cast<std::size_t>(b)];
        if (va != vb) return va > vb;
        return a < b;
    });
    std::vector<std::pair<std::int64_t, double>> out;
    out.reserve(static_cast<std::size_t>(k));
    for (std::int64_t i = 0; i < k; ++i)
        out.emplace_back(idx[static_cast<std::size_t>(i)], values[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
    return out;
}

inline std::vector<std::pair<std::int64_t, double>> topk_row(const Tensor& t, std::int64_t row,
                                                             std::int64_t k) {
    const std::int64_t n = t.shape.back();
    std::vector<double> v(static_cast<std::size_t>(n));
    for (std::int64_t j = 0; j < n; ++j) v[static_cast<std::size_t>(j)] = t.data[static_cast<std::size_t>(row * n + j)];
    return topk(v, k);
}

}  // namespace moesim

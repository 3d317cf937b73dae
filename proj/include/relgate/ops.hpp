#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "relgate/matrix.hpp"

namespace relgate {

constexpr double kLayerNormEps = 1e-5;

// Product with a fixed i-k-j loop order: the accumulation over k for each
// output element is always ascending, so results are bitwise reproducible
// and identical to a naive triple loop.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        fail(ErrorKind::shape,
             "matmul: inner dimensions disagree, " + a.shape_str() + " x " + b.shape_str());
    Matrix c(a.rows(), b.cols());
    const std::size_t n = a.rows(), k_dim = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double* ci = c.row(i);
        const double* ai = a.row(i);
        for (std::size_t k = 0; k < k_dim; ++k) {
            const double aik = ai[k];
            const double* bk = b.row(k);
            for (std::size_t j = 0; j < m; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

// a^T * b without materializing the transpose.
inline Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        fail(ErrorKind::shape,
             "matmul_at_b: row counts disagree, " + a.shape_str() + " x " + b.shape_str());
    Matrix c(a.cols(), b.cols());
    const std::size_t n = a.rows(), p = a.cols(), m = b.cols();
    for (std::size_t k = 0; k < n; ++k) {
        const double* ak = a.row(k);
        const double* bk = b.row(k);
        for (std::size_t i = 0; i < p; ++i) {
            const double aki = ak[i];
            double* ci = c.row(i);
            for (std::size_t j = 0; j < m; ++j) ci[j] += aki * bk[j];
        }
    }
    return c;
}

// a * b^T without materializing the transpose.
inline Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        fail(ErrorKind::shape,
             "matmul_a_bt: col counts disagree, " + a.shape_str() + " x " + b.shape_str());
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* bj = b.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += ai[k] * bj[k];
            c(i, j) = s;
        }
    }
    return c;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
    return c;
}

inline void add_into(Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add_into");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
    return c;
}

inline Matrix scale(const Matrix& a, double s) {
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] *= s;
    return c;
}

// Element-wise num / (den + eps*sign(den)) with sign(0) = +1, so the result
// is finite for every input.
inline Matrix stable_div(const Matrix& num, const Matrix& den, double eps) {
    require_same_shape(num, den, "stable_div");
    if (!(eps > 0.0)) fail(ErrorKind::config, "stable_div: eps must be > 0");
    Matrix c(num.rows(), num.cols());
    for (std::size_t i = 0; i < num.size(); ++i) {
        const double d = den[i];
        const double stabilized = d + (d >= 0.0 ? eps : -eps);
        c[i] = num[i] / stabilized;
    }
    return c;
}

// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double* xi = x.row(i);
        double* yi = y.row(i);
        double mx = xi[0];
        for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) {
            yi[j] = std::exp(xi[j] - mx);
            sum += yi[j];
        }
        for (std::size_t j = 0; j < x.cols(); ++j) yi[j] /= sum;
    }
    return y;
}

// Softmax over j <= i only; entries above the diagonal are exactly zero.
// Equivalent to setting them to -inf before a row softmax, without ever
// materializing non-finite values.
inline Matrix causal_softmax_rows(const Matrix& scores) {
    if (scores.rows() != scores.cols())
        fail(ErrorKind::shape, "causal_softmax_rows: matrix must be square, got " + scores.shape_str());
    Matrix y(scores.rows(), scores.cols());
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        const double* si = scores.row(i);
        double* yi = y.row(i);
        double mx = si[0];
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, si[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            yi[j] = std::exp(si[j] - mx);
            sum += yi[j];
        }
        for (std::size_t j = 0; j <= i; ++j) yi[j] /= sum;
    }
    return y;
}

// Per-row layer norm: (x - mean) / sqrt(var + 1e-5) * gain + bias.
// gain/bias are 1 x cols row vectors.
inline Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias) {
    require_shape(gain, 1, x.cols(), "layer_norm gain");
    require_shape(bias, 1, x.cols(), "layer_norm bias");
    Matrix y(x.rows(), x.cols());
    const std::size_t d = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double* xi = x.row(i);
        double* yi = y.row(i);
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xi[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xi[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t j = 0; j < d; ++j)
            yi[j] = (xi[j] - mean) * inv_std * gain(0, j) + bias(0, j);
    }
    return y;
}

// Exact GELU: x/2 * (1 + erf(x / sqrt(2))).
inline double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

inline double gelu_grad_scalar(double x) {
    constexpr double inv_sqrt_2pi = 0.3989422804014326779;
    return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)) +
           x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline Matrix gelu(const Matrix& x) {
    Matrix y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = gelu_scalar(y[i]);
    return y;
}

// Column sums as a 1 x cols row vector (used for bias gradients/relevance).
inline Matrix col_sums(const Matrix& x) {
    Matrix s(1, x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double* xi = x.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) s(0, j) += xi[j];
    }
    return s;
}

inline Matrix slice_cols(const Matrix& x, std::size_t begin, std::size_t count) {
    if (begin + count > x.cols()) fail(ErrorKind::shape, "slice_cols: out of range");
    Matrix y(x.rows(), count);
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < count; ++j) y(i, j) = x(i, begin + j);
    return y;
}

inline void paste_cols(Matrix& dst, const Matrix& src, std::size_t begin) {
    if (begin + src.cols() > dst.cols() || src.rows() != dst.rows())
        fail(ErrorKind::shape, "paste_cols: out of range");
    for (std::size_t i = 0; i < src.rows(); ++i)
        for (std::size_t j = 0; j < src.cols(); ++j) dst(i, begin + j) = src(i, j);
}

}  // namespace relgate

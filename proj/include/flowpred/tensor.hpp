#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "flowpred/error.hpp"

namespace flowpred {

struct Dims {
    int n = 0, c = 0, h = 0, w = 0;

    std::size_t count() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    bool operator==(const Dims&) const = default;
    std::string str() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" +
               std::to_string(h) + "x" + std::to_string(w);
    }
};

// Dense 4-D array in (batch, channel, row, col) row-major order. All layer
// math runs in double so gradients can be validated against central finite
// differences at tight tolerances.
struct Tensor4 {
    Dims dims;
    std::vector<double> v;

    Tensor4() = default;
    Tensor4(int n, int c, int h, int w) : dims{n, c, h, w}, v(dims.count(), 0.0) {}
    explicit Tensor4(Dims d) : dims(d), v(d.count(), 0.0) {}

    std::size_t size() const { return v.size(); }

    std::size_t idx(int b, int ch, int y, int x) const {
        return ((static_cast<std::size_t>(b) * dims.c + ch) * dims.h + y) * dims.w + x;
    }
    double& at(int b, int ch, int y, int x) { return v[idx(b, ch, y, x)]; }
    double at(int b, int ch, int y, int x) const { return v[idx(b, ch, y, x)]; }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

namespace detail {

// Minimal row-major matrix kernels. The j-inner loops keep the hot path
// contiguous so the compiler can vectorize them. Accumulation order is fixed,
// which keeps every training run bit-reproducible.

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<std::size_t>(i) * k;
        double* c = C + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = a[p];
            const double* b = B + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T  (rows of both operands are contiguous)
inline void gemm_nt(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<std::size_t>(i) * k;
        double* c = C + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* b = B + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += a[p] * b[p];
            c[j] += s;
        }
    }
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const double* a = A + static_cast<std::size_t>(p) * m;
        const double* b = B + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = a[i];
            double* c = C + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

}  // namespace detail

}  // namespace flowpred

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace paladin {

/// Dense row-major f64 matrix. All model arithmetic is 64-bit.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(size_t(r) * size_t(c), 0.0) {}

    double* row(int i) { return a.data() + size_t(i) * size_t(cols); }
    const double* row(int i) const { return a.data() + size_t(i) * size_t(cols); }

    double& at(int i, int j) { return a[size_t(i) * size_t(cols) + size_t(j)]; }
    double at(int i, int j) const { return a[size_t(i) * size_t(cols) + size_t(j)]; }

    size_t size() const { return a.size(); }
    void zero() { std::fill(a.begin(), a.end(), 0.0); }
};

inline double dot(const double* x, const double* y, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

inline void axpy(int n, double alpha, const double* x, double* y) {
    for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

/// y = W x
inline void matvec(const Mat& w, const double* x, double* y) {
    for (int r = 0; r < w.rows; ++r) y[r] = dot(w.row(r), x, w.cols);
}

/// y += W x
inline void matvec_add(const Mat& w, const double* x, double* y) {
    for (int r = 0; r < w.rows; ++r) y[r] += dot(w.row(r), x, w.cols);
}

/// x += W^T y  (row-major friendly: scan rows, scale by y[r])
inline void mat_tvec_add(const Mat& w, const double* y, double* x) {
    for (int r = 0; r < w.rows; ++r) {
        const double c = y[r];
        if (c == 0.0) continue;
        axpy(w.cols, c, w.row(r), x);
    }
}

/// dW += y (outer) x
inline void outer_add(Mat& dw, const double* y, const double* x) {
    for (int r = 0; r < dw.rows; ++r) {
        const double c = y[r];
        if (c == 0.0) continue;
        axpy(dw.cols, c, x, dw.row(r));
    }
}

inline double l2_norm_sq(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

/// In-place stable softmax of one logit row; returns log(sum exp(z - max)).
inline double softmax_inplace(double* z, int n) {
    double m = z[0];
    for (int i = 1; i < n; ++i) m = std::max(m, z[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        z[i] = std::exp(z[i] - m);
        sum += z[i];
    }
    const double inv = 1.0 / sum;
    for (int i = 0; i < n; ++i) z[i] *= inv;
    return std::log(sum);
}

/// log softmax(z)[target] without mutating z.
inline double log_softmax_at(const double* z, int n, int target) {
    double m = z[0];
    for (int i = 1; i < n; ++i) m = std::max(m, z[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += std::exp(z[i] - m);
    return z[target] - m - std::log(sum);
}

} // namespace paladin

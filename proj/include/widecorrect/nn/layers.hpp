#pragma once

// Differentiable building blocks over token matrices. A token matrix has one
// row per grid position (row-major over the grid) and one column per channel,
// which is also the HWC layout the depthwise convolutions operate on.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

namespace widecorrect::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using RowVecMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <typename T>
using ConstRowVecMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

/// db[j] += sum_i dy(i, j), accumulated row by row so the rounding does not
/// depend on buffer alignment.
template <typename T>
void add_column_sums(const Mat<T>& dy, T* db) {
    const Eigen::Index n = dy.rows(), c = dy.cols();
    for (Eigen::Index i = 0; i < n; ++i) {
        const T* row = dy.data() + i * c;
        for (Eigen::Index j = 0; j < c; ++j) db[j] += row[j];
    }
}

/// y = x W^T + b with W stored [out, in].
template <typename T>
Mat<T> linear(const Mat<T>& x, const T* w, const T* b, int out, int in) {
    Mat<T> y = x * ConstMatMap<T>(w, out, in).transpose();
    if (b) y.rowwise() += ConstRowVecMap<T>(b, out);
    return y;
}

/// Accumulates dW, db (when non-null) and returns dx.
template <typename T>
Mat<T> linear_backward(const Mat<T>& dy, const Mat<T>& x, const T* w, T* dw, T* db, int out, int in) {
    if (dw) MatMap<T>(dw, out, in).noalias() += dy.transpose() * x;
    if (db) add_column_sums(dy, db);
    return dy * ConstMatMap<T>(w, out, in);
}

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
    Mat<T> xhat;
    std::vector<T> rstd;
};

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const T* gamma, const T* beta, LayerNormCache<T>& cache) {
    const Eigen::Index n = x.rows(), c = x.cols();
    cache.xhat.resize(n, c);
    cache.rstd.resize(static_cast<std::size_t>(n));
    Mat<T> y(n, c);
    for (Eigen::Index i = 0; i < n; ++i) {
        const T mean = x.row(i).mean();
        T var = 0;
        for (Eigen::Index j = 0; j < c; ++j) {
            const T d = x(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        cache.rstd[static_cast<std::size_t>(i)] = rstd;
        for (Eigen::Index j = 0; j < c; ++j) {
            const T xh = (x(i, j) - mean) * rstd;
            cache.xhat(i, j) = xh;
            y(i, j) = xh * gamma[j] + beta[j];
        }
    }
    return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LayerNormCache<T>& cache, const T* gamma,
                           T* dgamma, T* dbeta) {
    const Eigen::Index n = dy.rows(), c = dy.cols();
    Mat<T> dx(n, c);
    std::vector<T> dxhat(static_cast<std::size_t>(c));
    for (Eigen::Index i = 0; i < n; ++i) {
        T sum = 0, sum_xh = 0;
        for (Eigen::Index j = 0; j < c; ++j) {
            const T g = dy(i, j);
            if (dgamma) dgamma[j] += g * cache.xhat(i, j);
            if (dbeta) dbeta[j] += g;
            dxhat[j] = g * gamma[j];
            sum += dxhat[j];
            sum_xh += dxhat[j] * cache.xhat(i, j);
        }
        const T inv_c = T(1) / static_cast<T>(c);
        const T rstd = cache.rstd[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < c; ++j) {
            dx(i, j) = rstd * (dxhat[j] - sum * inv_c - cache.xhat(i, j) * sum_xh * inv_c);
        }
    }
    return dx;
}

// Exact (erf) GELU.
template <typename T>
Mat<T> gelu(const Mat<T>& x) {
    return x.unaryExpr([](T v) {
        return T(0.5) * v * (T(1) + std::erf(v * static_cast<T>(std::numbers::sqrt2 / 2)));
    });
}

template <typename T>
Mat<T> gelu_backward(const Mat<T>& dy, const Mat<T>& x) {
    const T inv_sqrt2 = static_cast<T>(std::numbers::sqrt2 / 2);
    const T inv_sqrt2pi = static_cast<T>(std::numbers::inv_sqrtpi * std::numbers::sqrt2 / 2);
    return dy.binaryExpr(x, [=](T g, T v) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        return g * (cdf + v * pdf);
    });
}

/// 3x3 depthwise convolution with dilation `d` and zero padding `d` over a
/// grid_h x grid_w token grid. Weights are [C, 3, 3], bias [C].
template <typename T>
Mat<T> depthwise_conv3x3(const Mat<T>& x, int grid_h, int grid_w, const T* w, const T* b, int d) {
    const int c = static_cast<int>(x.cols());
    Mat<T> y(x.rows(), c);
    for (int ch = 0; ch < c; ++ch) {
        const T bias = b ? b[ch] : T(0);
        for (int i = 0; i < grid_h * grid_w; ++i) y(i, ch) = bias;
    }
    for (int a = 0; a < 3; ++a) {
        const int oy = (a - 1) * d;
        for (int bb = 0; bb < 3; ++bb) {
            const int ox = (bb - 1) * d;
            for (int gy = 0; gy < grid_h; ++gy) {
                const int sy = gy + oy;
                if (sy < 0 || sy >= grid_h) continue;
                for (int gx = 0; gx < grid_w; ++gx) {
                    const int sx = gx + ox;
                    if (sx < 0 || sx >= grid_w) continue;
                    const T* src = x.data() + static_cast<std::ptrdiff_t>(sy * grid_w + sx) * c;
                    T* dst = y.data() + static_cast<std::ptrdiff_t>(gy * grid_w + gx) * c;
                    for (int ch = 0; ch < c; ++ch) dst[ch] += w[ch * 9 + a * 3 + bb] * src[ch];
                }
            }
        }
    }
    return y;
}

template <typename T>
Mat<T> depthwise_conv3x3_backward(const Mat<T>& dy, const Mat<T>& x, int grid_h, int grid_w,
                                  const T* w, T* dw, T* db, int d) {
    const int c = static_cast<int>(x.cols());
    Mat<T> dx = Mat<T>::Zero(x.rows(), c);
    if (db) add_column_sums(dy, db);
    for (int a = 0; a < 3; ++a) {
        const int oy = (a - 1) * d;
        for (int bb = 0; bb < 3; ++bb) {
            const int ox = (bb - 1) * d;
            for (int gy = 0; gy < grid_h; ++gy) {
                const int sy = gy + oy;
                if (sy < 0 || sy >= grid_h) continue;
                for (int gx = 0; gx < grid_w; ++gx) {
                    const int sx = gx + ox;
                    if (sx < 0 || sx >= grid_w) continue;
                    const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(sy * grid_w + sx) * c;
                    const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(gy * grid_w + gx) * c;
                    for (int ch = 0; ch < c; ++ch) {
                        const T g = dy.data()[t + ch];
                        if (dw) dw[ch * 9 + a * 3 + bb] += g * x.data()[s + ch];
                        dx.data()[s + ch] += w[ch * 9 + a * 3 + bb] * g;
                    }
                }
            }
        }
    }
    return dx;
}

/// Row-wise softmax in place.
template <typename T>
void softmax_rows(Mat<T>& s) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const T mx = s.row(i).maxCoeff();
        T sum = 0;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            s(i, j) = std::exp(s(i, j) - mx);
            sum += s(i, j);
        }
        s.row(i) /= sum;
    }
}

}  // namespace widecorrect::nn

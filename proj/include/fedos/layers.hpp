#pragma once

#include <cmath>

#include "fedos/model.hpp"
#include "fedos/tensor.hpp"

namespace fedos {

enum class Mode { Train, Eval };

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// All kernels take batched activations: (B, C, H, W) for spatial layers and
// (B, N) for dense layers. Backward functions accumulate into parameter
// gradients and return the input gradient.

namespace detail {

/// (B, C, H, W) -> (C*k*k, B*Ho*Wo) patch matrix.
template <class Scalar>
RowMatrix<Scalar> im2col(const Tensor<Scalar>& x, Index k, Index stride, Index pad, Index ho, Index wo) {
    const Index batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    const Index plane = ho * wo;
    RowMatrix<Scalar> cols(ch * k * k, batch * plane);
    for (Index c = 0; c < ch; ++c) {
        for (Index ki = 0; ki < k; ++ki) {
            for (Index kj = 0; kj < k; ++kj) {
                Scalar* row = cols.row((c * k + ki) * k + kj).data();
                for (Index b = 0; b < batch; ++b) {
                    const Scalar* src = x.ptr() + ((b * ch + c) * h) * w;
                    Scalar* dst = row + b * plane;
                    for (Index oh = 0; oh < ho; ++oh) {
                        const Index ih = oh * stride - pad + ki;
                        for (Index ow = 0; ow < wo; ++ow) {
                            const Index iw = ow * stride - pad + kj;
                            dst[oh * wo + ow] = (ih >= 0 && ih < h && iw >= 0 && iw < w) ? src[ih * w + iw] : Scalar(0);
                        }
                    }
                }
            }
        }
    }
    return cols;
}

template <class Scalar>
void col2im(const RowMatrix<Scalar>& cols, Tensor<Scalar>& dx, Index k, Index stride, Index pad, Index ho,
            Index wo) {
    const Index batch = dx.dim(0), ch = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
    const Index plane = ho * wo;
    for (Index c = 0; c < ch; ++c) {
        for (Index ki = 0; ki < k; ++ki) {
            for (Index kj = 0; kj < k; ++kj) {
                const Scalar* row = cols.row((c * k + ki) * k + kj).data();
                for (Index b = 0; b < batch; ++b) {
                    Scalar* dst = dx.ptr() + ((b * ch + c) * h) * w;
                    const Scalar* src = row + b * plane;
                    for (Index oh = 0; oh < ho; ++oh) {
                        const Index ih = oh * stride - pad + ki;
                        if (ih < 0 || ih >= h) continue;
                        for (Index ow = 0; ow < wo; ++ow) {
                            const Index iw = ow * stride - pad + kj;
                            if (iw >= 0 && iw < w) dst[ih * w + iw] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

} // namespace detail

struct ConvGeometry {
    Index kernel;
    Index stride = 1;
    Index pad = 0;
};

/// 2-d convolution. `cols` receives the patch matrix for reuse in backward.
template <class Scalar>
Tensor<Scalar> conv2d_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                              ConvGeometry g, RowMatrix<Scalar>* cols_out = nullptr) {
    const Index batch = x.dim(0), h = x.dim(2), w = x.dim(3);
    const Index out_ch = weight.dim(0);
    const Index ho = (h + 2 * g.pad - g.kernel) / g.stride + 1;
    const Index wo = (w + 2 * g.pad - g.kernel) / g.stride + 1;
    const Index plane = ho * wo;
    RowMatrix<Scalar> cols = detail::im2col(x, g.kernel, g.stride, g.pad, ho, wo);
    Eigen::Map<const RowMatrix<Scalar>> wmat(weight.ptr(), out_ch, cols.rows());
    RowMatrix<Scalar> prod = wmat * cols;
    Tensor<Scalar> y({batch, out_ch, ho, wo});
    for (Index b = 0; b < batch; ++b) {
        for (Index o = 0; o < out_ch; ++o) {
            Eigen::Map<Vector<Scalar>>(y.ptr() + (b * out_ch + o) * plane, plane) =
                prod.row(o).segment(b * plane, plane).transpose().array() + bias.data[o];
        }
    }
    if (cols_out) *cols_out = std::move(cols);
    return y;
}

template <class Scalar>
Tensor<Scalar> conv2d_backward(const RowMatrix<Scalar>& cols, const Shape& x_shape, const Tensor<Scalar>& weight,
                               const Tensor<Scalar>& dy, ConvGeometry g, Tensor<Scalar>& dweight,
                               Tensor<Scalar>& dbias) {
    const Index batch = dy.dim(0), out_ch = dy.dim(1), ho = dy.dim(2), wo = dy.dim(3);
    const Index plane = ho * wo;
    RowMatrix<Scalar> dprod(out_ch, batch * plane);
    for (Index b = 0; b < batch; ++b) {
        for (Index o = 0; o < out_ch; ++o) {
            dprod.row(o).segment(b * plane, plane) =
                Eigen::Map<const Vector<Scalar>>(dy.ptr() + (b * out_ch + o) * plane, plane).transpose();
        }
    }
    Eigen::Map<RowMatrix<Scalar>> dw(dweight.ptr(), out_ch, cols.rows());
    dw.noalias() += dprod * cols.transpose();
    dbias.data += dprod.rowwise().sum();
    Eigen::Map<const RowMatrix<Scalar>> wmat(weight.ptr(), out_ch, cols.rows());
    RowMatrix<Scalar> dcols = wmat.transpose() * dprod;
    Tensor<Scalar> dx(x_shape);
    detail::col2im(dcols, dx, g.kernel, g.stride, g.pad, ho, wo);
    return dx;
}

template <class Scalar>
Tensor<Scalar> avg_pool_forward(const Tensor<Scalar>& x, Index size) {
    const Index batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    const Index ho = h / size, wo = w / size;
    Tensor<Scalar> y({batch, ch, ho, wo});
    const Scalar inv = Scalar(1) / Scalar(size * size);
    for (Index bc = 0; bc < batch * ch; ++bc) {
        const Scalar* src = x.ptr() + bc * h * w;
        Scalar* dst = y.ptr() + bc * ho * wo;
        for (Index oh = 0; oh < ho; ++oh) {
            for (Index ow = 0; ow < wo; ++ow) {
                Scalar s(0);
                for (Index i = 0; i < size; ++i) {
                    for (Index j = 0; j < size; ++j) s += src[(oh * size + i) * w + ow * size + j];
                }
                dst[oh * wo + ow] = s * inv;
            }
        }
    }
    return y;
}

template <class Scalar>
Tensor<Scalar> avg_pool_backward(const Shape& x_shape, const Tensor<Scalar>& dy, Index size) {
    Tensor<Scalar> dx(x_shape);
    const Index h = x_shape[2], w = x_shape[3];
    const Index ho = dy.dim(2), wo = dy.dim(3);
    const Scalar inv = Scalar(1) / Scalar(size * size);
    for (Index bc = 0; bc < x_shape[0] * x_shape[1]; ++bc) {
        const Scalar* src = dy.ptr() + bc * ho * wo;
        Scalar* dst = dx.ptr() + bc * h * w;
        for (Index oh = 0; oh < ho; ++oh) {
            for (Index ow = 0; ow < wo; ++ow) {
                const Scalar g = src[oh * wo + ow] * inv;
                for (Index i = 0; i < size; ++i) {
                    for (Index j = 0; j < size; ++j) dst[(oh * size + i) * w + ow * size + j] += g;
                }
            }
        }
    }
    return dx;
}

template <class Scalar>
Tensor<Scalar> upsample_forward(const Tensor<Scalar>& x, Index factor) {
    const Index batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<Scalar> y({batch, ch, h * factor, w * factor});
    const Index wo = w * factor;
    for (Index bc = 0; bc < batch * ch; ++bc) {
        const Scalar* src = x.ptr() + bc * h * w;
        Scalar* dst = y.ptr() + bc * h * w * factor * factor;
        for (Index oh = 0; oh < h * factor; ++oh) {
            for (Index ow = 0; ow < wo; ++ow) dst[oh * wo + ow] = src[(oh / factor) * w + ow / factor];
        }
    }
    return y;
}

template <class Scalar>
Tensor<Scalar> upsample_backward(const Shape& x_shape, const Tensor<Scalar>& dy, Index factor) {
    Tensor<Scalar> dx(x_shape);
    const Index h = x_shape[2], w = x_shape[3];
    const Index wo = w * factor;
    for (Index bc = 0; bc < x_shape[0] * x_shape[1]; ++bc) {
        const Scalar* src = dy.ptr() + bc * h * w * factor * factor;
        Scalar* dst = dx.ptr() + bc * h * w;
        for (Index oh = 0; oh < h * factor; ++oh) {
            for (Index ow = 0; ow < wo; ++ow) dst[(oh / factor) * w + ow / factor] += src[oh * wo + ow];
        }
    }
    return dx;
}

inline constexpr double kLeakySlope = 0.2;

/// Elementwise activation. Backward needs the input for ReLU-type units and
/// the output for tanh.
template <class Scalar>
Tensor<Scalar> activation_forward(const Tensor<Scalar>& x, Activation kind) {
    Tensor<Scalar> y = x;
    switch (kind) {
        case Activation::Relu: y.data = x.data.cwiseMax(Scalar(0)); break;
        case Activation::LeakyRelu:
            y.data = x.data.unaryExpr([](Scalar v) { return v > Scalar(0) ? v : Scalar(kLeakySlope) * v; });
            break;
        case Activation::Tanh: y.data = x.data.array().tanh(); break;
    }
    return y;
}

template <class Scalar>
Tensor<Scalar> activation_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& y, const Tensor<Scalar>& dy,
                                   Activation kind) {
    Tensor<Scalar> dx(dy.shape);
    switch (kind) {
        case Activation::Relu:
            dx.data = (x.data.array() > Scalar(0)).select(dy.data, Scalar(0));
            break;
        case Activation::LeakyRelu:
            dx.data = (x.data.array() > Scalar(0)).select(dy.data, Scalar(kLeakySlope) * dy.data);
            break;
        case Activation::Tanh:
            dx.data = dy.data.array() * (Scalar(1) - y.data.array().square());
            break;
    }
    return dx;
}

/// y = x W^T + b with x viewed as (B, N).
template <class Scalar>
Tensor<Scalar> dense_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
    const Index batch = x.dim(0);
    const Index out = weight.dim(0), in = weight.dim(1);
    Eigen::Map<const RowMatrix<Scalar>> xm(x.ptr(), batch, in);
    Eigen::Map<const RowMatrix<Scalar>> wm(weight.ptr(), out, in);
    Tensor<Scalar> y({batch, out});
    Eigen::Map<RowMatrix<Scalar>> ym(y.ptr(), batch, out);
    ym.noalias() = xm * wm.transpose();
    ym.rowwise() += bias.data.transpose();
    return y;
}

template <class Scalar>
Tensor<Scalar> dense_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& dy,
                              Tensor<Scalar>& dweight, Tensor<Scalar>& dbias) {
    const Index batch = x.dim(0);
    const Index out = weight.dim(0), in = weight.dim(1);
    Eigen::Map<const RowMatrix<Scalar>> xm(x.ptr(), batch, in);
    Eigen::Map<const RowMatrix<Scalar>> wm(weight.ptr(), out, in);
    Eigen::Map<const RowMatrix<Scalar>> dym(dy.ptr(), batch, out);
    Eigen::Map<RowMatrix<Scalar>>(dweight.ptr(), out, in).noalias() += dym.transpose() * xm;
    dbias.data += dym.colwise().sum().transpose();
    Tensor<Scalar> dx(x.shape);
    Eigen::Map<RowMatrix<Scalar>>(dx.ptr(), batch, in).noalias() = dym * wm;
    return dx;
}

/// Normalised activations and per-statistic inverse std, kept for backward.
template <class Scalar>
struct NormCache {
    Tensor<Scalar> xhat;
    Vector<Scalar> inv_std;  // per channel (batch norm) or per (sample, group)
    Vector<Scalar> mean;
    Vector<Scalar> var;      // biased
    Index count = 0;         // elements per statistic
};

/// Batch norm over (B, H, W) per channel. Train mode normalises with batch
/// statistics; eval mode with the supplied running statistics.
template <class Scalar>
Tensor<Scalar> batch_norm_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& scale, const Tensor<Scalar>& shift,
                                  const Tensor<Scalar>& running_mean, const Tensor<Scalar>& running_var, Mode mode,
                                  NormCache<Scalar>* cache = nullptr, Scalar eps = Scalar(kNormEpsilon)) {
    const Index batch = x.dim(0), ch = x.dim(1);
    const Index plane = x.size() / (batch * ch);
    Vector<Scalar> mean(ch), var(ch);
    if (mode == Mode::Train) {
        for (Index c = 0; c < ch; ++c) {
            Scalar s(0);
            for (Index b = 0; b < batch; ++b) s += Eigen::Map<const Vector<Scalar>>(x.ptr() + (b * ch + c) * plane, plane).sum();
            const Scalar m = s / Scalar(batch * plane);
            Scalar v(0);
            for (Index b = 0; b < batch; ++b) {
                v += (Eigen::Map<const Vector<Scalar>>(x.ptr() + (b * ch + c) * plane, plane).array() - m).square().sum();
            }
            mean[c] = m;
            var[c] = v / Scalar(batch * plane);
        }
    } else {
        mean = running_mean.data;
        var = running_var.data;
    }
    const Vector<Scalar> inv_std = (var.array() + eps).rsqrt();
    Tensor<Scalar> xhat(x.shape);
    Tensor<Scalar> y(x.shape);
    for (Index b = 0; b < batch; ++b) {
        for (Index c = 0; c < ch; ++c) {
            const Index off = (b * ch + c) * plane;
            auto xh = Eigen::Map<Vector<Scalar>>(xhat.ptr() + off, plane);
            xh = (Eigen::Map<const Vector<Scalar>>(x.ptr() + off, plane).array() - mean[c]) * inv_std[c];
            Eigen::Map<Vector<Scalar>>(y.ptr() + off, plane) = xh.array() * scale.data[c] + shift.data[c];
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = inv_std;
        cache->mean = mean;
        cache->var = var;
        cache->count = batch * plane;
    }
    return y;
}

/// Train-mode gradient (batch statistics depend on x).
template <class Scalar>
Tensor<Scalar> batch_norm_backward(const NormCache<Scalar>& cache, const Tensor<Scalar>& scale,
                                   const Tensor<Scalar>& dy, Tensor<Scalar>& dscale, Tensor<Scalar>& dshift) {
    const Index batch = dy.dim(0), ch = dy.dim(1);
    const Index plane = dy.size() / (batch * ch);
    const Scalar n = Scalar(cache.count);
    Tensor<Scalar> dx(dy.shape);
    for (Index c = 0; c < ch; ++c) {
        Scalar sum_dy(0), sum_dy_xhat(0);
        for (Index b = 0; b < batch; ++b) {
            const Index off = (b * ch + c) * plane;
            auto d = Eigen::Map<const Vector<Scalar>>(dy.ptr() + off, plane);
            auto xh = Eigen::Map<const Vector<Scalar>>(cache.xhat.ptr() + off, plane);
            sum_dy += d.sum();
            sum_dy_xhat += d.dot(xh);
        }
        dscale.data[c] += sum_dy_xhat;
        dshift.data[c] += sum_dy;
        const Scalar k = scale.data[c] * cache.inv_std[c] / n;
        for (Index b = 0; b < batch; ++b) {
            const Index off = (b * ch + c) * plane;
            auto d = Eigen::Map<const Vector<Scalar>>(dy.ptr() + off, plane);
            auto xh = Eigen::Map<const Vector<Scalar>>(cache.xhat.ptr() + off, plane);
            Eigen::Map<Vector<Scalar>>(dx.ptr() + off, plane) =
                k * (n * d.array() - sum_dy - xh.array() * sum_dy_xhat);
        }
    }
    return dx;
}

/// Exponential running-statistics update from one train-mode batch. The
/// variance is stored unbiased (n / (n - 1)) when more than one element
/// contributed.
template <class Scalar>
void update_running_stats(Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var, const Vector<Scalar>& mean,
                          const Vector<Scalar>& var, Index count, Scalar momentum = Scalar(kBatchNormMomentum)) {
    const Scalar correction = count > 1 ? Scalar(count) / Scalar(count - 1) : Scalar(1);
    running_mean.data = (Scalar(1) - momentum) * running_mean.data + momentum * mean;
    running_var.data = (Scalar(1) - momentum) * running_var.data + momentum * correction * var;
}

/// Standalone batch norm that also advances the running statistics in train mode.
template <class Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& scale, const Tensor<Scalar>& shift,
                          Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var, Mode mode,
                          Scalar momentum = Scalar(kBatchNormMomentum)) {
    NormCache<Scalar> cache;
    auto y = batch_norm_forward(x, scale, shift, running_mean, running_var, mode, &cache);
    if (mode == Mode::Train) {
        update_running_stats(running_mean, running_var, cache.mean, cache.var, cache.count, momentum);
    }
    return y;
}

/// Group norm: statistics per (sample, group of C/g channels). Identical in
/// train and eval mode.
template <class Scalar>
Tensor<Scalar> group_norm_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& scale, const Tensor<Scalar>& shift,
                                  Index groups, NormCache<Scalar>* cache = nullptr, Scalar eps = Scalar(kNormEpsilon)) {
    const Index batch = x.dim(0), ch = x.dim(1);
    if (groups <= 0 || ch % groups != 0) {
        throw ShapeError("group_norm", std::to_string(groups) + " groups do not divide " + std::to_string(ch) +
                                           " channels");
    }
    const Index plane = x.size() / (batch * ch);
    const Index per_group = (ch / groups) * plane;
    Tensor<Scalar> xhat(x.shape);
    Tensor<Scalar> y(x.shape);
    Vector<Scalar> inv_std(batch * groups), mean(batch * groups), var(batch * groups);
    for (Index bg = 0; bg < batch * groups; ++bg) {
        auto xs = Eigen::Map<const Vector<Scalar>>(x.ptr() + bg * per_group, per_group);
        const Scalar m = xs.mean();
        const Scalar v = (xs.array() - m).square().mean();
        mean[bg] = m;
        var[bg] = v;
        inv_std[bg] = Scalar(1) / std::sqrt(v + eps);
        Eigen::Map<Vector<Scalar>>(xhat.ptr() + bg * per_group, per_group) = (xs.array() - m) * inv_std[bg];
    }
    for (Index b = 0; b < batch; ++b) {
        for (Index c = 0; c < ch; ++c) {
            const Index off = (b * ch + c) * plane;
            Eigen::Map<Vector<Scalar>>(y.ptr() + off, plane) =
                Eigen::Map<const Vector<Scalar>>(xhat.ptr() + off, plane).array() * scale.data[c] + shift.data[c];
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
        cache->mean = std::move(mean);
        cache->var = std::move(var);
        cache->count = per_group;
    }
    return y;
}

template <class Scalar>
Tensor<Scalar> group_norm_backward(const NormCache<Scalar>& cache, const Tensor<Scalar>& scale, Index groups,
                                   const Tensor<Scalar>& dy, Tensor<Scalar>& dscale, Tensor<Scalar>& dshift) {
    const Index batch = dy.dim(0), ch = dy.dim(1);
    const Index plane = dy.size() / (batch * ch);
    const Index cpg = ch / groups;
    const Index per_group = cpg * plane;
    const Scalar n = Scalar(per_group);
    Tensor<Scalar> dxhat(dy.shape);
    for (Index b = 0; b < batch; ++b) {
        for (Index c = 0; c < ch; ++c) {
            const Index off = (b * ch + c) * plane;
            auto d = Eigen::Map<const Vector<Scalar>>(dy.ptr() + off, plane);
            auto xh = Eigen::Map<const Vector<Scalar>>(cache.xhat.ptr() + off, plane);
            dscale.data[c] += d.dot(xh);
            dshift.data[c] += d.sum();
            Eigen::Map<Vector<Scalar>>(dxhat.ptr() + off, plane) = d * scale.data[c];
        }
    }
    Tensor<Scalar> dx(dy.shape);
    for (Index bg = 0; bg < batch * groups; ++bg) {
        auto dxh = Eigen::Map<const Vector<Scalar>>(dxhat.ptr() + bg * per_group, per_group);
        auto xh = Eigen::Map<const Vector<Scalar>>(cache.xhat.ptr() + bg * per_group, per_group);
        const Scalar s1 = dxh.sum();
        const Scalar s2 = dxh.dot(xh);
        Eigen::Map<Vector<Scalar>>(dx.ptr() + bg * per_group, per_group) =
            (cache.inv_std[bg] / n) * (n * dxh.array() - s1 - xh.array() * s2);
    }
    return dx;
}

} // namespace fedos

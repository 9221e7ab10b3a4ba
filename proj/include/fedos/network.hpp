#pragma once

#include <span>
#include <vector>

#include "fedos/layers.hpp"
#include "fedos/model.hpp"
#include "fedos/weights.hpp"

namespace fedos {

/// Images (B, C, H, W) with integer labels; label K marks the unknown class.
template <class Scalar>
struct Batch {
    Tensor<Scalar> images;
    std::vector<int> labels;

    Index size() const { return images.shape.empty() ? 0 : images.dim(0); }
};

/// Everything backward needs from one forward pass.
template <class Scalar>
struct ForwardTrace {
    std::vector<Tensor<Scalar>> inputs;  // per layer
    std::vector<Tensor<Scalar>> outputs;
    std::vector<RowMatrix<Scalar>> cols;
    std::vector<NormCache<Scalar>> norms;
};

/// Throws ShapeError naming the first tensor that disagrees with `spec`.
template <class Scalar>
void check_weights(const ModelSpec& spec, const WeightSet<Scalar>& w) {
    const auto layout = param_layout(spec);
    if (layout.params.size() != w.size()) {
        throw ShapeError("weights", "model expects " + std::to_string(layout.params.size()) + " tensors, got " +
                                        std::to_string(w.size()));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i].name != layout.params[i].name || w[i].value.shape != layout.params[i].shape) {
            throw ShapeError(layout.params[i].name, "expected " + shape_string(layout.params[i].shape) + ", got " +
                                                        w[i].name + shape_string(w[i].value.shape));
        }
    }
}

namespace detail {

template <class Scalar>
struct ForwardStep {
    const Tensor<Scalar>& x;
    const WeightSet<Scalar>& w;
    std::size_t p;  // first parameter of this layer
    Mode mode;
    RowMatrix<Scalar>* cols;
    NormCache<Scalar>* norm;

    Tensor<Scalar> operator()(const layer::Conv& c) const {
        return conv2d_forward(x, w[p].value, w[p + 1].value, {c.kernel, c.stride, c.pad}, cols);
    }
    Tensor<Scalar> operator()(const layer::AvgPool& a) const { return avg_pool_forward(x, a.size); }
    Tensor<Scalar> operator()(const layer::Upsample& u) const { return upsample_forward(x, u.factor); }
    Tensor<Scalar> operator()(const layer::Norm& n) const {
        switch (n.kind) {
            case NormKind::None: return x;
            case NormKind::Batch:
                return batch_norm_forward(x, w[p].value, w[p + 1].value, w[p + 2].value, w[p + 3].value, mode, norm);
            case NormKind::Group: return group_norm_forward(x, w[p].value, w[p + 1].value, n.groups, norm);
        }
        return x;
    }
    Tensor<Scalar> operator()(const layer::Act& a) const { return activation_forward(x, a.kind); }
    Tensor<Scalar> operator()(const layer::Dense&) const {
        Tensor<Scalar> flat = x;
        flat.shape = {x.dim(0), x.size() / x.dim(0)};
        return dense_forward(flat, w[p].value, w[p + 1].value);
    }
    Tensor<Scalar> operator()(const layer::Reshape& r) const {
        Tensor<Scalar> y = x;
        y.shape = {x.dim(0), r.channels, r.height, r.width};
        return y;
    }
};

template <class Scalar>
struct BackwardStep {
    const Tensor<Scalar>& x;
    const Tensor<Scalar>& y;
    const Tensor<Scalar>& dy;
    const WeightSet<Scalar>& w;
    WeightSet<Scalar>& g;
    std::size_t p;
    Mode mode;
    const RowMatrix<Scalar>& cols;
    const NormCache<Scalar>& norm;

    Tensor<Scalar> operator()(const layer::Conv& c) const {
        return conv2d_backward(cols, x.shape, w[p].value, dy, {c.kernel, c.stride, c.pad}, g[p].value,
                               g[p + 1].value);
    }
    Tensor<Scalar> operator()(const layer::AvgPool& a) const { return avg_pool_backward(x.shape, dy, a.size); }
    Tensor<Scalar> operator()(const layer::Upsample& u) const { return upsample_backward(x.shape, dy, u.factor); }
    Tensor<Scalar> operator()(const layer::Norm& n) const {
        switch (n.kind) {
            case NormKind::None: return dy;
            case NormKind::Batch:
                if (mode == Mode::Eval) {
                    // Running statistics are constants: y = x * scale / sd + const.
                    const Index batch = x.dim(0), ch = x.dim(1), plane = x.size() / (batch * ch);
                    Tensor<Scalar> dx(x.shape);
                    for (Index b = 0; b < batch; ++b) {
                        for (Index c = 0; c < ch; ++c) {
                            const Index off = (b * ch + c) * plane;
                            auto d = Eigen::Map<const Vector<Scalar>>(dy.ptr() + off, plane);
                            auto xh = Eigen::Map<const Vector<Scalar>>(norm.xhat.ptr() + off, plane);
                            g[p].value.data[c] += d.dot(xh);
                            g[p + 1].value.data[c] += d.sum();
                            Eigen::Map<Vector<Scalar>>(dx.ptr() + off, plane) =
                                d * (w[p].value.data[c] * norm.inv_std[c]);
                        }
                    }
                    return dx;
                }
                return batch_norm_backward(norm, w[p].value, dy, g[p].value, g[p + 1].value);
            case NormKind::Group:
                return group_norm_backward(norm, w[p].value, n.groups, dy, g[p].value, g[p + 1].value);
        }
        return dy;
    }
    Tensor<Scalar> operator()(const layer::Act& a) const { return activation_backward(x, y, dy, a.kind); }
    Tensor<Scalar> operator()(const layer::Dense&) const {
        Tensor<Scalar> flat = x;
        flat.shape = {x.dim(0), x.size() / x.dim(0)};
        Tensor<Scalar> dx = dense_backward(flat, w[p].value, dy, g[p].value, g[p + 1].value);
        dx.shape = x.shape;
        return dx;
    }
    Tensor<Scalar> operator()(const layer::Reshape&) const {
        Tensor<Scalar> dx = dy;
        dx.shape = x.shape;
        return dx;
    }
};

} // namespace detail

/// Runs the layer stack on `images`. When `trace` is given, caches what
/// `backprop` needs. Train-mode batch norm uses batch statistics and leaves
/// the running statistics in `weights` untouched.
template <class Scalar>
Tensor<Scalar> forward_images(const ModelSpec& spec, const WeightSet<Scalar>& weights, const Tensor<Scalar>& images,
                              Mode mode, ForwardTrace<Scalar>* trace = nullptr) {
    const auto layout = param_layout(spec);
    check_weights(spec, weights);
    const Shape expected{spec.input.channels, spec.input.height, spec.input.width};
    if (images.rank() != 4 || Shape(images.shape.begin() + 1, images.shape.end()) != expected ||
        images.dim(0) < 1) {
        throw ShapeError("input", "expected (B," + shape_string(expected).substr(1) + ", got " +
                                      shape_string(images.shape));
    }
    const std::size_t n = spec.layers.size();
    if (trace) {
        trace->inputs.assign(n, {});
        trace->outputs.assign(n, {});
        trace->cols.assign(n, {});
        trace->norms.assign(n, {});
    }
    Tensor<Scalar> x = images;
    for (std::size_t i = 0; i < n; ++i) {
        NormCache<Scalar> scratch;
        detail::ForwardStep<Scalar> step{x,    weights, layout.first_param[i], mode,
                                         trace ? &trace->cols[i] : nullptr,
                                         trace ? &trace->norms[i] : &scratch};
        Tensor<Scalar> y = std::visit(step, spec.layers[i]);
        if (trace) {
            trace->inputs[i] = std::move(x);
            trace->outputs[i] = y;
        }
        x = std::move(y);
    }
    return x;
}

/// Reverse pass through a recorded trace. Accumulates parameter gradients
/// into `grads` (aligned with `weights`) and returns d(loss)/d(input).
template <class Scalar>
Tensor<Scalar> backprop(const ModelSpec& spec, const WeightSet<Scalar>& weights, const ForwardTrace<Scalar>& trace,
                        const Tensor<Scalar>& dout, WeightSet<Scalar>& grads, Mode mode = Mode::Train) {
    const auto layout = param_layout(spec);
    Tensor<Scalar> dy = dout;
    for (std::size_t i = spec.layers.size(); i-- > 0;) {
        detail::BackwardStep<Scalar> step{trace.inputs[i], trace.outputs[i], dy,
                                          weights,         grads,            layout.first_param[i],
                                          mode,            trace.cols[i],    trace.norms[i]};
        dy = std::visit(step, spec.layers[i]);
    }
    return dy;
}

/// Logits (B, output_classes).
template <class Scalar>
Tensor<Scalar> forward(const ModelSpec& spec, const WeightSet<Scalar>& weights, const Batch<Scalar>& batch,
                       Mode mode) {
    return forward_images(spec, weights, batch.images, mode);
}

template <class Scalar>
struct LossGrad {
    Scalar loss;
    Tensor<Scalar> dlogits;
};

/// Weighted cross-entropy, mean-reduced over the batch:
/// loss = (1/B) sum_i c[y_i] * (-log softmax(z_i)[y_i]).
/// `sample_weights`, when non-empty, multiplies each sample's term.
template <class Scalar>
LossGrad<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels,
                               std::span<const Scalar> class_weights, std::span<const Scalar> sample_weights = {}) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy", "logits must be (B, D), got " + shape_string(logits.shape));
    }
    const Index batch = logits.dim(0), classes = logits.dim(1);
    if (static_cast<Index>(labels.size()) != batch) {
        throw ShapeError("cross_entropy", "label count does not match batch");
    }
    if (static_cast<Index>(class_weights.size()) != classes) {
        throw ShapeError("cross_entropy", "class_weights has " + std::to_string(class_weights.size()) +
                                              " entries for " + std::to_string(classes) + " logits");
    }
    if (!sample_weights.empty() && static_cast<Index>(sample_weights.size()) != batch) {
        throw ShapeError("cross_entropy", "sample weight count does not match batch");
    }
    for (auto c : class_weights) {
        if (!(c >= Scalar(0))) throw ValueError("class weights must be non-negative");
    }
    LossGrad<Scalar> out{Scalar(0), Tensor<Scalar>(logits.shape)};
    const auto z = logits.rows();
    auto dz = out.dlogits.rows();
    const Scalar inv_b = Scalar(1) / Scalar(batch);
    for (Index i = 0; i < batch; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= classes) {
            throw ValueError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
        }
        Scalar wgt = class_weights[static_cast<std::size_t>(y)];
        if (!sample_weights.empty()) wgt *= sample_weights[static_cast<std::size_t>(i)];
        if (wgt == Scalar(0)) continue;
        const Scalar top = z.row(i).maxCoeff();
        const auto shifted = (z.row(i).array() - top).eval();
        const Scalar lse = std::log(shifted.exp().sum());
        out.loss += wgt * (lse - shifted(y)) * inv_b;
        dz.row(i) = (shifted - lse).exp() * (wgt * inv_b);
        dz(i, y) -= wgt * inv_b;
    }
    return out;
}

/// Row-wise softmax.
template <class Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits) {
    Tensor<Scalar> p = logits;
    auto r = p.rows();
    for (Index i = 0; i < r.rows(); ++i) {
        r.row(i).array() -= r.row(i).maxCoeff();
        r.row(i) = r.row(i).array().exp();
        r.row(i) /= r.row(i).sum();
    }
    return p;
}

/// Fresh batch statistics of one batch-norm layer, pending the running update.
template <class Scalar>
struct BatchStat {
    std::size_t mean_param;  // index of running_mean; running_var follows
    Vector<Scalar> mean;
    Vector<Scalar> var;
    Index count;
};

template <class Scalar>
struct BackwardResult {
    Scalar loss;
    WeightSet<Scalar> grads;  // aligned with the weights; zero for running stats
    std::vector<BatchStat<Scalar>> batch_stats;
};

/// Train-mode loss and exact gradient of the weighted cross-entropy.
template <class Scalar>
BackwardResult<Scalar> backward(const ModelSpec& spec, const WeightSet<Scalar>& weights, const Batch<Scalar>& batch,
                                std::span<const Scalar> class_weights, std::span<const Scalar> sample_weights = {}) {
    ForwardTrace<Scalar> trace;
    const Tensor<Scalar> logits = forward_images(spec, weights, batch.images, Mode::Train, &trace);
    auto lg = cross_entropy(logits, batch.labels, class_weights, sample_weights);
    BackwardResult<Scalar> out{lg.loss, weights.zeros_like(), {}};
    backprop(spec, weights, trace, lg.dlogits, out.grads, Mode::Train);
    const auto layout = param_layout(spec);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        if (const auto* n = std::get_if<layer::Norm>(&spec.layers[i]); n && n->kind == NormKind::Batch) {
            const auto& c = trace.norms[i];
            out.batch_stats.push_back({layout.first_param[i] + 2, c.mean, c.var, c.count});
        }
    }
    return out;
}

template <class Scalar>
void apply_batch_stats(WeightSet<Scalar>& weights, const std::vector<BatchStat<Scalar>>& stats,
                       Scalar momentum = Scalar(kBatchNormMomentum)) {
    for (const auto& s : stats) {
        update_running_stats(weights[s.mean_param].value, weights[s.mean_param + 1].value, s.mean, s.var, s.count,
                             momentum);
    }
}

/// Index of the largest entry among the first `limit` columns; lowest index wins ties.
template <class Derived>
int argmax_prefix(const Eigen::DenseBase<Derived>& row, Index limit) {
    int best = 0;
    for (Index j = 1; j < limit; ++j) {
        if (row(j) > row(best)) best = static_cast<int>(j);
    }
    return best;
}

} // namespace fedos

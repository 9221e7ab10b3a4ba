#include "fedos/model.hpp"

#include <map>
#include <sstream>

namespace fedos {

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ')';
    return os.str();
}

std::string to_string(NormKind kind) {
    switch (kind) {
        case NormKind::None: return "none";
        case NormKind::Batch: return "batch";
        case NormKind::Group: return "group";
    }
    return "none";
}

NormKind norm_kind_from_string(const std::string& name) {
    if (name == "none") return NormKind::None;
    if (name == "batch") return NormKind::Batch;
    if (name == "group") return NormKind::Group;
    throw ValueError("unknown norm kind '" + name + "' (expected none|batch|group)");
}

ModelSpec lenet5(int num_classes, NormKind norm, const GroupCounts& groups, bool unknown_head,
                 InputShape input) {
    if (norm == NormKind::Group && groups.size() != 3) {
        throw ValueError("lenet5 group norm needs one group count per conv layer (3)");
    }
    ModelSpec spec;
    spec.input = input;
    spec.num_known_classes = num_classes;
    spec.has_unknown_head = unknown_head;

    const std::array<Index, 3> widths{6, 16, 120};
    for (std::size_t i = 0; i < widths.size(); ++i) {
        spec.layers.emplace_back(layer::Conv{widths[i], 5});
        if (norm != NormKind::None) {
            spec.layers.emplace_back(layer::Norm{norm, norm == NormKind::Group ? groups[i] : 1});
        }
        spec.layers.emplace_back(layer::Act{Activation::Relu});
        if (i < 2) {
            spec.layers.emplace_back(layer::AvgPool{2});
        }
    }
    spec.layers.emplace_back(layer::Dense{84});
    spec.layers.emplace_back(layer::Act{Activation::Relu});
    spec.layers.emplace_back(layer::Dense{spec.output_classes()});
    return spec;
}

namespace {

struct LayerNamer {
    std::map<std::string, int> counts;

    std::string next(const std::string& base) { return base + std::to_string(++counts[base]); }

    std::string operator()(const layer::Conv&) { return next("conv"); }
    std::string operator()(const layer::AvgPool&) { return next("pool"); }
    std::string operator()(const layer::Upsample&) { return next("up"); }
    std::string operator()(const layer::Norm&) { return next("norm"); }
    std::string operator()(const layer::Act& a) {
        switch (a.kind) {
            case Activation::Relu: return next("relu");
            case Activation::LeakyRelu: return next("lrelu");
            case Activation::Tanh: return next("tanh");
        }
        return next("act");
    }
    std::string operator()(const layer::Dense&) { return next("dense"); }
    std::string operator()(const layer::Reshape&) { return next("reshape"); }
};

struct ShapeStep {
    const Shape& in;
    const std::string& name;

    void require_rank3() const {
        if (in.size() != 3) {
            throw ShapeError(name, "expects a CxHxW input, got " + shape_string(in));
        }
    }

    Shape operator()(const layer::Conv& c) const {
        require_rank3();
        const Index h = (in[1] + 2 * c.pad - c.kernel) / c.stride + 1;
        const Index w = (in[2] + 2 * c.pad - c.kernel) / c.stride + 1;
        if (in[1] + 2 * c.pad < c.kernel || in[2] + 2 * c.pad < c.kernel || h <= 0 || w <= 0) {
            throw ShapeError(name, "kernel " + std::to_string(c.kernel) + " larger than input " +
                                       shape_string(in));
        }
        return {c.out_channels, h, w};
    }
    Shape operator()(const layer::AvgPool& p) const {
        require_rank3();
        if (in[1] < p.size || in[2] < p.size) {
            throw ShapeError(name, "pool window larger than input " + shape_string(in));
        }
        return {in[0], in[1] / p.size, in[2] / p.size};
    }
    Shape operator()(const layer::Upsample& u) const {
        require_rank3();
        return {in[0], in[1] * u.factor, in[2] * u.factor};
    }
    Shape operator()(const layer::Norm& n) const {
        if (in.size() != 3) {
            throw ShapeError(name, "normalisation expects a CxHxW input, got " + shape_string(in));
        }
        if (n.kind == NormKind::Group && (n.groups <= 0 || in[0] % n.groups != 0)) {
            throw ShapeError(name, "group count " + std::to_string(n.groups) + " does not divide " +
                                       std::to_string(in[0]) + " channels");
        }
        return in;
    }
    Shape operator()(const layer::Act&) const { return in; }
    Shape operator()(const layer::Dense& d) const { return {d.out}; }
    Shape operator()(const layer::Reshape& r) const {
        if (shape_size(in) != r.channels * r.height * r.width) {
            throw ShapeError(name, "cannot reshape " + shape_string(in));
        }
        return {r.channels, r.height, r.width};
    }
};

} // namespace

std::vector<std::string> layer_names(const ModelSpec& spec) {
    LayerNamer namer;
    std::vector<std::string> names;
    names.reserve(spec.layers.size());
    for (const auto& l : spec.layers) {
        names.push_back(std::visit(namer, l));
    }
    return names;
}

std::vector<Shape> infer_shapes(const ModelSpec& spec) {
    const auto names = layer_names(spec);
    std::vector<Shape> shapes{{spec.input.channels, spec.input.height, spec.input.width}};
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        shapes.push_back(std::visit(ShapeStep{shapes.back(), names[i]}, spec.layers[i]));
    }
    return shapes;
}

ParamLayout param_layout(const ModelSpec& spec) {
    const auto names = layer_names(spec);
    const auto shapes = infer_shapes(spec);
    ParamLayout layout;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        layout.first_param.push_back(layout.params.size());
        const Shape& in = shapes[i];
        const std::string& n = names[i];
        if (const auto* c = std::get_if<layer::Conv>(&spec.layers[i])) {
            const Index fan_in = in[0] * c->kernel * c->kernel;
            layout.params.push_back({n + ".weight", {c->out_channels, in[0], c->kernel, c->kernel}, true, fan_in});
            layout.params.push_back({n + ".bias", {c->out_channels}, true, fan_in});
        } else if (const auto* d = std::get_if<layer::Dense>(&spec.layers[i])) {
            const Index fan_in = shape_size(in);
            layout.params.push_back({n + ".weight", {d->out, fan_in}, true, fan_in});
            layout.params.push_back({n + ".bias", {d->out}, true, fan_in});
        } else if (const auto* nm = std::get_if<layer::Norm>(&spec.layers[i])) {
            if (nm->kind == NormKind::None) continue;
            layout.params.push_back({n + ".scale", {in[0]}, true, 0});
            layout.params.push_back({n + ".shift", {in[0]}, true, 0});
            if (nm->kind == NormKind::Batch) {
                layout.params.push_back({n + ".running_mean", {in[0]}, false, 0});
                layout.params.push_back({n + ".running_var", {in[0]}, false, 0});
            }
        }
    }
    return layout;
}

Index parameter_count(const ModelSpec& spec) {
    Index total = 0;
    for (const auto& p : param_layout(spec).params) {
        if (p.trainable) total += shape_size(p.shape);
    }
    return total;
}

} // namespace fedos

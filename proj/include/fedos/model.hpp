#pragma once

#include <array>
#include <string>
#include <variant>
#include <vector>

#include "fedos/tensor.hpp"

namespace fedos {

enum class NormKind { None, Batch, Group };

std::string to_string(NormKind kind);
NormKind norm_kind_from_string(const std::string& name);

enum class Activation { Relu, LeakyRelu, Tanh };

namespace layer {

struct Conv {
    Index out_channels;
    Index kernel;
    Index stride = 1;
    Index pad = 0;
};

struct AvgPool {
    Index size;
};

/// Nearest-neighbour upsampling by an integer factor.
struct Upsample {
    Index factor;
};

struct Norm {
    NormKind kind;
    Index groups = 1;  // Group only
};

struct Act {
    Activation kind;
};

/// Fully connected; flattens any non-batch dimensions of its input.
struct Dense {
    Index out;
};

/// Reinterprets a flat (B, C*H*W) activation as (B, C, H, W).
struct Reshape {
    Index channels;
    Index height;
    Index width;
};

} // namespace layer

using LayerDesc = std::variant<layer::Conv, layer::AvgPool, layer::Upsample, layer::Norm, layer::Act,
                               layer::Dense, layer::Reshape>;

struct InputShape {
    Index channels = 3;
    Index height = 32;
    Index width = 32;

    Index size() const { return channels * height * width; }
    bool operator==(const InputShape&) const = default;
};

/// Layer topology plus the class-count bookkeeping needed by the open-set head.
struct ModelSpec {
    InputShape input;
    std::vector<LayerDesc> layers;
    int num_known_classes = 10;
    bool has_unknown_head = false;

    int output_classes() const { return num_known_classes + (has_unknown_head ? 1 : 0); }
};

/// Per-conv group counts for group norm, one per conv layer.
using GroupCounts = std::vector<Index>;

inline const GroupCounts kDefaultLeNetGroups{2, 4, 30};

/// LeNet-5 on 3-channel input: conv(6,5) pool conv(16,5) pool conv(120,5) fc(84) fc(K[+1]).
/// A norm layer (when requested) sits between each conv and its ReLU.
ModelSpec lenet5(int num_classes = 10, NormKind norm = NormKind::None,
                 const GroupCounts& groups = kDefaultLeNetGroups, bool unknown_head = false,
                 InputShape input = {});

/// Stable per-layer names: conv1, norm1, relu1, pool1, dense1, ...
std::vector<std::string> layer_names(const ModelSpec& spec);

/// Activation shape after each layer (excluding batch). Entry 0 is the input.
/// Throws ShapeError naming the first layer whose input does not fit.
std::vector<Shape> infer_shapes(const ModelSpec& spec);

/// Description of one learnable or state tensor owned by a layer.
struct ParamInfo {
    std::string name;
    Shape shape;
    bool trainable = true;
    Index fan_in = 0;
};

/// Parameters in canonical order, plus the first parameter index of each layer.
struct ParamLayout {
    std::vector<ParamInfo> params;
    std::vector<std::size_t> first_param;  // per layer
};

ParamLayout param_layout(const ModelSpec& spec);

/// Number of trainable scalars.
Index parameter_count(const ModelSpec& spec);

} // namespace fedos

// Copyright (c) 2026 spprobe contributors.
// Licensed under the Apache License 2.0.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "spprobe/rng.hpp"
#include "spprobe/tape.hpp"
#include "spprobe/tensor.hpp"

namespace spprobe {

/// Shape of the classifier: a stack of conv-relu-batchnorm-maxpool blocks
/// (5x5 kernels, stride 1, same padding) followed by fully connected
/// layers. The default is the small 6-layer configuration: five conv
/// blocks plus a two-layer dense head.
struct Architecture {
    int image_size = 64;
    int in_channels = 1;
    std::vector<int> conv_channels{4, 8, 8, 16, 16};
    std::vector<int> dense_dims{32}; // hidden widths; the class layer is implicit
    int num_classes = 5;
    int kernel_size = 5;

    bool operator==(const Architecture&) const = default;

    int blocks() const { return static_cast<int>(conv_channels.size()); }

    /// Spatial extent after all pooling stages.
    int final_spatial() const {
        int s = image_size;
        for (std::size_t i = 0; i < conv_channels.size(); ++i) s /= 2;
        return s;
    }

    int flat_dim() const {
        const int s = final_spatial();
        const int c = conv_channels.empty() ? in_channels : conv_channels.back();
        return s * s * c;
    }

    /// Number of activation tap points: one per conv block output, one per
    /// hidden dense output, plus the logits.
    int tap_count() const {
        return blocks() + static_cast<int>(dense_dims.size()) + 1;
    }

    void validate() const {
        if (image_size < 1 || in_channels < 1 || num_classes < 2)
            throw ParameterError("architecture: invalid image size, channels or class count");
        if (kernel_size < 1 || kernel_size % 2 == 0)
            throw ParameterError("architecture: kernel size must be odd and positive");
        int s = image_size;
        for (std::size_t i = 0; i < conv_channels.size(); ++i) {
            if (conv_channels[i] < 1)
                throw ParameterError("architecture: conv channel counts must be positive");
            s /= 2;
            if (s < 1)
                throw ParameterError("architecture: image too small for " +
                                     std::to_string(conv_channels.size()) + " pooling stages");
        }
        for (int d : dense_dims)
            if (d < 1) throw ParameterError("architecture: dense widths must be positive");
    }
};

/// Parameters of one layer. Conv layers hold the kernel and bias,
/// batchnorm layers hold scale/shift in weight/bias plus the running
/// statistics, dense layers hold the weight matrix and bias.
struct LayerParams {
    enum class Kind { kConv, kBatchNorm, kDense };
    Kind kind;
    std::string name;
    Tensor weight;
    Tensor bias;
    Tensor running_mean; // batchnorm only
    Tensor running_var;  // batchnorm only
};

struct Network {
    Architecture arch;
    std::vector<LayerParams> layers;
};

/// Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// drawn in layer order from the given seed.
inline Network build_network(const Architecture& arch, std::uint64_t init_seed) {
    arch.validate();
    Network net{arch, {}};
    Rng rng(derive_seed(init_seed, "init"));
    const int k = arch.kernel_size;

    auto fill_uniform = [&](Tensor& t, int fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& v : t.data) v = rng.uniform(-bound, bound);
    };

    int cin = arch.in_channels;
    for (std::size_t i = 0; i < arch.conv_channels.size(); ++i) {
        const int cout = arch.conv_channels[i];
        LayerParams conv;
        conv.kind = LayerParams::Kind::kConv;
        conv.name = "conv" + std::to_string(i + 1);
        conv.weight = Tensor({k, k, cin, cout});
        conv.bias = Tensor({cout});
        fill_uniform(conv.weight, k * k * cin);
        fill_uniform(conv.bias, k * k * cin);
        net.layers.push_back(std::move(conv));

        LayerParams bn;
        bn.kind = LayerParams::Kind::kBatchNorm;
        bn.name = "bn" + std::to_string(i + 1);
        bn.weight = Tensor({cout});
        bn.bias = Tensor({cout});
        bn.running_mean = Tensor({cout});
        bn.running_var = Tensor({cout});
        std::fill(bn.weight.data.begin(), bn.weight.data.end(), 1.0);
        std::fill(bn.running_var.data.begin(), bn.running_var.data.end(), 1.0);
        net.layers.push_back(std::move(bn));
        cin = cout;
    }

    int din = arch.flat_dim();
    for (std::size_t i = 0; i < arch.dense_dims.size(); ++i) {
        const int dout = arch.dense_dims[i];
        LayerParams fc;
        fc.kind = LayerParams::Kind::kDense;
        fc.name = "dense" + std::to_string(i + 1);
        fc.weight = Tensor({din, dout});
        fc.bias = Tensor({dout});
        fill_uniform(fc.weight, din);
        fill_uniform(fc.bias, din);
        net.layers.push_back(std::move(fc));
        din = dout;
    }
    LayerParams head;
    head.kind = LayerParams::Kind::kDense;
    head.name = "dense" + std::to_string(arch.dense_dims.size() + 1);
    head.weight = Tensor({din, arch.num_classes});
    head.bias = Tensor({arch.num_classes});
    fill_uniform(head.weight, din);
    fill_uniform(head.bias, din);
    net.layers.push_back(std::move(head));
    return net;
}

/// Result of a forward pass: the logits plus the activation tap tensors
/// (post-pool block outputs, post-relu hidden dense outputs, logits).
struct ForwardResult {
    Tensor* logits = nullptr;
    std::vector<Tensor*> taps;
};

/// Wraps a batch of flat image buffers into a tape-owned NHWC input tensor.
inline Tensor* make_input(Tape& tape, const Architecture& arch,
                          const std::vector<const double*>& images) {
    const int N = static_cast<int>(images.size());
    const int H = arch.image_size, W = arch.image_size, C = arch.in_channels;
    Tensor* x = tape.make({N, H, W, C});
    const std::size_t per = static_cast<std::size_t>(H) * W * C;
    for (int n = 0; n < N; ++n)
        std::copy(images[n], images[n] + per, x->data.begin() + n * per);
    return x;
}

/// Runs the full network, recording onto `tape`. The input tensor must
/// have shape (N, image_size, image_size, in_channels); training mode
/// selects batch statistics in the batchnorm layers.
inline ForwardResult forward(Network& net, Tape& tape, Tensor* input, bool training) {
    if (!tape.empty())
        throw UsageError("forward: tape already contains operations; use a fresh tape");
    const Architecture& a = net.arch;
    const std::vector<int> want{input->shape.empty() ? 0 : input->dim(0), a.image_size,
                                a.image_size, a.in_channels};
    if (input->shape.size() != 4 || input->shape[1] != a.image_size ||
        input->shape[2] != a.image_size || input->shape[3] != a.in_channels)
        throw ShapeError("forward: input " + shape_str(input->shape) +
                         " does not match expected " + shape_str(want) + " at network input");

    ForwardResult out;
    Tensor* h = input;
    std::size_t li = 0;
    for (int b = 0; b < a.blocks(); ++b) {
        LayerParams& conv = net.layers[li++];
        LayerParams& bn = net.layers[li++];
        h = conv2d(tape, h, &conv.weight, &conv.bias, conv.name);
        h = relu(tape, h, "relu" + std::to_string(b + 1));
        h = batchnorm(tape, h, &bn.weight, &bn.bias, &bn.running_mean, &bn.running_var,
                      training, 1e-5, 0.1, bn.name);
        h = maxpool2(tape, h, "pool" + std::to_string(b + 1));
        out.taps.push_back(h);
    }
    h = flatten(tape, h);
    for (std::size_t i = 0; i < a.dense_dims.size(); ++i) {
        LayerParams& fc = net.layers[li++];
        h = dense(tape, h, &fc.weight, &fc.bias, fc.name);
        h = relu(tape, h, "relu_" + fc.name);
        out.taps.push_back(h);
    }
    LayerParams& head = net.layers[li++];
    h = dense(tape, h, &head.weight, &head.bias, head.name);
    out.logits = h;
    out.taps.push_back(h);
    return out;
}

/// All tensors updated by the optimizer (conv/dense weights and biases,
/// batchnorm scale and shift; running statistics excluded).
inline std::vector<Tensor*> trainable_params(Network& net) {
    std::vector<Tensor*> out;
    for (LayerParams& l : net.layers) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

inline void zero_grads(const std::vector<Tensor*>& params) {
    for (Tensor* p : params) p->zero_grad();
}

} // namespace spprobe

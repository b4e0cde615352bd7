#pragma once

#include <utility>
#include <vector>

#include "redec/labelmap.hpp"
#include "redec/rng.hpp"
#include "redec/tensor.hpp"

namespace redec {

// Per-window argmax positions recorded by max-pooling and replayed by the
// matching unpooling layer. Indices are flat row-major offsets within the
// window, so for a 2x2 window every entry fits in 2 bits.
struct PoolIndices {
    int window = 0;
    Shape out_shape;             // [B,C,OH,OW]
    std::vector<uint8_t> index;  // one entry per pooled output cell

    int64_t count() const { return static_cast<int64_t>(index.size()); }
};

enum class Act { Relu, Sigmoid, Tanh };
enum class Mode { Train, Eval };

// All ops allocate fresh outputs, never mutate inputs, and record a backward
// rule on `tape` when it is non-null and some input requires grad. Passing a
// null tape runs pure inference.

Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int pad);
std::pair<Tensor, PoolIndices> maxpool_with_indices(Tape* tape, const Tensor& input, int window);
Tensor unpool_with_indices(Tape* tape, const Tensor& input, const PoolIndices& indices);
Tensor avgpool(Tape* tape, const Tensor& input, int window);
Tensor activation(Tape* tape, const Tensor& input, Act kind);
Tensor linear(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias);
Tensor batchnorm2d(Tape* tape, const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor dropout(Tape* tape, const Tensor& input, double rate, Mode mode, Rng& rng);
Tensor softmax_channels(Tape* tape, const Tensor& logits);
Tensor pixel_cross_entropy(Tape* tape, const Tensor& probs, const LabelMap& target);
Tensor euclidean_loss(Tape* tape, const Tensor& pred, const Tensor& target);
Tensor concat_channels(Tape* tape, const std::vector<Tensor>& parts);
Tensor slice_channels(Tape* tape, const Tensor& input, int first, int count);

// Plumbing ops used to compose the network.
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& a, double s);
Tensor sum(Tape* tape, const Tensor& a);
Tensor reshape(Tape* tape, const Tensor& a, Shape target);
Tensor slice_cols(Tape* tape, const Tensor& a, int first, int count);  // [B,D] -> [B,count]
Tensor detach(const Tensor& a);

}  // namespace redec

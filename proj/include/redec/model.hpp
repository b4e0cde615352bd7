#pragma once

#include <string>
#include <vector>

#include "redec/labelmap.hpp"
#include "redec/ops.hpp"
#include "redec/rng.hpp"
#include "redec/tensor.hpp"

namespace redec {

// Scalable network geometry. The desk defaults keep the 4x4 bottleneck of the
// full-scale design while staying trainable on a CPU in minutes; the
// paper-scale instance is 128px input, five stages, 256-channel codes.
struct NetConfig {
    int input_size = 64;
    std::vector<int> stage_channels = {8, 16, 32, 32};
    int convs_per_stage = 2;
    int bottleneck_channels = 16;  // per code; the bottleneck tensor carries twice this
    int landmark_count = 7;
    int identity_count = 8;
    int lstm_hidden = 16;
    int spatial_steps = 3;                    // K
    std::vector<int> feedback_sizes = {7, 5, 3};  // square side per spatial step
    int temporal_steps = 10;                  // T
    std::vector<int> regressor_channels = {8, 8, 16, 16, 32};
    double dropout_rate = 0.4;
    double bn_eps = 1e-5;
    double init_std = 0.05;
    // When true the LSTM update runs after every spatial step instead of once
    // per frame after the last step.
    bool lstm_every_spatial_step = false;

    int num_stages() const { return static_cast<int>(stage_channels.size()); }
    int bottleneck_side() const { return input_size >> num_stages(); }
    int response_channels() const { return landmark_count + 1; }
    void validate() const;
};

// Closed-form trainable-parameter count for a configuration; must agree
// exactly with the instantiated model.
int64_t parameter_count(const NetConfig& cfg);

struct ConvBnParams {
    Tensor w, b, gamma, beta;
    bool has_bn = true;
};

struct LinearParams {
    Tensor w, b;
};

struct LstmParams {
    Tensor wx;  // [4H, C]
    Tensor wh;  // [4H, H]
    Tensor b;   // [4H]
    LinearParams out;  // maps h back to the code width
};

// All named tensors of the network plus the mean shape. Parameter
// registration order is fixed by construction and shared with the
// checkpoint format.
struct ModelParams {
    NetConfig cfg;
    std::vector<ConvBnParams> encoder;    // num_stages * convs_per_stage
    std::vector<ConvBnParams> decoder;    // mirrored; the last conv has no BN and emits L+1 channels
    LstmParams lstm;
    LinearParams classifier;              // code width -> identity_count
    std::vector<ConvBnParams> regressor;  // one conv per regressor stage
    LinearParams regressor_fc;            // feature vector -> 2L
    Tensor mean_shape;                    // [2L], pixels; not trainable

    std::vector<std::string> names;   // registration order
    std::vector<Tensor> trainables;   // aligned with names

    static ModelParams create(const NetConfig& cfg, uint64_t seed);
    Tensor find(const std::string& name) const;
    void check_finite() const;
};

struct BottleneckCode {
    Tensor c_id;  // temporal-invariant half
    Tensor c_pe;  // temporal-variant half
};

struct EncodeOutput {
    BottleneckCode code;
    std::vector<PoolIndices> pool_indices;  // one per stage
    Tensor skip_shallow;  // stage-2 pre-pool features
    Tensor skip_deep;     // last-stage pre-pool features
};

struct LstmState {
    Tensor h;
    Tensor c;
    static LstmState zeros(int batch, int hidden) {
        return {Tensor::zeros({batch, hidden}), Tensor::zeros({batch, hidden})};
    }
};

// Forward passes. All take an optional tape; Mode gates dropout.
EncodeOutput encode(Tape* tape, const Tensor& image, const LabelMap& label_map, const ModelParams& params);
Tensor decode(Tape* tape, const BottleneckCode& code, const std::vector<PoolIndices>& pool_indices,
              const ModelParams& params);
Tensor classify_identity(Tape* tape, const Tensor& c_id, const ModelParams& params, Mode mode, Rng& dropout_rng);
Tensor regress_shape(Tape* tape, const Tensor& response_probs, const Tensor& skip_shallow, const Tensor& skip_deep,
                     const ModelParams& params, Mode mode, Rng& dropout_rng);
std::pair<Tensor, LstmState> lstm_temporal_step(Tape* tape, const Tensor& c_pe, const LstmState& state,
                                                const ModelParams& params);

// Landmark coordinates implied by regressor offsets: mean_shape + offsets *
// input_size, per batch row.
std::vector<std::vector<double>> offsets_to_landmarks(const Tensor& offsets, const ModelParams& params);

// Regression target for ground-truth landmarks: (gt - mean_shape) / input_size.
Tensor landmarks_to_offsets(const std::vector<std::vector<double>>& landmarks, const ModelParams& params);

}  // namespace redec

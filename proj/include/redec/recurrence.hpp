#pragma once

#include <optional>
#include <vector>

#include "redec/labelmap.hpp"
#include "redec/model.hpp"

namespace redec {

// Per-pixel argmax over response channels; ties resolve to the smallest
// channel index (background-favoring).
LabelMap merge_response_map(const Tensor& probs);

// Confidence-weighted centroid per landmark over pixels carrying its merged
// label; falls back to the channel argmax pixel when the label is absent.
// Returns [B][2L] as (x,y) pairs in pixels.
std::vector<std::vector<double>> extract_centers(const LabelMap& merged, const Tensor& probs);

// Paints a square of side `square_size` around each rounded center, clipped
// to bounds. Landmarks are painted in ascending order; later ones overwrite.
LabelMap render_label_map(const std::vector<std::vector<double>>& centers, int square_size, int height, int width);

// Initial guess: the mean shape at the coarsest square size.
LabelMap init_label_map(const std::vector<double>& mean_shape, int height, int width, int batch = 1);

struct SpatialStep {
    Tensor logits;                             // [B,L+1,H,W]
    Tensor probs;                              // softmaxed response
    LabelMap merged;
    std::vector<std::vector<double>> centers;  // [B][2L]
    LabelMap fed_back;                         // label map rendered from the centers
    EncodeOutput enc;
};

struct SpatialTrace {
    std::vector<SpatialStep> steps;  // length K
};

// K encode-decode passes over one image batch with label-map feedback.
// Parameters are shared across steps (single model).
SpatialTrace spatial_forward(Tape* tape, const Tensor& image, const LabelMap& z0, const ModelParams& params,
                             int steps, const std::vector<int>& sizes);

struct FrameResult {
    LabelMap used_init;  // label map the frame's first encode consumed
    SpatialTrace trace;
    Tensor final_logits;  // after the temporal update (or the last spatial map without it)
    Tensor final_probs;
    LabelMap final_merged;
    std::vector<std::vector<double>> final_centers;
    BottleneckCode code;  // c_id of the last step, c_pe after the temporal update
};

struct TemporalTrace {
    std::vector<FrameResult> frames;  // length T
    LstmState state;                  // state after the last frame
};

// Unrolls the model across a clip: frame 1 starts from the mean shape, later
// frames from the previous frame's final centers (tracking initialization).
// `use_lstm=false` turns the temporal unit into a pass-through (ablation).
TemporalTrace temporal_forward(Tape* tape, const std::vector<Tensor>& frames, const ModelParams& params, int steps,
                               const std::vector<int>& sizes, bool use_lstm = true);

}  // namespace redec

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "redec/labelmap.hpp"
#include "redec/rng.hpp"
#include "redec/tensor.hpp"

namespace redec {

// Generator configuration. Counts are per identity; the defaults are the
// desk-scale dataset the training and ablation protocols run on.
struct GenConfig {
    int image_size = 64;
    int landmark_count = 7;
    int train_identities = 8;
    int eval_identities = 4;
    int frames_per_identity = 2;        // base training frames, each spawning augments
    int augments_per_frame = 10;
    int eval_frames_per_identity = 12;  // stratified half small / half large pose
    int train_clips_per_identity = 2;
    int eval_clips_per_identity = 4;
    int clip_length = 10;
    uint64_t seed = 1;

    void validate() const;
};

// One synthetic person: canonical landmark layout in the unit frame plus the
// appearance parameters that make the face recognizable across frames.
struct Identity {
    int id = 0;
    uint64_t seed = 0;
    std::vector<double> canonical_shape;          // 2L unit coords, margin >= 0.15
    std::vector<double> blob_intensity;           // per landmark
    std::vector<double> blob_sigma;               // per landmark, pixels at scale 1
    std::vector<std::array<double, 3>> blob_color;
    double face_shade = 0.0;
    std::array<double, 3> face_tint = {1, 1, 1};
    double background_level = 0.0;
};

struct PoseExpr {
    double scale = 1.0;
    double rotation = 0.0;  // radians
    double dx = 0.0, dy = 0.0;
    std::vector<double> expression;  // coefficients over the fixed deformation basis

    static constexpr int kExprDims = 3;
};

enum class PoseTag { Small, Large };

struct FrameSample {
    Tensor image;                   // [3,H,W], values quantized to k/255
    std::vector<double> landmarks;  // 2L pixel coords (x,y) pairs
    LabelMap label_map;             // 5-px squares, ascending-landmark overwrite
    LabelMap response_target;       // 5-px squares, nearest-landmark overlap rule
    int identity = 0;
    PoseExpr pose;
    double effective_rotation = 0.0;  // includes augmentation rotation and flip
    PoseTag tag = PoseTag::Small;
};

struct Clip {
    int identity = 0;
    std::vector<FrameSample> frames;
    PoseTag tag = PoseTag::Small;  // large when any frame is large-pose
};

struct AugmentParams {
    bool flip = false;
    double scale = 1.0;
    double rotation = 0.0;  // radians
    double dx = 0.0, dy = 0.0;
};

Identity make_identity(uint64_t seed, const GenConfig& cfg);

// Deterministic function of (identity, pose); throws GenerationError when a
// landmark leaves the frame.
FrameSample render_frame(const Identity& identity, const PoseExpr& pose, int height, int width);

Clip sample_clip(const Identity& identity, int length, uint64_t seed, int image_size = 64);
// Stratified variant used for evaluation sets: |base rotation| drawn in
// [abs_rot_lo, abs_rot_hi].
Clip sample_clip_in_range(const Identity& identity, int length, uint64_t seed, double abs_rot_lo, double abs_rot_hi,
                          int image_size = 64);

FrameSample augment(const FrameSample& sample, uint64_t seed, const std::vector<int>& symmetry);
FrameSample augment_with_params(const FrameSample& sample, const AugmentParams& params, const std::vector<int>& symmetry);

// Index relabeling applied on horizontal flip; involutive by construction.
std::vector<int> landmark_symmetry_table(int landmark_count);

// Piecewise-cubic (Catmull-Rom) resampling of keyframed trajectory values.
std::vector<double> smooth_track(const std::vector<double>& keyframes, int frames);

// Ground-truth map rasterization shared by the generator and the loader.
LabelMap render_ground_truth_label(const std::vector<double>& landmarks, int height, int width);
LabelMap render_response_target(const std::vector<double>& landmarks, int height, int width);

struct Dataset {
    GenConfig config;
    std::vector<FrameSample> train_images;
    std::vector<FrameSample> eval_images;
    std::vector<Clip> train_clips;
    std::vector<Clip> eval_clips;
    std::vector<double> mean_shape;  // over the training images
    std::vector<int> symmetry;
    std::array<int, 2> eye_pair = {0, 3};  // landmarks whose distance normalizes errors
    std::vector<int> train_identity_ids;
    std::vector<int> eval_identity_ids;
};

Dataset build_dataset(const GenConfig& cfg);
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Portable pixmap / graymap helpers (8-bit binary).
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);
void write_pgm(const std::string& path, const std::vector<double>& values, int height, int width);

}  // namespace redec

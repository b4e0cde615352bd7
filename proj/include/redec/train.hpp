#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "redec/checkpoint.hpp"
#include "redec/recurrence.hpp"
#include "redec/syndata.hpp"

namespace redec {

// Three-stage protocol: stage 1 trains encoder-decoder-regressor on images,
// stage 2 adds the identity classifier, stage 3 adds the temporal unit and
// fine-tunes on clips (forward and reversed).
struct TrainConfig {
    int epochs_stage1 = 30;
    int epochs_stage2 = 20;
    int epochs_stage3 = 50;
    int batch_size = 8;   // images per optimizer step
    int clip_batch = 5;   // clips per optimizer step, identity-disjoint
    double lambda_map = 1.0;
    double lambda_reg = 1.0;
    double lambda_cls = 1.0;
    double lr0 = 0.01;
    double momentum = 0.9;
    double decay_factor = 0.8;
    int decay_period = 10;
    double grad_clip = 5.0;  // applied in stage 3 only
    uint64_t seed = 1;
    bool use_lstm = true;  // stage 3; false yields the frame-wise ablation
    NetConfig net;         // geometry for fresh stage-1 models

    int epochs_for(int stage) const {
        return stage == 1 ? epochs_stage1 : stage == 2 ? epochs_stage2 : epochs_stage3;
    }
};

struct EpochLog {
    int epoch = 0;
    int stage = 0;
    double lr = 0.0;
    double map_loss = 0.0;
    double reg_loss = 0.0;
    double cls_loss = 0.0;
    double total = 0.0;
};

struct StageResult {
    Checkpoint checkpoint;
    std::vector<EpochLog> log;
    int64_t optimizer_steps = 0;
};

// Groups clips into batches of at most `batch` with pairwise-distinct
// identities inside every batch.
std::vector<std::vector<size_t>> assemble_clip_batches(const std::vector<Clip>& clips, std::vector<size_t> order,
                                                       int batch);

// Loss assembly for one already-run forward pass; exposed for tests.
struct LossParts {
    Tensor map_loss;  // summed over spatial steps (stages 1-2) or frames (stage 3)
    Tensor reg_loss;
    Tensor cls_loss;  // undefined when the classifier branch is inactive
    Tensor total;
};
LossParts total_loss(Tape* tape, int stage, const TrainConfig& cfg, const std::vector<Tensor>& map_losses,
                     const std::vector<Tensor>& reg_losses, const std::vector<Tensor>& cls_losses);

using EpochCallback = std::function<void(int epoch, const ModelParams& params, const EpochLog& log)>;

// Runs one stage. Stages above 1 require the previous stage's checkpoint.
// `image_initial_maps`, when given, overrides the mean-shape initialization
// per training image (used by the cascade baseline, whose later networks
// train on the previous network's outputs). Stage 3 with use_lstm=false
// fine-tunes frame-wise on the clip frames instead of unrolling clips.
StageResult run_stage(int stage, const Dataset& data, const std::optional<Checkpoint>& ckpt_in, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = nullptr, const std::vector<LabelMap>* image_initial_maps = nullptr);

// Untrained stage-1 checkpoint for a dataset: fresh Gaussian parameters, mean
// shape from the training images. Ablations that train from scratch with
// different loss gates share one of these so their initializations agree.
Checkpoint make_fresh_checkpoint(const Dataset& data, const TrainConfig& cfg);

void write_loss_log(const std::string& path, const std::vector<EpochLog>& log);

// Maps a dataset identity id to the classifier class index (train identities
// only; evaluation identities are disjoint by construction).
int identity_class_index(const Dataset& data, int identity_id);

}  // namespace redec

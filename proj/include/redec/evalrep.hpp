#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "redec/train.hpp"

namespace redec {

struct SampleError {
    std::vector<double> per_landmark_px;
    double normalized = 0.0;
    PoseTag tag = PoseTag::Small;
    int clip = -1;
    int frame = -1;
    bool excluded = false;  // degenerate normalizer
};

// Mean per-landmark point-to-point distance over the face-scale normalizer.
double normalized_error(const std::vector<double>& pred, const std::vector<double>& gt, double normalizer);

struct SummaryRow {
    int count = 0;
    double mean = 0.0;
    double stddev = 0.0;  // population
    double failure_rate = 0.0;
    int excluded = 0;
};
SummaryRow summarize(const std::vector<double>& errors, double threshold = 0.10);

// Image protocol: mean-shape initialization, errors reported after every
// spatial step. per_step[k][i] is sample i's error after step k+1.
struct ImageEvalResult {
    std::vector<std::vector<SampleError>> per_step;
};
ImageEvalResult evaluate_images(const ModelParams& params, const std::vector<FrameSample>& frames,
                                const std::array<int, 2>& eye_pair, int workers = 1);

// Tracking protocol over clips: frame t >= 2 initializes from frame t-1's
// final centers; the temporal unit carries state within a clip.
struct TrackingEvalResult {
    std::vector<SampleError> errors;  // one per frame, tagged with clip/frame ids
};
TrackingEvalResult evaluate_tracking(const ModelParams& params, const std::vector<Clip>& clips,
                                     const std::array<int, 2>& eye_pair, bool use_lstm, int workers = 1);

// Fraction of ground-truth landmark pixels whose merged final response label
// matches the target map.
double landmark_pixel_accuracy(const ModelParams& params, const std::vector<FrameSample>& frames, int workers = 1);

void summary_to_json(nlohmann::json& j, const SummaryRow& row);
SummaryRow summarize_subset(const std::vector<SampleError>& errors, double threshold,
                            PoseTag tag, bool filter_by_tag);

struct Report {
    nlohmann::json data;
    std::vector<std::string> sample_csv;  // one line per evaluated sample, header included
};

// Writes the JSON report to `path` and the per-sample CSV to
// `path + ".samples.csv"`.
void export_report(const Report& report, const std::string& path);
Report parse_report(const std::string& path);

// Final-step response probabilities as one graymap per channel, plus the
// merged map, for qualitative inspection.
void dump_response_maps(const ModelParams& params, const std::vector<FrameSample>& frames, const std::string& dir,
                        int max_frames = 8);

// --- ablation experiments ---------------------------------------------------

struct ExperimentConfig {
    std::string data_dir;
    std::string out_dir;
    uint64_t seed = 1;
    int workers = 1;
    double threshold = 0.10;
    int stage1_epochs = 30;
    int stage2_epochs = 10;
    int stage3_epochs = 8;
    int cascade_epochs = 8;
    int discls_epochs = 20;  // classifier-ablation comparison window
    TrainConfig train;       // weights, batch sizes, optimizer settings
};

// variant in {steps-k, cascade, no-trnn, no-cls, full}; trains whatever
// checkpoints are missing under out_dir, evaluates, and returns the report.
Report run_experiment(const std::string& variant, const ExperimentConfig& cfg);

}  // namespace redec

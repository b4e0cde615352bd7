#include "redec/evalrep.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

namespace redec {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Tensor as_batch(const Tensor& image) {
    return reshape(nullptr, image, {1, image.dim(0), image.dim(1), image.dim(2)});
}

double eye_distance(const std::vector<double>& lms, const std::array<int, 2>& eye_pair) {
    const double dx = lms[static_cast<size_t>(2 * eye_pair[0])] - lms[static_cast<size_t>(2 * eye_pair[1])];
    const double dy = lms[static_cast<size_t>(2 * eye_pair[0] + 1)] - lms[static_cast<size_t>(2 * eye_pair[1] + 1)];
    return std::sqrt(dx * dx + dy * dy);
}

// Work-stealing loop whose results land in index order, so worker count
// never changes the output.
void parallel_for(int64_t n, int workers, const std::function<void(int64_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
            for (int64_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (std::thread& t : pool) t.join();
}

SampleError score_landmarks(const std::vector<double>& pred, const FrameSample& truth,
                            const std::array<int, 2>& eye_pair) {
    SampleError e;
    e.tag = truth.tag;
    const int L = static_cast<int>(truth.landmarks.size()) / 2;
    e.per_landmark_px.resize(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
        const double dx = pred[static_cast<size_t>(2 * l)] - truth.landmarks[static_cast<size_t>(2 * l)];
        const double dy = pred[static_cast<size_t>(2 * l + 1)] - truth.landmarks[static_cast<size_t>(2 * l + 1)];
        e.per_landmark_px[static_cast<size_t>(l)] = std::sqrt(dx * dx + dy * dy);
    }
    const double norm = eye_distance(truth.landmarks, eye_pair);
    if (norm < 1.0) {
        e.excluded = true;
        e.normalized = 0.0;
    } else {
        e.normalized = normalized_error(pred, truth.landmarks, norm);
    }
    return e;
}

}  // namespace

double normalized_error(const std::vector<double>& pred, const std::vector<double>& gt, double normalizer) {
    if (normalizer <= 0.0) throw ContractError("normalizer must be positive");
    if (pred.size() != gt.size() || pred.empty()) throw ContractError("prediction/ground-truth length mismatch");
    const int L = static_cast<int>(pred.size()) / 2;
    double s = 0.0;
    for (int l = 0; l < L; ++l) {
        const double dx = pred[static_cast<size_t>(2 * l)] - gt[static_cast<size_t>(2 * l)];
        const double dy = pred[static_cast<size_t>(2 * l + 1)] - gt[static_cast<size_t>(2 * l + 1)];
        s += std::sqrt(dx * dx + dy * dy);
    }
    return s / (L * normalizer);
}

SummaryRow summarize(const std::vector<double>& errors, double threshold) {
    if (errors.empty()) throw UsageError("cannot summarize an empty error list");
    SummaryRow row;
    row.count = static_cast<int>(errors.size());
    double s = 0.0;
    int failures = 0;
    for (double e : errors) {
        s += e;
        if (e > threshold) ++failures;
    }
    row.mean = s / row.count;
    double v = 0.0;
    for (double e : errors) v += (e - row.mean) * (e - row.mean);
    row.stddev = std::sqrt(v / row.count);
    row.failure_rate = static_cast<double>(failures) / row.count;
    return row;
}

SummaryRow summarize_subset(const std::vector<SampleError>& errors, double threshold, PoseTag tag, bool filter_by_tag) {
    std::vector<double> vals;
    int excluded = 0;
    for (const SampleError& e : errors) {
        if (filter_by_tag && e.tag != tag) continue;
        if (e.excluded) {
            ++excluded;
            continue;
        }
        vals.push_back(e.normalized);
    }
    SummaryRow row = summarize(vals, threshold);
    row.excluded = excluded;
    return row;
}

ImageEvalResult evaluate_images(const ModelParams& params, const std::vector<FrameSample>& frames,
                                const std::array<int, 2>& eye_pair, int workers) {
    const NetConfig& cfg = params.cfg;
    ImageEvalResult result;
    result.per_step.assign(static_cast<size_t>(cfg.spatial_steps), std::vector<SampleError>(frames.size()));

    parallel_for(static_cast<int64_t>(frames.size()), workers, [&](int64_t i) {
        const FrameSample& sample = frames[static_cast<size_t>(i)];
        Rng rng(0);  // dropout is an identity in eval mode
        Tensor x = as_batch(sample.image);
        LabelMap z0 = init_label_map(params.mean_shape.vec(), cfg.input_size, cfg.input_size, 1);
        SpatialTrace trace = spatial_forward(nullptr, x, z0, params, cfg.spatial_steps, cfg.feedback_sizes);
        for (int k = 0; k < cfg.spatial_steps; ++k) {
            const SpatialStep& step = trace.steps[static_cast<size_t>(k)];
            Tensor offsets = regress_shape(nullptr, step.probs, step.enc.skip_shallow, step.enc.skip_deep, params,
                                           Mode::Eval, rng);
            auto pred = offsets_to_landmarks(offsets, params);
            SampleError e = score_landmarks(pred[0], sample, eye_pair);
            result.per_step[static_cast<size_t>(k)][static_cast<size_t>(i)] = std::move(e);
        }
    });
    return result;
}

TrackingEvalResult evaluate_tracking(const ModelParams& params, const std::vector<Clip>& clips,
                                     const std::array<int, 2>& eye_pair, bool use_lstm, int workers) {
    const NetConfig& cfg = params.cfg;
    std::vector<std::vector<SampleError>> per_clip(clips.size());

    parallel_for(static_cast<int64_t>(clips.size()), workers, [&](int64_t c) {
        const Clip& clip = clips[static_cast<size_t>(c)];
        Rng rng(0);
        std::vector<Tensor> frames;
        for (const FrameSample& f : clip.frames) frames.push_back(as_batch(f.image));
        TemporalTrace trace = temporal_forward(nullptr, frames, params, cfg.spatial_steps, cfg.feedback_sizes, use_lstm);
        std::vector<SampleError> errs;
        for (size_t t = 0; t < clip.frames.size(); ++t) {
            const FrameResult& fr = trace.frames[t];
            const SpatialStep& last = fr.trace.steps.back();
            Tensor offsets = regress_shape(nullptr, fr.final_probs, last.enc.skip_shallow, last.enc.skip_deep, params,
                                           Mode::Eval, rng);
            auto pred = offsets_to_landmarks(offsets, params);
            SampleError e = score_landmarks(pred[0], clip.frames[t], eye_pair);
            e.tag = clip.tag;  // subsetting is clip-level under the tracking protocol
            e.clip = static_cast<int>(c);
            e.frame = static_cast<int>(t);
            errs.push_back(std::move(e));
        }
        per_clip[static_cast<size_t>(c)] = std::move(errs);
    });

    TrackingEvalResult result;
    for (auto& v : per_clip)
        for (auto& e : v) result.errors.push_back(std::move(e));
    return result;
}

double landmark_pixel_accuracy(const ModelParams& params, const std::vector<FrameSample>& frames, int workers) {
    const NetConfig& cfg = params.cfg;
    std::vector<int64_t> correct(frames.size(), 0), total(frames.size(), 0);
    parallel_for(static_cast<int64_t>(frames.size()), workers, [&](int64_t i) {
        const FrameSample& sample = frames[static_cast<size_t>(i)];
        Tensor x = as_batch(sample.image);
        LabelMap z0 = init_label_map(params.mean_shape.vec(), cfg.input_size, cfg.input_size, 1);
        SpatialTrace trace = spatial_forward(nullptr, x, z0, params, cfg.spatial_steps, cfg.feedback_sizes);
        const LabelMap& merged = trace.steps.back().merged;
        int64_t c = 0, t = 0;
        for (size_t p = 0; p < sample.response_target.values.size(); ++p) {
            if (sample.response_target.values[p] > 0) {
                ++t;
                if (merged.values[p] == sample.response_target.values[p]) ++c;
            }
        }
        correct[static_cast<size_t>(i)] = c;
        total[static_cast<size_t>(i)] = t;
    });
    int64_t c = 0, t = 0;
    for (size_t i = 0; i < frames.size(); ++i) {
        c += correct[i];
        t += total[i];
    }
    return t > 0 ? static_cast<double>(c) / static_cast<double>(t) : 0.0;
}

void summary_to_json(json& j, const SummaryRow& row) {
    j["count"] = row.count;
    j["mean"] = row.mean;
    j["std"] = row.stddev;
    j["failure"] = row.failure_rate;
    j["excluded"] = row.excluded;
}

void export_report(const Report& report, const std::string& path) {
    std::error_code ec;
    fs::create_directories(fs::path(path).parent_path(), ec);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write report " + path);
    f << report.data.dump(1) << "\n";
    if (!f) throw IoError("failed while writing report " + path);
    std::ofstream csv(path + ".samples.csv", std::ios::binary);
    if (!csv) throw IoError("cannot write per-sample csv next to " + path);
    for (const std::string& line : report.sample_csv) csv << line << "\n";
    if (!csv) throw IoError("failed while writing per-sample csv next to " + path);
}

Report parse_report(const std::string& path) {
    Report r;
    std::ifstream f(path);
    if (!f) throw IoError("cannot open report " + path);
    try {
        f >> r.data;
    } catch (const json::exception& e) {
        throw FormatError("report parse failure: " + std::string(e.what()));
    }
    std::ifstream csv(path + ".samples.csv");
    if (csv) {
        std::string line;
        while (std::getline(csv, line)) r.sample_csv.push_back(line);
    }
    return r;
}

void dump_response_maps(const ModelParams& params, const std::vector<FrameSample>& frames, const std::string& dir,
                        int max_frames) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    const NetConfig& cfg = params.cfg;
    const int n = std::min<int>(max_frames, static_cast<int>(frames.size()));
    for (int i = 0; i < n; ++i) {
        Tensor x = as_batch(frames[static_cast<size_t>(i)].image);
        LabelMap z0 = init_label_map(params.mean_shape.vec(), cfg.input_size, cfg.input_size, 1);
        SpatialTrace trace = spatial_forward(nullptr, x, z0, params, cfg.spatial_steps, cfg.feedback_sizes);
        const Tensor& probs = trace.steps.back().probs;
        const int C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
        const int64_t plane = static_cast<int64_t>(H) * W;
        for (int c = 0; c < C; ++c) {
            std::vector<double> v(probs.data() + c * plane, probs.data() + (c + 1) * plane);
            char name[64];
            std::snprintf(name, sizeof(name), "frame%03d_ch%02d.pgm", i, c);
            write_pgm((fs::path(dir) / name).string(), v, H, W);
        }
        const LabelMap& merged = trace.steps.back().merged;
        std::vector<double> mv(merged.values.size());
        for (size_t p = 0; p < mv.size(); ++p) mv[p] = static_cast<double>(merged.values[p]) / cfg.landmark_count;
        char name[64];
        std::snprintf(name, sizeof(name), "frame%03d_merged.pgm", i);
        write_pgm((fs::path(dir) / name).string(), mv, H, W);
    }
}

// ---------------------------------------------------------------------------
// experiments
// ---------------------------------------------------------------------------

namespace {

std::string ckpt_path(const ExperimentConfig& cfg, const std::string& name) {
    return (fs::path(cfg.out_dir) / (name + ".ckpt")).string();
}

// Loads the named checkpoint or trains it with `fn` and persists the result.
Checkpoint ensure_checkpoint(const ExperimentConfig& cfg, const std::string& name,
                             const std::function<StageResult()>& fn) {
    const std::string path = ckpt_path(cfg, name);
    if (fs::exists(path)) return load_checkpoint(path);
    StageResult res = fn();
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    save_checkpoint(res.checkpoint, path);
    write_loss_log(path + ".losses.csv", res.log);
    return res.checkpoint;
}

TrainConfig stage_config(const ExperimentConfig& cfg, int stage, int epochs) {
    TrainConfig t = cfg.train;
    t.seed = cfg.seed;
    if (stage == 1) t.epochs_stage1 = epochs;
    if (stage == 2) t.epochs_stage2 = epochs;
    if (stage == 3) t.epochs_stage3 = epochs;
    return t;
}

void add_subset_rows(json& j, const std::vector<SampleError>& errors, double threshold) {
    json overall, small, large;
    summary_to_json(overall, summarize_subset(errors, threshold, PoseTag::Small, false));
    summary_to_json(small, summarize_subset(errors, threshold, PoseTag::Small, true));
    summary_to_json(large, summarize_subset(errors, threshold, PoseTag::Large, true));
    j["overall"] = overall;
    j["small_pose"] = small;
    j["large_pose"] = large;
}

std::vector<std::string> errors_csv(const std::string& protocol, const std::vector<std::vector<SampleError>>& per_step) {
    std::vector<std::string> lines = {"protocol,step,clip,frame,sample,tag,normalized_error,excluded"};
    char buf[192];
    for (size_t k = 0; k < per_step.size(); ++k)
        for (size_t i = 0; i < per_step[k].size(); ++i) {
            const SampleError& e = per_step[k][i];
            std::snprintf(buf, sizeof(buf), "%s,%zu,%d,%d,%zu,%s,%.17g,%d", protocol.c_str(), k + 1, e.clip, e.frame, i,
                          e.tag == PoseTag::Large ? "large" : "small", e.normalized, e.excluded ? 1 : 0);
            lines.emplace_back(buf);
        }
    return lines;
}

Checkpoint ensure_stage1(const ExperimentConfig& cfg, const Dataset& data) {
    return ensure_checkpoint(cfg, "s1", [&]() {
        return run_stage(1, data, std::nullopt, stage_config(cfg, 1, cfg.stage1_epochs));
    });
}

Checkpoint ensure_stage2(const ExperimentConfig& cfg, const Dataset& data) {
    Checkpoint s1 = ensure_stage1(cfg, data);
    return ensure_checkpoint(cfg, "s2", [&]() {
        return run_stage(2, data, s1, stage_config(cfg, 2, cfg.stage2_epochs));
    });
}

Report experiment_steps(const ExperimentConfig& cfg, const Dataset& data) {
    Checkpoint s1 = ensure_stage1(cfg, data);
    ImageEvalResult ev = evaluate_images(s1.params, data.eval_images, data.eye_pair, cfg.workers);

    Report rep;
    rep.data["variant"] = "steps-k";
    rep.data["parameter_count"] = parameter_count(s1.params.cfg);
    json steps = json::array();
    for (size_t k = 0; k < ev.per_step.size(); ++k) {
        json row;
        row["step"] = k + 1;
        add_subset_rows(row, ev.per_step[k], cfg.threshold);
        steps.push_back(row);
    }
    rep.data["steps"] = steps;

    auto rel_improvement = [&](bool filter, PoseTag tag) {
        const double e1 = summarize_subset(ev.per_step.front(), cfg.threshold, tag, filter).mean;
        const double eK = summarize_subset(ev.per_step.back(), cfg.threshold, tag, filter).mean;
        return (e1 - eK) / e1;
    };
    rep.data["improvement"] = {{"overall", rel_improvement(false, PoseTag::Small)},
                               {"small_pose", rel_improvement(true, PoseTag::Small)},
                               {"large_pose", rel_improvement(true, PoseTag::Large)}};
    rep.sample_csv = errors_csv("image", ev.per_step);
    return rep;
}

Report experiment_cascade(const ExperimentConfig& cfg, const Dataset& data) {
    Checkpoint recurrent = ensure_stage1(cfg, data);
    const int K = cfg.train.net.spatial_steps;

    // each cascade network is the same architecture run for a single step
    TrainConfig casc_cfg = stage_config(cfg, 1, cfg.cascade_epochs);
    casc_cfg.net.spatial_steps = 1;
    casc_cfg.net.feedback_sizes = {7};

    std::vector<Checkpoint> cascade;
    std::vector<LabelMap> stage_inputs;  // per training image, input to the next stage
    std::vector<LabelMap> eval_inputs;
    for (int j = 0; j < K; ++j) {
        const std::vector<LabelMap>* init = j == 0 ? nullptr : &stage_inputs;
        Checkpoint cj = ensure_checkpoint(cfg, "cascade" + std::to_string(j + 1), [&]() {
            return run_stage(1, data, std::nullopt, casc_cfg, nullptr, init);
        });
        cascade.push_back(cj);

        if (j < K - 1) {
            // feed the next stage with this stage's outputs, rendered at the
            // same square size the recurrent model uses for its feedback
            const int square = cfg.train.net.feedback_sizes[static_cast<size_t>(j)];
            std::vector<LabelMap> next(data.train_images.size(), LabelMap());
            parallel_for(static_cast<int64_t>(data.train_images.size()), cfg.workers, [&](int64_t i) {
                const FrameSample& s = data.train_images[static_cast<size_t>(i)];
                Tensor x = as_batch(s.image);
                const LabelMap z0 = j == 0 ? init_label_map(cj.params.mean_shape.vec(), x.dim(2), x.dim(3), 1)
                                           : stage_inputs[static_cast<size_t>(i)];
                SpatialTrace tr = spatial_forward(nullptr, x, z0, cj.params, 1, {square});
                next[static_cast<size_t>(i)] = tr.steps.back().fed_back;
            });
            stage_inputs = std::move(next);
        }
    }

    // chained evaluation mirroring the recurrent per-step protocol
    std::vector<std::vector<SampleError>> per_step(static_cast<size_t>(K),
                                                   std::vector<SampleError>(data.eval_images.size()));
    parallel_for(static_cast<int64_t>(data.eval_images.size()), cfg.workers, [&](int64_t i) {
        const FrameSample& sample = data.eval_images[static_cast<size_t>(i)];
        Rng rng(0);
        Tensor x = as_batch(sample.image);
        LabelMap z = init_label_map(cascade[0].params.mean_shape.vec(), x.dim(2), x.dim(3), 1);
        for (int j = 0; j < K; ++j) {
            const int square = cfg.train.net.feedback_sizes[static_cast<size_t>(j)];
            SpatialTrace tr = spatial_forward(nullptr, x, z, cascade[static_cast<size_t>(j)].params, 1, {square});
            const SpatialStep& step = tr.steps.back();
            Tensor offsets = regress_shape(nullptr, step.probs, step.enc.skip_shallow, step.enc.skip_deep,
                                           cascade[static_cast<size_t>(j)].params, Mode::Eval, rng);
            auto pred = offsets_to_landmarks(offsets, cascade[static_cast<size_t>(j)].params);
            per_step[static_cast<size_t>(j)][static_cast<size_t>(i)] = score_landmarks(pred[0], sample, data.eye_pair);
            z = step.fed_back;
        }
    });

    Report rep;
    rep.data["variant"] = "cascade";
    const int64_t per_model = parameter_count(cascade[0].params.cfg);
    rep.data["parameter_count"] = {{"recurrent", parameter_count(recurrent.params.cfg)},
                                   {"cascade_per_model", per_model},
                                   {"cascade_total", per_model * K},
                                   {"ratio", static_cast<double>(per_model * K) / parameter_count(recurrent.params.cfg)}};
    CheckpointBytes rec_bytes = checkpoint_bytes(ckpt_path(cfg, "s1"));
    uint64_t casc_files = 0, casc_params = 0;
    for (int j = 0; j < K; ++j) {
        CheckpointBytes cb = checkpoint_bytes(ckpt_path(cfg, "cascade" + std::to_string(j + 1)));
        casc_files += cb.file_bytes;
        casc_params += cb.param_bytes;
    }
    rep.data["persisted_bytes"] = {{"recurrent_file", rec_bytes.file_bytes},
                                   {"recurrent_params", rec_bytes.param_bytes},
                                   {"cascade_files", casc_files},
                                   {"cascade_params", casc_params},
                                   {"file_ratio", static_cast<double>(casc_files) / rec_bytes.file_bytes},
                                   {"param_ratio", static_cast<double>(casc_params) / rec_bytes.param_bytes}};
    json steps = json::array();
    for (size_t k = 0; k < per_step.size(); ++k) {
        json row;
        row["step"] = k + 1;
        add_subset_rows(row, per_step[k], cfg.threshold);
        steps.push_back(row);
    }
    rep.data["steps"] = steps;
    rep.sample_csv = errors_csv("cascade", per_step);
    return rep;
}

Report experiment_no_trnn(const ExperimentConfig& cfg, const Dataset& data) {
    Checkpoint s2 = ensure_stage2(cfg, data);
    Checkpoint full = ensure_checkpoint(cfg, "s3_full", [&]() {
        TrainConfig t = stage_config(cfg, 3, cfg.stage3_epochs);
        t.use_lstm = true;
        return run_stage(3, data, s2, t);
    });
    Checkpoint no_trnn = ensure_checkpoint(cfg, "s3_no_trnn", [&]() {
        TrainConfig t = stage_config(cfg, 3, cfg.stage3_epochs);
        t.use_lstm = false;
        return run_stage(3, data, s2, t);
    });

    TrackingEvalResult ev_full = evaluate_tracking(full.params, data.eval_clips, data.eye_pair, true, cfg.workers);
    TrackingEvalResult ev_nt = evaluate_tracking(no_trnn.params, data.eval_clips, data.eye_pair, false, cfg.workers);

    Report rep;
    rep.data["variant"] = "no-trnn";
    json jf, jn;
    add_subset_rows(jf, ev_full.errors, cfg.threshold);
    add_subset_rows(jn, ev_nt.errors, cfg.threshold);
    rep.data["full"] = jf;
    rep.data["without_trnn"] = jn;
    const SummaryRow f = summarize_subset(ev_full.errors, cfg.threshold, PoseTag::Small, false);
    const SummaryRow n = summarize_subset(ev_nt.errors, cfg.threshold, PoseTag::Small, false);
    rep.data["margins"] = {{"mean", n.mean - f.mean}, {"std", n.stddev - f.stddev}, {"failure", n.failure_rate - f.failure_rate}};
    rep.sample_csv = errors_csv("tracking_full", {ev_full.errors});
    auto nt_csv = errors_csv("tracking_no_trnn", {ev_nt.errors});
    rep.sample_csv.insert(rep.sample_csv.end(), nt_csv.begin() + 1, nt_csv.end());
    return rep;
}

Report experiment_no_cls(const ExperimentConfig& cfg, const Dataset& data) {
    // Twin runs from one initialization: identity loss on vs off. The map and
    // regression paths are identical, so the curves isolate the identity cue.
    TrainConfig base = stage_config(cfg, 2, cfg.discls_epochs);
    Checkpoint init = make_fresh_checkpoint(data, base);

    auto run_curve = [&](double lambda_cls, std::vector<double>& curve) {
        TrainConfig t = base;
        t.lambda_cls = lambda_cls;
        return run_stage(2, data, init, t, [&](int, const ModelParams& p, const EpochLog&) {
            curve.push_back(landmark_pixel_accuracy(p, data.eval_images, cfg.workers));
        });
    };
    std::vector<double> acc_cls, acc_nocls;
    StageResult with_cls = run_curve(1.0, acc_cls);
    StageResult without_cls = run_curve(0.0, acc_nocls);
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    save_checkpoint(with_cls.checkpoint, ckpt_path(cfg, "discls_with"));
    save_checkpoint(without_cls.checkpoint, ckpt_path(cfg, "discls_without"));

    Report rep;
    rep.data["variant"] = "no-cls";
    rep.data["epochs"] = cfg.discls_epochs;
    rep.data["accuracy_with_cls"] = acc_cls;
    rep.data["accuracy_without_cls"] = acc_nocls;
    double best15 = 0.0;
    for (size_t e = 0; e < acc_cls.size() && e < 15; ++e) best15 = std::max(best15, acc_cls[e]);
    rep.data["best_with_cls_by_epoch15"] = best15;
    rep.data["without_cls_final"] = acc_nocls.empty() ? 0.0 : acc_nocls.back();
    rep.sample_csv = {"protocol,epoch,accuracy_with_cls,accuracy_without_cls"};
    char buf[128];
    for (size_t e = 0; e < acc_cls.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "pixel_accuracy,%zu,%.17g,%.17g", e + 1, acc_cls[e],
                      e < acc_nocls.size() ? acc_nocls[e] : 0.0);
        rep.sample_csv.emplace_back(buf);
    }
    return rep;
}

Report experiment_full(const ExperimentConfig& cfg, const Dataset& data) {
    Checkpoint s2 = ensure_stage2(cfg, data);
    Checkpoint full = ensure_checkpoint(cfg, "s3_full", [&]() {
        TrainConfig t = stage_config(cfg, 3, cfg.stage3_epochs);
        t.use_lstm = true;
        return run_stage(3, data, s2, t);
    });

    TrackingEvalResult track = evaluate_tracking(full.params, data.eval_clips, data.eye_pair, true, cfg.workers);
    ImageEvalResult img = evaluate_images(full.params, data.eval_images, data.eye_pair, cfg.workers);

    Report rep;
    rep.data["variant"] = "full";
    rep.data["parameter_count"] = parameter_count(full.params.cfg);
    json jt;
    add_subset_rows(jt, track.errors, cfg.threshold);
    rep.data["tracking"] = jt;
    json steps = json::array();
    for (size_t k = 0; k < img.per_step.size(); ++k) {
        json row;
        row["step"] = k + 1;
        add_subset_rows(row, img.per_step[k], cfg.threshold);
        steps.push_back(row);
    }
    rep.data["image_steps"] = steps;
    rep.sample_csv = errors_csv("tracking", {track.errors});
    return rep;
}

}  // namespace

Report run_experiment(const std::string& variant, const ExperimentConfig& cfg) {
    Dataset data = load_dataset(cfg.data_dir);
    if (variant == "steps-k") return experiment_steps(cfg, data);
    if (variant == "cascade") return experiment_cascade(cfg, data);
    if (variant == "no-trnn") return experiment_no_trnn(cfg, data);
    if (variant == "no-cls") return experiment_no_cls(cfg, data);
    if (variant == "full") return experiment_full(cfg, data);
    throw UsageError("unknown experiment variant: " + variant);
}

}  // namespace redec

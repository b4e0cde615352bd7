#include "redec/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "redec/checkpoint.hpp"
#include "redec/evalrep.hpp"
#include "redec/gradcheck.hpp"
#include "redec/syndata.hpp"
#include "redec/train.hpp"

namespace redec {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw FormatError("config parse failure in " + path + ": " + e.what());
    }
    return j;
}

GenConfig gen_config_from_json(const json& j) {
    GenConfig c;
    c.image_size = j.value("image_size", c.image_size);
    c.landmark_count = j.value("landmark_count", c.landmark_count);
    c.train_identities = j.value("train_identities", c.train_identities);
    c.eval_identities = j.value("eval_identities", c.eval_identities);
    c.frames_per_identity = j.value("frames_per_identity", c.frames_per_identity);
    c.augments_per_frame = j.value("augments_per_frame", c.augments_per_frame);
    c.eval_frames_per_identity = j.value("eval_frames_per_identity", c.eval_frames_per_identity);
    c.train_clips_per_identity = j.value("train_clips_per_identity", c.train_clips_per_identity);
    c.eval_clips_per_identity = j.value("eval_clips_per_identity", c.eval_clips_per_identity);
    c.clip_length = j.value("clip_length", c.clip_length);
    c.seed = j.value("seed", c.seed);
    return c;
}

void apply_net_json(NetConfig& n, const json& j) {
    n.input_size = j.value("input_size", n.input_size);
    n.stage_channels = j.value("stage_channels", n.stage_channels);
    n.convs_per_stage = j.value("convs_per_stage", n.convs_per_stage);
    n.bottleneck_channels = j.value("bottleneck_channels", n.bottleneck_channels);
    n.lstm_hidden = j.value("lstm_hidden", n.lstm_hidden);
    n.spatial_steps = j.value("spatial_steps", n.spatial_steps);
    n.feedback_sizes = j.value("feedback_sizes", n.feedback_sizes);
    n.temporal_steps = j.value("temporal_steps", n.temporal_steps);
    n.regressor_channels = j.value("regressor_channels", n.regressor_channels);
    n.dropout_rate = j.value("dropout_rate", n.dropout_rate);
    n.init_std = j.value("init_std", n.init_std);
    n.lstm_every_spatial_step = j.value("lstm_every_spatial_step", n.lstm_every_spatial_step);
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.epochs_stage1 = j.value("epochs_stage1", c.epochs_stage1);
    c.epochs_stage2 = j.value("epochs_stage2", c.epochs_stage2);
    c.epochs_stage3 = j.value("epochs_stage3", c.epochs_stage3);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.clip_batch = j.value("clip_batch", c.clip_batch);
    c.lambda_map = j.value("lambda_map", c.lambda_map);
    c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
    c.lambda_cls = j.value("lambda_cls", c.lambda_cls);
    c.lr0 = j.value("lr0", c.lr0);
    c.momentum = j.value("momentum", c.momentum);
    c.decay_factor = j.value("decay_factor", c.decay_factor);
    c.decay_period = j.value("decay_period", c.decay_period);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.use_lstm = j.value("use_lstm", c.use_lstm);
    if (j.contains("net")) apply_net_json(c.net, j.at("net"));
    return c;
}

int cmd_gen(const std::string& config_path, const std::string& out, uint64_t seed, bool seed_given) {
    GenConfig cfg;
    if (!config_path.empty()) cfg = gen_config_from_json(load_json_file(config_path));
    if (seed_given) cfg.seed = seed;
    Dataset ds = build_dataset(cfg);
    save_dataset(ds, out);
    std::printf("dataset written to %s: %zu train images, %zu eval images, %zu train clips, %zu eval clips\n",
                out.c_str(), ds.train_images.size(), ds.eval_images.size(), ds.train_clips.size(), ds.eval_clips.size());
    return 0;
}

int cmd_train(int stage, const std::string& data_dir, const std::string& config_path, const std::string& ckpt_in,
              const std::string& ckpt_out, const std::string& log_path, uint64_t seed, bool seed_given) {
    TrainConfig cfg;
    if (!config_path.empty()) cfg = train_config_from_json(load_json_file(config_path));
    if (seed_given) cfg.seed = seed;
    Dataset data = load_dataset(data_dir);
    std::optional<Checkpoint> prev;
    if (!ckpt_in.empty()) prev = load_checkpoint(ckpt_in);
    StageResult res = run_stage(stage, data, prev, cfg);
    std::error_code ec;
    fs::create_directories(fs::path(ckpt_out).parent_path(), ec);
    save_checkpoint(res.checkpoint, ckpt_out);
    write_loss_log(log_path.empty() ? ckpt_out + ".losses.csv" : log_path, res.log);
    std::printf("stage %d done: %d epochs, final total loss %.6f, checkpoint %s\n", stage,
                static_cast<int>(res.log.size()), res.log.empty() ? 0.0 : res.log.back().total, ckpt_out.c_str());
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& report_path,
             const std::string& dump_dir, double threshold, int workers, const std::string& lstm_mode) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    Dataset data = load_dataset(data_dir);
    const bool use_lstm = lstm_mode == "on" || (lstm_mode == "auto" && ckpt.stage >= 3);

    ImageEvalResult img = evaluate_images(ckpt.params, data.eval_images, data.eye_pair, workers);
    TrackingEvalResult track = evaluate_tracking(ckpt.params, data.eval_clips, data.eye_pair, use_lstm, workers);

    Report rep;
    rep.data["checkpoint_stage"] = ckpt.stage;
    rep.data["threshold"] = threshold;
    rep.data["use_lstm"] = use_lstm;
    rep.data["parameter_count"] = parameter_count(ckpt.params.cfg);
    json steps = json::array();
    for (size_t k = 0; k < img.per_step.size(); ++k) {
        json row;
        row["step"] = k + 1;
        json overall, small, large;
        summary_to_json(overall, summarize_subset(img.per_step[k], threshold, PoseTag::Small, false));
        summary_to_json(small, summarize_subset(img.per_step[k], threshold, PoseTag::Small, true));
        summary_to_json(large, summarize_subset(img.per_step[k], threshold, PoseTag::Large, true));
        row["overall"] = overall;
        row["small_pose"] = small;
        row["large_pose"] = large;
        steps.push_back(row);
    }
    rep.data["image_steps"] = steps;
    json jt, jt_small, jt_large;
    summary_to_json(jt, summarize_subset(track.errors, threshold, PoseTag::Small, false));
    summary_to_json(jt_small, summarize_subset(track.errors, threshold, PoseTag::Small, true));
    summary_to_json(jt_large, summarize_subset(track.errors, threshold, PoseTag::Large, true));
    rep.data["tracking"] = {{"overall", jt}, {"small_pose", jt_small}, {"large_pose", jt_large}};

    rep.sample_csv = {"protocol,step,clip,frame,sample,tag,normalized_error,excluded"};
    char buf[192];
    for (size_t k = 0; k < img.per_step.size(); ++k)
        for (size_t i = 0; i < img.per_step[k].size(); ++i) {
            const SampleError& e = img.per_step[k][i];
            std::snprintf(buf, sizeof(buf), "image,%zu,-1,-1,%zu,%s,%.17g,%d", k + 1, i,
                          e.tag == PoseTag::Large ? "large" : "small", e.normalized, e.excluded ? 1 : 0);
            rep.sample_csv.emplace_back(buf);
        }
    for (size_t i = 0; i < track.errors.size(); ++i) {
        const SampleError& e = track.errors[i];
        std::snprintf(buf, sizeof(buf), "tracking,0,%d,%d,%zu,%s,%.17g,%d", e.clip, e.frame, i,
                      e.tag == PoseTag::Large ? "large" : "small", e.normalized, e.excluded ? 1 : 0);
        rep.sample_csv.emplace_back(buf);
    }
    export_report(rep, report_path);
    if (!dump_dir.empty()) dump_response_maps(ckpt.params, data.eval_images, dump_dir);
    std::printf("report written to %s (%zu image samples x %zu steps, %zu tracked frames)\n", report_path.c_str(),
                img.per_step.empty() ? 0 : img.per_step[0].size(), img.per_step.size(), track.errors.size());
    return 0;
}

int cmd_ablate(const std::string& variant, const std::string& data_dir, const std::string& out_dir,
               const std::string& config_path, uint64_t seed, bool seed_given, int workers) {
    ExperimentConfig cfg;
    cfg.data_dir = data_dir;
    cfg.out_dir = out_dir;
    cfg.workers = workers;
    if (!config_path.empty()) {
        json j = load_json_file(config_path);
        cfg.stage1_epochs = j.value("stage1_epochs", cfg.stage1_epochs);
        cfg.stage2_epochs = j.value("stage2_epochs", cfg.stage2_epochs);
        cfg.stage3_epochs = j.value("stage3_epochs", cfg.stage3_epochs);
        cfg.cascade_epochs = j.value("cascade_epochs", cfg.cascade_epochs);
        cfg.discls_epochs = j.value("discls_epochs", cfg.discls_epochs);
        cfg.threshold = j.value("threshold", cfg.threshold);
        if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
    }
    if (seed_given) cfg.seed = seed;
    cfg.train.seed = cfg.seed;
    Report rep = run_experiment(variant, cfg);
    const std::string report_path = (fs::path(out_dir) / (variant + "_report.json")).string();
    export_report(rep, report_path);
    std::printf("%s experiment report written to %s\n", variant.c_str(), report_path.c_str());
    return 0;
}

int cmd_gradcheck(const std::string& ops_arg, double tol, int instances, uint64_t seed) {
    std::vector<std::string> ops;
    if (ops_arg.empty()) {
        ops = gradcheck_op_names();
    } else {
        std::stringstream ss(ops_arg);
        std::string tok;
        while (std::getline(ss, tok, ',')) ops.push_back(tok);
    }
    auto results = run_gradcheck(ops, tol, instances, seed);
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("%-22s instances=%-4d coords=%-4d skipped=%-3d max_rel_err=%.3e tol=%.0e  %s\n", r.op.c_str(),
                    r.instances, r.coords_checked, r.coords_skipped, r.max_rel_err, r.tol, r.pass ? "PASS" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    if (!all_pass) throw NumericError("finite-difference check violated");
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"recurrent encoder-decoder for sequential face alignment (desk scale)"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    std::string gen_config, gen_out;
    uint64_t gen_seed = 1;
    gen->add_option("--config", gen_config, "generator config (json)");
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "master seed (u64)");

    // train
    auto* train = app.add_subcommand("train", "run one training stage");
    int train_stage = 1;
    std::string train_data, train_config, train_ckpt_in, train_ckpt_out, train_log;
    uint64_t train_seed = 1;
    train->add_option("--stage", train_stage, "training stage {1|2|3}")->required()->check(CLI::Range(1, 3));
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--config", train_config, "training config (json)");
    train->add_option("--ckpt-in", train_ckpt_in, "checkpoint to continue from (required for stages 2 and 3)");
    train->add_option("--ckpt-out", train_ckpt_out, "checkpoint to write")->required();
    train->add_option("--log", train_log, "loss log csv (default: <ckpt-out>.losses.csv)");
    auto* train_seed_opt = train->add_option("--seed", train_seed, "seed (u64)");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out sets");
    std::string eval_ckpt, eval_data, eval_report, eval_dump, eval_lstm = "auto";
    double eval_threshold = 0.10;
    int eval_workers = 1;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint manifest")->required();
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--report", eval_report, "report path (json; per-sample csv written alongside)")->required();
    eval->add_option("--dump-maps", eval_dump, "directory for per-channel response-map graymaps");
    eval->add_option("--threshold", eval_threshold, "failure threshold on normalized error (default 0.10)");
    eval->add_option("--workers", eval_workers, "parallel evaluation workers (default 1)")->check(CLI::PositiveNumber);
    eval->add_option("--lstm", eval_lstm, "temporal unit at eval: auto|on|off")->check(CLI::IsMember({"auto", "on", "off"}));

    // ablate
    auto* ablate = app.add_subcommand("ablate", "train (if needed) and evaluate an ablation variant");
    std::string ab_variant, ab_data, ab_out, ab_config;
    uint64_t ab_seed = 1;
    int ab_workers = 1;
    ablate->add_option("--variant", ab_variant, "steps-k|cascade|no-trnn|no-cls|full")
        ->required()
        ->check(CLI::IsMember({"steps-k", "cascade", "no-trnn", "no-cls", "full"}));
    ablate->add_option("--data", ab_data, "dataset directory")->required();
    ablate->add_option("--out", ab_out, "artifact/report directory")->required();
    ablate->add_option("--config", ab_config, "experiment config (json)");
    auto* ab_seed_opt = ablate->add_option("--seed", ab_seed, "seed (u64)");
    ablate->add_option("--workers", ab_workers, "parallel evaluation workers")->check(CLI::PositiveNumber);

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    std::string gc_ops;
    double gc_tol = 1e-4;
    int gc_instances = 100;
    uint64_t gc_seed = 7;
    gc->add_option("--ops", gc_ops, "comma-separated op list (default: all)");
    gc->add_option("--tol", gc_tol, "relative-error tolerance for non-smooth ops (default 1e-4)");
    gc->add_option("--instances", gc_instances, "seeded instances per op (default 100)");
    gc->add_option("--seed", gc_seed, "seed (u64)");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            std::puts(app.help().c_str());
            return 0;
        }
        std::fprintf(stderr, "%s\n", e.what());
        return 1;
    }

    try {
        if (gen->parsed()) return cmd_gen(gen_config, gen_out, gen_seed, !gen_seed_opt->empty());
        if (train->parsed())
            return cmd_train(train_stage, train_data, train_config, train_ckpt_in, train_ckpt_out, train_log, train_seed,
                             !train_seed_opt->empty());
        if (eval->parsed())
            return cmd_eval(eval_ckpt, eval_data, eval_report, eval_dump, eval_threshold, eval_workers, eval_lstm);
        if (ablate->parsed())
            return cmd_ablate(ab_variant, ab_data, ab_out, ab_config, ab_seed, !ab_seed_opt->empty(), ab_workers);
        if (gc->parsed()) return cmd_gradcheck(gc_ops, gc_tol, gc_instances, gc_seed);
        return 1;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "contract violation: %s\n", e.what());
        return 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const Error& e) {  // data, format, io, generation
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

}  // namespace redec

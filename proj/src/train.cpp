#include "redec/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace redec {

namespace {

Tensor as_batch(const Tensor& image) {
    return reshape(nullptr, image, {1, image.dim(0), image.dim(1), image.dim(2)});
}

Tensor classifier_loss(Tape* tape, const Tensor& logits, int class_index) {
    // vector softmax + cross-entropy via the pixel ops on a [B,N,1,1] view
    const int B = logits.dim(0), N = logits.dim(1);
    Tensor as_map = reshape(tape, logits, {B, N, 1, 1});
    Tensor probs = softmax_channels(tape, as_map);
    LabelMap target(B, 1, 1);
    for (int b = 0; b < B; ++b) target.values[static_cast<size_t>(b)] = class_index;
    return pixel_cross_entropy(tape, probs, target);
}

struct SampleLosses {
    Tensor map, reg, cls;
};

// One image through K spatial steps: summed per-step map loss, final-step
// regression, optional identity classification.
SampleLosses image_forward_losses(Tape* tape, const FrameSample& sample, const ModelParams& params, int stage,
                                  const TrainConfig& cfg, const Dataset& data, Rng& dropout_rng,
                                  const LabelMap* z0_override = nullptr) {
    const NetConfig& net = params.cfg;
    Tensor x = as_batch(sample.image);
    LabelMap z0 = z0_override ? *z0_override : init_label_map(params.mean_shape.vec(), net.input_size, net.input_size, 1);
    SpatialTrace trace = spatial_forward(tape, x, z0, params, net.spatial_steps, net.feedback_sizes);

    SampleLosses out;
    for (const SpatialStep& step : trace.steps) {
        Tensor ce = pixel_cross_entropy(tape, step.probs, sample.response_target);
        out.map = out.map.defined() ? add(tape, out.map, ce) : ce;
    }
    const SpatialStep& last = trace.steps.back();
    Tensor offsets = regress_shape(tape, last.probs, last.enc.skip_shallow, last.enc.skip_deep, params, Mode::Train, dropout_rng);
    out.reg = euclidean_loss(tape, offsets, landmarks_to_offsets({sample.landmarks}, params));
    if (stage >= 2 && cfg.lambda_cls > 0.0) {
        Tensor logits = classify_identity(tape, last.enc.code.c_id, params, Mode::Train, dropout_rng);
        out.cls = classifier_loss(tape, logits, identity_class_index(data, sample.identity));
    }
    return out;
}

// One clip through the temporal unroll; losses accumulate over T frames.
SampleLosses clip_forward_losses(Tape* tape, const Clip& clip, bool reversed, const ModelParams& params,
                                 const TrainConfig& cfg, const Dataset& data, Rng& dropout_rng) {
    const NetConfig& net = params.cfg;
    std::vector<Tensor> frames;
    std::vector<const FrameSample*> order;
    for (size_t t = 0; t < clip.frames.size(); ++t) {
        const FrameSample& f = clip.frames[reversed ? clip.frames.size() - 1 - t : t];
        frames.push_back(as_batch(f.image));
        order.push_back(&f);
    }
    TemporalTrace trace = temporal_forward(tape, frames, params, net.spatial_steps, net.feedback_sizes, cfg.use_lstm);

    SampleLosses out;
    const int cls_index = identity_class_index(data, clip.identity);
    for (size_t t = 0; t < trace.frames.size(); ++t) {
        const FrameResult& fr = trace.frames[t];
        const FrameSample& truth = *order[t];
        Tensor ce = pixel_cross_entropy(tape, fr.final_probs, truth.response_target);
        out.map = out.map.defined() ? add(tape, out.map, ce) : ce;

        const SpatialStep& last = fr.trace.steps.back();
        Tensor offsets =
            regress_shape(tape, fr.final_probs, last.enc.skip_shallow, last.enc.skip_deep, params, Mode::Train, dropout_rng);
        Tensor reg = euclidean_loss(tape, offsets, landmarks_to_offsets({truth.landmarks}, params));
        out.reg = out.reg.defined() ? add(tape, out.reg, reg) : reg;

        if (cfg.lambda_cls > 0.0) {
            Tensor logits = classify_identity(tape, fr.code.c_id, params, Mode::Train, dropout_rng);
            Tensor cls = classifier_loss(tape, logits, cls_index);
            out.cls = out.cls.defined() ? add(tape, out.cls, cls) : cls;
        }
    }
    return out;
}

}  // namespace

std::vector<std::vector<size_t>> assemble_clip_batches(const std::vector<Clip>& clips, std::vector<size_t> order, int batch) {
    std::vector<std::vector<size_t>> batches;
    std::vector<std::vector<int>> batch_ids;
    for (size_t idx : order) {
        const int ident = clips[idx].identity;
        bool placed = false;
        for (size_t b = 0; b < batches.size() && !placed; ++b) {
            if (static_cast<int>(batches[b].size()) < batch &&
                std::find(batch_ids[b].begin(), batch_ids[b].end(), ident) == batch_ids[b].end()) {
                batches[b].push_back(idx);
                batch_ids[b].push_back(ident);
                placed = true;
            }
        }
        if (!placed) {
            batches.push_back({idx});
            batch_ids.push_back({ident});
        }
    }
    return batches;
}

int identity_class_index(const Dataset& data, int identity_id) {
    for (size_t i = 0; i < data.train_identity_ids.size(); ++i)
        if (data.train_identity_ids[i] == identity_id) return static_cast<int>(i);
    throw DataError("identity " + std::to_string(identity_id) + " is not a training identity");
}

LossParts total_loss(Tape* tape, int stage, const TrainConfig& cfg, const std::vector<Tensor>& map_losses,
                     const std::vector<Tensor>& reg_losses, const std::vector<Tensor>& cls_losses) {
    if (map_losses.empty()) throw ContractError("total_loss needs at least the map loss terms");
    if (stage < 2 && !cls_losses.empty()) throw ContractError("stage 1 carries no classification loss");
    LossParts parts;
    for (const Tensor& t : map_losses) parts.map_loss = parts.map_loss.defined() ? add(tape, parts.map_loss, t) : t;
    for (const Tensor& t : reg_losses) parts.reg_loss = parts.reg_loss.defined() ? add(tape, parts.reg_loss, t) : t;
    for (const Tensor& t : cls_losses) parts.cls_loss = parts.cls_loss.defined() ? add(tape, parts.cls_loss, t) : t;
    parts.total = scale(tape, parts.map_loss, cfg.lambda_map);
    if (parts.reg_loss.defined()) parts.total = add(tape, parts.total, scale(tape, parts.reg_loss, cfg.lambda_reg));
    if (parts.cls_loss.defined()) parts.total = add(tape, parts.total, scale(tape, parts.cls_loss, cfg.lambda_cls));
    return parts;
}

Checkpoint make_fresh_checkpoint(const Dataset& data, const TrainConfig& cfg) {
    Checkpoint ckpt;
    NetConfig net = cfg.net;
    net.input_size = data.config.image_size;
    net.landmark_count = data.config.landmark_count;
    net.identity_count = static_cast<int>(data.train_identity_ids.size());
    if (net.identity_count < 2) throw DataError("training needs at least two identities");
    ckpt.params = ModelParams::create(net, cfg.seed);
    ckpt.params.mean_shape.vec() = data.mean_shape;
    ckpt.opt.momentum = cfg.momentum;
    ckpt.opt.lr0 = cfg.lr0;
    ckpt.opt.decay_factor = cfg.decay_factor;
    ckpt.opt.decay_period = cfg.decay_period;
    ckpt.opt.init(ckpt.params.trainables);
    ckpt.stage = 1;
    ckpt.epoch = 0;
    return ckpt;
}

StageResult run_stage(int stage, const Dataset& data, const std::optional<Checkpoint>& ckpt_in, const TrainConfig& cfg,
                      const EpochCallback& on_epoch, const std::vector<LabelMap>* image_initial_maps) {
    if (stage < 1 || stage > 3) throw UsageError("stage must be 1, 2 or 3");
    if (stage > 1 && !ckpt_in.has_value()) throw UsageError("stage " + std::to_string(stage) + " requires a stage " +
                                                            std::to_string(stage - 1) + " checkpoint");

    StageResult result;
    if (ckpt_in.has_value()) {
        result.checkpoint = *ckpt_in;
    } else {
        result.checkpoint = make_fresh_checkpoint(data, cfg);
    }
    Checkpoint& ckpt = result.checkpoint;
    ModelParams& params = ckpt.params;
    ckpt.stage = stage;

    const int epochs = cfg.epochs_for(stage);
    if (epochs < 1) throw ConfigError("epoch count must be positive");
    const bool clip_stage = stage == 3 && cfg.use_lstm;
    const bool framewise_stage3 = stage == 3 && !cfg.use_lstm;
    if (stage == 3 && data.train_clips.empty()) throw DataError("stage 3 needs training clips");
    if (stage < 3 && data.train_images.empty()) throw DataError("stages 1-2 need training images");
    if (image_initial_maps && image_initial_maps->size() != data.train_images.size())
        throw ContractError("initial-map override must cover every training image");

    // frame-wise fine-tuning pool for the temporal ablation
    std::vector<const FrameSample*> framewise_pool;
    if (framewise_stage3)
        for (const Clip& c : data.train_clips)
            for (const FrameSample& f : c.frames) framewise_pool.push_back(&f);

    for (int epoch = 0; epoch < epochs; ++epoch) {
        const double lr = lr_at_epoch(epoch, ckpt.opt);
        Rng shuffle_rng(mix_seed(cfg.seed, 0x5e0f + static_cast<uint64_t>(stage), static_cast<uint64_t>(epoch)));
        EpochLog log;
        log.epoch = epoch;
        log.stage = stage;
        log.lr = lr;
        int loss_terms = 0;

        if (!clip_stage) {
            const size_t n_samples = framewise_stage3 ? framewise_pool.size() : data.train_images.size();
            std::vector<size_t> order(n_samples);
            for (size_t i = 0; i < order.size(); ++i) order[i] = i;
            shuffle_rng.shuffle(order);

            for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
                const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
                const double inv_b = 1.0 / static_cast<double>(end - start);
                zero_grads(params.trainables);
                for (size_t i = start; i < end; ++i) {
                    const FrameSample& sample =
                        framewise_stage3 ? *framewise_pool[order[i]] : data.train_images[order[i]];
                    const LabelMap* z0 = (!framewise_stage3 && image_initial_maps) ? &(*image_initial_maps)[order[i]] : nullptr;
                    Rng dropout_rng(mix_seed(cfg.seed, 0xd40 + static_cast<uint64_t>(stage),
                                             mix_seed(static_cast<uint64_t>(epoch), order[i])));
                    Tape tape;
                    SampleLosses sl = image_forward_losses(&tape, sample, params, stage, cfg, data, dropout_rng, z0);
                    LossParts parts = total_loss(&tape, stage, cfg, {sl.map}, {sl.reg},
                                                 sl.cls.defined() ? std::vector<Tensor>{sl.cls} : std::vector<Tensor>{});
                    log.map_loss += sl.map.item();
                    log.reg_loss += sl.reg.item();
                    log.cls_loss += sl.cls.defined() ? sl.cls.item() : 0.0;
                    log.total += parts.total.item();
                    ++loss_terms;
                    if (!std::isfinite(parts.total.item()))
                        throw NumericError("training diverged at stage " + std::to_string(stage) + " epoch " +
                                           std::to_string(epoch) + " sample " + std::to_string(order[i]));
                    Tensor scaled = scale(&tape, parts.total, inv_b);
                    backward(scaled, tape);
                }
                sgd_momentum_step(params.trainables, ckpt.opt, lr);
                ++result.optimizer_steps;
            }
        } else {
            std::vector<size_t> order(data.train_clips.size());
            for (size_t i = 0; i < order.size(); ++i) order[i] = i;
            shuffle_rng.shuffle(order);
            auto batches = assemble_clip_batches(data.train_clips, order, cfg.clip_batch);

            for (size_t b = 0; b < batches.size(); ++b) {
                // each direction is its own optimizer step, doubling the data
                for (int dir = 0; dir < 2; ++dir) {
                    const bool reversed = dir == 1;
                    const double inv_b = 1.0 / static_cast<double>(batches[b].size());
                    zero_grads(params.trainables);
                    for (size_t idx : batches[b]) {
                        const Clip& clip = data.train_clips[idx];
                        if (static_cast<int>(clip.frames.size()) < data.config.clip_length)
                            throw DataError("clip shorter than T");
                        Rng dropout_rng(mix_seed(cfg.seed, 0xd43, mix_seed(static_cast<uint64_t>(epoch), idx, static_cast<uint64_t>(dir))));
                        Tape tape;
                        SampleLosses sl = clip_forward_losses(&tape, clip, reversed, params, cfg, data, dropout_rng);
                        LossParts parts = total_loss(&tape, stage, cfg, {sl.map}, {sl.reg},
                                                     sl.cls.defined() ? std::vector<Tensor>{sl.cls} : std::vector<Tensor>{});
                        log.map_loss += sl.map.item();
                        log.reg_loss += sl.reg.item();
                        log.cls_loss += sl.cls.defined() ? sl.cls.item() : 0.0;
                        log.total += parts.total.item();
                        ++loss_terms;
                        if (!std::isfinite(parts.total.item()))
                            throw NumericError("training diverged at stage 3 epoch " + std::to_string(epoch) + " clip " +
                                               std::to_string(idx));
                        Tensor scaled = scale(&tape, parts.total, inv_b);
                        backward(scaled, tape);
                    }
                    clip_grad_norm(params.trainables, cfg.grad_clip);
                    sgd_momentum_step(params.trainables, ckpt.opt, lr);
                    ++result.optimizer_steps;
                }
            }
        }

        params.check_finite();
        if (loss_terms > 0) {
            log.map_loss /= loss_terms;
            log.reg_loss /= loss_terms;
            log.cls_loss /= loss_terms;
            log.total /= loss_terms;
        }
        ckpt.epoch = epoch + 1;
        result.log.push_back(log);
        if (on_epoch) on_epoch(epoch, params, log);
    }
    return result;
}

void write_loss_log(const std::string& path, const std::vector<EpochLog>& log) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write loss log " + path);
    f << "epoch,stage,lr,map_loss,reg_loss,cls_loss,total\n";
    char buf[256];
    for (const EpochLog& e : log) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.stage, e.lr, e.map_loss,
                      e.reg_loss, e.cls_loss, e.total);
        f << buf;
    }
    if (!f) throw IoError("failed while writing loss log " + path);
}

}  // namespace redec

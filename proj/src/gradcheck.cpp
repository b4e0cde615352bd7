#include "redec/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "redec/model.hpp"
#include "redec/ops.hpp"
#include "redec/recurrence.hpp"
#include "redec/syndata.hpp"

namespace redec {

namespace {

struct CheckCase {
    std::vector<Tensor> leaves;
    std::function<Tensor(Tape*)> forward;  // scalar loss; pure in the leaves
};

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool rg = true) {
    Tensor t = Tensor::zeros(std::move(shape), rg);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

// Wraps an op forward in a weighted sum against weights drawn once, so every
// output element carries a distinct, call-stable gradient.
std::function<Tensor(Tape*)> wsum_of(std::function<Tensor(Tape*)> op_fwd, Rng& rng) {
    Tensor probe = op_fwd(nullptr);
    Tensor w = random_tensor(probe.shape(), rng, -1.0, 1.0, false);
    return [op_fwd = std::move(op_fwd), w](Tape* t) { return sum(t, mul(t, op_fwd(t), w)); };
}

NetConfig tiny_config() {
    NetConfig cfg;
    cfg.input_size = 16;
    cfg.stage_channels = {4, 4};
    cfg.convs_per_stage = 1;
    cfg.bottleneck_channels = 2;
    cfg.landmark_count = 2;
    cfg.identity_count = 2;
    cfg.lstm_hidden = 3;
    cfg.spatial_steps = 2;
    cfg.feedback_sizes = {5, 3};
    cfg.temporal_steps = 2;
    cfg.regressor_channels = {4, 4};
    return cfg;
}

CheckCase make_case(const std::string& op, Rng& rng) {
    CheckCase c;
    if (op == "conv2d") {
        const int C = 1 + static_cast<int>(rng.below(3)), F = 1 + static_cast<int>(rng.below(3));
        const int H = 4 + static_cast<int>(rng.below(3)), W = 4 + static_cast<int>(rng.below(3));
        const int k = rng.coin() ? 3 : 1;
        const int pad = k == 3 ? static_cast<int>(rng.below(2)) : 0;
        Tensor x = random_tensor({2, C, H, W}, rng);
        Tensor w = random_tensor({F, C, k, k}, rng);
        Tensor b = random_tensor({F}, rng);
        c.leaves = {x, w, b};
        c.forward = wsum_of([x, w, b, pad](Tape* t) { return conv2d(t, x, w, b, 1, pad); }, rng);
    } else if (op == "maxpool") {
        Tensor x = random_tensor({1, 2, 4, 4}, rng);
        c.leaves = {x};
        c.forward = wsum_of([x](Tape* t) { return maxpool_with_indices(t, x, 2).first; }, rng);
    } else if (op == "unpool") {
        Tensor base = random_tensor({1, 2, 4, 4}, rng, -1.0, 1.0, false);
        PoolIndices idx = maxpool_with_indices(nullptr, base, 2).second;
        Tensor x = random_tensor({1, 2, 2, 2}, rng);
        c.leaves = {x};
        c.forward = wsum_of([x, idx](Tape* t) { return unpool_with_indices(t, x, idx); }, rng);
    } else if (op == "avgpool") {
        Tensor x = random_tensor({2, 2, 4, 4}, rng);
        c.leaves = {x};
        c.forward = wsum_of([x](Tape* t) { return avgpool(t, x, 2); }, rng);
    } else if (op == "relu" || op == "sigmoid" || op == "tanh") {
        const Act kind = op == "relu" ? Act::Relu : op == "sigmoid" ? Act::Sigmoid : Act::Tanh;
        Tensor x = random_tensor({2, 3, 3, 3}, rng, -2.0, 2.0);
        c.leaves = {x};
        c.forward = wsum_of([x, kind](Tape* t) { return activation(t, x, kind); }, rng);
    } else if (op == "linear") {
        const int B = 2, D = 3 + static_cast<int>(rng.below(3)), E = 2 + static_cast<int>(rng.below(3));
        Tensor x = random_tensor({B, D}, rng);
        Tensor w = random_tensor({E, D}, rng);
        Tensor b = random_tensor({E}, rng);
        c.leaves = {x, w, b};
        c.forward = wsum_of([x, w, b](Tape* t) { return linear(t, x, w, b); }, rng);
    } else if (op == "batchnorm2d") {
        Tensor x = random_tensor({2, 3, 3, 3}, rng);
        Tensor g = random_tensor({3}, rng, 0.5, 1.5);
        Tensor b = random_tensor({3}, rng);
        c.leaves = {x, g, b};
        c.forward = wsum_of([x, g, b](Tape* t) { return batchnorm2d(t, x, g, b, 1e-5); }, rng);
    } else if (op == "dropout") {
        Tensor x = random_tensor({2, 2, 3, 3}, rng);
        const uint64_t mask_seed = rng.next_u64();
        c.leaves = {x};
        c.forward = wsum_of(
            [x, mask_seed](Tape* t) {
                Rng mask_rng(mask_seed);  // identical mask on every call
                return dropout(t, x, 0.4, Mode::Train, mask_rng);
            },
            rng);
    } else if (op == "softmax_cross_entropy") {
        const int C = 3 + static_cast<int>(rng.below(3));
        Tensor logits = random_tensor({2, C, 3, 3}, rng, -2.0, 2.0);
        LabelMap target(2, 3, 3);
        for (auto& v : target.values) v = static_cast<int32_t>(rng.below(static_cast<uint64_t>(C)));
        c.leaves = {logits};
        c.forward = [logits, target](Tape* t) { return pixel_cross_entropy(t, softmax_channels(t, logits), target); };
    } else if (op == "euclidean_loss") {
        Tensor p = random_tensor({3, 4}, rng);
        Tensor q = random_tensor({3, 4}, rng, -1.0, 1.0, false);
        c.leaves = {p};
        c.forward = [p, q](Tape* t) { return euclidean_loss(t, p, q); };
    } else if (op == "concat_channels") {
        Tensor a = random_tensor({2, 2, 3, 3}, rng);
        Tensor b = random_tensor({2, 3, 3, 3}, rng);
        c.leaves = {a, b};
        c.forward = wsum_of([a, b](Tape* t) { return concat_channels(t, {a, b}); }, rng);
    } else if (op == "lstm_step") {
        ModelParams params = ModelParams::create(tiny_config(), rng.next_u64());
        Tensor c_pe = random_tensor({1, params.cfg.bottleneck_channels, 4, 4}, rng);
        Tensor h0 = random_tensor({1, params.cfg.lstm_hidden}, rng, -0.5, 0.5);
        Tensor c0 = random_tensor({1, params.cfg.lstm_hidden}, rng, -0.5, 0.5);
        c.leaves = {c_pe, h0, c0, params.lstm.wx, params.lstm.wh, params.lstm.b, params.lstm.out.w, params.lstm.out.b};
        c.forward = wsum_of(
            [c_pe, h0, c0, params](Tape* t) {
                LstmState st{h0, c0};
                Tensor code = c_pe;
                for (int step = 0; step < 3; ++step) {  // unrolled through time
                    auto [next_code, next_st] = lstm_temporal_step(t, code, st, params);
                    code = next_code;
                    st = next_st;
                }
                return code;
            },
            rng);
    } else if (op == "end2end") {
        // full stage-1 loss (spatial recurrence + regression) on a tiny model
        NetConfig cfg = tiny_config();
        ModelParams params = ModelParams::create(cfg, rng.next_u64());
        GenConfig gen;
        gen.image_size = cfg.input_size;
        gen.landmark_count = cfg.landmark_count;
        Identity ident = make_identity(rng.next_u64(), gen);
        PoseExpr pose;
        pose.rotation = rng.uniform(-0.5, 0.5);
        pose.scale = rng.uniform(0.9, 1.1);
        pose.expression.assign(PoseExpr::kExprDims, 0.0);
        FrameSample sample = render_frame(ident, pose, cfg.input_size, cfg.input_size);
        params.mean_shape.vec() = sample.landmarks;  // any fixed origin works
        const uint64_t drop_seed = rng.next_u64();
        c.leaves = params.trainables;

        // The regressor's encoder skips are stop-gradient inputs, so the
        // differentiated function must hold them at their current values;
        // otherwise finite differences would see the path the tape
        // deliberately drops. The frozen-skip loss has exactly the training
        // loss's gradient at this parameter point.
        Tensor x0 = reshape(nullptr, sample.image, {1, 3, cfg.input_size, cfg.input_size});
        LabelMap z00 = init_label_map(params.mean_shape.vec(), cfg.input_size, cfg.input_size, 1);
        SpatialTrace probe = spatial_forward(nullptr, x0, z00, params, cfg.spatial_steps, cfg.feedback_sizes);
        Tensor frozen_shallow = probe.steps.back().enc.skip_shallow.detached_copy();
        Tensor frozen_deep = probe.steps.back().enc.skip_deep.detached_copy();

        c.forward = [params, sample, cfg, drop_seed, frozen_shallow, frozen_deep](Tape* t) {
            Rng drop(drop_seed);
            Tensor x = reshape(nullptr, sample.image, {1, 3, cfg.input_size, cfg.input_size});
            LabelMap z0 = init_label_map(params.mean_shape.vec(), cfg.input_size, cfg.input_size, 1);
            SpatialTrace trace = spatial_forward(t, x, z0, params, cfg.spatial_steps, cfg.feedback_sizes);
            Tensor loss;
            for (const SpatialStep& step : trace.steps) {
                Tensor ce = pixel_cross_entropy(t, step.probs, sample.response_target);
                loss = loss.defined() ? add(t, loss, ce) : ce;
            }
            const SpatialStep& last = trace.steps.back();
            Tensor offsets = regress_shape(t, last.probs, frozen_shallow, frozen_deep, params, Mode::Train, drop);
            Tensor target = landmarks_to_offsets({sample.landmarks}, params);
            return add(t, loss, euclidean_loss(t, offsets, target));
        };
    } else {
        throw UsageError("unknown gradcheck op: " + op);
    }
    return c;
}

bool is_smooth(const std::string& op) {
    return op != "relu" && op != "maxpool" && op != "lstm_step" && op != "end2end";
}

}  // namespace

std::vector<std::string> gradcheck_op_names() {
    return {"conv2d",  "maxpool", "unpool",      "avgpool",  "relu",
            "sigmoid", "tanh",    "linear",      "batchnorm2d", "dropout",
            "softmax_cross_entropy", "euclidean_loss", "concat_channels", "lstm_step", "end2end"};
}

std::vector<GradCheckResult> run_gradcheck(const std::vector<std::string>& ops, double tol, int instances,
                                           uint64_t seed) {
    std::vector<GradCheckResult> results;
    for (const std::string& op : ops) {
        GradCheckResult res;
        res.op = op;
        res.tol = is_smooth(op) ? std::min(tol, 1e-6) : tol;
        const int n_inst = op == "end2end" ? std::min(instances, 3) : instances;
        const int coords_per_instance = op == "end2end" ? 20 : 4;

        for (int inst = 0; inst < n_inst; ++inst) {
            Rng rng(mix_seed(seed, std::hash<std::string>{}(op), static_cast<uint64_t>(inst)));
            CheckCase cc = make_case(op, rng);
            ++res.instances;

            Tape tape;
            Tensor loss = cc.forward(&tape);
            backward(loss, tape);
            std::vector<std::vector<double>> analytic;
            for (Tensor& leaf : cc.leaves)
                analytic.emplace_back(leaf.grad(), leaf.grad() + leaf.numel());

            Rng pick(mix_seed(seed, 0xc003d5, mix_seed(std::hash<std::string>{}(op), static_cast<uint64_t>(inst))));
            int checked = 0, attempts = 0;
            while (checked < coords_per_instance && attempts < coords_per_instance * 4) {
                ++attempts;
                const size_t li = static_cast<size_t>(pick.below(cc.leaves.size()));
                Tensor leaf = cc.leaves[li];
                const int64_t j = static_cast<int64_t>(pick.below(static_cast<uint64_t>(leaf.numel())));
                const double v0 = leaf.data()[j];
                const double eps = 1e-6 * std::max(1.0, std::abs(v0));

                auto eval_at = [&](double dv) {
                    leaf.data()[j] = v0 + dv;
                    double f = cc.forward(nullptr).item();
                    leaf.data()[j] = v0;
                    return f;
                };
                const double fd1 = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
                const double fd2 = (eval_at(eps / 2.0) - eval_at(-eps / 2.0)) / eps;
                const double scale_ref = std::max({1.0, std::abs(fd1), std::abs(fd2)});
                if (std::abs(fd1 - fd2) > 0.5 * res.tol * scale_ref) {
                    ++res.coords_skipped;  // straddles a relu/argmax kink
                    continue;
                }
                const double fd = (4.0 * fd2 - fd1) / 3.0;  // Richardson extrapolation
                const double g = analytic[li][static_cast<size_t>(j)];
                const double rel = std::abs(fd - g) / std::max({1.0, std::abs(fd), std::abs(g)});
                res.max_rel_err = std::max(res.max_rel_err, rel);
                ++checked;
                ++res.coords_checked;
            }
        }
        // demand that kink skipping stays exceptional
        const bool enough = res.coords_checked >= res.instances * 2;
        res.pass = enough && res.max_rel_err < res.tol;
        results.push_back(res);
    }
    return results;
}

}  // namespace redec

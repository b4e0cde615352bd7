#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "redec/recurrence.hpp"

using namespace redec;

namespace {

NetConfig tiny_cfg() {
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

Tensor rand_probs(int B, int C, int H, int W, uint64_t seed) {
    Rng rng(seed);
    Tensor logits = Tensor::zeros({B, C, H, W});
    for (int64_t i = 0; i < logits.numel(); ++i) logits.data()[i] = rng.uniform(-3, 3);
    return softmax_channels(nullptr, logits);
}

Tensor rand_image(int size, uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::zeros({1, 3, size, size});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng.uniform();
    return x;
}

}  // namespace

TEST_CASE("merge picks the argmax channel with background-favoring ties") {
    Tensor p = Tensor::from({1, 3, 1, 1}, {0.7, 0.1, 0.2});
    CHECK(merge_response_map(p).values[0] == 0);

    Tensor tie = Tensor::from({1, 2, 1, 1}, {0.5, 0.5});
    CHECK(merge_response_map(tie).values[0] == 0);
}

TEST_CASE("merge matches a per-pixel scan oracle") {
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        Tensor p = rand_probs(2, 4, 5, 6, seed);
        LabelMap m = merge_response_map(p);
        for (int b = 0; b < 2; ++b)
            for (int y = 0; y < 5; ++y)
                for (int x = 0; x < 6; ++x) {
                    int best = 0;
                    double bv = p.data()[((b * 4 + 0) * 5 + y) * 6 + x];
                    for (int c = 1; c < 4; ++c) {
                        double v = p.data()[((b * 4 + c) * 5 + y) * 6 + x];
                        if (v > bv) {
                            bv = v;
                            best = c;
                        }
                    }
                    CHECK(m.at(b, y, x) == best);
                }
    }
}

TEST_CASE("merge is invariant to per-pixel monotone rescaling of logits") {
    Rng rng(5);
    Tensor logits = Tensor::zeros({1, 4, 6, 6});
    for (int64_t i = 0; i < logits.numel(); ++i) logits.data()[i] = rng.uniform(-2, 2);
    LabelMap a = merge_response_map(softmax_channels(nullptr, logits));

    Tensor rescaled = Tensor::zeros({1, 4, 6, 6});
    for (int64_t i = 0; i < 36; ++i) {
        const double s = 0.1 + rng.uniform() * 3.0;  // positive per-pixel scale
        const double t = rng.uniform(-1, 1);
        for (int c = 0; c < 4; ++c) rescaled.data()[c * 36 + i] = s * logits.data()[c * 36 + i] + t;
    }
    LabelMap b = merge_response_map(softmax_channels(nullptr, rescaled));
    CHECK(a.values == b.values);
}

TEST_CASE("extract_centers: symmetric blob, weighted mean, fallback") {
    // uniform 3x3 blob labeled 1 centered at (10,10)
    Tensor p = Tensor::full({1, 2, 21, 21}, 0.0);
    LabelMap merged(1, 21, 21);
    for (int y = 9; y <= 11; ++y)
        for (int x = 9; x <= 11; ++x) {
            merged.at(0, y, x) = 1;
            p.data()[(1 * 21 + y) * 21 + x] = 0.5;
        }
    auto c = extract_centers(merged, p);
    CHECK(c[0][0] == doctest::Approx(10.0));
    CHECK(c[0][1] == doctest::Approx(10.0));

    // two pixels at x=4 and x=6 with weights 1 and 3
    Tensor p2 = Tensor::full({1, 2, 3, 8}, 0.0);
    LabelMap m2(1, 3, 8);
    m2.at(0, 1, 4) = 1;
    m2.at(0, 1, 6) = 1;
    p2.data()[(1 * 3 + 1) * 8 + 4] = 1.0;
    p2.data()[(1 * 3 + 1) * 8 + 6] = 3.0;
    auto c2 = extract_centers(m2, p2);
    CHECK(c2[0][0] == doctest::Approx(5.5));
    CHECK(c2[0][1] == doctest::Approx(1.0));

    // empty label: fall back to the channel argmax at (x=2, y=9)
    Tensor p3 = Tensor::full({1, 2, 12, 12}, 0.001);
    LabelMap m3(1, 12, 12);  // nothing labeled 1
    p3.data()[(1 * 12 + 9) * 12 + 2] = 0.9;
    auto c3 = extract_centers(m3, p3);
    CHECK(c3[0][0] == doctest::Approx(2.0));
    CHECK(c3[0][1] == doctest::Approx(9.0));
}

TEST_CASE("render_label_map paints clipped squares with ascending overwrite") {
    LabelMap m = render_label_map({{10, 10}}, 3, 21, 21);
    int count = 0;
    for (int32_t v : m.values) count += v == 1;
    CHECK(count == 9);

    LabelMap clipped = render_label_map({{0, 0}}, 7, 20, 20);
    int count2 = 0;
    for (int32_t v : clipped.values) count2 += v == 1;
    CHECK(count2 == 16);  // 4x4 after clipping

    // overlapping landmarks: the larger index wins the shared cell
    LabelMap two = render_label_map({{5, 5, 6, 5}}, 3, 12, 12);
    CHECK(two.at(0, 5, 5) == 2);  // covered by both squares
    CHECK(two.at(0, 5, 4) == 1);

    CHECK_THROWS_AS(render_label_map({{5, 5}}, 4, 12, 12), ContractError);
}

TEST_CASE("init_label_map: determinism, square budget, flip symmetry") {
    std::vector<double> mean = {20, 20, 44, 20, 32, 40};  // 3 landmarks, symmetric about x=32
    LabelMap a = init_label_map(mean, 64, 64);
    LabelMap b = init_label_map(mean, 64, 64);
    CHECK(a.values == b.values);

    int nonzero = 0;
    for (int32_t v : a.values) nonzero += v != 0;
    CHECK(nonzero <= 49 * 3);

    // horizontal flip + relabeling (1<->2, 3 self) reproduces the map:
    // mirrored x uses 63-x, and the mean is symmetric about (63)/2=31.5 with
    // centers at 20/44 pairing and 32 near-center
    std::vector<double> mirrored = {63.0 - 44, 20, 63.0 - 20, 20, 63.0 - 32, 40};
    LabelMap flipped_src = init_label_map(mirrored, 64, 64);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            int32_t v = a.at(0, y, 63 - x);
            int32_t expect = v == 1 ? 2 : v == 2 ? 1 : v;
            // relabel indices under the mirror: landmark 1 <-> landmark 2
            CHECK(flipped_src.at(0, y, x) == expect);
        }
}

TEST_CASE("spatial_forward: K=1 equals a single encode-decode pass") {
    NetConfig cfg = tiny_cfg();
    ModelParams p = ModelParams::create(cfg, 41);
    Tensor x = rand_image(cfg.input_size, 42);
    LabelMap z0(1, cfg.input_size, cfg.input_size);

    SpatialTrace tr = spatial_forward(nullptr, x, z0, p, 1, {7});
    EncodeOutput enc_out = encode(nullptr, x, z0, p);
    Tensor logits = decode(nullptr, enc_out.code, enc_out.pool_indices, p);
    CHECK(tr.steps.size() == 1);
    CHECK(tr.steps[0].logits.vec() == logits.vec());
}

TEST_CASE("spatial_forward: K=3 trace carries three maps with feedback sizes 7,5,3") {
    NetConfig cfg = tiny_cfg();
    cfg.spatial_steps = 3;
    cfg.feedback_sizes = {7, 5, 3};
    ModelParams p = ModelParams::create(cfg, 43);
    Tensor x = rand_image(cfg.input_size, 44);
    LabelMap z0 = init_label_map(std::vector<double>{5, 5, 11, 11}, cfg.input_size, cfg.input_size);

    SpatialTrace tr = spatial_forward(nullptr, x, z0, p, 3, {7, 5, 3});
    REQUIRE(tr.steps.size() == 3);
    const int sizes[3] = {7, 5, 3};
    for (int k = 0; k < 3; ++k) {
        const SpatialStep& st = tr.steps[static_cast<size_t>(k)];
        CHECK(st.logits.shape() == Shape{1, 3, 16, 16});
        // the fed-back map is exactly the render of the extracted centers
        LabelMap expect = render_label_map(st.centers, sizes[k], 16, 16);
        CHECK(st.fed_back.values == expect.values);
        st.fed_back.check_range(cfg.landmark_count);
    }
    // feedback shrinkage holds for the default schedule
    CHECK(sizes[0] > sizes[1]);
    CHECK(sizes[1] > sizes[2]);
}

TEST_CASE("spatial_forward is deterministic with frozen parameters") {
    NetConfig cfg = tiny_cfg();
    ModelParams p = ModelParams::create(cfg, 45);
    Tensor x = rand_image(cfg.input_size, 46);
    LabelMap z0(1, cfg.input_size, cfg.input_size);
    SpatialTrace a = spatial_forward(nullptr, x, z0, p, 2, {5, 3});
    SpatialTrace b = spatial_forward(nullptr, x, z0, p, 2, {5, 3});
    for (size_t k = 0; k < a.steps.size(); ++k) {
        CHECK(a.steps[k].logits.vec() == b.steps[k].logits.vec());
        CHECK(a.steps[k].merged.values == b.steps[k].merged.values);
        CHECK(a.steps[k].centers == b.steps[k].centers);
    }
}

TEST_CASE("weight sharing: spatial steps reference the same parameter storage") {
    NetConfig cfg = tiny_cfg();
    ModelParams p = ModelParams::create(cfg, 47);
    const double* w0 = p.encoder[0].w.data();
    Tensor x = rand_image(cfg.input_size, 48);
    LabelMap z0(1, cfg.input_size, cfg.input_size);
    spatial_forward(nullptr, x, z0, p, 2, {5, 3});
    CHECK(p.encoder[0].w.data() == w0);  // no parameter copies were made
    int64_t total = 0;
    for (const Tensor& t : p.trainables) total += t.numel();
    CHECK(total == parameter_count(cfg));
}

TEST_CASE("temporal_forward: T=1 degenerates to spatial pass plus one LSTM step") {
    NetConfig cfg = tiny_cfg();
    ModelParams p = ModelParams::create(cfg, 49);
    Tensor f0 = rand_image(cfg.input_size, 50);
    TemporalTrace tr = temporal_forward(nullptr, {f0}, p, cfg.spatial_steps, cfg.feedback_sizes, true);
    REQUIRE(tr.frames.size() == 1);
    CHECK(tr.frames[0].trace.steps.size() == 2);
    CHECK(tr.frames[0].final_logits.shape() == Shape{1, 3, 16, 16});
}

TEST_CASE("temporal_forward: zero LSTM weights still yield a valid-shape response") {
    NetConfig cfg = tiny_cfg();
    ModelParams p = ModelParams::create(cfg, 51);
    for (const char* n : {"lstm.wx", "lstm.wh", "lstm.b", "lstm_out.w", "lstm_out.b"}) {
        Tensor t = p.find(n);
        for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = 0.0;
    }
    std::vector<Tensor> frames = {rand_image(cfg.input_size, 52), rand_image(cfg.input_size, 53)};
    TemporalTrace tr = temporal_forward(nullptr, frames, p, cfg.spatial_steps, cfg.feedback_sizes, true);
    for (const FrameResult& fr : tr.frames) {
        CHECK(fr.final_logits.shape() == Shape{1, 3, 16, 16});
        for (int64_t i = 0; i < fr.code.c_pe.numel(); ++i) CHECK(fr.code.c_pe.data()[i] == doctest::Approx(0.0));
    }
}

TEST_CASE("tracking continuity: later frames start from the previous final centers") {
    NetConfig cfg = tiny_cfg();
    ModelParams p = ModelParams::create(cfg, 55);
    std::vector<Tensor> frames = {rand_image(cfg.input_size, 56), rand_image(cfg.input_size, 57),
                                  rand_image(cfg.input_size, 58)};
    TemporalTrace tr = temporal_forward(nullptr, frames, p, cfg.spatial_steps, cfg.feedback_sizes, true);
    CHECK(tr.frames[0].used_init.values == init_label_map(p.mean_shape.vec(), 16, 16).values);
    for (size_t t = 1; t < tr.frames.size(); ++t) {
        LabelMap expect = render_label_map(tr.frames[t - 1].final_centers, 7, 16, 16);
        CHECK(tr.frames[t].used_init.values == expect.values);
    }
}

TEST_CASE("gradients flow across time: frame-1 input perturbs frame-2 loss") {
    NetConfig cfg = tiny_cfg();
    ModelParams p = ModelParams::create(cfg, 59);
    Tensor f0 = rand_image(cfg.input_size, 60);
    Tensor f1 = rand_image(cfg.input_size, 61);
    LabelMap target(1, cfg.input_size, cfg.input_size);
    target.values[40] = 1;

    auto frame2_loss = [&]() {
        TemporalTrace tr = temporal_forward(nullptr, {f0, f1}, p, cfg.spatial_steps, cfg.feedback_sizes, true);
        return pixel_cross_entropy(nullptr, tr.frames[1].final_probs, target).item();
    };
    const double base = frame2_loss();
    // perturb a frame-1 pixel noticeably; the LSTM state carries the change
    double diff = 0.0;
    for (int64_t j = 0; j < 32 && diff == 0.0; ++j) {
        const double v0 = f0.data()[j * 7 % f0.numel()];
        f0.data()[j * 7 % f0.numel()] = v0 + 0.5;
        diff = std::abs(frame2_loss() - base);
        f0.data()[j * 7 % f0.numel()] = v0;
    }
    CHECK(diff > 0.0);
}

TEST_CASE("per-step LSTM composition runs and is deterministic") {
    NetConfig cfg = tiny_cfg();
    cfg.lstm_every_spatial_step = true;
    ModelParams p = ModelParams::create(cfg, 63);
    std::vector<Tensor> frames = {rand_image(cfg.input_size, 64), rand_image(cfg.input_size, 65)};
    TemporalTrace a = temporal_forward(nullptr, frames, p, cfg.spatial_steps, cfg.feedback_sizes, true);
    TemporalTrace b = temporal_forward(nullptr, frames, p, cfg.spatial_steps, cfg.feedback_sizes, true);
    REQUIRE(a.frames.size() == 2);
    CHECK(a.frames[1].final_logits.vec() == b.frames[1].final_logits.vec());
    CHECK(a.frames[0].trace.steps.size() == static_cast<size_t>(cfg.spatial_steps));
}

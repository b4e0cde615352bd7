#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "redec/evalrep.hpp"

using namespace redec;
namespace fs = std::filesystem;

namespace {

GenConfig tiny_gen() {
    GenConfig cfg;
    cfg.image_size = 16;
    cfg.landmark_count = 2;
    cfg.train_identities = 3;
    cfg.eval_identities = 1;
    cfg.frames_per_identity = 1;
    cfg.augments_per_frame = 1;
    cfg.eval_frames_per_identity = 4;
    cfg.train_clips_per_identity = 1;
    cfg.eval_clips_per_identity = 2;
    cfg.clip_length = 3;
    cfg.seed = 9;
    return cfg;
}

NetConfig tiny_net() {
    NetConfig cfg;
    cfg.input_size = 16;
    cfg.stage_channels = {4, 4};
    cfg.convs_per_stage = 1;
    cfg.bottleneck_channels = 2;
    cfg.landmark_count = 2;
    cfg.identity_count = 3;
    cfg.lstm_hidden = 3;
    cfg.spatial_steps = 2;
    cfg.feedback_sizes = {5, 3};
    cfg.temporal_steps = 3;
    cfg.regressor_channels = {4, 4};
    return cfg;
}

const Dataset& tiny_dataset() {
    static Dataset ds = build_dataset(tiny_gen());
    return ds;
}

ModelParams tiny_params(uint64_t seed) {
    ModelParams p = ModelParams::create(tiny_net(), seed);
    p.mean_shape.vec() = tiny_dataset().mean_shape;
    return p;
}

}  // namespace

TEST_CASE("normalized_error values and oracle equality") {
    std::vector<double> gt = {10, 10, 20, 20};
    CHECK(normalized_error(gt, gt, 30.0) == doctest::Approx(0.0));

    std::vector<double> p1 = {15, 10};
    std::vector<double> g1 = {10, 10};
    CHECK(normalized_error(p1, g1, 50.0) == doctest::Approx(0.10));

    Rng rng(3);
    std::vector<double> a(14), b(14);
    for (auto& v : a) v = rng.uniform(0, 64);
    for (auto& v : b) v = rng.uniform(0, 64);
    double oracle = 0.0;
    for (int l = 0; l < 7; ++l)
        oracle += std::hypot(a[static_cast<size_t>(2 * l)] - b[static_cast<size_t>(2 * l)],
                             a[static_cast<size_t>(2 * l + 1)] - b[static_cast<size_t>(2 * l + 1)]);
    oracle /= 7.0 * 42.0;
    CHECK(normalized_error(a, b, 42.0) == doctest::Approx(oracle).epsilon(1e-12));

    CHECK_THROWS_AS(normalized_error(a, b, 0.0), ContractError);
}

TEST_CASE("metric scale invariance") {
    Rng rng(5);
    std::vector<double> a(10), b(10);
    for (auto& v : a) v = rng.uniform(0, 64);
    for (auto& v : b) v = rng.uniform(0, 64);
    const double base = normalized_error(a, b, 37.0);
    for (double s : {0.5, 2.0, 13.7}) {
        std::vector<double> as = a, bs = b;
        for (auto& v : as) v *= s;
        for (auto& v : bs) v *= s;
        CHECK(normalized_error(as, bs, 37.0 * s) == doctest::Approx(base).epsilon(1e-12));
    }
}

TEST_CASE("summarize: closed-form rows, std, failure monotonicity, oracle") {
    SummaryRow r = summarize({0.05, 0.15}, 0.10);
    CHECK(r.mean == doctest::Approx(0.10));
    CHECK(r.failure_rate == doctest::Approx(0.5));

    SummaryRow eq = summarize({0.2, 0.2, 0.2}, 0.10);
    CHECK(eq.stddev == doctest::Approx(0.0));

    Rng rng(7);
    std::vector<double> errs(1000);
    for (auto& e : errs) e = rng.uniform(0, 0.3);
    SummaryRow big = summarize(errs, 0.10);
    double mean = 0;
    for (double e : errs) mean += e;
    mean /= errs.size();
    double var = 0;
    int fails = 0;
    for (double e : errs) {
        var += (e - mean) * (e - mean);
        fails += e > 0.10;
    }
    CHECK(big.mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(big.stddev == doctest::Approx(std::sqrt(var / errs.size())).epsilon(1e-12));
    CHECK(big.failure_rate == doctest::Approx(fails / 1000.0).epsilon(1e-12));

    // raising the threshold never increases the failure rate
    double prev = 1.0;
    for (double th : {0.05, 0.1, 0.15, 0.2, 0.3}) {
        const double f = summarize(errs, th).failure_rate;
        CHECK(f <= prev);
        prev = f;
    }
    CHECK_THROWS_AS(summarize({}, 0.1), UsageError);
}

TEST_CASE("image evaluation is deterministic and worker-independent") {
    ModelParams p = tiny_params(11);
    ImageEvalResult a = evaluate_images(p, tiny_dataset().eval_images, tiny_dataset().eye_pair, 1);
    ImageEvalResult b = evaluate_images(p, tiny_dataset().eval_images, tiny_dataset().eye_pair, 4);
    REQUIRE(a.per_step.size() == b.per_step.size());
    for (size_t k = 0; k < a.per_step.size(); ++k)
        for (size_t i = 0; i < a.per_step[k].size(); ++i)
            CHECK(a.per_step[k][i].normalized == b.per_step[k][i].normalized);
}

TEST_CASE("tracking evaluation is deterministic across repeats and workers") {
    ModelParams p = tiny_params(13);
    TrackingEvalResult a = evaluate_tracking(p, tiny_dataset().eval_clips, tiny_dataset().eye_pair, true, 1);
    TrackingEvalResult b = evaluate_tracking(p, tiny_dataset().eval_clips, tiny_dataset().eye_pair, true, 8);
    TrackingEvalResult c = evaluate_tracking(p, tiny_dataset().eval_clips, tiny_dataset().eye_pair, true, 1);
    REQUIRE(a.errors.size() == b.errors.size());
    for (size_t i = 0; i < a.errors.size(); ++i) {
        CHECK(a.errors[i].normalized == b.errors[i].normalized);
        CHECK(a.errors[i].normalized == c.errors[i].normalized);
        CHECK(a.errors[i].clip == b.errors[i].clip);
    }
    CHECK(a.errors.size() == tiny_dataset().eval_clips.size() * 3);
}

TEST_CASE("pixel accuracy lies in [0,1] and is worker-independent") {
    ModelParams p = tiny_params(17);
    const double a1 = landmark_pixel_accuracy(p, tiny_dataset().eval_images, 1);
    const double a4 = landmark_pixel_accuracy(p, tiny_dataset().eval_images, 4);
    CHECK(a1 == a4);
    CHECK(a1 >= 0.0);
    CHECK(a1 <= 1.0);
}

TEST_CASE("report export/parse round-trip preserves aggregates and csv rows") {
    Report rep;
    rep.data["variant"] = "unit";
    rep.data["rows"] = {{"mean", 0.1234567890123}, {"std", 0.01}, {"failure", 0.25}, {"count", 48}};
    rep.sample_csv = {"protocol,step,clip,frame,sample,tag,normalized_error,excluded"};
    for (int i = 0; i < 48; ++i) rep.sample_csv.push_back("image,1,-1,-1," + std::to_string(i) + ",small,0.05,0");

    const std::string path = (fs::temp_directory_path() / "redec_report.json").string();
    export_report(rep, path);
    Report back = parse_report(path);
    CHECK(back.data == rep.data);
    CHECK(back.sample_csv.size() == rep.sample_csv.size());  // row count = samples + header
}

TEST_CASE("response-map dumps: one graymap per channel per frame, right size") {
    ModelParams p = tiny_params(19);
    const std::string dir = (fs::temp_directory_path() / "redec_dumps").string();
    fs::remove_all(dir);
    dump_response_maps(p, tiny_dataset().eval_images, dir, 2);
    int files = 0;
    for (const auto& e : fs::directory_iterator(dir)) {
        ++files;
        std::ifstream f(e.path(), std::ios::binary);
        std::string magic;
        int w, h, maxv;
        f >> magic >> w >> h >> maxv;
        CHECK(magic == "P5");
        CHECK(w == 16);
        CHECK(h == 16);
    }
    CHECK(files == 2 * (3 + 1));  // L+1 channels plus the merged map, per frame
}

TEST_CASE("experiment rejects unknown variants") {
    ExperimentConfig cfg;
    cfg.data_dir = "/nonexistent";
    CHECK_THROWS_AS(run_experiment("bogus", cfg), Error);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "redec/syndata.hpp"

using namespace redec;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

bool frames_equal(const FrameSample& a, const FrameSample& b) {
    return a.image.vec() == b.image.vec() && a.landmarks == b.landmarks && a.label_map == b.label_map &&
           a.response_target == b.response_target && a.identity == b.identity;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("make_identity is deterministic and respects the margin") {
    GenConfig cfg;
    Identity a = make_identity(123, cfg);
    Identity b = make_identity(123, cfg);
    CHECK(a.canonical_shape == b.canonical_shape);
    CHECK(a.blob_intensity == b.blob_intensity);

    for (uint64_t seed = 1; seed <= 1000; ++seed) {
        Identity id = make_identity(seed, cfg);
        for (double v : id.canonical_shape) {
            CHECK(v >= 0.15);
            CHECK(v <= 0.85);
        }
    }
}

TEST_CASE("20 identities give 20 distinct canonical shapes") {
    GenConfig cfg;
    std::set<std::vector<double>> shapes;
    for (uint64_t i = 0; i < 20; ++i) shapes.insert(make_identity(mix_seed(4242, i), cfg).canonical_shape);
    CHECK(shapes.size() == 20);
}

TEST_CASE("render_frame: identity transform places the canonical shape") {
    GenConfig cfg;
    Identity id = make_identity(7, cfg);
    PoseExpr pose;  // scale 1, rotation 0, translation 0, no expression
    pose.expression.assign(PoseExpr::kExprDims, 0.0);
    FrameSample fr = render_frame(id, pose, 64, 64);
    const double face = 0.75 * 64;
    for (int l = 0; l < 7; ++l) {
        const double ex = 31.5 + (id.canonical_shape[static_cast<size_t>(2 * l)] - 0.5) * face;
        const double ey = 31.5 + (id.canonical_shape[static_cast<size_t>(2 * l + 1)] - 0.5) * face;
        CHECK(fr.landmarks[static_cast<size_t>(2 * l)] == doctest::Approx(ex).epsilon(1e-12));
        CHECK(fr.landmarks[static_cast<size_t>(2 * l + 1)] == doctest::Approx(ey).epsilon(1e-12));
    }
    CHECK(fr.tag == PoseTag::Small);
}

TEST_CASE("render_frame: 15-degree rotation matches the closed-form similarity") {
    GenConfig cfg;
    Identity id = make_identity(9, cfg);
    PoseExpr pose;
    pose.rotation = 15.0 * kPi / 180.0;
    pose.scale = 1.1;
    pose.dx = 3.0;
    pose.dy = -2.0;
    pose.expression.assign(PoseExpr::kExprDims, 0.0);
    FrameSample fr = render_frame(id, pose, 64, 64);
    const double face = 0.75 * 64 * pose.scale;
    const double c = std::cos(pose.rotation), s = std::sin(pose.rotation);
    for (int l = 0; l < 7; ++l) {
        const double ux = (id.canonical_shape[static_cast<size_t>(2 * l)] - 0.5) * face;
        const double uy = (id.canonical_shape[static_cast<size_t>(2 * l + 1)] - 0.5) * face;
        const double ex = 31.5 + pose.dx + c * ux - s * uy;
        const double ey = 31.5 + pose.dy + s * ux + c * uy;
        CHECK(std::abs(fr.landmarks[static_cast<size_t>(2 * l)] - ex) < 1e-9);
        CHECK(std::abs(fr.landmarks[static_cast<size_t>(2 * l + 1)] - ey) < 1e-9);
    }
}

TEST_CASE("render_frame is bit-deterministic in (identity, pose)") {
    GenConfig cfg;
    Identity id = make_identity(11, cfg);
    PoseExpr pose;
    pose.rotation = 0.4;
    pose.scale = 0.9;
    pose.expression = {0.01, -0.005, 0.02};
    FrameSample a = render_frame(id, pose, 64, 64);
    FrameSample b = render_frame(id, pose, 64, 64);
    CHECK(frames_equal(a, b));
    // image values are quantized to 8-bit levels
    for (double v : a.image.vec()) CHECK(v == std::lround(v * 255.0) / 255.0);
}

TEST_CASE("label maps sit on rounded landmark centers") {
    GenConfig cfg;
    Identity id = make_identity(13, cfg);
    PoseExpr pose;
    pose.expression.assign(PoseExpr::kExprDims, 0.0);
    FrameSample fr = render_frame(id, pose, 64, 64);
    for (int l = 0; l < 7; ++l) {
        const int cx = static_cast<int>(std::lround(fr.landmarks[static_cast<size_t>(2 * l)]));
        const int cy = static_cast<int>(std::lround(fr.landmarks[static_cast<size_t>(2 * l + 1)]));
        const int32_t cell = fr.response_target.at(0, cy, cx);
        if (cell != l + 1) {
            // only a strictly nearer landmark may own the center pixel
            const int o = cell - 1;
            REQUIRE(cell > 0);
            const double dox = cx - fr.landmarks[static_cast<size_t>(2 * o)];
            const double doy = cy - fr.landmarks[static_cast<size_t>(2 * o + 1)];
            const double dlx = cx - fr.landmarks[static_cast<size_t>(2 * l)];
            const double dly = cy - fr.landmarks[static_cast<size_t>(2 * l + 1)];
            CHECK(dox * dox + doy * doy < dlx * dlx + dly * dly);
        }
        fr.label_map.check_range(7);
        fr.response_target.check_range(7);
    }
}

TEST_CASE("smooth_track: constant keyframes give a flat trajectory") {
    auto flat = smooth_track({0.3, 0.3, 0.3, 0.3}, 10);
    for (double v : flat) CHECK(v == doctest::Approx(0.3).epsilon(1e-12));
    auto ends = smooth_track({0.0, 1.0}, 5);
    CHECK(ends.front() == doctest::Approx(0.0));
    CHECK(ends.back() == doctest::Approx(1.0));
}

TEST_CASE("sample_clip: length, identity, smooth displacement") {
    GenConfig cfg;
    Identity id = make_identity(17, cfg);
    Clip clip = sample_clip(id, 10, 99, 64);
    CHECK(clip.frames.size() == 10);
    for (const FrameSample& f : clip.frames) CHECK(f.identity == id.id);

    for (uint64_t s = 0; s < 100; ++s) {
        Identity ident = make_identity(mix_seed(21, s), cfg);
        Clip c = sample_clip(ident, 10, mix_seed(77, s), 64);
        for (size_t t = 1; t < c.frames.size(); ++t)
            for (int l = 0; l < 7; ++l) {
                const double dx = c.frames[t].landmarks[static_cast<size_t>(2 * l)] -
                                  c.frames[t - 1].landmarks[static_cast<size_t>(2 * l)];
                const double dy = c.frames[t].landmarks[static_cast<size_t>(2 * l + 1)] -
                                  c.frames[t - 1].landmarks[static_cast<size_t>(2 * l + 1)];
                CHECK(std::sqrt(dx * dx + dy * dy) <= 6.0);
            }
    }
}

TEST_CASE("augment: zero perturbation is the identity") {
    GenConfig cfg;
    Identity id = make_identity(23, cfg);
    PoseExpr pose;
    pose.expression.assign(PoseExpr::kExprDims, 0.0);
    FrameSample fr = render_frame(id, pose, 64, 64);
    FrameSample same = augment_with_params(fr, AugmentParams{}, landmark_symmetry_table(7));
    CHECK(frames_equal(fr, same));
}

TEST_CASE("augment: pure translation shifts landmark x by exactly 7") {
    GenConfig cfg;
    Identity id = make_identity(25, cfg);
    PoseExpr pose;
    pose.expression.assign(PoseExpr::kExprDims, 0.0);
    FrameSample fr = render_frame(id, pose, 64, 64);
    AugmentParams p;
    p.dx = 7.0;
    FrameSample moved = augment_with_params(fr, p, landmark_symmetry_table(7));
    for (int l = 0; l < 7; ++l) {
        CHECK(moved.landmarks[static_cast<size_t>(2 * l)] ==
              doctest::Approx(fr.landmarks[static_cast<size_t>(2 * l)] + 7.0).epsilon(1e-12));
        CHECK(moved.landmarks[static_cast<size_t>(2 * l + 1)] ==
              doctest::Approx(fr.landmarks[static_cast<size_t>(2 * l + 1)]).epsilon(1e-12));
    }
}

TEST_CASE("augment: flip is an involution with the symmetry table") {
    GenConfig cfg;
    Identity id = make_identity(27, cfg);
    PoseExpr pose;
    pose.rotation = 0.3;
    pose.expression = {0.02, 0.0, -0.01};
    FrameSample fr = render_frame(id, pose, 64, 64);
    AugmentParams flip;
    flip.flip = true;
    auto sym = landmark_symmetry_table(7);
    FrameSample once = augment_with_params(fr, flip, sym);
    FrameSample twice = augment_with_params(once, flip, sym);
    for (size_t d = 0; d < fr.landmarks.size(); ++d)
        CHECK(twice.landmarks[d] == doctest::Approx(fr.landmarks[d]).epsilon(1e-12));
    CHECK(twice.image.vec() == fr.image.vec());  // mirror twice is pixel-exact

    // table is involutive
    for (int l = 0; l < 7; ++l) CHECK(sym[static_cast<size_t>(sym[static_cast<size_t>(l)])] == l);
}

TEST_CASE("augment with bounded retries never throws and keeps landmarks in frame") {
    GenConfig cfg;
    Identity id = make_identity(29, cfg);
    PoseExpr pose;
    pose.dx = 15.0;  // already off-center; many draws will clip out
    pose.expression.assign(PoseExpr::kExprDims, 0.0);
    FrameSample fr = render_frame(id, pose, 64, 64);
    for (uint64_t s = 0; s < 200; ++s) {
        FrameSample a = augment(fr, s, landmark_symmetry_table(7));
        for (size_t d = 0; d < a.landmarks.size(); d += 2) {
            CHECK(a.landmarks[d] >= 0.0);
            CHECK(a.landmarks[d] <= 63.0);
        }
    }
}

TEST_CASE("build_dataset: counts, split disjointness, stratification") {
    GenConfig cfg;
    cfg.train_identities = 4;
    cfg.eval_identities = 2;
    cfg.frames_per_identity = 2;
    cfg.augments_per_frame = 3;
    cfg.eval_frames_per_identity = 6;
    cfg.train_clips_per_identity = 1;
    cfg.eval_clips_per_identity = 2;
    cfg.seed = 31;
    Dataset ds = build_dataset(cfg);

    CHECK(ds.train_images.size() == 4u * 2u * (1 + 3));
    CHECK(ds.eval_images.size() == 2u * 6u);
    CHECK(ds.train_clips.size() == 4u);
    CHECK(ds.eval_clips.size() == 4u);

    std::set<int> train_ids(ds.train_identity_ids.begin(), ds.train_identity_ids.end());
    for (int e : ds.eval_identity_ids) CHECK(train_ids.count(e) == 0);
    for (const FrameSample& f : ds.train_images) CHECK(train_ids.count(f.identity) == 1);

    int large = 0;
    for (const FrameSample& f : ds.eval_images)
        if (f.tag == PoseTag::Large) {
            ++large;
            CHECK(std::abs(f.effective_rotation) >= 30.0 * kPi / 180.0);
        }
    CHECK(large == static_cast<int>(ds.eval_images.size()) / 2);
}

TEST_CASE("dataset persists byte-identically and round-trips samples bitwise") {
    GenConfig cfg;
    cfg.train_identities = 2;
    cfg.eval_identities = 1;
    cfg.frames_per_identity = 1;
    cfg.augments_per_frame = 2;
    cfg.eval_frames_per_identity = 2;
    cfg.train_clips_per_identity = 1;
    cfg.eval_clips_per_identity = 1;
    cfg.clip_length = 4;
    cfg.seed = 33;

    const std::string dir_a = (fs::temp_directory_path() / "redec_ds_a").string();
    const std::string dir_b = (fs::temp_directory_path() / "redec_ds_b").string();
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);

    Dataset ds = build_dataset(cfg);
    save_dataset(ds, dir_a);
    Dataset ds2 = build_dataset(cfg);
    save_dataset(ds2, dir_b);
    CHECK(slurp(dir_a + "/manifest.json") == slurp(dir_b + "/manifest.json"));
    CHECK(slurp(dir_a + "/train_images/records.tsv") == slurp(dir_b + "/train_images/records.tsv"));

    Dataset loaded = load_dataset(dir_a);
    REQUIRE(loaded.train_images.size() == ds.train_images.size());
    for (size_t i = 0; i < ds.train_images.size(); ++i) CHECK(frames_equal(loaded.train_images[i], ds.train_images[i]));
    REQUIRE(loaded.eval_clips.size() == ds.eval_clips.size());
    for (size_t c = 0; c < ds.eval_clips.size(); ++c) {
        CHECK(loaded.eval_clips[c].identity == ds.eval_clips[c].identity);
        for (size_t t = 0; t < ds.eval_clips[c].frames.size(); ++t)
            CHECK(frames_equal(loaded.eval_clips[c].frames[t], ds.eval_clips[c].frames[t]));
    }
    CHECK(loaded.mean_shape == ds.mean_shape);
    CHECK(loaded.symmetry == ds.symmetry);
}

TEST_CASE("ppm io round-trips quantized images") {
    Rng rng(35);
    Tensor img = Tensor::zeros({3, 8, 8});
    for (int64_t i = 0; i < img.numel(); ++i) img.data()[i] = std::lround(rng.uniform() * 255.0) / 255.0;
    const std::string path = (fs::temp_directory_path() / "redec_img.ppm").string();
    write_ppm(path, img);
    Tensor back = read_ppm(path);
    CHECK(back.vec() == img.vec());
    CHECK_THROWS_AS(read_ppm("/nonexistent/file.ppm"), IoError);
}

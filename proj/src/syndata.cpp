#include "redec/syndata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "redec/recurrence.hpp"

namespace redec {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kLargePose = kPi / 6.0;  // 30 degrees
constexpr int kLabelSquare = 5;     // ground-truth input-style label map
constexpr int kResponseSquare = 9;  // M* supervision squares

uint64_t double_bits(double v) {
    uint64_t u;
    std::memcpy(&u, &v, sizeof(u));
    return u;
}

uint64_t pose_hash(const PoseExpr& p) {
    uint64_t h = mix_seed(double_bits(p.scale), double_bits(p.rotation));
    h = mix_seed(h, double_bits(p.dx), double_bits(p.dy));
    for (double e : p.expression) h = mix_seed(h, double_bits(e));
    return h;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Expression deformation basis in unit-frame coordinates.
void apply_expression(std::vector<double>& shape, const std::vector<double>& expr) {
    const int L = static_cast<int>(shape.size()) / 2;
    const double e0 = expr.size() > 0 ? expr[0] : 0.0;  // mouth lift
    const double e1 = expr.size() > 1 ? expr[1] : 0.0;  // eye squint
    const double e2 = expr.size() > 2 ? expr[2] : 0.0;  // mouth width
    if (L == 7) {
        shape[2 * 5 + 1] -= e0;
        shape[2 * 6 + 1] -= e0;
        shape[2 * 4 + 1] -= 0.3 * e0;
        shape[2 * 1 + 1] += e1;
        shape[2 * 2 + 1] += e1;
        shape[2 * 5 + 0] -= e2;
        shape[2 * 6 + 0] += e2;
    } else {
        for (int l = 0; l < L; ++l) {
            if (l % 2 == 1) shape[2 * l + 1] -= e0;
            if (l % 2 == 0) shape[2 * l + 1] += 0.5 * e1;
            shape[2 * l + 0] += e2 * (shape[2 * l + 0] - 0.5);
        }
    }
}

struct ExprRange {
    double lo, hi;
};
const ExprRange kExprRanges[PoseExpr::kExprDims] = {{-0.03, 0.05}, {-0.02, 0.03}, {-0.03, 0.03}};

double catmull_rom(double p0, double p1, double p2, double p3, double s) {
    return 0.5 * ((2.0 * p1) + (-p0 + p2) * s + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s * s +
                  (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * s * s * s);
}

std::vector<double> interpolate_track(const std::vector<double>& keys, int frames);

}  // namespace

std::vector<double> smooth_track(const std::vector<double>& keyframes, int frames) {
    return interpolate_track(keyframes, frames);
}

namespace {

std::vector<double> interpolate_track(const std::vector<double>& keys, int frames) {
    const int nk = static_cast<int>(keys.size());
    std::vector<double> out(static_cast<size_t>(frames));
    if (nk == 1) {
        std::fill(out.begin(), out.end(), keys[0]);
        return out;
    }
    for (int t = 0; t < frames; ++t) {
        double u = frames == 1 ? 0.0 : static_cast<double>(t) * (nk - 1) / (frames - 1);
        int i = std::min(static_cast<int>(u), nk - 2);
        double s = u - i;
        auto at = [&](int j) { return keys[static_cast<size_t>(std::clamp(j, 0, nk - 1))]; };
        out[static_cast<size_t>(t)] = catmull_rom(at(i - 1), at(i), at(i + 1), at(i + 2), s);
    }
    return out;
}

}  // namespace

void GenConfig::validate() const {
    if (image_size < 16) throw ConfigError("image_size too small");
    if (landmark_count < 1) throw ConfigError("need at least one landmark");
    if (train_identities < 2 || eval_identities < 1) throw ConfigError("need >= 2 train and >= 1 eval identities");
    if (clip_length < 1) throw ConfigError("clip_length must be positive");
    if (frames_per_identity < 1 || eval_frames_per_identity < 2) throw ConfigError("frame counts too small");
}

std::vector<int> landmark_symmetry_table(int L) {
    std::vector<int> sym(static_cast<size_t>(L));
    if (L == 7) {
        sym = {3, 2, 1, 0, 4, 6, 5};
    } else {
        for (int i = 0; i < L; ++i) sym[static_cast<size_t>(i)] = L - 1 - i;
    }
    return sym;
}

Identity make_identity(uint64_t seed, const GenConfig& cfg) {
    Identity id;
    id.seed = seed;
    Rng rng(mix_seed(seed, 0x1d1d));
    const int L = cfg.landmark_count;

    if (L == 7) {
        id.canonical_shape = {0.26, 0.36, 0.40, 0.36, 0.60, 0.36, 0.74, 0.36,
                              0.50, 0.56, 0.36, 0.74, 0.64, 0.74};
        for (double& v : id.canonical_shape) v += rng.uniform(-0.045, 0.045);
    } else {
        id.canonical_shape.resize(static_cast<size_t>(2 * L));
        for (int l = 0; l < L; ++l) {
            double a = 2.0 * kPi * (l + 0.5) / L - kPi / 2.0;
            id.canonical_shape[static_cast<size_t>(2 * l)] = 0.5 + 0.26 * std::cos(a) + rng.uniform(-0.03, 0.03);
            id.canonical_shape[static_cast<size_t>(2 * l + 1)] = 0.5 + 0.26 * std::sin(a) + rng.uniform(-0.03, 0.03);
        }
    }
    for (double v : id.canonical_shape)
        if (v < 0.15 || v > 0.85) throw GenerationError("canonical landmark violates the 0.15 unit-frame margin");

    id.blob_intensity.resize(static_cast<size_t>(L));
    id.blob_sigma.resize(static_cast<size_t>(L));
    id.blob_color.resize(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
        id.blob_intensity[static_cast<size_t>(l)] = rng.uniform(0.55, 0.95);
        id.blob_sigma[static_cast<size_t>(l)] = rng.uniform(1.6, 2.6);
        for (int c = 0; c < 3; ++c) id.blob_color[static_cast<size_t>(l)][static_cast<size_t>(c)] = rng.uniform(0.35, 1.0);
    }
    id.face_shade = rng.uniform(0.22, 0.45);
    for (int c = 0; c < 3; ++c) id.face_tint[static_cast<size_t>(c)] = rng.uniform(0.75, 1.05);
    id.background_level = rng.uniform(0.06, 0.14);
    return id;
}

LabelMap render_ground_truth_label(const std::vector<double>& landmarks, int height, int width) {
    return render_label_map({landmarks}, kLabelSquare, height, width);
}

LabelMap render_response_target(const std::vector<double>& landmarks, int height, int width) {
    const int L = static_cast<int>(landmarks.size()) / 2;
    LabelMap out(1, height, width);
    const int half = (kResponseSquare - 1) / 2;
    for (int l = 1; l <= L; ++l) {
        const double lx = landmarks[static_cast<size_t>(2 * (l - 1))];
        const double ly = landmarks[static_cast<size_t>(2 * (l - 1) + 1)];
        const int cx = static_cast<int>(std::lround(lx));
        const int cy = static_cast<int>(std::lround(ly));
        for (int y = std::max(0, cy - half); y <= std::min(height - 1, cy + half); ++y)
            for (int x = std::max(0, cx - half); x <= std::min(width - 1, cx + half); ++x) {
                int32_t& cell = out.at(0, y, x);
                if (cell == 0) {
                    cell = l;
                } else {
                    // overlap: the nearer landmark keeps the pixel
                    const int o = cell - 1;
                    const double dox = x - landmarks[static_cast<size_t>(2 * o)];
                    const double doy = y - landmarks[static_cast<size_t>(2 * o + 1)];
                    const double dnx = x - lx, dny = y - ly;
                    if (dnx * dnx + dny * dny < dox * dox + doy * doy) cell = l;
                }
            }
    }
    return out;
}

FrameSample render_frame(const Identity& identity, const PoseExpr& pose, int height, int width) {
    const int L = static_cast<int>(identity.canonical_shape.size()) / 2;
    const double face_size = 0.75 * std::min(height, width) * pose.scale;
    const double cx = 0.5 * (width - 1), cy = 0.5 * (height - 1);
    const double cr = std::cos(pose.rotation), sr = std::sin(pose.rotation);

    std::vector<double> unit = identity.canonical_shape;
    apply_expression(unit, pose.expression);

    FrameSample fr;
    fr.identity = identity.id;
    fr.pose = pose;
    fr.effective_rotation = pose.rotation;
    fr.tag = std::abs(pose.rotation) >= kLargePose ? PoseTag::Large : PoseTag::Small;
    fr.landmarks.resize(static_cast<size_t>(2 * L));
    double ecx = 0.0, ecy = 0.0;
    for (int l = 0; l < L; ++l) {
        const double ux = (unit[static_cast<size_t>(2 * l)] - 0.5) * face_size;
        const double uy = (unit[static_cast<size_t>(2 * l + 1)] - 0.5) * face_size;
        const double px = cx + pose.dx + cr * ux - sr * uy;
        const double py = cy + pose.dy + sr * ux + cr * uy;
        if (px < 1.0 || px > width - 2.0 || py < 1.0 || py > height - 2.0)
            throw GenerationError("pose places landmark " + std::to_string(l) + " outside the frame");
        fr.landmarks[static_cast<size_t>(2 * l)] = px;
        fr.landmarks[static_cast<size_t>(2 * l + 1)] = py;
        ecx += px;
        ecy += py;
    }
    ecx /= L;
    ecy /= L;

    Tensor img = Tensor::full({3, height, width}, identity.background_level);
    double* data = img.data();
    const int64_t plane = static_cast<int64_t>(height) * width;
    auto px_at = [&](int c, int y, int x) -> double& { return data[c * plane + static_cast<int64_t>(y) * width + x]; };

    // Soft structured background: a handful of smooth lumps plus pixel noise,
    // reseeded per frame from (identity, pose).
    Rng noise(mix_seed(identity.seed ^ 0xf00dull, pose_hash(pose)));
    for (int k = 0; k < 6; ++k) {
        const double lx = noise.uniform(0, width - 1);
        const double ly = noise.uniform(0, height - 1);
        const double sig = noise.uniform(3.0, 9.0);
        const double amp = noise.uniform(-0.12, 0.28);
        double col[3];
        for (double& c : col) c = noise.uniform(0.3, 1.0);
        const int r = static_cast<int>(std::ceil(3.0 * sig));
        const double inv2s = 1.0 / (2.0 * sig * sig);
        for (int y = std::max(0, static_cast<int>(ly) - r); y <= std::min(height - 1, static_cast<int>(ly) + r); ++y)
            for (int x = std::max(0, static_cast<int>(lx) - r); x <= std::min(width - 1, static_cast<int>(lx) + r); ++x) {
                const double d2 = (x - lx) * (x - lx) + (y - ly) * (y - ly);
                const double g = amp * std::exp(-d2 * inv2s);
                for (int c = 0; c < 3; ++c) px_at(c, y, x) += g * col[c];
            }
    }

    // face ellipse
    const double ax = 0.48 * face_size, ay = 0.56 * face_size;
    {
        const int r = static_cast<int>(std::ceil(std::max(ax, ay))) + 1;
        for (int y = std::max(0, static_cast<int>(ecy) - r); y <= std::min(height - 1, static_cast<int>(ecy) + r); ++y)
            for (int x = std::max(0, static_cast<int>(ecx) - r); x <= std::min(width - 1, static_cast<int>(ecx) + r); ++x) {
                const double rx = x - ecx, ry = y - ecy;
                const double qx = cr * rx + sr * ry;   // rotate back
                const double qy = -sr * rx + cr * ry;
                const double e = (qx / ax) * (qx / ax) + (qy / ay) * (qy / ay);
                if (e < 1.0) {
                    const double v = identity.face_shade * (1.0 - 0.35 * e);
                    for (int c = 0; c < 3; ++c) px_at(c, y, x) += v * identity.face_tint[static_cast<size_t>(c)];
                }
            }
    }

    // landmark blobs
    for (int l = 0; l < L; ++l) {
        const double lx = fr.landmarks[static_cast<size_t>(2 * l)];
        const double ly = fr.landmarks[static_cast<size_t>(2 * l + 1)];
        const double sig = identity.blob_sigma[static_cast<size_t>(l)] * pose.scale;
        const double inv2s = 1.0 / (2.0 * sig * sig);
        const int r = static_cast<int>(std::ceil(3.5 * sig));
        for (int y = std::max(0, static_cast<int>(ly) - r); y <= std::min(height - 1, static_cast<int>(ly) + r); ++y)
            for (int x = std::max(0, static_cast<int>(lx) - r); x <= std::min(width - 1, static_cast<int>(lx) + r); ++x) {
                const double d2 = (x - lx) * (x - lx) + (y - ly) * (y - ly);
                const double g = identity.blob_intensity[static_cast<size_t>(l)] * std::exp(-d2 * inv2s);
                for (int c = 0; c < 3; ++c)
                    px_at(c, y, x) += g * identity.blob_color[static_cast<size_t>(l)][static_cast<size_t>(c)];
            }
    }

    // per-pixel noise (gray), then clamp and quantize to 8-bit levels so
    // persisted frames round-trip bitwise
    for (int64_t i = 0; i < plane; ++i) {
        const double n = noise.uniform(-0.025, 0.025);
        for (int c = 0; c < 3; ++c) {
            double v = std::clamp(data[c * plane + i] + n, 0.0, 1.0);
            data[c * plane + i] = std::lround(v * 255.0) / 255.0;
        }
    }

    fr.image = img;
    fr.label_map = render_ground_truth_label(fr.landmarks, height, width);
    fr.response_target = render_response_target(fr.landmarks, height, width);
    return fr;
}

Clip sample_clip_in_range(const Identity& identity, int length, uint64_t seed, double abs_rot_lo, double abs_rot_hi,
                          int image_size) {
    if (length < 1) throw ContractError("clip length must be >= 1");
    for (int attempt = 0; attempt < 8; ++attempt) {
        Rng rng(mix_seed(seed, 0xc11b, static_cast<uint64_t>(attempt)));
        const int nk = std::max(2, (length + 3) / 4 + 1);
        const double rot_base = (rng.coin() ? 1.0 : -1.0) * rng.uniform(abs_rot_lo, abs_rot_hi);
        const double scale_base = rng.uniform(0.8, 1.2);
        const double dx_base = rng.uniform(-4.0, 4.0);
        const double dy_base = rng.uniform(-4.0, 4.0);

        std::vector<double> rot_k, scale_k, dx_k, dy_k;
        std::vector<std::vector<double>> expr_k(PoseExpr::kExprDims);
        std::vector<double> expr_base(PoseExpr::kExprDims);
        for (int j = 0; j < PoseExpr::kExprDims; ++j)
            expr_base[static_cast<size_t>(j)] = rng.uniform(kExprRanges[j].lo, kExprRanges[j].hi);
        for (int k = 0; k < nk; ++k) {
            rot_k.push_back(std::clamp(rot_base + rng.uniform(-1.0, 1.0) * (12.0 * kPi / 180.0), -kPi / 3.0, kPi / 3.0));
            scale_k.push_back(std::clamp(scale_base + rng.uniform(-0.06, 0.06), 0.7, 1.3));
            dx_k.push_back(std::clamp(dx_base + rng.uniform(-3.0, 3.0), -7.0, 7.0));
            dy_k.push_back(std::clamp(dy_base + rng.uniform(-3.0, 3.0), -7.0, 7.0));
            for (int j = 0; j < PoseExpr::kExprDims; ++j) {
                const double span = 0.3 * (kExprRanges[j].hi - kExprRanges[j].lo);
                expr_k[static_cast<size_t>(j)].push_back(std::clamp(expr_base[static_cast<size_t>(j)] + rng.uniform(-span, span),
                                                                    kExprRanges[j].lo, kExprRanges[j].hi));
            }
        }

        auto rot = interpolate_track(rot_k, length);
        auto scl = interpolate_track(scale_k, length);
        auto dxs = interpolate_track(dx_k, length);
        auto dys = interpolate_track(dy_k, length);
        std::vector<std::vector<double>> exprs(PoseExpr::kExprDims);
        for (int j = 0; j < PoseExpr::kExprDims; ++j) exprs[static_cast<size_t>(j)] = interpolate_track(expr_k[static_cast<size_t>(j)], length);

        try {
            Clip clip;
            clip.identity = identity.id;
            for (int t = 0; t < length; ++t) {
                PoseExpr p;
                p.rotation = std::clamp(rot[static_cast<size_t>(t)], -kPi / 3.0, kPi / 3.0);
                p.scale = std::clamp(scl[static_cast<size_t>(t)], 0.7, 1.3);
                p.dx = dxs[static_cast<size_t>(t)];
                p.dy = dys[static_cast<size_t>(t)];
                p.expression.resize(PoseExpr::kExprDims);
                for (int j = 0; j < PoseExpr::kExprDims; ++j) p.expression[static_cast<size_t>(j)] = exprs[static_cast<size_t>(j)][static_cast<size_t>(t)];
                clip.frames.push_back(render_frame(identity, p, image_size, image_size));
            }
            for (const FrameSample& f : clip.frames)
                if (f.tag == PoseTag::Large) clip.tag = PoseTag::Large;
            return clip;
        } catch (const GenerationError&) {
            continue;  // re-seeded attempt
        }
    }
    throw GenerationError("could not place a clip after bounded resampling");
}

Clip sample_clip(const Identity& identity, int length, uint64_t seed, int image_size) {
    return sample_clip_in_range(identity, length, seed, 0.0, 50.0 * kPi / 180.0, image_size);
}

namespace {

double bilinear(const double* plane, int H, int W, double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(W - 1));
    y = std::clamp(y, 0.0, static_cast<double>(H - 1));
    const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
    const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    const double fx = x - x0, fy = y - y0;
    const double a = plane[static_cast<int64_t>(y0) * W + x0];
    const double b = plane[static_cast<int64_t>(y0) * W + x1];
    const double c = plane[static_cast<int64_t>(y1) * W + x0];
    const double d = plane[static_cast<int64_t>(y1) * W + x1];
    return a * (1 - fx) * (1 - fy) + b * fx * (1 - fy) + c * (1 - fx) * fy + d * fx * fy;
}

}  // namespace

FrameSample augment_with_params(const FrameSample& sample, const AugmentParams& params, const std::vector<int>& symmetry) {
    const int H = sample.image.dim(1), W = sample.image.dim(2);
    const int L = static_cast<int>(sample.landmarks.size()) / 2;
    if (static_cast<int>(symmetry.size()) != L) throw ContractError("symmetry table length must equal landmark count");
    const double ctr_x = 0.5 * (W - 1), ctr_y = 0.5 * (H - 1);
    const double cr = std::cos(params.rotation), sr = std::sin(params.rotation);

    FrameSample out;
    out.identity = sample.identity;
    out.pose = sample.pose;
    out.effective_rotation = (params.flip ? -sample.effective_rotation : sample.effective_rotation) + params.rotation;
    out.tag = std::abs(out.effective_rotation) >= kLargePose ? PoseTag::Large : PoseTag::Small;

    out.landmarks.assign(static_cast<size_t>(2 * L), 0.0);
    for (int l = 0; l < L; ++l) {
        double x = sample.landmarks[static_cast<size_t>(2 * l)];
        double y = sample.landmarks[static_cast<size_t>(2 * l + 1)];
        if (params.flip) x = (W - 1) - x;
        const double rx = x - ctr_x, ry = y - ctr_y;
        const double nx = ctr_x + params.dx + params.scale * (cr * rx - sr * ry);
        const double ny = ctr_y + params.dy + params.scale * (sr * rx + cr * ry);
        const int dst = params.flip ? symmetry[static_cast<size_t>(l)] : l;
        out.landmarks[static_cast<size_t>(2 * dst)] = nx;
        out.landmarks[static_cast<size_t>(2 * dst + 1)] = ny;
    }

    out.image = Tensor::zeros({3, H, W});
    const int64_t plane = static_cast<int64_t>(H) * W;
    const double inv_s = 1.0 / params.scale;
    for (int c = 0; c < 3; ++c) {
        const double* src = sample.image.data() + c * plane;
        double* dst = out.image.data() + c * plane;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double rx = (x - ctr_x - params.dx) * inv_s;
                const double ry = (y - ctr_y - params.dy) * inv_s;
                double sx = ctr_x + (cr * rx + sr * ry);   // inverse rotation
                double sy = ctr_y + (-sr * rx + cr * ry);
                if (params.flip) sx = (W - 1) - sx;
                const double v = bilinear(src, H, W, sx, sy);
                dst[static_cast<int64_t>(y) * W + x] = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
            }
    }

    out.label_map = render_ground_truth_label(out.landmarks, H, W);
    out.response_target = render_response_target(out.landmarks, H, W);
    return out;
}

FrameSample augment(const FrameSample& sample, uint64_t seed, const std::vector<int>& symmetry) {
    const int H = sample.image.dim(1), W = sample.image.dim(2);
    const int L = static_cast<int>(sample.landmarks.size()) / 2;
    Rng rng(mix_seed(seed, 0xa6a6));
    for (int attempt = 0; attempt < 20; ++attempt) {
        AugmentParams p;
        p.flip = rng.coin();
        p.scale = rng.uniform(0.9, 1.1);
        p.rotation = rng.uniform(-15.0, 15.0) * kPi / 180.0;
        p.dx = rng.uniform(-7.0, 7.0);
        p.dy = rng.uniform(-7.0, 7.0);

        const double ctr_x = 0.5 * (W - 1), ctr_y = 0.5 * (H - 1);
        const double cr = std::cos(p.rotation), sr = std::sin(p.rotation);
        bool ok = true;
        for (int l = 0; l < L && ok; ++l) {
            double x = sample.landmarks[static_cast<size_t>(2 * l)];
            double y = sample.landmarks[static_cast<size_t>(2 * l + 1)];
            if (p.flip) x = (W - 1) - x;
            const double rx = x - ctr_x, ry = y - ctr_y;
            const double nx = ctr_x + p.dx + p.scale * (cr * rx - sr * ry);
            const double ny = ctr_y + p.dy + p.scale * (sr * rx + cr * ry);
            ok = nx >= 1.0 && nx <= W - 2.0 && ny >= 1.0 && ny <= H - 2.0;
        }
        if (ok) return augment_with_params(sample, p, symmetry);
    }
    return augment_with_params(sample, AugmentParams{}, symmetry);  // skip-augmentation fallback
}

// ---------------------------------------------------------------------------
// dataset assembly and persistence
// ---------------------------------------------------------------------------

namespace {

FrameSample render_base_frame(const Identity& id, Rng& rng, int size, double abs_rot_lo, double abs_rot_hi) {
    for (int attempt = 0; attempt < 32; ++attempt) {
        PoseExpr p;
        p.rotation = (rng.coin() ? 1.0 : -1.0) * rng.uniform(abs_rot_lo, abs_rot_hi);
        p.scale = rng.uniform(0.8, 1.2);
        p.dx = rng.uniform(-5.0, 5.0);
        p.dy = rng.uniform(-5.0, 5.0);
        p.expression.resize(PoseExpr::kExprDims);
        for (int j = 0; j < PoseExpr::kExprDims; ++j) p.expression[static_cast<size_t>(j)] = rng.uniform(kExprRanges[j].lo, kExprRanges[j].hi);
        try {
            return render_frame(id, p, size, size);
        } catch (const GenerationError&) {
            continue;
        }
    }
    throw GenerationError("could not place a base frame after bounded resampling");
}

}  // namespace

Dataset build_dataset(const GenConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.config = cfg;
    ds.symmetry = landmark_symmetry_table(cfg.landmark_count);
    ds.eye_pair = cfg.landmark_count == 7 ? std::array<int, 2>{0, 3} : std::array<int, 2>{0, cfg.landmark_count - 1};

    std::vector<Identity> train_ids, eval_ids;
    for (int i = 0; i < cfg.train_identities; ++i) {
        Identity id = make_identity(mix_seed(cfg.seed, 0x1d, static_cast<uint64_t>(i)), cfg);
        id.id = i;
        ds.train_identity_ids.push_back(i);
        train_ids.push_back(std::move(id));
    }
    for (int i = 0; i < cfg.eval_identities; ++i) {
        const int gid = cfg.train_identities + i;
        Identity id = make_identity(mix_seed(cfg.seed, 0x1d, static_cast<uint64_t>(gid)), cfg);
        id.id = gid;
        ds.eval_identity_ids.push_back(gid);
        eval_ids.push_back(std::move(id));
    }

    const double lg = 32.0 * kPi / 180.0, lg_hi = 60.0 * kPi / 180.0, sm_hi = 28.0 * kPi / 180.0;

    for (const Identity& id : train_ids) {
        for (int j = 0; j < cfg.frames_per_identity; ++j) {
            Rng rng(mix_seed(cfg.seed, 0x7f01, mix_seed(static_cast<uint64_t>(id.id), static_cast<uint64_t>(j))));
            FrameSample base = render_base_frame(id, rng, cfg.image_size, 0.0, lg_hi);
            ds.train_images.push_back(base);
            for (int a = 0; a < cfg.augments_per_frame; ++a)
                ds.train_images.push_back(
                    augment(base, mix_seed(cfg.seed, 0x7f02, mix_seed(static_cast<uint64_t>(id.id), mix_seed(static_cast<uint64_t>(j), static_cast<uint64_t>(a)))), ds.symmetry));
        }
    }

    for (const Identity& id : eval_ids) {
        for (int j = 0; j < cfg.eval_frames_per_identity; ++j) {
            Rng rng(mix_seed(cfg.seed, 0x7f03, mix_seed(static_cast<uint64_t>(id.id), static_cast<uint64_t>(j))));
            const bool large = j % 2 == 1;  // stratified halves
            ds.eval_images.push_back(render_base_frame(id, rng, cfg.image_size, large ? lg : 0.0, large ? lg_hi : sm_hi));
        }
    }

    for (const Identity& id : train_ids)
        for (int c = 0; c < cfg.train_clips_per_identity; ++c)
            ds.train_clips.push_back(sample_clip(id, cfg.clip_length, mix_seed(cfg.seed, 0x7f04, mix_seed(static_cast<uint64_t>(id.id), static_cast<uint64_t>(c))), cfg.image_size));

    for (const Identity& id : eval_ids)
        for (int c = 0; c < cfg.eval_clips_per_identity; ++c) {
            const bool large = c % 2 == 1;
            ds.eval_clips.push_back(sample_clip_in_range(id, cfg.clip_length,
                                                         mix_seed(cfg.seed, 0x7f05, mix_seed(static_cast<uint64_t>(id.id), static_cast<uint64_t>(c))),
                                                         large ? lg : 0.0, large ? 50.0 * kPi / 180.0 : 20.0 * kPi / 180.0,
                                                         cfg.image_size));
        }

    ds.mean_shape.assign(static_cast<size_t>(2 * cfg.landmark_count), 0.0);
    for (const FrameSample& f : ds.train_images)
        for (size_t d = 0; d < ds.mean_shape.size(); ++d) ds.mean_shape[d] += f.landmarks[d];
    for (double& v : ds.mean_shape) v /= static_cast<double>(ds.train_images.size());
    return ds;
}

// --- persistence -----------------------------------------------------------

void write_ppm(const std::string& path, const Tensor& image) {
    if (image.ndim() != 3 || image.dim(0) != 3) throw ContractError("write_ppm expects a [3,H,W] image");
    const int H = image.dim(1), W = image.dim(2);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "P6\n" << W << " " << H << "\n255\n";
    const int64_t plane = static_cast<int64_t>(H) * W;
    std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<size_t>(x) * 3 + static_cast<size_t>(c)] = static_cast<unsigned char>(
                    std::lround(std::clamp(image.data()[c * plane + static_cast<int64_t>(y) * W + x], 0.0, 1.0) * 255.0));
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw IoError("failed while writing " + path);
}

Tensor read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    f >> magic >> w >> h >> maxv;
    if (magic != "P6" || maxv != 255 || w <= 0 || h <= 0) throw FormatError("unsupported pixmap header in " + path);
    f.get();  // single whitespace after header
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (f.gcount() != static_cast<std::streamsize>(raw.size())) throw FormatError("truncated pixmap " + path);
    Tensor img = Tensor::zeros({3, h, w});
    const int64_t plane = static_cast<int64_t>(h) * w;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.data()[c * plane + static_cast<int64_t>(y) * w + x] =
                    raw[(static_cast<size_t>(y) * w + x) * 3 + static_cast<size_t>(c)] / 255.0;
    return img;
}

void write_pgm(const std::string& path, const std::vector<double>& values, int height, int width) {
    if (static_cast<int64_t>(values.size()) != static_cast<int64_t>(height) * width)
        throw ContractError("write_pgm value count does not match extents");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "P5\n" << width << " " << height << "\n255\n";
    for (double v : values) {
        unsigned char b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        f.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!f) throw IoError("failed while writing " + path);
}

namespace {

void write_records(const std::string& path, const std::vector<const FrameSample*>& frames,
                   const std::vector<std::string>& files, const std::vector<int>& clip_ids,
                   const std::vector<int>& frame_ids, int L) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "file\tidentity\tclip\tframe\ttag\teff_rot\tscale\trotation\tdx\tdy";
    for (int j = 0; j < PoseExpr::kExprDims; ++j) f << "\texpr" << j;
    for (int l = 0; l < L; ++l) f << "\tlm" << l << "x\tlm" << l << "y";
    f << "\n";
    for (size_t i = 0; i < frames.size(); ++i) {
        const FrameSample& s = *frames[i];
        f << files[i] << "\t" << s.identity << "\t" << clip_ids[i] << "\t" << frame_ids[i] << "\t"
          << (s.tag == PoseTag::Large ? "large" : "small") << "\t" << fmt_double(s.effective_rotation) << "\t"
          << fmt_double(s.pose.scale) << "\t" << fmt_double(s.pose.rotation) << "\t" << fmt_double(s.pose.dx) << "\t"
          << fmt_double(s.pose.dy);
        for (int j = 0; j < PoseExpr::kExprDims; ++j)
            f << "\t" << fmt_double(j < static_cast<int>(s.pose.expression.size()) ? s.pose.expression[static_cast<size_t>(j)] : 0.0);
        for (double v : s.landmarks) f << "\t" << fmt_double(v);
        f << "\n";
    }
    if (!f) throw IoError("failed while writing " + path);
}

struct RecordRow {
    std::string file;
    int identity = 0, clip = -1, frame = 0;
    PoseTag tag = PoseTag::Small;
    double eff_rot = 0;
    PoseExpr pose;
    std::vector<double> landmarks;
};

std::vector<RecordRow> read_records(const std::string& path, int L) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::string header;
    std::getline(f, header);
    std::vector<RecordRow> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, '\t')) cols.push_back(c);
        const size_t expected = 10 + PoseExpr::kExprDims + static_cast<size_t>(2 * L);
        if (cols.size() != expected)
            throw FormatError(path + ": row has " + std::to_string(cols.size()) + " fields, expected " + std::to_string(expected));
        RecordRow r;
        size_t k = 0;
        r.file = cols[k++];
        r.identity = std::stoi(cols[k++]);
        r.clip = std::stoi(cols[k++]);
        r.frame = std::stoi(cols[k++]);
        r.tag = cols[k++] == "large" ? PoseTag::Large : PoseTag::Small;
        r.eff_rot = std::strtod(cols[k++].c_str(), nullptr);
        r.pose.scale = std::strtod(cols[k++].c_str(), nullptr);
        r.pose.rotation = std::strtod(cols[k++].c_str(), nullptr);
        r.pose.dx = std::strtod(cols[k++].c_str(), nullptr);
        r.pose.dy = std::strtod(cols[k++].c_str(), nullptr);
        r.pose.expression.resize(PoseExpr::kExprDims);
        for (int j = 0; j < PoseExpr::kExprDims; ++j) r.pose.expression[static_cast<size_t>(j)] = std::strtod(cols[k++].c_str(), nullptr);
        r.landmarks.resize(static_cast<size_t>(2 * L));
        for (int d = 0; d < 2 * L; ++d) r.landmarks[static_cast<size_t>(d)] = std::strtod(cols[k++].c_str(), nullptr);
        rows.push_back(std::move(r));
    }
    return rows;
}

json config_to_json(const GenConfig& c) {
    return json{{"image_size", c.image_size},
                {"landmark_count", c.landmark_count},
                {"train_identities", c.train_identities},
                {"eval_identities", c.eval_identities},
                {"frames_per_identity", c.frames_per_identity},
                {"augments_per_frame", c.augments_per_frame},
                {"eval_frames_per_identity", c.eval_frames_per_identity},
                {"train_clips_per_identity", c.train_clips_per_identity},
                {"eval_clips_per_identity", c.eval_clips_per_identity},
                {"clip_length", c.clip_length},
                {"seed", c.seed}};
}

GenConfig config_from_json(const json& j) {
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

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    for (const char* sub : {"train_images", "eval_images", "train_clips", "eval_clips"})
        fs::create_directories(fs::path(dir) / sub, ec);
    if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());
    const int L = ds.config.landmark_count;

    auto save_images = [&](const std::vector<FrameSample>& frames, const std::string& sub) {
        std::vector<const FrameSample*> ptrs;
        std::vector<std::string> files;
        std::vector<int> clips, fids;
        for (size_t i = 0; i < frames.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "f%06zu.ppm", i);
            write_ppm((fs::path(dir) / sub / name).string(), frames[i].image);
            ptrs.push_back(&frames[i]);
            files.emplace_back(name);
            clips.push_back(-1);
            fids.push_back(static_cast<int>(i));
        }
        write_records((fs::path(dir) / sub / "records.tsv").string(), ptrs, files, clips, fids, L);
    };
    auto save_clips = [&](const std::vector<Clip>& clips, const std::string& sub) {
        std::vector<const FrameSample*> ptrs;
        std::vector<std::string> files;
        std::vector<int> cids, fids;
        for (size_t c = 0; c < clips.size(); ++c)
            for (size_t t = 0; t < clips[c].frames.size(); ++t) {
                char name[32];
                std::snprintf(name, sizeof(name), "c%04zu_f%02zu.ppm", c, t);
                write_ppm((fs::path(dir) / sub / name).string(), clips[c].frames[t].image);
                ptrs.push_back(&clips[c].frames[t]);
                files.emplace_back(name);
                cids.push_back(static_cast<int>(c));
                fids.push_back(static_cast<int>(t));
            }
        write_records((fs::path(dir) / sub / "records.tsv").string(), ptrs, files, cids, fids, L);
    };

    save_images(ds.train_images, "train_images");
    save_images(ds.eval_images, "eval_images");
    save_clips(ds.train_clips, "train_clips");
    save_clips(ds.eval_clips, "eval_clips");

    json m;
    m["format"] = "redec-data-v1";
    m["config"] = config_to_json(ds.config);
    m["mean_shape"] = ds.mean_shape;
    m["symmetry"] = ds.symmetry;
    m["eye_pair"] = ds.eye_pair;
    m["train_identity_ids"] = ds.train_identity_ids;
    m["eval_identity_ids"] = ds.eval_identity_ids;
    m["counts"] = {{"train_images", ds.train_images.size()},
                   {"eval_images", ds.eval_images.size()},
                   {"train_clips", ds.train_clips.size()},
                   {"eval_clips", ds.eval_clips.size()}};
    std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!mf) throw IoError("cannot write manifest in " + dir);
    mf << m.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("cannot open manifest in " + dir);
    json m;
    try {
        mf >> m;
    } catch (const json::exception& e) {
        throw FormatError("manifest parse failure in " + dir + ": " + e.what());
    }
    if (m.value("format", "") != "redec-data-v1") throw FormatError("unknown dataset format in " + dir);

    Dataset ds;
    ds.config = config_from_json(m.at("config"));
    ds.mean_shape = m.at("mean_shape").get<std::vector<double>>();
    ds.symmetry = m.at("symmetry").get<std::vector<int>>();
    auto ep = m.at("eye_pair").get<std::vector<int>>();
    if (ep.size() != 2) throw FormatError("eye_pair must list two landmark indices");
    ds.eye_pair = {ep[0], ep[1]};
    ds.train_identity_ids = m.at("train_identity_ids").get<std::vector<int>>();
    ds.eval_identity_ids = m.at("eval_identity_ids").get<std::vector<int>>();
    const int L = ds.config.landmark_count;
    const int size = ds.config.image_size;

    auto load_images = [&](const std::string& sub, std::vector<FrameSample>& out) {
        for (const RecordRow& r : read_records((fs::path(dir) / sub / "records.tsv").string(), L)) {
            FrameSample s;
            s.image = read_ppm((fs::path(dir) / sub / r.file).string());
            if (s.image.dim(1) != size || s.image.dim(2) != size) throw FormatError(r.file + ": image extent mismatch");
            s.identity = r.identity;
            s.pose = r.pose;
            s.effective_rotation = r.eff_rot;
            s.tag = r.tag;
            s.landmarks = r.landmarks;
            s.label_map = render_ground_truth_label(s.landmarks, size, size);
            s.response_target = render_response_target(s.landmarks, size, size);
            out.push_back(std::move(s));
        }
    };
    auto load_clips = [&](const std::string& sub, std::vector<Clip>& out) {
        for (const RecordRow& r : read_records((fs::path(dir) / sub / "records.tsv").string(), L)) {
            if (r.clip < 0) throw FormatError(sub + ": clip record without clip id");
            if (static_cast<size_t>(r.clip) >= out.size()) out.resize(static_cast<size_t>(r.clip) + 1);
            Clip& clip = out[static_cast<size_t>(r.clip)];
            FrameSample s;
            s.image = read_ppm((fs::path(dir) / sub / r.file).string());
            s.identity = r.identity;
            s.pose = r.pose;
            s.effective_rotation = r.eff_rot;
            s.tag = r.tag;
            s.landmarks = r.landmarks;
            s.label_map = render_ground_truth_label(s.landmarks, size, size);
            s.response_target = render_response_target(s.landmarks, size, size);
            if (static_cast<int>(clip.frames.size()) != r.frame) throw FormatError(sub + ": clip frames out of order");
            clip.identity = r.identity;
            clip.frames.push_back(std::move(s));
            if (r.tag == PoseTag::Large) clip.tag = PoseTag::Large;
        }
        for (const Clip& c : out)
            if (static_cast<int>(c.frames.size()) != ds.config.clip_length)
                throw DataError(sub + ": clip shorter than configured length");
    };

    load_images("train_images", ds.train_images);
    load_images("eval_images", ds.eval_images);
    load_clips("train_clips", ds.train_clips);
    load_clips("eval_clips", ds.eval_clips);
    return ds;
}

}  // namespace redec

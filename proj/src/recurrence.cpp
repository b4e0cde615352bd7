#include "redec/recurrence.hpp"

#include <cmath>

namespace redec {

LabelMap merge_response_map(const Tensor& probs) {
    if (probs.ndim() != 4) throw ContractError("merge expects a [B,C,H,W] response map");
    const int B = probs.dim(0), C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
    const int64_t plane = static_cast<int64_t>(H) * W;
    LabelMap merged(B, H, W);
    const double* p = probs.data();
    for (int b = 0; b < B; ++b) {
        const double* pb = p + static_cast<int64_t>(b) * C * plane;
        for (int64_t i = 0; i < plane; ++i) {
            double best = pb[i];
            int best_c = 0;
            for (int c = 1; c < C; ++c) {
                double v = pb[c * plane + i];
                if (v > best) {  // strict: ties keep the smaller channel
                    best = v;
                    best_c = c;
                }
            }
            merged.values[static_cast<size_t>(b) * plane + i] = best_c;
        }
    }
    return merged;
}

std::vector<std::vector<double>> extract_centers(const LabelMap& merged, const Tensor& probs) {
    const int B = probs.dim(0), C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
    if (merged.batch != B || merged.height != H || merged.width != W)
        throw ContractError("merged map does not match the response map");
    const int L = C - 1;
    const int64_t plane = static_cast<int64_t>(H) * W;
    std::vector<std::vector<double>> centers(static_cast<size_t>(B), std::vector<double>(static_cast<size_t>(2 * L), 0.0));

    for (int b = 0; b < B; ++b) {
        const double* pb = probs.data() + static_cast<int64_t>(b) * C * plane;
        for (int l = 1; l <= L; ++l) {
            const double* ch = pb + static_cast<int64_t>(l) * plane;
            double wsum = 0.0, xsum = 0.0, ysum = 0.0;
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    int64_t i = static_cast<int64_t>(y) * W + x;
                    if (merged.values[static_cast<size_t>(b) * plane + i] == l) {
                        double w = ch[i];
                        wsum += w;
                        xsum += w * x;
                        ysum += w * y;
                    }
                }
            double cx, cy;
            if (wsum > 0.0) {
                cx = xsum / wsum;
                cy = ysum / wsum;
            } else {
                // fallback: argmax pixel of this channel
                int64_t best_i = 0;
                double best = ch[0];
                for (int64_t i = 1; i < plane; ++i)
                    if (ch[i] > best) {
                        best = ch[i];
                        best_i = i;
                    }
                cx = static_cast<double>(best_i % W);
                cy = static_cast<double>(best_i / W);
            }
            centers[static_cast<size_t>(b)][static_cast<size_t>(2 * (l - 1))] = cx;
            centers[static_cast<size_t>(b)][static_cast<size_t>(2 * (l - 1) + 1)] = cy;
        }
    }
    return centers;
}

LabelMap render_label_map(const std::vector<std::vector<double>>& centers, int square_size, int height, int width) {
    if (square_size < 1 || square_size % 2 == 0) throw ContractError("label squares must have odd positive side");
    const int B = static_cast<int>(centers.size());
    LabelMap out(B, height, width);
    const int half = (square_size - 1) / 2;
    for (int b = 0; b < B; ++b) {
        const auto& cs = centers[static_cast<size_t>(b)];
        const int L = static_cast<int>(cs.size()) / 2;
        for (int l = 1; l <= L; ++l) {
            const int cx = static_cast<int>(std::lround(cs[static_cast<size_t>(2 * (l - 1))]));
            const int cy = static_cast<int>(std::lround(cs[static_cast<size_t>(2 * (l - 1) + 1)]));
            const int y0 = std::max(0, cy - half), y1 = std::min(height - 1, cy + half);
            const int x0 = std::max(0, cx - half), x1 = std::min(width - 1, cx + half);
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) out.at(b, y, x) = l;
        }
    }
    return out;
}

LabelMap init_label_map(const std::vector<double>& mean_shape, int height, int width, int batch) {
    std::vector<std::vector<double>> centers(static_cast<size_t>(batch), mean_shape);
    return render_label_map(centers, 7, height, width);
}

SpatialTrace spatial_forward(Tape* tape, const Tensor& image, const LabelMap& z0, const ModelParams& params,
                             int steps, const std::vector<int>& sizes) {
    if (static_cast<int>(sizes.size()) != steps) throw ContractError("need one feedback square size per spatial step");
    SpatialTrace trace;
    trace.steps.reserve(static_cast<size_t>(steps));
    const LabelMap* z = &z0;
    for (int k = 0; k < steps; ++k) {
        SpatialStep step;
        step.enc = encode(tape, image, *z, params);
        step.logits = decode(tape, step.enc.code, step.enc.pool_indices, params);
        step.probs = softmax_channels(tape, step.logits);
        step.merged = merge_response_map(step.probs);
        step.centers = extract_centers(step.merged, step.probs);
        step.fed_back = render_label_map(step.centers, sizes[static_cast<size_t>(k)], image.dim(2), image.dim(3));
        trace.steps.push_back(std::move(step));
        z = &trace.steps.back().fed_back;
    }
    return trace;
}

TemporalTrace temporal_forward(Tape* tape, const std::vector<Tensor>& frames, const ModelParams& params, int steps,
                               const std::vector<int>& sizes, bool use_lstm) {
    if (frames.empty()) throw DataError("temporal forward needs at least one frame");
    const int B = frames[0].dim(0);
    const NetConfig& cfg = params.cfg;

    TemporalTrace out;
    out.state = LstmState::zeros(B, cfg.lstm_hidden);
    std::vector<double> mean(params.mean_shape.vec());
    LabelMap z = init_label_map(mean, cfg.input_size, cfg.input_size, B);

    for (size_t t = 0; t < frames.size(); ++t) {
        FrameResult fr;
        fr.used_init = z;
        if (cfg.lstm_every_spatial_step && use_lstm) {
            // Alternative composition: the temporal unit refines c_pe inside
            // every spatial step before decoding.
            const LabelMap* zp = &z;
            for (int k = 0; k < steps; ++k) {
                SpatialStep step;
                step.enc = encode(tape, frames[t], *zp, params);
                auto [c_pe2, st] = lstm_temporal_step(tape, step.enc.code.c_pe, out.state, params);
                out.state = st;
                step.logits = decode(tape, BottleneckCode{step.enc.code.c_id, c_pe2}, step.enc.pool_indices, params);
                step.probs = softmax_channels(tape, step.logits);
                step.merged = merge_response_map(step.probs);
                step.centers = extract_centers(step.merged, step.probs);
                step.fed_back = render_label_map(step.centers, sizes[static_cast<size_t>(k)], cfg.input_size, cfg.input_size);
                if (k == steps - 1) {
                    fr.final_logits = step.logits;
                    fr.final_probs = step.probs;
                    fr.code = BottleneckCode{step.enc.code.c_id, c_pe2};
                }
                fr.trace.steps.push_back(std::move(step));
                zp = &fr.trace.steps.back().fed_back;
            }
        } else {
            fr.trace = spatial_forward(tape, frames[t], z, params, steps, sizes);
            const SpatialStep& last = fr.trace.steps.back();
            Tensor c_pe = last.enc.code.c_pe;
            if (use_lstm) {
                auto [c_pe2, st] = lstm_temporal_step(tape, c_pe, out.state, params);
                out.state = st;
                fr.code = BottleneckCode{last.enc.code.c_id, c_pe2};
                fr.final_logits = decode(tape, fr.code, last.enc.pool_indices, params);
                fr.final_probs = softmax_channels(tape, fr.final_logits);
            } else {
                fr.code = last.enc.code;
                fr.final_logits = last.logits;
                fr.final_probs = last.probs;
            }
        }
        fr.final_merged = merge_response_map(fr.final_probs);
        fr.final_centers = extract_centers(fr.final_merged, fr.final_probs);
        // tracking initialization for the next frame
        z = render_label_map(fr.final_centers, 7, cfg.input_size, cfg.input_size);
        out.frames.push_back(std::move(fr));
    }
    return out;
}

}  // namespace redec

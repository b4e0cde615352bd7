#include "redec/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace redec {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

bool wants_grad(Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

void require_4d(const Tensor& t, const char* name) {
    if (!t.defined() || t.ndim() != 4) throw ContractError(std::string(name) + " must be a 4-d tensor");
}

// Unpacks [C,H,W] of one batch item into im2col layout: row (c,ky,kx),
// column (oy,ox). Only the stride-1 path is vectorized; the network uses
// stride 1 everywhere.
void im2col(const double* x, int C, int H, int W, int k, int stride, int pad, int OH, int OW, double* cols) {
    for (int c = 0; c < C; ++c) {
        const double* xc = x + static_cast<int64_t>(c) * H * W;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* row = cols + (static_cast<int64_t>(c) * k * k + ky * k + kx) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    double* dst = row + static_cast<int64_t>(oy) * OW;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + OW, 0.0);
                        continue;
                    }
                    const double* src_row = xc + static_cast<int64_t>(iy) * W;
                    if (stride == 1) {
                        int lo = std::max(0, pad - kx);            // first ox with valid ix
                        int hi = std::min(OW, W + pad - kx);        // one past last valid ox
                        if (hi < lo) hi = lo;
                        std::fill(dst, dst + lo, 0.0);
                        if (hi > lo) std::memcpy(dst + lo, src_row + lo + kx - pad, sizeof(double) * (hi - lo));
                        std::fill(dst + hi, dst + OW, 0.0);
                    } else {
                        for (int ox = 0; ox < OW; ++ox) {
                            int ix = ox * stride - pad + kx;
                            dst[ox] = (ix >= 0 && ix < W) ? src_row[ix] : 0.0;
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add of an im2col gradient back onto the input image.
void col2im_add(const double* cols, int C, int H, int W, int k, int stride, int pad, int OH, int OW, double* dx) {
    for (int c = 0; c < C; ++c) {
        double* xc = dx + static_cast<int64_t>(c) * H * W;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* row = cols + (static_cast<int64_t>(c) * k * k + ky * k + kx) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    const double* src = row + static_cast<int64_t>(oy) * OW;
                    double* dst_row = xc + static_cast<int64_t>(iy) * W;
                    if (stride == 1) {
                        int lo = std::max(0, pad - kx);
                        int hi = std::min(OW, W + pad - kx);
                        for (int ox = lo; ox < hi; ++ox) dst_row[ox + kx - pad] += src[ox];
                    } else {
                        for (int ox = 0; ox < OW; ++ox) {
                            int ix = ox * stride - pad + kx;
                            if (ix >= 0 && ix < W) dst_row[ix] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int pad) {
    require_4d(input, "conv2d input");
    require_4d(weight, "conv2d weight");
    require(stride >= 1 && pad >= 0, "conv2d requires stride >= 1 and pad >= 0");
    const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int F = weight.dim(0), k = weight.dim(2);
    require(weight.dim(2) == weight.dim(3), "conv2d kernels must be square");
    require(weight.dim(1) == C, "conv2d weight channels " + std::to_string(weight.dim(1)) + " do not match input channels " +
                                    std::to_string(C));
    require(bias.defined() && bias.ndim() == 1 && bias.dim(0) == F, "conv2d bias must have one entry per filter");
    require(k <= H + 2 * pad && k <= W + 2 * pad, "conv2d kernel exceeds padded input extent");
    if ((H + 2 * pad - k) % stride != 0 || (W + 2 * pad - k) % stride != 0)
        throw ConfigError("conv2d output extent is not integral for stride " + std::to_string(stride));
    const int OH = (H + 2 * pad - k) / stride + 1;
    const int OW = (W + 2 * pad - k) / stride + 1;
    const int CKK = C * k * k;
    const int64_t plane = static_cast<int64_t>(OH) * OW;

    Tensor out = Tensor::zeros({B, F, OH, OW});
    std::vector<double> cols(static_cast<size_t>(CKK) * plane);
    MapConst Wm(weight.data(), F, CKK);
    for (int b = 0; b < B; ++b) {
        im2col(input.data() + static_cast<int64_t>(b) * C * H * W, C, H, W, k, stride, pad, OH, OW, cols.data());
        MapConst Cm(cols.data(), CKK, plane);
        MapMat Ym(out.data() + static_cast<int64_t>(b) * F * plane, F, plane);
        Ym.noalias() = Wm * Cm;
        for (int f = 0; f < F; ++f) Ym.row(f).array() += bias.data()[f];
    }

    if (wants_grad(tape, {&input, &weight, &bias})) {
        out.set_requires_grad(true);
        Tensor x = input, w = weight, bs = bias, y = out;
        tape->record(out, [x, w, bs, y, B, C, H, W, F, k, stride, pad, OH, OW, CKK, plane]() mutable {
            const double* dy = y.grad();
            std::vector<double> cols(static_cast<size_t>(CKK) * plane);
            std::vector<double> dcols;
            MapConst Wm(w.data(), F, CKK);
            for (int b = 0; b < B; ++b) {
                MapConst dYm(dy + static_cast<int64_t>(b) * F * plane, F, plane);
                if (w.requires_grad() || bs.requires_grad()) {
                    im2col(x.data() + static_cast<int64_t>(b) * C * H * W, C, H, W, k, stride, pad, OH, OW, cols.data());
                    MapConst Cm(cols.data(), CKK, plane);
                    if (w.requires_grad()) {
                        MapMat dWm(w.grad(), F, CKK);
                        dWm.noalias() += dYm * Cm.transpose();
                    }
                    if (bs.requires_grad()) {
                        // explicit order: Eigen reductions vary with buffer alignment
                        double* db = bs.grad();
                        const double* dyb = dy + static_cast<int64_t>(b) * F * plane;
                        for (int f = 0; f < F; ++f) {
                            double s = 0.0;
                            for (int64_t i = 0; i < plane; ++i) s += dyb[f * plane + i];
                            db[f] += s;
                        }
                    }
                }
                if (x.requires_grad()) {
                    dcols.resize(static_cast<size_t>(CKK) * plane);
                    MapMat dCm(dcols.data(), CKK, plane);
                    dCm.noalias() = Wm.transpose() * dYm;
                    col2im_add(dcols.data(), C, H, W, k, stride, pad, OH, OW,
                               x.grad() + static_cast<int64_t>(b) * C * H * W);
                }
            }
        });
    }
    return out;
}

std::pair<Tensor, PoolIndices> maxpool_with_indices(Tape* tape, const Tensor& input, int window) {
    require_4d(input, "maxpool input");
    require(window >= 1 && window * window <= 256, "maxpool window must be in [1,16]");
    const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (H % window != 0 || W % window != 0)
        throw ConfigError("maxpool extent " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by window " +
                          std::to_string(window));
    const int OH = H / window, OW = W / window;

    Tensor out = Tensor::zeros({B, C, OH, OW});
    PoolIndices idx;
    idx.window = window;
    idx.out_shape = {B, C, OH, OW};
    idx.index.resize(static_cast<size_t>(B) * C * OH * OW);

    const double* x = input.data();
    double* y = out.data();
    int64_t o = 0;
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            const double* plane = x + (static_cast<int64_t>(b) * C + c) * H * W;
            for (int oy = 0; oy < OH; ++oy) {
                for (int ox = 0; ox < OW; ++ox, ++o) {
                    double best = -std::numeric_limits<double>::infinity();
                    int best_i = 0;
                    for (int wy = 0; wy < window; ++wy) {
                        const double* row = plane + static_cast<int64_t>(oy * window + wy) * W + ox * window;
                        for (int wx = 0; wx < window; ++wx) {
                            // strict > keeps the smallest row-major index on ties
                            if (row[wx] > best) {
                                best = row[wx];
                                best_i = wy * window + wx;
                            }
                        }
                    }
                    y[o] = best;
                    idx.index[static_cast<size_t>(o)] = static_cast<uint8_t>(best_i);
                }
            }
        }
    }

    if (wants_grad(tape, {&input})) {
        out.set_requires_grad(true);
        Tensor x_t = input, y_t = out;
        PoolIndices saved = idx;
        tape->record(out, [x_t, y_t, saved, B, C, H, W, OH, OW]() mutable {
            const double* dy = y_t.grad();
            double* dx = x_t.grad();
            const int window = saved.window;
            int64_t o = 0;
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    double* plane = dx + (static_cast<int64_t>(b) * C + c) * H * W;
                    for (int oy = 0; oy < OH; ++oy)
                        for (int ox = 0; ox < OW; ++ox, ++o) {
                            int i = saved.index[static_cast<size_t>(o)];
                            int wy = i / window, wx = i % window;
                            plane[static_cast<int64_t>(oy * window + wy) * W + ox * window + wx] += dy[o];
                        }
                }
        });
    }
    return {out, idx};
}

Tensor unpool_with_indices(Tape* tape, const Tensor& input, const PoolIndices& indices) {
    require_4d(input, "unpool input");
    require(indices.window >= 1, "unpool needs recorded indices");
    require(input.shape() == indices.out_shape,
            "unpool input shape " + shape_str(input.shape()) + " does not match recorded pool shape " + shape_str(indices.out_shape));
    const int B = input.dim(0), C = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int window = indices.window;
    const int H = h * window, W = w * window;

    Tensor out = Tensor::zeros({B, C, H, W});
    const double* x = input.data();
    double* y = out.data();
    int64_t o = 0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            double* plane = y + (static_cast<int64_t>(b) * C + c) * H * W;
            for (int oy = 0; oy < h; ++oy)
                for (int ox = 0; ox < w; ++ox, ++o) {
                    int i = indices.index[static_cast<size_t>(o)];
                    int wy = i / window, wx = i % window;
                    plane[static_cast<int64_t>(oy * window + wy) * W + ox * window + wx] = x[o];
                }
        }

    if (wants_grad(tape, {&input})) {
        out.set_requires_grad(true);
        Tensor x_t = input, y_t = out;
        PoolIndices saved = indices;
        tape->record(out, [x_t, y_t, saved, B, C, h, w, H, W]() mutable {
            const double* dy = y_t.grad();
            double* dx = x_t.grad();
            const int window = saved.window;
            int64_t o = 0;
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const double* plane = dy + (static_cast<int64_t>(b) * C + c) * H * W;
                    for (int oy = 0; oy < h; ++oy)
                        for (int ox = 0; ox < w; ++ox, ++o) {
                            int i = saved.index[static_cast<size_t>(o)];
                            int wy = i / window, wx = i % window;
                            dx[o] += plane[static_cast<int64_t>(oy * window + wy) * W + ox * window + wx];
                        }
                }
        });
    }
    return out;
}

Tensor avgpool(Tape* tape, const Tensor& input, int window) {
    require_4d(input, "avgpool input");
    const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (H % window != 0 || W % window != 0) throw ConfigError("avgpool extent not divisible by window");
    const int OH = H / window, OW = W / window;
    const double inv = 1.0 / (window * window);

    Tensor out = Tensor::zeros({B, C, OH, OW});
    const double* x = input.data();
    double* y = out.data();
    int64_t o = 0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* plane = x + (static_cast<int64_t>(b) * C + c) * H * W;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox, ++o) {
                    double s = 0.0;
                    for (int wy = 0; wy < window; ++wy) {
                        const double* row = plane + static_cast<int64_t>(oy * window + wy) * W + ox * window;
                        for (int wx = 0; wx < window; ++wx) s += row[wx];
                    }
                    y[o] = s * inv;
                }
        }

    if (wants_grad(tape, {&input})) {
        out.set_requires_grad(true);
        Tensor x_t = input, y_t = out;
        tape->record(out, [x_t, y_t, B, C, H, W, OH, OW, window, inv]() mutable {
            const double* dy = y_t.grad();
            double* dx = x_t.grad();
            int64_t o = 0;
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    double* plane = dx + (static_cast<int64_t>(b) * C + c) * H * W;
                    for (int oy = 0; oy < OH; ++oy)
                        for (int ox = 0; ox < OW; ++ox, ++o) {
                            double g = dy[o] * inv;
                            for (int wy = 0; wy < window; ++wy) {
                                double* row = plane + static_cast<int64_t>(oy * window + wy) * W + ox * window;
                                for (int wx = 0; wx < window; ++wx) row[wx] += g;
                            }
                        }
                }
        });
    }
    return out;
}

Tensor activation(Tape* tape, const Tensor& input, Act kind) {
    Tensor out = Tensor::zeros(input.shape());
    const double* x = input.data();
    double* y = out.data();
    const int64_t n = input.numel();
    switch (kind) {
        case Act::Relu:
            for (int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
            break;
        case Act::Sigmoid:
            for (int64_t i = 0; i < n; ++i) {
                double v = x[i];
                y[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
            }
            break;
        case Act::Tanh:
            for (int64_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
            break;
    }

    if (wants_grad(tape, {&input})) {
        out.set_requires_grad(true);
        Tensor x_t = input, y_t = out;
        tape->record(out, [x_t, y_t, kind, n]() mutable {
            const double* dy = y_t.grad();
            const double* yv = y_t.data();
            const double* xv = x_t.data();
            double* dx = x_t.grad();
            switch (kind) {
                case Act::Relu:
                    for (int64_t i = 0; i < n; ++i) dx[i] += xv[i] > 0.0 ? dy[i] : 0.0;
                    break;
                case Act::Sigmoid:
                    for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * yv[i] * (1.0 - yv[i]);
                    break;
                case Act::Tanh:
                    for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * (1.0 - yv[i] * yv[i]);
                    break;
            }
        });
    }
    return out;
}

Tensor linear(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
    require(input.defined() && input.ndim() == 2, "linear input must be [B,D]");
    require(weight.defined() && weight.ndim() == 2, "linear weight must be [E,D]");
    const int B = input.dim(0), D = input.dim(1), E = weight.dim(0);
    require(weight.dim(1) == D, "linear inner dimensions disagree: input D=" + std::to_string(D) + ", weight D=" +
                                    std::to_string(weight.dim(1)));
    if (bias.defined()) require(bias.ndim() == 1 && bias.dim(0) == E, "linear bias must be [E]");

    Tensor out = Tensor::zeros({B, E});
    MapConst Xm(input.data(), B, D);
    MapConst Wm(weight.data(), E, D);
    MapMat Ym(out.data(), B, E);
    Ym.noalias() = Xm * Wm.transpose();
    if (bias.defined())
        for (int b = 0; b < B; ++b) Ym.row(b) += MapConst(bias.data(), 1, E);

    if (wants_grad(tape, {&input, &weight, &bias})) {
        out.set_requires_grad(true);
        Tensor x = input, w = weight, bs = bias, y = out;
        tape->record(out, [x, w, bs, y, B, D, E]() mutable {
            MapConst dYm(y.grad(), B, E);
            if (x.requires_grad()) {
                MapMat dXm(x.grad(), B, D);
                dXm.noalias() += dYm * MapConst(w.data(), E, D);
            }
            if (w.requires_grad()) {
                MapMat dWm(w.grad(), E, D);
                dWm.noalias() += dYm.transpose() * MapConst(x.data(), B, D);
            }
            if (bs.defined() && bs.requires_grad()) {
                double* db = bs.grad();
                const double* dyv = y.grad();
                for (int e = 0; e < E; ++e) {
                    double s = 0.0;
                    for (int b2 = 0; b2 < B; ++b2) s += dyv[static_cast<int64_t>(b2) * E + e];
                    db[e] += s;
                }
            }
        });
    }
    return out;
}

Tensor batchnorm2d(Tape* tape, const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps) {
    require_4d(input, "batchnorm input");
    const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    require(gamma.defined() && gamma.numel() == C && beta.defined() && beta.numel() == C,
            "batchnorm gamma/beta must have one entry per channel");
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t n_per_c = static_cast<int64_t>(B) * plane;

    std::vector<double> mean(C, 0.0), inv_std(C, 0.0);
    const double* x = input.data();
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int b = 0; b < B; ++b) {
            const double* p = x + (static_cast<int64_t>(b) * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) s += p[i];
        }
        mean[c] = s / static_cast<double>(n_per_c);
        double v = 0.0;
        for (int b = 0; b < B; ++b) {
            const double* p = x + (static_cast<int64_t>(b) * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                double d = p[i] - mean[c];
                v += d * d;
            }
        }
        inv_std[c] = 1.0 / std::sqrt(v / static_cast<double>(n_per_c) + eps);  // biased variance
    }

    Tensor out = Tensor::zeros(input.shape());
    double* y = out.data();
    for (int c = 0; c < C; ++c) {
        const double g = gamma.data()[c], bt = beta.data()[c], m = mean[c], inv = inv_std[c];
        for (int b = 0; b < B; ++b) {
            const double* p = x + (static_cast<int64_t>(b) * C + c) * plane;
            double* q = y + (static_cast<int64_t>(b) * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) q[i] = g * (p[i] - m) * inv + bt;
        }
    }

    if (wants_grad(tape, {&input, &gamma, &beta})) {
        out.set_requires_grad(true);
        Tensor x_t = input, g_t = gamma, b_t = beta, y_t = out;
        tape->record(out, [x_t, g_t, b_t, y_t, mean, inv_std, B, C, plane, n_per_c]() mutable {
            const double* dy = y_t.grad();
            const double* xv = x_t.data();
            const double inv_n = 1.0 / static_cast<double>(n_per_c);
            for (int c = 0; c < C; ++c) {
                const double m = mean[c], inv = inv_std[c], g = g_t.data()[c];
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int b = 0; b < B; ++b) {
                    const double* p = xv + (static_cast<int64_t>(b) * C + c) * plane;
                    const double* d = dy + (static_cast<int64_t>(b) * C + c) * plane;
                    for (int64_t i = 0; i < plane; ++i) {
                        sum_dy += d[i];
                        sum_dy_xhat += d[i] * (p[i] - m) * inv;
                    }
                }
                if (g_t.requires_grad()) g_t.grad()[c] += sum_dy_xhat;
                if (b_t.requires_grad()) b_t.grad()[c] += sum_dy;
                if (x_t.requires_grad()) {
                    double* dx = x_t.grad();
                    for (int b = 0; b < B; ++b) {
                        const double* p = xv + (static_cast<int64_t>(b) * C + c) * plane;
                        const double* d = dy + (static_cast<int64_t>(b) * C + c) * plane;
                        double* q = dx + (static_cast<int64_t>(b) * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) {
                            double xhat = (p[i] - m) * inv;
                            q[i] += g * inv * (d[i] - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor dropout(Tape* tape, const Tensor& input, double rate, Mode mode, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(rate));
    if (mode == Mode::Eval || rate == 0.0) {
        Tensor out = input.detached_copy();
        if (wants_grad(tape, {&input})) {
            out.set_requires_grad(true);
            Tensor x_t = input, y_t = out;
            tape->record(out, [x_t, y_t]() mutable {
                const double* dy = y_t.grad();
                double* dx = x_t.grad();
                for (int64_t i = 0; i < x_t.numel(); ++i) dx[i] += dy[i];
            });
        }
        return out;
    }

    const int64_t n = input.numel();
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<uint8_t> keep(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) keep[static_cast<size_t>(i)] = rng.uniform() >= rate ? 1 : 0;

    Tensor out = Tensor::zeros(input.shape());
    const double* x = input.data();
    double* y = out.data();
    for (int64_t i = 0; i < n; ++i) y[i] = keep[static_cast<size_t>(i)] ? x[i] * keep_scale : 0.0;

    if (wants_grad(tape, {&input})) {
        out.set_requires_grad(true);
        Tensor x_t = input, y_t = out;
        tape->record(out, [x_t, y_t, keep = std::move(keep), keep_scale, n]() mutable {
            const double* dy = y_t.grad();
            double* dx = x_t.grad();
            for (int64_t i = 0; i < n; ++i)
                if (keep[static_cast<size_t>(i)]) dx[i] += dy[i] * keep_scale;
        });
    }
    return out;
}

Tensor softmax_channels(Tape* tape, const Tensor& logits) {
    require_4d(logits, "softmax input");
    const int B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    require(C >= 2, "softmax needs at least two channels");
    const int64_t plane = static_cast<int64_t>(H) * W;

    Tensor out = Tensor::zeros(logits.shape());
    const double* x = logits.data();
    double* y = out.data();
    for (int b = 0; b < B; ++b) {
        const double* xb = x + static_cast<int64_t>(b) * C * plane;
        double* yb = y + static_cast<int64_t>(b) * C * plane;
        for (int64_t i = 0; i < plane; ++i) {
            double mx = xb[i];
            for (int c = 1; c < C; ++c) mx = std::max(mx, xb[c * plane + i]);
            double s = 0.0;
            for (int c = 0; c < C; ++c) {
                double e = std::exp(xb[c * plane + i] - mx);
                yb[c * plane + i] = e;
                s += e;
            }
            double inv = 1.0 / s;
            for (int c = 0; c < C; ++c) yb[c * plane + i] *= inv;
        }
    }

    if (wants_grad(tape, {&logits})) {
        out.set_requires_grad(true);
        Tensor x_t = logits, y_t = out;
        tape->record(out, [x_t, y_t, B, C, plane]() mutable {
            const double* dy = y_t.grad();
            const double* p = y_t.data();
            double* dx = x_t.grad();
            for (int b = 0; b < B; ++b) {
                const double* pb = p + static_cast<int64_t>(b) * C * plane;
                const double* db = dy + static_cast<int64_t>(b) * C * plane;
                double* qb = dx + static_cast<int64_t>(b) * C * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    double dot = 0.0;
                    for (int c = 0; c < C; ++c) dot += pb[c * plane + i] * db[c * plane + i];
                    for (int c = 0; c < C; ++c) qb[c * plane + i] += pb[c * plane + i] * (db[c * plane + i] - dot);
                }
            }
        });
    }
    return out;
}

Tensor pixel_cross_entropy(Tape* tape, const Tensor& probs, const LabelMap& target) {
    require_4d(probs, "cross-entropy probs");
    const int B = probs.dim(0), C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
    require(target.batch == B && target.height == H && target.width == W,
            "cross-entropy target grid does not match probability map");
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t n = static_cast<int64_t>(B) * plane;
    constexpr double kClampLo = 1e-12;

    const double* p = probs.data();
    double loss = 0.0;
    for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < plane; ++i) {
            int32_t l = target.values[static_cast<size_t>(b) * plane + i];
            if (l < 0 || l >= C) throw DataError("cross-entropy label " + std::to_string(l) + " outside {0.." + std::to_string(C - 1) + "}");
            double v = p[(static_cast<int64_t>(b) * C + l) * plane + i];
            loss -= std::log(std::clamp(v, kClampLo, 1.0));
        }
    Tensor out = Tensor::scalar(loss / static_cast<double>(n));

    if (wants_grad(tape, {&probs})) {
        out.set_requires_grad(true);
        Tensor p_t = probs, y_t = out;
        LabelMap tgt = target;
        tape->record(out, [p_t, y_t, tgt, B, C, plane, n]() mutable {
            const double g0 = y_t.grad()[0] / static_cast<double>(n);
            const double* pv = p_t.data();
            double* dp = p_t.grad();
            for (int b = 0; b < B; ++b)
                for (int64_t i = 0; i < plane; ++i) {
                    int32_t l = tgt.values[static_cast<size_t>(b) * plane + i];
                    int64_t off = (static_cast<int64_t>(b) * C + l) * plane + i;
                    double v = pv[off];
                    // clamp-consistent: no gradient where the clamp is active
                    if (v > kClampLo && v <= 1.0) dp[off] -= g0 / v;
                }
        });
    }
    return out;
}

Tensor euclidean_loss(Tape* tape, const Tensor& pred, const Tensor& target) {
    require(pred.defined() && target.defined() && pred.shape() == target.shape(),
            "euclidean loss requires identical shapes, got " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    const int B = pred.dim(0);
    const int64_t n = pred.numel();
    const double* a = pred.data();
    const double* b = target.data();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = a[i] - b[i];
        loss += 0.5 * d * d;
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(B));

    if (wants_grad(tape, {&pred, &target})) {
        out.set_requires_grad(true);
        Tensor p_t = pred, t_t = target, y_t = out;
        tape->record(out, [p_t, t_t, y_t, B, n]() mutable {
            const double g0 = y_t.grad()[0] / static_cast<double>(B);
            const double* a = p_t.data();
            const double* b = t_t.data();
            if (p_t.requires_grad()) {
                double* dp = p_t.grad();
                for (int64_t i = 0; i < n; ++i) dp[i] += g0 * (a[i] - b[i]);
            }
            if (t_t.requires_grad()) {
                double* dt = t_t.grad();
                for (int64_t i = 0; i < n; ++i) dt[i] -= g0 * (a[i] - b[i]);
            }
        });
    }
    return out;
}

Tensor concat_channels(Tape* tape, const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat needs at least one operand");
    require_4d(parts[0], "concat input");
    const int B = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
    int C = 0;
    for (const Tensor& t : parts) {
        require_4d(t, "concat input");
        require(t.dim(0) == B && t.dim(2) == H && t.dim(3) == W,
                "concat operands must share batch and spatial extents");
        C += t.dim(1);
    }
    const int64_t plane = static_cast<int64_t>(H) * W;

    Tensor out = Tensor::zeros({B, C, H, W});
    double* y = out.data();
    for (int b = 0; b < B; ++b) {
        int64_t coff = 0;
        for (const Tensor& t : parts) {
            const int tc = t.dim(1);
            std::memcpy(y + (static_cast<int64_t>(b) * C + coff) * plane,
                        t.data() + static_cast<int64_t>(b) * tc * plane, sizeof(double) * tc * plane);
            coff += tc;
        }
    }

    bool rec = false;
    if (tape)
        for (const Tensor& t : parts) rec = rec || t.requires_grad();
    if (rec) {
        out.set_requires_grad(true);
        Tensor y_t = out;
        std::vector<Tensor> ins = parts;
        tape->record(out, [ins, y_t, B, C, plane]() mutable {
            const double* dy = y_t.grad();
            for (int b = 0; b < B; ++b) {
                int64_t coff = 0;
                for (Tensor& t : ins) {
                    const int tc = t.dim(1);
                    if (t.requires_grad()) {
                        double* dx = t.grad() + static_cast<int64_t>(b) * tc * plane;
                        const double* src = dy + (static_cast<int64_t>(b) * C + coff) * plane;
                        for (int64_t i = 0; i < tc * plane; ++i) dx[i] += src[i];
                    }
                    coff += tc;
                }
            }
        });
    }
    return out;
}

Tensor slice_channels(Tape* tape, const Tensor& input, int first, int count) {
    require_4d(input, "slice input");
    const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    require(first >= 0 && count >= 1 && first + count <= C, "channel slice out of range");
    const int64_t plane = static_cast<int64_t>(H) * W;

    Tensor out = Tensor::zeros({B, count, H, W});
    for (int b = 0; b < B; ++b)
        std::memcpy(out.data() + static_cast<int64_t>(b) * count * plane,
                    input.data() + (static_cast<int64_t>(b) * C + first) * plane, sizeof(double) * count * plane);

    if (wants_grad(tape, {&input})) {
        out.set_requires_grad(true);
        Tensor x_t = input, y_t = out;
        tape->record(out, [x_t, y_t, B, C, first, count, plane]() mutable {
            const double* dy = y_t.grad();
            double* dx = x_t.grad();
            for (int b = 0; b < B; ++b) {
                double* dst = dx + (static_cast<int64_t>(b) * C + first) * plane;
                const double* src = dy + static_cast<int64_t>(b) * count * plane;
                for (int64_t i = 0; i < count * plane; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add requires identical shapes");
    Tensor out = Tensor::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor a_t = a, b_t = b, y_t = out;
        tape->record(out, [a_t, b_t, y_t, n]() mutable {
            const double* dy = y_t.grad();
            if (a_t.requires_grad()) {
                double* da = a_t.grad();
                for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
            }
            if (b_t.requires_grad()) {
                double* db = b_t.grad();
                for (int64_t i = 0; i < n; ++i) db[i] += dy[i];
            }
        });
    }
    return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul requires identical shapes");
    Tensor out = Tensor::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor a_t = a, b_t = b, y_t = out;
        tape->record(out, [a_t, b_t, y_t, n]() mutable {
            const double* dy = y_t.grad();
            if (a_t.requires_grad()) {
                double* da = a_t.grad();
                const double* bv = b_t.data();
                for (int64_t i = 0; i < n; ++i) da[i] += dy[i] * bv[i];
            }
            if (b_t.requires_grad()) {
                double* db = b_t.grad();
                const double* av = a_t.data();
                for (int64_t i = 0; i < n; ++i) db[i] += dy[i] * av[i];
            }
        });
    }
    return out;
}

Tensor scale(Tape* tape, const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    if (wants_grad(tape, {&a})) {
        out.set_requires_grad(true);
        Tensor a_t = a, y_t = out;
        tape->record(out, [a_t, y_t, s, n]() mutable {
            const double* dy = y_t.grad();
            double* da = a_t.grad();
            for (int64_t i = 0; i < n; ++i) da[i] += dy[i] * s;
        });
    }
    return out;
}

Tensor sum(Tape* tape, const Tensor& a) {
    double s = 0.0;
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) s += a.data()[i];
    Tensor out = Tensor::scalar(s);
    if (wants_grad(tape, {&a})) {
        out.set_requires_grad(true);
        Tensor a_t = a, y_t = out;
        tape->record(out, [a_t, y_t, n]() mutable {
            const double g = y_t.grad()[0];
            double* da = a_t.grad();
            for (int64_t i = 0; i < n; ++i) da[i] += g;
        });
    }
    return out;
}

Tensor reshape(Tape* tape, const Tensor& a, Shape target) {
    require(shape_numel(target) == a.numel(), "reshape must preserve element count");
    Tensor out = Tensor::from(std::move(target), a.vec());
    if (wants_grad(tape, {&a})) {
        out.set_requires_grad(true);
        Tensor a_t = a, y_t = out;
        tape->record(out, [a_t, y_t]() mutable {
            const double* dy = y_t.grad();
            double* da = a_t.grad();
            for (int64_t i = 0; i < a_t.numel(); ++i) da[i] += dy[i];
        });
    }
    return out;
}

Tensor slice_cols(Tape* tape, const Tensor& a, int first, int count) {
    require(a.defined() && a.ndim() == 2, "slice_cols input must be [B,D]");
    const int B = a.dim(0), D = a.dim(1);
    require(first >= 0 && count >= 1 && first + count <= D, "column slice out of range");
    Tensor out = Tensor::zeros({B, count});
    for (int b = 0; b < B; ++b)
        std::memcpy(out.data() + static_cast<int64_t>(b) * count, a.data() + static_cast<int64_t>(b) * D + first,
                    sizeof(double) * count);
    if (wants_grad(tape, {&a})) {
        out.set_requires_grad(true);
        Tensor a_t = a, y_t = out;
        tape->record(out, [a_t, y_t, B, D, first, count]() mutable {
            const double* dy = y_t.grad();
            double* da = a_t.grad();
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < count; ++c) da[static_cast<int64_t>(b) * D + first + c] += dy[static_cast<int64_t>(b) * count + c];
        });
    }
    return out;
}

Tensor detach(const Tensor& a) { return a.detached_copy(); }

}  // namespace redec

#include "redec/model.hpp"

#include <cmath>

namespace redec {

namespace {

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

Tensor gaussian(Shape shape, Rng& rng, double std) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * std;
    return t;
}

}  // namespace

void NetConfig::validate() const {
    if (!is_pow2(input_size)) throw ConfigError("input_size must be a power of two");
    if (stage_channels.empty() || convs_per_stage < 1) throw ConfigError("encoder needs at least one stage and one conv per stage");
    if (bottleneck_side() != 4) throw ConfigError("input_size / 2^stages must equal 4 (got bottleneck side " +
                                                  std::to_string(bottleneck_side()) + ")");
    if (stage_channels.back() != 2 * bottleneck_channels)
        throw ConfigError("last stage width must equal twice the per-code bottleneck width");
    if (landmark_count < 1 || identity_count < 2 || spatial_steps < 1 || temporal_steps < 1)
        throw ConfigError("require L >= 1, N >= 2, K >= 1, T >= 1");
    if (static_cast<int>(feedback_sizes.size()) != spatial_steps)
        throw ConfigError("feedback_sizes must list one square size per spatial step");
    for (int s : feedback_sizes)
        if (s < 1 || s % 2 == 0) throw ConfigError("feedback square sizes must be odd and positive");
    if (lstm_hidden < 1) throw ConfigError("lstm_hidden must be positive");
    const int R = static_cast<int>(regressor_channels.size());
    if (R < 1) throw ConfigError("regressor needs at least one stage");
    if (input_size >> (R - 1) < 1) throw ConfigError("too many regressor stages for the input size");
    if (num_stages() - 1 > R - 1) throw ConfigError("regressor too shallow to receive the deep encoder skip");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must lie in [0,1)");
}

namespace {

struct ConvSpec {
    int in = 0, out = 0;
    bool bn = true;
};

std::vector<ConvSpec> encoder_specs(const NetConfig& cfg) {
    std::vector<ConvSpec> specs;
    int prev = 4;  // 3 image channels + 1 label channel
    for (int s = 0; s < cfg.num_stages(); ++s) {
        for (int j = 0; j < cfg.convs_per_stage; ++j) {
            specs.push_back({j == 0 ? prev : cfg.stage_channels[s], cfg.stage_channels[s], true});
        }
        prev = cfg.stage_channels[s];
    }
    return specs;
}

std::vector<ConvSpec> decoder_specs(const NetConfig& cfg) {
    std::vector<ConvSpec> specs;
    for (int s = cfg.num_stages() - 1; s >= 0; --s) {
        const int ch = cfg.stage_channels[s];
        for (int j = 0; j < cfg.convs_per_stage; ++j) {
            const bool last_of_stage = (j == cfg.convs_per_stage - 1);
            if (!last_of_stage) {
                specs.push_back({ch, ch, true});
            } else if (s > 0) {
                specs.push_back({ch, cfg.stage_channels[s - 1], true});
            } else {
                specs.push_back({ch, cfg.response_channels(), false});  // logits, no BN
            }
        }
    }
    return specs;
}

// Channel count entering regressor stage j, including encoder skips.
std::vector<ConvSpec> regressor_specs(const NetConfig& cfg) {
    std::vector<ConvSpec> specs;
    const int S = cfg.num_stages();
    const int R = static_cast<int>(cfg.regressor_channels.size());
    for (int j = 0; j < R; ++j) {
        int in = (j == 0) ? cfg.response_channels() : cfg.regressor_channels[j - 1];
        if (j == 1 && S >= 2) in += cfg.stage_channels[1];                    // shallow skip
        if (j == S - 1 && S >= 3 && j < R) in += cfg.stage_channels[S - 1];   // deep skip
        specs.push_back({in, cfg.regressor_channels[j], true});
    }
    return specs;
}

int64_t conv_params(const ConvSpec& s) {
    return static_cast<int64_t>(s.out) * s.in * 9 + s.out + (s.bn ? 2 * s.out : 0);
}

}  // namespace

int64_t parameter_count(const NetConfig& cfg) {
    cfg.validate();
    int64_t n = 0;
    for (const ConvSpec& s : encoder_specs(cfg)) n += conv_params(s);
    for (const ConvSpec& s : decoder_specs(cfg)) n += conv_params(s);
    const int64_t Cb = cfg.bottleneck_channels, H = cfg.lstm_hidden;
    n += 4 * H * (Cb + H) + 4 * H;  // lstm gates
    n += Cb * H + Cb;               // lstm output projection
    n += static_cast<int64_t>(cfg.identity_count) * Cb + cfg.identity_count;
    for (const ConvSpec& s : regressor_specs(cfg)) n += conv_params(s);
    const int64_t out2l = 2 * cfg.landmark_count;
    n += out2l * cfg.regressor_channels.back() + out2l;
    return n;
}

ModelParams ModelParams::create(const NetConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    Rng rng(mix_seed(seed, 0x7061726d));

    auto reg = [&p](const std::string& name, Tensor t) {
        p.names.push_back(name);
        p.trainables.push_back(t);
        return t;
    };
    auto make_conv = [&](const std::string& prefix, const ConvSpec& s) {
        ConvBnParams c;
        c.w = reg(prefix + ".w", gaussian({s.out, s.in, 3, 3}, rng, cfg.init_std));
        c.b = reg(prefix + ".b", Tensor::zeros({s.out}, true));
        c.has_bn = s.bn;
        if (s.bn) {
            c.gamma = reg(prefix + ".bn_g", Tensor::full({s.out}, 1.0, true));
            c.beta = reg(prefix + ".bn_b", Tensor::zeros({s.out}, true));
        }
        return c;
    };

    int i = 0;
    for (const ConvSpec& s : encoder_specs(cfg)) p.encoder.push_back(make_conv("enc" + std::to_string(i++), s));
    i = 0;
    for (const ConvSpec& s : decoder_specs(cfg)) p.decoder.push_back(make_conv("dec" + std::to_string(i++), s));

    const int Cb = cfg.bottleneck_channels, H = cfg.lstm_hidden;
    p.lstm.wx = reg("lstm.wx", gaussian({4 * H, Cb}, rng, cfg.init_std));
    p.lstm.wh = reg("lstm.wh", gaussian({4 * H, H}, rng, cfg.init_std));
    p.lstm.b = reg("lstm.b", Tensor::zeros({4 * H}, true));
    p.lstm.out.w = reg("lstm_out.w", gaussian({Cb, H}, rng, cfg.init_std));
    p.lstm.out.b = reg("lstm_out.b", Tensor::zeros({Cb}, true));

    p.classifier.w = reg("cls.w", gaussian({cfg.identity_count, Cb}, rng, cfg.init_std));
    p.classifier.b = reg("cls.b", Tensor::zeros({cfg.identity_count}, true));

    i = 0;
    for (const ConvSpec& s : regressor_specs(cfg)) p.regressor.push_back(make_conv("reg" + std::to_string(i++), s));
    const int out2l = 2 * cfg.landmark_count;
    p.regressor_fc.w = reg("reg_fc.w", gaussian({out2l, cfg.regressor_channels.back()}, rng, cfg.init_std));
    p.regressor_fc.b = reg("reg_fc.b", Tensor::zeros({out2l}, true));

    p.mean_shape = Tensor::zeros({out2l});
    return p;
}

Tensor ModelParams::find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return trainables[i];
    throw ContractError("unknown parameter name: " + name);
}

void ModelParams::check_finite() const {
    for (size_t i = 0; i < trainables.size(); ++i) trainables[i].check_finite(names[i]);
}

namespace {

Tensor conv_bn_relu(Tape* tape, const Tensor& x, const ConvBnParams& c, double eps) {
    Tensor h = conv2d(tape, x, c.w, c.b, 1, 1);
    if (c.has_bn) h = batchnorm2d(tape, h, c.gamma, c.beta, eps);
    return activation(tape, h, Act::Relu);
}

}  // namespace

EncodeOutput encode(Tape* tape, const Tensor& image, const LabelMap& label_map, const ModelParams& params) {
    const NetConfig& cfg = params.cfg;
    if (image.ndim() != 4 || image.dim(1) != 3 || image.dim(2) != cfg.input_size || image.dim(3) != cfg.input_size)
        throw ConfigError("encode expects a [B,3," + std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) +
                          "] image, got " + shape_str(image.shape()));
    const int B = image.dim(0);
    if (label_map.batch != B || label_map.height != cfg.input_size || label_map.width != cfg.input_size)
        throw ConfigError("encode label map does not match image extents");
    label_map.check_range(cfg.landmark_count);

    // label channel scaled to [0,1]
    Tensor zch = Tensor::zeros({B, 1, cfg.input_size, cfg.input_size});
    const double inv_l = 1.0 / static_cast<double>(cfg.landmark_count);
    for (size_t i = 0; i < label_map.values.size(); ++i) zch.data()[i] = label_map.values[i] * inv_l;

    Tensor h = concat_channels(tape, {image, zch});
    EncodeOutput out;
    const int S = cfg.num_stages();
    int conv_i = 0;
    for (int s = 0; s < S; ++s) {
        for (int j = 0; j < cfg.convs_per_stage; ++j) h = conv_bn_relu(tape, h, params.encoder[conv_i++], cfg.bn_eps);
        if (s == 1) out.skip_shallow = h;
        if (s == S - 1) out.skip_deep = h;
        auto [pooled, idx] = maxpool_with_indices(tape, h, 2);
        h = pooled;
        out.pool_indices.push_back(std::move(idx));
    }
    if (S == 1) out.skip_shallow = out.skip_deep;

    const int Cb = cfg.bottleneck_channels;
    out.code.c_id = slice_channels(tape, h, 0, Cb);
    out.code.c_pe = slice_channels(tape, h, Cb, Cb);
    return out;
}

Tensor decode(Tape* tape, const BottleneckCode& code, const std::vector<PoolIndices>& pool_indices,
              const ModelParams& params) {
    const NetConfig& cfg = params.cfg;
    const int S = cfg.num_stages();
    if (static_cast<int>(pool_indices.size()) != S)
        throw ContractError("decode needs one pooling-index record per stage, got " + std::to_string(pool_indices.size()));
    const int side = cfg.bottleneck_side();
    if (code.c_id.ndim() != 4 || code.c_pe.ndim() != 4 || code.c_id.shape() != code.c_pe.shape() ||
        code.c_id.dim(1) != cfg.bottleneck_channels || code.c_id.dim(2) != side || code.c_id.dim(3) != side)
        throw ContractError("decode bottleneck codes have unexpected shape");

    Tensor h = concat_channels(tape, {code.c_id, code.c_pe});
    int conv_i = 0;
    for (int s = S - 1; s >= 0; --s) {
        h = unpool_with_indices(tape, h, pool_indices[static_cast<size_t>(s)]);
        for (int j = 0; j < cfg.convs_per_stage; ++j) {
            const ConvBnParams& c = params.decoder[conv_i++];
            if (c.has_bn) {
                h = conv_bn_relu(tape, h, c, cfg.bn_eps);
            } else {
                h = conv2d(tape, h, c.w, c.b, 1, 1);  // final projection to logits
            }
        }
    }
    return h;
}

Tensor classify_identity(Tape* tape, const Tensor& c_id, const ModelParams& params, Mode mode, Rng& dropout_rng) {
    const NetConfig& cfg = params.cfg;
    const int side = c_id.dim(2);
    Tensor h = avgpool(tape, c_id, side);
    h = reshape(tape, h, {c_id.dim(0), c_id.dim(1)});
    h = dropout(tape, h, cfg.dropout_rate, mode, dropout_rng);
    return linear(tape, h, params.classifier.w, params.classifier.b);
}

Tensor regress_shape(Tape* tape, const Tensor& response_probs, const Tensor& skip_shallow, const Tensor& skip_deep,
                     const ModelParams& params, Mode mode, Rng& dropout_rng) {
    const NetConfig& cfg = params.cfg;
    if (response_probs.ndim() != 4 || response_probs.dim(1) != cfg.response_channels() ||
        response_probs.dim(2) != cfg.input_size || response_probs.dim(3) != cfg.input_size)
        throw ContractError("regressor expects a [B,L+1,input,input] response map, got " + shape_str(response_probs.shape()));
    const int S = cfg.num_stages();
    const int R = static_cast<int>(cfg.regressor_channels.size());

    // Encoder features feed the regressor but the regression loss must not
    // reach encoder parameters through them.
    Tensor shallow = skip_shallow.defined() ? detach(skip_shallow) : Tensor();
    Tensor deep = skip_deep.defined() ? detach(skip_deep) : Tensor();

    Tensor h = response_probs;
    for (int j = 0; j < R; ++j) {
        if (j == 1 && S >= 2) {
            if (!shallow.defined()) throw ContractError("regressor needs the shallow encoder skip");
            h = concat_channels(tape, {h, shallow});
        }
        if (j == S - 1 && S >= 3) {
            if (!deep.defined()) throw ContractError("regressor needs the deep encoder skip");
            h = concat_channels(tape, {h, deep});
        }
        h = conv_bn_relu(tape, h, params.regressor[static_cast<size_t>(j)], cfg.bn_eps);
        if (j < R - 1) h = maxpool_with_indices(tape, h, 2).first;
    }
    const int last_side = cfg.input_size >> (R - 1);
    h = avgpool(tape, h, last_side);
    h = reshape(tape, h, {response_probs.dim(0), cfg.regressor_channels.back()});
    h = dropout(tape, h, cfg.dropout_rate, mode, dropout_rng);
    return linear(tape, h, params.regressor_fc.w, params.regressor_fc.b);
}

std::pair<Tensor, LstmState> lstm_temporal_step(Tape* tape, const Tensor& c_pe, const LstmState& state,
                                                const ModelParams& params) {
    const NetConfig& cfg = params.cfg;
    const int B = c_pe.dim(0);
    const int side = c_pe.dim(2);
    const int Cb = c_pe.dim(1);
    const int H = cfg.lstm_hidden;

    auto [pooled, idx] = maxpool_with_indices(tape, c_pe, side);
    Tensor x = reshape(tape, pooled, {B, Cb});

    Tensor gates = add(tape, linear(tape, x, params.lstm.wx, params.lstm.b), linear(tape, state.h, params.lstm.wh, Tensor()));
    Tensor gi = activation(tape, slice_cols(tape, gates, 0, H), Act::Sigmoid);
    Tensor gf = activation(tape, slice_cols(tape, gates, H, H), Act::Sigmoid);
    Tensor gg = activation(tape, slice_cols(tape, gates, 2 * H, H), Act::Tanh);
    Tensor go = activation(tape, slice_cols(tape, gates, 3 * H, H), Act::Sigmoid);

    Tensor c_new = add(tape, mul(tape, gf, state.c), mul(tape, gi, gg));
    Tensor h_new = mul(tape, go, activation(tape, c_new, Act::Tanh));

    Tensor y = linear(tape, h_new, params.lstm.out.w, params.lstm.out.b);
    y = reshape(tape, y, {B, Cb, 1, 1});
    Tensor c_pe_new = unpool_with_indices(tape, y, idx);
    return {c_pe_new, LstmState{h_new, c_new}};
}

std::vector<std::vector<double>> offsets_to_landmarks(const Tensor& offsets, const ModelParams& params) {
    const int B = offsets.dim(0);
    const int D = offsets.dim(1);
    std::vector<std::vector<double>> out(static_cast<size_t>(B), std::vector<double>(static_cast<size_t>(D)));
    for (int b = 0; b < B; ++b)
        for (int d = 0; d < D; ++d)
            out[static_cast<size_t>(b)][static_cast<size_t>(d)] =
                params.mean_shape.data()[d] + offsets.data()[static_cast<int64_t>(b) * D + d] * params.cfg.input_size;
    return out;
}

Tensor landmarks_to_offsets(const std::vector<std::vector<double>>& landmarks, const ModelParams& params) {
    const int B = static_cast<int>(landmarks.size());
    const int D = 2 * params.cfg.landmark_count;
    Tensor t = Tensor::zeros({B, D});
    const double inv = 1.0 / params.cfg.input_size;
    for (int b = 0; b < B; ++b) {
        if (static_cast<int>(landmarks[static_cast<size_t>(b)].size()) != D)
            throw ContractError("landmark vector has wrong length");
        for (int d = 0; d < D; ++d)
            t.data()[static_cast<int64_t>(b) * D + d] =
                (landmarks[static_cast<size_t>(b)][static_cast<size_t>(d)] - params.mean_shape.data()[d]) * inv;
    }
    return t;
}

}  // namespace redec

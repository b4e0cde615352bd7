#include "redec/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace redec {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");

json net_config_to_json(const NetConfig& c) {
    return json{{"input_size", c.input_size},
                {"stage_channels", c.stage_channels},
                {"convs_per_stage", c.convs_per_stage},
                {"bottleneck_channels", c.bottleneck_channels},
                {"landmark_count", c.landmark_count},
                {"identity_count", c.identity_count},
                {"lstm_hidden", c.lstm_hidden},
                {"spatial_steps", c.spatial_steps},
                {"feedback_sizes", c.feedback_sizes},
                {"temporal_steps", c.temporal_steps},
                {"regressor_channels", c.regressor_channels},
                {"dropout_rate", c.dropout_rate},
                {"bn_eps", c.bn_eps},
                {"init_std", c.init_std},
                {"lstm_every_spatial_step", c.lstm_every_spatial_step}};
}

NetConfig net_config_from_json(const json& j) {
    NetConfig c;
    c.input_size = j.at("input_size").get<int>();
    c.stage_channels = j.at("stage_channels").get<std::vector<int>>();
    c.convs_per_stage = j.at("convs_per_stage").get<int>();
    c.bottleneck_channels = j.at("bottleneck_channels").get<int>();
    c.landmark_count = j.at("landmark_count").get<int>();
    c.identity_count = j.at("identity_count").get<int>();
    c.lstm_hidden = j.at("lstm_hidden").get<int>();
    c.spatial_steps = j.at("spatial_steps").get<int>();
    c.feedback_sizes = j.at("feedback_sizes").get<std::vector<int>>();
    c.temporal_steps = j.at("temporal_steps").get<int>();
    c.regressor_channels = j.at("regressor_channels").get<std::vector<int>>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.bn_eps = j.at("bn_eps").get<double>();
    c.init_std = j.at("init_std").get<double>();
    c.lstm_every_spatial_step = j.value("lstm_every_spatial_step", false);
    return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const ModelParams& p = ckpt.params;
    if (ckpt.opt.velocity.size() != p.trainables.size())
        throw ContractError("checkpoint optimizer state does not cover the parameter list");

    json m;
    m["format"] = "redec-ckpt-v1";
    m["dtype"] = "f64le";
    m["net_config"] = net_config_to_json(p.cfg);
    m["mean_shape"] = p.mean_shape.vec();
    m["stage"] = ckpt.stage;
    m["epoch"] = ckpt.epoch;
    m["optimizer"] = {{"momentum", ckpt.opt.momentum},
                      {"lr0", ckpt.opt.lr0},
                      {"decay_factor", ckpt.opt.decay_factor},
                      {"decay_period", ckpt.opt.decay_period}};
    m["blob"] = fs::path(path + ".bin").filename().string();

    uint64_t offset = 0;
    json params = json::array();
    for (size_t i = 0; i < p.names.size(); ++i) {
        const uint64_t bytes = static_cast<uint64_t>(p.trainables[i].numel()) * sizeof(double);
        params.push_back({{"name", p.names[i]}, {"shape", p.trainables[i].shape()}, {"offset", offset}, {"bytes", bytes}});
        offset += bytes;
    }
    m["params"] = params;
    json vels = json::array();
    for (size_t i = 0; i < p.names.size(); ++i) {
        const uint64_t bytes = static_cast<uint64_t>(ckpt.opt.velocity[i].numel()) * sizeof(double);
        vels.push_back({{"name", p.names[i]}, {"shape", ckpt.opt.velocity[i].shape()}, {"offset", offset}, {"bytes", bytes}});
        offset += bytes;
    }
    m["velocities"] = vels;
    m["blob_bytes"] = offset;

    std::ofstream bf(path + ".bin", std::ios::binary);
    if (!bf) throw IoError("cannot write checkpoint blob " + path + ".bin");
    for (const Tensor& t : p.trainables)
        bf.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    for (const Tensor& t : ckpt.opt.velocity)
        bf.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!bf) throw IoError("failed while writing checkpoint blob " + path + ".bin");

    std::ofstream mf(path, std::ios::binary);
    if (!mf) throw IoError("cannot write checkpoint manifest " + path);
    mf << m.dump(1) << "\n";
    if (!mf) throw IoError("failed while writing checkpoint manifest " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream mf(path);
    if (!mf) throw IoError("cannot open checkpoint manifest " + path);
    json m;
    try {
        mf >> m;
    } catch (const json::exception& e) {
        throw FormatError("checkpoint manifest parse failure: " + std::string(e.what()));
    }
    if (m.value("format", "") != "redec-ckpt-v1") throw FormatError("unknown checkpoint format in " + path);
    if (m.value("dtype", "") != "f64le") throw FormatError("unsupported checkpoint dtype in " + path);

    Checkpoint ckpt;
    NetConfig cfg = net_config_from_json(m.at("net_config"));
    ckpt.params = ModelParams::create(cfg, 0);
    const auto mean = m.at("mean_shape").get<std::vector<double>>();
    if (mean.size() != ckpt.params.mean_shape.vec().size()) throw FormatError("mean_shape length disagrees with net_config");
    ckpt.params.mean_shape.vec() = mean;
    ckpt.stage = m.at("stage").get<int>();
    ckpt.epoch = m.at("epoch").get<int>();
    ckpt.opt.momentum = m.at("optimizer").at("momentum").get<double>();
    ckpt.opt.lr0 = m.at("optimizer").at("lr0").get<double>();
    ckpt.opt.decay_factor = m.at("optimizer").at("decay_factor").get<double>();
    ckpt.opt.decay_period = m.at("optimizer").at("decay_period").get<int>();
    ckpt.opt.init(ckpt.params.trainables);

    const std::string blob_path = (fs::path(path).parent_path() / m.at("blob").get<std::string>()).string();
    std::ifstream bf(blob_path, std::ios::binary);
    if (!bf) throw IoError("cannot open checkpoint blob " + blob_path);
    bf.seekg(0, std::ios::end);
    const uint64_t blob_len = static_cast<uint64_t>(bf.tellg());
    if (blob_len != m.at("blob_bytes").get<uint64_t>())
        throw FormatError("checkpoint blob length " + std::to_string(blob_len) + " disagrees with manifest blob_bytes");
    bf.seekg(0);

    auto load_entries = [&](const json& list, std::vector<Tensor>& dst, const std::vector<std::string>& names, const char* what) {
        if (list.size() != names.size())
            throw FormatError(std::string(what) + " entry count " + std::to_string(list.size()) + " disagrees with net_config");
        for (size_t i = 0; i < names.size(); ++i) {
            const json& e = list[i];
            if (e.at("name").get<std::string>() != names[i])
                throw FormatError(std::string(what) + " entry '" + e.at("name").get<std::string>() + "' out of order, expected '" +
                                  names[i] + "'");
            const auto shape = e.at("shape").get<Shape>();
            if (shape != dst[i].shape())
                throw FormatError("parameter '" + names[i] + "' shape " + shape_str(shape) + " disagrees with net_config shape " +
                                  shape_str(dst[i].shape()));
            const uint64_t bytes = e.at("bytes").get<uint64_t>();
            if (bytes != static_cast<uint64_t>(dst[i].numel()) * sizeof(double))
                throw FormatError("parameter '" + names[i] + "' byte count disagrees with its shape");
            bf.seekg(static_cast<std::streamoff>(e.at("offset").get<uint64_t>()));
            bf.read(reinterpret_cast<char*>(dst[i].data()), static_cast<std::streamsize>(bytes));
            if (bf.gcount() != static_cast<std::streamsize>(bytes)) throw FormatError("truncated blob while reading '" + names[i] + "'");
        }
    };
    load_entries(m.at("params"), ckpt.params.trainables, ckpt.params.names, "params");
    load_entries(m.at("velocities"), ckpt.opt.velocity, ckpt.params.names, "velocities");
    return ckpt;
}

CheckpointBytes checkpoint_bytes(const std::string& path) {
    std::ifstream mf(path);
    if (!mf) throw IoError("cannot open checkpoint manifest " + path);
    json m;
    mf >> m;
    CheckpointBytes out;
    std::error_code ec;
    out.file_bytes = static_cast<uint64_t>(fs::file_size(path, ec)) +
                     static_cast<uint64_t>(fs::file_size(fs::path(path).parent_path() / m.at("blob").get<std::string>(), ec));
    for (const auto& e : m.at("params")) out.param_bytes += e.at("bytes").get<uint64_t>();
    return out;
}

}  // namespace redec

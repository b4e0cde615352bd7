#pragma once

#include <string>

#include "redec/model.hpp"
#include "redec/optim.hpp"

namespace redec {

// ModelParams + optimizer state + stage/epoch counters. Persisted as a JSON
// manifest (names, shapes, dtype, byte offsets, NetConfig, mean shape) next
// to a raw little-endian blob of 64-bit values; save -> load -> save is
// byte-stable.
struct Checkpoint {
    ModelParams params;
    OptimizerState opt;
    int stage = 0;
    int epoch = 0;
};

// `path` names the manifest; the blob lives at `path + ".bin"`.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Total persisted bytes (manifest + blob) and the parameter-value bytes
// recorded in the manifest, for memory-footprint comparisons.
struct CheckpointBytes {
    uint64_t file_bytes = 0;
    uint64_t param_bytes = 0;
};
CheckpointBytes checkpoint_bytes(const std::string& path);

}  // namespace redec

#pragma once

#include <cstdint>
#include <vector>

#include "redec/errors.hpp"

namespace redec {

// Single-channel integer map with entries in {0..L}; 0 is background.
// Batched as [B,H,W] in row-major order.
struct LabelMap {
    int batch = 0;
    int height = 0;
    int width = 0;
    std::vector<int32_t> values;

    LabelMap() = default;
    LabelMap(int b, int h, int w) : batch(b), height(h), width(w), values(static_cast<size_t>(b) * h * w, 0) {}

    int32_t& at(int b, int y, int x) { return values[(static_cast<size_t>(b) * height + y) * width + x]; }
    int32_t at(int b, int y, int x) const { return values[(static_cast<size_t>(b) * height + y) * width + x]; }

    size_t size() const { return values.size(); }

    void check_range(int max_label) const {
        for (int32_t v : values)
            if (v < 0 || v > max_label) throw DataError("label map entry out of range {0.." + std::to_string(max_label) + "}");
    }

    bool operator==(const LabelMap& o) const {
        return batch == o.batch && height == o.height && width == o.width && values == o.values;
    }
};

}  // namespace redec

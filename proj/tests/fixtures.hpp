#pragma once
// Small hand-built inputs shared by the unit and acceptance tests.

#include <torch/torch.h>

#include <vector>

#include "mqcl/datagen.hpp"
#include "mqcl/eval.hpp"

namespace fixture {

// Stub density model: every cell carries (pixel (0,0,0) * 100) / cells, so the
// predicted count of a constant image of value v is 100 v.
inline mqcl::DensityModel constant_stub() {
    mqcl::DensityModel m;
    m.forward = [m](const torch::Tensor& x) {
        const int64_t h = x.size(2) / m.density_stride, w = x.size(3) / m.density_stride;
        return torch::full({h, w}, x[0][0][0][0].item<double>() * 100.0 / static_cast<double>(h * w),
                           torch::kFloat64);
    };
    return m;
}

// Stub whose density is the per-cell mean of channel 0; its mass is
// sum(channel 0) / density_stride^2 on the region it sees.
inline mqcl::DensityModel pooling_stub() {
    mqcl::DensityModel m;
    m.forward = [m](const torch::Tensor& x) {
        return torch::avg_pool2d(x.select(1, 0), m.density_stride)[0].to(torch::kFloat64);
    };
    return m;
}

inline mqcl::CrowdSample constant_sample(float value, int people, int weather, int size = 64) {
    mqcl::CrowdSample s;
    s.image = mqcl::Image(size, size, value);
    s.points.assign(static_cast<size_t>(people), mqcl::Point{1.f, 1.f});
    s.weather = weather;
    return s;
}

// Two tight, far-apart clusters plus the textbook 6-point configuration.
inline std::vector<std::vector<float>> six_points() {
    return {{1.f, 0.1f}, {1.f, 0.2f}, {0.9f, 0.3f}, {0.1f, 1.f}, {0.3f, 1.f}, {0.5f, 0.8f}};
}
inline std::vector<int> six_labels() { return {0, 0, 0, 1, 1, 1}; }

}  // namespace fixture

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mqcl/datagen.hpp"
#include "mqcl/multiqueue.hpp"
#include "mqcl/trainer.hpp"

namespace mqcl {

// Predicted crowd count: the total mass of a density map.
double count_of(const torch::Tensor& density);

struct ErrorStats {
    double mae = 0.0;
    double rmse = 0.0;
};

ErrorStats mae_rmse(std::span<const double> preds, std::span<const double> gts);

struct MetricsRow {
    std::string group;
    int64_t n = 0;
    double mae = 0.0;   // NaN when n == 0
    double rmse = 0.0;  // NaN when n == 0

    bool present() const { return n > 0; }
};

// Rows, in order: one per weather class, then "adverse" (all non-normal
// classes) and "total". The normal class row doubles as the normal group.
struct MetricsTable {
    std::vector<MetricsRow> rows;
    std::string checkpoint_id;
    std::string dataset_id;
    uint64_t seed = 0;

    const MetricsRow& row(const std::string& group) const;
    std::string to_csv() const;
    static MetricsTable from_csv(const std::string& text);
    bool operator==(const MetricsTable&) const;
};

// Size-weighted merge of two tables over the same groups.
MetricsTable merge_tables(const MetricsTable& a, const MetricsTable& b);

// A network view for full-image inference. `forward` maps a (1, 3, H, W)
// batch with H, W multiples of `stride` to a (H/density_stride, W/density_stride)
// density map.
struct DensityModel {
    int stride = 32;
    int density_stride = 8;
    std::function<torch::Tensor(const torch::Tensor&)> forward;
};

// Encoder -> (refiner, for post-CRR) -> counting head.
DensityModel density_model(const Checkpoint& ckpt);

// Reflect-pads to the next stride multiple, runs the model, and crops the
// density back to the unpadded region.
torch::Tensor predict_full_image(const DensityModel& model, const Image& image);

MetricsTable grouped_eval(const DensityModel& model, const std::vector<CrowdSample>& samples, int num_classes);

// Projection vectors of full images: Q from E_Q/P_Q, or Q' (through the
// refiner) when `refined` is set.
std::vector<ProjVector> embed(const Checkpoint& ckpt, const std::vector<CrowdSample>& samples, bool refined);

// Mean silhouette coefficient under cosine distance. Requires at least two
// classes and at least two vectors per class.
double cluster_separation(const std::vector<std::vector<float>>& vectors, const std::vector<int>& labels);
double cluster_separation(const std::vector<ProjVector>& vectors);

// Mean cosine similarity between the given vectors and the centroid of the
// memory entries of class `weather`.
double mean_cosine_to_class_centroid(const std::vector<ProjVector>& vectors, const MultiQueue& memory, int weather);

struct ReportInput {
    std::string name;
    MetricsTable table;
    std::vector<LogRecord> log;
};

// Writes summary.csv, mae_by_weather.svg and (when logs are present)
// loss_curves.svg. Returns the written paths.
std::vector<std::filesystem::path> report(const std::vector<ReportInput>& inputs, const std::filesystem::path& out_dir);

}  // namespace mqcl

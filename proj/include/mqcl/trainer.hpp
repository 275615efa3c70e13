#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mqcl/datagen.hpp"
#include "mqcl/losses.hpp"
#include "mqcl/model.hpp"
#include "mqcl/multiqueue.hpp"

namespace mqcl {

struct TrainConfig {
    int crop = 64;
    // CRR view size. 0 uses the largest square view, i.e. the full frame for
    // square images.
    int crr_crop = 0;
    double flip_prob = 0.5;
    int batch_size = 16;
    int epochs_wrl = 30;
    int epochs_crr = 15;
    double lr = 1e-4;
    double weight_decay = 1e-3;
    std::string optimizer = "adamw";
    std::string schedule = "cosine";
    int queue_length = 256;
    PositiveSelection positive_selection = PositiveSelection::kSameImage;
    MemoryLayout memory = MemoryLayout::kMultiQueue;
    // false trains the counting baseline: Bayesian loss only, no key branch.
    bool contrastive = true;
    bool train_head_in_crr = true;
    uint64_t seed = 0;

    void validate(const ModelConfig& model) const;
};

enum class Stage { kPostWrl, kPostCrr };

const char* stage_name(Stage s);
Stage parse_stage(const std::string& name);

// Trained weights plus everything needed to resume or evaluate them.
// Post-CRR checkpoints do not carry the key branch (E_K, P_K).
struct Checkpoint {
    Stage stage = Stage::kPostWrl;
    int num_classes = 0;
    ModelConfig model;
    LossConfig loss;
    TrainConfig train;
    MqclNet net{nullptr};
    std::optional<MultiQueue> memory;
    bool has_key_branch = true;
    std::string dataset;  // dataset directory the weights were trained on, if known
};

// Archive with named parameter tensors, the memory contents and the JSON
// configuration, tagged "mqcl-ckpt-v1".
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Freshly initialized network (deterministic in train.seed) wrapped as a
// post-WRL checkpoint without memory. Used for step-0 measurements.
Checkpoint initial_checkpoint(const ModelConfig& model, const LossConfig& loss, const TrainConfig& train,
                              int num_classes);

// One random crop placement and flip.
struct ViewParams {
    int x0 = 0;
    int y0 = 0;
    bool flip = false;
};

ViewParams sample_view(SplitMix64& rng, int height, int width, int crop, double flip_prob);
Image apply_view(const Image& image, const ViewParams& view, int crop);
torch::Tensor apply_view(const torch::Tensor& image_chw, const ViewParams& view, int crop);
// Maps points through the crop/flip; points that fall outside are dropped.
std::vector<Point> transform_points(const std::vector<Point>& points, const ViewParams& view, int crop);

struct AugmentedPair {
    Image view_q;
    Image view_k;
    std::vector<Point> points_q;
    int64_t image_index = 0;
    int weather = 0;
};

// Two independent crops/flips of one sample; annotations follow view_q.
AugmentedPair augment_pair(const CrowdSample& sample, int crop, double flip_prob, SplitMix64& rng);

// Cosine annealing from lr0 at step 0 to zero at total_steps.
double lr_at(int64_t step, int64_t total_steps, double lr0);

// In-memory training set: images as one (N, 3, H, W) tensor.
struct TensorDataset {
    torch::Tensor images;
    std::vector<std::vector<Point>> points;
    std::vector<int64_t> image_index;
    std::vector<int> weather;
    int num_classes = 0;

    int64_t size() const { return static_cast<int64_t>(image_index.size()); }
};

TensorDataset to_tensor_dataset(const std::vector<CrowdSample>& samples, int num_classes);
torch::Tensor image_to_tensor(const Image& image);  // (3, H, W)

struct LogRecord {
    int64_t step = 0;
    std::string stage;
    double contra = 0.0;
    double bayesian = 0.0;
    double total = 0.0;
    double lr = 0.0;
};

std::string to_jsonl(const LogRecord& r);
std::vector<LogRecord> read_log(const std::filesystem::path& path);

struct TrainHooks {
    std::function<void(const LogRecord&)> on_step;
    // Called after every optimizer step with the live network and memory.
    std::function<void(int64_t step, MqclNet& net, const MultiQueue* memory)> after_step;
};

// Stage 1: contrastive weather-aware representation learning with count
// supervision. With train.contrastive == false this is the Bayesian-loss-only
// baseline and no memory is built.
Checkpoint train_wrl(const ModelConfig& model, const LossConfig& loss, const TrainConfig& train,
                     const TensorDataset& data, const TrainHooks& hooks = {});

// Stage 2: frozen encoder, projection head and memory; trains the refiner
// (and the counting head when train.train_head_in_crr) toward the normal class.
Checkpoint train_crr(const Checkpoint& post_wrl, const TrainConfig& train, const TensorDataset& data,
                     const TrainHooks& hooks = {});

// Deep copy of a checkpoint (network weights included).
Checkpoint clone_checkpoint(const Checkpoint& ckpt);

}  // namespace mqcl

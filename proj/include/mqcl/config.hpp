#pragma once

#include <filesystem>

#include "json.hpp"
#include "mqcl/datagen.hpp"
#include "mqcl/losses.hpp"
#include "mqcl/model.hpp"
#include "mqcl/trainer.hpp"

namespace mqcl {

// One JSON document drives the whole pipeline:
//
//   {
//     "data":  { "train_counts": [340,20,20,20], "test_counts": [40,20,20,20],
//                "image_height": 128, "image_width": 128,
//                "min_people": 10, "max_people": 40,
//                "severity": [[0,0],[0.5,0.9],[0.5,0.9],[0.5,0.9]], "seed": 0 },
//     "model": { "stride": 32, "c1": 192, "c2": 128, "proj_hidden": 512,
//                "refiner_depth": 3, "blocks_per_stage": 1, "head_width": 64,
//                "head_upsample": 4, "momentum": 0.999, "input_mean": 0.5,
//                "input_scale": 0.1 },
//     "loss":  { "tau": 0.05, "lambda1": 10, "lambda2": 10, "sigma_bl": 4.0,
//                "loss_reduction": "mean" },
//     "train": { "crop": 64, "crr_crop": 0, "flip_prob": 0.5, "batch_size": 16,
//                "epochs_wrl": 30, "epochs_crr": 15, "lr": 1e-4,
//                "weight_decay": 1e-3, "optimizer": "adamw", "schedule": "cosine",
//                "queue_length": 256, "positive_selection": "same-image",
//                "memory": "multi-queue", "contrastive": true,
//                "train_head_in_crr": true, "seed": 0 }
//   }
//
// Every section and key is optional; unknown keys are rejected.
struct PipelineConfig {
    DatasetSpec data;
    ModelConfig model;
    LossConfig loss;
    TrainConfig train;

    void validate() const;
};

nlohmann::json to_json(const DatasetSpec& spec);
nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const LossConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const PipelineConfig& cfg);

DatasetSpec dataset_spec_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);
LossConfig loss_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

PipelineConfig load_config(const std::filesystem::path& path);

}  // namespace mqcl

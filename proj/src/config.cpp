#include "mqcl/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace mqcl {

using json = nlohmann::json;

namespace {

void reject_unknown(const json& j, const char* section, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw std::invalid_argument(std::string("config: '") + section + "' must be an object");
    const std::set<std::string> allowed(known.begin(), known.end());
    for (const auto& [key, _] : j.items())
        if (!allowed.contains(key))
            throw std::invalid_argument(std::string("config: unknown key '") + key + "' in '" + section + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json to_json(const DatasetSpec& s) {
    json sev = json::array();
    for (const auto& [lo, hi] : s.severity) sev.push_back({lo, hi});
    return {{"train_counts", s.train_counts}, {"test_counts", s.test_counts}, {"image_height", s.image_height},
            {"image_width", s.image_width},   {"min_people", s.min_people},   {"max_people", s.max_people},
            {"severity", sev},                {"seed", s.seed}};
}

json to_json(const ModelConfig& c) {
    return {{"stride", c.stride},
            {"c1", c.c1},
            {"c2", c.c2},
            {"proj_hidden", c.proj_hidden},
            {"refiner_depth", c.refiner_depth},
            {"blocks_per_stage", c.blocks_per_stage},
            {"head_width", c.head_width},
            {"head_upsample", c.head_upsample},
            {"momentum", c.momentum},
            {"input_mean", c.input_mean},
            {"input_scale", c.input_scale}};
}

json to_json(const LossConfig& c) {
    return {{"tau", c.tau},
            {"lambda1", c.lambda1},
            {"lambda2", c.lambda2},
            {"sigma_bl", c.sigma_bl},
            {"loss_reduction", reduction_name(c.reduction)}};
}

json to_json(const TrainConfig& c) {
    return {{"crop", c.crop},
            {"crr_crop", c.crr_crop},
            {"flip_prob", c.flip_prob},
            {"batch_size", c.batch_size},
            {"epochs_wrl", c.epochs_wrl},
            {"epochs_crr", c.epochs_crr},
            {"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"optimizer", c.optimizer},
            {"schedule", c.schedule},
            {"queue_length", c.queue_length},
            {"positive_selection", positive_selection_name(c.positive_selection)},
            {"memory", layout_name(c.memory)},
            {"contrastive", c.contrastive},
            {"train_head_in_crr", c.train_head_in_crr},
            {"seed", c.seed}};
}

json to_json(const PipelineConfig& c) {
    return {{"data", to_json(c.data)}, {"model", to_json(c.model)}, {"loss", to_json(c.loss)}, {"train", to_json(c.train)}};
}

DatasetSpec dataset_spec_from_json(const json& j) {
    reject_unknown(j, "data",
                   {"train_counts", "test_counts", "image_height", "image_width", "min_people", "max_people",
                    "severity", "seed"});
    DatasetSpec s;
    read(j, "train_counts", s.train_counts);
    read(j, "test_counts", s.test_counts);
    read(j, "image_height", s.image_height);
    read(j, "image_width", s.image_width);
    read(j, "min_people", s.min_people);
    read(j, "max_people", s.max_people);
    read(j, "seed", s.seed);
    if (j.contains("severity")) {
        s.severity.clear();
        for (const auto& r : j.at("severity")) s.severity.emplace_back(r.at(0).get<float>(), r.at(1).get<float>());
    }
    return s;
}

ModelConfig model_config_from_json(const json& j) {
    reject_unknown(j, "model",
                   {"stride", "c1", "c2", "proj_hidden", "refiner_depth", "blocks_per_stage", "head_width",
                    "head_upsample", "momentum", "input_mean", "input_scale"});
    ModelConfig c;
    read(j, "stride", c.stride);
    read(j, "c1", c.c1);
    read(j, "c2", c.c2);
    read(j, "proj_hidden", c.proj_hidden);
    read(j, "refiner_depth", c.refiner_depth);
    read(j, "blocks_per_stage", c.blocks_per_stage);
    read(j, "head_width", c.head_width);
    read(j, "head_upsample", c.head_upsample);
    read(j, "momentum", c.momentum);
    read(j, "input_mean", c.input_mean);
    read(j, "input_scale", c.input_scale);
    return c;
}

LossConfig loss_config_from_json(const json& j) {
    reject_unknown(j, "loss", {"tau", "lambda1", "lambda2", "sigma_bl", "loss_reduction"});
    LossConfig c;
    read(j, "tau", c.tau);
    read(j, "lambda1", c.lambda1);
    read(j, "lambda2", c.lambda2);
    read(j, "sigma_bl", c.sigma_bl);
    if (j.contains("loss_reduction")) c.reduction = parse_reduction(j.at("loss_reduction").get<std::string>());
    return c;
}

TrainConfig train_config_from_json(const json& j) {
    reject_unknown(j, "train",
                   {"crop", "crr_crop", "flip_prob", "batch_size", "epochs_wrl", "epochs_crr", "lr", "weight_decay", "optimizer",
                    "schedule", "queue_length", "positive_selection", "memory", "contrastive", "train_head_in_crr",
                    "seed"});
    TrainConfig c;
    read(j, "crop", c.crop);
    read(j, "crr_crop", c.crr_crop);
    read(j, "flip_prob", c.flip_prob);
    read(j, "batch_size", c.batch_size);
    read(j, "epochs_wrl", c.epochs_wrl);
    read(j, "epochs_crr", c.epochs_crr);
    read(j, "lr", c.lr);
    read(j, "weight_decay", c.weight_decay);
    read(j, "optimizer", c.optimizer);
    read(j, "schedule", c.schedule);
    read(j, "queue_length", c.queue_length);
    read(j, "contrastive", c.contrastive);
    read(j, "train_head_in_crr", c.train_head_in_crr);
    read(j, "seed", c.seed);
    if (j.contains("positive_selection"))
        c.positive_selection = parse_positive_selection(j.at("positive_selection").get<std::string>());
    if (j.contains("memory")) c.memory = parse_layout(j.at("memory").get<std::string>());
    return c;
}

PipelineConfig pipeline_config_from_json(const json& j) {
    reject_unknown(j, "<root>", {"data", "model", "loss", "train"});
    PipelineConfig c;
    try {
        if (j.contains("data")) c.data = dataset_spec_from_json(j.at("data"));
        if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
        if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
        if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }
    return c;
}

void PipelineConfig::validate() const {
    data.validate();
    model.validate();
    loss.validate();
    train.validate(model);
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
    return pipeline_config_from_json(j);
}

}  // namespace mqcl

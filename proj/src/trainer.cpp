#include "mqcl/trainer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "mqcl/config.hpp"

namespace mqcl {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {
constexpr const char* kCheckpointFormat = "mqcl-ckpt-v1";
}

const char* stage_name(Stage s) { return s == Stage::kPostWrl ? "post-wrl" : "post-crr"; }

Stage parse_stage(const std::string& name) {
    if (name == "post-wrl") return Stage::kPostWrl;
    if (name == "post-crr") return Stage::kPostCrr;
    throw std::invalid_argument("unknown stage tag '" + name + "'");
}

void TrainConfig::validate(const ModelConfig& model) const {
    if (crop <= 0 || crop % model.stride != 0)
        throw std::invalid_argument("TrainConfig: crop size must be a positive multiple of the encoder stride");
    if (crr_crop < 0 || crr_crop % model.stride != 0)
        throw std::invalid_argument("TrainConfig: crr_crop must be 0 or a positive multiple of the encoder stride");
    if (flip_prob < 0.0 || flip_prob > 1.0) throw std::invalid_argument("TrainConfig: flip_prob must lie in [0, 1]");
    if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch size must be at least 2");
    if (epochs_wrl < 0 || epochs_crr < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
    if (!(lr > 0.0) || weight_decay < 0.0) throw std::invalid_argument("TrainConfig: invalid lr/weight decay");
    if (optimizer != "adamw") throw std::invalid_argument("TrainConfig: only the 'adamw' optimizer is supported");
    if (schedule != "cosine") throw std::invalid_argument("TrainConfig: only the 'cosine' schedule is supported");
    if (queue_length < 1) throw std::invalid_argument("TrainConfig: queue_length must be >= 1");
}

double lr_at(int64_t step, int64_t total_steps, double lr0) {
    if (total_steps <= 0) return lr0;
    if (step < 0 || step > total_steps) throw std::out_of_range("lr_at: step outside [0, total_steps]");
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

// ---------------------------------------------------------------- augmentation

ViewParams sample_view(SplitMix64& rng, int height, int width, int crop, double flip_prob) {
    if (height < crop || width < crop)
        throw std::invalid_argument("image " + std::to_string(height) + "x" + std::to_string(width) +
                                    " is smaller than the crop size " + std::to_string(crop));
    ViewParams v;
    v.x0 = rng.uniform_int(0, width - crop);
    v.y0 = rng.uniform_int(0, height - crop);
    v.flip = rng.uniform() < flip_prob;
    return v;
}

Image apply_view(const Image& image, const ViewParams& view, int crop) {
    Image out(crop, crop);
    for (int y = 0; y < crop; ++y)
        for (int x = 0; x < crop; ++x) {
            const int sx = view.flip ? view.x0 + crop - 1 - x : view.x0 + x;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(view.y0 + y, sx, c);
        }
    return out;
}

torch::Tensor apply_view(const torch::Tensor& image_chw, const ViewParams& view, int crop) {
    auto v = image_chw.slice(1, view.y0, view.y0 + crop).slice(2, view.x0, view.x0 + crop);
    return view.flip ? v.flip({2}) : v;
}

std::vector<Point> transform_points(const std::vector<Point>& points, const ViewParams& view, int crop) {
    std::vector<Point> out;
    const float size = static_cast<float>(crop);
    for (const auto& p : points) {
        float x = p.x - static_cast<float>(view.x0);
        const float y = p.y - static_cast<float>(view.y0);
        if (x < 0.f || y < 0.f || x >= size || y >= size) continue;
        if (view.flip) x = size - x;
        out.push_back({x, y});
    }
    return out;
}

AugmentedPair augment_pair(const CrowdSample& sample, int crop, double flip_prob, SplitMix64& rng) {
    const ViewParams vq = sample_view(rng, sample.image.height, sample.image.width, crop, flip_prob);
    const ViewParams vk = sample_view(rng, sample.image.height, sample.image.width, crop, flip_prob);
    return {apply_view(sample.image, vq, crop), apply_view(sample.image, vk, crop),
            transform_points(sample.points, vq, crop), sample.image_index, sample.weather};
}

// ---------------------------------------------------------------- datasets

torch::Tensor image_to_tensor(const Image& image) {
    auto hwc = torch::from_blob(const_cast<float*>(image.pixels.data()), {image.height, image.width, 3}, torch::kFloat32);
    return hwc.permute({2, 0, 1}).contiguous();
}

TensorDataset to_tensor_dataset(const std::vector<CrowdSample>& samples, int num_classes) {
    if (samples.empty()) throw std::invalid_argument("to_tensor_dataset: empty dataset");
    TensorDataset d;
    d.num_classes = num_classes;
    std::vector<torch::Tensor> images;
    for (const auto& s : samples) {
        if (s.image.height != samples.front().image.height || s.image.width != samples.front().image.width)
            throw std::invalid_argument("to_tensor_dataset: images must share one size");
        if (s.weather < 0 || s.weather >= num_classes)
            throw std::invalid_argument("to_tensor_dataset: weather id out of range");
        images.push_back(image_to_tensor(s.image));
        d.points.push_back(s.points);
        d.image_index.push_back(s.image_index);
        d.weather.push_back(s.weather);
    }
    d.images = torch::stack(images);
    return d;
}

// ---------------------------------------------------------------- logs

std::string to_jsonl(const LogRecord& r) {
    json j{{"step", r.step}, {"stage", r.stage}, {"contra", r.contra},
           {"bayesian", r.bayesian}, {"total", r.total}, {"lr", r.lr}};
    return j.dump();
}

std::vector<LogRecord> read_log(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open log " + path.string());
    std::vector<LogRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        out.push_back({j.at("step").get<int64_t>(), j.at("stage").get<std::string>(), j.at("contra").get<double>(),
                       j.at("bayesian").get<double>(), j.at("total").get<double>(), j.at("lr").get<double>()});
    }
    return out;
}

// ---------------------------------------------------------------- checkpoints

namespace {

torch::Tensor string_tensor(const std::string& s) {
    auto t = torch::empty({static_cast<int64_t>(s.size())}, torch::kInt8);
    if (!s.empty()) std::memcpy(t.data_ptr<int8_t>(), s.data(), s.size());
    return t;
}

std::string tensor_string(const torch::Tensor& t) {
    std::string s(static_cast<size_t>(t.numel()), '\0');
    if (t.numel() > 0) std::memcpy(s.data(), t.contiguous().data_ptr<int8_t>(), s.size());
    return s;
}

torch::Tensor read_key(torch::serialize::InputArchive& ar, const std::string& key, const fs::path& path) {
    torch::Tensor t;
    if (!ar.try_read(key, t)) throw std::runtime_error(path.string() + ": checkpoint is missing '" + key + "'");
    return t;
}

bool is_key_branch(const std::string& name) {
    return name.starts_with("encoder_k.") || name.starts_with("proj_k.");
}

void write_memory(torch::serialize::OutputArchive& ar, const MultiQueue& q) {
    const QueueState st = q.state();
    ar.write("queue/meta", torch::tensor({static_cast<int64_t>(st.layout), static_cast<int64_t>(st.num_classes),
                                          static_cast<int64_t>(st.num_slots), static_cast<int64_t>(st.capacity),
                                          static_cast<int64_t>(st.dim)},
                                         torch::kInt64));
    std::vector<int64_t> fill, index, weather;
    std::vector<float> keys;
    for (const auto& slot : st.entries) {
        fill.push_back(static_cast<int64_t>(slot.size()));
        for (const auto& e : slot) {
            keys.insert(keys.end(), e.values.begin(), e.values.end());
            index.push_back(e.image_index);
            weather.push_back(e.weather);
        }
    }
    const auto total = static_cast<int64_t>(index.size());
    ar.write("queue/fill", torch::tensor(fill, torch::kInt64));
    ar.write("queue/keys", torch::from_blob(keys.data(), {total, st.dim}, torch::kFloat32).clone());
    ar.write("queue/image_index", torch::from_blob(index.data(), {total}, torch::kInt64).clone());
    ar.write("queue/weather", torch::from_blob(weather.data(), {total}, torch::kInt64).clone());
}

MultiQueue read_memory(torch::serialize::InputArchive& ar, const fs::path& path) {
    const auto meta = read_key(ar, "queue/meta", path);
    const auto fill = read_key(ar, "queue/fill", path);
    const auto keys = read_key(ar, "queue/keys", path).contiguous();
    const auto index = read_key(ar, "queue/image_index", path);
    const auto weather = read_key(ar, "queue/weather", path);
    QueueState st;
    st.layout = static_cast<MemoryLayout>(meta[0].item<int64_t>());
    st.num_classes = static_cast<int>(meta[1].item<int64_t>());
    st.num_slots = static_cast<int>(meta[2].item<int64_t>());
    st.capacity = static_cast<int>(meta[3].item<int64_t>());
    st.dim = static_cast<int>(meta[4].item<int64_t>());
    if (fill.numel() != st.num_slots) throw std::runtime_error(path.string() + ": corrupt queue fill table");
    st.entries.resize(st.num_slots);
    int64_t row = 0;
    for (int s = 0; s < st.num_slots; ++s)
        for (int64_t k = 0; k < fill[s].item<int64_t>(); ++k, ++row) {
            const float* p = keys.data_ptr<float>() + row * st.dim;
            st.entries[s].push_back({std::vector<float>(p, p + st.dim), index[row].item<int64_t>(),
                                     static_cast<int>(weather[row].item<int64_t>())});
        }
    return MultiQueue::from_state(st);
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
    torch::serialize::OutputArchive ar;
    ar.write("meta/format", string_tensor(kCheckpointFormat));
    ar.write("meta/stage", string_tensor(stage_name(ckpt.stage)));
    json cfg{{"model", to_json(ckpt.model)}, {"loss", to_json(ckpt.loss)}, {"train", to_json(ckpt.train)},
             {"num_classes", ckpt.num_classes}, {"has_key_branch", ckpt.has_key_branch},
             {"has_memory", ckpt.memory.has_value()}, {"dataset", ckpt.dataset}};
    ar.write("meta/config", string_tensor(cfg.dump()));
    for (const auto& p : ckpt.net->named_parameters(true)) {
        if (!ckpt.has_key_branch && is_key_branch(p.key())) continue;
        ar.write("param/" + p.key(), p.value().detach().clone());
    }
    if (ckpt.memory) write_memory(ar, *ckpt.memory);
    try {
        ar.save_to(path.string());
    } catch (const c10::Error& e) {
        throw std::runtime_error("cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace());
    }
}

Checkpoint load_checkpoint(const fs::path& path) {
    torch::serialize::InputArchive ar;
    try {
        ar.load_from(path.string());
    } catch (const c10::Error& e) {
        throw std::runtime_error("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
    }
    if (tensor_string(read_key(ar, "meta/format", path)) != kCheckpointFormat)
        throw std::runtime_error(path.string() + ": unsupported checkpoint format");
    Checkpoint ckpt;
    ckpt.stage = parse_stage(tensor_string(read_key(ar, "meta/stage", path)));
    const json cfg = json::parse(tensor_string(read_key(ar, "meta/config", path)));
    ckpt.model = model_config_from_json(cfg.at("model"));
    ckpt.loss = loss_config_from_json(cfg.at("loss"));
    ckpt.train = train_config_from_json(cfg.at("train"));
    ckpt.num_classes = cfg.at("num_classes").get<int>();
    ckpt.has_key_branch = cfg.at("has_key_branch").get<bool>();
    ckpt.dataset = cfg.value("dataset", std::string{});
    ckpt.net = MqclNet(ckpt.model);
    {
        torch::NoGradGuard guard;
        for (auto& p : ckpt.net->named_parameters(true)) {
            if (!ckpt.has_key_branch && is_key_branch(p.key())) continue;
            const auto t = read_key(ar, "param/" + p.key(), path);
            if (!t.sizes().equals(p.value().sizes()))
                throw std::runtime_error(path.string() + ": shape mismatch for '" + p.key() + "'");
            p.value().copy_(t);
        }
    }
    if (cfg.at("has_memory").get<bool>()) ckpt.memory = read_memory(ar, path);
    if (ckpt.stage == Stage::kPostCrr && ckpt.memory) ckpt.memory->set_frozen(true);
    return ckpt;
}

Checkpoint clone_checkpoint(const Checkpoint& ckpt) {
    Checkpoint out = ckpt;
    out.net = MqclNet(ckpt.model);
    torch::NoGradGuard guard;
    auto dst = out.net->named_parameters(true);
    const auto src = ckpt.net->named_parameters(true);
    for (size_t i = 0; i < dst.size(); ++i) {
        dst[i].value().copy_(src[i].value());
        dst[i].value().set_requires_grad(src[i].value().requires_grad());
    }
    return out;
}

Checkpoint initial_checkpoint(const ModelConfig& model, const LossConfig& loss, const TrainConfig& train,
                              int num_classes) {
    model.validate();
    loss.validate();
    train.validate(model);
    torch::manual_seed(train.seed);
    Checkpoint ckpt;
    ckpt.stage = Stage::kPostWrl;
    ckpt.num_classes = num_classes;
    ckpt.model = model;
    ckpt.loss = loss;
    ckpt.train = train;
    ckpt.net = MqclNet(model);
    return ckpt;
}

// ---------------------------------------------------------------- training loops

namespace {

struct Batch {
    torch::Tensor view_q;
    torch::Tensor view_k;  // undefined when not requested
    std::vector<std::vector<Point>> grid_points;
    std::vector<int64_t> image_index;
    std::vector<int> weather;
};

Batch make_batch(const TensorDataset& data, std::span<const int64_t> rows, const TrainConfig& cfg, int crop,
                 int density_stride, bool two_views, SplitMix64& rng) {
    Batch b;
    std::vector<torch::Tensor> vq, vk;
    const int h = static_cast<int>(data.images.size(2)), w = static_cast<int>(data.images.size(3));
    const float ds = static_cast<float>(density_stride);
    for (int64_t r : rows) {
        const auto image = data.images[r];
        const ViewParams pq = sample_view(rng, h, w, crop, cfg.flip_prob);
        vq.push_back(apply_view(image, pq, crop));
        if (two_views) vk.push_back(apply_view(image, sample_view(rng, h, w, crop, cfg.flip_prob), crop));
        auto pts = transform_points(data.points[r], pq, crop);
        for (auto& p : pts) p = {p.x / ds, p.y / ds};
        b.grid_points.push_back(std::move(pts));
        b.image_index.push_back(data.image_index[r]);
        b.weather.push_back(data.weather[r]);
    }
    b.view_q = torch::stack(vq);
    if (two_views) b.view_k = torch::stack(vk);
    return b;
}

std::vector<int64_t> shuffled(int64_t n, SplitMix64& rng) {
    std::vector<int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.next() % static_cast<uint64_t>(i + 1)]);
    return order;
}

MultiQueue make_memory(const TrainConfig& cfg, const ModelConfig& model, const TensorDataset& data) {
    switch (cfg.memory) {
        case MemoryLayout::kMultiQueue: return MultiQueue(data.num_classes, cfg.queue_length, model.c2);
        case MemoryLayout::kSingleQueue: return MultiQueue::single_queue(data.num_classes, cfg.queue_length, model.c2);
        case MemoryLayout::kMemoryBank: {
            const int64_t max_index = *std::max_element(data.image_index.begin(), data.image_index.end());
            return MultiQueue::memory_bank(data.num_classes, static_cast<int>(max_index + 1), model.c2);
        }
    }
    throw std::invalid_argument("unknown memory layout");
}

void set_lr(torch::optim::AdamW& opt, double lr) {
    for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
}

void check_finite(double v, int64_t step, const char* stage) {
    if (!std::isfinite(v))
        throw std::runtime_error(std::string(stage) + ": non-finite loss at step " + std::to_string(step) +
                                 " (training diverged)");
}

void push_keys(MultiQueue& memory, const torch::Tensor& keys, const Batch& b) {
    const auto k = keys.detach().to(torch::kFloat32).contiguous();
    for (int64_t i = 0; i < k.size(0); ++i) {
        const float* p = k.data_ptr<float>() + i * k.size(1);
        memory.push({std::vector<float>(p, p + k.size(1)), b.image_index[i], b.weather[i]});
    }
}

}  // namespace

Checkpoint train_wrl(const ModelConfig& model, const LossConfig& loss, const TrainConfig& train,
                     const TensorDataset& data, const TrainHooks& hooks) {
    if (data.size() < train.batch_size)
        throw std::invalid_argument("train_wrl: dataset smaller than one batch");
    Checkpoint ckpt = initial_checkpoint(model, loss, train, data.num_classes);
    MqclNet& net = ckpt.net;
    std::optional<MultiQueue> memory;
    if (train.contrastive) memory = make_memory(train, model, data);

    std::vector<torch::Tensor> params;
    for (auto* m : std::initializer_list<torch::nn::Module*>{net->encoder_q.get(), net->proj_q.get(), net->head.get()})
        for (auto& p : m->parameters(true)) params.push_back(p);
    torch::optim::AdamW opt(params, torch::optim::AdamWOptions(train.lr).weight_decay(train.weight_decay));

    SplitMix64 rng(derive_seed(train.seed, 0x5752u));
    const int64_t steps_per_epoch = data.size() / train.batch_size;
    const int64_t total_steps = steps_per_epoch * train.epochs_wrl;
    net->train();

    int64_t step = 0;
    for (int epoch = 0; epoch < train.epochs_wrl; ++epoch) {
        const auto order = shuffled(data.size(), rng);
        for (int64_t s = 0; s < steps_per_epoch; ++s, ++step) {
            const double lr = lr_at(step, total_steps, train.lr);
            set_lr(opt, lr);
            const std::span<const int64_t> rows(order.data() + s * train.batch_size, train.batch_size);
            const Batch b = make_batch(data, rows, train, train.crop, model.density_stride(), train.contrastive, rng);

            const auto rq = encode(net->encoder_q, b.view_q);
            const auto bayes = bayesian_loss_batch(net->head(rq), b.grid_points, loss.sigma_bl);
            torch::Tensor contra = torch::zeros({}, bayes.options());
            if (train.contrastive) {
                const auto q = net->proj_q(rq);
                torch::Tensor k;
                {
                    torch::NoGradGuard guard;
                    k = net->proj_k(encode(net->encoder_k, b.view_k));
                }
                push_keys(*memory, k, b);
                contra = contra1(q, b.image_index, memory->snapshot(), loss, train.positive_selection, b.weather);
            }
            const auto total = wrl_total(contra, bayes, loss.lambda1);
            const LogRecord rec{step, "wrl", contra.item<double>(), bayes.item<double>(), total.item<double>(), lr};
            check_finite(rec.total, step, "train_wrl");

            opt.zero_grad();
            total.backward();
            opt.step();
            if (train.contrastive) {
                momentum_update(*net->encoder_k, *net->encoder_q, model.momentum);
                momentum_update(*net->proj_k, *net->proj_q, model.momentum);
            }
            if (hooks.on_step) hooks.on_step(rec);
            if (hooks.after_step) hooks.after_step(step, net, memory ? &*memory : nullptr);
        }
    }
    net->eval();
    ckpt.memory = std::move(memory);
    ckpt.has_key_branch = train.contrastive;
    return ckpt;
}

Checkpoint train_crr(const Checkpoint& post_wrl, const TrainConfig& train, const TensorDataset& data,
                     const TrainHooks& hooks) {
    if (post_wrl.stage != Stage::kPostWrl) throw std::invalid_argument("train_crr: expected a post-WRL checkpoint");
    if (!post_wrl.memory) throw std::invalid_argument("train_crr: checkpoint carries no key memory");
    constexpr int kNormal = static_cast<int>(Weather::kNormal);
    if (post_wrl.memory->of_class(kNormal).empty())
        throw std::invalid_argument("train_crr: the normal-weather sub-queue is empty");
    if (data.size() < train.batch_size) throw std::invalid_argument("train_crr: dataset smaller than one batch");
    train.validate(post_wrl.model);

    Checkpoint ckpt = clone_checkpoint(post_wrl);
    ckpt.train.epochs_crr = train.epochs_crr;
    ckpt.train.train_head_in_crr = train.train_head_in_crr;
    MqclNet& net = ckpt.net;
    MultiQueue& memory = *ckpt.memory;
    memory.set_frozen(true);

    set_trainable(*net->encoder_q, false);
    set_trainable(*net->proj_q, false);
    set_trainable(*net->encoder_k, false);
    set_trainable(*net->proj_k, false);
    set_trainable(*net->head, train.train_head_in_crr);
    set_trainable(*net->refiner, true);

    std::vector<torch::Tensor> params;
    for (auto& p : net->refiner->parameters(true)) params.push_back(p);
    if (train.train_head_in_crr)
        for (auto& p : net->head->parameters(true)) params.push_back(p);
    if (params.empty()) throw std::invalid_argument("train_crr: nothing to train (refiner depth 0 and frozen head)");
    torch::optim::AdamW opt(params, torch::optim::AdamWOptions(train.lr).weight_decay(train.weight_decay));

    const LossConfig& loss = ckpt.loss;
    const KeySnapshot snapshot = memory.snapshot();
    const auto keys = keys_tensor(snapshot);

    const int frame = static_cast<int>(std::min(data.images.size(2), data.images.size(3)));
    const int crr_crop = train.crr_crop > 0 ? train.crr_crop : frame - frame % ckpt.model.stride;
    SplitMix64 rng(derive_seed(train.seed, 0x435252u));
    const int64_t steps_per_epoch = data.size() / train.batch_size;
    const int64_t total_steps = steps_per_epoch * train.epochs_crr;
    net->train();

    int64_t step = 0;
    for (int epoch = 0; epoch < train.epochs_crr; ++epoch) {
        const auto order = shuffled(data.size(), rng);
        for (int64_t s = 0; s < steps_per_epoch; ++s, ++step) {
            const double lr = lr_at(step, total_steps, train.lr);
            set_lr(opt, lr);
            const std::span<const int64_t> rows(order.data() + s * train.batch_size, train.batch_size);
            const Batch b = make_batch(data, rows, train, crr_crop, ckpt.model.density_stride(), false, rng);

            torch::Tensor r;
            {
                torch::NoGradGuard guard;
                r = encode(net->encoder_q, b.view_q);
            }
            const auto refined = net->refiner(r);
            const auto q = net->proj_q(refined);
            const auto contra = masked_info_nce(q, keys, class_mask(q.size(0), snapshot, kNormal), loss.tau,
                                                loss.reduction);
            const auto bayes = bayesian_loss_batch(net->head(refined), b.grid_points, loss.sigma_bl);
            const auto total = loss.lambda2 > 0.0 ? crr_total(contra, bayes, loss.lambda2) : contra;
            const LogRecord rec{step, "crr", contra.item<double>(), bayes.item<double>(), total.item<double>(), lr};
            check_finite(rec.total, step, "train_crr");

            opt.zero_grad();
            total.backward();
            opt.step();
            if (hooks.on_step) hooks.on_step(rec);
            if (hooks.after_step) hooks.after_step(step, net, &memory);
        }
    }
    net->eval();
    ckpt.stage = Stage::kPostCrr;
    ckpt.has_key_branch = false;
    return ckpt;
}

}  // namespace mqcl

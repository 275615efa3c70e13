#include "doctest_torch.hpp"

#include <cmath>
#include <fstream>

#include "mqcl/trainer.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace mqcl;

namespace {

struct Toy {
    ModelConfig model;
    LossConfig loss;
    TrainConfig train;
    TensorDataset data;
};

// 16 images of 64x64, four weather classes, a model small enough to train in
// well under a second per epoch.
Toy toy() {
    Toy t;
    t.model.c1 = 32;
    t.model.c2 = 16;
    t.model.proj_hidden = 32;
    t.model.head_width = 16;
    t.model.refiner_depth = 1;
    t.model.momentum = 0.9;
    t.train.crop = 32;
    t.train.batch_size = 4;
    t.train.epochs_wrl = 1;
    t.train.epochs_crr = 1;
    t.train.queue_length = 8;
    t.train.lr = 1e-3;
    t.train.seed = 5;
    DatasetSpec spec;
    spec.train_counts = {10, 2, 2, 2};
    spec.image_height = spec.image_width = 64;
    spec.min_people = 2;
    spec.max_people = 6;
    spec.seed = 9;
    std::vector<CrowdSample> samples;
    int64_t index = 0;
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < spec.train_counts[c]; ++i, ++index) {
            auto s = generate_scene(derive_seed(spec.seed, index), spec, c);
            s.image_index = index;
            samples.push_back(std::move(s));
        }
    t.data = to_tensor_dataset(samples, 4);
    return t;
}

bool same_parameters(const torch::nn::Module& a, const torch::nn::Module& b) {
    const auto pa = a.named_parameters(true), pb = b.named_parameters(true);
    if (pa.size() != pb.size()) return false;
    for (const auto& item : pa)
        if (!torch::equal(item.value(), pb[item.key()])) return false;
    return true;
}

}  // namespace

TEST_CASE("cosine schedule") {
    CHECK(lr_at(0, 100, 0.1) == doctest::Approx(0.1));
    CHECK(lr_at(100, 100, 0.1) == doctest::Approx(0.0));
    CHECK(lr_at(50, 100, 0.1) == doctest::Approx(0.05));
    for (int s = 1; s <= 100; ++s) CHECK(lr_at(s, 100, 1.0) <= lr_at(s - 1, 100, 1.0));
    CHECK_THROWS_AS(lr_at(101, 100, 0.1), std::out_of_range);
}

TEST_CASE("augment_pair") {
    CrowdSample s;
    s.image = Image(128, 128);
    for (size_t i = 0; i < s.image.pixels.size(); ++i) s.image.pixels[i] = static_cast<float>(i % 97) / 97.f;
    s.points = {{70.5f, 40.5f}, {3.f, 3.f}};
    s.image_index = 12;
    s.weather = 2;
    SplitMix64 rng(1);
    const auto pair = augment_pair(s, 64, 0.5, rng);
    CHECK(pair.view_q.height == 64);
    CHECK(pair.view_k.width == 64);
    CHECK(pair.image_index == 12);
    CHECK(pair.weather == 2);

    // A crop the size of the image with flips disabled leaves nothing random.
    const auto same = augment_pair(s, 128, 0.0, rng);
    CHECK(same.view_q == same.view_k);
    CHECK(same.view_q == s.image);

    const ViewParams v{64, 32, false};
    const auto moved = transform_points(s.points, v, 64);
    REQUIRE(moved.size() == 1);
    CHECK(moved[0].x == doctest::Approx(6.5f));
    CHECK(moved[0].y == doctest::Approx(8.5f));
    const auto corner = transform_points({{64.f, 32.f}}, v, 64);
    REQUIRE(corner.size() == 1);
    CHECK(corner[0].x == 0.f);
    CHECK(corner[0].y == 0.f);
    CHECK(transform_points({{128.f, 40.f}}, v, 64).empty());
    const auto flipped = transform_points(s.points, {64, 32, true}, 64);
    REQUIRE(flipped.size() == 1);
    CHECK(flipped[0].x == doctest::Approx(57.5f));

    // The flipped crop's pixel column c is source column x0 + crop - 1 - c.
    const Image fv = apply_view(s.image, {64, 32, true}, 64);
    CHECK(fv.at(5, 0, 1) == s.image.at(37, 127, 1));
    CHECK_THROWS_AS(augment_pair(s, 256, 0.5, rng), std::invalid_argument);
}

TEST_CASE("train config validation") {
    ModelConfig m;
    TrainConfig t;
    CHECK_NOTHROW(t.validate(m));
    t.crop = 48;
    CHECK_THROWS_AS(t.validate(m), std::invalid_argument);
    t = TrainConfig{};
    t.crr_crop = 40;
    CHECK_THROWS_AS(t.validate(m), std::invalid_argument);
    t = TrainConfig{};
    t.optimizer = "sgd";
    CHECK_THROWS_AS(t.validate(m), std::invalid_argument);
}

TEST_CASE("contra1 at initialization sits below ln of the filled memory") {
    // Full-size model, weights held at their initial values (negligible lr),
    // run until every sub-queue is full.
    ModelConfig model;
    TrainConfig train;
    train.batch_size = 16;
    train.epochs_wrl = 1;
    train.queue_length = 64;
    train.lr = 1e-12;
    DatasetSpec spec;
    spec.train_counts = {64, 64, 64, 64};
    spec.image_height = spec.image_width = 64;
    spec.min_people = 2;
    spec.max_people = 6;
    std::vector<CrowdSample> samples;
    for (int64_t i = 0; i < 256; ++i) {
        auto s = generate_scene(derive_seed(3, static_cast<uint64_t>(i)), spec, static_cast<int>(i % 4));
        s.image_index = i;
        samples.push_back(std::move(s));
    }
    std::vector<double> contra;
    std::vector<size_t> fill;
    TrainHooks hooks;
    hooks.on_step = [&](const LogRecord& r) { contra.push_back(r.contra); };
    hooks.after_step = [&](int64_t, MqclNet&, const MultiQueue* mq) { fill.push_back(mq->size()); };
    train_wrl(model, LossConfig{}, train, to_tensor_dataset(samples, 4), hooks);
    REQUIRE(fill.back() == 256);
    // A random conv encoder already tells instances apart, so an anchor's own
    // key scores above the rest and the loss stays under the uniform value.
    const double uniform = std::log(256.0);
    MESSAGE("contra1 with full memory at init: ", contra.back(), " (ln|A| = ", uniform, ")");
    CHECK(contra.back() > 0.0);
    CHECK(contra.back() < uniform);
    CHECK(contra.front() < std::log(static_cast<double>(fill.front())));
}

TEST_CASE("wrl smoke run, determinism and checkpoint round trip") {
    Toy t = toy();
    std::vector<LogRecord> log_a, log_b;
    TrainHooks ha, hb;
    ha.on_step = [&](const LogRecord& r) { log_a.push_back(r); };
    hb.on_step = [&](const LogRecord& r) { log_b.push_back(r); };
    const Checkpoint a = train_wrl(t.model, t.loss, t.train, t.data, ha);
    train_wrl(t.model, t.loss, t.train, t.data, hb);
    REQUIRE(log_a.size() == 4);
    REQUIRE(log_b.size() == log_a.size());
    for (size_t i = 0; i < log_a.size(); ++i) {
        CHECK(log_a[i].total == log_b[i].total);
        CHECK(std::isfinite(log_a[i].total));
        CHECK(log_a[i].stage == "wrl");
    }
    CHECK(log_a.front().lr == doctest::Approx(t.train.lr));

    CHECK(a.stage == Stage::kPostWrl);
    REQUIRE(a.memory.has_value());
    CHECK(a.memory->size() == 14);  // 8 of 10 normal keys fit
    for (int c = 0; c < 4; ++c) CHECK(a.memory->fill(c) <= t.train.queue_length);

    TempDir dir("ckpt");
    save_checkpoint(a, dir / "a.ckpt");
    const Checkpoint b = load_checkpoint(dir / "a.ckpt");
    CHECK(b.stage == a.stage);
    CHECK(b.num_classes == 4);
    CHECK(b.model.c1 == 32);
    CHECK(b.train.crop == 32);
    CHECK(same_parameters(*a.net, *b.net));
    REQUIRE(b.memory.has_value());
    CHECK(b.memory->all() == a.memory->all());

    torch::NoGradGuard guard;
    const auto x = t.data.images.slice(0, 0, 2);
    MqclNet na = a.net, nb = b.net;
    CHECK(torch::equal(na->head(encode(na->encoder_q, x)), nb->head(encode(nb->encoder_q, x))));

    std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
    CHECK_THROWS(load_checkpoint(dir / "junk.ckpt"));
    CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));
}

TEST_CASE("baseline training builds no memory") {
    Toy t = toy();
    t.train.contrastive = false;
    const Checkpoint c = train_wrl(t.model, t.loss, t.train, t.data);
    CHECK_FALSE(c.memory.has_value());
    CHECK_FALSE(c.has_key_branch);
    CHECK_THROWS_AS(train_crr(c, t.train, t.data), std::invalid_argument);
}

TEST_CASE("crr freezes the encoder, projection and memory") {
    Toy t = toy();
    const Checkpoint wrl = train_wrl(t.model, t.loss, t.train, t.data);
    const Checkpoint crr = train_crr(wrl, t.train, t.data);
    CHECK(crr.stage == Stage::kPostCrr);
    CHECK(same_parameters(*wrl.net->encoder_q, *crr.net->encoder_q));
    CHECK(same_parameters(*wrl.net->proj_q, *crr.net->proj_q));
    CHECK_FALSE(same_parameters(*wrl.net->refiner, *crr.net->refiner));
    CHECK_FALSE(same_parameters(*wrl.net->head, *crr.net->head));
    REQUIRE(crr.memory.has_value());
    CHECK(crr.memory->all() == wrl.memory->all());
    CHECK_THROWS_AS(train_crr(crr, t.train, t.data), std::invalid_argument);

    TempDir dir("crr");
    save_checkpoint(crr, dir / "c.ckpt");
    const Checkpoint back = load_checkpoint(dir / "c.ckpt");
    CHECK(back.stage == Stage::kPostCrr);
    CHECK(same_parameters(*crr.net->refiner, *back.net->refiner));
}

TEST_CASE("crr with lambda2 = 0 leaves the counting head untouched") {
    Toy t = toy();
    Checkpoint wrl = train_wrl(t.model, t.loss, t.train, t.data);
    wrl.loss.lambda2 = 0.0;
    const Checkpoint crr = train_crr(wrl, t.train, t.data);
    CHECK(same_parameters(*wrl.net->head, *crr.net->head));
    CHECK_FALSE(same_parameters(*wrl.net->refiner, *crr.net->refiner));
}

TEST_CASE("crr needs normal-weather keys") {
    Toy t = toy();
    Checkpoint wrl = train_wrl(t.model, t.loss, t.train, t.data);
    MultiQueue no_normal(4, 8, t.model.c2);
    std::vector<float> unit(static_cast<size_t>(t.model.c2), 0.f);
    unit[0] = 1.f;
    no_normal.push({unit, 11, 1});
    wrl.memory = no_normal;
    CHECK_THROWS_AS(train_crr(wrl, t.train, t.data), std::invalid_argument);
}

#include "mqcl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mqcl {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* weather_name(int weather) {
    switch (weather) {
        case 0: return "normal";
        case 1: return "haze";
        case 2: return "rain";
        case 3: return "snow";
        default: return "unknown";
    }
}

void DatasetSpec::validate() const {
    if (train_counts.size() < 2)
        throw std::invalid_argument("DatasetSpec: need at least two weather classes");
    if (train_counts.size() > static_cast<size_t>(kNumWeatherKinds))
        throw std::invalid_argument("DatasetSpec: the generator renders at most 4 weather classes");
    if (!test_counts.empty() && test_counts.size() != train_counts.size())
        throw std::invalid_argument("DatasetSpec: test_counts must match train_counts in length");
    for (int c : train_counts)
        if (c < 0) throw std::invalid_argument("DatasetSpec: negative class count");
    for (int c : test_counts)
        if (c < 0) throw std::invalid_argument("DatasetSpec: negative class count");
    if (train_counts[0] < 1)
        throw std::invalid_argument("DatasetSpec: at least one normal-weather training image is required");
    if (image_height < 64 || image_width < 64)
        throw std::invalid_argument("DatasetSpec: image size must be at least 64x64");
    if (min_people < 0 || max_people < min_people)
        throw std::invalid_argument("DatasetSpec: invalid crowd-count range");
    if (severity.size() < train_counts.size())
        throw std::invalid_argument("DatasetSpec: missing severity range for some class");
    for (const auto& [lo, hi] : severity)
        if (lo < 0.f || hi > 1.f || lo > hi)
            throw std::invalid_argument("DatasetSpec: severity ranges must lie in [0, 1]");
}

std::vector<int> benchmark_mix_counts(int total) {
    if (total < 1) throw std::invalid_argument("benchmark_mix_counts: total must be positive");
    const double mix[kNumWeatherKinds] = {0.88, 0.04, 0.03, 0.05};
    std::vector<int> counts(kNumWeatherKinds);
    int assigned = 0;
    for (int c = 1; c < kNumWeatherKinds; ++c) {
        counts[c] = static_cast<int>(std::floor(mix[c] * total));
        assigned += counts[c];
    }
    counts[0] = total - assigned;
    return counts;
}

// ---------------------------------------------------------------- RNG

uint64_t SplitMix64::next() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

double SplitMix64::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double SplitMix64::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int SplitMix64::uniform_int(int lo, int hi) {
    const auto span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next() % span);
}

double SplitMix64::normal() {
    // Box-Muller; u1 kept away from zero.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

uint64_t derive_seed(uint64_t base, uint64_t stream) {
    SplitMix64 mix(base ^ (stream * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull));
    mix.next();
    return mix.next();
}

// ---------------------------------------------------------------- rendering

namespace {

float clamp01(float v) { return std::clamp(v, 0.f, 1.f); }

float smoothstep(float t) { return t * t * (3.f - 2.f * t); }

// Bilinearly interpolated value noise with one lattice cell size, in [-1, 1].
std::vector<float> noise_octave(int h, int w, int cell, SplitMix64& rng) {
    std::vector<float> out(static_cast<size_t>(h) * w);
    const int gh = h / cell + 2;
    const int gw = w / cell + 2;
    std::vector<float> grid(static_cast<size_t>(gh) * gw);
    for (auto& g : grid) g = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (int y = 0; y < h; ++y) {
        const float fy = static_cast<float>(y) / cell;
        const int y0 = static_cast<int>(fy);
        const float ty = smoothstep(fy - y0);
        for (int x = 0; x < w; ++x) {
            const float fx = static_cast<float>(x) / cell;
            const int x0 = static_cast<int>(fx);
            const float tx = smoothstep(fx - x0);
            const float a = grid[y0 * gw + x0], b = grid[y0 * gw + x0 + 1];
            const float c = grid[(y0 + 1) * gw + x0], d = grid[(y0 + 1) * gw + x0 + 1];
            const float top = a + (b - a) * tx;
            const float bottom = c + (d - c) * tx;
            out[static_cast<size_t>(y) * w + x] = top + (bottom - top) * ty;
        }
    }
    return out;
}

// Illumination and colour cast drift smoothly across the frame, so a crop's
// global colour says little about the image it came from.
Image render_background(int h, int w, SplitMix64& rng) {
    Image img(h, w);
    constexpr int cell = 64;
    constexpr float light_amp = 0.14f, cast_amp = 0.10f, detail_amp = 0.06f;
    const auto light = noise_octave(h, w, cell, rng);
    std::vector<float> cast[3];
    for (auto& c : cast) c = noise_octave(h, w, cell, rng);
    const auto detail16 = noise_octave(h, w, 16, rng);
    const auto detail8 = noise_octave(h, w, 8, rng);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const size_t i = static_cast<size_t>(y) * w + x;
            const float base = 0.55f + light_amp * light[i] + detail_amp * (detail16[i] + 0.5f * detail8[i]);
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = clamp01(base + cast_amp * cast[c][i]);
        }
    return img;
}

// Darkens a Gaussian footprint toward `color`.
void stamp_blob(Image& img, float cx, float cy, float radius, float strength, const float color[3]) {
    const float sigma = radius * 0.5f;
    const int reach = static_cast<int>(std::ceil(radius * 1.5f));
    const int x0 = std::max(0, static_cast<int>(cx) - reach), x1 = std::min(img.width - 1, static_cast<int>(cx) + reach);
    const int y0 = std::max(0, static_cast<int>(cy) - reach), y1 = std::min(img.height - 1, static_cast<int>(cy) + reach);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const float dx = (static_cast<float>(x) + 0.5f) - cx;
            const float dy = (static_cast<float>(y) + 0.5f) - cy;
            const float g = strength * std::exp(-(dx * dx + dy * dy) / (2.f * sigma * sigma));
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = img.at(y, x, c) * (1.f - g) + color[c] * g;
        }
}

void blend_pixel(Image& img, int x, int y, float alpha, float value) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    for (int c = 0; c < 3; ++c) img.at(y, x, c) = img.at(y, x, c) * (1.f - alpha) + value * alpha;
}

Image apply_haze(const Image& src, float severity) {
    Image out = src;
    const float mix = 0.8f * severity;
    const float veil = 0.75f;
    for (float& v : out.pixels) v = clamp01((1.f - mix) * v + mix * veil);
    return out;
}

Image apply_rain(const Image& src, float severity, SplitMix64& rng) {
    Image out = src;
    for (float& v : out.pixels) v *= 1.f - 0.15f * severity;
    const double angle = rng.uniform(1.15, 1.35);  // radians from horizontal, shared by all streaks
    const double dx = std::cos(angle), dy = std::sin(angle);
    const int streaks = static_cast<int>(std::round(severity * src.height * src.width / 40.0));
    for (int s = 0; s < streaks; ++s) {
        const double sx = rng.uniform(0.0, src.width), sy = rng.uniform(-8.0, src.height);
        const int length = rng.uniform_int(8, 16);
        const float alpha = static_cast<float>(severity * rng.uniform(0.35, 0.6));
        for (int t = 0; t < length; ++t)
            blend_pixel(out, static_cast<int>(sx + dx * t), static_cast<int>(sy + dy * t), alpha, 0.85f);
    }
    return out;
}

Image apply_snow(const Image& src, float severity, SplitMix64& rng) {
    Image out = src;
    const float veil = 0.2f * severity;
    for (float& v : out.pixels) v = (1.f - veil) * v + veil;
    const int flakes = static_cast<int>(std::round(severity * src.height * src.width / 30.0));
    for (int f = 0; f < flakes; ++f) {
        const double fx = rng.uniform(0.0, src.width), fy = rng.uniform(0.0, src.height);
        const double r = rng.uniform(0.6, 2.2);
        const float alpha = static_cast<float>(severity * rng.uniform(0.6, 1.0));
        const int reach = static_cast<int>(std::ceil(r));
        for (int y = static_cast<int>(fy) - reach; y <= static_cast<int>(fy) + reach; ++y)
            for (int x = static_cast<int>(fx) - reach; x <= static_cast<int>(fx) + reach; ++x) {
                const double ddx = x + 0.5 - fx, ddy = y + 0.5 - fy;
                if (ddx * ddx + ddy * ddy <= r * r) blend_pixel(out, x, y, alpha, 1.f);
            }
    }
    for (float& v : out.pixels) v = clamp01(v);
    return out;
}

}  // namespace

Image apply_weather(const Image& image, int weather, float severity, uint64_t rng_seed) {
    if (weather < 0 || weather >= kNumWeatherKinds)
        throw std::invalid_argument("apply_weather: unknown weather class " + std::to_string(weather));
    if (severity < 0.f || severity > 1.f)
        throw std::invalid_argument("apply_weather: severity must lie in [0, 1]");
    if (weather == static_cast<int>(Weather::kNormal) || severity == 0.f) return image;
    SplitMix64 rng(rng_seed);
    switch (static_cast<Weather>(weather)) {
        case Weather::kHaze: return apply_haze(image, severity);
        case Weather::kRain: return apply_rain(image, severity, rng);
        case Weather::kSnow: return apply_snow(image, severity, rng);
        default: return image;
    }
}

CrowdSample generate_scene(uint64_t rng_seed, const DatasetSpec& spec, int weather) {
    if (spec.image_height < 64 || spec.image_width < 64)
        throw std::invalid_argument("generate_scene: image size must be at least 64x64");
    if (weather < 0 || weather >= spec.num_classes())
        throw std::invalid_argument("generate_scene: weather id out of range");
    SplitMix64 rng(rng_seed);
    const int h = spec.image_height, w = spec.image_width;

    CrowdSample sample;
    sample.weather = weather;
    sample.image = render_background(h, w, rng);

    const int people = rng.uniform_int(spec.min_people, spec.max_people);
    sample.points.reserve(people);
    for (int i = 0; i < people; ++i) {
        const float cx = static_cast<float>(rng.uniform(2.0, w - 2.0));
        const float cy = static_cast<float>(rng.uniform(2.0, h - 2.0));
        const float radius = static_cast<float>(rng.uniform(3.0, 6.0));
        const float strength = static_cast<float>(rng.uniform(0.65, 0.9));
        const float shade = static_cast<float>(rng.uniform(0.05, 0.25));
        const float color[3] = {shade + 0.05f, shade, shade * 0.8f};
        stamp_blob(sample.image, cx, cy, radius, strength, color);
        sample.points.push_back({cx, cy});
    }

    const auto [lo, hi] = spec.severity.at(weather);
    const float severity = static_cast<float>(rng.uniform(lo, hi));
    sample.image = apply_weather(sample.image, weather, severity, rng.next());
    return sample;
}

// ---------------------------------------------------------------- I/O

void write_ppm(const Image& image, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    std::vector<unsigned char> bytes(image.pixels.size());
    std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(),
                   [](float v) { return static_cast<unsigned char>(std::lround(clamp01(v) * 255.f)); });
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

Image read_ppm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    auto next_token = [&]() {
        std::string tok;
        while (in >> std::ws && in.peek() == '#') in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
        in >> tok;
        return tok;
    };
    if (next_token() != "P6") throw std::runtime_error(path.string() + ": not a binary PPM");
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    if (std::stoi(next_token()) != 255) throw std::runtime_error(path.string() + ": only 8-bit PPM supported");
    in.get();
    Image img(h, w);
    std::vector<unsigned char> bytes(img.pixels.size());
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw std::runtime_error(path.string() + ": truncated pixel data");
    std::transform(bytes.begin(), bytes.end(), img.pixels.begin(), [](unsigned char b) { return b / 255.f; });
    return img;
}

Image quantize_8bit(const Image& image) {
    Image out = image;
    for (float& v : out.pixels) v = static_cast<float>(std::lround(clamp01(v) * 255.f)) / 255.f;
    return out;
}

std::vector<int> Manifest::class_histogram(const std::string& split) const {
    std::vector<int> hist(num_classes, 0);
    for (const auto& e : entries)
        if (split.empty() || e.split == split) ++hist.at(e.weather);
    return hist;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

}  // namespace

Manifest generate_dataset(const DatasetSpec& spec, const fs::path& out_dir) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir / "images", ec);
    if (!ec) fs::create_directories(out_dir / "annotations", ec);
    if (ec) throw std::runtime_error("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

    Manifest manifest;
    manifest.num_classes = spec.num_classes();
    manifest.image_height = spec.image_height;
    manifest.image_width = spec.image_width;
    manifest.seed = spec.seed;

    int64_t next_index = 0;
    auto emit_split = [&](const std::vector<int>& counts, const std::string& split) {
        for (int cls = 0; cls < static_cast<int>(counts.size()); ++cls)
            for (int k = 0; k < counts[cls]; ++k) {
                const int64_t index = next_index++;
                const CrowdSample sample = generate_scene(derive_seed(spec.seed, index), spec, cls);
                char stem[32];
                std::snprintf(stem, sizeof(stem), "%06lld", static_cast<long long>(index));
                ManifestEntry entry{index, std::string("images/") + stem + ".ppm",
                                    std::string("annotations/") + stem + ".json", cls, split};
                write_ppm(sample.image, out_dir / entry.image_path);
                json ann;
                ann["image_index"] = index;
                ann["weather"] = cls;
                ann["points"] = json::array();
                for (const auto& p : sample.points) ann["points"].push_back({p.x, p.y});
                write_text(out_dir / entry.annotation_path, ann.dump() + "\n");
                manifest.entries.push_back(std::move(entry));
            }
    };
    emit_split(spec.train_counts, "train");
    emit_split(spec.test_counts, "test");

    json doc;
    doc["format"] = "mqcl-dataset-v1";
    doc["num_classes"] = manifest.num_classes;
    doc["class_names"] = json::array();
    for (int c = 0; c < manifest.num_classes; ++c) doc["class_names"].push_back(weather_name(c));
    doc["image_height"] = manifest.image_height;
    doc["image_width"] = manifest.image_width;
    doc["seed"] = manifest.seed;
    doc["entries"] = json::array();
    for (const auto& e : manifest.entries)
        doc["entries"].push_back({{"image_index", e.image_index},
                                  {"image", e.image_path},
                                  {"annotation", e.annotation_path},
                                  {"weather", e.weather},
                                  {"split", e.split}});
    write_text(out_dir / "manifest.json", doc.dump(1) + "\n");
    return manifest;
}

Manifest load_manifest(const fs::path& dataset_dir) {
    const json doc = read_json(dataset_dir / "manifest.json");
    Manifest m;
    try {
        m.num_classes = doc.at("num_classes").get<int>();
        m.image_height = doc.at("image_height").get<int>();
        m.image_width = doc.at("image_width").get<int>();
        m.seed = doc.value("seed", uint64_t{0});
        for (const auto& e : doc.at("entries"))
            m.entries.push_back({e.at("image_index").get<int64_t>(), e.at("image").get<std::string>(),
                                 e.at("annotation").get<std::string>(), e.at("weather").get<int>(),
                                 e.at("split").get<std::string>()});
    } catch (const json::exception& e) {
        throw std::runtime_error((dataset_dir / "manifest.json").string() + ": " + e.what());
    }
    for (const auto& e : m.entries)
        if (e.weather < 0 || e.weather >= m.num_classes)
            throw std::runtime_error("manifest entry " + std::to_string(e.image_index) + " has weather id out of range");
    return m;
}

std::vector<CrowdSample> load_split(const fs::path& dataset_dir, const std::string& split) {
    const Manifest m = load_manifest(dataset_dir);
    std::vector<CrowdSample> samples;
    for (const auto& e : m.entries) {
        if (!split.empty() && e.split != split) continue;
        CrowdSample s;
        s.image = read_ppm(dataset_dir / e.image_path);
        s.weather = e.weather;
        s.image_index = e.image_index;
        const json ann = read_json(dataset_dir / e.annotation_path);
        for (const auto& p : ann.at("points")) s.points.push_back({p.at(0).get<float>(), p.at(1).get<float>()});
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace mqcl

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace mqcl {

// Weather class ids. Id 0 is always the normal-weather class.
enum class Weather : int { kNormal = 0, kHaze = 1, kRain = 2, kSnow = 3 };

inline constexpr int kNumWeatherKinds = 4;

const char* weather_name(int weather);

struct Point {
    float x = 0.f;
    float y = 0.f;
};

// Row-major H x W x 3 image with channel values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, float fill = 0.f)
        : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, fill) {}

    float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    bool operator==(const Image&) const = default;
};

struct CrowdSample {
    Image image;
    std::vector<Point> points;
    int weather = 0;
    int64_t image_index = 0;
};

// Parameters of a synthetic weather-imbalanced crowd dataset.
//
// `train_counts[c]` is the number of training images of weather class c;
// `test_counts` follows the same layout and may be empty. The number of
// classes B is the length of `train_counts`.
struct DatasetSpec {
    std::vector<int> train_counts{340, 20, 20, 20};
    std::vector<int> test_counts{};
    int image_height = 128;
    int image_width = 128;
    int min_people = 10;
    int max_people = 40;
    // Per-class corruption severity range; entry 0 (normal) is ignored.
    std::vector<std::pair<float, float>> severity{{0.f, 0.f}, {0.5f, 0.9f}, {0.5f, 0.9f}, {0.5f, 0.9f}};
    uint64_t seed = 0;

    int num_classes() const { return static_cast<int>(train_counts.size()); }
    // Throws std::invalid_argument describing the first violated constraint.
    void validate() const;
};

// Class counts for `total` images using the normal/haze/rain/snow mix
// 88/4/3/5 percent. Rounding remainders go to the normal class.
std::vector<int> benchmark_mix_counts(int total);

// Deterministic 64-bit generator (splitmix64) with a few helpers. Used instead
// of <random> distributions so datasets are identical across standard libraries.
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}
    uint64_t next();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);   // [lo, hi)
    int uniform_int(int lo, int hi);        // inclusive
    double normal();

private:
    uint64_t state_;
};

uint64_t derive_seed(uint64_t base, uint64_t stream);

// Renders one scene of Gaussian head blobs on a value-noise background and
// applies the weather corruption with a severity drawn from `spec`.
CrowdSample generate_scene(uint64_t rng_seed, const DatasetSpec& spec, int weather);

// Applies a synthetic weather corruption. Severity 0 and the normal class are
// the identity. `rng_seed` controls streak/flake placement.
Image apply_weather(const Image& image, int weather, float severity, uint64_t rng_seed = 0);

struct ManifestEntry {
    int64_t image_index = 0;
    std::string image_path;       // relative to the dataset root
    std::string annotation_path;  // relative to the dataset root
    int weather = 0;
    std::string split;            // "train" or "test"
};

struct Manifest {
    int num_classes = 0;
    int image_height = 0;
    int image_width = 0;
    uint64_t seed = 0;
    std::vector<ManifestEntry> entries;

    std::vector<int> class_histogram(const std::string& split = "") const;
};

// Writes images (binary PPM), per-image JSON annotations and manifest.json.
Manifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);

Manifest load_manifest(const std::filesystem::path& dataset_dir);

// Loads every sample of `split` ("" loads all), in manifest order.
std::vector<CrowdSample> load_split(const std::filesystem::path& dataset_dir, const std::string& split);

void write_ppm(const Image& image, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

// Images are stored with 8-bit depth; this reproduces the on-disk rounding.
Image quantize_8bit(const Image& image);

}  // namespace mqcl

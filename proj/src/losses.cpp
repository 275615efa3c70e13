#include "mqcl/losses.hpp"

#include <stdexcept>

namespace mqcl {

Reduction parse_reduction(const std::string& name) {
    if (name == "mean") return Reduction::kMean;
    if (name == "sum") return Reduction::kSum;
    throw std::invalid_argument("unknown loss reduction '" + name + "'");
}

const char* reduction_name(Reduction r) { return r == Reduction::kMean ? "mean" : "sum"; }

PositiveSelection parse_positive_selection(const std::string& name) {
    if (name == "same-image") return PositiveSelection::kSameImage;
    if (name == "same-weather-label") return PositiveSelection::kSameWeather;
    throw std::invalid_argument("unknown positive selection '" + name + "'");
}

const char* positive_selection_name(PositiveSelection p) {
    return p == PositiveSelection::kSameImage ? "same-image" : "same-weather-label";
}

void LossConfig::validate() const {
    if (!(tau > 0.0)) throw std::invalid_argument("LossConfig: tau must be positive");
    if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("LossConfig: lambdas must be nonnegative");
    if (!(sigma_bl > 0.0)) throw std::invalid_argument("LossConfig: sigma_bl must be positive");
}

torch::Tensor keys_tensor(const KeySnapshot& snapshot, torch::ScalarType dtype) {
    const auto rows = static_cast<int64_t>(snapshot.size());
    if (rows == 0) return torch::empty({0, snapshot.dim}, dtype);
    auto t = torch::from_blob(const_cast<float*>(snapshot.keys.data()), {rows, snapshot.dim}, torch::kFloat32);
    return t.to(dtype).clone();
}

torch::Tensor same_image_mask(std::span<const int64_t> anchor_image_index, const KeySnapshot& snapshot) {
    const auto n = static_cast<int64_t>(anchor_image_index.size());
    const auto m = static_cast<int64_t>(snapshot.size());
    auto mask = torch::zeros({n, m}, torch::kBool);
    auto acc = mask.accessor<bool, 2>();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) acc[i][j] = snapshot.image_index[j] == anchor_image_index[i];
    return mask;
}

torch::Tensor same_weather_mask(std::span<const int> anchor_weather, const KeySnapshot& snapshot) {
    const auto n = static_cast<int64_t>(anchor_weather.size());
    const auto m = static_cast<int64_t>(snapshot.size());
    auto mask = torch::zeros({n, m}, torch::kBool);
    auto acc = mask.accessor<bool, 2>();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) acc[i][j] = snapshot.weather[j] == anchor_weather[i];
    return mask;
}

torch::Tensor class_mask(int64_t num_anchors, const KeySnapshot& snapshot, int weather) {
    const auto m = static_cast<int64_t>(snapshot.size());
    auto row = torch::zeros({m}, torch::kBool);
    auto acc = row.accessor<bool, 1>();
    for (int64_t j = 0; j < m; ++j) acc[j] = snapshot.weather[j] == weather;
    return row.unsqueeze(0).expand({num_anchors, m}).clone();
}

torch::Tensor info_nce_from_logits(const torch::Tensor& logits, const torch::Tensor& positive_mask,
                                   Reduction reduction) {
    if (logits.dim() != 2 || logits.size(0) == 0) throw std::invalid_argument("info_nce: no anchors");
    if (logits.size(1) == 0) throw std::invalid_argument("info_nce: empty key memory");
    if (!positive_mask.sizes().equals(logits.sizes()))
        throw std::invalid_argument("info_nce: mask shape does not match logits");
    const auto mask = positive_mask.to(logits.scalar_type());
    const auto counts = mask.sum(1);
    if ((counts == 0).any().item<bool>())
        throw std::invalid_argument("info_nce: an anchor has no positive key (push keys before computing the loss)");
    const auto log_prob = torch::log_softmax(logits, 1);
    const auto per_anchor = -(log_prob * mask).sum(1) / counts;
    return reduction == Reduction::kMean ? per_anchor.mean() : per_anchor.sum();
}

torch::Tensor masked_info_nce(const torch::Tensor& anchors, const torch::Tensor& keys,
                              const torch::Tensor& positive_mask, double tau, Reduction reduction) {
    if (!(tau > 0.0)) throw std::invalid_argument("info_nce: tau must be positive");
    if (anchors.dim() != 2 || keys.dim() != 2 || (keys.size(0) > 0 && anchors.size(1) != keys.size(1)))
        throw std::invalid_argument("info_nce: anchors and keys must be (I, D) and (M, D)");
    const auto logits = torch::matmul(anchors, keys.to(anchors.scalar_type()).t()) / tau;
    return info_nce_from_logits(logits, positive_mask, reduction);
}

torch::Tensor contra1(const torch::Tensor& anchors, std::span<const int64_t> anchor_image_index,
                      const KeySnapshot& memory, const LossConfig& cfg, PositiveSelection selection,
                      std::span<const int> anchor_weather) {
    if (memory.size() == 0) throw std::invalid_argument("contra1: key memory is empty");
    if (static_cast<int64_t>(anchor_image_index.size()) != anchors.size(0))
        throw std::invalid_argument("contra1: one image index per anchor required");
    torch::Tensor mask;
    if (selection == PositiveSelection::kSameImage) {
        mask = same_image_mask(anchor_image_index, memory);
    } else {
        if (static_cast<int64_t>(anchor_weather.size()) != anchors.size(0))
            throw std::invalid_argument("contra1: one weather label per anchor required");
        mask = same_weather_mask(anchor_weather, memory);
    }
    return masked_info_nce(anchors, keys_tensor(memory, anchors.scalar_type()), mask, cfg.tau, cfg.reduction);
}

torch::Tensor contra1(const torch::Tensor& anchors, std::span<const int64_t> anchor_image_index,
                      const MultiQueue& memory, const LossConfig& cfg) {
    return contra1(anchors, anchor_image_index, memory.snapshot(), cfg);
}

torch::Tensor contra2(const torch::Tensor& anchors, const KeySnapshot& memory, int normal_class,
                      const LossConfig& cfg) {
    if (memory.size() == 0) throw std::invalid_argument("contra2: key memory is empty");
    auto mask = class_mask(anchors.size(0), memory, normal_class);
    if (anchors.size(0) > 0 && !mask[0].any().item<bool>())
        throw std::invalid_argument("contra2: the normal-weather sub-queue is empty");
    return masked_info_nce(anchors, keys_tensor(memory, anchors.scalar_type()), mask, cfg.tau, cfg.reduction);
}

torch::Tensor contra2(const torch::Tensor& anchors, const MultiQueue& memory, int normal_class,
                      const LossConfig& cfg) {
    if (memory.of_class(normal_class).empty())
        throw std::invalid_argument("contra2: the normal-weather sub-queue is empty");
    return contra2(anchors, memory.snapshot(), normal_class, cfg);
}

torch::Tensor bayesian_loss(const torch::Tensor& density, std::span<const Point> points, double sigma) {
    if (density.dim() != 2) throw std::invalid_argument("bayesian_loss: density must be (H, W)");
    if (!(sigma > 0.0)) throw std::invalid_argument("bayesian_loss: sigma must be positive");
    if ((density < 0).any().item<bool>()) throw std::invalid_argument("bayesian_loss: negative density values");
    if (points.empty()) return density.sum().abs();

    const int64_t h = density.size(0), w = density.size(1);
    const auto opts = torch::TensorOptions().dtype(density.scalar_type());
    auto pts = torch::empty({static_cast<int64_t>(points.size()), 2}, torch::kFloat64);
    auto acc = pts.accessor<double, 2>();
    for (size_t n = 0; n < points.size(); ++n) {
        const auto& p = points[n];
        if (p.x < 0.f || p.y < 0.f || p.x > w || p.y > h)
            throw std::invalid_argument("bayesian_loss: annotation outside the density grid");
        acc[n][0] = p.x;
        acc[n][1] = p.y;
    }
    pts = pts.to(density.scalar_type());
    const auto ys = torch::arange(h, opts) + 0.5;
    const auto xs = torch::arange(w, opts) + 0.5;
    // (N, H*W) squared distances from each annotation to each cell center.
    const auto dy = (pts.select(1, 1).unsqueeze(1) - ys.unsqueeze(0)).pow(2);  // (N, H)
    const auto dx = (pts.select(1, 0).unsqueeze(1) - xs.unsqueeze(0)).pow(2);  // (N, W)
    const auto dist2 = (dy.unsqueeze(2) + dx.unsqueeze(1)).reshape({-1, h * w});
    const auto posterior = torch::softmax(-dist2 / (2.0 * sigma * sigma), 0);
    const auto expected = torch::matmul(posterior, density.reshape({h * w}));
    return (1.0 - expected).abs().sum();
}

torch::Tensor bayesian_loss_batch(const torch::Tensor& density, const std::vector<std::vector<Point>>& points,
                                  double sigma) {
    if (density.dim() != 3 || density.size(0) != static_cast<int64_t>(points.size()))
        throw std::invalid_argument("bayesian_loss_batch: one annotation list per density map required");
    std::vector<torch::Tensor> terms;
    terms.reserve(points.size());
    for (size_t i = 0; i < points.size(); ++i)
        terms.push_back(bayesian_loss(density[static_cast<int64_t>(i)], points[i], sigma));
    return torch::stack(terms).mean();
}

}  // namespace mqcl

#pragma once

#include <torch/torch.h>

#include <span>
#include <string>
#include <vector>

#include "mqcl/datagen.hpp"
#include "mqcl/multiqueue.hpp"

namespace mqcl {

// How per-anchor contrastive terms are combined over a batch.
enum class Reduction { kMean, kSum };

Reduction parse_reduction(const std::string& name);
const char* reduction_name(Reduction r);

struct LossConfig {
    double tau = 0.05;
    double lambda1 = 10.0;   // Bayesian-loss weight in the WRL stage
    double lambda2 = 10.0;   // Bayesian-loss weight in the CRR stage
    double sigma_bl = 4.0;   // posterior Gaussian width, in density-grid cells
    Reduction reduction = Reduction::kMean;

    void validate() const;
};

// Which queue entries count as positives for an anchor during WRL.
enum class PositiveSelection { kSameImage, kSameWeather };

PositiveSelection parse_positive_selection(const std::string& name);
const char* positive_selection_name(PositiveSelection p);

// Row-major (M, C2) tensor of the snapshot's keys, detached.
torch::Tensor keys_tensor(const KeySnapshot& snapshot, torch::ScalarType dtype = torch::kFloat32);

// (I, M) boolean masks of positives.
torch::Tensor same_image_mask(std::span<const int64_t> anchor_image_index, const KeySnapshot& snapshot);
torch::Tensor same_weather_mask(std::span<const int> anchor_weather, const KeySnapshot& snapshot);
torch::Tensor class_mask(int64_t num_anchors, const KeySnapshot& snapshot, int weather);

// For each anchor i: -(1/|P(i)|) sum_{p in P(i)} log softmax(logits_i)[p],
// reduced over anchors. Throws if the logits are empty or any anchor has no
// positive.
torch::Tensor info_nce_from_logits(const torch::Tensor& logits, const torch::Tensor& positive_mask,
                                   Reduction reduction);

// Logits are anchor-key dot products divided by tau.
torch::Tensor masked_info_nce(const torch::Tensor& anchors, const torch::Tensor& keys,
                              const torch::Tensor& positive_mask, double tau, Reduction reduction);

// Multi-queue contrastive loss: positives are the stored keys with the anchor's
// image index (or, with kSameWeather, the anchor's weather label); the
// denominator runs over every filled entry.
torch::Tensor contra1(const torch::Tensor& anchors, std::span<const int64_t> anchor_image_index,
                      const KeySnapshot& memory, const LossConfig& cfg,
                      PositiveSelection selection = PositiveSelection::kSameImage,
                      std::span<const int> anchor_weather = {});
torch::Tensor contra1(const torch::Tensor& anchors, std::span<const int64_t> anchor_image_index,
                      const MultiQueue& memory, const LossConfig& cfg);

// Refinement contrastive loss: every stored key of `normal_class` is a
// positive for every anchor.
torch::Tensor contra2(const torch::Tensor& anchors, const KeySnapshot& memory, int normal_class,
                      const LossConfig& cfg);
torch::Tensor contra2(const torch::Tensor& anchors, const MultiQueue& memory, int normal_class,
                      const LossConfig& cfg);

// Point-supervised count loss on one (H, W) density map. Points are in
// density-grid coordinates (cell (i, j) is centered at (j + 0.5, i + 0.5)).
// Each annotation's expected count is the density weighted by its Gaussian
// posterior; the loss is sum_n |1 - E[c_n]|, or the total mass when there
// are no annotations.
torch::Tensor bayesian_loss(const torch::Tensor& density, std::span<const Point> points, double sigma);

// Mean of bayesian_loss over an (N, H, W) batch.
torch::Tensor bayesian_loss_batch(const torch::Tensor& density, const std::vector<std::vector<Point>>& points,
                                  double sigma);

// Stage totals: contrastive + lambda * bayesian.
inline double wrl_total(double contra, double bayes, double lambda1) { return contra + lambda1 * bayes; }
inline double crr_total(double contra, double bayes, double lambda2) { return contra + lambda2 * bayes; }
inline torch::Tensor wrl_total(const torch::Tensor& contra, const torch::Tensor& bayes, double lambda1) {
    return contra + lambda1 * bayes;
}
inline torch::Tensor crr_total(const torch::Tensor& contra, const torch::Tensor& bayes, double lambda2) {
    return contra + lambda2 * bayes;
}

}  // namespace mqcl

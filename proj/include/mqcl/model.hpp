#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace mqcl {

struct ModelConfig {
    int stride = 32;          // encoder output stride; 4 * 2^(stages-1)
    int c1 = 192;             // representation channels
    int c2 = 128;             // projection dimension
    int proj_hidden = 512;    // projection MLP hidden width
    int refiner_depth = 3;    // ConvNeXt blocks in the refiner
    int blocks_per_stage = 1;
    int head_width = 64;
    int head_upsample = 4;    // product of the head's x2 transposed convolutions
    double momentum = 0.999;  // momentum-encoder coefficient
    // Fixed input standardization (x - mean) / scale applied by the encoder.
    double input_mean = 0.5;
    double input_scale = 0.1;

    int num_stages() const;
    // Density-map stride relative to the input image.
    int density_stride() const { return stride / head_upsample; }
    void validate() const;
};

// Channels-last layer norm applied to an NCHW tensor.
class LayerNorm2dImpl : public torch::nn::Module {
public:
    explicit LayerNorm2dImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(LayerNorm2d);

// depthwise 7x7 -> LN -> 1x1 (4x) -> GELU -> 1x1 -> residual add.
class ConvNeXtBlockImpl : public torch::nn::Module {
public:
    ConvNeXtBlockImpl(int64_t dim, bool zero_init_last);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d dwconv_{nullptr};
    torch::nn::LayerNorm norm_{nullptr};
    torch::nn::Linear pw1_{nullptr};
    torch::nn::Linear pw2_{nullptr};
};
TORCH_MODULE(ConvNeXtBlock);

// Small ConvNeXt-style encoder: two overlapping 3x3 stride-2 convolutions as
// the stem, then stages joined by 2x2 strided downsampling.
// Output is (N, C1, H/stride, W/stride).
class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(const ModelConfig& cfg);
    torch::Tensor forward(const torch::Tensor& images);

    int stride() const { return stride_; }
    int channels() const { return channels_; }

private:
    int stride_;
    int channels_;
    double input_mean_;
    double input_scale_;
    torch::nn::Sequential layers_{nullptr};
};
TORCH_MODULE(Encoder);

// Global average pool -> Linear -> ReLU -> Linear -> L2 normalize.
class ProjectionHeadImpl : public torch::nn::Module {
public:
    ProjectionHeadImpl(int64_t in_channels, int64_t hidden, int64_t out_dim);
    torch::Tensor forward(const torch::Tensor& representation);

private:
    int64_t in_channels_;
    torch::nn::Linear fc1_{nullptr};
    torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(ProjectionHead);

// Residual ConvNeXt blocks whose last pointwise layer starts at zero, so a
// fresh refiner is the identity map.
class RefinerImpl : public torch::nn::Module {
public:
    RefinerImpl(int64_t channels, int depth);
    torch::Tensor forward(const torch::Tensor& representation);

private:
    int64_t channels_;
    torch::nn::Sequential blocks_{nullptr};
};
TORCH_MODULE(Refiner);

// Transposed-convolution upsampler producing a nonnegative (N, H', W') density.
class CountingHeadImpl : public torch::nn::Module {
public:
    CountingHeadImpl(int64_t in_channels, int64_t width, int upsample);
    torch::Tensor forward(const torch::Tensor& representation);

private:
    torch::nn::Sequential layers_{nullptr};
};
TORCH_MODULE(CountingHead);

// Every trainable block of the two-stage pipeline.
class MqclNetImpl : public torch::nn::Module {
public:
    explicit MqclNetImpl(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }

    // Copies E_Q/P_Q weights into E_K/P_K.
    void sync_key_branch();

    Encoder encoder_q{nullptr};
    Encoder encoder_k{nullptr};
    ProjectionHead proj_q{nullptr};
    ProjectionHead proj_k{nullptr};
    CountingHead head{nullptr};
    Refiner refiner{nullptr};

private:
    ModelConfig cfg_;
};
TORCH_MODULE(MqclNet);

// Throws std::invalid_argument when the spatial size is not a multiple of the
// encoder stride.
torch::Tensor encode(Encoder& encoder, const torch::Tensor& images);

// Every target parameter <- m * target + (1 - m) * source. The modules must
// have identical parameter names and shapes.
void momentum_update(torch::nn::Module& target, const torch::nn::Module& source, double m);

void set_trainable(torch::nn::Module& module, bool trainable);

}  // namespace mqcl

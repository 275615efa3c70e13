#include "mqcl/model.hpp"

#include <stdexcept>

namespace mqcl {

namespace F = torch::nn::functional;

int ModelConfig::num_stages() const {
    int stages = 1;
    for (int s = 4; s < stride; s *= 2) ++stages;
    return stages;
}

void ModelConfig::validate() const {
    if (stride < 4 || (stride & (stride - 1)) != 0)
        throw std::invalid_argument("ModelConfig: stride must be a power of two >= 4");
    if (c1 <= 0 || c2 <= 0 || proj_hidden <= 0 || head_width <= 0 || blocks_per_stage <= 0)
        throw std::invalid_argument("ModelConfig: dimensions must be positive");
    if (refiner_depth < 0) throw std::invalid_argument("ModelConfig: refiner depth must be >= 0");
    if (head_upsample < 2 || (head_upsample & (head_upsample - 1)) != 0)
        throw std::invalid_argument("ModelConfig: head upsample must be a power of two >= 2");
    if (stride % head_upsample != 0)
        throw std::invalid_argument("ModelConfig: stride must be divisible by the head upsample factor");
    if ((c1 >> (num_stages() - 1)) < 1 || c1 % (1 << (num_stages() - 1)) != 0)
        throw std::invalid_argument("ModelConfig: c1 must be divisible by 2^(stages-1)");
    if (momentum < 0.0 || momentum > 1.0) throw std::invalid_argument("ModelConfig: momentum must lie in [0, 1]");
    if (!(input_scale > 0.0)) throw std::invalid_argument("ModelConfig: input scale must be positive");
}

LayerNorm2dImpl::LayerNorm2dImpl(int64_t channels) {
    norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels}).eps(1e-6)));
}

torch::Tensor LayerNorm2dImpl::forward(const torch::Tensor& x) {
    return norm_(x.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});
}

ConvNeXtBlockImpl::ConvNeXtBlockImpl(int64_t dim, bool zero_init_last) {
    dwconv_ = register_module("dwconv", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 7).padding(3).groups(dim)));
    norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
    pw1_ = register_module("pw1", torch::nn::Linear(dim, 4 * dim));
    pw2_ = register_module("pw2", torch::nn::Linear(4 * dim, dim));
    if (zero_init_last) {
        torch::NoGradGuard guard;
        pw2_->weight.zero_();
        pw2_->bias.zero_();
    }
}

torch::Tensor ConvNeXtBlockImpl::forward(const torch::Tensor& x) {
    auto y = dwconv_(x).permute({0, 2, 3, 1});
    y = pw2_(F::gelu(pw1_(norm_(y))));
    return x + y.permute({0, 3, 1, 2});
}

EncoderImpl::EncoderImpl(const ModelConfig& cfg)
    : stride_(cfg.stride), channels_(cfg.c1), input_mean_(cfg.input_mean), input_scale_(cfg.input_scale) {
    cfg.validate();
    const int stages = cfg.num_stages();
    std::vector<int64_t> dims(stages);
    for (int i = 0; i < stages; ++i) dims[i] = cfg.c1 >> (stages - 1 - i);

    torch::nn::Sequential seq;
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(3, dims[0], 3).stride(2).padding(1)));
    seq->push_back(torch::nn::GELU());
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(dims[0], dims[0], 3).stride(2).padding(1)));
    seq->push_back(LayerNorm2d(dims[0]));
    for (int i = 0; i < stages; ++i) {
        if (i > 0) {
            seq->push_back(LayerNorm2d(dims[i - 1]));
            seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(dims[i - 1], dims[i], 2).stride(2)));
        }
        for (int b = 0; b < cfg.blocks_per_stage; ++b) seq->push_back(ConvNeXtBlock(dims[i], false));
    }
    seq->push_back(LayerNorm2d(dims.back()));
    layers_ = register_module("layers", seq);
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& images) {
    return layers_->forward((images - input_mean_) / input_scale_);
}

torch::Tensor encode(Encoder& encoder, const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != 3)
        throw std::invalid_argument("encode: expected an (N, 3, H, W) batch");
    const int s = encoder->stride();
    if (images.size(2) % s != 0 || images.size(3) % s != 0)
        throw std::invalid_argument("encode: input " + std::to_string(images.size(2)) + "x" +
                                    std::to_string(images.size(3)) + " is not divisible by stride " +
                                    std::to_string(s));
    return encoder->forward(images);
}

ProjectionHeadImpl::ProjectionHeadImpl(int64_t in_channels, int64_t hidden, int64_t out_dim)
    : in_channels_(in_channels) {
    fc1_ = register_module("fc1", torch::nn::Linear(in_channels, hidden));
    fc2_ = register_module("fc2", torch::nn::Linear(hidden, out_dim));
}

torch::Tensor ProjectionHeadImpl::forward(const torch::Tensor& representation) {
    if (representation.dim() != 4 || representation.size(1) != in_channels_)
        throw std::invalid_argument("ProjectionHead: expected (N, " + std::to_string(in_channels_) + ", H, W)");
    auto pooled = representation.mean({2, 3});
    auto v = fc2_(torch::relu(fc1_(pooled)));
    // eps keeps a degenerate all-zero output finite instead of NaN.
    return F::normalize(v, F::NormalizeFuncOptions().p(2).dim(1).eps(1e-12));
}

RefinerImpl::RefinerImpl(int64_t channels, int depth) : channels_(channels) {
    torch::nn::Sequential seq;
    for (int i = 0; i < depth; ++i) seq->push_back(ConvNeXtBlock(channels, true));
    blocks_ = register_module("blocks", seq);
}

torch::Tensor RefinerImpl::forward(const torch::Tensor& representation) {
    if (representation.dim() != 4 || representation.size(1) != channels_)
        throw std::invalid_argument("Refiner: channel mismatch, expected " + std::to_string(channels_));
    if (blocks_->is_empty()) return representation;
    return blocks_->forward(representation);
}

CountingHeadImpl::CountingHeadImpl(int64_t in_channels, int64_t width, int upsample) {
    torch::nn::Sequential seq;
    int64_t in = in_channels;
    for (int f = upsample; f > 2; f /= 2) {
        seq->push_back(torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, width, 2).stride(2)));
        seq->push_back(torch::nn::ReLU());
        in = width;
    }
    torch::nn::ConvTranspose2d last(torch::nn::ConvTranspose2dOptions(in, 1, 2).stride(2));
    {
        // softplus(-2) ~ 0.13 per cell: a sparse starting density.
        torch::NoGradGuard guard;
        last->bias.fill_(-2.0);
    }
    seq->push_back(last);
    seq->push_back(torch::nn::Softplus());
    layers_ = register_module("layers", seq);
}

torch::Tensor CountingHeadImpl::forward(const torch::Tensor& representation) {
    return layers_->forward(representation).squeeze(1);
}

MqclNetImpl::MqclNetImpl(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    encoder_q = register_module("encoder_q", Encoder(cfg));
    encoder_k = register_module("encoder_k", Encoder(cfg));
    proj_q = register_module("proj_q", ProjectionHead(cfg.c1, cfg.proj_hidden, cfg.c2));
    proj_k = register_module("proj_k", ProjectionHead(cfg.c1, cfg.proj_hidden, cfg.c2));
    head = register_module("head", CountingHead(cfg.c1, cfg.head_width, cfg.head_upsample));
    refiner = register_module("refiner", Refiner(cfg.c1, cfg.refiner_depth));
    sync_key_branch();
    set_trainable(*encoder_k, false);
    set_trainable(*proj_k, false);
}

void MqclNetImpl::sync_key_branch() {
    momentum_update(*encoder_k, *encoder_q, 0.0);
    momentum_update(*proj_k, *proj_q, 0.0);
}

void momentum_update(torch::nn::Module& target, const torch::nn::Module& source, double m) {
    if (m < 0.0 || m > 1.0) throw std::invalid_argument("momentum_update: m must lie in [0, 1]");
    auto dst = target.named_parameters(true);
    const auto src = source.named_parameters(true);
    if (dst.size() != src.size()) throw std::invalid_argument("momentum_update: parameter count mismatch");
    torch::NoGradGuard guard;
    for (size_t i = 0; i < dst.size(); ++i) {
        const auto& d = dst[i];
        const auto& s = src[i];
        if (d.key() != s.key() || !d.value().sizes().equals(s.value().sizes()))
            throw std::invalid_argument("momentum_update: structural mismatch at '" + d.key() + "'");
        if (m == 0.0)
            d.value().copy_(s.value());
        else if (m != 1.0)
            d.value().mul_(m).add_(s.value(), 1.0 - m);
    }
}

void set_trainable(torch::nn::Module& module, bool trainable) {
    for (auto& p : module.parameters(true)) p.set_requires_grad(trainable);
}

}  // namespace mqcl

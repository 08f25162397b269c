#pragma once

// Single VQ-VAE over the 79-channel velocity cascade. The encoder runs at
// frame rate and expands time by an integer factor (latent steps per frame)
// with strided transposed convolutions; four expert decoders downsample back
// to frame rate and emit theta, beta, phi and tau velocities separately.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "hvm/motion.hpp"

namespace hvm {

struct TokenizerConfig {
    int expansion = 36;  // latent steps per frame, 1/s
    int codebook_size = 512;
    int code_dim = 32;
    double commitment = 0.25;  // lambda
    int hidden = 128;
    int kernel = 3;
    int blocks = 4;
    double w_pos = 1.0;
    double w_vel = 0.5;
    double w_acc = 0.25;

    void validate() const;
    // Factors of `expansion`, each <= 6, largest first (36 -> {6, 6}, 12 -> {6, 2}).
    std::vector<int> expansion_stages() const;
    nlohmann::json to_json() const;
    static TokenizerConfig from_json(const nlohmann::json& j);
};

struct TokenizerTrainConfig {
    int steps = 2000;
    int batch = 16;
    int window = 32;  // frames per crop, multiple of 16
    double learning_rate = 1e-3;
    int reinit_every = 200;
    int log_every = 100;

    void validate() const;
    nlohmann::json to_json() const;
    static TokenizerTrainConfig from_json(const nlohmann::json& j);
};

struct Quantized {
    torch::Tensor ids;  // N x T', int64
    torch::Tensor fq;   // N x D x T', codebook rows (no gradient)
};

// Nearest codebook row per latent step of f (N x D x T'); ties go to the lowest index.
Quantized nearest_codes(const torch::Tensor& f, const torch::Tensor& codebook);

// f + sg(fq - f): forward value fq, gradient passed to f unchanged.
inline torch::Tensor straight_through(const torch::Tensor& f, const torch::Tensor& fq) { return f + (fq - f).detach(); }

class ResidualConvImpl : public torch::nn::Module {
public:
    ResidualConvImpl(int channels, int kernel);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv1d wide{nullptr}, mix{nullptr};
};
TORCH_MODULE(ResidualConv);

class ExpertDecoderImpl : public torch::nn::Module {
public:
    ExpertDecoderImpl(const TokenizerConfig& cfg, int out_channels);
    torch::Tensor forward(const torch::Tensor& fq);

    torch::nn::Sequential body{nullptr};
    torch::nn::Conv1d out{nullptr};
};
TORCH_MODULE(ExpertDecoder);

class MotionTokenizerImpl : public torch::nn::Module {
public:
    explicit MotionTokenizerImpl(const TokenizerConfig& cfg);

    const TokenizerConfig& config() const { return cfg_; }

    // N x 79 x T normalized velocity channels -> F, N x D x (T * expansion).
    torch::Tensor encode(const torch::Tensor& x);
    Quantized quantize(const torch::Tensor& f) const { return nearest_codes(f, codebook); }
    // N x D x T' -> N x 79 x (T' / expansion) normalized velocity channels.
    torch::Tensor decode(const torch::Tensor& fq);
    // decode, undo normalization and prefix-sum over time: absolute channels.
    torch::Tensor decode_absolute(const torch::Tensor& fq);

    torch::Tensor normalize(const torch::Tensor& velocity) const;
    torch::Tensor denormalize(const torch::Tensor& x) const;
    // Fits normalization from absolute channel tensors (79 x T each).
    void fit_statistics(const std::vector<torch::Tensor>& absolute);

    torch::Tensor codebook;  // B x D
    torch::nn::Sequential encoder{nullptr};
    torch::nn::Conv1d encoder_out{nullptr};
    std::vector<ExpertDecoder> experts;
    torch::Tensor abs_mean, abs_std, vel_mean, vel_std;  // 79 each

private:
    TokenizerConfig cfg_;
};
TORCH_MODULE(MotionTokenizer);

// Channel groups emitted by the four experts, in cascade order.
inline constexpr std::array<int, 4> kExpertChannels = {kThetaChannels, kBetaChannels, kPhiChannels, kTauChannels};

// 79 x T tensors of one motion.
torch::Tensor absolute_channels(const MotionSequence& m);
torch::Tensor velocity_channels(const MotionSequence& m);
// First-frame-absolute velocity along the last axis, and its inverse.
torch::Tensor to_velocity(const torch::Tensor& absolute);
torch::Tensor prefix_sum(const torch::Tensor& velocity);

struct VqLoss {
    torch::Tensor total;
    torch::Tensor reconstruction;
    torch::Tensor commitment;  // |F - sg(Fq)|^2, before lambda
    torch::Tensor codebook;    // |sg(F) - Fq|^2
};

struct ReconstructionWeights {
    double pos = 1.0, vel = 0.5, acc = 0.25;
};

// L_rec + lambda |F - sg(Fq)|^2 + |sg(F) - Fq|^2. L_rec is the mean l1 error of
// absolute channels plus weighted l1 errors of their first and second temporal
// differences. Quadratic terms are squared l2 over D, averaged over latent steps.
VqLoss vqvae_loss(const torch::Tensor& pred_abs, const torch::Tensor& gt_abs, const torch::Tensor& f,
                  const torch::Tensor& fq, double lambda, const ReconstructionWeights& w = {});

struct MotionLatent {
    torch::Tensor f;        // T' x D
    torch::Tensor fq;       // T' x D
    std::vector<int> ids;   // T'
};

// T must be a multiple of 16; throws std::invalid_argument otherwise.
MotionLatent encode_motion(MotionTokenizer& tok, const MotionSequence& m);
std::vector<int> tokenize(MotionTokenizer& tok, const MotionSequence& m);
// Token count must be a multiple of expansion * 16 and ids in [0, B).
MotionSequence detokenize(MotionTokenizer& tok, std::span<const int> ids, float fps = kDefaultFps);
MotionSequence reconstruct(MotionTokenizer& tok, const MotionSequence& m);
// Equal-length motions are processed as one batch.
std::vector<std::vector<int>> tokenize_all(MotionTokenizer& tok, const std::vector<MotionSequence>& motions);
std::vector<MotionSequence> reconstruct_all(MotionTokenizer& tok, const std::vector<MotionSequence>& motions);

// n / B with n the number of distinct ids.
double codebook_utilization(std::span<const int> ids, int codebook_size);

struct TokenizerTrainResult {
    MotionTokenizer model{nullptr};
    std::vector<float> loss_curve;  // one entry per step
    std::vector<nlohmann::json> log;
};

using TrainLogger = std::function<void(const nlohmann::json&)>;

// Deterministic given seed. Throws std::runtime_error when the loss turns non-finite.
TokenizerTrainResult train_tokenizer(const std::vector<MotionSequence>& motions, const TokenizerConfig& cfg,
                                     const TokenizerTrainConfig& train, std::uint64_t seed,
                                     const TrainLogger& logger = {});

void save_tokenizer(MotionTokenizer& tok, const std::filesystem::path& path, const nlohmann::json& meta = {});
MotionTokenizer load_tokenizer(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace hvm

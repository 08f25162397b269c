#pragma once

// Toy discrete video tokenizer: non-overlapping f_t x f_s x f_s RGB patches are
// embedded by an MLP, snapped to the nearest codebook entry and decoded by a
// second MLP; decoded pixels are clamped to [0, 1].

#include <cstdint>
#include <filesystem>
#include <unordered_map>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "hvm/motion_tokenizer.hpp"
#include "hvm/render.hpp"

namespace hvm {

struct VideoTokenizerConfig {
    int codebook_size = 1024;  // Vv
    int code_dim = 32;
    int hidden = 256;
    int temporal_factor = 8;   // f_t
    int spatial_factor = 16;   // f_s
    int height = 64;
    int width = 64;
    double commitment = 0.25;

    void validate() const;
    int patch_size() const { return temporal_factor * spatial_factor * spatial_factor * 3; }
    // Tokens per 16-frame unit: (16 / f_t) * (H / f_s) * (W / f_s).
    int tokens_per_unit() const;
    // Tokens of one spatial grid (the image condition).
    int tokens_per_frame_grid() const { return (height / spatial_factor) * (width / spatial_factor); }
    nlohmann::json to_json() const;
    static VideoTokenizerConfig from_json(const nlohmann::json& j);
};

struct VideoTokenizerTrainConfig {
    int steps = 1500;
    int batch = 256;  // patches per step
    double learning_rate = 1e-3;
    int reinit_every = 200;
    int log_every = 100;

    void validate() const;
    nlohmann::json to_json() const;
    static VideoTokenizerTrainConfig from_json(const nlohmann::json& j);
};

// ids in (t', h', w') row-major order.
struct VideoTokens {
    std::vector<int> ids;
    int t = 0, h = 0, w = 0;
};

class VideoTokenizerImpl : public torch::nn::Module {
public:
    explicit VideoTokenizerImpl(const VideoTokenizerConfig& cfg);

    const VideoTokenizerConfig& config() const { return cfg_; }

    // P x patch_size in [0, 1] -> P x D.
    torch::Tensor embed(const torch::Tensor& patches);
    // P x D -> P x patch_size, unclamped.
    torch::Tensor reconstruct_patches(const torch::Tensor& codes);
    // Nearest active codebook row per latent (P x D); ties go to the lowest index.
    torch::Tensor nearest(const torch::Tensor& latents) const;
    std::int64_t active_codes() const { return active.sum().item<std::int64_t>(); }

    // Caches the clamped decoded patch of every code; decode reads the cache and
    // encode maps a cached patch back to its code exactly. Codes whose patch
    // duplicates a lower index are deactivated. Call again after changing parameters.
    void snap();
    bool snapped() const { return decoded_.defined(); }
    const torch::Tensor& decoded_patches() const { return decoded_; }
    // Active code whose cached patch equals `patch` bit for bit, or -1.
    int snapped_id(const torch::Tensor& patch) const;

    torch::Tensor codebook;  // Vv x D
    torch::nn::Sequential encoder{nullptr}, decoder{nullptr};
    torch::Tensor active;      // Vv, bool; inactive rows are never emitted by encode
    torch::Tensor pixel_mean;  // patch_size, subtracted before embedding

private:
    VideoTokenizerConfig cfg_;
    torch::Tensor decoded_;
    std::unordered_multimap<std::size_t, int> lookup_;
};
TORCH_MODULE(VideoTokenizer);

// T x H x W x 3 clip -> P x (f_t f_s f_s 3) patches in (t', h', w') order, and back.
torch::Tensor patchify(const VideoClip& clip, int temporal_factor, int spatial_factor);
VideoClip unpatchify(const torch::Tensor& patches, int t, int h, int w, int temporal_factor, int spatial_factor,
                     float fps = kDefaultFps);

// Clip dims must be divisible by the factors and match the configured resolution.
VideoTokens video_encode(VideoTokenizer& tok, const VideoClip& clip);
VideoClip video_decode(VideoTokenizer& tok, const VideoTokens& tokens, float fps = kDefaultFps);
// The reference frame repeated f_t times and encoded: one spatial grid of tokens.
VideoTokens image_tokens(VideoTokenizer& tok, const VideoClip& clip, int frame = 0);

// Snaps the tokenizer (see VideoTokenizerImpl::snap). Afterwards
// encode(decode(encode(x))) == encode(x) for every clip. Returns the active count.
std::int64_t finalize_codebook(VideoTokenizer& tok);

struct VideoTokenizerTrainResult {
    VideoTokenizer model{nullptr};
    std::vector<float> loss_curve;
    std::vector<nlohmann::json> log;
};

// Deterministic given seed; ends with finalize_codebook.
VideoTokenizerTrainResult train_video_tokenizer(const std::vector<VideoClip>& clips, const VideoTokenizerConfig& cfg,
                                                const VideoTokenizerTrainConfig& train, std::uint64_t seed,
                                                const TrainLogger& logger = {});

// Mean absolute pixel error between two clips of equal shape.
double pixel_l1(const VideoClip& a, const VideoClip& b);

void save_video_tokenizer(VideoTokenizer& tok, const std::filesystem::path& path, const nlohmann::json& meta = {});
VideoTokenizer load_video_tokenizer(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace hvm

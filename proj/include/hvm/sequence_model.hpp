#pragma once

// Unified autoregressive model over interleaved visual and motion tokens:
// vocabulary layout, V2M / I2VM sequence grammar, three embedding tables,
// factorized 3D rotary positions plus a learned absolute table on Q/K,
// condition-bidirectional / target-causal attention, and constrained sampling.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "hvm/motion_tokenizer.hpp"

namespace hvm {

enum class Modality : std::uint8_t { visual = 0, motion = 1, special = 2 };
enum class Task : std::uint8_t { v2m, i2vm };
enum class BlockKind : std::uint8_t { image, video, motion };

std::string_view task_name(Task t);
Task parse_task(std::string_view name);

// Visual ids [0, Vv), motion ids [Vv, Vv + B), then T1, T2, STG, PAD.
struct VocabLayout {
    int visual = 1024;
    int motion = 512;

    int motion_offset() const { return visual; }
    int t1() const { return visual + motion; }
    int t2() const { return visual + motion + 1; }
    int stg() const { return visual + motion + 2; }
    int pad() const { return visual + motion + 3; }
    int size() const { return visual + motion + 4; }
    // Throws std::out_of_range for ids outside [0, size()).
    Modality classify(int id) const;
    // [first, last) of the ids a slot of this kind may hold.
    std::pair<int, int> range(BlockKind kind) const;

    void validate() const;
    nlohmann::json to_json() const;
    static VocabLayout from_json(const nlohmann::json& j);
    bool operator==(const VocabLayout&) const = default;
};

// Token block geometry shared by both tokenizers.
struct TokenShapes {
    int grid_h = 4, grid_w = 4;  // visual spatial grid
    int visual_slabs = 2;        // visual latent steps per 16-frame unit
    int temporal_factor = 8;     // frames per visual latent step (f_t)
    int motion_per_frame = 36;   // 1/s

    int image_tokens() const { return grid_h * grid_w; }
    int visual_per_unit() const { return visual_slabs * grid_h * grid_w; }
    int motion_per_unit() const { return kUnitFrames * motion_per_frame; }
    int block_length(BlockKind kind) const;

    void validate() const;
    nlohmann::json to_json() const;
    static TokenShapes from_json(const nlohmann::json& j);
    bool operator==(const TokenShapes&) const = default;
};

struct BlockSpec {
    BlockKind kind;
    int unit = 0;  // 16-frame unit index; 0 for the image block
    int length = 0;
    bool operator==(const BlockSpec&) const = default;
};

using Coord = std::array<float, 3>;  // (t, h, w); motion and special tokens use t only

struct UnifiedSequence {
    Task task = Task::v2m;
    std::vector<int> ids;
    std::vector<Modality> modality;
    std::vector<Coord> coords;
    int target_start = 0;           // first position after STG
    std::vector<BlockSpec> blocks;  // every block in order, condition blocks first
    std::vector<BlockSpec> target_schedule() const;

    int length() const { return static_cast<int>(ids.size()); }
};

// Local ids: visual in [0, Vv), motion in [0, B). Unit counts must match,
// except that zero motion units builds a condition-only sequence.
UnifiedSequence build_v2m_sequence(const VocabLayout& vocab, const TokenShapes& shapes,
                                   const std::vector<std::vector<int>>& video_units,
                                   const std::vector<std::vector<int>>& motion_units);
UnifiedSequence build_i2vm_sequence(const VocabLayout& vocab, const TokenShapes& shapes, const std::vector<int>& image,
                                    const std::vector<std::vector<int>>& video_units,
                                    const std::vector<std::vector<int>>& motion_units);
// Target blocks of a task with n units: V2M [M]*n, I2VM [V, M]*n.
std::vector<BlockSpec> target_blocks(Task task, int units, const TokenShapes& shapes);
// Modalities and coordinates for a block list; specials take the t of the following block.
void assign_positions(UnifiedSequence& seq, const TokenShapes& shapes);

struct ParseResult {
    bool ok = false;
    std::optional<int> violation;  // index of the first offending token
    std::string message;
    bool truncated = false;        // last block shorter than its schedule length
    Task task = Task::v2m;
    std::vector<int> image;        // local ids
    std::vector<std::vector<int>> video_units, motion_units;
};

// Recovers the block structure or reports the first grammar violation. A
// truncated final block is reported (ok = false, truncated = true) and
// returned as a partial unit.
ParseResult parse_sequence(const std::vector<int>& ids, const VocabLayout& vocab, const TokenShapes& shapes);

struct ARConfig {
    int layers = 4;
    int heads = 4;
    int width = 128;
    std::array<int, 3> rope_split = {16, 8, 8};  // (d_t, d_h, d_w) per head
    int max_length = 4096;
    double dropout = 0.0;
    double rope_base = 10000.0;

    int head_dim() const { return width / heads; }
    void validate() const;
    nlohmann::json to_json() const;
    static ARConfig from_json(const nlohmann::json& j);
};

// Rotates consecutive pairs of the last axis of x (... x L x Dh) by angles
// coord[axis] * base^(-2i/d_axis) on the three disjoint slices (t, h, w).
// coords: L x 3 or N x L x 3 (broadcast over heads when x is N x H x L x Dh).
torch::Tensor apply_rope(const torch::Tensor& x, const torch::Tensor& coords, const std::array<int, 3>& split,
                         double base);

// Padded batch of sequences; allowed(i, j) = j < target_start || j <= i, within length.
struct SequenceBatch {
    torch::Tensor ids;         // N x L int64, PAD past each length
    torch::Tensor table;       // N x L int64 modality
    torch::Tensor coords;      // N x L x 3
    torch::Tensor positions;   // L int64
    torch::Tensor attend;      // N x L x L bool
    torch::Tensor targets;     // N x L bool, loss-bearing positions
    std::vector<Task> tasks;
};

torch::Tensor attention_mask(int length, int target_start);
SequenceBatch collate(const std::vector<UnifiedSequence>& seqs, const VocabLayout& vocab,
                      torch::Dtype coord_dtype = torch::kFloat32);

class AttentionImpl : public torch::nn::Module {
public:
    explicit AttentionImpl(const ARConfig& cfg);
    // x: N x L x W; k/v caches are appended when given.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& coords, const torch::Tensor& ape,
                          const torch::Tensor& attend, torch::Tensor* k_cache = nullptr,
                          torch::Tensor* v_cache = nullptr);

private:
    ARConfig cfg_;
    torch::nn::Linear qkv{nullptr}, proj{nullptr};
};
TORCH_MODULE(Attention);

class BlockImpl : public torch::nn::Module {
public:
    explicit BlockImpl(const ARConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& coords, const torch::Tensor& ape,
                          const torch::Tensor& attend, torch::Tensor* k_cache = nullptr,
                          torch::Tensor* v_cache = nullptr);

private:
    torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr};
    Attention attn{nullptr};
    torch::nn::Sequential mlp{nullptr};
    torch::nn::Dropout drop{nullptr};
};
TORCH_MODULE(Block);

struct KVCache {
    std::vector<torch::Tensor> k, v;  // per layer, 1 x H x L x Dh
    int length = 0;
};

class ARTransformerImpl : public torch::nn::Module {
public:
    ARTransformerImpl(const ARConfig& cfg, const VocabLayout& vocab);

    const ARConfig& config() const { return cfg_; }
    const VocabLayout& vocab() const { return vocab_; }

    // Each position looks up its own modality's table only.
    torch::Tensor embed(const SequenceBatch& batch);
    // Logits aligned with the tokens they predict: out[:, j] = head(h[:, j - 1]), out[:, 0] = 0.
    torch::Tensor forward_embedded(const torch::Tensor& x, const SequenceBatch& batch);
    torch::Tensor forward(const SequenceBatch& batch) { return forward_embedded(embed(batch), batch); }

    // Incremental decoding for one sequence. prefill runs the whole prefix with
    // its mask and returns the logits for the next position; step appends one token.
    torch::Tensor prefill(const UnifiedSequence& prefix, KVCache& cache);
    torch::Tensor step(int id, const Coord& coord, KVCache& cache);

    torch::nn::Embedding visual_table{nullptr}, motion_table{nullptr}, special_table{nullptr};
    torch::Tensor ape;  // max_length x W, added to Q and K
    std::vector<Block> blocks;
    torch::nn::LayerNorm final_norm{nullptr};
    torch::nn::Linear head{nullptr};

private:
    torch::Tensor run_blocks(torch::Tensor x, const torch::Tensor& coords, const torch::Tensor& positions,
                             const torch::Tensor& attend, KVCache* cache);
    ARConfig cfg_;
    VocabLayout vocab_;
};
TORCH_MODULE(ARTransformer);

// Mean next-token cross-entropy over target positions. Throws
// std::invalid_argument when the batch has no target positions.
torch::Tensor ar_loss(const torch::Tensor& logits, const SequenceBatch& batch);
// Same, per sequence (N values).
torch::Tensor ar_loss_per_sequence(const torch::Tensor& logits, const SequenceBatch& batch);

struct DecodeConfig {
    enum class Mode { greedy, sample } mode = Mode::greedy;
    double temperature = 1.0;
    int top_k = 0;  // 0: full distribution

    static DecodeConfig v2m_default() { return {}; }
    static DecodeConfig i2vm_default() { return {Mode::sample, 0.9, 50}; }
    void validate() const;
    nlohmann::json to_json() const;
    static DecodeConfig from_json(const nlohmann::json& j);
};

// Picks an id from logits restricted to [first, last).
int choose_token(const torch::Tensor& logits, int first, int last, const DecodeConfig& cfg, std::mt19937_64& rng);

// Fills `units` target units after a condition sequence ending at STG. Each
// slot's logits are masked to the modality its block dictates, so the result
// always parses.
UnifiedSequence sample(ARTransformer& model, const UnifiedSequence& condition, int units, const TokenShapes& shapes,
                       const DecodeConfig& cfg, std::mt19937_64& rng);
// Reference decoder without a cache: one full forward per generated token.
UnifiedSequence sample_uncached(ARTransformer& model, const UnifiedSequence& condition, int units,
                                const TokenShapes& shapes, const DecodeConfig& cfg, std::mt19937_64& rng);

// Tokens of one paired clip: image condition, video units and motion units (local ids).
struct PairTokens {
    std::vector<int> image;
    std::vector<std::vector<int>> video_units, motion_units;
};

UnifiedSequence v2m_sequence(const PairTokens& p, const VocabLayout& vocab, const TokenShapes& shapes);
UnifiedSequence i2vm_sequence(const PairTokens& p, const VocabLayout& vocab, const TokenShapes& shapes);

struct ARTrainConfig {
    int steps = 2000;
    int batch = 8;  // half V2M, half I2VM
    double learning_rate = 5e-4;
    int warmup = 100;
    double weight_decay = 0.0;
    int log_every = 50;

    void validate() const;
    nlohmann::json to_json() const;
    static ARTrainConfig from_json(const nlohmann::json& j);
};

struct ARTrainResult {
    ARTransformer model{nullptr};
    std::vector<float> loss_curve;
    std::vector<nlohmann::json> log;  // per-task losses and batch composition
};

// Deterministic given seed. Throws std::invalid_argument when token ids do not
// fit the vocabulary or block lengths do not match the shapes.
ARTrainResult train_ar(const std::vector<PairTokens>& pairs, const ARConfig& cfg, const VocabLayout& vocab,
                       const TokenShapes& shapes, const ARTrainConfig& train, std::uint64_t seed,
                       const TrainLogger& logger = {});

void save_ar(ARTransformer& model, const TokenShapes& shapes, const std::filesystem::path& path,
             const nlohmann::json& meta = {});
ARTransformer load_ar(const std::filesystem::path& path, TokenShapes* shapes = nullptr, nlohmann::json* meta = nullptr);

}  // namespace hvm

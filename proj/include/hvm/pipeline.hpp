#pragma once

// Experiment orchestration shared by the CLI and the acceptance runner: the
// resolved configuration and its hash, synthetic paired data, the two
// training stages, task evaluations and the tokenizer sweep.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hvm/metrics.hpp"
#include "hvm/motion_tokenizer.hpp"
#include "hvm/render.hpp"
#include "hvm/sequence_model.hpp"
#include "hvm/video_tokenizer.hpp"

namespace hvm {

struct DataConfig {
    int train_pairs = 2000;
    int heldout_pairs = 200;
    int frames = 16;  // per pair, multiple of 16
    std::vector<std::string> families = {"walk", "wave", "squat", "smooth_noise"};
    int video_tokenizer_clips = 256;  // first training pairs rendered for the video tokenizer
    double pixels_per_meter = 30.0;

    void validate() const;
    nlohmann::json to_json() const;
    static DataConfig from_json(const nlohmann::json& j);
};

struct EvalConfig {
    int v2m_sequences = 200;  // held-out pairs captured
    int i2vm_samples = 64;    // motions generated from held-out reference frames

    void validate() const;
    nlohmann::json to_json() const;
    static EvalConfig from_json(const nlohmann::json& j);
};

struct SweepConfig {
    std::vector<int> expansions = {1, 4, 36};
    std::vector<int> codebooks = {64, 256, 512};
    int seeds = 3;
    TokenizerTrainConfig train;  // the same budget for every cell

    void validate() const;
    nlohmann::json to_json() const;
    static SweepConfig from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";
    DataConfig data;
    RenderConfig render;
    TokenizerConfig motion_tokenizer;
    TokenizerTrainConfig motion_train;
    VideoTokenizerConfig video_tokenizer;
    VideoTokenizerTrainConfig video_train;
    ARConfig ar;
    ARTrainConfig ar_train;
    DecodeConfig v2m_decode = DecodeConfig::v2m_default();
    DecodeConfig i2vm_decode = DecodeConfig::i2vm_default();
    EvalConfig eval;
    SweepConfig sweep;

    ExperimentConfig();
    void validate() const;
    nlohmann::json to_json() const;
    // Every key is optional; unknown keys anywhere are rejected.
    static ExperimentConfig from_json(const nlohmann::json& j);
    // 16 hex digits of FNV-1a over the resolved configuration.
    std::string hash() const;

    VocabLayout vocab() const;
    TokenShapes token_shapes() const;
};

// "a.b.c=value". The value is parsed as JSON when possible, otherwise taken as
// a string. The path must already exist in `config`.
void apply_override(nlohmann::json& config, const std::string& assignment);
// Defaults, then the file (if any), then the overrides in order.
ExperimentConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                const std::vector<std::string>& overrides);

struct RunPaths {
    std::filesystem::path root;

    explicit RunPaths(const ExperimentConfig& cfg) : root(cfg.output_dir) {}
    std::filesystem::path train_motions() const { return root / "data" / "train_motions.hvm"; }
    std::filesystem::path heldout_motions() const { return root / "data" / "heldout_motions.hvm"; }
    std::filesystem::path pairs_manifest() const { return root / "data" / "pairs.json"; }
    std::filesystem::path motion_tokenizer() const { return root / "checkpoints" / "motion_tokenizer.hvm"; }
    std::filesystem::path video_tokenizer() const { return root / "checkpoints" / "video_tokenizer.hvm"; }
    std::filesystem::path ar_model() const { return root / "checkpoints" / "ar_model.hvm"; }
    std::filesystem::path log(const std::string& stage) const { return root / "logs" / (stage + ".jsonl"); }
    std::filesystem::path report(const std::string& name) const { return root / "reports" / (name + ".json"); }
};

// Appends JSON lines, each stamped with the config hash.
class JsonlWriter {
public:
    JsonlWriter(const std::filesystem::path& path, std::string config_hash);
    void write(nlohmann::json entry);
    TrainLogger logger();

private:
    std::filesystem::path path_;
    std::string hash_;
};

enum class Split { train, heldout };

body::StubBody experiment_body(const ExperimentConfig& cfg);
// Deterministic in (seed, split, index); families cycle through data.families.
MotionDataset generate_motions(const ExperimentConfig& cfg, Split split);
VideoClip render_pair_clip(const ExperimentConfig& cfg, const body::StubBody& body, const MotionSequence& m);
// FNV-1a over the clip's float32 pixels and dimensions.
std::uint64_t clip_hash(const VideoClip& clip);

// Requires an existing file; the message names the command that produces it.
MotionDataset load_split(const ExperimentConfig& cfg, Split split);

// Tokens of each motion and its rendered clip; local ids split into 16-frame units.
std::vector<PairTokens> tokenize_pairs(const ExperimentConfig& cfg, MotionTokenizer& motion_tok,
                                       VideoTokenizer& video_tok, const std::vector<MotionSequence>& motions);

// Mean joint-space motion of a set, used as the trivial reconstruction baseline.
MotionSequence mean_pose_motion(const std::vector<MotionSequence>& motions, int frames);
// Copy of m with its 63 joint-rotation channels permuted at random.
MotionSequence permute_joint_channels(const MotionSequence& m, std::uint64_t seed);

nlohmann::json reconstruction_json(const metrics::ReconstructionReport& r);

using ProgressFn = std::function<void(const nlohmann::json&)>;

// Commands. Each returns the report it also writes under reports/.
nlohmann::json cmd_gen_data(const ExperimentConfig& cfg);
// Writes one clip archive per pair of `split` (at most `limit`) into dir.
nlohmann::json cmd_render_dataset(const ExperimentConfig& cfg, Split split, int limit,
                                  const std::filesystem::path& dir);
nlohmann::json cmd_train_motion_tokenizer(const ExperimentConfig& cfg);
nlohmann::json cmd_train_video_tokenizer(const ExperimentConfig& cfg);
// Refuses to run without stage-1 checkpoints or when their vocabularies differ from the config.
nlohmann::json cmd_train_ar(const ExperimentConfig& cfg);
nlohmann::json cmd_eval_tokenizer(const ExperimentConfig& cfg);
nlohmann::json cmd_eval_v2m(const ExperimentConfig& cfg);
nlohmann::json cmd_eval_i2vm(const ExperimentConfig& cfg);

struct SweepRun {
    int expansion = 0, codebook = 0, seed_index = 0;
    metrics::ReconstructionReport report;
    double utilization = 0.0;
    double seconds = 0.0;
};

struct SweepCell {
    int expansion = 0, codebook = 0;
    double mpjpe = 0.0, pa_mpjpe = 0.0, pve = 0.0, accel = 0.0, utilization = 0.0;  // medians over seeds
    std::vector<double> mpjpe_per_seed, utilization_per_seed;
};

// Median over seeds per (expansion, codebook) cell; also writes sweep.csv
// (one row per cell) and sweep_runs.csv (one row per training run).
std::vector<SweepCell> run_sweep(const ExperimentConfig& cfg, std::vector<SweepRun>* runs = nullptr,
                                 const ProgressFn& progress = {});
nlohmann::json cmd_sweep(const ExperimentConfig& cfg);

// I2VM from one reference frame: writes the generated motion (dataset file)
// and decoded video (clip archive) next to `out_prefix`.
nlohmann::json cmd_generate(const ExperimentConfig& cfg, const VideoClip& reference, int frame, int units,
                            const std::filesystem::path& out_prefix, std::uint64_t seed);
// V2M on a clip (frames padded to whole units by repeating the last frame).
nlohmann::json cmd_capture(const ExperimentConfig& cfg, const VideoClip& clip, const std::filesystem::path& out_motion,
                           const std::optional<MotionSequence>& reference = std::nullopt);

}  // namespace hvm

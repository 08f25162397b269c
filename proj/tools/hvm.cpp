// Command-line front end for the experiment pipeline.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "hvm/archive.hpp"
#include "hvm/pipeline.hpp"
#include "hvm/seed.hpp"

namespace {

using hvm::ExperimentConfig;

struct CommonOptions {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string output_dir;
    std::optional<std::uint64_t> seed;

    ExperimentConfig resolve() const {
        auto sets = overrides;
        if (!output_dir.empty()) sets.push_back("output_dir=\"" + output_dir + "\"");
        if (seed) sets.push_back("seed=" + std::to_string(*seed));
        return hvm::resolve_config(config_file.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_file),
                                   sets);
    }
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("-c,--config", o.config_file, "JSON experiment config")->check(CLI::ExistingFile);
    cmd->add_option("-s,--set", o.overrides, "Override a config key: key.path=value (repeatable)");
    cmd->add_option("-o,--output-dir", o.output_dir, "Run directory (config key output_dir)");
    cmd->add_option("--seed", o.seed, "Root seed (config key seed)");
}

hvm::Split parse_split(const std::string& s) {
    if (s == "train") return hvm::Split::train;
    if (s == "heldout") return hvm::Split::heldout;
    throw std::invalid_argument("split must be 'train' or 'heldout'");
}

// A clip file, or a pair of the run's dataset rendered on the fly.
struct ClipSource {
    std::string clip_file;
    int pair = -1;
    std::string split = "heldout";

    void add(CLI::App* cmd) {
        cmd->add_option("--clip", clip_file, "Clip archive")->check(CLI::ExistingFile);
        cmd->add_option("--pair", pair, "Pair index in the run's dataset");
        cmd->add_option("--split", split, "Dataset split for --pair")->check(CLI::IsMember({"train", "heldout"}));
    }

    std::pair<hvm::VideoClip, std::optional<hvm::MotionSequence>> load(const ExperimentConfig& cfg) const {
        if (!clip_file.empty()) return {hvm::load_clip(clip_file), std::nullopt};
        if (pair < 0) throw std::invalid_argument("give --clip or --pair");
        const auto d = hvm::load_split(cfg, parse_split(split));
        if (pair >= static_cast<int>(d.records.size())) throw std::invalid_argument("--pair out of range");
        const auto& m = d.records[pair].motion;
        return {hvm::render_pair_clip(cfg, hvm::experiment_body(cfg), m), m};
    }
};

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    CLI::App app{"Unified human video / motion token model: data, training and evaluation"};
    app.require_subcommand(1);
    CommonOptions common;
    std::function<nlohmann::json(const ExperimentConfig&)> action;

    auto simple = [&](const char* name, const char* help, nlohmann::json (*fn)(const ExperimentConfig&)) {
        auto* cmd = app.add_subcommand(name, help);
        add_common(cmd, common);
        cmd->callback([&action, fn] { action = fn; });
    };
    simple("gen-data", "Generate train/held-out motions and the paired manifest", hvm::cmd_gen_data);
    simple("train-motion-tokenizer", "Stage 1: train the motion tokenizer", hvm::cmd_train_motion_tokenizer);
    simple("train-video-tokenizer", "Stage 1: train the video tokenizer", hvm::cmd_train_video_tokenizer);
    simple("train-ar", "Stage 2: train the unified autoregressive model (tokenizers frozen)", hvm::cmd_train_ar);
    simple("eval-tokenizer", "Held-out reconstruction of both tokenizers", hvm::cmd_eval_tokenizer);
    simple("eval-v2m", "Held-out motion capture from video", hvm::cmd_eval_v2m);
    simple("eval-i2vm", "Distribution check of motions generated from reference frames", hvm::cmd_eval_i2vm);
    simple("sweep", "Motion tokenizer grid over latent steps per frame and codebook size", hvm::cmd_sweep);

    auto* config_cmd = app.add_subcommand("config", "Print the resolved config and its hash");
    add_common(config_cmd, common);
    config_cmd->callback([&] {
        action = [](const ExperimentConfig& cfg) {
            return nlohmann::json{{"config", cfg.to_json()}, {"config_hash", cfg.hash()}};
        };
    });

    std::string split = "heldout", dir;
    int limit = 16;
    auto* render_cmd = app.add_subcommand("render-dataset", "Write rendered clips of a split");
    add_common(render_cmd, common);
    render_cmd->add_option("--split", split)->check(CLI::IsMember({"train", "heldout"}));
    render_cmd->add_option("--limit", limit, "Maximum clips (-1: all)");
    render_cmd->add_option("--dir", dir, "Destination (default <output_dir>/clips/<split>)");
    render_cmd->callback([&] {
        action = [&](const ExperimentConfig& cfg) {
            const auto dest = dir.empty() ? std::filesystem::path(cfg.output_dir) / "clips" / split
                                          : std::filesystem::path(dir);
            return hvm::cmd_render_dataset(cfg, parse_split(split), limit, dest);
        };
    });

    ClipSource gen_source;
    int frame = 0, units = 1;
    std::string out = "generated/sample";
    std::optional<std::uint64_t> sample_seed;
    auto* gen_cmd = app.add_subcommand("generate", "I2VM: video and motion from one reference frame");
    add_common(gen_cmd, common);
    gen_source.add(gen_cmd);
    gen_cmd->add_option("--frame", frame, "Reference frame index");
    gen_cmd->add_option("--units", units, "16-frame units to generate")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--out", out, "Output prefix (<prefix>.motion.hvm, <prefix>.clip.hvm)");
    gen_cmd->add_option("--sample-seed", sample_seed, "Sampling seed (default derived from the root seed)");
    gen_cmd->callback([&] {
        action = [&](const ExperimentConfig& cfg) {
            const auto [clip, motion] = gen_source.load(cfg);
            return hvm::cmd_generate(cfg, clip, frame, units, out,
                                     sample_seed.value_or(hvm::derive_seed(cfg.seed, hvm::SeedStream::sampling, 1)));
        };
    });

    ClipSource cap_source;
    std::string cap_out = "captured.motion.hvm";
    auto* cap_cmd = app.add_subcommand("capture", "V2M: motion from a video clip");
    add_common(cap_cmd, common);
    cap_source.add(cap_cmd);
    cap_cmd->add_option("--out", cap_out, "Output motion dataset file");
    cap_cmd->callback([&] {
        action = [&](const ExperimentConfig& cfg) {
            const auto [clip, motion] = cap_source.load(cfg);
            return hvm::cmd_capture(cfg, clip, cap_out, motion);
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    try {
        const auto cfg = common.resolve();
        std::cout << action(cfg).dump(2) << std::endl;
    } catch (const hvm::FormatError& e) {
        std::cerr << "format error: " << e.what() << std::endl;
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid argument: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}

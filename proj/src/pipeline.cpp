#include "hvm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hvm/json_fields.hpp"
#include "hvm/seed.hpp"

namespace hvm {

namespace fs = std::filesystem;

namespace {

nlohmann::json render_to_json(const RenderConfig& r) {
    return {{"height", r.height},
            {"width", r.width},
            {"limb_radius", r.limb_radius},
            {"head_radius", r.head_radius},
            {"background", r.background}};
}

RenderConfig render_from_json(const nlohmann::json& j) {
    constexpr const char* where = "render";
    reject_unknown_keys(j, {"height", "width", "limb_radius", "head_radius", "background"}, where);
    RenderConfig r;
    read_field(j, "height", r.height, where);
    read_field(j, "width", r.width, where);
    read_field(j, "limb_radius", r.limb_radius, where);
    read_field(j, "head_radius", r.head_radius, where);
    read_field(j, "background", r.background, where);
    if (r.height < 1 || r.width < 1 || r.limb_radius <= 0.0 || r.head_radius <= 0.0)
        throw std::invalid_argument("render: sizes must be positive");
    return r;
}

template <typename T>
T sub(const nlohmann::json& j, const char* key, T fallback, T (*parse)(const nlohmann::json&)) {
    const auto it = j.find(key);
    return it == j.end() ? fallback : parse(*it);
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex16(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

nlohmann::json write_report(const ExperimentConfig& cfg, const std::string& name, nlohmann::json report) {
    report["config_hash"] = cfg.hash();
    report["command"] = name;
    const auto path = RunPaths(cfg).report(name);
    fs::create_directories(path.parent_path());
    std::ofstream(path) << report.dump(2) << '\n';
    if (report.contains("metrics")) {
        auto records = path;
        std::ofstream out(records.replace_extension(".metrics.jsonl"));
        for (const auto& r : report["metrics"]) out << r.dump() << '\n';
    }
    return report;
}

std::vector<MotionSequence> motions_of(const MotionDataset& d, int limit = -1) {
    std::vector<MotionSequence> out;
    for (const auto& r : d.records) {
        if (limit >= 0 && static_cast<int>(out.size()) >= limit) break;
        out.push_back(r.motion);
    }
    return out;
}

std::vector<std::vector<int>> split_units(const std::vector<int>& ids, int per_unit) {
    if (per_unit <= 0 || ids.size() % per_unit != 0) throw std::logic_error("token count is not a whole number of units");
    std::vector<std::vector<int>> units;
    for (std::size_t i = 0; i < ids.size(); i += per_unit) units.emplace_back(ids.begin() + i, ids.begin() + i + per_unit);
    return units;
}

std::vector<int> join_units(const std::vector<std::vector<int>>& units) {
    std::vector<int> out;
    for (const auto& u : units) out.insert(out.end(), u.begin(), u.end());
    return out;
}

void require_file(const fs::path& path, const std::string& producer) {
    if (!fs::exists(path))
        throw std::runtime_error("missing " + path.string() + " (run '" + producer + "' first)");
}

struct StageModels {
    MotionTokenizer motion{nullptr};
    VideoTokenizer video{nullptr};
    ARTransformer ar{nullptr};
};

// Stage-1 checkpoints must exist and agree with the configured vocabulary and factors.
StageModels load_stage1(const ExperimentConfig& cfg) {
    const RunPaths paths(cfg);
    require_file(paths.motion_tokenizer(), "train-motion-tokenizer");
    require_file(paths.video_tokenizer(), "train-video-tokenizer");
    StageModels m;
    m.motion = load_tokenizer(paths.motion_tokenizer());
    m.video = load_video_tokenizer(paths.video_tokenizer());
    const auto& mc = m.motion->config();
    const auto& vc = m.video->config();
    if (mc.codebook_size != cfg.motion_tokenizer.codebook_size || mc.expansion != cfg.motion_tokenizer.expansion)
        throw std::runtime_error("motion tokenizer checkpoint (B=" + std::to_string(mc.codebook_size) +
                                 ", 1/s=" + std::to_string(mc.expansion) + ") does not match the configuration");
    if (vc.codebook_size != cfg.video_tokenizer.codebook_size || vc.temporal_factor != cfg.video_tokenizer.temporal_factor ||
        vc.spatial_factor != cfg.video_tokenizer.spatial_factor || vc.height != cfg.video_tokenizer.height ||
        vc.width != cfg.video_tokenizer.width)
        throw std::runtime_error("video tokenizer checkpoint does not match the configuration");
    return m;
}

StageModels load_all(const ExperimentConfig& cfg) {
    auto m = load_stage1(cfg);
    require_file(RunPaths(cfg).ar_model(), "train-ar");
    TokenShapes shapes;
    m.ar = load_ar(RunPaths(cfg).ar_model(), &shapes);
    if (!(m.ar->vocab() == cfg.vocab()) || !(shapes == cfg.token_shapes()))
        throw std::runtime_error("AR checkpoint vocabulary or token shapes do not match the configuration");
    return m;
}

MotionSequence motion_from_units(MotionTokenizer& tok, const std::vector<std::vector<int>>& units, float fps) {
    return detokenize(tok, join_units(units), fps);
}

VideoClip pad_clip(const VideoClip& clip) {
    const int frames = (clip.frames + kUnitFrames - 1) / kUnitFrames * kUnitFrames;
    if (frames == clip.frames) return clip;
    VideoClip out = clip;
    out.frames = frames;
    const std::size_t per_frame = static_cast<std::size_t>(clip.height) * clip.width * 3;
    out.pixels.resize(per_frame * frames);
    for (int t = clip.frames; t < frames; ++t)
        std::copy_n(clip.pixels.begin() + per_frame * (clip.frames - 1), per_frame, out.pixels.begin() + per_frame * t);
    return out;
}

}  // namespace

void DataConfig::validate() const {
    if (train_pairs < 1 || heldout_pairs < 1) throw std::invalid_argument("data: pair counts must be positive");
    if (frames < kUnitFrames || frames % kUnitFrames != 0)
        throw std::invalid_argument("data.frames must be a positive multiple of 16");
    if (families.empty()) throw std::invalid_argument("data.families must not be empty");
    for (const auto& f : families) parse_family(f);
    if (video_tokenizer_clips < 1) throw std::invalid_argument("data.video_tokenizer_clips must be positive");
    if (pixels_per_meter <= 0.0) throw std::invalid_argument("data.pixels_per_meter must be positive");
}

nlohmann::json DataConfig::to_json() const {
    return {{"train_pairs", train_pairs},
            {"heldout_pairs", heldout_pairs},
            {"frames", frames},
            {"families", families},
            {"video_tokenizer_clips", video_tokenizer_clips},
            {"pixels_per_meter", pixels_per_meter}};
}

DataConfig DataConfig::from_json(const nlohmann::json& j) {
    constexpr const char* where = "data";
    reject_unknown_keys(
        j, {"train_pairs", "heldout_pairs", "frames", "families", "video_tokenizer_clips", "pixels_per_meter"}, where);
    DataConfig c;
    read_field(j, "train_pairs", c.train_pairs, where);
    read_field(j, "heldout_pairs", c.heldout_pairs, where);
    read_field(j, "frames", c.frames, where);
    read_field(j, "families", c.families, where);
    read_field(j, "video_tokenizer_clips", c.video_tokenizer_clips, where);
    read_field(j, "pixels_per_meter", c.pixels_per_meter, where);
    c.validate();
    return c;
}

void EvalConfig::validate() const {
    if (v2m_sequences < 1 || i2vm_samples < 2) throw std::invalid_argument("eval: need >= 1 V2M and >= 2 I2VM samples");
}

nlohmann::json EvalConfig::to_json() const {
    return {{"v2m_sequences", v2m_sequences}, {"i2vm_samples", i2vm_samples}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
    constexpr const char* where = "eval";
    reject_unknown_keys(j, {"v2m_sequences", "i2vm_samples"}, where);
    EvalConfig c;
    read_field(j, "v2m_sequences", c.v2m_sequences, where);
    read_field(j, "i2vm_samples", c.i2vm_samples, where);
    c.validate();
    return c;
}

void SweepConfig::validate() const {
    if (expansions.empty() || codebooks.empty() || seeds < 1) throw std::invalid_argument("sweep: empty grid");
    for (int e : expansions) TokenizerConfig{.expansion = e}.validate();
    for (int b : codebooks)
        if (b < 1) throw std::invalid_argument("sweep: codebook sizes must be positive");
    train.validate();
}

nlohmann::json SweepConfig::to_json() const {
    return {{"expansions", expansions}, {"codebooks", codebooks}, {"seeds", seeds}, {"train", train.to_json()}};
}

SweepConfig SweepConfig::from_json(const nlohmann::json& j) {
    constexpr const char* where = "sweep";
    reject_unknown_keys(j, {"expansions", "codebooks", "seeds", "train"}, where);
    SweepConfig c;
    read_field(j, "expansions", c.expansions, where);
    read_field(j, "codebooks", c.codebooks, where);
    read_field(j, "seeds", c.seeds, where);
    c.train = sub(j, "train", c.train, &TokenizerTrainConfig::from_json);
    c.validate();
    return c;
}

ExperimentConfig::ExperimentConfig() {
    // Desk defaults for the full pipeline. s = 1 keeps unified sequences near 60
    // tokens, so stage 2 sees many epochs of the 2000 pairs; dropout and weight
    // decay keep it from memorizing them.
    motion_tokenizer.expansion = 1;
    motion_train.steps = 3000;
    motion_train.window = 16;
    motion_train.learning_rate = 3e-3;
    ar.max_length = 1024;
    ar.dropout = 0.1;
    ar_train.steps = 3000;
    ar_train.batch = 48;
    ar_train.weight_decay = 0.05;
    sweep.codebooks = {64, 256, 512};
    sweep.train.steps = 1200;
    sweep.train.window = 16;
    sweep.train.learning_rate = 3e-3;
}

void ExperimentConfig::validate() const {
    if (output_dir.empty()) throw std::invalid_argument("output_dir must not be empty");
    data.validate();
    motion_tokenizer.validate();
    motion_train.validate();
    video_tokenizer.validate();
    video_train.validate();
    ar.validate();
    ar_train.validate();
    v2m_decode.validate();
    i2vm_decode.validate();
    eval.validate();
    sweep.validate();
    if (render.height != video_tokenizer.height || render.width != video_tokenizer.width)
        throw std::invalid_argument("render resolution must equal the video tokenizer resolution");
    if (motion_train.window > data.frames || sweep.train.window > data.frames)
        throw std::invalid_argument("tokenizer training window exceeds data.frames");
    token_shapes().validate();
    const auto shapes = token_shapes();
    const int units = data.frames / kUnitFrames;
    const int longest = 2 + shapes.image_tokens() + units * (shapes.visual_per_unit() + shapes.motion_per_unit());
    if (longest > ar.max_length)
        throw std::invalid_argument("ar.max_length " + std::to_string(ar.max_length) + " is shorter than the " +
                                    std::to_string(longest) + "-token I2VM sequence");
}

nlohmann::json ExperimentConfig::to_json() const {
    return {{"seed", seed},
            {"output_dir", output_dir},
            {"data", data.to_json()},
            {"render", render_to_json(render)},
            {"motion_tokenizer", motion_tokenizer.to_json()},
            {"motion_train", motion_train.to_json()},
            {"video_tokenizer", video_tokenizer.to_json()},
            {"video_train", video_train.to_json()},
            {"ar", ar.to_json()},
            {"ar_train", ar_train.to_json()},
            {"v2m_decode", v2m_decode.to_json()},
            {"i2vm_decode", i2vm_decode.to_json()},
            {"eval", eval.to_json()},
            {"sweep", sweep.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& partial) {
    constexpr const char* where = "config";
    reject_unknown_keys(partial,
                        {"seed", "output_dir", "data", "render", "motion_tokenizer", "motion_train", "video_tokenizer",
                         "video_train", "ar", "ar_train", "v2m_decode", "i2vm_decode", "eval", "sweep"},
                        where);
    // Missing keys keep the experiment defaults, which differ from the component defaults.
    ExperimentConfig c;
    nlohmann::json j = c.to_json();
    j.merge_patch(partial);
    read_field(j, "seed", c.seed, where);
    read_field(j, "output_dir", c.output_dir, where);
    c.data = sub(j, "data", c.data, &DataConfig::from_json);
    c.render = sub(j, "render", c.render, &render_from_json);
    c.motion_tokenizer = sub(j, "motion_tokenizer", c.motion_tokenizer, &TokenizerConfig::from_json);
    c.motion_train = sub(j, "motion_train", c.motion_train, &TokenizerTrainConfig::from_json);
    c.video_tokenizer = sub(j, "video_tokenizer", c.video_tokenizer, &VideoTokenizerConfig::from_json);
    c.video_train = sub(j, "video_train", c.video_train, &VideoTokenizerTrainConfig::from_json);
    c.ar = sub(j, "ar", c.ar, &ARConfig::from_json);
    c.ar_train = sub(j, "ar_train", c.ar_train, &ARTrainConfig::from_json);
    c.v2m_decode = sub(j, "v2m_decode", c.v2m_decode, &DecodeConfig::from_json);
    c.i2vm_decode = sub(j, "i2vm_decode", c.i2vm_decode, &DecodeConfig::from_json);
    c.eval = sub(j, "eval", c.eval, &EvalConfig::from_json);
    c.sweep = sub(j, "sweep", c.sweep, &SweepConfig::from_json);
    c.validate();
    return c;
}

std::string ExperimentConfig::hash() const {
    const auto text = to_json().dump();
    return hex16(fnv1a(text.data(), text.size()));
}

VocabLayout ExperimentConfig::vocab() const { return {video_tokenizer.codebook_size, motion_tokenizer.codebook_size}; }

TokenShapes ExperimentConfig::token_shapes() const {
    TokenShapes s;
    s.grid_h = video_tokenizer.height / video_tokenizer.spatial_factor;
    s.grid_w = video_tokenizer.width / video_tokenizer.spatial_factor;
    s.visual_slabs = kUnitFrames / video_tokenizer.temporal_factor;
    s.temporal_factor = video_tokenizer.temporal_factor;
    s.motion_per_frame = motion_tokenizer.expansion;
    return s;
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must look like key.path=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json* node = &config;
    std::stringstream parts(key);
    std::string part;
    while (std::getline(parts, part, '.')) {
        if (!node->is_object() || !node->contains(part))
            throw std::invalid_argument("override: unknown key '" + key + "'");
        node = &(*node)[part];
    }
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    *node = value;
}

ExperimentConfig resolve_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
    nlohmann::json j = ExperimentConfig{}.to_json();
    if (file) {
        std::ifstream in(*file);
        if (!in) throw std::runtime_error("cannot read config " + file->string());
        nlohmann::json user;
        try {
            user = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument("config " + file->string() + ": " + e.what());
        }
        ExperimentConfig::from_json(user);  // rejects unknown keys before merging
        j.merge_patch(user);
    }
    for (const auto& o : overrides) apply_override(j, o);
    return ExperimentConfig::from_json(j);
}

JsonlWriter::JsonlWriter(const fs::path& path, std::string config_hash) : path_(path), hash_(std::move(config_hash)) {
    fs::create_directories(path_.parent_path());
}

void JsonlWriter::write(nlohmann::json entry) {
    entry["config_hash"] = hash_;
    std::ofstream(path_, std::ios::app) << entry.dump() << '\n';
}

TrainLogger JsonlWriter::logger() {
    return [this](const nlohmann::json& j) { write(j); };
}

body::StubBody experiment_body(const ExperimentConfig& cfg) {
    return body::StubBody::procedural(derive_seed(cfg.seed, SeedStream::body));
}

MotionDataset generate_motions(const ExperimentConfig& cfg, Split split) {
    const bool train = split == Split::train;
    const int count = train ? cfg.data.train_pairs : cfg.data.heldout_pairs;
    const auto stream = train ? SeedStream::data : SeedStream::heldout_data;
    MotionDataset d;
    for (int i = 0; i < count; ++i) {
        MotionRecord r;
        char id[32];
        std::snprintf(id, sizeof id, "%s-%05d", train ? "train" : "heldout", i);
        r.id = id;
        r.family = parse_family(cfg.data.families[i % cfg.data.families.size()]);
        r.seed = derive_seed(cfg.seed, stream, i);
        r.motion = generate_procedural_motion(r.seed, cfg.data.frames, r.family);
        d.records.push_back(std::move(r));
    }
    d.manifest = {{"split", train ? "train" : "heldout"}, {"config_hash", cfg.hash()}, {"count", count}};
    return d;
}

VideoClip render_pair_clip(const ExperimentConfig& cfg, const body::StubBody& body, const MotionSequence& m) {
    return render_motion(m, body, Camera::following_start(m, cfg.data.pixels_per_meter), cfg.render);
}

std::uint64_t clip_hash(const VideoClip& clip) {
    const std::int32_t dims[3] = {clip.frames, clip.height, clip.width};
    const auto h = fnv1a(dims, sizeof dims);
    return fnv1a(clip.pixels.data(), clip.pixels.size() * sizeof(float), h);
}

MotionDataset load_split(const ExperimentConfig& cfg, Split split) {
    const RunPaths paths(cfg);
    const auto path = split == Split::train ? paths.train_motions() : paths.heldout_motions();
    require_file(path, "gen-data");
    return load_dataset(path);
}

std::vector<PairTokens> tokenize_pairs(const ExperimentConfig& cfg, MotionTokenizer& motion_tok,
                                       VideoTokenizer& video_tok, const std::vector<MotionSequence>& motions) {
    const auto body = experiment_body(cfg);
    const auto shapes = cfg.token_shapes();
    const auto motion_ids = tokenize_all(motion_tok, motions);
    std::vector<PairTokens> out;
    out.reserve(motions.size());
    for (std::size_t i = 0; i < motions.size(); ++i) {
        const auto clip = render_pair_clip(cfg, body, motions[i]);
        PairTokens p;
        p.image = image_tokens(video_tok, clip, 0).ids;
        p.video_units = split_units(video_encode(video_tok, clip).ids, shapes.visual_per_unit());
        p.motion_units = split_units(motion_ids[i], shapes.motion_per_unit());
        out.push_back(std::move(p));
    }
    return out;
}

MotionSequence mean_pose_motion(const std::vector<MotionSequence>& motions, int frames) {
    if (motions.empty()) throw std::invalid_argument("mean_pose_motion: empty set");
    Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(kMotionChannels);
    double n = 0.0;
    for (const auto& m : motions) {
        sum += channel_concat(m).cast<double>().colwise().sum();
        n += m.frames();
    }
    RowMatrixXf x(frames, kMotionChannels);
    for (int t = 0; t < frames; ++t) x.row(t) = (sum / n).cast<float>();
    return channel_split(x, motions.front().fps);
}

MotionSequence permute_joint_channels(const MotionSequence& m, std::uint64_t seed) {
    std::vector<int> order(kThetaChannels);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    MotionSequence out = m;
    for (int c = 0; c < kThetaChannels; ++c) out.theta.col(c) = m.theta.col(order[c]);
    return out;
}

nlohmann::json reconstruction_json(const metrics::ReconstructionReport& r) {
    return {{"mpjpe_mm", r.mpjpe_mm},
            {"pa_mpjpe_mm", r.pa_mpjpe_mm},
            {"pve_mm", r.pve_mm},
            {"accel", r.accel},
            {"sequences", r.sequences}};
}

nlohmann::json cmd_gen_data(const ExperimentConfig& cfg) {
    const RunPaths paths(cfg);
    fs::create_directories(paths.root / "data");
    const auto body = experiment_body(cfg);
    nlohmann::json pairs = nlohmann::json::array();
    int out_of_frame = 0;
    for (const auto split : {Split::train, Split::heldout}) {
        const auto d = generate_motions(cfg, split);
        save_dataset(d, split == Split::train ? paths.train_motions() : paths.heldout_motions());
        for (std::size_t i = 0; i < d.records.size(); ++i) {
            const auto& r = d.records[i];
            const auto clip = render_pair_clip(cfg, body, r.motion);
            out_of_frame += clip.mostly_out_of_frame ? 1 : 0;
            pairs.push_back({{"id", r.id},
                             {"split", split == Split::train ? "train" : "heldout"},
                             {"index", i},
                             {"seed", r.seed},
                             {"family", std::string(family_name(r.family))},
                             {"frames", r.motion.frames()},
                             {"motion_checksum", hex16(record_checksum(r.motion))},
                             {"clip_hash", hex16(clip_hash(clip))},
                             {"mostly_out_of_frame", clip.mostly_out_of_frame}});
        }
    }
    const nlohmann::json manifest = {{"config_hash", cfg.hash()},
                                     {"render", render_to_json(cfg.render)},
                                     {"pixels_per_meter", cfg.data.pixels_per_meter},
                                     {"pairs", pairs}};
    std::ofstream(paths.pairs_manifest()) << manifest.dump(1) << '\n';
    return write_report(cfg, "gen-data",
                        {{"train_pairs", cfg.data.train_pairs},
                         {"heldout_pairs", cfg.data.heldout_pairs},
                         {"pairs", pairs.size()},
                         {"frames", cfg.data.frames},
                         {"mostly_out_of_frame", out_of_frame},
                         {"manifest", paths.pairs_manifest().string()}});
}

nlohmann::json cmd_render_dataset(const ExperimentConfig& cfg, Split split, int limit, const fs::path& dir) {
    const auto d = load_split(cfg, split);
    const auto body = experiment_body(cfg);
    fs::create_directories(dir);
    int written = 0;
    for (const auto& r : d.records) {
        if (limit >= 0 && written >= limit) break;
        save_clip(render_pair_clip(cfg, body, r.motion), dir / (r.id + ".clip.hvm"), cfg.hash());
        ++written;
    }
    return write_report(cfg, "render-dataset", {{"clips", written}, {"directory", dir.string()}});
}

nlohmann::json cmd_train_motion_tokenizer(const ExperimentConfig& cfg) {
    const RunPaths paths(cfg);
    const auto motions = motions_of(load_split(cfg, Split::train));
    JsonlWriter log(paths.log("train-motion-tokenizer"), cfg.hash());
    const auto t0 = std::chrono::steady_clock::now();
    auto result = train_tokenizer(motions, cfg.motion_tokenizer, cfg.motion_train,
                                  derive_seed(cfg.seed, SeedStream::motion_tokenizer), log.logger());
    const double seconds = seconds_since(t0);
    fs::create_directories(paths.motion_tokenizer().parent_path());
    save_tokenizer(result.model, paths.motion_tokenizer(),
                   {{"config_hash", cfg.hash()}, {"stage", "motion_tokenizer"}, {"seconds", seconds}});
    return write_report(cfg, "train-motion-tokenizer",
                        {{"seconds", seconds},
                         {"steps", cfg.motion_train.steps},
                         {"final", result.log.empty() ? nlohmann::json() : result.log.back()},
                         {"checkpoint", paths.motion_tokenizer().string()}});
}

nlohmann::json cmd_train_video_tokenizer(const ExperimentConfig& cfg) {
    const RunPaths paths(cfg);
    const auto motions = motions_of(load_split(cfg, Split::train), cfg.data.video_tokenizer_clips);
    const auto body = experiment_body(cfg);
    std::vector<VideoClip> clips;
    for (const auto& m : motions) clips.push_back(render_pair_clip(cfg, body, m));
    JsonlWriter log(paths.log("train-video-tokenizer"), cfg.hash());
    const auto t0 = std::chrono::steady_clock::now();
    auto result = train_video_tokenizer(clips, cfg.video_tokenizer, cfg.video_train,
                                        derive_seed(cfg.seed, SeedStream::video_tokenizer), log.logger());
    const double seconds = seconds_since(t0);
    fs::create_directories(paths.video_tokenizer().parent_path());
    save_video_tokenizer(result.model, paths.video_tokenizer(),
                         {{"config_hash", cfg.hash()}, {"stage", "video_tokenizer"}, {"seconds", seconds}});
    return write_report(cfg, "train-video-tokenizer",
                        {{"seconds", seconds},
                         {"clips", clips.size()},
                         {"active_codes", result.model->active_codes()},
                         {"final", result.log.empty() ? nlohmann::json() : result.log.back()},
                         {"checkpoint", paths.video_tokenizer().string()}});
}

nlohmann::json cmd_train_ar(const ExperimentConfig& cfg) {
    const RunPaths paths(cfg);
    auto models = load_stage1(cfg);  // frozen from here on
    const auto motions = motions_of(load_split(cfg, Split::train));
    const auto t0 = std::chrono::steady_clock::now();
    const auto pairs = tokenize_pairs(cfg, models.motion, models.video, motions);
    const double tokenize_seconds = seconds_since(t0);
    JsonlWriter log(paths.log("train-ar"), cfg.hash());
    const auto t1 = std::chrono::steady_clock::now();
    auto result = train_ar(pairs, cfg.ar, cfg.vocab(), cfg.token_shapes(), cfg.ar_train,
                           derive_seed(cfg.seed, SeedStream::ar_model), log.logger());
    const double seconds = seconds_since(t1);
    int v2m = 0, i2vm = 0;
    for (const auto& e : result.log) {
        v2m += e.at("v2m_sequences").get<int>();
        i2vm += e.at("i2vm_sequences").get<int>();
    }
    save_ar(result.model, cfg.token_shapes(), paths.ar_model(),
            {{"config_hash", cfg.hash()}, {"stage", "ar_model"}, {"seconds", seconds}});
    return write_report(cfg, "train-ar",
                        {{"seconds", seconds},
                         {"tokenize_seconds", tokenize_seconds},
                         {"pairs", pairs.size()},
                         {"v2m_sequences", v2m},
                         {"i2vm_sequences", i2vm},
                         {"final", result.log.empty() ? nlohmann::json() : result.log.back()},
                         {"checkpoint", paths.ar_model().string()}});
}

nlohmann::json cmd_eval_tokenizer(const ExperimentConfig& cfg) {
    auto models = load_stage1(cfg);
    const auto body = experiment_body(cfg);
    const auto train = motions_of(load_split(cfg, Split::train));
    const auto held = motions_of(load_split(cfg, Split::heldout));

    const auto rec = reconstruct_all(models.motion, held);
    const auto report = metrics::evaluate_reconstruction(body, rec, held);
    std::vector<int> ids;
    for (const auto& v : tokenize_all(models.motion, held)) ids.insert(ids.end(), v.begin(), v.end());
    const auto baseline = metrics::evaluate_reconstruction(
        body, std::vector<MotionSequence>(held.size(), mean_pose_motion(train, cfg.data.frames)), held);

    double l1 = 0.0, gray = 0.0;
    std::vector<int> vids;
    for (const auto& m : held) {
        const auto clip = render_pair_clip(cfg, body, m);
        const auto t = video_encode(models.video, clip);
        vids.insert(vids.end(), t.ids.begin(), t.ids.end());
        l1 += pixel_l1(video_decode(models.video, t), clip);
        gray += pixel_l1(VideoClip::blank(clip.frames, clip.height, clip.width, 0.5f), clip);
    }
    const double n = static_cast<double>(held.size());
    return write_report(
        cfg, "eval-tokenizer",
        {{"motion", reconstruction_json(report)},
         {"motion_utilization", codebook_utilization(ids, cfg.motion_tokenizer.codebook_size)},
         {"mean_pose_baseline", reconstruction_json(baseline)},
         {"video_pixel_l1", l1 / n},
         {"video_gray_baseline_l1", gray / n},
         {"video_utilization", codebook_utilization(vids, cfg.video_tokenizer.codebook_size)},
         {"metrics",
          {metrics::to_json({"mpjpe", report.mpjpe_mm, "mm", report.sequences, cfg.hash()}),
           metrics::to_json({"pa_mpjpe", report.pa_mpjpe_mm, "mm", report.sequences, cfg.hash()}),
           metrics::to_json({"pve", report.pve_mm, "mm", report.sequences, cfg.hash()}),
           metrics::to_json({"accel", report.accel, "m/s^2", report.sequences, cfg.hash()})}}});
}

nlohmann::json cmd_eval_v2m(const ExperimentConfig& cfg) {
    auto models = load_all(cfg);
    const auto body = experiment_body(cfg);
    const auto held = motions_of(load_split(cfg, Split::heldout), cfg.eval.v2m_sequences);
    const auto pairs = tokenize_pairs(cfg, models.motion, models.video, held);
    const auto shapes = cfg.token_shapes();
    const auto vocab = cfg.vocab();

    std::vector<MotionSequence> captured;
    std::int64_t correct = 0, total = 0;
    int parse_failures = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto cond = build_v2m_sequence(vocab, shapes, pairs[i].video_units, {});
        std::mt19937_64 rng(derive_seed(cfg.seed, SeedStream::sampling, i));
        const int units = static_cast<int>(pairs[i].video_units.size());
        const auto out = sample(models.ar, cond, units, shapes, cfg.v2m_decode, rng);
        const auto parsed = parse_sequence(out.ids, vocab, shapes);
        if (!parsed.ok) ++parse_failures;
        const auto pred = join_units(parsed.motion_units), gt = join_units(pairs[i].motion_units);
        for (std::size_t k = 0; k < std::min(pred.size(), gt.size()); ++k) correct += pred[k] == gt[k];
        total += static_cast<std::int64_t>(gt.size());
        captured.push_back(motion_from_units(models.motion, parsed.motion_units, held[i].fps));
    }
    const auto report = metrics::evaluate_reconstruction(body, captured, held);
    const auto floor = metrics::evaluate_reconstruction(body, reconstruct_all(models.motion, held), held);
    return write_report(cfg, "eval-v2m",
                        {{"v2m", reconstruction_json(report)},
                         {"tokenizer_floor", reconstruction_json(floor)},
                         {"mpjpe_ratio_to_floor", report.mpjpe_mm / floor.mpjpe_mm},
                         {"token_accuracy", static_cast<double>(correct) / static_cast<double>(total)},
                         {"parse_failures", parse_failures},
                         {"decode", cfg.v2m_decode.to_json()},
                         {"metrics",
                          {metrics::to_json({"v2m_mpjpe", report.mpjpe_mm, "mm", report.sequences, cfg.hash()}),
                           metrics::to_json({"v2m_pa_mpjpe", report.pa_mpjpe_mm, "mm", report.sequences, cfg.hash()}),
                           metrics::to_json({"tokenizer_floor_mpjpe", floor.mpjpe_mm, "mm", floor.sequences,
                                             cfg.hash()})}}});
}

nlohmann::json cmd_eval_i2vm(const ExperimentConfig& cfg) {
    auto models = load_all(cfg);
    const auto body = experiment_body(cfg);
    const auto held = motions_of(load_split(cfg, Split::heldout));
    const int n = std::min<int>(cfg.eval.i2vm_samples, static_cast<int>(held.size()));
    const auto shapes = cfg.token_shapes();
    const auto vocab = cfg.vocab();
    const int units = cfg.data.frames / kUnitFrames;

    std::vector<Eigen::VectorXd> data_rows, gen_rows, base_rows;
    for (const auto& m : held) data_rows.push_back(metrics::kinematic_features(m, body));
    int parse_failures = 0;
    double video_l1 = 0.0;
    for (int i = 0; i < n; ++i) {
        const auto clip = render_pair_clip(cfg, body, held[i]);
        const auto image = image_tokens(models.video, clip, 0).ids;
        const auto cond = build_i2vm_sequence(vocab, shapes, image, {}, {});
        std::mt19937_64 rng(derive_seed(cfg.seed, SeedStream::sampling, 100000 + i));
        const auto out = sample(models.ar, cond, units, shapes, cfg.i2vm_decode, rng);
        const auto parsed = parse_sequence(out.ids, vocab, shapes);
        if (!parsed.ok) ++parse_failures;
        gen_rows.push_back(
            metrics::kinematic_features(motion_from_units(models.motion, parsed.motion_units, held[i].fps), body));
        const VideoTokens vt{join_units(parsed.video_units), units * shapes.visual_slabs, shapes.grid_h, shapes.grid_w};
        video_l1 += pixel_l1(video_decode(models.video, vt), clip);
        base_rows.push_back(metrics::kinematic_features(
            permute_joint_channels(held[i], derive_seed(cfg.seed, SeedStream::evaluation, i)), body));
    }
    const auto data = metrics::stack_features(data_rows);
    const auto gen = metrics::stack_features(gen_rows);
    const auto base = metrics::stack_features(base_rows);
    const double fid_gen = metrics::fid(gen, data), fid_base = metrics::fid(base, data);
    const double div_gen = metrics::diversity(gen), div_data = metrics::diversity(data);
    return write_report(cfg, "eval-i2vm",
                        {{"samples", n},
                         {"dataset_sequences", held.size()},
                         {"fid_generated", fid_gen},
                         {"fid_permuted_baseline", fid_base},
                         {"div_generated", div_gen},
                         {"div_dataset", div_data},
                         {"div_ratio", div_gen / div_data},
                         {"video_pixel_l1_vs_reference", video_l1 / n},
                         {"feature_window_frames", cfg.data.frames},
                         {"parse_failures", parse_failures},
                         {"decode", cfg.i2vm_decode.to_json()},
                         {"metrics",
                          {metrics::to_json({"i2vm_fid", fid_gen, "", n, cfg.hash()}),
                           metrics::to_json({"permuted_fid", fid_base, "", n, cfg.hash()}),
                           metrics::to_json({"i2vm_div", div_gen, "", n, cfg.hash()}),
                           metrics::to_json({"dataset_div", div_data, "",
                                             static_cast<std::int64_t>(held.size()), cfg.hash()})}}});
}

std::vector<SweepCell> run_sweep(const ExperimentConfig& cfg, std::vector<SweepRun>* runs_out,
                                 const ProgressFn& progress) {
    const auto body = experiment_body(cfg);
    const auto train = motions_of(load_split(cfg, Split::train));
    const auto held = motions_of(load_split(cfg, Split::heldout));
    std::vector<SweepRun> runs;
    std::vector<SweepCell> cells;
    for (int codebook : cfg.sweep.codebooks) {
        for (int expansion : cfg.sweep.expansions) {
            SweepCell cell;
            cell.expansion = expansion;
            cell.codebook = codebook;
            std::vector<double> pa, pve, accel;
            for (int s = 0; s < cfg.sweep.seeds; ++s) {
                TokenizerConfig tc = cfg.motion_tokenizer;
                tc.expansion = expansion;
                tc.codebook_size = codebook;
                const auto t0 = std::chrono::steady_clock::now();
                auto result = train_tokenizer(train, tc, cfg.sweep.train,
                                              derive_seed(cfg.seed, SeedStream::motion_tokenizer, 1 + s));
                SweepRun run;
                run.expansion = expansion;
                run.codebook = codebook;
                run.seed_index = s;
                run.seconds = seconds_since(t0);
                run.report = metrics::evaluate_reconstruction(body, reconstruct_all(result.model, held), held);
                std::vector<int> ids;
                for (const auto& v : tokenize_all(result.model, held)) ids.insert(ids.end(), v.begin(), v.end());
                run.utilization = codebook_utilization(ids, codebook);
                cell.mpjpe_per_seed.push_back(run.report.mpjpe_mm);
                cell.utilization_per_seed.push_back(run.utilization);
                pa.push_back(run.report.pa_mpjpe_mm);
                pve.push_back(run.report.pve_mm);
                accel.push_back(run.report.accel);
                if (progress)
                    progress({{"expansion", expansion},
                              {"codebook", codebook},
                              {"seed_index", s},
                              {"mpjpe_mm", run.report.mpjpe_mm},
                              {"utilization", run.utilization},
                              {"seconds", run.seconds}});
                runs.push_back(run);
            }
            cell.mpjpe = median(cell.mpjpe_per_seed);
            cell.pa_mpjpe = median(pa);
            cell.pve = median(pve);
            cell.accel = median(accel);
            cell.utilization = median(cell.utilization_per_seed);
            cells.push_back(cell);
        }
    }

    const RunPaths paths(cfg);
    fs::create_directories(paths.root / "reports");
    std::ofstream csv(paths.root / "reports" / "sweep.csv");
    csv << "config_hash,s,expansion,codebook,seeds,mpjpe_mm,pa_mpjpe_mm,pve_mm,accel,utilization,mpjpe_per_seed\n";
    for (const auto& c : cells) {
        csv << cfg.hash() << ",1/" << c.expansion << ',' << c.expansion << ',' << c.codebook << ','
            << c.mpjpe_per_seed.size() << ',' << c.mpjpe << ',' << c.pa_mpjpe << ',' << c.pve << ',' << c.accel << ','
            << c.utilization << ',';
        for (std::size_t k = 0; k < c.mpjpe_per_seed.size(); ++k) csv << (k ? ";" : "") << c.mpjpe_per_seed[k];
        csv << '\n';
    }
    std::ofstream runs_csv(paths.root / "reports" / "sweep_runs.csv");
    runs_csv << "config_hash,expansion,codebook,seed_index,mpjpe_mm,pa_mpjpe_mm,pve_mm,accel,utilization,seconds\n";
    for (const auto& r : runs)
        runs_csv << cfg.hash() << ',' << r.expansion << ',' << r.codebook << ',' << r.seed_index << ','
                 << r.report.mpjpe_mm << ',' << r.report.pa_mpjpe_mm << ',' << r.report.pve_mm << ','
                 << r.report.accel << ',' << r.utilization << ',' << r.seconds << '\n';
    if (runs_out) *runs_out = std::move(runs);
    return cells;
}

nlohmann::json cmd_sweep(const ExperimentConfig& cfg) {
    JsonlWriter log(RunPaths(cfg).log("sweep"), cfg.hash());
    const auto cells = run_sweep(cfg, nullptr, log.logger());
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& c : cells)
        rows.push_back({{"expansion", c.expansion},
                        {"codebook", c.codebook},
                        {"mpjpe_mm", c.mpjpe},
                        {"pa_mpjpe_mm", c.pa_mpjpe},
                        {"pve_mm", c.pve},
                        {"accel", c.accel},
                        {"utilization", c.utilization},
                        {"mpjpe_per_seed", c.mpjpe_per_seed}});
    return write_report(cfg, "sweep", {{"cells", rows}, {"csv", (RunPaths(cfg).root / "reports" / "sweep.csv").string()}});
}

nlohmann::json cmd_generate(const ExperimentConfig& cfg, const VideoClip& reference, int frame, int units,
                            const fs::path& out_prefix, std::uint64_t seed) {
    auto models = load_all(cfg);
    const auto shapes = cfg.token_shapes();
    const auto vocab = cfg.vocab();
    const auto image = image_tokens(models.video, reference, frame).ids;
    std::mt19937_64 rng(seed);
    const auto out = sample(models.ar, build_i2vm_sequence(vocab, shapes, image, {}, {}), units, shapes,
                            cfg.i2vm_decode, rng);
    const auto parsed = parse_sequence(out.ids, vocab, shapes);
    MotionDataset d;
    d.records.push_back({"generated", motion_from_units(models.motion, parsed.motion_units, reference.fps),
                         MotionFamily::walk, seed});
    d.manifest = {{"config_hash", cfg.hash()}, {"task", "i2vm"}};
    const VideoTokens vt{join_units(parsed.video_units), units * shapes.visual_slabs, shapes.grid_h, shapes.grid_w};
    const auto video = video_decode(models.video, vt, reference.fps);
    if (!out_prefix.parent_path().empty()) fs::create_directories(out_prefix.parent_path());
    const fs::path motion_path = out_prefix.string() + ".motion.hvm";
    const fs::path video_path = out_prefix.string() + ".clip.hvm";
    save_dataset(d, motion_path);
    save_clip(video, video_path, cfg.hash());
    return write_report(cfg, "generate",
                        {{"units", units},
                         {"tokens", out.length()},
                         {"parsed", parsed.ok},
                         {"motion", motion_path.string()},
                         {"video", video_path.string()}});
}

nlohmann::json cmd_capture(const ExperimentConfig& cfg, const VideoClip& clip, const fs::path& out_motion,
                           const std::optional<MotionSequence>& reference) {
    auto models = load_all(cfg);
    const auto shapes = cfg.token_shapes();
    const auto vocab = cfg.vocab();
    const auto padded = pad_clip(clip);
    const auto units = split_units(video_encode(models.video, padded).ids, shapes.visual_per_unit());
    std::mt19937_64 rng(derive_seed(cfg.seed, SeedStream::sampling));
    const auto out = sample(models.ar, build_v2m_sequence(vocab, shapes, units, {}), static_cast<int>(units.size()),
                            shapes, cfg.v2m_decode, rng);
    const auto parsed = parse_sequence(out.ids, vocab, shapes);
    const auto motion =
        slice_frames(motion_from_units(models.motion, parsed.motion_units, clip.fps), 0, clip.frames);
    MotionDataset d;
    d.records.push_back({"captured", motion, MotionFamily::walk, 0});
    d.manifest = {{"config_hash", cfg.hash()}, {"task", "v2m"}};
    if (!out_motion.parent_path().empty()) fs::create_directories(out_motion.parent_path());
    save_dataset(d, out_motion);
    nlohmann::json report = {{"frames", clip.frames}, {"parsed", parsed.ok}, {"motion", out_motion.string()}};
    if (reference) {
        const auto body = experiment_body(cfg);
        report["reference"] = reconstruction_json(metrics::evaluate_reconstruction(body, {motion}, {*reference}));
    }
    return write_report(cfg, "capture", report);
}

}  // namespace hvm

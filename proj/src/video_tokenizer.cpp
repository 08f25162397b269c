#include "hvm/video_tokenizer.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string_view>

#include "hvm/archive.hpp"
#include "hvm/json_fields.hpp"
#include "hvm/torch_io.hpp"

namespace hvm {

namespace {

// Renders are mostly background; training oversamples patches that show the figure.
constexpr double kFigureShare = 0.75;

std::size_t patch_hash(const torch::Tensor& patch) {
    const auto c = patch.contiguous();
    return std::hash<std::string_view>{}(
        std::string_view(static_cast<const char*>(c.data_ptr()), static_cast<std::size_t>(c.numel()) * c.element_size()));
}

void check_clip_dims(const VideoTokenizerConfig& cfg, int frames, int height, int width) {
    if (frames <= 0 || frames % cfg.temporal_factor != 0 || height % cfg.spatial_factor != 0 ||
        width % cfg.spatial_factor != 0)
        throw std::invalid_argument("video tokenizer: clip dims must be divisible by the patch factors");
    if (height != cfg.height || width != cfg.width)
        throw std::invalid_argument("video tokenizer: clip resolution does not match the configuration");
}

}  // namespace

void VideoTokenizerConfig::validate() const {
    if (codebook_size < 2 || code_dim < 2 || hidden < 1)
        throw std::invalid_argument("video tokenizer: codebook_size/code_dim must be >= 2, hidden >= 1");
    if (temporal_factor < 1 || spatial_factor < 1 || kUnitFrames % temporal_factor != 0)
        throw std::invalid_argument("video tokenizer: temporal factor must divide 16");
    if (height < 1 || width < 1 || height % spatial_factor != 0 || width % spatial_factor != 0)
        throw std::invalid_argument("video tokenizer: resolution must be divisible by the spatial factor");
    if (commitment < 0.0) throw std::invalid_argument("video tokenizer: commitment must be >= 0");
}

int VideoTokenizerConfig::tokens_per_unit() const {
    return (kUnitFrames / temporal_factor) * tokens_per_frame_grid();
}

nlohmann::json VideoTokenizerConfig::to_json() const {
    return {{"codebook_size", codebook_size}, {"code_dim", code_dim},   {"hidden", hidden},
            {"temporal_factor", temporal_factor}, {"spatial_factor", spatial_factor}, {"height", height},
            {"width", width},                 {"commitment", commitment}};
}

VideoTokenizerConfig VideoTokenizerConfig::from_json(const nlohmann::json& j) {
    constexpr const char* where = "video_tokenizer";
    reject_unknown_keys(j, {"codebook_size", "code_dim", "hidden", "temporal_factor", "spatial_factor", "height",
                            "width", "commitment"},
                        where);
    VideoTokenizerConfig c;
    read_field(j, "codebook_size", c.codebook_size, where);
    read_field(j, "code_dim", c.code_dim, where);
    read_field(j, "hidden", c.hidden, where);
    read_field(j, "temporal_factor", c.temporal_factor, where);
    read_field(j, "spatial_factor", c.spatial_factor, where);
    read_field(j, "height", c.height, where);
    read_field(j, "width", c.width, where);
    read_field(j, "commitment", c.commitment, where);
    c.validate();
    return c;
}

void VideoTokenizerTrainConfig::validate() const {
    if (steps < 0 || batch < 1 || learning_rate <= 0.0 || reinit_every < 1 || log_every < 1)
        throw std::invalid_argument("video tokenizer training: steps/batch/learning_rate/reinit_every/log_every out of range");
}

nlohmann::json VideoTokenizerTrainConfig::to_json() const {
    return {{"steps", steps},
            {"batch", batch},
            {"learning_rate", learning_rate},
            {"reinit_every", reinit_every},
            {"log_every", log_every}};
}

VideoTokenizerTrainConfig VideoTokenizerTrainConfig::from_json(const nlohmann::json& j) {
    constexpr const char* where = "video_tokenizer.train";
    reject_unknown_keys(j, {"steps", "batch", "learning_rate", "reinit_every", "log_every"}, where);
    VideoTokenizerTrainConfig c;
    read_field(j, "steps", c.steps, where);
    read_field(j, "batch", c.batch, where);
    read_field(j, "learning_rate", c.learning_rate, where);
    read_field(j, "reinit_every", c.reinit_every, where);
    read_field(j, "log_every", c.log_every, where);
    c.validate();
    return c;
}

VideoTokenizerImpl::VideoTokenizerImpl(const VideoTokenizerConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    namespace nn = torch::nn;
    encoder = register_module("encoder", nn::Sequential(nn::Linear(cfg.patch_size(), cfg.hidden),
                                                        nn::LayerNorm(nn::LayerNormOptions({cfg.hidden})), nn::ReLU(),
                                                        nn::Linear(cfg.hidden, cfg.code_dim)));
    decoder = register_module("decoder", nn::Sequential(nn::Linear(cfg.code_dim, cfg.hidden),
                                                        nn::LayerNorm(nn::LayerNormOptions({cfg.hidden})), nn::ReLU(),
                                                        nn::Linear(cfg.hidden, cfg.patch_size())));
    codebook = register_parameter("codebook", torch::randn({cfg.codebook_size, cfg.code_dim}) * 0.1);
    active = register_buffer("active", torch::ones({cfg.codebook_size}, torch::kBool));
    pixel_mean = register_buffer("pixel_mean", torch::full({cfg.patch_size()}, 0.5f));
}

torch::Tensor VideoTokenizerImpl::embed(const torch::Tensor& patches) {
    return encoder->forward(patches - pixel_mean);
}

torch::Tensor VideoTokenizerImpl::reconstruct_patches(const torch::Tensor& codes) {
    return decoder->forward(codes) + pixel_mean;
}

torch::Tensor VideoTokenizerImpl::nearest(const torch::Tensor& latents) const {
    const auto idx = active.nonzero().flatten();
    if (idx.numel() == 0) throw std::logic_error("video tokenizer: no active codes");
    const auto q = nearest_codes(latents.t().unsqueeze(0), codebook.index_select(0, idx));
    return idx.index_select(0, q.ids.flatten());
}

void VideoTokenizerImpl::snap() {
    torch::NoGradGuard guard;
    decoded_ = reconstruct_patches(codebook).clamp(0.0, 1.0).contiguous();
    lookup_.clear();
    for (std::int64_t j = 0; j < decoded_.size(0); ++j) {
        if (snapped_id(decoded_[j]) >= 0) {
            active[j] = false;  // duplicate of a lower index
            continue;
        }
        if (active[j].item<bool>()) lookup_.emplace(patch_hash(decoded_[j]), static_cast<int>(j));
    }
}

int VideoTokenizerImpl::snapped_id(const torch::Tensor& patch) const {
    const auto range = lookup_.equal_range(patch_hash(patch));
    for (auto it = range.first; it != range.second; ++it)
        if (torch::equal(decoded_[it->second], patch)) return it->second;
    return -1;
}

torch::Tensor patchify(const VideoClip& clip, int temporal_factor, int spatial_factor) {
    const int tt = clip.frames / temporal_factor, hh = clip.height / spatial_factor, ww = clip.width / spatial_factor;
    const auto x = torch::from_blob(const_cast<float*>(clip.pixels.data()),
                                    {tt, temporal_factor, hh, spatial_factor, ww, spatial_factor, 3}, torch::kFloat32);
    return x.permute({0, 2, 4, 1, 3, 5, 6}).reshape({tt * hh * ww, -1}).clone();
}

VideoClip unpatchify(const torch::Tensor& patches, int t, int h, int w, int temporal_factor, int spatial_factor,
                     float fps) {
    const auto x = patches.detach()
                       .to(torch::kFloat32)
                       .reshape({t, h, w, temporal_factor, spatial_factor, spatial_factor, 3})
                       .permute({0, 3, 1, 4, 2, 5, 6})
                       .clamp(0.0, 1.0)
                       .contiguous();
    VideoClip clip;
    clip.frames = t * temporal_factor;
    clip.height = h * spatial_factor;
    clip.width = w * spatial_factor;
    clip.fps = fps;
    clip.pixels.assign(x.data_ptr<float>(), x.data_ptr<float>() + x.numel());
    return clip;
}

VideoTokens video_encode(VideoTokenizer& tok, const VideoClip& clip) {
    const auto& cfg = tok->config();
    check_clip_dims(cfg, clip.frames, clip.height, clip.width);
    if (!tok->snapped()) tok->snap();
    torch::NoGradGuard guard;
    const auto patches = patchify(clip, cfg.temporal_factor, cfg.spatial_factor);
    const auto ids = tok->nearest(tok->embed(patches)).contiguous();
    VideoTokens out;
    out.t = clip.frames / cfg.temporal_factor;
    out.h = clip.height / cfg.spatial_factor;
    out.w = clip.width / cfg.spatial_factor;
    out.ids.assign(ids.data_ptr<std::int64_t>(), ids.data_ptr<std::int64_t>() + ids.numel());
    for (std::size_t i = 0; i < out.ids.size(); ++i) {
        const int known = tok->snapped_id(patches[static_cast<std::int64_t>(i)]);
        if (known >= 0) out.ids[i] = known;
    }
    return out;
}

VideoClip video_decode(VideoTokenizer& tok, const VideoTokens& tokens, float fps) {
    const auto& cfg = tok->config();
    if (tokens.t < 1 || tokens.h * cfg.spatial_factor != cfg.height || tokens.w * cfg.spatial_factor != cfg.width ||
        static_cast<std::size_t>(tokens.t) * tokens.h * tokens.w != tokens.ids.size())
        throw std::invalid_argument("video_decode: token grid does not match the configuration");
    std::vector<std::int64_t> idx(tokens.ids.begin(), tokens.ids.end());
    for (auto i : idx)
        if (i < 0 || i >= cfg.codebook_size) throw std::invalid_argument("video_decode: token id out of range");
    if (!tok->snapped()) tok->snap();
    return unpatchify(tok->decoded_patches().index_select(0, torch::tensor(idx, torch::kInt64)), tokens.t, tokens.h,
                      tokens.w, cfg.temporal_factor, cfg.spatial_factor, fps);
}

VideoTokens image_tokens(VideoTokenizer& tok, const VideoClip& clip, int frame) {
    if (frame < 0 || frame >= clip.frames) throw std::invalid_argument("image_tokens: frame out of range");
    const int ft = tok->config().temporal_factor;
    VideoClip still = VideoClip::blank(ft, clip.height, clip.width);
    still.fps = clip.fps;
    const std::size_t frame_size = static_cast<std::size_t>(clip.height) * clip.width * 3;
    for (int t = 0; t < ft; ++t)
        std::copy_n(clip.pixels.begin() + frame * frame_size, frame_size, still.pixels.begin() + t * frame_size);
    return video_encode(tok, still);
}

std::int64_t finalize_codebook(VideoTokenizer& tok) {
    tok->snap();
    return tok->active_codes();
}

double pixel_l1(const VideoClip& a, const VideoClip& b) {
    if (a.pixels.size() != b.pixels.size() || a.pixels.empty()) throw std::invalid_argument("pixel_l1: clip shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) s += std::abs(a.pixels[i] - b.pixels[i]);
    return s / static_cast<double>(a.pixels.size());
}

VideoTokenizerTrainResult train_video_tokenizer(const std::vector<VideoClip>& clips, const VideoTokenizerConfig& cfg,
                                                const VideoTokenizerTrainConfig& train, std::uint64_t seed,
                                                const TrainLogger& logger) {
    cfg.validate();
    train.validate();
    if (clips.empty()) throw std::invalid_argument("train_video_tokenizer: empty dataset");
    for (const auto& c : clips) check_clip_dims(cfg, c.frames, c.height, c.width);

    torch::manual_seed(seed);
    std::mt19937_64 rng(seed);
    VideoTokenizerTrainResult result;
    result.model = VideoTokenizer(cfg);
    auto& model = result.model;
    model->train();
    torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(train.learning_rate));

    const int ft = cfg.temporal_factor, fs = cfg.spatial_factor;
    // Patch origins; those touching the figure are drawn with probability kFigureShare.
    struct Origin {
        std::size_t clip;
        int t0, y0, x0;
    };
    std::vector<Origin> all, figure;
    for (std::size_t i = 0; i < clips.size(); ++i) {
        const auto& c = clips[i];
        for (int t0 = 0; t0 < c.frames; t0 += ft)
            for (int y0 = 0; y0 < cfg.height; y0 += fs)
                for (int x0 = 0; x0 < cfg.width; x0 += fs) {
                    const Origin o{i, t0, y0, x0};
                    all.push_back(o);
                    bool touched = false;
                    for (int dt = 0; dt < ft && !touched; ++dt)
                        for (int dy = 0; dy < fs && !touched; ++dy)
                            for (int dx = 0; dx < fs && !touched; ++dx)
                                touched = c.at(t0 + dt, y0 + dy, x0 + dx, 0) != c.at(0, 0, 0, 0);
                    if (touched) figure.push_back(o);
                }
    }
    auto sample_batch = [&]() {
        auto out = torch::empty({train.batch, cfg.patch_size()});
        auto acc = out.accessor<float, 2>();
        std::bernoulli_distribution take_figure(figure.empty() ? 0.0 : kFigureShare);
        for (int b = 0; b < train.batch; ++b) {
            const auto& pool = take_figure(rng) ? figure : all;
            const auto& o = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
            const auto& c = clips[o.clip];
            int k = 0;
            for (int dt = 0; dt < ft; ++dt)
                for (int dy = 0; dy < fs; ++dy)
                    for (int dx = 0; dx < fs; ++dx)
                        for (int ch = 0; ch < 3; ++ch) acc[b][k++] = c.at(o.t0 + dt, o.y0 + dy, o.x0 + dx, ch);
        }
        return out;
    };

    auto reseed = [&](const torch::Tensor& dead, const torch::Tensor& z) {
        const auto dead_idx = dead.nonzero().flatten();
        if (dead_idx.numel() == 0) return;
        const auto pick = torch::randint(z.size(0), {dead_idx.numel()}, torch::kInt64);
        torch::NoGradGuard guard;
        model->codebook.index_copy_(0, dead_idx,
                                    z.detach().index_select(0, pick) + 1e-3 * torch::randn({dead_idx.numel(), cfg.code_dim}));
    };

    {
        torch::NoGradGuard guard;
        torch::Tensor sum = torch::zeros({cfg.patch_size()}, torch::kFloat64);
        for (const auto& c : clips) sum += patchify(c, ft, fs).to(torch::kFloat64).sum(0);
        model->pixel_mean.copy_(sum / static_cast<double>(all.size()));
    }

    torch::Tensor usage = torch::zeros({cfg.codebook_size}, torch::kInt64);
    double sum_loss = 0.0, sum_rec = 0.0;
    int window = 0;
    for (int step = 0; step < train.steps; ++step) {
        const auto x = sample_batch();
        const auto z = model->embed(x);
        if (step == 0) reseed(torch::ones({cfg.codebook_size}, torch::kBool), z);
        const auto ids = model->nearest(z);
        const auto zq = model->codebook.index_select(0, ids);
        const auto rec = (model->reconstruct_patches(straight_through(z, zq)) - x).abs().mean();
        const auto commit = (z - zq.detach()).pow(2).sum(1).mean();
        const auto book_term = (z.detach() - zq).pow(2).sum(1).mean();
        const auto loss = rec + cfg.commitment * commit + book_term;

        const double value = loss.item<double>();
        if (!std::isfinite(value))
            throw std::runtime_error("train_video_tokenizer: loss became non-finite at step " + std::to_string(step));
        opt.zero_grad();
        loss.backward();
        torch::nn::utils::clip_grad_norm_(model->parameters(), 1.0);
        const double progress = static_cast<double>(step) / std::max(1, train.steps);
        for (auto& group : opt.param_groups())
            static_cast<torch::optim::AdamOptions&>(group.options()).lr(train.learning_rate * (1.0 - 0.9 * progress));
        opt.step();

        usage.index_add_(0, ids, torch::ones({ids.numel()}, torch::kInt64));
        result.loss_curve.push_back(static_cast<float>(value));
        sum_loss += value;
        sum_rec += rec.item<double>();
        ++window;
        if ((step + 1) % train.log_every == 0 || step + 1 == train.steps) {
            nlohmann::json entry = {{"step", step + 1},
                                    {"loss", sum_loss / window},
                                    {"reconstruction", sum_rec / window},
                                    {"window_utilization", usage.gt(0).sum().item<double>() / cfg.codebook_size}};
            result.log.push_back(entry);
            if (logger) logger(entry);
            sum_loss = sum_rec = 0.0;
            window = 0;
        }
        if ((step + 1) % train.reinit_every == 0 && step + 1 < train.steps) {
            reseed(usage.eq(0), z);
            usage.zero_();
        }
    }
    model->eval();
    finalize_codebook(model);
    return result;
}

void save_video_tokenizer(VideoTokenizer& tok, const std::filesystem::path& path, const nlohmann::json& meta) {
    Archive a;
    a.meta = meta.is_object() ? meta : nlohmann::json::object();
    a.meta["kind"] = "video_tokenizer";
    a.meta["config"] = tok->config().to_json();
    store_module(a, *tok);
    a.save(path);
}

VideoTokenizer load_video_tokenizer(const std::filesystem::path& path, nlohmann::json* meta) {
    const Archive a = Archive::load(path);
    if (a.meta.value("kind", "") != "video_tokenizer") throw FormatError("load_video_tokenizer: not a video tokenizer checkpoint");
    VideoTokenizer tok(VideoTokenizerConfig::from_json(a.meta.at("config")));
    restore_module(a, *tok);
    tok->eval();
    tok->snap();
    if (meta) *meta = a.meta;
    return tok;
}

}  // namespace hvm

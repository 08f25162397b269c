#include "hvm/motion_tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <stdexcept>

#include "hvm/archive.hpp"
#include "hvm/json_fields.hpp"
#include "hvm/torch_io.hpp"

namespace hvm {

namespace {

constexpr const char* kExpertNames[4] = {"theta", "beta", "phi", "tau"};
constexpr double kStdFloor = 1e-2;


void require_unit_aligned(std::int64_t frames, const char* where) {
    if (frames <= 0 || frames % kUnitFrames != 0)
        throw std::invalid_argument(std::string(where) + ": frame count must be a positive multiple of 16");
}

}  // namespace

void TokenizerConfig::validate() const {
    if (expansion < 1) throw std::invalid_argument("tokenizer: expansion (1/s) must be a positive integer");
    if (codebook_size < 2) throw std::invalid_argument("tokenizer: codebook_size must be >= 2");
    if (code_dim < 2) throw std::invalid_argument("tokenizer: code_dim must be >= 2");
    if (hidden < 1 || blocks < 0 || kernel < 1 || kernel % 2 == 0)
        throw std::invalid_argument("tokenizer: hidden/blocks/kernel out of range (kernel must be odd)");
    if (commitment < 0.0) throw std::invalid_argument("tokenizer: commitment must be >= 0");
    expansion_stages();
}

std::vector<int> TokenizerConfig::expansion_stages() const {
    std::vector<int> stages;
    int rest = expansion;
    while (rest > 1) {
        int f = 6;
        while (f > 1 && rest % f != 0) --f;
        if (f == 1) throw std::invalid_argument("tokenizer: expansion has a prime factor above 6");
        stages.push_back(f);
        rest /= f;
    }
    return stages;
}

nlohmann::json TokenizerConfig::to_json() const {
    return {{"expansion", expansion}, {"codebook_size", codebook_size}, {"code_dim", code_dim},
            {"commitment", commitment}, {"hidden", hidden},     {"kernel", kernel},
            {"blocks", blocks},         {"w_pos", w_pos},       {"w_vel", w_vel},
            {"w_acc", w_acc}};
}

TokenizerConfig TokenizerConfig::from_json(const nlohmann::json& j) {
    constexpr const char* where = "motion_tokenizer";
    reject_unknown_keys(j, {"expansion", "codebook_size", "code_dim", "commitment", "hidden", "kernel", "blocks",
                            "w_pos", "w_vel", "w_acc"},
                        where);
    TokenizerConfig c;
    read_field(j, "expansion", c.expansion, where);
    read_field(j, "codebook_size", c.codebook_size, where);
    read_field(j, "code_dim", c.code_dim, where);
    read_field(j, "commitment", c.commitment, where);
    read_field(j, "hidden", c.hidden, where);
    read_field(j, "kernel", c.kernel, where);
    read_field(j, "blocks", c.blocks, where);
    read_field(j, "w_pos", c.w_pos, where);
    read_field(j, "w_vel", c.w_vel, where);
    read_field(j, "w_acc", c.w_acc, where);
    c.validate();
    return c;
}

void TokenizerTrainConfig::validate() const {
    if (steps < 0 || batch < 1 || learning_rate <= 0.0 || reinit_every < 1 || log_every < 1)
        throw std::invalid_argument("tokenizer training: steps/batch/learning_rate/reinit_every/log_every out of range");
    require_unit_aligned(window, "tokenizer training window");
}

nlohmann::json TokenizerTrainConfig::to_json() const {
    return {{"steps", steps},
            {"batch", batch},
            {"window", window},
            {"learning_rate", learning_rate},
            {"reinit_every", reinit_every},
            {"log_every", log_every}};
}

TokenizerTrainConfig TokenizerTrainConfig::from_json(const nlohmann::json& j) {
    constexpr const char* where = "motion_tokenizer.train";
    reject_unknown_keys(j, {"steps", "batch", "window", "learning_rate", "reinit_every", "log_every"}, where);
    TokenizerTrainConfig c;
    read_field(j, "steps", c.steps, where);
    read_field(j, "batch", c.batch, where);
    read_field(j, "window", c.window, where);
    read_field(j, "learning_rate", c.learning_rate, where);
    read_field(j, "reinit_every", c.reinit_every, where);
    read_field(j, "log_every", c.log_every, where);
    c.validate();
    return c;
}

Quantized nearest_codes(const torch::Tensor& f, const torch::Tensor& codebook) {
    if (codebook.dim() != 2 || codebook.size(0) == 0) throw std::invalid_argument("quantize: empty codebook");
    if (f.dim() != 3 || f.size(1) != codebook.size(1)) throw std::invalid_argument("quantize: code dimension mismatch");
    torch::NoGradGuard guard;
    const auto n = f.size(0), d = f.size(1), steps = f.size(2);
    const torch::Tensor flat = f.detach().permute({0, 2, 1}).reshape({-1, d}).contiguous();
    const torch::Tensor book = codebook.detach().to(flat.dtype()).contiguous();
    const torch::Tensor fs = flat.pow(2).sum(1, true);
    const torch::Tensor bs = book.pow(2).sum(1);
    const torch::Tensor dist = fs - 2.0 * flat.matmul(book.t()) + bs.unsqueeze(0);
    auto [min_dist, arg] = dist.min(1);
    torch::Tensor ids = arg.to(torch::kInt64).contiguous();

    // The expanded form can reorder near-equal distances; rescan those rows exactly.
    const torch::Tensor tol = 1e-5 * (fs.squeeze(1) + bs.max()) + 1e-12;
    const torch::Tensor near = dist.le((min_dist + tol).unsqueeze(1));
    const torch::Tensor ambiguous = near.sum(1).gt(1).nonzero().flatten();
    if (ambiguous.numel() > 0) {
        const torch::Tensor fd = flat.to(torch::kFloat64).contiguous();
        const torch::Tensor bd = book.to(torch::kFloat64).contiguous();
        const auto fa = fd.accessor<double, 2>();
        const auto ba = bd.accessor<double, 2>();
        const auto na = near.accessor<bool, 2>();
        auto ia = ids.accessor<std::int64_t, 1>();
        const auto amb = ambiguous.accessor<std::int64_t, 1>();
        for (std::int64_t a = 0; a < ambiguous.size(0); ++a) {
            const std::int64_t r = amb[a];
            double best = std::numeric_limits<double>::infinity();
            std::int64_t best_j = ia[r];
            for (std::int64_t j = 0; j < book.size(0); ++j) {
                if (!na[r][j]) continue;
                double s = 0.0;
                for (std::int64_t k = 0; k < d; ++k) {
                    const double e = fa[r][k] - ba[j][k];
                    s += e * e;
                }
                if (s < best) {
                    best = s;
                    best_j = j;
                }
            }
            ia[r] = best_j;
        }
    }
    Quantized q;
    q.fq = book.index_select(0, ids).reshape({n, steps, d}).permute({0, 2, 1}).contiguous();
    q.ids = ids.reshape({n, steps});
    return q;
}

ResidualConvImpl::ResidualConvImpl(int channels, int kernel) {
    wide = register_module("wide", torch::nn::Conv1d(torch::nn::Conv1dOptions(channels, channels, kernel).padding(kernel / 2)));
    mix = register_module("mix", torch::nn::Conv1d(torch::nn::Conv1dOptions(channels, channels, 1)));
}

torch::Tensor ResidualConvImpl::forward(const torch::Tensor& x) {
    return x + mix(torch::relu(wide(torch::relu(x))));
}

ExpertDecoderImpl::ExpertDecoderImpl(const TokenizerConfig& cfg, int out_channels) {
    torch::nn::Sequential seq;
    auto stages = cfg.expansion_stages();
    std::reverse(stages.begin(), stages.end());
    if (stages.empty()) {
        seq->push_back(torch::nn::Conv1d(torch::nn::Conv1dOptions(cfg.code_dim, cfg.hidden, cfg.kernel).padding(cfg.kernel / 2)));
    } else {
        int in = cfg.code_dim;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            seq->push_back(torch::nn::Conv1d(torch::nn::Conv1dOptions(in, cfg.hidden, stages[i]).stride(stages[i])));
            in = cfg.hidden;
        }
    }
    for (int b = 0; b < cfg.blocks; ++b) seq->push_back(ResidualConv(cfg.hidden, cfg.kernel));
    body = register_module("body", seq);
    out = register_module("out", torch::nn::Conv1d(torch::nn::Conv1dOptions(cfg.hidden, out_channels, cfg.kernel).padding(cfg.kernel / 2)));
}

torch::Tensor ExpertDecoderImpl::forward(const torch::Tensor& fq) { return out(body->forward(fq)); }

MotionTokenizerImpl::MotionTokenizerImpl(const TokenizerConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    torch::nn::Sequential enc;
    enc->push_back(torch::nn::Conv1d(torch::nn::Conv1dOptions(kMotionChannels, cfg.hidden, cfg.kernel).padding(cfg.kernel / 2)));
    for (int b = 0; b < cfg.blocks; ++b) enc->push_back(ResidualConv(cfg.hidden, cfg.kernel));
    for (int f : cfg_.expansion_stages()) {
        enc->push_back(torch::nn::ConvTranspose1d(torch::nn::ConvTranspose1dOptions(cfg.hidden, cfg.hidden, f).stride(f)));
    }
    encoder = register_module("encoder", enc);
    encoder_out = register_module("encoder_out", torch::nn::Conv1d(torch::nn::Conv1dOptions(cfg.hidden, cfg.code_dim, 1)));
    codebook = register_parameter("codebook", torch::randn({cfg.codebook_size, cfg.code_dim}) * 0.1);
    for (int e = 0; e < 4; ++e)
        experts.push_back(register_module(std::string("expert_") + kExpertNames[e], ExpertDecoder(cfg_, kExpertChannels[e])));
    abs_mean = register_buffer("abs_mean", torch::zeros({kMotionChannels}));
    abs_std = register_buffer("abs_std", torch::ones({kMotionChannels}));
    vel_mean = register_buffer("vel_mean", torch::zeros({kMotionChannels}));
    vel_std = register_buffer("vel_std", torch::ones({kMotionChannels}));
}

torch::Tensor MotionTokenizerImpl::encode(const torch::Tensor& x) {
    if (x.dim() != 3 || x.size(1) != kMotionChannels) throw std::invalid_argument("encode: expected N x 79 x T input");
    require_unit_aligned(x.size(2), "encode");
    return encoder_out(encoder->forward(x));
}

torch::Tensor MotionTokenizerImpl::decode(const torch::Tensor& fq) {
    if (fq.dim() != 3 || fq.size(1) != cfg_.code_dim || fq.size(2) % cfg_.expansion != 0)
        throw std::invalid_argument("decode: expected N x D x T' with T' a multiple of the expansion");
    std::vector<torch::Tensor> parts;
    for (auto& e : experts) parts.push_back(e->forward(fq));
    return torch::cat(parts, 1);
}

torch::Tensor MotionTokenizerImpl::decode_absolute(const torch::Tensor& fq) { return prefix_sum(denormalize(decode(fq))); }

torch::Tensor MotionTokenizerImpl::normalize(const torch::Tensor& velocity) const {
    using torch::indexing::Slice;
    const auto first = (velocity.index({Slice(), Slice(), Slice(0, 1)}) - abs_mean.view({1, -1, 1})) / abs_std.view({1, -1, 1});
    const auto rest = (velocity.index({Slice(), Slice(), Slice(1, torch::indexing::None)}) - vel_mean.view({1, -1, 1})) /
                      vel_std.view({1, -1, 1});
    return torch::cat({first, rest}, 2);
}

torch::Tensor MotionTokenizerImpl::denormalize(const torch::Tensor& x) const {
    using torch::indexing::Slice;
    const auto first = x.index({Slice(), Slice(), Slice(0, 1)}) * abs_std.view({1, -1, 1}) + abs_mean.view({1, -1, 1});
    const auto rest =
        x.index({Slice(), Slice(), Slice(1, torch::indexing::None)}) * vel_std.view({1, -1, 1}) + vel_mean.view({1, -1, 1});
    return torch::cat({first, rest}, 2);
}

void MotionTokenizerImpl::fit_statistics(const std::vector<torch::Tensor>& absolute) {
    if (absolute.empty()) throw std::invalid_argument("fit_statistics: no motions");
    std::vector<torch::Tensor> values, deltas;
    for (const auto& a : absolute) {
        values.push_back(a.to(torch::kFloat64));
        if (a.size(1) > 1) deltas.push_back(torch::diff(a.to(torch::kFloat64), 1, 1));
    }
    const auto v = torch::cat(values, 1);
    torch::NoGradGuard guard;
    abs_mean.copy_(v.mean(1));
    abs_std.copy_(v.std(1, /*unbiased=*/false).clamp_min(kStdFloor));
    if (!deltas.empty()) {
        const auto d = torch::cat(deltas, 1);
        vel_mean.copy_(d.mean(1));
        vel_std.copy_(d.std(1, false).clamp_min(kStdFloor));
    }
}

torch::Tensor absolute_channels(const MotionSequence& m) { return to_tensor(channel_concat(m)).t().contiguous(); }

torch::Tensor velocity_channels(const MotionSequence& m) { return to_velocity(absolute_channels(m)); }

torch::Tensor to_velocity(const torch::Tensor& absolute) {
    using torch::indexing::Slice;
    const auto first = absolute.index({"...", Slice(0, 1)});
    if (absolute.size(-1) == 1) return first.clone();
    return torch::cat({first, torch::diff(absolute, 1, -1)}, -1);
}

torch::Tensor prefix_sum(const torch::Tensor& velocity) { return velocity.cumsum(-1); }

VqLoss vqvae_loss(const torch::Tensor& pred_abs, const torch::Tensor& gt_abs, const torch::Tensor& f,
                  const torch::Tensor& fq, double lambda, const ReconstructionWeights& w) {
    if (!pred_abs.sizes().equals(gt_abs.sizes())) throw std::invalid_argument("vqvae_loss: reconstruction shape mismatch");
    if (!f.sizes().equals(fq.sizes()) || f.dim() != 3) throw std::invalid_argument("vqvae_loss: latent shape mismatch");
    VqLoss l;
    l.reconstruction = w.pos * (pred_abs - gt_abs).abs().mean();
    if (pred_abs.size(-1) >= 2) {
        l.reconstruction = l.reconstruction + w.vel * (torch::diff(pred_abs, 1, -1) - torch::diff(gt_abs, 1, -1)).abs().mean();
    }
    if (pred_abs.size(-1) >= 3) {
        l.reconstruction = l.reconstruction + w.acc * (torch::diff(pred_abs, 2, -1) - torch::diff(gt_abs, 2, -1)).abs().mean();
    }
    l.commitment = (f - fq.detach()).pow(2).sum(1).mean();
    l.codebook = (f.detach() - fq).pow(2).sum(1).mean();
    l.total = l.reconstruction + lambda * l.commitment + l.codebook;
    return l;
}

MotionLatent encode_motion(MotionTokenizer& tok, const MotionSequence& m) {
    require_unit_aligned(m.frames(), "encode_motion");
    torch::NoGradGuard guard;
    const auto x = tok->normalize(velocity_channels(m).unsqueeze(0));
    const auto f = tok->encode(x);
    const auto q = tok->quantize(f);
    MotionLatent out;
    out.f = f[0].t().contiguous();
    out.fq = q.fq[0].t().contiguous();
    const auto ids = q.ids[0];
    out.ids.assign(ids.data_ptr<std::int64_t>(), ids.data_ptr<std::int64_t>() + ids.numel());
    return out;
}

std::vector<int> tokenize(MotionTokenizer& tok, const MotionSequence& m) { return encode_motion(tok, m).ids; }

MotionSequence detokenize(MotionTokenizer& tok, std::span<const int> ids, float fps) {
    const int per_unit = tok->config().expansion * kUnitFrames;
    if (ids.empty() || static_cast<int>(ids.size()) % per_unit != 0)
        throw std::invalid_argument("detokenize: token count must be a positive multiple of " + std::to_string(per_unit));
    std::vector<std::int64_t> idx(ids.begin(), ids.end());
    for (auto i : idx)
        if (i < 0 || i >= tok->config().codebook_size) throw std::invalid_argument("detokenize: token id out of range");
    torch::NoGradGuard guard;
    const auto t = torch::tensor(idx, torch::kInt64);
    const auto fq = tok->codebook.index_select(0, t).t().unsqueeze(0);
    const auto abs = tok->decode_absolute(fq);
    return channel_split(to_matrix(abs[0].t()), fps);
}

MotionSequence reconstruct(MotionTokenizer& tok, const MotionSequence& m) {
    const auto ids = tokenize(tok, m);
    return detokenize(tok, ids, m.fps);
}

namespace {

// Runs `fn` on batches of equal-length motions (at most 32 per batch).
template <typename Fn>
void for_each_batch(const std::vector<MotionSequence>& motions, Fn fn) {
    std::map<int, std::vector<std::size_t>> by_length;
    for (std::size_t i = 0; i < motions.size(); ++i) by_length[motions[i].frames()].push_back(i);
    for (const auto& [frames, idx] : by_length) {
        require_unit_aligned(frames, "tokenizer batch");
        for (std::size_t s = 0; s < idx.size(); s += 32) {
            std::vector<std::size_t> chunk(idx.begin() + s, idx.begin() + std::min(idx.size(), s + 32));
            std::vector<torch::Tensor> xs;
            for (auto i : chunk) xs.push_back(velocity_channels(motions[i]));
            fn(chunk, torch::stack(xs));
        }
    }
}

}  // namespace

std::vector<std::vector<int>> tokenize_all(MotionTokenizer& tok, const std::vector<MotionSequence>& motions) {
    torch::NoGradGuard guard;
    std::vector<std::vector<int>> out(motions.size());
    for_each_batch(motions, [&](const std::vector<std::size_t>& chunk, const torch::Tensor& vel) {
        const auto ids = tok->quantize(tok->encode(tok->normalize(vel))).ids.contiguous();
        for (std::size_t k = 0; k < chunk.size(); ++k) {
            const auto row = ids[static_cast<std::int64_t>(k)];
            out[chunk[k]].assign(row.data_ptr<std::int64_t>(), row.data_ptr<std::int64_t>() + row.numel());
        }
    });
    return out;
}

std::vector<MotionSequence> reconstruct_all(MotionTokenizer& tok, const std::vector<MotionSequence>& motions) {
    torch::NoGradGuard guard;
    std::vector<MotionSequence> out(motions.size());
    for_each_batch(motions, [&](const std::vector<std::size_t>& chunk, const torch::Tensor& vel) {
        const auto q = tok->quantize(tok->encode(tok->normalize(vel)));
        const auto abs = tok->decode_absolute(q.fq);
        for (std::size_t k = 0; k < chunk.size(); ++k)
            out[chunk[k]] = channel_split(to_matrix(abs[static_cast<std::int64_t>(k)].t()), motions[chunk[k]].fps);
    });
    return out;
}

double codebook_utilization(std::span<const int> ids, int codebook_size) {
    if (codebook_size <= 0) throw std::invalid_argument("codebook_utilization: codebook_size must be positive");
    const std::set<int> distinct(ids.begin(), ids.end());
    return static_cast<double>(distinct.size()) / codebook_size;
}

TokenizerTrainResult train_tokenizer(const std::vector<MotionSequence>& motions, const TokenizerConfig& cfg,
                                     const TokenizerTrainConfig& train, std::uint64_t seed, const TrainLogger& logger) {
    using torch::indexing::Slice;
    cfg.validate();
    train.validate();
    if (motions.empty()) throw std::invalid_argument("train_tokenizer: empty dataset");
    std::vector<torch::Tensor> absolute;
    for (const auto& m : motions) {
        if (m.frames() < train.window) throw std::invalid_argument("train_tokenizer: motion shorter than the window");
        absolute.push_back(absolute_channels(m));
    }

    torch::manual_seed(seed);
    std::mt19937_64 rng(seed);
    TokenizerTrainResult result;
    result.model = MotionTokenizer(cfg);
    auto& model = result.model;
    model->fit_statistics(absolute);
    model->train();

    torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(train.learning_rate));
    const ReconstructionWeights weights{cfg.w_pos, cfg.w_vel, cfg.w_acc};
    torch::Tensor usage = torch::zeros({cfg.codebook_size}, torch::kInt64);
    double sum_loss = 0, sum_rec = 0, sum_commit = 0;
    int window_steps = 0;

    auto sample_batch = [&]() {
        std::vector<torch::Tensor> crops;
        std::uniform_int_distribution<std::size_t> pick(0, absolute.size() - 1);
        for (int b = 0; b < train.batch; ++b) {
            const auto& a = absolute[pick(rng)];
            std::uniform_int_distribution<std::int64_t> start(0, a.size(1) - train.window);
            const auto s = start(rng);
            crops.push_back(a.index({Slice(), Slice(s, s + train.window)}));
        }
        return torch::stack(crops);
    };

    auto reseed_codes = [&](const torch::Tensor& dead, const torch::Tensor& f) {
        const auto flat = f.detach().permute({0, 2, 1}).reshape({-1, cfg.code_dim});
        const auto dead_idx = dead.nonzero().flatten();
        if (dead_idx.numel() == 0) return;
        const auto pick = torch::randint(flat.size(0), {dead_idx.numel()}, torch::kInt64);
        const auto fresh = flat.index_select(0, pick) + 1e-3 * torch::randn({dead_idx.numel(), cfg.code_dim});
        torch::NoGradGuard guard;
        model->codebook.index_copy_(0, dead_idx, fresh);
    };

    for (int step = 0; step < train.steps; ++step) {
        const auto gt_abs = sample_batch();
        const auto x = model->normalize(to_velocity(gt_abs));
        const auto f = model->encode(x);
        if (step == 0) reseed_codes(torch::ones({cfg.codebook_size}, torch::kBool), f);
        const auto q = model->quantize(f);
        const auto fq = model->codebook.index_select(0, q.ids.flatten())
                            .reshape({f.size(0), f.size(2), cfg.code_dim})
                            .permute({0, 2, 1});
        const auto st = straight_through(f, fq);
        const auto pred_abs = model->decode_absolute(st);
        const auto loss = vqvae_loss(pred_abs, gt_abs, f, fq, cfg.commitment, weights);

        const double value = loss.total.item<double>();
        if (!std::isfinite(value))
            throw std::runtime_error("train_tokenizer: loss became non-finite at step " + std::to_string(step));
        opt.zero_grad();
        loss.total.backward();
        torch::nn::utils::clip_grad_norm_(model->parameters(), 1.0);
        const double progress = static_cast<double>(step) / std::max(1, train.steps);
        for (auto& group : opt.param_groups())
            static_cast<torch::optim::AdamOptions&>(group.options()).lr(train.learning_rate * (1.0 - 0.9 * progress));
        opt.step();

        usage.index_add_(0, q.ids.flatten(), torch::ones({q.ids.numel()}, torch::kInt64));
        result.loss_curve.push_back(static_cast<float>(value));
        sum_loss += value;
        sum_rec += loss.reconstruction.item<double>();
        sum_commit += loss.commitment.item<double>();
        ++window_steps;

        const bool log_now = (step + 1) % train.log_every == 0 || step + 1 == train.steps;
        if (log_now) {
            nlohmann::json entry = {{"step", step + 1},
                                    {"loss", sum_loss / window_steps},
                                    {"reconstruction", sum_rec / window_steps},
                                    {"commitment", sum_commit / window_steps},
                                    {"window_utilization", usage.gt(0).sum().item<double>() / cfg.codebook_size}};
            result.log.push_back(entry);
            if (logger) logger(entry);
            sum_loss = sum_rec = sum_commit = 0;
            window_steps = 0;
        }
        if ((step + 1) % train.reinit_every == 0) {
            reseed_codes(usage.eq(0), f);
            usage.zero_();
        }
    }
    model->eval();
    return result;
}

void save_tokenizer(MotionTokenizer& tok, const std::filesystem::path& path, const nlohmann::json& meta) {
    Archive a;
    a.meta = meta.is_object() ? meta : nlohmann::json::object();
    a.meta["kind"] = "motion_tokenizer";
    a.meta["config"] = tok->config().to_json();
    store_module(a, *tok);
    a.save(path);
}

MotionTokenizer load_tokenizer(const std::filesystem::path& path, nlohmann::json* meta) {
    const Archive a = Archive::load(path);
    if (a.meta.value("kind", "") != "motion_tokenizer") throw FormatError("load_tokenizer: not a motion tokenizer checkpoint");
    MotionTokenizer tok(TokenizerConfig::from_json(a.meta.at("config")));
    restore_module(a, *tok);
    tok->eval();
    if (meta) *meta = a.meta;
    return tok;
}

}  // namespace hvm

// Acceptance runner. Prints one PASS/FAIL line per criterion; the exit code is
// the number of failures. Select criteria with --only 1,2,5.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <torch/torch.h>

#include "hvm/metrics.hpp"
#include "hvm/motion.hpp"
#include "hvm/motion_tokenizer.hpp"
#include "hvm/pipeline.hpp"
#include "hvm/sequence_model.hpp"
#include "hvm/video_tokenizer.hpp"
#include "test_support.hpp"

using namespace hvm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Context {
    fs::path workdir;
    bool reuse = false;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::vector<int> random_ids(std::mt19937_64& rng, int count, int size) {
    std::uniform_int_distribution<int> d(0, size - 1);
    std::vector<int> v(count);
    for (auto& x : v) x = d(rng);
    return v;
}

PairTokens random_pair(std::mt19937_64& rng, int units, const VocabLayout& vocab, const TokenShapes& shapes) {
    PairTokens p;
    p.image = random_ids(rng, shapes.image_tokens(), vocab.visual);
    for (int k = 0; k < units; ++k) {
        p.video_units.push_back(random_ids(rng, shapes.visual_per_unit(), vocab.visual));
        p.motion_units.push_back(random_ids(rng, shapes.motion_per_unit(), vocab.motion));
    }
    return p;
}

UnifiedSequence condition_of(const UnifiedSequence& s) {
    UnifiedSequence c = s;
    c.ids.resize(s.target_start);
    c.modality.resize(s.target_start);
    c.coords.resize(s.target_start);
    c.blocks.resize(c.blocks.size() - s.target_schedule().size());
    return c;
}

double max_abs(const RowMatrixXf& a, const RowMatrixXf& b) {
    return static_cast<double>((a - b).cwiseAbs().maxCoeff());
}

// ---------------------------------------------------------------- 1

Outcome codec_exactness(const Context&) {
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<int> frames(1, 256);
    double worst_velocity = 0.0, worst_concat = 0.0, worst_tensor = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto m = testing::random_motion(rng, frames(rng), 1.0 + trial % 3);
        const auto back = velocity_decode(velocity_encode(m));
        worst_velocity = std::max({worst_velocity, max_abs(back.theta, m.theta), max_abs(back.beta, m.beta),
                                   max_abs(back.phi, m.phi), max_abs(back.tau, m.tau)});
        const auto split = channel_split(channel_concat(m), m.fps);
        worst_concat = std::max({worst_concat, max_abs(split.theta, m.theta), max_abs(split.beta, m.beta),
                                 max_abs(split.phi, m.phi), max_abs(split.tau, m.tau)});
        const auto abs = absolute_channels(m);
        worst_tensor = std::max(worst_tensor, (prefix_sum(to_velocity(abs)) - abs).abs().max().item<double>());
    }
    const double worst = std::max({worst_velocity, worst_concat, worst_tensor});
    return {worst < 1e-5, fmt("1000 motions, max abs err velocity %.2e concat %.2e tensor %.2e", worst_velocity,
                              worst_concat, worst_tensor)};
}

// ---------------------------------------------------------------- 2

Outcome token_counts(const Context&) {
    torch::manual_seed(102);
    TokenizerConfig tc;
    tc.expansion = 36;
    tc.hidden = 32;
    tc.blocks = 1;
    MotionTokenizer tok(tc);
    std::mt19937_64 rng(102);
    torch::NoGradGuard g;
    int checked = 0, bad = 0;
    // Every whole-unit length up to 256 frames; other lengths are padded to whole units first.
    for (int t = 16; t <= 256; t += 16) {
        const auto x = velocity_channels(testing::random_motion(rng, t)).unsqueeze(0);
        bad += tok->encode(x).size(2) != 36 * t;
        bad += static_cast<int>(tokenize(tok, testing::random_motion(rng, t)).size()) != 36 * t;
        ++checked;
    }
    for (int t = 1; t <= 64; ++t) {
        const auto padded = pad_to_unit(testing::random_motion(rng, t));
        bad += static_cast<int>(tokenize(tok, padded).size()) != 36 * padded.frames();
        ++checked;
    }
    ExperimentConfig cfg;
    const auto body = experiment_body(cfg);
    torch::manual_seed(103);
    VideoTokenizer vtok(cfg.video_tokenizer);
    finalize_codebook(vtok);
    int visual_bad = 0;
    for (int units = 1; units <= 3; ++units) {
        const auto m = generate_procedural_motion(103 + units, 16 * units, kAllFamilies[units % 4]);
        const auto tokens = video_encode(vtok, render_pair_clip(cfg, body, m));
        visual_bad += static_cast<int>(tokens.ids.size()) != 32 * units;
    }
    visual_bad += cfg.video_tokenizer.tokens_per_unit() != 32;
    visual_bad += cfg.token_shapes().visual_per_unit() != 32;
    return {bad == 0 && visual_bad == 0,
            fmt("motion 36*T on %d inputs (%d off), visual 32 per 64x64 unit (%d off)", checked, bad, visual_bad)};
}

// ---------------------------------------------------------------- 3

Outcome quantizer_oracle(const Context&) {
    std::mt19937_64 rng(104);
    std::uniform_int_distribution<int> small(1, 3), dim(1, 8), steps(1, 6), books(1, 32), grid(-2, 2);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    int mismatches = 0, tie_slots = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const int n = small(rng), d = dim(rng), t = steps(rng), b = books(rng);
        // Half the instances use small integers so exact ties are frequent and distances exact.
        const bool integer = trial % 2 == 0;
        auto draw = [&] { return integer ? static_cast<float>(grid(rng)) : normal(rng); };
        auto f = torch::empty({n, d, t});
        auto book = torch::empty({b, d});
        auto fa = f.accessor<float, 3>();
        auto ba = book.accessor<float, 2>();
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < d; ++c)
                for (int k = 0; k < t; ++k) fa[i][c][k] = draw();
        for (int j = 0; j < b; ++j)
            for (int c = 0; c < d; ++c) ba[j][c] = draw();
        if (trial % 5 == 1 && b > 1) book[b - 1] = book[0];  // duplicated row

        const auto q = nearest_codes(f, book);
        const auto ids = q.ids.accessor<std::int64_t, 2>();
        for (int i = 0; i < n; ++i) {
            for (int k = 0; k < t; ++k) {
                double best = std::numeric_limits<double>::infinity();
                int arg = -1, at_best = 0;
                for (int j = 0; j < b; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < d; ++c) {
                        const double e = static_cast<double>(fa[i][c][k]) - static_cast<double>(ba[j][c]);
                        s += e * e;
                    }
                    if (s < best) {
                        best = s;
                        arg = j;
                        at_best = 1;
                    } else if (s == best) {
                        ++at_best;
                    }
                }
                tie_slots += at_best > 1;
                mismatches += ids[i][k] != arg;
            }
        }
    }
    return {mismatches == 0 && tie_slots > 0,
            fmt("10000 instances, %d mismatches, %d tied slots resolved to the lowest index", mismatches, tie_slots)};
}

// ---------------------------------------------------------------- 4

// max |numeric - analytic| / max |analytic| over the probed entries.
double fd_relative_error(torch::Tensor param, const torch::Tensor& analytic, const std::vector<std::int64_t>& probes,
                         const std::function<double()>& objective, double h = 1e-6) {
    torch::NoGradGuard g;
    auto flat = param.view({-1});
    const auto a = analytic.reshape({-1});
    double err = 0.0, scale = 1e-12;
    for (const auto i : probes) {
        const double orig = flat[i].item<double>();
        flat[i] = orig + h;
        const double up = objective();
        flat[i] = orig - h;
        const double down = objective();
        flat[i] = orig;
        const double an = a[i].item<double>();
        err = std::max(err, std::abs((up - down) / (2 * h) - an));
        scale = std::max(scale, std::abs(an));
    }
    return err / scale;
}

std::vector<std::int64_t> probe_indices(const torch::Tensor& grad, int count, std::mt19937_64& rng) {
    const auto n = grad.numel();
    std::set<std::int64_t> s{grad.abs().flatten().argmax().item<std::int64_t>()};
    std::uniform_int_distribution<std::int64_t> d(0, n - 1);
    while (static_cast<int>(s.size()) < std::min<std::int64_t>(count, n)) s.insert(d(rng));
    return {s.begin(), s.end()};
}

Outcome gradient_check(const Context&) {
    std::mt19937_64 rng(105);
    torch::manual_seed(105);
    const double lambda = 0.25;

    // Quantization terms through a real nearest-code lookup.
    double worst_commit = 0.0, worst_book = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        auto f = torch::randn({2, 4, 6}, torch::kFloat64).requires_grad_(true);
        auto book = torch::randn({10, 4}, torch::kFloat64).requires_grad_(true);
        const auto ids = nearest_codes(f.detach(), book.detach()).ids;
        auto gather = [&](const torch::Tensor& b) {
            return b.index_select(0, ids.flatten()).view({2, 6, 4}).permute({0, 2, 1});
        };
        const auto pred = torch::zeros({1, 1, 2}, torch::kFloat64);
        const auto loss = vqvae_loss(pred, pred, f, gather(book), lambda);
        loss.total.backward();
        const auto gf = f.grad().clone();
        const auto gb = book.grad().clone();
        auto fd = f.detach().clone();
        auto bd = book.detach().clone();
        // Each term moves only its own side: lambda|F - sg(Fq)|^2 moves F, |sg(F) - Fq|^2 moves the codebook.
        worst_commit = std::max(worst_commit, fd_relative_error(fd, gf, probe_indices(gf, 48, rng), [&] {
            return lambda * (fd - gather(bd)).pow(2).sum(1).mean().item<double>();
        }));
        worst_book = std::max(worst_book, fd_relative_error(bd, gb, probe_indices(gb, 40, rng), [&] {
            return (fd - gather(bd)).pow(2).sum(1).mean().item<double>();
        }));
    }

    // Full AR loss on a toy model, both tasks in one batch.
    const VocabLayout vocab{16, 12};
    const TokenShapes shapes{2, 2, 2, 8, 1};
    ARConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.width = 16;
    cfg.rope_split = {4, 2, 2};
    cfg.max_length = 64;
    ARTransformer model(cfg, vocab);
    model->to(torch::kFloat64);
    const auto p = random_pair(rng, 1, vocab, shapes);
    const auto batch =
        collate({v2m_sequence(p, vocab, shapes), i2vm_sequence(p, vocab, shapes)}, vocab, torch::kFloat64);
    auto loss = [&] { return ar_loss(model->forward(batch), batch); };
    model->zero_grad();
    loss().backward();
    double worst_ar = 0.0;
    int tensors = 0;
    for (auto& item : model->named_parameters()) {
        const auto grad = item.value().grad().clone();
        if (grad.abs().max().item<double>() == 0.0) continue;  // unused table rows only
        worst_ar = std::max(worst_ar, fd_relative_error(item.value(), grad, probe_indices(grad, 6, rng),
                                                        [&] { return loss().item<double>(); }));
        ++tensors;
    }
    const double worst = std::max({worst_commit, worst_book, worst_ar});
    return {worst < 1e-3, fmt("rel err commitment %.1e codebook %.1e AR loss %.1e (%d parameter tensors)",
                              worst_commit, worst_book, worst_ar, tensors)};
}

// ---------------------------------------------------------------- 5

Outcome mask_probe(const Context&) {
    const VocabLayout vocab{24, 16};
    const double tol = 1e-6;
    std::mt19937_64 rng(106);
    int failures = 0;
    double leak = 0.0, weakest = std::numeric_limits<double>::infinity();
    torch::NoGradGuard g;
    for (int trial = 0; trial < 100; ++trial) {
        const TokenShapes shapes{2, 2, 1 + trial % 2, trial % 2 ? 8 : 16, 1 + trial % 3};
        ARConfig cfg;
        cfg.layers = 2;
        cfg.heads = 2;
        cfg.width = 32;
        cfg.rope_split = {8, 4, 4};
        cfg.max_length = 256;
        torch::manual_seed(1000 + trial);
        ARTransformer model(cfg, vocab);
        model->to(torch::kFloat64);
        model->eval();
        const auto p = random_pair(rng, 1 + trial % 3, vocab, shapes);
        const auto seq = trial % 2 ? i2vm_sequence(p, vocab, shapes) : v2m_sequence(p, vocab, shapes);
        auto logits = [&](const UnifiedSequence& s) { return model->forward(collate({s}, vocab, torch::kFloat64))[0]; };
        const auto base = logits(seq);
        const int len = seq.length();

        // Target token j: logits up to j are untouched, logits at j + 1 move.
        const int j = std::uniform_int_distribution<int>(seq.target_start, len - 2)(rng);
        auto t = seq;
        const auto [first, last] = vocab.range(seq.modality[j] == Modality::visual ? BlockKind::video : BlockKind::motion);
        t.ids[j] = first + (t.ids[j] - first + 1) % (last - first);
        const auto after = logits(t);
        const double before_j = (after.narrow(0, 0, j + 1) - base.narrow(0, 0, j + 1)).abs().max().item<double>();
        const double next = (after[j + 1] - base[j + 1]).abs().max().item<double>();
        leak = std::max(leak, before_j);
        weakest = std::min(weakest, next);
        failures += before_j > tol || next <= tol;

        // Condition token c: every position sees it, including earlier condition rows.
        const int c = std::uniform_int_distribution<int>(1, seq.target_start - 2)(rng);
        auto cc = seq;
        cc.ids[c] = (cc.ids[c] + 1) % vocab.visual;
        const auto moved = (logits(cc) - base).abs().amax(1);
        const double least = moved.narrow(0, 1, len - 1).min().item<double>();
        weakest = std::min(weakest, least);
        failures += least <= tol;
    }
    return {failures == 0, fmt("100 trials, %d violations; max leak before a target %.1e, weakest response %.1e",
                               failures, leak, weakest)};
}

// ---------------------------------------------------------------- 6

Outcome rope_identity(const Context&) {
    const ARConfig cfg;
    const int dh = cfg.head_dim();
    torch::manual_seed(107);
    const auto q = torch::randn({dh}, torch::kFloat64);
    const auto k = torch::randn({dh}, torch::kFloat64);
    auto rotate_all = [&](const torch::Tensor& x, const torch::Tensor& coords) {
        return apply_rope(x.expand({coords.size(0), dh}).contiguous(), coords, cfg.rope_split, cfg.rope_base);
    };
    // Coordinates first..first+count-1 along one axis, scaled (motion tokens sit at frame / f_t).
    auto axis_coords = [](int axis, double step, int first, int count) {
        auto c = torch::zeros({count, 3}, torch::kFloat64);
        for (int m = 0; m < count; ++m) c[m][axis] = (first + m) * step;
        return c;
    };
    auto worst_on = [&](int axis, double step) {
        const auto rq = rotate_all(q, axis_coords(axis, step, 0, 32));
        const auto rk = rotate_all(k, axis_coords(axis, step, 0, 32));
        const auto gram = rq.matmul(rk.t());                                        // <R(m) q, R(n) k>
        const auto rel = rotate_all(q, axis_coords(axis, step, -31, 63)).matmul(k);  // <R(m - n) q, k>
        double worst = 0.0;
        auto ga = gram.accessor<double, 2>();
        auto ra = rel.accessor<double, 1>();
        for (int m = 0; m < 32; ++m)
            for (int n = 0; n < 32; ++n) worst = std::max(worst, std::abs(ga[m][n] - ra[m - n + 31]));
        return worst;
    };
    const double t_axis = worst_on(0, 1.0), h_axis = worst_on(1, 1.0), w_axis = worst_on(2, 1.0);
    const TokenShapes shapes;
    const double motion = worst_on(0, 1.0 / shapes.temporal_factor);
    // The 1D branch only rotates the temporal slice.
    const auto rq = rotate_all(q, axis_coords(0, 1.0 / shapes.temporal_factor, 0, 32));
    const int dt = cfg.rope_split[0];
    const bool spatial_fixed = torch::equal(rq.narrow(1, dt, dh - dt), q.narrow(0, dt, dh - dt).expand({32, dh - dt}));
    const double worst = std::max({t_axis, h_axis, w_axis, motion});
    return {worst < 1e-6 && spatial_fixed,
            fmt("32x32 grid: t %.1e h %.1e w %.1e, 1D motion branch %.1e, h/w slices fixed %s", t_axis, h_axis,
                w_axis, motion, spatial_fixed ? "yes" : "no")};
}

// ---------------------------------------------------------------- 7

Outcome grammar_closure(const Context& ctx) {
    const VocabLayout vocab{64, 32};
    const TokenShapes shapes{2, 2, 2, 8, 2};
    const fs::path dir = ctx.workdir / "grammar";
    fs::create_directories(dir);
    std::mt19937_64 rng(108);
    int sampled = 0, parse_failures = 0, corrupted = 0, accepted_corruptions = 0;
    const std::array<DecodeConfig, 3> modes = {DecodeConfig{}, DecodeConfig{DecodeConfig::Mode::sample, 1.0, 0},
                                               DecodeConfig{DecodeConfig::Mode::sample, 0.7, 5}};
    for (int ckpt = 0; ckpt < 10; ++ckpt) {
        ARConfig cfg;
        cfg.layers = 1 + ckpt % 2;
        cfg.heads = 2;
        cfg.width = 32;
        cfg.rope_split = {8, 4, 4};
        cfg.max_length = 256;
        torch::manual_seed(2000 + ckpt);
        ARTransformer fresh(cfg, vocab);
        // Scaled-up head so sampling is far from uniform.
        {
            torch::NoGradGuard g;
            fresh->head->weight.mul_(1.0 + ckpt);
        }
        const auto path = dir / ("random_" + std::to_string(ckpt) + ".hvm");
        save_ar(fresh, shapes, path);
        auto model = load_ar(path);
        model->eval();
        for (int s = 0; s < 100; ++s) {
            const int units = 1 + s % 3;
            const auto p = random_pair(rng, units, vocab, shapes);
            const bool v2m = s % 2 == 0;
            const auto full = v2m ? v2m_sequence(p, vocab, shapes) : i2vm_sequence(p, vocab, shapes);
            const auto gen = sample(model, condition_of(full), units, shapes, modes[s % 3], rng);
            ++sampled;
            const auto r = parse_sequence(gen.ids, vocab, shapes);
            parse_failures += !r.ok || r.task != full.task || static_cast<int>(r.motion_units.size()) != units;

            // One corruption per sample, plus dropping the last token.
            auto ids = gen.ids;
            const int c = std::uniform_int_distribution<int>(0, gen.length() - 1)(rng);
            const Modality original = gen.modality[c];
            int replacement;
            do {
                replacement = std::uniform_int_distribution<int>(-1, vocab.size())(rng);
            } while (replacement == ids[c] ||
                     (replacement >= 0 && replacement < vocab.size() && replacement != vocab.pad() &&
                      vocab.classify(replacement) == original));
            ids[c] = replacement;
            accepted_corruptions += parse_sequence(ids, vocab, shapes).ok;
            auto cut = gen.ids;
            cut.pop_back();
            accepted_corruptions += parse_sequence(cut, vocab, shapes).ok;
            corrupted += 2;
        }
    }
    return {parse_failures == 0 && accepted_corruptions == 0,
            fmt("%d samples from 10 random checkpoints, %d failed to parse; %d/%d corruptions accepted", sampled,
                parse_failures, accepted_corruptions, corrupted)};
}

// ---------------------------------------------------------------- 8

Outcome ablation_trend(const Context& ctx) {
    ExperimentConfig cfg;
    cfg.output_dir = (ctx.workdir / "ablation").string();
    cfg.sweep.codebooks = {512};
    cfg.sweep.expansions = {1, 4, 36};
    cfg.sweep.seeds = 3;
    cfg.validate();
    if (!ctx.reuse || !fs::exists(RunPaths(cfg).train_motions())) cmd_gen_data(cfg);
    const auto cells = run_sweep(cfg, nullptr, [](const nlohmann::json& j) {
        std::cout << "  sweep " << j.dump() << std::endl;
    });
    std::ostringstream d;
    bool decreasing = true;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        d << fmt("s=1/%d mpjpe %.2f util %.3f; ", cells[i].expansion, cells[i].mpjpe, cells[i].utilization);
        if (i > 0) decreasing = decreasing && cells[i].mpjpe < cells[i - 1].mpjpe;
    }
    const bool util = cells.back().utilization > cells.front().utilization;
    d << "B=512, 3-seed medians, " << cfg.sweep.train.steps << " steps each";
    return {cells.size() == 3 && decreasing && util, d.str()};
}

// ---------------------------------------------------------------- 9

Outcome ar_overfit(const Context&) {
    const ExperimentConfig defaults;
    const auto vocab = defaults.vocab();
    const auto shapes = defaults.token_shapes();
    std::mt19937_64 rng(109);
    std::vector<PairTokens> pairs;
    for (int k = 0; k < 8; ++k) pairs.push_back(random_pair(rng, 1, vocab, shapes));
    ARTrainConfig train;
    train.steps = 500;
    train.batch = 8;
    train.learning_rate = 2e-3;
    train.warmup = 50;
    train.log_every = 50;
    auto fit = train_ar(pairs, defaults.ar, vocab, shapes, train, 109, [](const nlohmann::json& j) {
        std::cout << "  train " << j.dump() << std::endl;
    });
    auto model = fit.model;
    model->eval();
    std::vector<UnifiedSequence> seqs;
    for (const auto& p : pairs) {
        seqs.push_back(v2m_sequence(p, vocab, shapes));
        seqs.push_back(i2vm_sequence(p, vocab, shapes));
    }
    double loss;
    {
        torch::NoGradGuard g;
        const auto batch = collate(seqs, vocab);
        loss = ar_loss(model->forward(batch), batch).item<double>();
    }
    int reproduced = 0;
    std::mt19937_64 r(0);
    for (const auto& s : seqs) {
        const auto gen = sample(model, condition_of(s), 1, shapes, DecodeConfig{}, r);
        reproduced += gen.ids == s.ids;
    }
    return {loss < 0.01 && reproduced == 16,
            fmt("%d steps, final target cross-entropy %.5f, greedy reproduces %d/16 streams (8 V2M, 8 I2VM)",
                train.steps, loss, reproduced)};
}

// ---------------------------------------------------------------- 10, 11

// Runs the full pipeline once at the default experiment config; later calls reuse the reports.
nlohmann::json e2e_reports(const Context& ctx) {
    static nlohmann::json cached;
    if (!cached.is_null()) return cached;
    ExperimentConfig cfg;
    cfg.output_dir = (ctx.workdir / "e2e").string();
    cfg.validate();
    const RunPaths paths(cfg);
    // Once a stage reruns, every later stage reruns too.
    bool reuse = ctx.reuse;
    auto stage = [&](const std::string& name, auto&& fn) {
        const auto report = paths.report(name);
        if (reuse && fs::exists(report)) {
            std::ifstream in(report);
            const auto j = nlohmann::json::parse(in);
            if (j.value("config_hash", "") == cfg.hash()) return j;
        }
        reuse = false;
        const auto t0 = std::chrono::steady_clock::now();
        auto j = fn(cfg);
        std::cout << "  " << name << " done in "
                  << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s" << std::endl;
        return j;
    };
    stage("gen-data", cmd_gen_data);
    stage("train-motion-tokenizer", cmd_train_motion_tokenizer);
    stage("train-video-tokenizer", cmd_train_video_tokenizer);
    stage("train-ar", cmd_train_ar);
    cached = {{"v2m", stage("eval-v2m", cmd_eval_v2m)}, {"i2vm", stage("eval-i2vm", cmd_eval_i2vm)}};
    return cached;
}

Outcome e2e_v2m(const Context& ctx) {
    const auto r = e2e_reports(ctx)["v2m"];
    const double ratio = r["mpjpe_ratio_to_floor"].get<double>();
    return {ratio <= 2.0,
            fmt("held-out V2M MPJPE %.2f mm vs tokenizer floor %.2f mm: ratio %.3f (token accuracy %.3f)",
                r["v2m"]["mpjpe_mm"].get<double>(), r["tokenizer_floor"]["mpjpe_mm"].get<double>(), ratio,
                r["token_accuracy"].get<double>())};
}

Outcome e2e_i2vm(const Context& ctx) {
    const auto r = e2e_reports(ctx)["i2vm"];
    const double fid_gen = r["fid_generated"].get<double>(), fid_base = r["fid_permuted_baseline"].get<double>();
    const double ratio = r["div_ratio"].get<double>();
    return {fid_gen < fid_base && std::abs(ratio - 1.0) <= 0.5,
            fmt("FID generated %.3f vs permuted %.3f; DIV %.3f vs dataset %.3f (ratio %.3f)", fid_gen, fid_base,
                r["div_generated"].get<double>(), r["div_dataset"].get<double>(), ratio)};
}

// ---------------------------------------------------------------- 12

using metrics::JointSet;
using metrics::Points;

Points random_points(std::mt19937_64& rng, int rows, double scale) {
    std::normal_distribution<double> n(0.0, scale);
    Points p(rows, 3);
    for (int i = 0; i < rows; ++i)
        for (int c = 0; c < 3; ++c) p(i, c) = n(rng);
    return p;
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    return Eigen::Quaterniond(n(rng), n(rng), n(rng), n(rng)).normalized().toRotationMatrix();
}

// Similarity fit by the unit-quaternion method: the rotation is the top
// eigenvector of a 4x4 symmetric matrix built from the cross-covariance.
metrics::SimilarityTransform quaternion_fit(const Points& x, const Points& y) {
    const Eigen::RowVector3d mx = x.colwise().mean(), my = y.colwise().mean();
    Eigen::Matrix3d s = Eigen::Matrix3d::Zero();
    double xx = 0.0;
    for (int i = 0; i < x.rows(); ++i) {
        const Eigen::Vector3d a = (x.row(i) - mx).transpose(), b = (y.row(i) - my).transpose();
        s += a * b.transpose();
        xx += a.squaredNorm();
    }
    Eigen::Matrix4d n;
    n << s(0, 0) + s(1, 1) + s(2, 2), s(1, 2) - s(2, 1), s(2, 0) - s(0, 2), s(0, 1) - s(1, 0),
        s(1, 2) - s(2, 1), s(0, 0) - s(1, 1) - s(2, 2), s(0, 1) + s(1, 0), s(2, 0) + s(0, 2),
        s(2, 0) - s(0, 2), s(0, 1) + s(1, 0), -s(0, 0) + s(1, 1) - s(2, 2), s(1, 2) + s(2, 1),
        s(0, 1) - s(1, 0), s(2, 0) + s(0, 2), s(1, 2) + s(2, 1), -s(0, 0) - s(1, 1) + s(2, 2);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(n);
    const Eigen::Vector4d v = es.eigenvectors().col(3);
    metrics::SimilarityTransform out;
    out.rotation = Eigen::Quaterniond(v(0), v(1), v(2), v(3)).normalized().toRotationMatrix();
    double cross = 0.0;
    for (int i = 0; i < x.rows(); ++i)
        cross += (y.row(i) - my).dot((out.rotation * (x.row(i) - mx).transpose()).transpose());
    out.scale = cross / xx;
    out.translation = my.transpose() - out.scale * out.rotation * mx.transpose();
    return out;
}

double mean_norm_mm(const std::vector<Points>& a, const std::vector<Points>& b, bool root_align) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t t = 0; t < a.size(); ++t) {
        for (int j = 0; j < a[t].rows(); ++j) {
            double sq = 0.0;
            for (int c = 0; c < 3; ++c) {
                double d = a[t](j, c) - b[t](j, c);
                if (root_align) d -= a[t](0, c) - b[t](0, c);
                sq += d * d;
            }
            sum += std::sqrt(sq);
            ++n;
        }
    }
    return 1000.0 * sum / n;
}

double fid_oracle(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    auto moments = [](const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
        const auto n = x.rows(), d = x.cols();
        mu = Eigen::VectorXd::Zero(d);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index c = 0; c < d; ++c) mu(c) += x(i, c) / static_cast<double>(n);
        cov = Eigen::MatrixXd::Zero(d, d);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index p = 0; p < d; ++p)
                for (Eigen::Index q = 0; q < d; ++q)
                    cov(p, q) += (x(i, p) - mu(p)) * (x(i, q) - mu(q)) / static_cast<double>(n - 1);
    };
    Eigen::VectorXd ma, mb;
    Eigen::MatrixXd ca, cb;
    moments(a, ma, ca);
    moments(b, mb, cb);
    // tr sqrt(Ca Cb): the product has real non-negative eigenvalues.
    Eigen::EigenSolver<Eigen::MatrixXd> es(ca * cb, false);
    double tr_sqrt = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) tr_sqrt += std::sqrt(std::max(0.0, es.eigenvalues()(i).real()));
    return (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
}

Outcome metric_oracles(const Context&) {
    std::mt19937_64 rng(112);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int joints = body::kJointCount;

    int pa_violations = 0;
    double worst_mpjpe = 0.0, worst_pa = 0.0, worst_accel = 0.0, worst_pve = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        JointSet gt, pred;
        const int frames = 3 + trial % 4;
        const Eigen::Matrix3d r = random_rotation(rng);
        const Eigen::Vector3d shift = Eigen::Vector3d::Random();
        const double scale = 0.7 + 0.6 * unit(rng), sigma = 0.01 + 0.1 * unit(rng);
        for (int t = 0; t < frames; ++t) {
            gt.frames.push_back(random_points(rng, joints, 0.5));
            const Points moved = ((scale * (r * gt.frames.back().transpose())).colwise() + shift).transpose();
            pred.frames.push_back(moved + random_points(rng, joints, sigma));
        }
        const double m = metrics::mpjpe(pred, gt), pa = metrics::pa_mpjpe(pred, gt);
        pa_violations += pa > m;

        worst_mpjpe = std::max(worst_mpjpe, std::abs(m - mean_norm_mm(pred.frames, gt.frames, true)));
        std::vector<Points> aligned;
        for (int t = 0; t < frames; ++t) aligned.push_back(quaternion_fit(pred.frames[t], gt.frames[t]).apply(pred.frames[t]));
        worst_pa = std::max(worst_pa, std::abs(pa - mean_norm_mm(aligned, gt.frames, false)));

        double sum = 0.0;
        int n = 0;
        const double fps = gt.fps;
        for (int t = 1; t + 1 < frames; ++t) {
            for (int j = 0; j < joints; ++j) {
                double sq = 0.0;
                for (int c = 0; c < 3; ++c) {
                    const double ap = (pred.frames[t + 1](j, c) - 2 * pred.frames[t](j, c) + pred.frames[t - 1](j, c));
                    const double ag = (gt.frames[t + 1](j, c) - 2 * gt.frames[t](j, c) + gt.frames[t - 1](j, c));
                    sq += (ap - ag) * (ap - ag) * fps * fps * fps * fps;
                }
                sum += std::sqrt(sq);
                ++n;
            }
        }
        worst_accel = std::max(worst_accel, std::abs(metrics::accel_error(pred, gt) - sum / n) / (1.0 + sum / n));

        if (trial % 10 == 0) {
            metrics::MeshSequence mp, mg;
            for (int t = 0; t < frames; ++t) {
                mp.vertices.push_back(random_points(rng, 50, 0.3));
                mg.vertices.push_back(random_points(rng, 50, 0.3));
                mp.roots.push_back(Eigen::Vector3d::Random());
                mg.roots.push_back(Eigen::Vector3d::Random());
            }
            double vs = 0.0;
            for (int t = 0; t < frames; ++t)
                for (int v = 0; v < 50; ++v)
                    vs += ((mp.vertices[t].row(v) - mp.roots[t].transpose()) - (mg.vertices[t].row(v) - mg.roots[t].transpose())).norm();
            worst_pve = std::max(worst_pve, std::abs(metrics::pve(mp, mg) - 1000.0 * vs / (frames * 50)));
        }
    }

    // Constructed similarity transforms.
    double worst_r = 0.0, worst_s = 0.0, worst_t = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const Points x = random_points(rng, joints, 0.5);
        const Eigen::Matrix3d r = random_rotation(rng);
        const double s = 0.25 + 3.0 * unit(rng);
        const Eigen::Vector3d t = 2.0 * Eigen::Vector3d::Random();
        const Points y = ((s * (r * x.transpose())).colwise() + t).transpose();
        const auto fit = metrics::procrustes_align(x, y);
        worst_r = std::max(worst_r, (fit.rotation - r).cwiseAbs().maxCoeff());
        worst_s = std::max(worst_s, std::abs(fit.scale - s));
        worst_t = std::max(worst_t, (fit.translation - t).cwiseAbs().maxCoeff());
    }
    const double worst_procrustes = std::max({worst_r, worst_s, worst_t});

    // FID and diversity.
    double worst_self = 0.0, worst_fid = 0.0, worst_div = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 1 + trial % metrics::kFeatureDims;
        const Eigen::MatrixXd a = Eigen::MatrixXd::Random(64 + d, d);
        const Eigen::MatrixXd b = 0.5 * Eigen::MatrixXd::Random(80 + d, d).array() + 0.3;
        const Eigen::MatrixXd few = Eigen::MatrixXd::Random(std::max(2, d / 2), d);
        worst_self = std::max({worst_self, std::abs(metrics::fid(a, a)), std::abs(metrics::fid(few, few))});
        const double oracle = fid_oracle(a, b);
        worst_fid = std::max(worst_fid, std::abs(metrics::fid(a, b) - oracle) / (1.0 + oracle));
        double div = 0.0;
        int pairs = 0;
        for (Eigen::Index i = 0; i < a.rows(); ++i)
            for (Eigen::Index j = 0; j < i; ++j, ++pairs) {
                double sq = 0.0;
                for (Eigen::Index c = 0; c < d; ++c) sq += (a(i, c) - a(j, c)) * (a(i, c) - a(j, c));
                div += std::sqrt(sq);
            }
        worst_div = std::max(worst_div, std::abs(metrics::diversity(a) - div / pairs));
    }

    const double worst_oracle = std::max({worst_mpjpe, worst_pa, worst_accel, worst_pve, worst_fid, worst_div});
    return {pa_violations == 0 && worst_procrustes < 1e-8 && worst_self <= 1e-6 && worst_oracle < 1e-8,
            fmt("pa>mpjpe in %d/1000; procrustes err %.1e; fid(A,A) %.1e; oracle diffs mpjpe %.1e pa %.1e pve %.1e "
                "accel %.1e fid %.1e div %.1e",
                pa_violations, worst_procrustes, worst_self, worst_mpjpe, worst_pa, worst_pve, worst_accel, worst_fid,
                worst_div)};
}

struct Criterion {
    int id;
    const char* name;
    Outcome (*run)(const Context&);
};

const std::vector<Criterion> kCriteria = {
    {1, "codec exactness", codec_exactness},
    {2, "token-count law", token_counts},
    {3, "quantizer oracle", quantizer_oracle},
    {4, "gradient correctness", gradient_check},
    {5, "mask causality", mask_probe},
    {6, "rotary offset identity", rope_identity},
    {7, "grammar closure", grammar_closure},
    {8, "tokenizer ablation trend", ablation_trend},
    {9, "AR overfit", ar_overfit},
    {10, "end-to-end V2M", e2e_v2m},
    {11, "end-to-end I2VM distribution", e2e_i2vm},
    {12, "metric oracles", metric_oracles},
};

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    CLI::App app{"Acceptance criteria"};
    std::vector<int> only;
    std::string workdir = "acceptance_work";
    bool reuse = false;
    app.add_option("--only", only, "Criterion ids to run (default: all)")->delimiter(',');
    app.add_option("--workdir", workdir, "Directory for checkpoints and run outputs");
    app.add_flag("--reuse", reuse, "Reuse data and reports left by an earlier run with the same config");
    CLI11_PARSE(app, argc, argv);

    Context ctx{workdir, reuse};
    fs::create_directories(ctx.workdir);
    int failures = 0;
    for (const auto& c : kCriteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run(ctx);
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << " (" << fmt("%.1f", secs)
                  << " s): " << o.detail << std::endl;
    }
    return failures;
}

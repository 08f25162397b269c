// torch (via the precompiled header) defines its own CHECK.
#undef CHECK
#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>

#include "hvm/archive.hpp"
#include "hvm/metrics.hpp"
#include "hvm/motion_tokenizer.hpp"
#include "test_support.hpp"

using namespace hvm;

namespace {

TokenizerConfig small_config(int expansion) {
    TokenizerConfig c;
    c.expansion = expansion;
    c.codebook_size = 32;
    c.code_dim = 8;
    c.hidden = 16;
    c.blocks = 1;
    return c;
}

torch::Tensor brute_force_ids(const torch::Tensor& f, const torch::Tensor& book) {
    const auto fd = f.to(torch::kFloat64);
    const auto bd = book.to(torch::kFloat64);
    auto out = torch::zeros({f.size(0), f.size(2)}, torch::kInt64);
    for (std::int64_t n = 0; n < f.size(0); ++n) {
        for (std::int64_t k = 0; k < f.size(2); ++k) {
            double best = std::numeric_limits<double>::infinity();
            std::int64_t arg = 0;
            for (std::int64_t j = 0; j < book.size(0); ++j) {
                double s = 0.0;
                for (std::int64_t d = 0; d < book.size(1); ++d) {
                    const double e = fd[n][d][k].item<double>() - bd[j][d].item<double>();
                    s += e * e;
                }
                if (s < best) {
                    best = s;
                    arg = j;
                }
            }
            out[n][k] = arg;
        }
    }
    return out;
}

// Mean-pose prediction error: how far the joints travel from their average configuration.
double motion_amplitude_mm(const body::StubBody& body, const MotionSequence& m) {
    const RowMatrixXf x = channel_concat(m);
    RowMatrixXf mean = x.colwise().mean().replicate(x.rows(), 1);
    return metrics::mpjpe(metrics::joint_set(body, channel_split(mean)), metrics::joint_set(body, m));
}

std::filesystem::path temp_file(const char* name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST_CASE("expansion stages and config json") {
    CHECK(TokenizerConfig{}.expansion_stages() == std::vector<int>{6, 6});
    CHECK(small_config(12).expansion_stages() == std::vector<int>{6, 2});
    CHECK(small_config(1).expansion_stages().empty());
    CHECK_THROWS_AS(small_config(7).validate(), std::invalid_argument);
    CHECK_THROWS_AS(small_config(0).validate(), std::invalid_argument);

    const auto c = small_config(4);
    const auto back = TokenizerConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    auto bad = c.to_json();
    bad["codebok_size"] = 3;
    CHECK_THROWS(TokenizerConfig::from_json(bad));
}

TEST_CASE("encode latent length follows the expansion") {
    torch::manual_seed(0);
    std::mt19937_64 rng(3);
    const auto m = testing::random_motion(rng, 16);
    MotionTokenizer def(TokenizerConfig{.hidden = 16, .blocks = 1});
    CHECK(encode_motion(def, m).f.size(0) == 576);
    CHECK(tokenize(def, m).size() == 576u);
    MotionTokenizer one(small_config(1));
    CHECK(encode_motion(one, m).f.size(0) == 16);

    for (int frames : {32, 48}) {
        const auto longer = testing::random_motion(rng, frames);
        CHECK(tokenize(def, longer).size() == static_cast<std::size_t>(36 * frames));
    }
    CHECK_THROWS_AS(tokenize(def, testing::random_motion(rng, 15)), std::invalid_argument);
}

TEST_CASE("zeroed final encoder layer gives zero latents") {
    torch::manual_seed(1);
    std::mt19937_64 rng(4);
    MotionTokenizer tok(small_config(4));
    {
        torch::NoGradGuard g;
        tok->encoder_out->weight.zero_();
        tok->encoder_out->bias.zero_();
    }
    for (int i = 0; i < 3; ++i) {
        const auto lat = encode_motion(tok, testing::random_motion(rng, 16));
        CHECK(lat.f.abs().max().item<float>() == 0.0f);
    }
}

TEST_CASE("nearest_codes exact, tie and oracle cases") {
    auto book = torch::randn({12, 4}, torch::kFloat32);
    auto f = book[7].view({1, 4, 1}).clone();
    CHECK(nearest_codes(f, book).ids.item<std::int64_t>() == 7);

    // Entries 2 and 5 at equal distance from the origin, every other entry farther.
    auto tie_book = torch::full({8, 2}, 10.0f);
    tie_book[2] = torch::tensor({1.0f, 0.0f});
    tie_book[5] = torch::tensor({0.0f, 1.0f});
    CHECK(nearest_codes(torch::zeros({1, 2, 1}), tie_book).ids.item<std::int64_t>() == 2);
    tie_book[5] = torch::tensor({-1.0f, 0.0f});
    CHECK(nearest_codes(torch::zeros({1, 2, 1}), tie_book).ids.item<std::int64_t>() == 2);

    torch::manual_seed(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto b = torch::randn({16, 4});
        const auto x = torch::randn({2, 4, 6});
        const auto q = nearest_codes(x, b);
        CHECK(torch::equal(q.ids, brute_force_ids(x, b)));
        CHECK(torch::equal(nearest_codes(q.fq, b).ids, q.ids));
    }

    CHECK_THROWS_AS(nearest_codes(torch::zeros({1, 4, 1}), torch::zeros({0, 4})), std::invalid_argument);
    CHECK_THROWS_AS(nearest_codes(torch::zeros({1, 3, 1}), torch::zeros({4, 4})), std::invalid_argument);
}

TEST_CASE("zeroed decoder emits its biases through the prefix sum") {
    torch::manual_seed(3);
    MotionTokenizer tok(small_config(4));
    std::vector<torch::Tensor> biases;
    {
        torch::NoGradGuard g;
        for (auto& e : tok->experts) {
            for (auto& p : e->parameters()) p.zero_();
            e->out->bias.copy_(torch::randn_like(e->out->bias));
            biases.push_back(e->out->bias.clone());
        }
        tok->abs_mean.copy_(torch::randn({kMotionChannels}));
        tok->abs_std.copy_(torch::rand({kMotionChannels}) + 0.5);
        tok->vel_mean.copy_(0.1 * torch::randn({kMotionChannels}));
        tok->vel_std.copy_(torch::rand({kMotionChannels}) + 0.5);
    }
    std::vector<int> ids(4 * 32);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i % 32);
    const MotionSequence m = detokenize(tok, ids);
    REQUIRE(m.frames() == 32);
    CHECK(m.theta.cols() == 63);
    CHECK(m.beta.cols() == 10);
    CHECK(m.phi.cols() == 3);
    CHECK(m.tau.cols() == 3);

    const auto b = torch::cat(biases).to(torch::kFloat64);
    const auto first = b * tok->abs_std.to(torch::kFloat64) + tok->abs_mean.to(torch::kFloat64);
    const auto step = b * tok->vel_std.to(torch::kFloat64) + tok->vel_mean.to(torch::kFloat64);
    const RowMatrixXf got = channel_concat(m);
    double worst = 0.0;
    for (int t = 0; t < 32; ++t)
        for (int c = 0; c < kMotionChannels; ++c)
            worst = std::max(worst, std::abs(got(t, c) - (first[c].item<double>() + t * step[c].item<double>())));
    CHECK(worst < 1e-4);
}

TEST_CASE("detokenize validates and is deterministic") {
    torch::manual_seed(4);
    MotionTokenizer tok(small_config(2));
    std::vector<int> ids(32, 3);
    ids[5] = 31;
    CHECK(channel_concat(detokenize(tok, ids)) == channel_concat(detokenize(tok, ids)));
    ids[0] = 32;
    CHECK_THROWS_AS(detokenize(tok, ids), std::invalid_argument);
    ids[0] = -1;
    CHECK_THROWS_AS(detokenize(tok, ids), std::invalid_argument);
    CHECK_THROWS_AS(detokenize(tok, std::vector<int>(31, 0)), std::invalid_argument);
}

TEST_CASE("vqvae_loss closed forms") {
    torch::manual_seed(5);
    const auto gt = torch::randn({2, 5, 7});
    const auto f = torch::randn({2, 4, 3});
    CHECK(vqvae_loss(gt, gt, f, f, 0.25).total.item<double>() == 0.0);

    const auto delta = 0.3 * torch::randn({2, 4, 3});
    const auto l = vqvae_loss(gt, gt, f + delta, f, 0.25);
    const double per_step = delta.pow(2).sum(1).mean().item<double>();
    CHECK(l.total.item<double>() == doctest::Approx(1.25 * per_step).epsilon(1e-5));

    // l1 on values, first and second differences of a single channel.
    const auto p = torch::tensor({0.0, 1.0, 3.0}, torch::kFloat64).view({1, 1, 3});
    const auto g = torch::zeros({1, 1, 3}, torch::kFloat64);
    const auto z = torch::zeros({1, 2, 1}, torch::kFloat64);
    const double expected = 1.0 * (4.0 / 3.0) + 0.5 * (3.0 / 2.0) + 0.25 * 1.0;
    CHECK(vqvae_loss(p, g, z, z, 0.25).total.item<double>() == doctest::Approx(expected));

    CHECK_THROWS_AS(vqvae_loss(gt, gt.narrow(2, 0, 6), f, f, 0.25), std::invalid_argument);
    CHECK_THROWS_AS(vqvae_loss(gt, gt, f, f.narrow(2, 0, 2), 0.25), std::invalid_argument);
}

TEST_CASE("quadratic terms match central finite differences") {
    torch::manual_seed(6);
    const double lambda = 0.25;
    auto f = torch::randn({2, 3, 4}, torch::kFloat64).requires_grad_(true);
    auto fq = torch::randn({2, 3, 4}, torch::kFloat64).requires_grad_(true);
    const auto pred = torch::zeros({1, 1, 2}, torch::kFloat64);
    auto objective = [&](const torch::Tensor& a, const torch::Tensor& b) {
        return vqvae_loss(pred, pred, a, b, lambda).total;
    };
    objective(f, fq).backward();

    // Each term's own gradient path: the lambda term moves F, the codebook term moves Fq.
    const double h = 1e-6;
    torch::NoGradGuard g;
    auto check_grad = [&](torch::Tensor& x, const torch::Tensor& analytic, auto&& numeric_of) {
        double err = 0.0, scale = 0.0;
        const auto flat = x.view({-1});
        for (std::int64_t i = 0; i < flat.numel(); ++i) {
            const double orig = flat[i].item<double>();
            flat[i] = orig + h;
            const double up = numeric_of();
            flat[i] = orig - h;
            const double down = numeric_of();
            flat[i] = orig;
            const double num = (up - down) / (2 * h);
            err = std::max(err, std::abs(num - analytic.view({-1})[i].item<double>()));
            scale = std::max(scale, std::abs(num));
        }
        return err / std::max(scale, 1e-12);
    };
    const auto gf = f.grad().clone();
    const auto gq = fq.grad().clone();
    auto fd = f.detach().clone();
    auto qd = fq.detach().clone();
    // Analytic: lambda * d|F - sg(Fq)|^2 / dF and d|sg(F) - Fq|^2 / dFq.
    const double rel_f = check_grad(fd, gf, [&] { return lambda * (fd - qd).pow(2).sum(1).mean().item<double>(); });
    const double rel_q = check_grad(qd, gq, [&] { return (fd - qd).pow(2).sum(1).mean().item<double>(); });
    CHECK(rel_f < 1e-4);
    CHECK(rel_q < 1e-4);
}

TEST_CASE("straight-through copies the decoder-input gradient to F") {
    torch::manual_seed(7);
    MotionTokenizer tok(small_config(2));
    const auto gt = torch::randn({1, kMotionChannels, 16});
    auto f = torch::randn({1, 8, 32}).requires_grad_(true);
    const auto q = tok->quantize(f);
    auto fq_leaf = q.fq.clone().requires_grad_(true);

    const auto weights = ReconstructionWeights{};
    auto rec = [&](const torch::Tensor& pred) {
        return vqvae_loss(pred, gt, torch::zeros({1, 1, 1}), torch::zeros({1, 1, 1}), 0.0, weights).reconstruction;
    };
    rec(tok->decode_absolute(straight_through(f, q.fq))).backward();
    rec(tok->decode_absolute(fq_leaf)).backward();
    CHECK(torch::allclose(f.grad(), fq_leaf.grad(), 0.0, 0.0));
    CHECK(f.grad().abs().sum().item<double>() > 0.0);
}

TEST_CASE("loss term isolation") {
    torch::manual_seed(8);
    std::mt19937_64 rng(8);
    MotionTokenizer tok(small_config(2));
    const auto m = testing::random_motion(rng, 16);
    const auto x = tok->normalize(velocity_channels(m).unsqueeze(0));
    const auto gt = absolute_channels(m).unsqueeze(0);

    auto encoder_grad_norm = [&](double lambda) {
        tok->zero_grad();
        const auto f = tok->encode(x);
        const auto q = tok->quantize(f);
        const auto fq = tok->codebook.index_select(0, q.ids.flatten()).reshape({1, f.size(2), 8}).permute({0, 2, 1});
        // Perfect reconstruction isolates the two quadratic terms.
        vqvae_loss(gt, gt, f, fq, lambda).total.backward();
        double n = 0.0;
        for (auto& p : tok->encoder->parameters())
            if (p.grad().defined()) n += p.grad().pow(2).sum().item<double>();
        return std::make_pair(n, tok->codebook.grad().abs().sum().item<double>());
    };
    const auto [enc0, book0] = encoder_grad_norm(0.0);
    const auto [enc1, book1] = encoder_grad_norm(0.25);
    CHECK(enc0 == 0.0);
    CHECK(enc1 > 0.0);
    CHECK(book0 > 0.0);
    CHECK(book0 == doctest::Approx(book1));

    // Codebook gradient comes only from the |sg(F) - Fq|^2 term.
    tok->zero_grad();
    const auto f = tok->encode(x);
    const auto q = tok->quantize(f);
    const auto fq = tok->codebook.index_select(0, q.ids.flatten()).reshape({1, f.size(2), 8}).permute({0, 2, 1});
    const auto l = vqvae_loss(tok->decode_absolute(straight_through(f, fq)), gt, f, fq, 0.25);
    (l.reconstruction + 0.25 * l.commitment).backward();
    CHECK((!tok->codebook.grad().defined() || tok->codebook.grad().abs().sum().item<double>() == 0.0));
}

TEST_CASE("codebook_utilization") {
    const std::vector<int> two = {3, 7, 3, 7, 7};
    CHECK(codebook_utilization(two, 512) == doctest::Approx(2.0 / 512));
    std::vector<int> all(64);
    for (int i = 0; i < 64; ++i) all[i] = 63 - i;
    CHECK(codebook_utilization(all, 64) == 1.0);
    CHECK_THROWS_AS(codebook_utilization(two, 0), std::invalid_argument);

    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> pick(0, 511);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<int> ids(300);
        for (auto& i : ids) i = pick(rng);
        std::vector<bool> seen(512, false);
        int distinct = 0;
        for (int i : ids)
            if (!seen[i]) seen[i] = true, ++distinct;
        CHECK(codebook_utilization(ids, 512) == doctest::Approx(distinct / 512.0));
    }
}

TEST_CASE("training is deterministic given the seed") {
    std::vector<MotionSequence> data;
    for (std::uint64_t s = 0; s < 4; ++s) data.push_back(generate_procedural_motion(s, 32, kAllFamilies[s % 4]));
    TokenizerTrainConfig train;
    train.steps = 12;
    train.batch = 4;
    train.window = 16;
    train.reinit_every = 5;
    train.log_every = 4;
    const auto a = train_tokenizer(data, small_config(2), train, 11);
    const auto b = train_tokenizer(data, small_config(2), train, 11);
    const auto c = train_tokenizer(data, small_config(2), train, 12);
    CHECK(a.loss_curve.size() == 12u);
    CHECK(a.loss_curve == b.loss_curve);
    CHECK(a.loss_curve != c.loss_curve);
    REQUIRE(a.log.size() == 3u);
    CHECK(a.log.back()["step"] == 12);
    CHECK(a.log.back().contains("window_utilization"));

    CHECK_THROWS_AS(train_tokenizer({}, small_config(2), train, 1), std::invalid_argument);
    train.window = 48;
    CHECK_THROWS_AS(train_tokenizer(data, small_config(2), train, 1), std::invalid_argument);
}

TEST_CASE("overfits a single sequence") {
    const auto body = body::StubBody::procedural();
    const auto m = generate_procedural_motion(21, 32, MotionFamily::walk);
    TokenizerConfig cfg = small_config(4);
    cfg.hidden = 64;
    cfg.blocks = 2;
    TokenizerTrainConfig train;
    train.steps = 500;
    train.batch = 32;
    train.window = 32;
    train.learning_rate = 3e-3;
    const auto r = train_tokenizer({m}, cfg, train, 5);
    auto tok = r.model;
    const double err = metrics::mpjpe(metrics::joint_set(body, reconstruct(tok, m)), metrics::joint_set(body, m));
    const double amp = motion_amplitude_mm(body, m);
    MESSAGE("overfit mpjpe " << err << " mm, amplitude " << amp << " mm");
    CHECK(err < 0.1 * amp);
}

TEST_CASE("checkpoint round trip") {
    torch::manual_seed(10);
    std::mt19937_64 rng(10);
    MotionTokenizer tok(small_config(4));
    {
        torch::NoGradGuard g;
        tok->abs_std.mul_(2.0);
    }
    const auto path = temp_file("hvm_tok_ckpt.hvm");
    save_tokenizer(tok, path, {{"seed", 10}});
    nlohmann::json meta;
    auto back = load_tokenizer(path, &meta);
    CHECK(meta["seed"] == 10);
    CHECK(back->config().to_json() == tok->config().to_json());
    const auto m = testing::random_motion(rng, 32);
    CHECK(tokenize(back, m) == tokenize(tok, m));
    CHECK(channel_concat(reconstruct(back, m)) == channel_concat(reconstruct(tok, m)));

    Archive other;
    other.meta = {{"kind", "video_tokenizer"}};
    other.save(path);
    CHECK_THROWS_AS(load_tokenizer(path), FormatError);
    std::filesystem::remove(path);
}

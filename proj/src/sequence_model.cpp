#include "hvm/sequence_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "hvm/archive.hpp"
#include "hvm/json_fields.hpp"
#include "hvm/torch_io.hpp"

namespace hvm {

namespace {

constexpr int kSpecialCount = 4;

void check_local_ids(const std::vector<int>& ids, int size, int expected_length, const char* what) {
    if (static_cast<int>(ids.size()) != expected_length)
        throw std::invalid_argument(std::string(what) + ": block has " + std::to_string(ids.size()) +
                                    " tokens, expected " + std::to_string(expected_length));
    for (int id : ids)
        if (id < 0 || id >= size) throw std::invalid_argument(std::string(what) + ": token id out of range");
}

void append_block(UnifiedSequence& seq, BlockKind kind, int unit, const std::vector<int>& local, int offset) {
    seq.blocks.push_back({kind, unit, static_cast<int>(local.size())});
    for (int id : local) seq.ids.push_back(id + offset);
}

// Total order on candidate ids: larger logit first, then lower index.
std::vector<int> ranked(const std::vector<double>& v) {
    std::vector<int> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return v[a] > v[b]; });
    return order;
}

}  // namespace

std::string_view task_name(Task t) { return t == Task::v2m ? "v2m" : "i2vm"; }

Task parse_task(std::string_view name) {
    if (name == "v2m") return Task::v2m;
    if (name == "i2vm") return Task::i2vm;
    throw std::invalid_argument("unknown task '" + std::string(name) + "' (expected v2m or i2vm)");
}

Modality VocabLayout::classify(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " outside the vocabulary");
    if (id < visual) return Modality::visual;
    if (id < visual + motion) return Modality::motion;
    return Modality::special;
}

std::pair<int, int> VocabLayout::range(BlockKind kind) const {
    return kind == BlockKind::motion ? std::pair{visual, visual + motion} : std::pair{0, visual};
}

void VocabLayout::validate() const {
    if (visual < 1 || motion < 1) throw std::invalid_argument("vocab: visual and motion sizes must be positive");
}

nlohmann::json VocabLayout::to_json() const {
    return {{"visual", visual}, {"motion", motion}, {"special", {"T1", "T2", "STG", "PAD"}}};
}

VocabLayout VocabLayout::from_json(const nlohmann::json& j) {
    constexpr const char* where = "vocab";
    reject_unknown_keys(j, {"visual", "motion", "special"}, where);
    VocabLayout v;
    read_field(j, "visual", v.visual, where);
    read_field(j, "motion", v.motion, where);
    v.validate();
    return v;
}

int TokenShapes::block_length(BlockKind kind) const {
    switch (kind) {
        case BlockKind::image: return image_tokens();
        case BlockKind::video: return visual_per_unit();
        case BlockKind::motion: return motion_per_unit();
    }
    return 0;
}

void TokenShapes::validate() const {
    if (grid_h < 1 || grid_w < 1 || visual_slabs < 1 || temporal_factor < 1 || motion_per_frame < 1)
        throw std::invalid_argument("token shapes: all sizes must be positive");
    if (visual_slabs * temporal_factor != kUnitFrames)
        throw std::invalid_argument("token shapes: visual slabs x temporal factor must cover 16 frames");
}

nlohmann::json TokenShapes::to_json() const {
    return {{"grid_h", grid_h},
            {"grid_w", grid_w},
            {"visual_slabs", visual_slabs},
            {"temporal_factor", temporal_factor},
            {"motion_per_frame", motion_per_frame}};
}

TokenShapes TokenShapes::from_json(const nlohmann::json& j) {
    constexpr const char* where = "token_shapes";
    reject_unknown_keys(j, {"grid_h", "grid_w", "visual_slabs", "temporal_factor", "motion_per_frame"}, where);
    TokenShapes s;
    read_field(j, "grid_h", s.grid_h, where);
    read_field(j, "grid_w", s.grid_w, where);
    read_field(j, "visual_slabs", s.visual_slabs, where);
    read_field(j, "temporal_factor", s.temporal_factor, where);
    read_field(j, "motion_per_frame", s.motion_per_frame, where);
    s.validate();
    return s;
}

std::vector<BlockSpec> UnifiedSequence::target_schedule() const {
    std::vector<BlockSpec> out;
    const BlockKind condition_kind = task == Task::v2m ? BlockKind::video : BlockKind::image;
    bool in_target = false;
    for (const auto& b : blocks) {
        if (!in_target && b.kind != condition_kind) in_target = true;
        if (in_target) out.push_back(b);
    }
    return out;
}

std::vector<BlockSpec> target_blocks(Task task, int units, const TokenShapes& shapes) {
    std::vector<BlockSpec> out;
    for (int k = 0; k < units; ++k) {
        if (task == Task::i2vm) out.push_back({BlockKind::video, k, shapes.visual_per_unit()});
        out.push_back({BlockKind::motion, k, shapes.motion_per_unit()});
    }
    return out;
}

void assign_positions(UnifiedSequence& seq, const TokenShapes& shapes) {
    const int n = seq.length();
    seq.modality.assign(n, Modality::special);
    seq.coords.assign(n, Coord{0.0f, 0.0f, 0.0f});
    const int grid = shapes.grid_h * shapes.grid_w;
    const std::size_t condition_blocks = seq.blocks.size() - seq.target_schedule().size();
    int pos = 1;  // after T1 / T2
    for (std::size_t b = 0; b < seq.blocks.size(); ++b) {
        if (b == condition_blocks) ++pos;  // STG
        const auto& blk = seq.blocks[b];
        for (int e = 0; e < blk.length; ++e, ++pos) {
            if (pos >= n) throw std::logic_error("assign_positions: blocks exceed the sequence");
            if (blk.kind == BlockKind::motion) {
                const int frame = blk.unit * kUnitFrames + e / shapes.motion_per_frame;
                seq.modality[pos] = Modality::motion;
                seq.coords[pos] = {static_cast<float>(frame) / static_cast<float>(shapes.temporal_factor), 0.0f, 0.0f};
            } else {
                const int slab = blk.kind == BlockKind::video ? blk.unit * shapes.visual_slabs + e / grid : 0;
                const int cell = e % grid;
                seq.modality[pos] = Modality::visual;
                seq.coords[pos] = {static_cast<float>(slab), static_cast<float>(cell / shapes.grid_w),
                                   static_cast<float>(cell % shapes.grid_w)};
            }
        }
    }
    // Specials carry the temporal coordinate of the token that follows them.
    for (int i = n - 1; i >= 0; --i)
        if (seq.modality[i] == Modality::special) seq.coords[i] = {i + 1 < n ? seq.coords[i + 1][0] : 0.0f, 0.0f, 0.0f};
}

UnifiedSequence build_v2m_sequence(const VocabLayout& vocab, const TokenShapes& shapes,
                                   const std::vector<std::vector<int>>& video_units,
                                   const std::vector<std::vector<int>>& motion_units) {
    if (video_units.empty()) throw std::invalid_argument("build_v2m_sequence: at least one video unit required");
    if (!motion_units.empty() && motion_units.size() != video_units.size())
        throw std::invalid_argument("build_v2m_sequence: video and motion unit counts differ");
    UnifiedSequence seq;
    seq.task = Task::v2m;
    seq.ids.push_back(vocab.t1());
    for (std::size_t k = 0; k < video_units.size(); ++k) {
        check_local_ids(video_units[k], vocab.visual, shapes.visual_per_unit(), "build_v2m_sequence (video)");
        append_block(seq, BlockKind::video, static_cast<int>(k), video_units[k], 0);
    }
    seq.ids.push_back(vocab.stg());
    seq.target_start = seq.length();
    for (std::size_t k = 0; k < motion_units.size(); ++k) {
        check_local_ids(motion_units[k], vocab.motion, shapes.motion_per_unit(), "build_v2m_sequence (motion)");
        append_block(seq, BlockKind::motion, static_cast<int>(k), motion_units[k], vocab.motion_offset());
    }
    assign_positions(seq, shapes);
    return seq;
}

UnifiedSequence build_i2vm_sequence(const VocabLayout& vocab, const TokenShapes& shapes, const std::vector<int>& image,
                                    const std::vector<std::vector<int>>& video_units,
                                    const std::vector<std::vector<int>>& motion_units) {
    if (video_units.size() != motion_units.size())
        throw std::invalid_argument("build_i2vm_sequence: video and motion unit counts differ");
    check_local_ids(image, vocab.visual, shapes.image_tokens(), "build_i2vm_sequence (image)");
    UnifiedSequence seq;
    seq.task = Task::i2vm;
    seq.ids.push_back(vocab.t2());
    append_block(seq, BlockKind::image, 0, image, 0);
    seq.ids.push_back(vocab.stg());
    seq.target_start = seq.length();
    for (std::size_t k = 0; k < video_units.size(); ++k) {
        check_local_ids(video_units[k], vocab.visual, shapes.visual_per_unit(), "build_i2vm_sequence (video)");
        check_local_ids(motion_units[k], vocab.motion, shapes.motion_per_unit(), "build_i2vm_sequence (motion)");
        append_block(seq, BlockKind::video, static_cast<int>(k), video_units[k], 0);
        append_block(seq, BlockKind::motion, static_cast<int>(k), motion_units[k], vocab.motion_offset());
    }
    assign_positions(seq, shapes);
    return seq;
}

ParseResult parse_sequence(const std::vector<int>& ids, const VocabLayout& vocab, const TokenShapes& shapes) {
    ParseResult r;
    const int n = static_cast<int>(ids.size());
    auto fail = [&](int pos, std::string msg) {
        r.ok = false;
        r.violation = pos;
        r.message = std::move(msg);
        return r;
    };
    auto modality_at = [&](int i) -> std::optional<Modality> {
        if (ids[i] < 0 || ids[i] >= vocab.size()) return std::nullopt;
        return vocab.classify(ids[i]);
    };
    auto is = [&](int i, Modality m) { return modality_at(i) == m; };

    if (n == 0) return fail(0, "empty sequence");
    if (ids[0] == vocab.t1()) {
        r.task = Task::v2m;
    } else if (ids[0] == vocab.t2()) {
        r.task = Task::i2vm;
    } else {
        return fail(0, "sequence must start with T1 or T2");
    }

    int i = 1;
    if (r.task == Task::v2m) {
        const int vpu = shapes.visual_per_unit();
        std::vector<int> unit;
        for (; i < n && is(i, Modality::visual); ++i) {
            unit.push_back(ids[i]);
            if (static_cast<int>(unit.size()) == vpu) r.video_units.push_back(std::exchange(unit, {}));
        }
        if (i == n) return fail(n, "missing STG");
        if (ids[i] != vocab.stg()) return fail(i, "expected a visual token or STG in the V2M condition");
        if (!unit.empty()) return fail(i, "STG inside a video block");
        if (r.video_units.empty()) return fail(i, "V2M condition has no video unit");
    } else {
        for (; i < n && i <= shapes.image_tokens(); ++i) {
            if (!is(i, Modality::visual)) return fail(i, "expected a visual token in the image block");
            r.image.push_back(ids[i]);
        }
        if (i == n) return fail(n, "missing STG");
        if (ids[i] != vocab.stg()) return fail(i, "expected STG after the image block");
    }
    ++i;  // STG

    const int units_allowed = r.task == Task::v2m ? static_cast<int>(r.video_units.size()) : -1;
    std::vector<BlockSpec> schedule;
    if (r.task == Task::v2m) {
        schedule = target_blocks(Task::v2m, units_allowed, shapes);
    }
    std::size_t block = 0;
    int in_block = 0;
    std::vector<int> current;
    auto block_at = [&](std::size_t b) -> std::optional<BlockSpec> {
        if (r.task == Task::v2m) {
            if (b >= schedule.size()) return std::nullopt;
            return schedule[b];
        }
        const int unit = static_cast<int>(b / 2);
        return b % 2 == 0 ? BlockSpec{BlockKind::video, unit, shapes.visual_per_unit()}
                          : BlockSpec{BlockKind::motion, unit, shapes.motion_per_unit()};
    };
    for (; i < n; ++i) {
        const auto spec = block_at(block);
        if (!spec) return fail(i, "tokens past the end of the target schedule");
        const Modality want = spec->kind == BlockKind::motion ? Modality::motion : Modality::visual;
        if (!is(i, want))
            return fail(i, want == Modality::motion ? "expected a motion token" : "expected a visual token");
        current.push_back(ids[i] - (want == Modality::motion ? vocab.motion_offset() : 0));
        if (++in_block == spec->length) {
            (spec->kind == BlockKind::motion ? r.motion_units : r.video_units).push_back(std::exchange(current, {}));
            in_block = 0;
            ++block;
        }
    }
    const bool complete_units = r.task == Task::v2m ? (block == 0 || block == schedule.size()) : block % 2 == 0;
    if (in_block != 0 || !complete_units) {
        if (in_block != 0) {
            const auto spec = block_at(block);
            (spec->kind == BlockKind::motion ? r.motion_units : r.video_units).push_back(current);
        }
        r.truncated = true;
        r.ok = false;
        r.message = "sequence ends inside the target schedule";
        return r;
    }
    r.ok = true;
    return r;
}

void ARConfig::validate() const {
    if (layers < 1 || heads < 1 || width < 1 || width % heads != 0)
        throw std::invalid_argument("ar model: layers/heads/width must be positive with width divisible by heads");
    for (int d : rope_split)
        if (d < 0 || d % 2 != 0) throw std::invalid_argument("ar model: RoPE slices must be even and non-negative");
    if (rope_split[0] + rope_split[1] + rope_split[2] != head_dim())
        throw std::invalid_argument("ar model: RoPE split must sum to the head dimension");
    if (max_length < 2) throw std::invalid_argument("ar model: max_length must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("ar model: dropout must be in [0, 1)");
    if (rope_base <= 1.0) throw std::invalid_argument("ar model: rope_base must exceed 1");
}

nlohmann::json ARConfig::to_json() const {
    return {{"layers", layers},         {"heads", heads},           {"width", width},
            {"rope_split", rope_split}, {"max_length", max_length}, {"dropout", dropout},
            {"rope_base", rope_base}};
}

ARConfig ARConfig::from_json(const nlohmann::json& j) {
    constexpr const char* where = "ar_model";
    reject_unknown_keys(j, {"layers", "heads", "width", "rope_split", "max_length", "dropout", "rope_base"}, where);
    ARConfig c;
    read_field(j, "layers", c.layers, where);
    read_field(j, "heads", c.heads, where);
    read_field(j, "width", c.width, where);
    read_field(j, "rope_split", c.rope_split, where);
    read_field(j, "max_length", c.max_length, where);
    read_field(j, "dropout", c.dropout, where);
    read_field(j, "rope_base", c.rope_base, where);
    c.validate();
    return c;
}

torch::Tensor apply_rope(const torch::Tensor& x, const torch::Tensor& coords, const std::array<int, 3>& split,
                         double base) {
    const int dh = static_cast<int>(x.size(-1));
    if (split[0] + split[1] + split[2] != dh || dh % 2 != 0)
        throw std::invalid_argument("apply_rope: split does not match the head dimension");
    std::vector<double> freq;
    std::vector<std::int64_t> axis;
    for (int a = 0; a < 3; ++a) {
        for (int i = 0; i < split[a] / 2; ++i) {
            freq.push_back(std::pow(base, -2.0 * i / split[a]));
            axis.push_back(a);
        }
    }
    const auto opts = torch::TensorOptions().dtype(x.scalar_type());
    const auto f = torch::tensor(freq, torch::kFloat64).to(opts);
    const auto a = torch::tensor(axis, torch::kInt64);
    auto angles = coords.to(x.scalar_type()).index_select(-1, a) * f;  // ... x L x Dh/2
    if (x.dim() == 4 && coords.dim() == 3) angles = angles.unsqueeze(1);
    const auto c = angles.cos(), s = angles.sin();
    auto shape = x.sizes().vec();
    shape.back() = dh / 2;
    shape.push_back(2);
    const auto pairs = x.reshape(shape);
    const auto x0 = pairs.select(-1, 0), x1 = pairs.select(-1, 1);
    return torch::stack({x0 * c - x1 * s, x0 * s + x1 * c}, -1).flatten(-2);
}

torch::Tensor attention_mask(int length, int target_start) {
    const auto i = torch::arange(length).unsqueeze(1);
    const auto j = torch::arange(length).unsqueeze(0);
    return j.lt(target_start) | j.le(i);
}

SequenceBatch collate(const std::vector<UnifiedSequence>& seqs, const VocabLayout& vocab, torch::Dtype coord_dtype) {
    if (seqs.empty()) throw std::invalid_argument("collate: empty batch");
    const auto n = static_cast<std::int64_t>(seqs.size());
    std::int64_t len = 0;
    for (const auto& s : seqs) len = std::max<std::int64_t>(len, s.length());
    SequenceBatch b;
    b.ids = torch::full({n, len}, vocab.pad(), torch::kInt64);
    b.table = torch::full({n, len}, static_cast<std::int64_t>(Modality::special), torch::kInt64);
    b.coords = torch::zeros({n, len, 3}, torch::kFloat32);
    b.attend = torch::zeros({n, len, len}, torch::kBool);
    b.targets = torch::zeros({n, len}, torch::kBool);
    b.positions = torch::arange(len, torch::kInt64);
    auto ids = b.ids.accessor<std::int64_t, 2>();
    auto table = b.table.accessor<std::int64_t, 2>();
    auto coords = b.coords.accessor<float, 3>();
    auto targets = b.targets.accessor<bool, 2>();
    for (std::int64_t r = 0; r < n; ++r) {
        const auto& s = seqs[r];
        if (s.modality.size() != s.ids.size() || s.coords.size() != s.ids.size())
            throw std::invalid_argument("collate: sequence lacks modalities or coordinates");
        for (int p = 0; p < s.length(); ++p) {
            if (vocab.classify(s.ids[p]) != s.modality[p])
                throw std::invalid_argument("collate: id and modality disagree at position " + std::to_string(p));
            ids[r][p] = s.ids[p];
            table[r][p] = static_cast<std::int64_t>(s.modality[p]);
            for (int a = 0; a < 3; ++a) coords[r][p][a] = s.coords[p][a];
            targets[r][p] = p >= s.target_start;
        }
        auto m = attention_mask(static_cast<int>(len), s.target_start);
        // Padding rows attend to themselves only; real rows never see padding.
        const auto real = torch::arange(len).lt(s.length());
        m = m & real.unsqueeze(0) & real.unsqueeze(1);
        m = m | torch::eye(len, torch::kBool).logical_and(real.logical_not().unsqueeze(1));
        b.attend[r] = m;
        b.tasks.push_back(s.task);
    }
    b.coords = b.coords.to(coord_dtype);
    return b;
}

AttentionImpl::AttentionImpl(const ARConfig& cfg) : cfg_(cfg) {
    qkv = register_module("qkv", torch::nn::Linear(cfg.width, 3 * cfg.width));
    proj = register_module("proj", torch::nn::Linear(cfg.width, cfg.width));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& coords, const torch::Tensor& ape,
                                     const torch::Tensor& attend, torch::Tensor* k_cache, torch::Tensor* v_cache) {
    const auto n = x.size(0), l = x.size(1);
    const int h = cfg_.heads, dh = cfg_.head_dim();
    const auto parts = qkv(x).view({n, l, 3, h, dh}).permute({2, 0, 3, 1, 4});
    const auto ape_h = ape.view({l, h, dh}).permute({1, 0, 2});
    auto q = apply_rope(parts[0], coords, cfg_.rope_split, cfg_.rope_base) + ape_h;
    auto k = apply_rope(parts[1], coords, cfg_.rope_split, cfg_.rope_base) + ape_h;
    auto v = parts[2];
    if (k_cache) {
        if (k_cache->defined()) {
            k = torch::cat({*k_cache, k}, 2);
            v = torch::cat({*v_cache, v}, 2);
        }
        *k_cache = k;
        *v_cache = v;
    }
    auto scores = q.matmul(k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
    scores = scores.masked_fill(attend.unsqueeze(1).logical_not(), -std::numeric_limits<double>::infinity());
    auto p = torch::softmax(scores, -1);
    if (cfg_.dropout > 0.0) p = torch::dropout(p, cfg_.dropout, is_training());
    return proj(p.matmul(v).permute({0, 2, 1, 3}).reshape({n, l, cfg_.width}));
}

BlockImpl::BlockImpl(const ARConfig& cfg) {
    ln1 = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.width})));
    ln2 = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.width})));
    attn = register_module("attn", Attention(cfg));
    mlp = register_module("mlp", torch::nn::Sequential(torch::nn::Linear(cfg.width, 4 * cfg.width), torch::nn::GELU(),
                                                       torch::nn::Linear(4 * cfg.width, cfg.width)));
    drop = register_module("drop", torch::nn::Dropout(cfg.dropout));
}

torch::Tensor BlockImpl::forward(const torch::Tensor& x, const torch::Tensor& coords, const torch::Tensor& ape,
                                 const torch::Tensor& attend, torch::Tensor* k_cache, torch::Tensor* v_cache) {
    auto y = x + drop(attn(ln1(x), coords, ape, attend, k_cache, v_cache));
    return y + drop(mlp->forward(ln2(y)));
}

ARTransformerImpl::ARTransformerImpl(const ARConfig& cfg, const VocabLayout& vocab) : cfg_(cfg), vocab_(vocab) {
    cfg_.validate();
    vocab_.validate();
    visual_table = register_module("visual_table", torch::nn::Embedding(vocab.visual, cfg.width));
    motion_table = register_module("motion_table", torch::nn::Embedding(vocab.motion, cfg.width));
    special_table = register_module("special_table", torch::nn::Embedding(kSpecialCount, cfg.width));
    for (auto* t : {&visual_table, &motion_table, &special_table}) {
        torch::NoGradGuard g;
        (*t)->weight.normal_(0.0, 0.02);
    }
    ape = register_parameter("ape", torch::randn({cfg.max_length, cfg.width}) * 0.02);
    for (int i = 0; i < cfg.layers; ++i) blocks.push_back(register_module("block" + std::to_string(i), Block(cfg)));
    final_norm = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.width})));
    head = register_module("head", torch::nn::Linear(cfg.width, vocab.size()));
}

torch::Tensor ARTransformerImpl::embed(const SequenceBatch& batch) {
    const auto dtype = visual_table->weight.scalar_type();
    auto x = torch::zeros({batch.ids.size(0), batch.ids.size(1), cfg_.width}, torch::TensorOptions().dtype(dtype));
    const std::array<std::pair<torch::nn::Embedding*, std::int64_t>, 3> tables = {
        std::pair{&visual_table, std::int64_t{0}}, std::pair{&motion_table, std::int64_t{vocab_.motion_offset()}},
        std::pair{&special_table, std::int64_t{vocab_.t1()}}};
    for (std::int64_t m = 0; m < 3; ++m) {
        const auto sel = batch.table.eq(m);
        const auto nz = sel.nonzero();
        if (nz.size(0) == 0) continue;
        const auto local = batch.ids.masked_select(sel) - tables[m].second;
        x = x.index_put({nz.select(1, 0), nz.select(1, 1)}, (*tables[m].first)->forward(local));
    }
    return x;
}

torch::Tensor ARTransformerImpl::run_blocks(torch::Tensor x, const torch::Tensor& coords,
                                            const torch::Tensor& positions, const torch::Tensor& attend,
                                            KVCache* cache) {
    if (positions.numel() > 0 && positions.max().item<std::int64_t>() >= cfg_.max_length)
        throw std::invalid_argument("ar model: sequence longer than max_length " + std::to_string(cfg_.max_length));
    const auto ape_rows = ape.index_select(0, positions);
    const auto c = coords.to(x.scalar_type());
    if (cache && cache->k.empty()) {
        cache->k.resize(blocks.size());
        cache->v.resize(blocks.size());
    }
    for (std::size_t i = 0; i < blocks.size(); ++i)
        x = blocks[i]->forward(x, c, ape_rows, attend, cache ? &cache->k[i] : nullptr, cache ? &cache->v[i] : nullptr);
    return final_norm(x);
}

torch::Tensor ARTransformerImpl::forward_embedded(const torch::Tensor& x, const SequenceBatch& batch) {
    const auto h = run_blocks(x, batch.coords, batch.positions, batch.attend, nullptr);
    const auto logits = head(h);
    const auto first = torch::zeros({logits.size(0), 1, logits.size(2)}, logits.options());
    return torch::cat({first, logits.narrow(1, 0, logits.size(1) - 1)}, 1);
}

torch::Tensor ARTransformerImpl::prefill(const UnifiedSequence& prefix, KVCache& cache) {
    cache = KVCache{};
    const auto batch = collate({prefix}, vocab_);
    const auto h = run_blocks(embed(batch), batch.coords, batch.positions, batch.attend, &cache);
    cache.length = prefix.length();
    return head(h[0][prefix.length() - 1]);
}

torch::Tensor ARTransformerImpl::step(int id, const Coord& coord, KVCache& cache) {
    SequenceBatch b;
    b.ids = torch::full({1, 1}, id, torch::kInt64);
    b.table = torch::full({1, 1}, static_cast<std::int64_t>(vocab_.classify(id)), torch::kInt64);
    b.coords = torch::tensor({coord[0], coord[1], coord[2]}, torch::kFloat32).view({1, 1, 3});
    b.positions = torch::full({1}, cache.length, torch::kInt64);
    b.attend = torch::ones({1, 1, cache.length + 1}, torch::kBool);
    const auto h = run_blocks(embed(b), b.coords, b.positions, b.attend, &cache);
    ++cache.length;
    return head(h[0][0]);
}

torch::Tensor ar_loss_per_sequence(const torch::Tensor& logits, const SequenceBatch& batch) {
    const auto logp = torch::log_softmax(logits, -1).gather(2, batch.ids.unsqueeze(-1)).squeeze(-1);
    const auto mask = batch.targets.to(logp.scalar_type());
    const auto count = mask.sum(1);
    if (count.min().item<double>() <= 0.0) throw std::invalid_argument("ar_loss: a sequence has no target positions");
    return -(logp * mask).sum(1) / count;
}

torch::Tensor ar_loss(const torch::Tensor& logits, const SequenceBatch& batch) {
    const auto logp = torch::log_softmax(logits, -1).gather(2, batch.ids.unsqueeze(-1)).squeeze(-1);
    const auto mask = batch.targets.to(logp.scalar_type());
    const auto count = mask.sum();
    if (count.item<double>() <= 0.0) throw std::invalid_argument("ar_loss: no target positions");
    return -(logp * mask).sum() / count;
}

void DecodeConfig::validate() const {
    if (mode == Mode::sample && !(temperature > 0.0)) throw std::invalid_argument("decode: temperature must be > 0");
    if (top_k < 0) throw std::invalid_argument("decode: top_k must be >= 0");
}

nlohmann::json DecodeConfig::to_json() const {
    return {{"mode", mode == Mode::greedy ? "greedy" : "sample"}, {"temperature", temperature}, {"top_k", top_k}};
}

DecodeConfig DecodeConfig::from_json(const nlohmann::json& j) {
    constexpr const char* where = "decode";
    reject_unknown_keys(j, {"mode", "temperature", "top_k"}, where);
    DecodeConfig c;
    std::string mode = "greedy";
    read_field(j, "mode", mode, where);
    if (mode == "greedy") {
        c.mode = Mode::greedy;
    } else if (mode == "sample") {
        c.mode = Mode::sample;
    } else {
        throw std::invalid_argument("decode.mode must be 'greedy' or 'sample'");
    }
    read_field(j, "temperature", c.temperature, where);
    read_field(j, "top_k", c.top_k, where);
    c.validate();
    return c;
}

int choose_token(const torch::Tensor& logits, int first, int last, const DecodeConfig& cfg, std::mt19937_64& rng) {
    if (first < 0 || last > logits.size(0) || first >= last) throw std::invalid_argument("choose_token: bad id range");
    const auto slice = logits.narrow(0, first, last - first).to(torch::kFloat64).contiguous();
    const std::vector<double> v(slice.data_ptr<double>(), slice.data_ptr<double>() + slice.numel());
    const auto order = ranked(v);
    if (cfg.mode == DecodeConfig::Mode::greedy) return first + order[0];

    const std::size_t keep = cfg.top_k > 0 ? std::min<std::size_t>(cfg.top_k, order.size()) : order.size();
    std::vector<double> p(keep);
    const double top = v[order[0]] / cfg.temperature;
    double total = 0.0;
    for (std::size_t i = 0; i < keep; ++i) total += p[i] = std::exp(v[order[i]] / cfg.temperature - top);
    double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    for (std::size_t i = 0; i < keep; ++i) {
        if (u < p[i]) return first + order[i];
        u -= p[i];
    }
    return first + order[0];
}

namespace {

// Condition followed by placeholder target blocks with final positions and coordinates.
UnifiedSequence target_skeleton(const ARTransformer& model, const UnifiedSequence& condition, int units,
                                const TokenShapes& shapes) {
    const auto& vocab = model->vocab();
    if (condition.length() != condition.target_start || condition.length() == 0 ||
        condition.ids.back() != vocab.stg())
        throw std::invalid_argument("sample: condition must end at STG");
    if (units < 1) throw std::invalid_argument("sample: at least one unit to generate");
    if (condition.task == Task::v2m) {
        const auto parsed = parse_sequence(condition.ids, vocab, shapes);
        if (!parsed.ok) throw std::invalid_argument("sample: invalid V2M condition: " + parsed.message);
        if (static_cast<int>(parsed.video_units.size()) != units)
            throw std::invalid_argument("sample: V2M generates exactly one motion unit per video unit");
    }
    UnifiedSequence full = condition;
    for (const auto& b : target_blocks(condition.task, units, shapes)) {
        full.blocks.push_back(b);
        full.ids.insert(full.ids.end(), b.length, vocab.range(b.kind).first);
    }
    if (full.length() > model->config().max_length)
        throw std::invalid_argument("sample: generated sequence would exceed max_length");
    assign_positions(full, shapes);
    return full;
}

std::vector<BlockKind> slot_kinds(const UnifiedSequence& full) {
    std::vector<BlockKind> kinds;
    for (const auto& b : full.target_schedule()) kinds.insert(kinds.end(), b.length, b.kind);
    return kinds;
}

}  // namespace

UnifiedSequence sample(ARTransformer& model, const UnifiedSequence& condition, int units, const TokenShapes& shapes,
                       const DecodeConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    torch::NoGradGuard guard;
    UnifiedSequence full = target_skeleton(model, condition, units, shapes);
    const auto kinds = slot_kinds(full);
    KVCache cache;
    auto logits = model->prefill(condition, cache);
    for (int pos = full.target_start; pos < full.length(); ++pos) {
        const auto [lo, hi] = model->vocab().range(kinds[pos - full.target_start]);
        full.ids[pos] = choose_token(logits, lo, hi, cfg, rng);
        if (pos + 1 < full.length()) logits = model->step(full.ids[pos], full.coords[pos], cache);
    }
    return full;
}

UnifiedSequence sample_uncached(ARTransformer& model, const UnifiedSequence& condition, int units,
                                const TokenShapes& shapes, const DecodeConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    torch::NoGradGuard guard;
    UnifiedSequence full = target_skeleton(model, condition, units, shapes);
    const auto kinds = slot_kinds(full);
    for (int pos = full.target_start; pos < full.length(); ++pos) {
        UnifiedSequence prefix = full;
        prefix.ids.resize(pos + 1);
        prefix.modality.resize(pos + 1);
        prefix.coords.resize(pos + 1);
        const auto logits = model->forward(collate({prefix}, model->vocab()))[0][pos];
        const auto [lo, hi] = model->vocab().range(kinds[pos - full.target_start]);
        full.ids[pos] = choose_token(logits, lo, hi, cfg, rng);
    }
    return full;
}

UnifiedSequence v2m_sequence(const PairTokens& p, const VocabLayout& vocab, const TokenShapes& shapes) {
    return build_v2m_sequence(vocab, shapes, p.video_units, p.motion_units);
}

UnifiedSequence i2vm_sequence(const PairTokens& p, const VocabLayout& vocab, const TokenShapes& shapes) {
    return build_i2vm_sequence(vocab, shapes, p.image, p.video_units, p.motion_units);
}

void ARTrainConfig::validate() const {
    if (steps < 0 || batch < 2 || learning_rate <= 0.0 || warmup < 0 || weight_decay < 0.0 || log_every < 1)
        throw std::invalid_argument("ar training: steps/batch/learning_rate/warmup/weight_decay/log_every out of range");
}

nlohmann::json ARTrainConfig::to_json() const {
    return {{"steps", steps},   {"batch", batch},     {"learning_rate", learning_rate},
            {"warmup", warmup}, {"weight_decay", weight_decay}, {"log_every", log_every}};
}

ARTrainConfig ARTrainConfig::from_json(const nlohmann::json& j) {
    constexpr const char* where = "ar.train";
    reject_unknown_keys(j, {"steps", "batch", "learning_rate", "warmup", "weight_decay", "log_every"}, where);
    ARTrainConfig c;
    read_field(j, "steps", c.steps, where);
    read_field(j, "batch", c.batch, where);
    read_field(j, "learning_rate", c.learning_rate, where);
    read_field(j, "warmup", c.warmup, where);
    read_field(j, "weight_decay", c.weight_decay, where);
    read_field(j, "log_every", c.log_every, where);
    c.validate();
    return c;
}

ARTrainResult train_ar(const std::vector<PairTokens>& pairs, const ARConfig& cfg, const VocabLayout& vocab,
                       const TokenShapes& shapes, const ARTrainConfig& train, std::uint64_t seed,
                       const TrainLogger& logger) {
    cfg.validate();
    vocab.validate();
    shapes.validate();
    train.validate();
    if (pairs.empty()) throw std::invalid_argument("train_ar: empty dataset");
    std::vector<UnifiedSequence> v2m, i2vm;
    for (const auto& p : pairs) {
        if (p.motion_units.empty()) throw std::invalid_argument("train_ar: pair without motion units");
        v2m.push_back(v2m_sequence(p, vocab, shapes));
        i2vm.push_back(i2vm_sequence(p, vocab, shapes));
        if (std::max(v2m.back().length(), i2vm.back().length()) > cfg.max_length)
            throw std::invalid_argument("train_ar: sequence longer than max_length");
    }

    torch::manual_seed(seed);
    std::mt19937_64 rng(seed);
    ARTrainResult result;
    result.model = ARTransformer(cfg, vocab);
    auto& model = result.model;
    model->train();
    torch::optim::AdamW opt(model->parameters(),
                            torch::optim::AdamWOptions(train.learning_rate).weight_decay(train.weight_decay));
    std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);

    double sum_loss = 0.0, sum_v2m = 0.0, sum_i2vm = 0.0;
    int window = 0, n_v2m = 0, n_i2vm = 0;
    for (int step = 0; step < train.steps; ++step) {
        // Half of each batch per task; an odd extra slot alternates between them.
        const int extra = train.batch % 2 == 1 ? (step % 2 == 0 ? 1 : 0) : 0;
        const int count_v2m = train.batch / 2 + extra;
        std::vector<UnifiedSequence> seqs;
        for (int b = 0; b < train.batch; ++b) seqs.push_back(b < count_v2m ? v2m[pick(rng)] : i2vm[pick(rng)]);
        const auto batch = collate(seqs, vocab);
        const auto logits = model->forward(batch);
        const auto per_seq = ar_loss_per_sequence(logits, batch);
        const auto loss = ar_loss(logits, batch);

        const double value = loss.item<double>();
        if (!std::isfinite(value))
            throw std::runtime_error("train_ar: loss became non-finite at step " + std::to_string(step));
        opt.zero_grad();
        loss.backward();
        torch::nn::utils::clip_grad_norm_(model->parameters(), 1.0);
        const double warm = train.warmup > 0 ? std::min(1.0, (step + 1.0) / train.warmup) : 1.0;
        const double progress = static_cast<double>(step) / std::max(1, train.steps);
        const double lr = train.learning_rate * warm * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
        for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
        opt.step();

        result.loss_curve.push_back(static_cast<float>(value));
        const auto ps = per_seq.detach().to(torch::kFloat64);
        for (int b = 0; b < train.batch; ++b) {
            const double l = ps[b].item<double>();
            if (b < count_v2m) {
                sum_v2m += l;
                ++n_v2m;
            } else {
                sum_i2vm += l;
                ++n_i2vm;
            }
        }
        sum_loss += value;
        ++window;
        if ((step + 1) % train.log_every == 0 || step + 1 == train.steps) {
            nlohmann::json entry = {{"step", step + 1},
                                    {"loss", sum_loss / window},
                                    {"v2m_loss", n_v2m ? sum_v2m / n_v2m : 0.0},
                                    {"i2vm_loss", n_i2vm ? sum_i2vm / n_i2vm : 0.0},
                                    {"v2m_sequences", n_v2m},
                                    {"i2vm_sequences", n_i2vm},
                                    {"learning_rate", lr}};
            result.log.push_back(entry);
            if (logger) logger(entry);
            sum_loss = sum_v2m = sum_i2vm = 0.0;
            window = n_v2m = n_i2vm = 0;
        }
    }
    model->eval();
    return result;
}

void save_ar(ARTransformer& model, const TokenShapes& shapes, const std::filesystem::path& path,
             const nlohmann::json& meta) {
    Archive a;
    a.meta = meta.is_object() ? meta : nlohmann::json::object();
    a.meta["kind"] = "ar_model";
    a.meta["config"] = model->config().to_json();
    a.meta["vocab"] = model->vocab().to_json();
    a.meta["token_shapes"] = shapes.to_json();
    store_module(a, *model);
    a.save(path);
}

ARTransformer load_ar(const std::filesystem::path& path, TokenShapes* shapes, nlohmann::json* meta) {
    const Archive a = Archive::load(path);
    if (a.meta.value("kind", "") != "ar_model") throw FormatError("load_ar: not an AR model checkpoint");
    ARTransformer model(ARConfig::from_json(a.meta.at("config")), VocabLayout::from_json(a.meta.at("vocab")));
    restore_module(a, *model);
    model->eval();
    if (shapes) *shapes = TokenShapes::from_json(a.meta.at("token_shapes"));
    if (meta) *meta = a.meta;
    return model;
}

}  // namespace hvm

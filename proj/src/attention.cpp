#include "graftor/attention.hpp"

#include <cmath>
#include <sstream>
#include <string>

#include "graftor/errors.hpp"
#include "graftor/rng.hpp"

namespace graftor {

namespace {

using Index = Eigen::Index;

Index idx(std::size_t v) { return static_cast<Index>(v); }

void rotate(Matrix& x, const PhaseRows& phases, std::size_t heads, std::size_t head_dim, double sign) {
    if (x.rows() != idx(phases.size())) {
        throw ShapeError("rope: " + std::to_string(x.rows()) + " rows but " + std::to_string(phases.size()) +
                         " phase rows");
    }
    if (x.cols() != idx(heads * head_dim)) throw ShapeError("rope: width is not heads * head_dim");
    const std::size_t quarter = head_dim / 4;
    const std::size_t half = head_dim / 2;
    for (Index r = 0; r < x.rows(); ++r) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t axis = 0; axis < 2; ++axis) {
                for (std::size_t j = 0; j < quarter; ++j) {
                    const Index p = idx(axis * quarter + j);
                    const double c = phases.cos(r, p);
                    const double s = sign * phases.sin(r, p);
                    const Index i1 = idx(h * head_dim + axis * half + j);
                    const Index i2 = i1 + idx(quarter);
                    const double a = x(r, i1);
                    const double b = x(r, i2);
                    x(r, i1) = a * c - b * s;
                    x(r, i2) = b * c + a * s;
                }
            }
        }
    }
}

PhaseRows phases_for(const std::vector<double>& freqs, const std::vector<PatchCoord>& coords) {
    const std::size_t quarter = freqs.size();
    PhaseRows out;
    out.pairs = 2 * quarter;
    out.cos.resize(idx(coords.size()), idx(out.pairs));
    out.sin.resize(idx(coords.size()), idx(out.pairs));
    for (std::size_t r = 0; r < coords.size(); ++r) {
        for (std::size_t j = 0; j < quarter; ++j) {
            const double row_angle = static_cast<double>(coords[r].row) * freqs[j];
            const double col_angle = static_cast<double>(coords[r].col) * freqs[j];
            out.cos(idx(r), idx(j)) = std::cos(row_angle);
            out.sin(idx(r), idx(j)) = std::sin(row_angle);
            out.cos(idx(r), idx(quarter + j)) = std::cos(col_angle);
            out.sin(idx(r), idx(quarter + j)) = std::sin(col_angle);
        }
    }
    return out;
}

void check_sequence_against_rope(const TokenSequence& seq, const RoPETable& rope) {
    seq.validate();
    if (seq.n_txt != rope.n_txt || seq.n_img != rope.grid.size() || seq.head_dim != rope.head_dim) {
        throw ShapeError("token sequence does not match the rotary table layout");
    }
}

Matrix rotated(const Matrix& x, const PhaseRows& phases, std::size_t heads, std::size_t head_dim) {
    Matrix out = x;
    apply_rope(out, phases, heads, head_dim);
    return out;
}

Matrix attend(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, std::size_t head_dim) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    Matrix out(q.rows(), q.cols());
    for (std::size_t h = 0; h < heads; ++h) {
        const Index c0 = idx(h * head_dim);
        const Index hd = idx(head_dim);
        const Matrix logits = (q.middleCols(c0, hd) * k.middleCols(c0, hd).transpose()) * scale;
        out.middleCols(c0, hd).noalias() = softmax_rows(logits) * v.middleCols(c0, hd);
    }
    return out;
}

}  // namespace

// --- rotary table -------------------------------------------------------------

RoPETable build_rope(std::size_t rows, std::size_t cols, std::size_t n_txt, std::size_t head_dim) {
    if (head_dim == 0 || head_dim % 4 != 0) {
        throw ConfigError("rope head_dim " + std::to_string(head_dim) + " is not a positive multiple of 4");
    }
    RoPETable t;
    t.grid = {rows, cols};
    t.n_txt = n_txt;
    t.head_dim = head_dim;
    const std::size_t quarter = head_dim / 4;
    for (std::size_t j = 0; j < quarter; ++j) {
        const double e = quarter == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(quarter - 1);
        t.freqs.push_back(2.0 * std::pow(4.0, -e));
    }
    std::vector<PatchCoord> coords(n_txt, t.text_coord());
    for (std::size_t i = 0; i < rows * cols; ++i) coords.push_back(index_to_coord(i, t.grid));
    t.phases = phases_for(t.freqs, coords);
    return t;
}

PhaseRows RoPETable::coord_phases(const std::vector<PatchCoord>& coords) const { return phases_for(freqs, coords); }

void apply_rope(Matrix& x, const PhaseRows& phases, std::size_t heads, std::size_t head_dim) {
    rotate(x, phases, heads, head_dim, 1.0);
}

void apply_rope_inverse(Matrix& x, const PhaseRows& phases, std::size_t heads, std::size_t head_dim) {
    rotate(x, phases, heads, head_dim, -1.0);
}

// --- sequences and packets ----------------------------------------------------

void TokenSequence::validate() const {
    const Index n = idx(size());
    const Index w = idx(heads * head_dim);
    if (q.rows() != n || k.rows() != n || v.rows() != n || q.cols() != w || k.cols() != w || v.cols() != w) {
        throw ShapeError("token sequence Q/K/V shapes disagree with (tokens, heads, head_dim)");
    }
}

GraftPacket make_packet(std::size_t block, double t, const Matrix& ref_keys, const Matrix& ref_values,
                        const BinaryMask& mask, const std::vector<PatchCoord>& coords_by_ref) {
    if (ref_keys.rows() != idx(mask.size()) || ref_values.rows() != idx(mask.size()) ||
        coords_by_ref.size() != mask.size()) {
        throw ShapeError("packet sources disagree with the mask size");
    }
    GraftPacket p;
    p.block = block;
    p.t = t;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) p.ref_index.push_back(i);
    }
    p.keys.resize(idx(p.ref_index.size()), ref_keys.cols());
    p.values.resize(idx(p.ref_index.size()), ref_values.cols());
    for (std::size_t r = 0; r < p.ref_index.size(); ++r) {
        p.keys.row(idx(r)) = ref_keys.row(idx(p.ref_index[r]));
        p.values.row(idx(r)) = ref_values.row(idx(p.ref_index[r]));
        p.coords.push_back(coords_by_ref[p.ref_index[r]]);
    }
    return p;
}

GraftPacket merge_packets(const GraftPacket& a, const GraftPacket& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    if (a.keys.cols() != b.keys.cols() || a.values.cols() != b.values.cols()) throw ShapeError("packet widths differ");
    GraftPacket out = a;
    out.ref_index.insert(out.ref_index.end(), b.ref_index.begin(), b.ref_index.end());
    out.coords.insert(out.coords.end(), b.coords.begin(), b.coords.end());
    out.keys.conservativeResize(a.keys.rows() + b.keys.rows(), Eigen::NoChange);
    out.keys.bottomRows(b.keys.rows()) = b.keys;
    out.values.conservativeResize(a.values.rows() + b.values.rows(), Eigen::NoChange);
    out.values.bottomRows(b.values.rows()) = b.values;
    return out;
}

KeyValue concat_kv(const TokenSequence& seq, const GraftPacket& packet) {
    seq.validate();
    if (packet.empty()) return {seq.k, seq.v};
    if (packet.keys.cols() != seq.k.cols() || packet.values.cols() != seq.v.cols() ||
        packet.keys.rows() != idx(packet.size()) || packet.values.rows() != idx(packet.size())) {
        throw ShapeError("packet K/V width does not match the token sequence");
    }
    KeyValue kv;
    kv.k.resize(seq.k.rows() + packet.keys.rows(), seq.k.cols());
    kv.k << seq.k, packet.keys;
    kv.v.resize(seq.v.rows() + packet.values.rows(), seq.v.cols());
    kv.v << seq.v, packet.values;
    return kv;
}

PhaseRows concat_pe(const RoPETable& rope, const GraftPacket& packet) {
    PhaseRows out = rope.phases;
    if (packet.empty()) return out;
    const Index base = out.cos.rows();
    out.cos.conservativeResize(base + idx(packet.size()), Eigen::NoChange);
    out.sin.conservativeResize(base + idx(packet.size()), Eigen::NoChange);
    for (std::size_t r = 0; r < packet.size(); ++r) {
        const Index src = idx(rope.n_txt + patch_index(packet.coords[r], rope.grid));
        out.cos.row(base + idx(r)) = rope.phases.cos.row(src);
        out.sin.row(base + idx(r)) = rope.phases.sin.row(src);
    }
    return out;
}

// --- attention ----------------------------------------------------------------

Matrix softmax_rows(const Matrix& logits) {
    if (!logits.allFinite()) throw NumericalError("attention logits contain non-finite values");
    Matrix a(logits.rows(), logits.cols());
    for (Index r = 0; r < logits.rows(); ++r) {
        const double m = logits.row(r).maxCoeff();
        a.row(r) = (logits.row(r).array() - m).exp().matrix();
        a.row(r) /= a.row(r).sum();
    }
    return a;
}

std::vector<Matrix> attention_logits(const TokenSequence& seq, const RoPETable& rope, const GraftPacket& packet) {
    check_sequence_against_rope(seq, rope);
    const Matrix q = rotated(seq.q, rope.phases, seq.heads, seq.head_dim);
    const KeyValue kv = concat_kv(seq, packet);
    const Matrix k = rotated(kv.k, concat_pe(rope, packet), seq.heads, seq.head_dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(seq.head_dim));
    std::vector<Matrix> out;
    for (std::size_t h = 0; h < seq.heads; ++h) {
        const Index c0 = idx(h * seq.head_dim);
        const Index hd = idx(seq.head_dim);
        out.push_back((q.middleCols(c0, hd) * k.middleCols(c0, hd).transpose()) * scale);
    }
    return out;
}

Matrix grafted_attention(const TokenSequence& seq, const RoPETable& rope, const GraftPacket& packet) {
    check_sequence_against_rope(seq, rope);
    const Matrix q = rotated(seq.q, rope.phases, seq.heads, seq.head_dim);
    const KeyValue kv = concat_kv(seq, packet);
    const Matrix k = rotated(kv.k, concat_pe(rope, packet), seq.heads, seq.head_dim);
    return attend(q, k, kv.v, seq.heads, seq.head_dim);
}

Matrix baseline_attention(const TokenSequence& seq, const RoPETable& rope) {
    check_sequence_against_rope(seq, rope);
    const Matrix q = rotated(seq.q, rope.phases, seq.heads, seq.head_dim);
    const Matrix k = rotated(seq.k, rope.phases, seq.heads, seq.head_dim);
    return attend(q, k, seq.v, seq.heads, seq.head_dim);
}

// --- direct replacement -------------------------------------------------------

Matrix replace_features(const Matrix& gen, const Matrix& ref, const Matching& matching, const BinaryMask& mask) {
    if (mask.size() != static_cast<std::size_t>(ref.rows()) || mask.size() != matching.forward.size()) {
        throw ShapeError("replace_features: mask, matching and reference disagree in size");
    }
    if (gen.cols() != ref.cols()) throw ShapeError("replace_features: feature widths differ");
    Matrix out = gen;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        const std::size_t j = matching.forward[i];
        if (j >= static_cast<std::size_t>(gen.rows())) throw BoundsError("replace_features: match outside generated grid");
        out.row(idx(j)) = ref.row(idx(i));
    }
    return out;
}

FeatureGrid replace_features(const FeatureGrid& gen, const FeatureGrid& ref, const Matching& matching,
                             const BinaryMask& mask) {
    if (gen.dim() != ref.dim()) throw ShapeError("replace_features: feature dims differ");
    if (mask.shape() != ref.shape() || mask.size() != matching.forward.size()) {
        throw ShapeError("replace_features: mask, matching and reference disagree in shape");
    }
    FeatureGrid out = gen;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        const std::size_t j = matching.forward[i];
        if (j >= gen.tokens()) throw BoundsError("replace_features: match outside generated grid");
        auto src = ref.token(i);
        std::copy(src.begin(), src.end(), out.token(j).begin());
    }
    return out;
}

// --- toy model ----------------------------------------------------------------

Matrix seeded_orthonormal(std::size_t n, std::size_t m, std::uint64_t seed) {
    if (m > n) throw ConfigError("orthonormal block wider than tall");
    Rng rng(seed);
    Matrix g(idx(n), idx(n));
    for (Index r = 0; r < g.rows(); ++r) {
        for (Index c = 0; c < g.cols(); ++c) g(r, c) = rng.normal();
    }
    const Eigen::HouseholderQR<Matrix> qr(g);
    const Matrix q = qr.householderQ() * Matrix::Identity(idx(n), idx(m));
    return q;
}

Matrix rms_norm_heads(const Matrix& x, std::size_t heads, std::size_t head_dim, double gain) {
    Matrix out = x;
    for (Index r = 0; r < x.rows(); ++r) {
        for (std::size_t h = 0; h < heads; ++h) {
            auto seg = out.row(r).segment(idx(h * head_dim), idx(head_dim));
            const double ms = seg.squaredNorm() / static_cast<double>(head_dim);
            if (ms == 0.0) continue;
            seg *= gain / std::sqrt(ms);
        }
    }
    return out;
}

ToyModel::ToyModel(ModelConfig config, GridShape grid)
    : config_(config), grid_(grid), rope_(build_rope(grid.rows, grid.cols, config.n_txt, config.head_dim)) {
    if (config_.heads == 0 || config_.blocks == 0) throw ConfigError("model needs at least one head and one block");
    if (config_.width() < kTokenDim) throw ConfigError("model width below the latent token size");
    embed_ = seeded_orthonormal(config_.width(), kTokenDim, hash_words({config_.seed, 0xE}));
    for (std::size_t b = 0; b < config_.blocks; ++b) {
        blocks_.push_back({seeded_orthonormal(config_.width(), config_.width(), hash_words({config_.seed, 0x51, b})),
                           seeded_orthonormal(config_.width(), config_.width(), hash_words({config_.seed, 0x56, b}))});
    }
}

Matrix ToyModel::embed(const Matrix& latent) const {
    if (latent.cols() != idx(kTokenDim)) throw ShapeError("latent rows must have 12 values");
    return latent * embed_.transpose();
}

Matrix ToyModel::unembed(const Matrix& features) const { return features * embed_; }

TokenSequence ToyModel::project(std::size_t b, const Matrix& text, const Matrix& image) const {
    const BlockWeights& w = blocks_.at(b);
    Matrix joint(text.rows() + image.rows(), idx(config_.width()));
    joint << text, image;
    TokenSequence seq;
    seq.n_txt = static_cast<std::size_t>(text.rows());
    seq.n_img = static_cast<std::size_t>(image.rows());
    seq.heads = config_.heads;
    seq.head_dim = config_.head_dim;
    seq.q = rms_norm_heads(joint * w.w_qk, config_.heads, config_.head_dim, config_.qk_gain);
    seq.k = seq.q;
    seq.v = joint * w.w_v;
    return seq;
}

Matrix toy_mmdit_block(const ToyModel& model, std::size_t b, const Matrix& text, const Matrix& image,
                       const BlockHook& hook) {
    const ModelConfig& cfg = model.config();
    if (text.rows() != idx(cfg.n_txt) || text.cols() != idx(cfg.width())) throw ShapeError("text tokens must be n_txt x D");
    if (image.rows() != idx(model.grid().size()) || image.cols() != idx(cfg.width())) {
        throw ShapeError("image tokens must be (rows*cols) x D");
    }
    Matrix input = image;
    TokenSequence seq = model.project(b, text, input);
    GraftPacket packet;
    if (hook) {
        const Index n_txt = idx(cfg.n_txt);
        const Matrix keys = seq.k.bottomRows(seq.k.rows() - n_txt);
        const Matrix values = seq.v.bottomRows(seq.v.rows() - n_txt);
        BlockIntervention iv = hook(BlockView{b, input, keys, values});
        if (iv.features) {
            if (iv.features->rows() != input.rows() || iv.features->cols() != input.cols()) {
                throw ShapeError("hook returned replacement features of the wrong shape");
            }
            input = std::move(*iv.features);
            seq = model.project(b, text, input);
        }
        if (iv.packet) packet = std::move(*iv.packet);
    }
    const Matrix out = packet.empty() ? baseline_attention(seq, model.rope()) : grafted_attention(seq, model.rope(), packet);
    const Matrix delta = (out - seq.v) * model.block(b).w_v.transpose();
    return input + cfg.gamma * delta.bottomRows(input.rows());
}

Matrix ToyModel::forward(const Matrix& latent, const Matrix& text, const BlockHook& hook) const {
    Matrix h = embed(latent);
    for (std::size_t b = 0; b < config_.blocks; ++b) h = toy_mmdit_block(*this, b, text, h, hook);
    return unembed(h);
}

Matrix ToyModel::text_embedding(const std::vector<std::uint32_t>& token_ids) const {
    Matrix t = Matrix::Zero(idx(config_.n_txt), idx(config_.width()));
    for (std::size_t p = 0; p < config_.n_txt && p < token_ids.size(); ++p) {
        if (token_ids[p] == 0) continue;
        Rng rng(hash_words({config_.seed, 0x7E47, token_ids[p]}));
        for (Index d = 0; d < t.cols(); ++d) t(idx(p), d) = rng.normal();
    }
    return t;
}

std::vector<std::uint32_t> tokenize_prompt(const std::string& prompt) {
    std::vector<std::uint32_t> ids;
    std::istringstream in(prompt);
    std::string word;
    while (in >> word) {
        std::uint64_t h = 0xCBF29CE484222325ull;
        for (unsigned char ch : word) h = (h ^ ch) * 0x100000001B3ull;
        ids.push_back(static_cast<std::uint32_t>(h % 0x7FFFFFFFull) + 1u);
    }
    return ids;
}

}  // namespace graftor

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "graftor/grid.hpp"
#include "graftor/match.hpp"

namespace graftor {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-row rotary phases: cos/sin of every (row, pair) angle.
struct PhaseRows {
    std::size_t pairs = 0;
    Matrix cos;
    Matrix sin;

    std::size_t size() const noexcept { return static_cast<std::size_t>(cos.rows()); }
};

/// Axial 2D rotary table. The first half of each head's dims rotates with the patch
/// row, the second half with the patch column. Pair j of an axis with base b covers
/// dims (b + j, b + head_dim/4 + j) and has frequency 2 * 4^(-j/(head_dim/4 - 1)).
/// Rows are ordered [text tokens; image tokens in row-major order].
struct RoPETable {
    GridShape grid;
    std::size_t n_txt = 0;
    std::size_t head_dim = 0;
    std::vector<double> freqs;
    PhaseRows phases;

    /// Phases of an arbitrary patch coordinate.
    PhaseRows coord_phases(const std::vector<PatchCoord>& coords) const;
    PatchCoord text_coord() const noexcept { return {0, 0}; }
};

RoPETable build_rope(std::size_t rows, std::size_t cols, std::size_t n_txt, std::size_t head_dim);

/// Rotates every head of every row in place. x is rows x (heads * head_dim).
void apply_rope(Matrix& x, const PhaseRows& phases, std::size_t heads, std::size_t head_dim);
/// Inverse rotation (negated angles).
void apply_rope_inverse(Matrix& x, const PhaseRows& phases, std::size_t heads, std::size_t head_dim);

/// Joint text+image token sequence before rotary embedding. Q, K and V are
/// (n_txt + n_img) x (heads * head_dim).
struct TokenSequence {
    std::size_t n_txt = 0;
    std::size_t n_img = 0;
    std::size_t heads = 0;
    std::size_t head_dim = 0;
    Matrix q;
    Matrix k;
    Matrix v;

    std::size_t size() const noexcept { return n_txt + n_img; }
    void validate() const;
};

/// Reference keys/values retained for one (timestep, block), in ascending
/// reference index, with the generated-grid coordinate that lends each row its PE.
struct GraftPacket {
    std::size_t block = 0;
    double t = 0.0;
    std::vector<std::size_t> ref_index;
    std::vector<PatchCoord> coords;
    Matrix keys;
    Matrix values;

    std::size_t size() const noexcept { return coords.size(); }
    bool empty() const noexcept { return coords.empty(); }
};

/// Rows `mask` selects from reference K/V (ref_index ascending), with PE coordinates `coords`.
GraftPacket make_packet(std::size_t block, double t, const Matrix& ref_keys, const Matrix& ref_values,
                        const BinaryMask& mask, const std::vector<PatchCoord>& coords_by_ref);
/// Appends the rows of `b` to `a`.
GraftPacket merge_packets(const GraftPacket& a, const GraftPacket& b);

struct KeyValue {
    Matrix k;
    Matrix v;
};

KeyValue concat_kv(const TokenSequence& seq, const GraftPacket& packet);
PhaseRows concat_pe(const RoPETable& rope, const GraftPacket& packet);

/// Pre-softmax logits per head: rope(Q) rope_cat(K_cat)^T / sqrt(head_dim).
std::vector<Matrix> attention_logits(const TokenSequence& seq, const RoPETable& rope, const GraftPacket& packet);

/// Joint attention with grafted reference keys/values. Output has seq.size() rows.
Matrix grafted_attention(const TokenSequence& seq, const RoPETable& rope, const GraftPacket& packet);
/// Same attention without any packet support; reference implementation for equivalence checks.
Matrix baseline_attention(const TokenSequence& seq, const RoPETable& rope);

/// Row-wise softmax with max subtraction; throws NumericalError on non-finite input.
Matrix softmax_rows(const Matrix& logits);

/// Overwrites gen patch m(i) with ref patch i for every set bit i; ascending i, so later writers win.
FeatureGrid replace_features(const FeatureGrid& gen, const FeatureGrid& ref, const Matching& matching,
                             const BinaryMask& mask);
Matrix replace_features(const Matrix& gen, const Matrix& ref, const Matching& matching, const BinaryMask& mask);

// --- toy MM-DiT -------------------------------------------------------------

struct ModelConfig {
    std::size_t heads = 4;
    std::size_t head_dim = 16;
    std::size_t n_txt = 8;
    std::size_t blocks = 2;
    double qk_gain = 4.47213595499958;  // sqrt(20): logits are 80 * cos at head_dim 16
    double gamma = 1.0;
    std::uint64_t seed = 7;

    std::size_t width() const noexcept { return heads * head_dim; }
};

struct BlockWeights {
    Matrix w_qk;  // tied query/key projection
    Matrix w_v;
};

/// What a block exposes to a hook: its input image features and the
/// un-rotated image keys and values it is about to attend with.
struct BlockView {
    std::size_t block = 0;
    const Matrix& features;
    const Matrix& keys;
    const Matrix& values;
};

struct BlockIntervention {
    std::optional<GraftPacket> packet;
    /// Replacement block-input image features; projections are recomputed from them.
    std::optional<Matrix> features;
};

using BlockHook = std::function<BlockIntervention(const BlockView&)>;

/// Fixed seeded network. Image tokens are embedded by an orthonormal D x 12 map;
/// each block has a tied Q/K projection with per-head RMS normalization and a value projection.
class ToyModel {
public:
    ToyModel(ModelConfig config, GridShape grid);

    const ModelConfig& config() const noexcept { return config_; }
    GridShape grid() const noexcept { return grid_; }
    const RoPETable& rope() const noexcept { return rope_; }
    const Matrix& embedding() const noexcept { return embed_; }
    const BlockWeights& block(std::size_t b) const { return blocks_.at(b); }

    Matrix embed(const Matrix& latent) const;
    Matrix unembed(const Matrix& features) const;

    /// Q/K/V for a joint [text; image] feature stack.
    TokenSequence project(std::size_t b, const Matrix& text, const Matrix& image) const;

    /// Full stack on latent tokens (n_img x 12); returns the last block output decoded back to latent space.
    Matrix forward(const Matrix& latent, const Matrix& text, const BlockHook& hook = {}) const;

    /// Seeded prompt embedding, n_txt x D. Token id 0 is padding and maps to zeros.
    Matrix text_embedding(const std::vector<std::uint32_t>& token_ids) const;

private:
    ModelConfig config_;
    GridShape grid_;
    RoPETable rope_;
    Matrix embed_;
    std::vector<BlockWeights> blocks_;
};

/// One block: projections, optional grafting, residual update of the image tokens.
Matrix toy_mmdit_block(const ToyModel& model, std::size_t b, const Matrix& text, const Matrix& image,
                       const BlockHook& hook = {});

/// Per-head RMS normalization scaled by `gain`. Rows with zero energy stay zero.
Matrix rms_norm_heads(const Matrix& x, std::size_t heads, std::size_t head_dim, double gain);

/// Orthonormal n x m (m <= n) matrix from a seeded Gaussian via Householder QR.
Matrix seeded_orthonormal(std::size_t n, std::size_t m, std::uint64_t seed);

/// Hashes whitespace-separated words to token ids in [1, 2^31).
std::vector<std::uint32_t> tokenize_prompt(const std::string& prompt);

}  // namespace graftor

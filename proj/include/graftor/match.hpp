#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "graftor/grid.hpp"

namespace graftor {

inline constexpr std::size_t kNoMatch = std::numeric_limits<std::size_t>::max();
/// Similarity written into rows of reference patches outside the pre-mask.
inline constexpr double kMaskedSimilarity = -2.0;

/// n_ref x n_gen cosine similarities, row-major.
struct SimMatrix {
    std::size_t n_ref = 0;
    std::size_t n_gen = 0;
    std::vector<double> values;

    double at(std::size_t i, std::size_t j) const { return values[i * n_gen + j]; }
};

/// Per-reference-patch correspondence. Entries of patches outside `pre` hold
/// kNoMatch / kMaskedSimilarity / +inf.
struct Matching {
    GridShape ref_shape;
    GridShape gen_shape;
    BinaryMask pre;
    std::vector<std::size_t> forward;
    std::vector<double> best_sim;
    std::vector<std::size_t> reverse;
    std::vector<double> cycle_dist;

    bool has_reverse() const noexcept { return !reverse.empty(); }
};

struct DropoutSchedule {
    double omega = 0.5;
    std::uint64_t rng_seed = 0;
};

SimMatrix cosine_sim_matrix(const FeatureGrid& ref, const FeatureGrid& gen, const BinaryMask& pre_mask);

/// Row-wise argmax, ties to the smallest generated index.
Matching forward_match(const SimMatrix& sim, const BinaryMask& pre_mask, GridShape gen_shape);

BinaryMask similarity_filter(const Matching& matching, double tau);

/// Fills matching.reverse / matching.cycle_dist and returns the cycle-consistency mask.
/// The reverse argmax runs over reference patches inside the pre-mask only.
BinaryMask cycle_consistency_filter(const SimMatrix& sim, Matching& matching, double delta);
BinaryMask cycle_consistency_filter(const FeatureGrid& ref, const FeatureGrid& gen, Matching& matching,
                                    const BinaryMask& pre_mask, double delta);

BinaryMask final_ref_mask(const BinaryMask& pre, const BinaryMask& sim, const BinaryMask& consi);

/// Each bit is kept with probability 1 - omega*t. Same (seed, t, shape) gives the same mask.
BinaryMask dropout_mask(GridShape shape, const DropoutSchedule& schedule, double t);
BinaryMask apply_dropout(const BinaryMask& m_ref, const BinaryMask& m_drop);

struct MatchResult {
    Matching matching;
    BinaryMask sim_mask;
    BinaryMask consi_mask;
    BinaryMask final_mask;
};

/// Similarity, argmax, both filters and the final mask in one call.
MatchResult semantic_match(const FeatureGrid& ref, const FeatureGrid& gen, const BinaryMask& pre_mask, double tau,
                           double delta);

}  // namespace graftor

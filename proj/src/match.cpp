#include "graftor/match.hpp"

#include <Eigen/Dense>
#include <bit>
#include <cmath>
#include <string>

#include "graftor/errors.hpp"
#include "graftor/rng.hpp"

namespace graftor {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMatrix normalized_rows(const FeatureGrid& grid, const BinaryMask* mask, const char* which) {
    RowMatrix out(grid.tokens(), grid.dim());
    for (std::size_t i = 0; i < grid.tokens(); ++i) {
        auto tok = grid.token(i);
        double norm2 = 0.0;
        for (std::size_t d = 0; d < grid.dim(); ++d) {
            out(i, d) = tok[d];
            norm2 += static_cast<double>(tok[d]) * tok[d];
        }
        const bool needed = mask == nullptr || (*mask)[i];
        if (!needed) {
            out.row(i).setZero();
            continue;
        }
        if (norm2 == 0.0) throw DegenerateFeatureError(std::string(which) + " patch " + std::to_string(i) + " has zero norm");
        out.row(i) /= std::sqrt(norm2);
    }
    return out;
}

}  // namespace

SimMatrix cosine_sim_matrix(const FeatureGrid& ref, const FeatureGrid& gen, const BinaryMask& pre_mask) {
    if (ref.dim() != gen.dim()) {
        throw ShapeError("feature dims differ: ref " + std::to_string(ref.dim()) + ", gen " + std::to_string(gen.dim()));
    }
    if (pre_mask.shape() != ref.shape()) throw ShapeError("pre-mask shape does not match the reference grid");
    const RowMatrix a = normalized_rows(ref, &pre_mask, "reference");
    const RowMatrix g = normalized_rows(gen, nullptr, "generated");

    SimMatrix sim{ref.tokens(), gen.tokens(), std::vector<double>(ref.tokens() * gen.tokens(), kMaskedSimilarity)};
    Eigen::Map<RowMatrix> values(sim.values.data(), static_cast<Eigen::Index>(sim.n_ref),
                                 static_cast<Eigen::Index>(sim.n_gen));
    values.noalias() = a * g.transpose();
    for (std::size_t i = 0; i < sim.n_ref; ++i) {
        if (!pre_mask[i]) values.row(static_cast<Eigen::Index>(i)).setConstant(kMaskedSimilarity);
    }
    return sim;
}

Matching forward_match(const SimMatrix& sim, const BinaryMask& pre_mask, GridShape gen_shape) {
    if (pre_mask.size() != sim.n_ref) throw ShapeError("pre-mask size does not match similarity rows");
    if (gen_shape.size() != sim.n_gen) throw ShapeError("generated grid shape does not match similarity columns");
    Matching m;
    m.ref_shape = pre_mask.shape();
    m.gen_shape = gen_shape;
    m.pre = pre_mask;
    m.forward.assign(sim.n_ref, kNoMatch);
    m.best_sim.assign(sim.n_ref, kMaskedSimilarity);
    for (std::size_t i = 0; i < sim.n_ref; ++i) {
        if (!pre_mask[i] || sim.n_gen == 0) continue;
        const double* row = sim.values.data() + i * sim.n_gen;
        std::size_t best = 0;
        for (std::size_t j = 1; j < sim.n_gen; ++j) {
            if (row[j] > row[best]) best = j;
        }
        m.forward[i] = best;
        m.best_sim[i] = row[best];
    }
    return m;
}

BinaryMask similarity_filter(const Matching& matching, double tau) {
    BinaryMask out(matching.ref_shape.rows, matching.ref_shape.cols);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.set(i, matching.pre[i] && matching.best_sim[i] >= tau);
    }
    return out;
}

BinaryMask cycle_consistency_filter(const SimMatrix& sim, Matching& matching, double delta) {
    const GridShape rs = matching.ref_shape;
    matching.reverse.assign(sim.n_ref, kNoMatch);
    matching.cycle_dist.assign(sim.n_ref, std::numeric_limits<double>::infinity());
    BinaryMask out(rs.rows, rs.cols);
    for (std::size_t i = 0; i < sim.n_ref; ++i) {
        if (!matching.pre[i]) continue;
        const std::size_t j = matching.forward[i];
        std::size_t back = kNoMatch;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < sim.n_ref; ++k) {
            if (!matching.pre[k]) continue;
            const double s = sim.at(k, j);
            if (s > best) {
                best = s;
                back = k;
            }
        }
        matching.reverse[i] = back;
        matching.cycle_dist[i] = coord_distance(index_to_coord(i, rs), index_to_coord(back, rs));
        out.set(i, matching.cycle_dist[i] <= delta);
    }
    return out;
}

BinaryMask cycle_consistency_filter(const FeatureGrid& ref, const FeatureGrid& gen, Matching& matching,
                                    const BinaryMask& pre_mask, double delta) {
    const SimMatrix sim = cosine_sim_matrix(ref, gen, pre_mask);
    matching.pre = pre_mask;
    return cycle_consistency_filter(sim, matching, delta);
}

BinaryMask final_ref_mask(const BinaryMask& pre, const BinaryMask& sim, const BinaryMask& consi) {
    return mask_and(mask_and(pre, sim), consi);
}

BinaryMask dropout_mask(GridShape shape, const DropoutSchedule& schedule, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("dropout timestep " + std::to_string(t) + " outside [0,1]");
    if (!(schedule.omega >= 0.0 && schedule.omega <= 1.0)) {
        throw DomainError("dropout intensity " + std::to_string(schedule.omega) + " outside [0,1]");
    }
    const double p_drop = schedule.omega * t;
    Rng rng(hash_words({schedule.rng_seed, std::bit_cast<std::uint64_t>(t), shape.rows, shape.cols}));
    BinaryMask out(shape.rows, shape.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.set(i, rng.uniform() >= p_drop);
    return out;
}

BinaryMask apply_dropout(const BinaryMask& m_ref, const BinaryMask& m_drop) { return mask_and(m_ref, m_drop); }

MatchResult semantic_match(const FeatureGrid& ref, const FeatureGrid& gen, const BinaryMask& pre_mask, double tau,
                           double delta) {
    const SimMatrix sim = cosine_sim_matrix(ref, gen, pre_mask);
    MatchResult r;
    r.matching = forward_match(sim, pre_mask, gen.shape());
    r.sim_mask = similarity_filter(r.matching, tau);
    r.consi_mask = cycle_consistency_filter(sim, r.matching, delta);
    r.final_mask = final_ref_mask(pre_mask, r.sim_mask, r.consi_mask);
    return r;
}

}  // namespace graftor

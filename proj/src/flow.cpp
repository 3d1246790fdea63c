#include "graftor/flow.hpp"

#include <atomic>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "graftor/errors.hpp"
#include "graftor/io.hpp"

namespace graftor {

namespace {

std::atomic<std::size_t> g_inversions{0};

FeatureGrid to_grid(const Matrix& m, GridShape grid) {
    std::vector<float> data(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            data[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
        }
    }
    return {grid.rows, grid.cols, static_cast<std::size_t>(m.cols()), std::move(data)};
}

void check_condition(const ToyModel& model, const FlowState& state, const Condition& cond) {
    if (cond.prior_mean.rows() != state.latent.rows() || cond.prior_mean.cols() != state.latent.cols()) {
        throw ShapeError("condition prior mean does not match the latent shape");
    }
    if (cond.text.rows() != static_cast<Eigen::Index>(model.config().n_txt)) throw ShapeError("condition text rows != n_txt");
    if (!(cond.prior_sigma > 0.0)) throw DomainError("prior sigma must be positive");
}

void check_steps(std::size_t steps) {
    if (steps == 0) throw ConfigError("flow needs at least one step");
}

FlowState advance(const FlowState& state, double dt, StepperKind stepper, const VelocityFn& fn) {
    if (stepper == StepperKind::Euler) return step_euler(state, fn(state.latent, state.t), dt);
    return step_midpoint(state, fn, dt);
}

}  // namespace

StepperKind parse_stepper(const std::string& name) {
    if (name == "euler") return StepperKind::Euler;
    if (name == "midpoint") return StepperKind::Midpoint;
    throw ConfigError("unknown stepper '" + name + "' (expected euler or midpoint)");
}

std::string to_string(StepperKind kind) { return kind == StepperKind::Euler ? "euler" : "midpoint"; }

void FlowState::validate() const {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("flow time outside [0,1]");
    if (latent.rows() != static_cast<Eigen::Index>(grid.size())) throw ShapeError("latent rows do not match grid");
    if (!latent.allFinite()) throw NumericalError("latent contains non-finite values");
}

FlowState state_from_grid(const FeatureGrid& latent, double t) {
    FlowState s{latent.shape(), Matrix(static_cast<Eigen::Index>(latent.tokens()), static_cast<Eigen::Index>(latent.dim())), t};
    for (std::size_t i = 0; i < latent.tokens(); ++i) {
        auto tok = latent.token(i);
        for (std::size_t d = 0; d < latent.dim(); ++d) {
            s.latent(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = tok[d];
        }
    }
    s.validate();
    return s;
}

FeatureGrid state_to_grid(const FlowState& state) { return to_grid(state.latent, state.grid); }

double gaussian_flow_gain(double t, double sigma) {
    const double s2 = sigma * sigma;
    return (t - (1.0 - t) * s2) / ((1.0 - t) * (1.0 - t) * s2 + t * t);
}

Matrix velocity(const ToyModel& model, const FlowState& state, const Condition& cond, const FlowParams& params,
                const BlockHook& hook) {
    check_condition(model, state, cond);
    const Matrix& x = state.latent;
    const double a = gaussian_flow_gain(state.t, cond.prior_sigma);
    Matrix v = a * (x - (1.0 - state.t) * cond.prior_mean) - cond.prior_mean;
    if (params.kappa != 0.0) {
        const Matrix recon = model.forward(x, cond.text, hook);
        v -= params.kappa * (recon - x);
    }
    if (!v.allFinite()) throw NumericalError("velocity is non-finite at t=" + std::to_string(state.t));
    return v;
}

FlowState step_euler(const FlowState& state, const Matrix& v, double dt) {
    if (std::abs(dt) > 1.0) throw DomainError("step size |dt| exceeds 1");
    FlowState next = state;
    next.latent = state.latent + dt * v;
    next.t = std::clamp(state.t + dt, 0.0, 1.0);
    return next;
}

FlowState step_midpoint(const FlowState& state, const VelocityFn& velocity_fn, double dt) {
    if (std::abs(dt) > 1.0) throw DomainError("step size |dt| exceeds 1");
    const Matrix v0 = velocity_fn(state.latent, state.t);
    const Matrix mid = state.latent + 0.5 * dt * v0;
    const Matrix v1 = velocity_fn(mid, state.t + 0.5 * dt);
    FlowState next = state;
    next.latent = state.latent + dt * v1;
    next.t = std::clamp(state.t + dt, 0.0, 1.0);
    return next;
}

double grid_time(std::size_t k, std::size_t steps) { return static_cast<double>(k) / static_cast<double>(steps); }

const TrajectoryEntry& FlowTrajectory::at(double t) const {
    for (const auto& e : entries) {
        if (e.t == t) return e;
    }
    std::ostringstream msg;
    msg << "no trajectory entry at t=" << std::setprecision(17) << t;
    throw TrajectoryMismatchError(msg.str());
}

std::size_t inversion_count() { return g_inversions.load(); }

InversionResult invert(const ToyModel& model, const FeatureGrid& image_latent, const Condition& cond, std::size_t steps,
                       StepperKind stepper, const FlowParams& params) {
    check_steps(steps);
    g_inversions.fetch_add(1);
    FlowState state = state_from_grid(image_latent, 0.0);
    check_condition(model, state, cond);
    const GridShape grid = state.grid;

    InversionResult out;
    out.trajectory.steps = steps;
    out.trajectory.stepper = stepper;
    for (std::size_t k = 0; k < steps; ++k) {
        const double t0 = grid_time(k, steps);
        const double t1 = grid_time(k + 1, steps);
        state.t = t0;
        const VelocityFn fn = [&](const Matrix& x, double t) {
            return velocity(model, FlowState{grid, x, t}, cond, params);
        };
        state = advance(state, t1 - t0, stepper, fn);
        state.t = t1;

        TrajectoryEntry entry;
        entry.t = t1;
        entry.latent = state_to_grid(state);
        const BlockHook recorder = [&](const BlockView& view) {
            entry.blocks.push_back({to_grid(view.features, grid), to_grid(view.keys, grid), to_grid(view.values, grid)});
            return BlockIntervention{};
        };
        model.forward(state.latent, cond.text, recorder);
        out.trajectory.entries.push_back(std::move(entry));
    }
    state.validate();
    out.noise = state;
    return out;
}

GenerateResult generate(const ToyModel& model, const FeatureGrid& init, const Condition& cond,
                        const GenerateOptions& options) {
    check_steps(options.steps);
    FlowState state = state_from_grid(init, 1.0);
    check_condition(model, state, cond);
    const GridShape grid = state.grid;
    if (options.hooks && options.trajectory == nullptr) throw ConfigError("graft hooks need an inversion trajectory");

    GenerateResult out;
    for (std::size_t j = options.steps; j > 0; --j) {
        const double t0 = grid_time(j, options.steps);
        const double t1 = grid_time(j - 1, options.steps);
        const std::size_t step = options.steps - j;
        const TrajectoryEntry* entry = nullptr;
        if (options.hooks) {
            if (options.trajectory->steps != options.steps) {
                throw TrajectoryMismatchError("trajectory has " + std::to_string(options.trajectory->steps) +
                                              " steps, generation uses " + std::to_string(options.steps));
            }
            entry = &options.trajectory->at(t0);
        }
        int stage = 0;
        const VelocityFn fn = [&](const Matrix& x, double t) {
            BlockHook hook;
            if (options.hooks) hook = options.hooks(HookContext{step, t0, stage, entry});
            ++stage;
            return velocity(model, FlowState{grid, x, t}, cond, options.params, hook);
        };
        state.t = t0;
        state = advance(state, t1 - t0, options.stepper, fn);
        state.t = t1;
        if (options.keep_states) out.states.push_back(state);
    }
    state.validate();
    out.final_state = state;
    return out;
}

void save_trajectory(const std::filesystem::path& dir, const FlowTrajectory& trajectory,
                     const std::map<std::string, std::uint64_t>& seeds) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["steps"] = trajectory.steps;
    manifest["stepper"] = to_string(trajectory.stepper);
    manifest["seeds"] = seeds;
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t k = 0; k < trajectory.entries.size(); ++k) {
        const TrajectoryEntry& e = trajectory.entries[k];
        std::ostringstream stem;
        stem << "step" << std::setw(3) << std::setfill('0') << k + 1;
        nlohmann::json je;
        je["t"] = e.t;
        je["latent"] = stem.str() + "_latent.fgrd";
        je["latent_shape"] = {e.latent.rows(), e.latent.cols(), e.latent.dim()};
        write_fgrd(dir / je["latent"].get<std::string>(), e.latent);
        nlohmann::json blocks = nlohmann::json::array();
        for (std::size_t b = 0; b < e.blocks.size(); ++b) {
            const std::string base = stem.str() + "_block" + std::to_string(b);
            write_fgrd(dir / (base + "_features.fgrd"), e.blocks[b].features);
            write_fgrd(dir / (base + "_keys.fgrd"), e.blocks[b].keys);
            write_fgrd(dir / (base + "_values.fgrd"), e.blocks[b].values);
            const FeatureGrid& f = e.blocks[b].features;
            blocks.push_back({{"features", base + "_features.fgrd"},
                              {"keys", base + "_keys.fgrd"},
                              {"values", base + "_values.fgrd"},
                              {"shape", {f.rows(), f.cols(), f.dim()}}});
        }
        je["blocks"] = std::move(blocks);
        entries.push_back(std::move(je));
    }
    manifest["entries"] = std::move(entries);
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
}

}  // namespace graftor

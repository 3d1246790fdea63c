#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "graftor/attention.hpp"
#include "graftor/grid.hpp"

namespace graftor {

enum class StepperKind { Euler, Midpoint };

StepperKind parse_stepper(const std::string& name);
std::string to_string(StepperKind kind);

/// Latent tokens (n_img x 12, row-major patch order) at time t. t = 1 is noise, t = 0 data.
struct FlowState {
    GridShape grid;
    Matrix latent;
    double t = 0.0;

    void validate() const;
};

FlowState state_from_grid(const FeatureGrid& latent, double t);
FeatureGrid state_to_grid(const FlowState& state);

/// Conditioning for one flow run. `prior_mean` and `prior_sigma` describe the
/// per-token Gaussian the velocity field transports noise onto.
struct Condition {
    Matrix text;
    Matrix prior_mean;
    double prior_sigma = 0.5;
};

/// Model-side velocity constants.
struct FlowParams {
    double kappa = 60.0;
};

/// Straight-path velocity of a Gaussian N(mu, sigma^2) against unit noise at time t,
/// minus kappa times the toy network's reconstruction residual.
Matrix velocity(const ToyModel& model, const FlowState& state, const Condition& cond, const FlowParams& params = {},
                const BlockHook& hook = {});

/// Closed-form rectified-flow coefficient a(t; sigma) of the Gaussian velocity.
double gaussian_flow_gain(double t, double sigma);

using VelocityFn = std::function<Matrix(const Matrix& x, double t)>;

FlowState step_euler(const FlowState& state, const Matrix& v, double dt);
FlowState step_midpoint(const FlowState& state, const VelocityFn& velocity_fn, double dt);

/// Uniform grid value t_k = k / steps.
double grid_time(std::size_t k, std::size_t steps);

struct BlockRecord {
    FeatureGrid features;
    FeatureGrid keys;
    FeatureGrid values;
};

struct TrajectoryEntry {
    double t = 0.0;
    FeatureGrid latent;
    std::vector<BlockRecord> blocks;
};

/// One entry per inversion step, t strictly increasing.
struct FlowTrajectory {
    std::size_t steps = 0;
    StepperKind stepper = StepperKind::Midpoint;
    std::vector<TrajectoryEntry> entries;

    /// Entry with exactly this t; throws TrajectoryMismatchError when absent.
    const TrajectoryEntry& at(double t) const;
};

struct InversionResult {
    FlowState noise;
    FlowTrajectory trajectory;
};

/// Integrates from t = 0 to t = 1. After each step the network is run once more on the
/// new state and its per-block inputs, keys and values are recorded for that t.
InversionResult invert(const ToyModel& model, const FeatureGrid& image_latent, const Condition& cond, std::size_t steps,
                       StepperKind stepper, const FlowParams& params = {});

/// Number of invert() calls made by this process.
std::size_t inversion_count();

struct HookContext {
    std::size_t step = 0;  // 0-based generation step index
    double t = 0.0;        // grid time the step starts from
    int stage = 0;         // 0: first velocity evaluation of the step, 1: midpoint evaluation
    const TrajectoryEntry* entry = nullptr;
};

/// Per-step factory of block hooks. Returning an empty hook leaves the step untouched.
using GraftHookFactory = std::function<BlockHook(const HookContext&)>;

struct GenerateOptions {
    std::size_t steps = 25;
    StepperKind stepper = StepperKind::Midpoint;
    FlowParams params;
    const FlowTrajectory* trajectory = nullptr;
    GraftHookFactory hooks;
    bool keep_states = false;
};

struct GenerateResult {
    FlowState final_state;
    std::vector<FlowState> states;
};

/// Integrates from t = 1 to t = 0. When hooks are set, each step looks up the trajectory
/// entry with the step's start time; a missing entry is a TrajectoryMismatchError.
GenerateResult generate(const ToyModel& model, const FeatureGrid& init, const Condition& cond,
                        const GenerateOptions& options);

/// Writes one FGRD file per entry and tensor plus manifest.json.
void save_trajectory(const std::filesystem::path& dir, const FlowTrajectory& trajectory,
                     const std::map<std::string, std::uint64_t>& seeds);

}  // namespace graftor

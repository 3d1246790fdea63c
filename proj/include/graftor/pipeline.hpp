#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "graftor/attention.hpp"
#include "graftor/collage.hpp"
#include "graftor/flow.hpp"
#include "graftor/match.hpp"

namespace graftor {

enum class Variant { Full, NoInit, NoGraft, NoMatch, Replace };

Variant parse_variant(const std::string& name);
std::string to_string(Variant v);

struct Seeds {
    std::uint64_t template_seed = 0;
    std::uint64_t inversion = 0;
    std::uint64_t generation = 0;
    std::uint64_t dropout = 0;
};

struct GraftConfig {
    double tau = 0.2;
    double delta = 1.5;
    double omega = 0.5;
    std::size_t steps = 25;
    StepperKind stepper = StepperKind::Midpoint;
    /// Empty means every block of the model.
    std::vector<std::size_t> hooked_blocks;
    Seeds seeds;
    Variant variant = Variant::Full;

    /// Throws ConfigError when a field leaves its domain.
    void validate(std::size_t model_blocks) const;
    std::vector<std::size_t> blocks(std::size_t model_blocks) const;
};

nlohmann::json config_to_json(const GraftConfig& config);

/// Constants of the toy flow that are not user-facing hyperparameters.
struct FlowSetup {
    ModelConfig model;
    FlowParams params;
    double inversion_sigma = 0.5;
    double generation_sigma = 0.4;
};

struct ReferenceSource {
    SceneSpec spec;
    std::string subject_id;
    /// Used instead of rendering `spec` when set; `spec` still backs the exact stages.
    std::optional<PixelImage> image;
};

struct PipelineInputs {
    SceneSpec template_spec;
    std::vector<ReferenceSource> refs;
};

struct RunOptions {
    std::optional<std::filesystem::path> dump_dir;
    std::optional<std::filesystem::path> record_dir;
};

struct RunReport {
    nlohmann::json config;
    std::size_t inversions = 0;
    std::size_t pre_popcount = 0;
    std::vector<std::size_t> popcounts;  // (step, hooked block) in generation order
    std::map<std::string, double> alignment;
    double mean_alignment = 0.0;
    std::map<std::string, double> timings_ms;
    std::map<std::string, std::string> artifacts;

    nlohmann::json to_json() const;
};

struct PipelineResult {
    RunReport report;
    Collage collage;
    FeatureGrid init_noise;
    FeatureGrid final_latent;
    PixelImage generated;  // 8-bit quantized output image
};

/// collage -> one inversion -> grafted generation. Failures are rethrown as StageError.
PipelineResult run_pipeline(const GraftConfig& config, const PipelineInputs& inputs, const RunOptions& options = {},
                            const FlowSetup& setup = {});

/// Translated-subject scene as pipeline inputs, template seed taken from the scene seed.
PipelineInputs translated_inputs(const TranslatedScene& scene);

/// NCC between the sprite, nearest-neighbor resized onto the bounding box of `gen_mask`,
/// and the generated pixels under both masks, pooled over RGB and clamped to [0,1].
double eval_alignment(const PixelImage& gen, const Sprite& sprite, const BinaryMask& gen_mask);

/// Side-by-side SVG of two images with one line per retained match, colored by similarity.
std::string match_viz(const PixelImage& ref, const PixelImage& gen, const Matching& matching, const BinaryMask& mask);

enum class SweepAxis { Tau, Delta, Omega };

SweepAxis parse_axis(const std::string& name);
std::string to_string(SweepAxis axis);

struct SweepRow {
    double axis_value = 0.0;
    double retained_mean = 0.0;
    std::size_t retained_min = 0;
    double align_score = 0.0;
    std::uint64_t seed = 0;
};

/// One pipeline run per (value, scene seed) on translated-subject scenes, spread over
/// `workers` threads. Rows come back ordered by value, then seed.
std::vector<SweepRow> sweep(const GraftConfig& base, SweepAxis axis, const std::vector<double>& values,
                            const std::vector<std::uint64_t>& scene_seeds, std::size_t workers = 1,
                            const FlowSetup& setup = {});

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace graftor

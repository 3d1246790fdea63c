#include "graftor/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "graftor/errors.hpp"
#include "graftor/io.hpp"
#include "graftor/log.hpp"
#include "graftor/rng.hpp"

namespace graftor {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

Matrix grid_to_matrix(const FeatureGrid& g) {
    Matrix m(static_cast<Eigen::Index>(g.tokens()), static_cast<Eigen::Index>(g.dim()));
    for (std::size_t i = 0; i < g.tokens(); ++i) {
        auto tok = g.token(i);
        for (std::size_t d = 0; d < g.dim(); ++d) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = tok[d];
    }
    return m;
}

FeatureGrid matrix_to_grid(const Matrix& m, GridShape shape) {
    std::vector<float> data(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) data[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
    }
    return {shape.rows, shape.cols, static_cast<std::size_t>(m.cols()), std::move(data)};
}

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

FeatureGrid gaussian_grid(GridShape shape, std::size_t dim, std::uint64_t seed) {
    Rng rng(hash_words({0x6A55, seed}));
    std::vector<float> data(shape.size() * dim);
    for (float& v : data) v = static_cast<float>(rng.normal());
    return {shape.rows, shape.cols, dim, std::move(data)};
}

/// Builds the per-(step, block) grafting intervention. It is computed on the first velocity
/// evaluation of a step and reused for the midpoint evaluation of the same step.
class GraftController {
public:
    GraftController(const GraftConfig& config, const BinaryMask& pre, std::vector<std::size_t> blocks,
                    std::size_t model_blocks)
        : config_(config), pre_(pre), hooked_(model_blocks, false) {
        for (std::size_t b : blocks) hooked_[b] = true;
    }

    BlockHook hook_for(const HookContext& ctx) {
        if (ctx.stage == 0) cache_.clear();
        return [this, ctx](const BlockView& view) -> BlockIntervention {
            if (!hooked_[view.block]) return {};
            if (ctx.stage != 0) {
                auto it = cache_.find(view.block);
                return it == cache_.end() ? BlockIntervention{} : it->second;
            }
            BlockIntervention iv = build(ctx, view);
            cache_[view.block] = iv;
            return iv;
        };
    }

    const std::vector<std::size_t>& popcounts() const noexcept { return popcounts_; }

private:
    BlockIntervention build(const HookContext& ctx, const BlockView& view) {
        if (view.block >= ctx.entry->blocks.size()) {
            throw TrajectoryMismatchError("trajectory has no record for block " + std::to_string(view.block));
        }
        const BlockRecord& rec = ctx.entry->blocks[view.block];
        const GridShape shape = pre_.shape();
        const DropoutSchedule schedule{config_.omega, hash_words({config_.seeds.dropout, view.block})};
        const BinaryMask drop = dropout_mask(shape, schedule, ctx.t);

        BlockIntervention iv;
        if (config_.variant == Variant::NoMatch) {
            const BinaryMask kept = apply_dropout(pre_, drop);
            std::vector<PatchCoord> own(shape.size());
            for (std::size_t i = 0; i < own.size(); ++i) own[i] = index_to_coord(i, shape);
            iv.packet = make_packet(view.block, ctx.t, grid_to_matrix(rec.keys), grid_to_matrix(rec.values), kept, own);
            popcounts_.push_back(mask_popcount(kept));
            return iv;
        }

        const FeatureGrid gen = matrix_to_grid(view.features, shape);
        const MatchResult mr = semantic_match(rec.features, gen, pre_, config_.tau, config_.delta);
        const BinaryMask kept = apply_dropout(mr.final_mask, drop);
        popcounts_.push_back(mask_popcount(kept));
        if (config_.variant == Variant::Replace) {
            iv.features = replace_features(view.features, grid_to_matrix(rec.features), mr.matching, kept);
            return iv;
        }
        std::vector<PatchCoord> matched(shape.size());
        for (std::size_t i = 0; i < matched.size(); ++i) {
            if (mr.matching.forward[i] != kNoMatch) matched[i] = index_to_coord(mr.matching.forward[i], mr.matching.gen_shape);
        }
        iv.packet = make_packet(view.block, ctx.t, grid_to_matrix(rec.keys), grid_to_matrix(rec.values), kept, matched);
        return iv;
    }

    const GraftConfig& config_;
    const BinaryMask& pre_;
    std::vector<bool> hooked_;
    std::map<std::size_t, BlockIntervention> cache_;
    std::vector<std::size_t> popcounts_;
};

}  // namespace

// --- configuration --------------------------------------------------------------

Variant parse_variant(const std::string& name) {
    if (name == "full") return Variant::Full;
    if (name == "noinit") return Variant::NoInit;
    if (name == "nograft") return Variant::NoGraft;
    if (name == "nomatch") return Variant::NoMatch;
    if (name == "replace") return Variant::Replace;
    throw ConfigError("unknown variant '" + name + "' (full, noinit, nograft, nomatch, replace)");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::NoInit: return "noinit";
        case Variant::NoGraft: return "nograft";
        case Variant::NoMatch: return "nomatch";
        case Variant::Replace: return "replace";
    }
    return "full";
}

void GraftConfig::validate(std::size_t model_blocks) const {
    if (!(tau >= -1.0 && tau <= 1.0)) throw ConfigError("tau must lie in [-1, 1]");
    if (!(delta >= 0.0)) throw ConfigError("delta must be >= 0");
    if (!(omega >= 0.0 && omega <= 1.0)) throw ConfigError("omega must lie in [0, 1]");
    if (steps < 1) throw ConfigError("steps must be >= 1");
    for (std::size_t b : hooked_blocks) {
        if (b >= model_blocks) throw ConfigError("hooked block " + std::to_string(b) + " does not exist");
    }
}

std::vector<std::size_t> GraftConfig::blocks(std::size_t model_blocks) const {
    std::vector<std::size_t> out = hooked_blocks;
    if (out.empty()) {
        for (std::size_t b = 0; b < model_blocks; ++b) out.push_back(b);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

nlohmann::json config_to_json(const GraftConfig& c) {
    return {{"tau", c.tau},
            {"delta", c.delta},
            {"omega", c.omega},
            {"steps", c.steps},
            {"stepper", to_string(c.stepper)},
            {"hooked_blocks", c.hooked_blocks},
            {"variant", to_string(c.variant)},
            {"seeds",
             {{"template", c.seeds.template_seed},
              {"inversion", c.seeds.inversion},
              {"generation", c.seeds.generation},
              {"dropout", c.seeds.dropout}}}};
}

nlohmann::json RunReport::to_json() const {
    return {{"config", config},
            {"inversions", inversions},
            {"pre_popcount", pre_popcount},
            {"popcounts", popcounts},
            {"alignment", alignment},
            {"mean_alignment", mean_alignment},
            {"timings_ms", timings_ms},
            {"artifacts", artifacts}};
}

// --- pipeline ---------------------------------------------------------------------

PipelineResult run_pipeline(const GraftConfig& config, const PipelineInputs& inputs, const RunOptions& options,
                            const FlowSetup& setup) {
    config.validate(setup.model.blocks);
    inputs.template_spec.validate();
    const auto t_start = Clock::now();
    PipelineResult result;
    RunReport& report = result.report;
    report.config = config_to_json(config);

    // Stage 1: template and collage.
    auto t0 = Clock::now();
    const PixelImage template_image =
        stage("template", [&] { return render_scene(inputs.template_spec, config.seeds.template_seed); });
    const StageSet template_stages = exact_stages(inputs.template_spec, config.seeds.template_seed);
    std::vector<ReferenceInput> refs;
    for (const ReferenceSource& src : inputs.refs) {
        ReferenceInput in;
        in.subject_id = src.subject_id;
        in.image = src.image ? *src.image : stage("reference[" + src.subject_id + "]", [&] {
            return render_scene(src.spec, src.spec.seed);
        });
        in.stages = exact_stages(src.spec, src.spec.seed);
        refs.push_back(std::move(in));
    }
    result.collage = build_collage(template_image, template_stages, refs);
    const Collage& col = result.collage;
    report.pre_popcount = mask_popcount(col.pre_mask);
    report.timings_ms["collage"] = elapsed_ms(t0);

    const GridShape grid = col.image.patch_shape();
    const ToyModel model(setup.model, grid);
    const std::size_t n_img = grid.size();

    // Stage 2: one inversion of the collage, unconditioned.
    t0 = Clock::now();
    const Condition uncond{Matrix::Zero(static_cast<Eigen::Index>(setup.model.n_txt), static_cast<Eigen::Index>(setup.model.width())),
                           Matrix::Zero(static_cast<Eigen::Index>(n_img), static_cast<Eigen::Index>(kTokenDim)),
                           setup.inversion_sigma};
    const std::size_t inversions_before = inversion_count();
    InversionResult inv = stage("invert", [&] {
        return invert(model, encode_latent(col.image), uncond, config.steps, config.stepper, setup.params);
    });
    report.inversions = inversion_count() - inversions_before;
    report.timings_ms["invert"] = elapsed_ms(t0);

    // Stage 3: generation from the inverted noise, conditioned on the prompt and the template.
    t0 = Clock::now();
    const Condition cond{model.text_embedding(tokenize_prompt(inputs.template_spec.prompt)),
                         grid_to_matrix(encode_latent(template_image)), setup.generation_sigma};
    result.init_noise = config.variant == Variant::NoInit
                            ? gaussian_grid(grid, kTokenDim, config.seeds.generation)
                            : state_to_grid(inv.noise);

    const std::vector<std::size_t> blocks = config.blocks(setup.model.blocks);
    GraftController controller(config, col.pre_mask, blocks, setup.model.blocks);
    GenerateOptions gen_opts;
    gen_opts.steps = config.steps;
    gen_opts.stepper = config.stepper;
    gen_opts.params = setup.params;
    if (config.variant != Variant::NoGraft) {
        gen_opts.trajectory = &inv.trajectory;
        gen_opts.hooks = [&](const HookContext& ctx) { return controller.hook_for(ctx); };
    }
    const GenerateResult gen = stage("generate", [&] { return generate(model, result.init_noise, cond, gen_opts); });
    report.popcounts = controller.popcounts();
    if (config.variant == Variant::NoGraft) report.popcounts.assign(config.steps * blocks.size(), 0);
    report.timings_ms["generate"] = elapsed_ms(t0);

    result.final_latent = state_to_grid(gen.final_state);
    result.generated = quantize_8bit(decode_latent(result.final_latent));

    // Alignment of each grafted subject on the final 8-bit image.
    double total = 0.0;
    for (const SubjectPlacement& p : col.subjects) {
        const double s = eval_alignment(result.generated, p.sprite, p.pixel_mask);
        report.alignment[p.subject_id] = s;
        total += s;
    }
    report.mean_alignment = col.subjects.empty() ? 0.0 : total / static_cast<double>(col.subjects.size());

    stage("output", [&] {
        if (options.dump_dir) {
            const auto& dir = *options.dump_dir;
            std::filesystem::create_directories(dir);
            auto put = [&](const std::string& key, const std::string& file, const PixelImage& img) {
                write_png(dir / file, img);
                report.artifacts[key] = (dir / file).string();
            };
            put("template", "template.png", template_image);
            put("erased", "erased.png", col.erased);
            put("collage", "collage.png", col.image);
            put("generated", "generated.png", result.generated);
            write_bmsk(dir / "pre_mask.bmsk", col.pre_mask);
            report.artifacts["pre_mask"] = (dir / "pre_mask.bmsk").string();
            for (const SubjectPlacement& p : col.subjects) {
                const std::string file = "subject_" + p.subject_id + "_mask.bmsk";
                write_bmsk(dir / file, p.pixel_mask);
                report.artifacts["mask_" + p.subject_id] = (dir / file).string();
            }
        }
        if (options.record_dir) {
            save_trajectory(*options.record_dir, inv.trajectory,
                            {{"template", config.seeds.template_seed},
                             {"inversion", config.seeds.inversion},
                             {"generation", config.seeds.generation},
                             {"dropout", config.seeds.dropout}});
            report.artifacts["trajectory"] = options.record_dir->string();
        }
        return 0;
    });
    report.timings_ms["total"] = elapsed_ms(t_start);
    return result;
}

PipelineInputs translated_inputs(const TranslatedScene& scene) {
    PipelineInputs in;
    in.template_spec = scene.template_spec;
    in.refs.push_back({scene.ref_spec, scene.subject_id, std::nullopt});
    return in;
}

// --- scoring ------------------------------------------------------------------------

double eval_alignment(const PixelImage& gen, const Sprite& sprite, const BinaryMask& gen_mask) {
    if (gen_mask.rows() != gen.height() || gen_mask.cols() != gen.width()) throw ShapeError("subject mask does not match image");
    std::size_t x0 = gen.width(), y0 = gen.height(), x1 = 0, y1 = 0;
    bool any = false;
    for (std::size_t y = 0; y < gen.height(); ++y) {
        for (std::size_t x = 0; x < gen.width(); ++x) {
            if (!gen_mask.at(y, x)) continue;
            any = true;
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x);
            y1 = std::max(y1, y);
        }
    }
    if (!any || sprite.alpha_count() == 0) {
        warn("alignment: empty subject region, scoring 0");
        return 0.0;
    }
    const Sprite ref = resize_sprite(sprite, x1 - x0 + 1, y1 - y0 + 1);
    std::vector<double> a, b;
    for (std::size_t y = 0; y < ref.height; ++y) {
        for (std::size_t x = 0; x < ref.width; ++x) {
            if (!ref.opaque(x, y) || !gen_mask.at(y0 + y, x0 + x)) continue;
            for (std::size_t c = 0; c < kChannels; ++c) {
                a.push_back(gen.at(x0 + x, y0 + y, c));
                b.push_back(ref.at(x, y, c));
            }
        }
    }
    if (a.empty()) {
        warn("alignment: sprite and subject region do not overlap, scoring 0");
        return 0.0;
    }
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return std::clamp(sab / std::sqrt(saa * sbb), 0.0, 1.0);
}

std::string match_viz(const PixelImage& ref, const PixelImage& gen, const Matching& matching, const BinaryMask& mask) {
    if (mask.size() != matching.forward.size()) throw ShapeError("match_viz: mask does not match the matching");
    constexpr int kScale = 8;
    constexpr int kGap = 16;
    const int rw = static_cast<int>(ref.width()) * kScale;
    const int gx = rw + kGap;
    const int width = gx + static_cast<int>(gen.width()) * kScale;
    const int height = static_cast<int>(std::max(ref.height(), gen.height())) * kScale;

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
        << "\" viewBox=\"0 0 " << width << ' ' << height << "\" shape-rendering=\"crispEdges\">\n";
    auto draw = [&](const PixelImage& img, int ox, const char* id) {
        svg << "<g id=\"" << id << "\">\n";
        for (std::size_t y = 0; y < img.height(); ++y) {
            for (std::size_t x = 0; x < img.width(); ++x) {
                auto byte = [&](std::size_t c) { return static_cast<int>(std::lround(img.at(x, y, c) * 255.0f)); };
                svg << "<rect x=\"" << ox + static_cast<int>(x) * kScale << "\" y=\"" << static_cast<int>(y) * kScale
                    << "\" width=\"" << kScale << "\" height=\"" << kScale << "\" fill=\"rgb(" << byte(0) << ','
                    << byte(1) << ',' << byte(2) << ")\"/>\n";
            }
        }
        svg << "</g>\n";
    };
    draw(ref, 0, "reference");
    draw(gen, gx, "generated");

    svg << "<g id=\"matches\" stroke-width=\"1.5\" stroke-linecap=\"round\">\n";
    const int half = static_cast<int>(kPatchSize) * kScale / 2;
    const int patch_px = static_cast<int>(kPatchSize) * kScale;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i] || matching.forward[i] == kNoMatch) continue;
        const PatchCoord a = index_to_coord(i, matching.ref_shape);
        const PatchCoord b = index_to_coord(matching.forward[i], matching.gen_shape);
        const double s = std::clamp(matching.best_sim[i], 0.0, 1.0);
        svg << "<line x1=\"" << static_cast<int>(a.col) * patch_px + half << "\" y1=\""
            << static_cast<int>(a.row) * patch_px + half << "\" x2=\"" << gx + static_cast<int>(b.col) * patch_px + half
            << "\" y2=\"" << static_cast<int>(b.row) * patch_px + half << "\" stroke=\"hsl("
            << static_cast<int>(std::lround(120.0 * s)) << ",90%,45%)\"/>\n";
    }
    svg << "</g>\n</svg>\n";
    return svg.str();
}

// --- sweeps ---------------------------------------------------------------------------

SweepAxis parse_axis(const std::string& name) {
    if (name == "tau") return SweepAxis::Tau;
    if (name == "delta") return SweepAxis::Delta;
    if (name == "omega") return SweepAxis::Omega;
    throw ConfigError("unknown sweep axis '" + name + "' (tau, delta, omega)");
}

std::string to_string(SweepAxis axis) {
    switch (axis) {
        case SweepAxis::Tau: return "tau";
        case SweepAxis::Delta: return "delta";
        case SweepAxis::Omega: return "omega";
    }
    return "tau";
}

std::vector<SweepRow> sweep(const GraftConfig& base, SweepAxis axis, const std::vector<double>& values,
                            const std::vector<std::uint64_t>& scene_seeds, std::size_t workers,
                            const FlowSetup& setup) {
    struct Cell {
        double value;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (double v : values) {
        GraftConfig probe = base;
        (axis == SweepAxis::Tau ? probe.tau : axis == SweepAxis::Delta ? probe.delta : probe.omega) = v;
        probe.validate(setup.model.blocks);
        for (std::uint64_t s : scene_seeds) cells.push_back({v, s});
    }
    std::vector<SweepRow> rows(cells.size());
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;

    auto work = [&] {
        for (std::size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1)) {
            try {
                GraftConfig cfg = base;
                (axis == SweepAxis::Tau ? cfg.tau : axis == SweepAxis::Delta ? cfg.delta : cfg.omega) = cells[i].value;
                const TranslatedScene scene = make_translated_scene(cells[i].seed);
                cfg.seeds.template_seed = scene.seed;
                const PipelineResult r = run_pipeline(cfg, translated_inputs(scene), {}, setup);
                const auto& pc = r.report.popcounts;
                SweepRow row{cells[i].value, 0.0, 0, r.report.mean_alignment, cells[i].seed};
                if (!pc.empty()) {
                    double sum = 0.0;
                    for (std::size_t c : pc) sum += static_cast<double>(c);
                    row.retained_mean = sum / static_cast<double>(pc.size());
                    row.retained_min = *std::min_element(pc.begin(), pc.end());
                }
                rows[i] = row;
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(workers, cells.size()));
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < n; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "axis_value,retained_mean,retained_min,align_score,seed\n";
    out << std::setprecision(10);
    for (const SweepRow& r : rows) {
        out << r.axis_value << ',' << r.retained_mean << ',' << r.retained_min << ',' << r.align_score << ',' << r.seed
            << '\n';
    }
    return out.str();
}

}  // namespace graftor

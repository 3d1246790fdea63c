// Command-line front end: generate, match-viz, sweep, eval.
// Exit codes: 0 success, 2 configuration/input error, 3 pipeline stage error.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <thread>

#include "graftor/errors.hpp"
#include "graftor/io.hpp"
#include "graftor/pipeline.hpp"

namespace {

using namespace graftor;

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct ConfigFlags {
    double tau = 0.2;
    double delta = 1.5;
    double omega = 0.5;
    std::size_t steps = 25;
    std::string stepper = "midpoint";
    std::string variant = "full";
    std::vector<std::size_t> blocks;
    Seeds seeds;

    void add_to(CLI::App& app) {
        app.add_option("--tau", tau, "similarity threshold")->capture_default_str();
        app.add_option("--delta", delta, "cycle-consistency threshold in patches")->capture_default_str();
        app.add_option("--omega", omega, "dropout intensity")->capture_default_str();
        app.add_option("--steps", steps, "flow steps for inversion and generation")->capture_default_str();
        app.add_option("--stepper", stepper, "euler | midpoint")->capture_default_str();
        app.add_option("--variant", variant, "full | noinit | nograft | nomatch | replace")->capture_default_str();
        app.add_option("--blocks", blocks, "hooked blocks (default: all)");
        app.add_option("--seed-template", seeds.template_seed)->capture_default_str();
        app.add_option("--seed-inversion", seeds.inversion)->capture_default_str();
        app.add_option("--seed-generation", seeds.generation)->capture_default_str();
        app.add_option("--seed-dropout", seeds.dropout)->capture_default_str();
    }

    GraftConfig build() const {
        GraftConfig c;
        c.tau = tau;
        c.delta = delta;
        c.omega = omega;
        c.steps = steps;
        c.stepper = parse_stepper(stepper);
        c.variant = parse_variant(variant);
        c.hooked_blocks = blocks;
        c.seeds = seeds;
        c.validate(ModelConfig{}.blocks);
        return c;
    }
};

/// "scene.json[:subject]" or "image.png[:subject]" with a sibling scene.json.
ReferenceSource load_reference(const std::string& arg) {
    std::string path = arg;
    std::string subject;
    const auto colon = arg.rfind(':');
    if (colon != std::string::npos && arg.find('/', colon) == std::string::npos) {
        path = arg.substr(0, colon);
        subject = arg.substr(colon + 1);
    }
    std::filesystem::path p(path);
    ReferenceSource src;
    if (p.extension() == ".png") {
        src.image = read_png(p);
        src.spec = load_scene(std::filesystem::path(p).replace_extension(".json"));
    } else {
        src.spec = load_scene(p);
    }
    if (subject.empty()) {
        if (src.spec.subjects.empty()) throw ConfigError("reference " + path + " has no subjects");
        subject = src.spec.subjects.front().id;
    }
    src.subject_id = subject;
    return src;
}

PipelineInputs load_inputs(const std::string& scene, const std::vector<std::string>& refs) {
    PipelineInputs in;
    in.template_spec = load_scene(scene);
    for (const auto& r : refs) in.refs.push_back(load_reference(r));
    return in;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

/// Block-input features of an image under the unconditioned toy model.
FeatureGrid block_features(const PixelImage& image, std::size_t block) {
    const ToyModel model(ModelConfig{}, image.patch_shape());
    if (block >= model.config().blocks) throw ConfigError("block " + std::to_string(block) + " does not exist");
    const Matrix text = Matrix::Zero(static_cast<Eigen::Index>(model.config().n_txt),
                                     static_cast<Eigen::Index>(model.config().width()));
    FeatureGrid out;
    const FlowState s = state_from_grid(encode_latent(image), 0.0);
    model.forward(s.latent, text, [&](const BlockView& v) {
        if (v.block == block) {
            std::vector<float> data(static_cast<std::size_t>(v.features.size()));
            for (Eigen::Index r = 0; r < v.features.rows(); ++r) {
                for (Eigen::Index c = 0; c < v.features.cols(); ++c) {
                    data[static_cast<std::size_t>(r * v.features.cols() + c)] = static_cast<float>(v.features(r, c));
                }
            }
            out = FeatureGrid(image.patch_shape().rows, image.patch_shape().cols,
                              static_cast<std::size_t>(v.features.cols()), std::move(data));
        }
        return BlockIntervention{};
    });
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Training-free subject grafting on procedural scenes"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "collage, invert and generate with feature grafting");
    std::string gen_scene, gen_out, gen_record;
    std::vector<std::string> gen_refs;
    bool gen_dump = false;
    ConfigFlags gen_flags;
    gen->add_option("--scene", gen_scene, "template scene JSON")->required();
    gen->add_option("--ref", gen_refs, "reference: scene.json[:subject] or image.png[:subject]")->required();
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_flag("--dump-stages", gen_dump, "write intermediate images under <out>/stages");
    gen->add_option("--record-dir", gen_record, "write the inversion trajectory here");
    gen_flags.add_to(*gen);

    // match-viz
    auto* viz = app.add_subcommand("match-viz", "draw patch correspondences between two images as SVG");
    std::string viz_ref, viz_gen, viz_mask, viz_out;
    std::size_t viz_block = 0;
    double viz_tau = 0.2, viz_delta = 1.5;
    viz->add_option("--ref-image", viz_ref, "reference PNG")->required();
    viz->add_option("--gen-image", viz_gen, "generated PNG")->required();
    viz->add_option("--mask", viz_mask, "reference patch mask (BMSK); default all patches");
    viz->add_option("--block", viz_block, "block whose input features are matched")->capture_default_str();
    viz->add_option("--tau", viz_tau)->capture_default_str();
    viz->add_option("--delta", viz_delta)->capture_default_str();
    viz->add_option("--out", viz_out, "output SVG")->required();

    // sweep
    auto* sw = app.add_subcommand("sweep", "hyperparameter sweep on translated-subject scenes");
    std::string sw_axis, sw_out;
    std::vector<double> sw_values;
    std::vector<std::uint64_t> sw_seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::size_t sw_workers = std::max(1u, std::thread::hardware_concurrency());
    ConfigFlags sw_flags;
    sw->add_option("--axis", sw_axis, "tau | delta | omega")->required();
    sw->add_option("--values", sw_values, "axis values")->required()->delimiter(',');
    sw->add_option("--scene-seeds", sw_seeds, "scene seeds")->delimiter(',');
    sw->add_option("--workers", sw_workers)->capture_default_str();
    sw->add_option("--out", sw_out, "output CSV (stdout when omitted)");
    sw_flags.add_to(*sw);

    // eval
    auto* ev = app.add_subcommand("eval", "score a generated image against its references");
    std::string ev_gen, ev_scene;
    std::vector<std::string> ev_refs;
    std::uint64_t ev_seed = 0;
    ev->add_option("--gen", ev_gen, "generated PNG")->required();
    ev->add_option("--scene", ev_scene, "template scene JSON")->required();
    ev->add_option("--ref", ev_refs, "references as for generate")->required();
    ev->add_option("--seed-template", ev_seed)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*gen) {
            const GraftConfig config = gen_flags.build();
            const PipelineInputs inputs = load_inputs(gen_scene, gen_refs);
            RunOptions opts;
            const std::filesystem::path out_dir(gen_out);
            if (gen_dump) opts.dump_dir = out_dir / "stages";
            if (!gen_record.empty()) opts.record_dir = gen_record;
            std::filesystem::create_directories(out_dir);
            PipelineResult r;
            try {
                r = run_pipeline(config, inputs, opts);
                write_png(out_dir / "generated.png", r.generated);
                r.report.artifacts["output"] = (out_dir / "generated.png").string();
                write_text(out_dir / "report.json", r.report.to_json().dump(2) + "\n");
            } catch (const ConfigError&) {
                throw;
            } catch (const StageError&) {
                throw;
            } catch (const std::exception& e) {
                throw StageError("output", e.what());
            }
            std::cout << r.report.to_json().dump(2) << '\n';
        } else if (*viz) {
            const PixelImage ref = read_png(viz_ref);
            const PixelImage g = read_png(viz_gen);
            const BinaryMask pre = viz_mask.empty() ? BinaryMask::ones(ref.patch_shape().rows, ref.patch_shape().cols)
                                                    : read_bmsk(viz_mask);
            try {
                const MatchResult mr =
                    semantic_match(block_features(ref, viz_block), block_features(g, viz_block), pre, viz_tau, viz_delta);
                write_text(viz_out, match_viz(ref, g, mr.matching, mr.final_mask));
                std::cout << "matches: " << mask_popcount(mr.final_mask) << " of " << mask_popcount(pre) << '\n';
            } catch (const ConfigError&) {
                throw;
            } catch (const std::exception& e) {
                throw StageError("match", e.what());
            }
        } else if (*sw) {
            const GraftConfig base = sw_flags.build();
            const SweepAxis axis = parse_axis(sw_axis);
            const std::string csv = sweep_csv(sweep(base, axis, sw_values, sw_seeds, sw_workers));
            if (sw_out.empty()) {
                std::cout << csv;
            } else {
                write_text(sw_out, csv);
            }
        } else if (*ev) {
            const PixelImage g = read_png(ev_gen);
            const PipelineInputs inputs = load_inputs(ev_scene, ev_refs);
            std::vector<ReferenceInput> refs;
            for (const auto& src : inputs.refs) {
                refs.push_back({src.image ? *src.image : render_scene(src.spec, src.spec.seed), src.subject_id,
                                exact_stages(src.spec, src.spec.seed)});
            }
            const PixelImage tmpl = render_scene(inputs.template_spec, ev_seed);
            const Collage col = build_collage(tmpl, exact_stages(inputs.template_spec, ev_seed), refs);
            nlohmann::json scores;
            for (const auto& p : col.subjects) scores[p.subject_id] = eval_alignment(g, p.sprite, p.pixel_mask);
            std::cout << scores.dump(2) << '\n';
        }
    } catch (const StageError& e) {
        std::cerr << "stage error: " << e.what() << '\n';
        return kExitStage;
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    }
    return 0;
}

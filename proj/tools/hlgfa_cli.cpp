#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hlgfa/config.hpp"
#include "hlgfa/pipeline.hpp"

namespace fs = std::filesystem;
using namespace hlgfa;

namespace {

struct GlobalOptions {
    std::optional<fs::path> config;
    std::vector<std::string> categories;
    bool unified = false;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> device;
    bool strict = false;
};

RunConfig resolve(const GlobalOptions& g) {
    RunConfig c = g.config ? load_config(*g.config) : RunConfig{};
    if (!g.categories.empty()) c.dataset.categories = g.categories;
    if (g.unified) c.dataset.unified = true;
    if (g.seed) c.apply_seed(*g.seed);
    if (g.device) c.device = *g.device;
    if (g.strict) c.strict_determinism = true;
    c.validate();
    return c;
}

std::string model_for(const RunConfig& c) {
    if (c.dataset.unified) return "unified";
    if (c.dataset.categories.size() != 1) {
        throw std::invalid_argument("pass exactly one --category (or --unified) to pick the model");
    }
    return c.dataset.categories.front();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-resolution guided feature alignment for anomaly detection"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOptions g;
    app.add_option("--config", g.config, "INI or JSON run configuration")->check(CLI::ExistingFile);
    app.add_option("--category", g.categories, "Restrict to a category (repeatable)");
    app.add_flag("--unified", g.unified, "One model over all categories");
    app.add_option("--seed", g.seed, "Run seed (shuffling, augmentation, initialization)");
    app.add_option("--device", g.device, "Compute device (only 'cpu')");
    app.add_flag("--strict-determinism", g.strict, "Single worker, bit-reproducible runs");

    auto* train_cmd = app.add_subcommand("train", "Train guidance parameters on normal images");
    std::optional<fs::path> resume;
    train_cmd->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

    auto* eval = app.add_subcommand("eval", "Evaluate trained models on the test split");

    auto* pred = app.add_subcommand("predict", "Score one image and write its heatmap");
    fs::path pred_image;
    std::optional<fs::path> pred_checkpoint, pred_out;
    pred->add_option("image", pred_image, "Input image")->required()->check(CLI::ExistingFile);
    pred->add_option("--checkpoint", pred_checkpoint, "Defaults to checkpoints/<model>/latest.hlgw");
    pred->add_option("--out", pred_out, "Defaults to <output_dir>/heatmaps");

    auto* augment = app.add_subcommand("augment", "Augmentation tools");
    augment->require_subcommand(1);
    auto* preview = augment->add_subcommand("preview", "Write before/after PNGs of the noise augmentation");
    fs::path preview_image;
    std::optional<fs::path> preview_out;
    std::size_t preview_count = 4;
    preview->add_option("image", preview_image, "Input image")->required()->check(CLI::ExistingFile);
    preview->add_option("--out", preview_out, "Defaults to <output_dir>/augment_preview");
    preview->add_option("--count", preview_count, "Number of draws")->check(CLI::PositiveNumber);

    auto* exporter = app.add_subcommand("export-backbone", "Write the seeded reference backbone archive");
    fs::path export_path;
    exporter->add_option("path", export_path, "Output archive")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the training gradients");
    std::string preset_text = "FULL";
    GradcheckOptions gopt;
    gradcheck->add_option("--preset", preset_text, "Loss preset");
    gradcheck->add_option("--step", gopt.step, "Central-difference step");
    gradcheck->add_option("--tolerance", gopt.tolerance, "Maximum relative error");
    gradcheck->add_option("--samples", gopt.samples_per_tensor, "Coordinates per tensor");

    CLI11_PARSE(app, argc, argv);

    try {
        const RunConfig config = resolve(g);
        if (train_cmd->parsed()) {
            TrainOptions options;
            options.log = &std::cout;
            options.resume_from = resume;
            if (resume) {
                const DatasetIndex index = open_dataset(config);
                const std::string model = model_for(config);
                const auto samples = config.dataset.unified ? training_samples(index)
                                                            : training_samples(index, {model});
                train(config, samples, model, options);
            } else {
                train_all(config, options);
            }
        } else if (eval->parsed()) {
            const EvalReport report = evaluate(config, &std::cout);
            std::cout << report.to_csv();
        } else if (pred->parsed()) {
            const fs::path ck_path =
                pred_checkpoint ? *pred_checkpoint : checkpoint_dir(config, model_for(config)) / "latest.hlgw";
            const Checkpoint ck = load_checkpoint(ck_path);
            const PredictResult r = predict(ck, config, pred_image, pred_out.value_or(config.output_dir / "heatmaps"));
            std::printf("image_score %.17g\nheatmap %s\n", r.image_score, r.heatmap_path.string().c_str());
            if (r.raw_map_path) std::printf("raw_map %s\n", r.raw_map_path->string().c_str());
        } else if (preview->parsed()) {
            const auto written = augment_preview(config, preview_image,
                                                 preview_out.value_or(config.output_dir / "augment_preview"),
                                                 preview_count);
            for (const auto& p : written) std::cout << p.string() << '\n';
        } else if (exporter->parsed()) {
            const auto* seeded = std::get_if<SeededWeights>(&config.backbone.weights_source);
            if (!seeded) throw std::invalid_argument("export-backbone needs backbone.weights = seeded");
            export_reference_backbone(seeded->seed, export_path, config.backbone);
            std::cout << export_path.string() << '\n';
        } else if (gradcheck->parsed()) {
            const auto preset = parse_preset(preset_text);
            if (!preset) throw std::invalid_argument("unknown preset '" + preset_text + "'");
            gopt.seed = config.optimizer.seed;
            const GradcheckReport r = run_alignment_gradcheck(config, *preset, gopt);
            std::printf("checked %zu coordinates, max relative error %.3e (tolerance %.1e): %s\n", r.entries.size(),
                        r.max_relative_error, gopt.tolerance, r.passed ? "PASS" : "FAIL");
            for (const auto& name : r.failing) std::printf("  failing: %s\n", name.c_str());
            return r.passed ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

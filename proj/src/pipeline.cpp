#include "hlgfa/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "hlgfa/archive.hpp"
#include "hlgfa/augment.hpp"
#include "hlgfa/png_io.hpp"
#include "hlgfa/rng.hpp"

namespace fs = std::filesystem;

namespace hlgfa {
namespace {

constexpr const char* kCheckpointFormat = "hlgfa-checkpoint-1";

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Runs fn(i) for i in [0, n) on up to `workers` threads; the first
// exception (by index) is rethrown after all threads finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    std::vector<std::exception_ptr> errors(n);
    const std::size_t threads = std::min(std::max<std::size_t>(workers, 1), n);
    const auto run = [&](std::size_t t) {
        for (std::size_t i = t; i < n; i += threads) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    if (threads <= 1) {
        run(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(run, t);
        for (std::thread& th : pool) th.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

RunConfig snapshot_of(const RunConfig& config) {
    RunConfig c = config;
    c.output_dir.clear();
    c.device = "cpu";
    c.optimizer.workers = 1;
    c.strict_determinism = false;
    return c;
}

// Everything that fixes the shapes and meaning of the guidance parameters.
std::string model_signature(const RunConfig& config) {
    const nlohmann::json doc = nlohmann::json::parse(to_json(config));
    nlohmann::json sig;
    sig["backbone"] = doc.at("backbone");
    sig["views"] = doc.at("views");
    sig["guidance"] = doc.at("guidance");
    return sig.dump();
}

void require_compatible(const RunConfig& checkpoint_config, const RunConfig& config) {
    if (model_signature(checkpoint_config) != model_signature(config)) {
        throw std::runtime_error(
            "checkpoint was trained with a different backbone, view or guidance configuration");
    }
}

GuidanceParameters read_prefixed(const WeightsArchive& archive, const std::string& prefix,
                                 const GuidanceParameters& like) {
    GuidanceParameters out = like;
    out.visit([&](const std::string& name, const std::string&, Tensor& t) {
        const std::string key = prefix + name;
        if (!archive.contains(key)) throw std::runtime_error("checkpoint: missing '" + key + "'");
        if (archive.get(key).shape() != t.shape()) throw std::runtime_error("checkpoint: shape mismatch for " + key);
        t = archive.get(key);
    });
    return out;
}

void add_scaled(GuidanceParameters& acc, const GuidanceParameters& x, double scale) {
    std::vector<const Tensor*> src;
    x.visit([&](const std::string&, const std::string&, const Tensor& t) { src.push_back(&t); });
    std::size_t i = 0;
    acc.visit([&](const std::string&, const std::string&, Tensor& t) {
        const Tensor& s = *src[i++];
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += scale * s[k];
    });
}

std::uint64_t digest_step(std::uint64_t state, const LossReport& r) {
    const double values[] = {r.align, r.l1, r.js, r.gram, r.total};
    return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(values), sizeof values), state);
}

void write_nonfinite_dump(const fs::path& path, const std::string& model, int epoch, std::size_t step,
                          double learning_rate, const std::vector<TrainSample>& batch,
                          const std::vector<AlignmentLoss>& results, const GuidanceParameters& params) {
    nlohmann::ordered_json doc;
    doc["model"] = model;
    doc["epoch"] = epoch;
    doc["step"] = step;
    doc["learning_rate"] = learning_rate;
    doc["parameters_finite"] = params.all_finite();
    doc["samples"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const LossReport& r = results[i].report;
        doc["samples"].push_back({{"path", batch[i].path.string()},
                                  {"align", num(r.align)},
                                  {"l1", num(r.l1)},
                                  {"js", num(r.js)},
                                  {"gram", num(r.gram)},
                                  {"total", num(r.total)},
                                  {"gradients_finite", results[i].gradients.all_finite()}});
    }
    fs::create_directories(path.parent_path());
    std::ofstream(path) << doc.dump(2) << '\n';
}

}  // namespace

double cosine_learning_rate(double start, double end, int epoch, int epochs) {
    if (epochs < 1) throw std::invalid_argument("cosine_learning_rate: epochs must be >= 1");
    const double t = static_cast<double>(epoch) / static_cast<double>(epochs);
    return end + 0.5 * (start - end) * (1.0 + std::cos(std::numbers::pi * t));
}

Adam::Adam(const GuidanceParameters& like, double beta1, double beta2, double epsilon)
    : m_(like), v_(like), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
    m_.visit([](const std::string&, const std::string&, Tensor& t) { t.fill(0.0); });
    v_.visit([](const std::string&, const std::string&, Tensor& t) { t.fill(0.0); });
}

void Adam::restore(GuidanceParameters m, GuidanceParameters v, std::uint64_t steps) {
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = steps;
}

void Adam::step(GuidanceParameters& params, const GuidanceParameters& grads, double learning_rate) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::vector<const Tensor*> g;
    std::vector<Tensor*> m, v;
    grads.visit([&](const std::string&, const std::string&, const Tensor& t) { g.push_back(&t); });
    m_.visit([&](const std::string&, const std::string&, Tensor& t) { m.push_back(&t); });
    v_.visit([&](const std::string&, const std::string&, Tensor& t) { v.push_back(&t); });
    std::size_t i = 0;
    params.visit([&](const std::string&, const std::string&, Tensor& p) {
        Tensor& mi = *m[i];
        Tensor& vi = *v[i];
        const Tensor& gi = *g[i];
        ++i;
        for (std::size_t k = 0; k < p.size(); ++k) {
            mi[k] = beta1_ * mi[k] + (1.0 - beta1_) * gi[k];
            vi[k] = beta2_ * vi[k] + (1.0 - beta2_) * gi[k] * gi[k];
            p[k] -= learning_rate * (mi[k] / c1) / (std::sqrt(vi[k] / c2) + epsilon_);
        }
    });
}

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
    WeightsArchive archive;
    ck.params.write_to(archive, DType::f64);
    ck.optimizer.first_moment().visit([&](const std::string& name, const std::string&, const Tensor& t) {
        archive.put("adam/m/" + name, t, DType::f64);
    });
    ck.optimizer.second_moment().visit([&](const std::string& name, const std::string&, const Tensor& t) {
        archive.put("adam/v/" + name, t, DType::f64);
    });
    const RunConfig snapshot = snapshot_of(ck.config);
    auto& meta = archive.metadata();
    meta["format"] = kCheckpointFormat;
    meta["config"] = to_json(snapshot);
    meta["config_hash"] = hex64(config_hash(snapshot));
    meta["epoch"] = std::to_string(ck.epoch);
    meta["loss_history_digest"] = ck.loss_history_digest;
    meta["model"] = ck.model_name;
    meta["adam_steps"] = std::to_string(ck.optimizer.steps());
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    archive.save(path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    const WeightsArchive archive = WeightsArchive::load(path);
    const auto& meta = archive.metadata();
    const auto field = [&](const char* key) {
        const auto it = meta.find(key);
        if (it == meta.end()) throw std::runtime_error("checkpoint " + path.string() + ": missing metadata '" + key + "'");
        return it->second;
    };
    if (field("format") != kCheckpointFormat) throw std::runtime_error("checkpoint: unsupported format in " + path.string());
    Checkpoint ck;
    ck.config = parse_config(field("config"), true);
    if (hex64(config_hash(ck.config)) != field("config_hash")) {
        throw std::runtime_error("checkpoint " + path.string() + ": config hash does not match its snapshot");
    }
    ck.epoch = std::stoi(field("epoch"));
    ck.loss_history_digest = field("loss_history_digest");
    ck.model_name = field("model");
    ck.params = GuidanceParameters::read_from(archive, ck.config.selected_channels(),
                                              ck.config.guidance.structure_kernels,
                                              ck.config.guidance.share_across_stages);
    const OptimizerConfig& o = ck.config.optimizer;
    ck.optimizer = Adam(ck.params, o.beta1, o.beta2, o.epsilon);
    ck.optimizer.restore(read_prefixed(archive, "adam/m/", ck.params), read_prefixed(archive, "adam/v/", ck.params),
                         std::stoull(field("adam_steps")));
    return ck;
}

Backbone make_backbone(const RunConfig& config) { return Backbone::create(config.backbone); }

FeaturePyramid extract_selected(const Backbone& backbone, const ImageTensor& image, const RunConfig& config) {
    return select_stages(backbone.extract(image), config.stages);
}

std::string model_name(const RunConfig& config, const std::string& category) {
    return config.dataset.unified ? "unified" : category;
}

fs::path checkpoint_dir(const RunConfig& config, const std::string& model) {
    return config.output_dir / "checkpoints" / model;
}

fs::path loss_log_path(const RunConfig& config, const std::string& model) {
    return config.output_dir / "logs" / model / "loss.csv";
}

TrainResult train(const RunConfig& config, const std::vector<TrainSample>& samples, const std::string& model,
                  const TrainOptions& options) {
    config.validate();
    if (samples.empty()) throw std::runtime_error("train: dataset is empty for model '" + model + "'");
    const Backbone backbone = make_backbone(config);
    TrainResult result;
    result.backbone_hash_before = backbone.weights_hash();

    const OptimizerConfig& opt = config.optimizer;
    Checkpoint ck;
    ck.config = config;
    ck.model_name = model;
    ck.params = GuidanceParameters::initialize(config.selected_channels(), config.guidance);
    ck.optimizer = Adam(ck.params, opt.beta1, opt.beta2, opt.epsilon);
    std::uint64_t digest = 0xCBF29CE484222325ULL;
    if (options.resume_from) {
        Checkpoint previous = load_checkpoint(*options.resume_from);
        if (config_hash(previous.config) != config_hash(config)) {
            throw std::runtime_error("train: cannot resume from " + options.resume_from->string() +
                                     ": config hash differs from the current configuration");
        }
        ck.params = std::move(previous.params);
        ck.optimizer = std::move(previous.optimizer);
        ck.epoch = previous.epoch;
        digest = std::stoull(previous.loss_history_digest, nullptr, 16);
    }

    const fs::path ckdir = checkpoint_dir(config, model);
    const fs::path log_path = loss_log_path(config, model);
    fs::create_directories(ckdir);
    fs::create_directories(log_path.parent_path());
    std::ofstream csv(log_path, options.resume_from ? std::ios::app : std::ios::trunc);
    if (!csv) throw std::runtime_error("train: cannot write " + log_path.string());
    if (!options.resume_from) csv << "step,align,l1,js,gram,total,learning_rate\n";

    const std::size_t workers = config.strict_determinism ? 1 : opt.workers;
    std::size_t step = static_cast<std::size_t>(ck.optimizer.steps());
    for (int epoch = ck.epoch; epoch < opt.epochs; ++epoch) {
        const double lr = cosine_learning_rate(opt.learning_rate_start, opt.learning_rate_end, epoch, opt.epochs);
        const auto order = shuffled_order(samples.size(), opt.seed, static_cast<std::uint64_t>(epoch));
        double epoch_total = 0.0;
        std::size_t epoch_steps = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += opt.batch_size) {
            const std::size_t end = std::min(order.size(), begin + opt.batch_size);
            std::vector<TrainSample> batch;
            for (std::size_t i = begin; i < end; ++i) batch.push_back(samples[order[i]]);
            std::vector<AlignmentLoss> results(batch.size());
            parallel_for(batch.size(), workers, [&](std::size_t i) {
                const std::size_t index = order[begin + i];
                const ImageTensor image = load_sample(samples[index].path, config.image_size);
                const auto seed = augmentation_seed(opt.seed, static_cast<std::uint64_t>(epoch), index);
                const auto [high, low] = paired_augment(image, config.augment, config.lr_factor, seed);
                const FeaturePyramid hr = extract_selected(backbone, high, config);
                const FeaturePyramid lrp = extract_selected(backbone, low, config);
                results[i] = alignment_loss(lrp, hr, ck.params, config.loss, config.guidance.stabilize_eps);
            });
            // Fixed-order reduction keeps the result independent of `workers`.
            const double inv = 1.0 / static_cast<double>(batch.size());
            GuidanceParameters grads = results[0].gradients;
            grads.visit([&](const std::string&, const std::string&, Tensor& t) { t *= inv; });
            LossReport mean;
            for (std::size_t i = 0; i < results.size(); ++i) {
                if (i > 0) add_scaled(grads, results[i].gradients, inv);
                const LossReport& r = results[i].report;
                mean.align += r.align * inv;
                mean.l1 += r.l1 * inv;
                mean.js += r.js * inv;
                mean.gram += r.gram * inv;
                mean.total += r.total * inv;
            }
            const fs::path dump = log_path.parent_path() / "nonfinite_dump.json";
            if (!std::isfinite(mean.total) || !grads.all_finite()) {
                write_nonfinite_dump(dump, model, epoch, step, lr, batch, results, ck.params);
                throw std::runtime_error("train: non-finite loss or gradient at step " + std::to_string(step) +
                                         "; diagnostics in " + dump.string());
            }
            ck.optimizer.step(ck.params, grads, lr);
            if (!ck.params.all_finite()) {
                write_nonfinite_dump(dump, model, epoch, step, lr, batch, results, ck.params);
                throw std::runtime_error("train: parameters became non-finite at step " + std::to_string(step) +
                                         "; diagnostics in " + dump.string());
            }
            csv << step << ',' << num(mean.align) << ',' << num(mean.l1) << ',' << num(mean.js) << ','
                << num(mean.gram) << ',' << num(mean.total) << ',' << num(lr) << '\n';
            digest = digest_step(digest, mean);
            result.steps.push_back(StepLog{step, epoch, mean, lr});
            epoch_total += mean.total;
            ++epoch_steps;
            ++step;
        }
        csv.flush();
        result.epoch_mean_total.push_back(epoch_total / static_cast<double>(epoch_steps));
        ck.epoch = epoch + 1;
        ck.loss_history_digest = hex64(digest);
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03d.hlgw", epoch + 1);
        save_checkpoint(ckdir / name, ck);
        save_checkpoint(ckdir / "latest.hlgw", ck);
        if (options.log) {
            *options.log << model << " epoch " << epoch + 1 << '/' << opt.epochs << " mean loss "
                         << result.epoch_mean_total.back() << " lr " << lr << '\n';
        }
    }
    if (ck.loss_history_digest.empty()) ck.loss_history_digest = hex64(digest);
    result.backbone_hash_after = backbone.weights_hash();
    if (result.backbone_hash_after != result.backbone_hash_before) {
        throw std::logic_error("train: backbone weights changed during training");
    }
    result.checkpoint_path = ckdir / "latest.hlgw";
    result.checkpoint = std::move(ck);
    return result;
}

DatasetIndex open_dataset(const RunConfig& config) {
    if (!config.dataset.manifest.empty()) return load_manifest(config.dataset.manifest, config.dataset.categories);
    if (config.dataset.root.empty()) throw std::invalid_argument("config: dataset.root or dataset.manifest is required");
    return scan_dataset(config.dataset.root, config.dataset.categories);
}

std::vector<TrainResult> train_all(const RunConfig& config, const TrainOptions& options) {
    const DatasetIndex index = open_dataset(config);
    if (options.log) *options.log << index.summary();
    std::vector<TrainResult> results;
    if (config.dataset.unified) {
        results.push_back(train(config, training_samples(index), "unified", options));
    } else {
        for (const CategoryIndex& cat : index.categories) {
            results.push_back(train(config, training_samples(index, {cat.name}), cat.name, options));
        }
    }
    return results;
}

ImagePrediction score_image(const Backbone& backbone, const GuidanceParameters& params, const RunConfig& config,
                            const ImageTensor& image) {
    const auto [high, low] = make_dual_views(image, config.lr_factor);
    ImagePrediction out;
    out.hr = extract_selected(backbone, high, config);
    const FeaturePyramid lr = extract_selected(backbone, low, config);
    const AlignmentResult aligned = align(lr, out.hr, params, config.guidance.stabilize_eps);
    out.scored = score_alignment(out.hr, aligned, config.score);
    return out;
}

CategoryEvaluation evaluate_category(const Backbone& backbone, const GuidanceParameters& params,
                                     const RunConfig& config, const CategoryIndex& category) {
    const std::size_t n = category.test_items.size();
    if (n == 0) throw std::runtime_error("evaluate: category '" + category.name + "' has no test images");
    CategoryEvaluation ev;
    ev.image_scores.assign(n, 0.0);
    ev.labels.assign(n, 0);
    ev.maps.assign(n, Tensor());
    std::vector<Tensor> masks(n);
    const std::size_t workers = config.strict_determinism ? 1 : config.optimizer.workers;
    parallel_for(n, workers, [&](std::size_t i) {
        const TestItem& item = category.test_items[i];
        const ImageTensor image = load_sample(item.image_path, config.image_size);
        ImagePrediction pred = score_image(backbone, params, config, image);
        ev.image_scores[i] = pred.scored.map.image_score;
        ev.labels[i] = item.label == Label::anomalous ? 1 : 0;
        ev.maps[i] = std::move(pred.scored.map.scores);
        if (item.label == Label::anomalous) {
            if (!item.mask_path) {
                throw std::runtime_error("evaluate: anomalous item " + item.image_path.string() + " has no mask");
            }
            masks[i] = load_mask(*item.mask_path, config.image_size);
        } else {
            masks[i] = Tensor::zeros_like(ev.maps[i]);
        }
    });
    const auto [lo, hi] = std::minmax_element(ev.image_scores.begin(), ev.image_scores.end());
    if (*lo == *hi) {
        throw std::runtime_error("evaluate: degenerate anomaly scores in '" + category.name +
                                 "': every test image scored " + num(*lo) +
                                 ", so no threshold separates the classes");
    }
    ev.metrics = compute_category_metrics(category.name, ScoredSet{ev.image_scores, ev.labels},
                                          PixelScoredSet{ev.maps, masks}, config.fpr_limit);
    return ev;
}

EvalReport evaluate(const RunConfig& config, std::ostream* log) {
    config.validate();
    const DatasetIndex index = open_dataset(config);
    const Backbone backbone = make_backbone(config);
    EvalReport report;
    for (const CategoryIndex& cat : index.categories) {
        const fs::path path = checkpoint_dir(config, model_name(config, cat.name)) / "latest.hlgw";
        const Checkpoint ck = load_checkpoint(path);
        require_compatible(ck.config, config);
        CategoryEvaluation ev = evaluate_category(backbone, ck.params, config, cat);
        if (log) {
            *log << cat.name << ": AUC-I " << ev.metrics.auc_i << " AUC-P " << ev.metrics.auc_p << " PRO "
                 << ev.metrics.pro_p << '\n';
        }
        report.rows.push_back(std::move(ev.metrics));
    }
    report.write(config.output_dir / "reports");
    return report;
}

PredictResult predict(const Checkpoint& checkpoint, const RunConfig& config, const fs::path& image_path,
                      const fs::path& out_dir) {
    require_compatible(checkpoint.config, config);
    const Backbone backbone = make_backbone(config);
    const ImageTensor image = load_sample(image_path, config.image_size);
    const ImagePrediction pred = score_image(backbone, checkpoint.params, config, image);
    fs::create_directories(out_dir);
    PredictResult out;
    out.image_score = pred.scored.map.image_score;
    const std::string stem = image_path.stem().string();
    out.heatmap_path = out_dir / (stem + "_heatmap.png");
    write_heatmap_png(out.heatmap_path, pred.scored.map.scores, config.heatmap);
    if (config.write_raw_maps) {
        out.raw_map_path = out_dir / (stem + "_map.hlgw");
        write_raw_map(*out.raw_map_path, pred.scored.map.scores);
    }
    return out;
}

void export_reference_backbone(std::uint64_t seed, const fs::path& path, const BackboneSpec& spec) {
    BackboneSpec s = spec;
    s.weights_source = SeededWeights{seed};
    const Backbone backbone = Backbone::create(s);
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    backbone.export_archive().save(path);
}

std::vector<fs::path> augment_preview(const RunConfig& config, const fs::path& image_path, const fs::path& out_dir,
                                      std::size_t count) {
    const ImageTensor image = load_sample(image_path, config.image_size);
    NoiseSpec spec = config.augment;
    spec.apply_probability = 1.0;
    fs::create_directories(out_dir);
    const std::string stem = image_path.stem().string();
    std::vector<fs::path> written;
    const auto save = [&](const fs::path& p, const Tensor& t) {
        png::write_rgb8(p, t.width(), t.height(), to_rgb8(t));
        written.push_back(p);
    };
    save(out_dir / (stem + "_before.png"), image.data);
    for (std::size_t i = 0; i < count; ++i) {
        const auto [high, low] = paired_augment(image, spec, config.lr_factor, augmentation_seed(spec.seed, 0, i));
        save(out_dir / (stem + "_after_" + std::to_string(i) + "_high.png"), high.data);
        save(out_dir / (stem + "_after_" + std::to_string(i) + "_low.png"), low.data);
    }
    return written;
}

GuidanceParameters perturbed_parameters(const GuidanceParameters& params, std::uint64_t seed, double scale) {
    GuidanceParameters out = params;
    Xorshift64Star rng(seed);
    out.visit([&](const std::string&, const std::string&, Tensor& t) {
        for (double& v : t.values()) v += rng.uniform(-scale, scale);
    });
    return out;
}

ImageTensor synthetic_probe_image(std::size_t height, std::size_t width, std::uint64_t seed) {
    Xorshift64Star rng(seed);
    Tensor t = Tensor::chw(3, height, width);
    for (std::size_t c = 0; c < 3; ++c) {
        const double fx = rng.uniform(0.05, 0.4), fy = rng.uniform(0.05, 0.4);
        const double px = rng.uniform(0.0, 6.3), py = rng.uniform(0.0, 6.3);
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                const double v = 0.5 + 0.3 * std::sin(fx * static_cast<double>(x) + px) *
                                           std::cos(fy * static_cast<double>(y) + py) +
                                 0.1 * std::sin(0.7 * static_cast<double>(x + y) + px);
                t.at(c, y, x) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return ImageTensor{std::move(t), std::nullopt, Resolution::high};
}

GradcheckReport run_alignment_gradcheck(const RunConfig& config, LossPreset preset, const GradcheckOptions& options,
                                        std::size_t image_side) {
    const Backbone backbone = make_backbone(config);
    const ImageTensor image = synthetic_probe_image(image_side, image_side, options.seed);
    const auto [high, low] = make_dual_views(image, config.lr_factor);
    const FeaturePyramid hr = extract_selected(backbone, high, config);
    const FeaturePyramid lr = extract_selected(backbone, low, config);
    GuidanceParameters params = perturbed_parameters(
        GuidanceParameters::initialize(config.selected_channels(), config.guidance), derive_seed(options.seed, 1), 0.1);
    LossWeights weights = preset_weights(preset);
    weights.focal_gamma = config.loss.focal_gamma;
    return gradcheck_alignment(lr, hr, params, weights, options, config.guidance.stabilize_eps);
}

}  // namespace hlgfa

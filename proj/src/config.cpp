#include "hlgfa/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/json_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "hlgfa/archive.hpp"

namespace pt = boost::property_tree;

namespace hlgfa {
namespace {

const std::map<std::string, std::set<std::string>>& known_keys() {
    static const std::map<std::string, std::set<std::string>> keys{
        {"backbone", {"id", "weights", "seed", "archive", "stage_channels", "stage_strides", "stages"}},
        {"views", {"lr_factor", "image_size"}},
        {"guidance", {"structure_kernels", "gate_bias_init", "stabilize_eps", "share_across_stages"}},
        {"loss", {"preset", "lambda_l1", "lambda_js", "lambda_gram", "lambda_cls", "focal_gamma", "js_normalization"}},
        {"score",
         {"tau", "delta", "neighborhood", "smoothing_sigma", "reliability", "reliability_source", "image_reduction",
          "top_k", "normalize_by_channels", "fpr_limit"}},
        {"augment",
         {"point_density", "point_amplitude_range", "point_opacity_range", "stripe_count_range", "stripe_width_range",
          "stripe_opacity_range", "apply_probability"}},
        {"optimizer",
         {"learning_rate_start", "learning_rate_end", "schedule", "epochs", "batch_size", "seed", "beta1", "beta2",
          "epsilon", "workers"}},
        {"dataset", {"root", "manifest", "categories", "unified"}},
        {"output", {"dir", "write_raw_maps"}},
        {"heatmap", {"mode", "lo", "hi"}},
        {"run", {"device", "strict_determinism"}},
    };
    return keys;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

class Reader {
public:
    explicit Reader(const pt::ptree& tree) : tree_(tree) {
        for (const auto& [section, body] : tree_) {
            const auto it = known_keys().find(section);
            if (it == known_keys().end()) throw std::invalid_argument("config: unknown section [" + section + "]");
            for (const auto& [key, value] : body) {
                (void)value;
                if (!it->second.count(key)) {
                    throw std::invalid_argument("config: unknown key " + section + "." + key);
                }
            }
        }
    }

    bool has(const std::string& section, const std::string& key) const { return node(section, key) != nullptr; }

    std::string text(const std::string& section, const std::string& key, const std::string& fallback) const {
        const pt::ptree* n = node(section, key);
        return n ? trim(n->data()) : fallback;
    }

    double real(const std::string& section, const std::string& key, double fallback) const {
        const pt::ptree* n = node(section, key);
        return n ? to_real(trim(n->data()), section, key) : fallback;
    }

    template <typename Int>
    Int integer(const std::string& section, const std::string& key, Int fallback) const {
        const pt::ptree* n = node(section, key);
        return n ? to_integer<Int>(trim(n->data()), section, key) : fallback;
    }

    bool boolean(const std::string& section, const std::string& key, bool fallback) const {
        const pt::ptree* n = node(section, key);
        if (!n) return fallback;
        const std::string v = lower(trim(n->data()));
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw std::invalid_argument("config: " + section + "." + key + " must be a boolean, got '" + v + "'");
    }

    /// Comma-separated text or a JSON array.
    std::vector<std::string> list(const std::string& section, const std::string& key,
                                  const std::vector<std::string>& fallback) const {
        const pt::ptree* n = node(section, key);
        if (!n) return fallback;
        std::vector<std::string> out;
        if (!n->empty()) {
            for (const auto& [k, child] : *n) {
                (void)k;
                out.push_back(trim(child.data()));
            }
            return out;
        }
        std::stringstream ss(n->data());
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    std::vector<double> reals(const std::string& section, const std::string& key,
                              const std::vector<double>& fallback) const {
        if (!has(section, key)) return fallback;
        std::vector<double> out;
        for (const std::string& s : list(section, key, {})) out.push_back(to_real(s, section, key));
        return out;
    }

    template <typename Int>
    std::vector<Int> integers(const std::string& section, const std::string& key,
                              const std::vector<Int>& fallback) const {
        if (!has(section, key)) return fallback;
        std::vector<Int> out;
        for (const std::string& s : list(section, key, {})) out.push_back(to_integer<Int>(s, section, key));
        return out;
    }

    std::pair<double, double> range(const std::string& section, const std::string& key,
                                    std::pair<double, double> fallback) const {
        const auto v = reals(section, key, {fallback.first, fallback.second});
        if (v.size() != 2) throw std::invalid_argument("config: " + section + "." + key + " needs two values");
        return {v[0], v[1]};
    }

private:
    const pt::ptree* node(const std::string& section, const std::string& key) const {
        const auto s = tree_.find(section);
        if (s == tree_.not_found()) return nullptr;
        const auto k = s->second.find(key);
        if (k == s->second.not_found()) return nullptr;
        return &k->second;
    }

    static double to_real(const std::string& s, const std::string& section, const std::string& key) {
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used == s.size()) return v;
        } catch (const std::exception&) {
        }
        throw std::invalid_argument("config: " + section + "." + key + " must be a number, got '" + s + "'");
    }

    template <typename Int>
    static Int to_integer(const std::string& s, const std::string& section, const std::string& key) {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(s, &used);
            if (used == s.size() && (std::is_signed_v<Int> || v >= 0)) return static_cast<Int>(v);
        } catch (const std::exception&) {
        }
        throw std::invalid_argument("config: " + section + "." + key + " must be an integer, got '" + s + "'");
    }

    const pt::ptree& tree_;
};

RunConfig from_tree(const pt::ptree& tree) {
    const Reader r(tree);
    RunConfig c;

    // [backbone]
    c.backbone.backbone_id = r.text("backbone", "id", c.backbone.backbone_id);
    c.backbone.stage_channels = r.integers<std::size_t>("backbone", "stage_channels", c.backbone.stage_channels);
    c.backbone.stage_strides = r.integers<std::size_t>("backbone", "stage_strides", c.backbone.stage_strides);
    const std::string weights = lower(r.text("backbone", "weights", "seeded"));
    if (weights == "seeded") {
        c.backbone.weights_source = SeededWeights{r.integer<std::uint64_t>("backbone", "seed", 0)};
    } else if (weights == "archive") {
        const std::string path = r.text("backbone", "archive", "");
        if (path.empty()) throw std::invalid_argument("config: backbone.archive is required when weights = archive");
        c.backbone.weights_source = ArchiveWeights{path};
    } else {
        throw std::invalid_argument("config: backbone.weights must be 'seeded' or 'archive', got '" + weights + "'");
    }
    c.stages = r.integers<int>("backbone", "stages", c.stages);

    // [views]
    c.lr_factor = r.real("views", "lr_factor", c.lr_factor);
    c.image_size = r.integer<std::size_t>("views", "image_size", c.image_size);

    // [guidance]
    c.guidance.structure_kernels = r.integers<std::size_t>("guidance", "structure_kernels", c.guidance.structure_kernels);
    c.guidance.gate_bias_init = r.real("guidance", "gate_bias_init", c.guidance.gate_bias_init);
    c.guidance.stabilize_eps = r.real("guidance", "stabilize_eps", c.guidance.stabilize_eps);
    c.guidance.share_across_stages = r.boolean("guidance", "share_across_stages", false);

    // [loss]
    c.loss_preset = r.text("loss", "preset", c.loss_preset);
    for (char& ch : c.loss_preset) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    const auto preset = parse_preset(c.loss_preset);
    if (!preset && c.loss_preset != "CUSTOM") {
        throw std::invalid_argument("config: loss.preset must be COSINE, COSINE_JS, COSINE_GRAM, COSINE_L1, FULL or "
                                    "CUSTOM, got '" + c.loss_preset + "'");
    }
    c.loss = preset ? preset_weights(*preset) : LossWeights{};
    const auto lambda = [&](const char* key, double& slot) {
        if (!r.has("loss", key)) return;
        const double v = r.real("loss", key, slot);
        if (preset && v != slot) {
            throw std::invalid_argument(std::string("config: loss.") + key + " = " + std::to_string(v) +
                                        " conflicts with preset " + c.loss_preset + "; use preset = CUSTOM");
        }
        slot = v;
    };
    lambda("lambda_l1", c.loss.lambda_l1);
    lambda("lambda_js", c.loss.lambda_js);
    lambda("lambda_gram", c.loss.lambda_gram);
    c.loss.lambda_cls = r.real("loss", "lambda_cls", 0.0);
    c.loss.focal_gamma = r.real("loss", "focal_gamma", c.loss.focal_gamma);
    c.js_normalization = lower(r.text("loss", "js_normalization", c.js_normalization));

    // [score]
    c.score.tau = r.real("score", "tau", c.score.tau);
    c.score.delta = r.real("score", "delta", c.score.delta);
    c.score.neighborhood = r.integer<std::size_t>("score", "neighborhood", c.score.neighborhood);
    c.score.smoothing_sigma = r.real("score", "smoothing_sigma", c.score.smoothing_sigma);
    c.score.reliability_enabled = r.boolean("score", "reliability", c.score.reliability_enabled);
    const std::string source = lower(r.text("score", "reliability_source", "deepest"));
    if (source == "deepest") {
        c.score.reliability_source = ReliabilitySource::deepest;
    } else if (source == "mean_over_stages") {
        c.score.reliability_source = ReliabilitySource::mean_over_stages;
    } else {
        throw std::invalid_argument("config: score.reliability_source must be deepest or mean_over_stages");
    }
    const std::string reduction = lower(r.text("score", "image_reduction", "max"));
    if (reduction == "max") {
        c.score.image_reduction = ImageReduction::max;
    } else if (reduction == "top_k_mean") {
        c.score.image_reduction = ImageReduction::top_k_mean;
    } else {
        throw std::invalid_argument("config: score.image_reduction must be max or top_k_mean");
    }
    c.score.top_k = r.integer<std::size_t>("score", "top_k", c.score.top_k);
    c.score.normalize_by_channels = r.boolean("score", "normalize_by_channels", c.score.normalize_by_channels);
    c.fpr_limit = r.real("score", "fpr_limit", c.fpr_limit);

    // [augment]
    c.augment.point_density = r.real("augment", "point_density", c.augment.point_density);
    c.augment.point_amplitude_range = r.range("augment", "point_amplitude_range", c.augment.point_amplitude_range);
    c.augment.point_opacity_range = r.range("augment", "point_opacity_range", c.augment.point_opacity_range);
    const auto counts = r.integers<int>("augment", "stripe_count_range",
                                        {c.augment.stripe_count_range.first, c.augment.stripe_count_range.second});
    if (counts.size() != 2) throw std::invalid_argument("config: augment.stripe_count_range needs two values");
    c.augment.stripe_count_range = {counts[0], counts[1]};
    c.augment.stripe_width_range = r.range("augment", "stripe_width_range", c.augment.stripe_width_range);
    c.augment.stripe_opacity_range = r.range("augment", "stripe_opacity_range", c.augment.stripe_opacity_range);
    c.augment.apply_probability = r.real("augment", "apply_probability", c.augment.apply_probability);

    // [optimizer]
    OptimizerConfig& o = c.optimizer;
    o.learning_rate_start = r.real("optimizer", "learning_rate_start", o.learning_rate_start);
    o.learning_rate_end = r.real("optimizer", "learning_rate_end", o.learning_rate_end);
    o.schedule = lower(r.text("optimizer", "schedule", o.schedule));
    o.epochs = r.integer<int>("optimizer", "epochs", o.epochs);
    o.batch_size = r.integer<std::size_t>("optimizer", "batch_size", o.batch_size);
    o.beta1 = r.real("optimizer", "beta1", o.beta1);
    o.beta2 = r.real("optimizer", "beta2", o.beta2);
    o.epsilon = r.real("optimizer", "epsilon", o.epsilon);
    o.workers = r.integer<std::size_t>("optimizer", "workers", o.workers);
    c.apply_seed(r.integer<std::uint64_t>("optimizer", "seed", o.seed));

    // [dataset]
    c.dataset.root = r.text("dataset", "root", "");
    c.dataset.manifest = r.text("dataset", "manifest", "");
    c.dataset.categories = r.list("dataset", "categories", {});
    c.dataset.unified = r.boolean("dataset", "unified", false);

    // [output], [heatmap], [run]
    c.output_dir = r.text("output", "dir", c.output_dir.string());
    c.write_raw_maps = r.boolean("output", "write_raw_maps", c.write_raw_maps);
    const std::string mode = lower(r.text("heatmap", "mode", "per_image"));
    if (mode == "per_image") {
        c.heatmap.mode = HeatmapMode::per_image;
    } else if (mode == "global") {
        c.heatmap.mode = HeatmapMode::global;
    } else {
        throw std::invalid_argument("config: heatmap.mode must be per_image or global");
    }
    c.heatmap.lo = r.real("heatmap", "lo", c.heatmap.lo);
    c.heatmap.hi = r.real("heatmap", "hi", c.heatmap.hi);
    c.device = lower(r.text("run", "device", c.device));
    c.strict_determinism = r.boolean("run", "strict_determinism", c.strict_determinism);

    c.validate();
    return c;
}

template <typename T>
std::string join(const std::vector<T>& values) {
    std::ostringstream out;
    for (std::size_t i = 0; i < values.size(); ++i) out << (i ? "," : "") << values[i];
    return out.str();
}

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

nlohmann::ordered_json to_document(const RunConfig& c) {
    nlohmann::ordered_json j;
    const bool seeded = std::holds_alternative<SeededWeights>(c.backbone.weights_source);
    j["backbone"]["id"] = c.backbone.backbone_id;
    j["backbone"]["weights"] = seeded ? "seeded" : "archive";
    j["backbone"]["seed"] = seeded ? std::get<SeededWeights>(c.backbone.weights_source).seed : 0;
    j["backbone"]["archive"] = seeded ? "" : std::get<ArchiveWeights>(c.backbone.weights_source).path.string();
    j["backbone"]["stage_channels"] = c.backbone.stage_channels;
    j["backbone"]["stage_strides"] = c.backbone.stage_strides;
    j["backbone"]["stages"] = c.stages;
    j["views"]["lr_factor"] = c.lr_factor;
    j["views"]["image_size"] = c.image_size;
    j["guidance"]["structure_kernels"] = c.guidance.structure_kernels;
    j["guidance"]["gate_bias_init"] = c.guidance.gate_bias_init;
    j["guidance"]["stabilize_eps"] = c.guidance.stabilize_eps;
    j["guidance"]["share_across_stages"] = c.guidance.share_across_stages;
    j["loss"]["preset"] = c.loss_preset;
    j["loss"]["lambda_l1"] = c.loss.lambda_l1;
    j["loss"]["lambda_js"] = c.loss.lambda_js;
    j["loss"]["lambda_gram"] = c.loss.lambda_gram;
    j["loss"]["lambda_cls"] = c.loss.lambda_cls;
    j["loss"]["focal_gamma"] = c.loss.focal_gamma;
    j["loss"]["js_normalization"] = c.js_normalization;
    j["score"]["tau"] = c.score.tau;
    j["score"]["delta"] = c.score.delta;
    j["score"]["neighborhood"] = c.score.neighborhood;
    j["score"]["smoothing_sigma"] = c.score.smoothing_sigma;
    j["score"]["reliability"] = c.score.reliability_enabled;
    j["score"]["reliability_source"] =
        c.score.reliability_source == ReliabilitySource::deepest ? "deepest" : "mean_over_stages";
    j["score"]["image_reduction"] = c.score.image_reduction == ImageReduction::max ? "max" : "top_k_mean";
    j["score"]["top_k"] = c.score.top_k;
    j["score"]["normalize_by_channels"] = c.score.normalize_by_channels;
    j["score"]["fpr_limit"] = c.fpr_limit;
    const NoiseSpec& a = c.augment;
    j["augment"]["point_density"] = a.point_density;
    j["augment"]["point_amplitude_range"] = {a.point_amplitude_range.first, a.point_amplitude_range.second};
    j["augment"]["point_opacity_range"] = {a.point_opacity_range.first, a.point_opacity_range.second};
    j["augment"]["stripe_count_range"] = {a.stripe_count_range.first, a.stripe_count_range.second};
    j["augment"]["stripe_width_range"] = {a.stripe_width_range.first, a.stripe_width_range.second};
    j["augment"]["stripe_opacity_range"] = {a.stripe_opacity_range.first, a.stripe_opacity_range.second};
    j["augment"]["apply_probability"] = a.apply_probability;
    const OptimizerConfig& o = c.optimizer;
    j["optimizer"]["learning_rate_start"] = o.learning_rate_start;
    j["optimizer"]["learning_rate_end"] = o.learning_rate_end;
    j["optimizer"]["schedule"] = o.schedule;
    j["optimizer"]["epochs"] = o.epochs;
    j["optimizer"]["batch_size"] = o.batch_size;
    j["optimizer"]["seed"] = o.seed;
    j["optimizer"]["beta1"] = o.beta1;
    j["optimizer"]["beta2"] = o.beta2;
    j["optimizer"]["epsilon"] = o.epsilon;
    j["optimizer"]["workers"] = o.workers;
    j["dataset"]["root"] = c.dataset.root.string();
    j["dataset"]["manifest"] = c.dataset.manifest.string();
    j["dataset"]["categories"] = c.dataset.categories;
    j["dataset"]["unified"] = c.dataset.unified;
    j["output"]["dir"] = c.output_dir.string();
    j["output"]["write_raw_maps"] = c.write_raw_maps;
    j["heatmap"]["mode"] = c.heatmap.mode == HeatmapMode::per_image ? "per_image" : "global";
    j["heatmap"]["lo"] = c.heatmap.lo;
    j["heatmap"]["hi"] = c.heatmap.hi;
    j["run"]["device"] = c.device;
    j["run"]["strict_determinism"] = c.strict_determinism;
    return j;
}

}  // namespace

void RunConfig::apply_seed(std::uint64_t seed) {
    optimizer.seed = seed;
    augment.seed = seed;
    guidance.init_seed = seed;
}

std::vector<std::size_t> RunConfig::selected_channels() const {
    std::vector<std::size_t> out;
    for (int s : stages) out.push_back(backbone.stage_channels.at(static_cast<std::size_t>(s - 1)));
    return out;
}

void RunConfig::validate() const {
    const auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
    backbone.validate();
    if (stages.empty()) fail("backbone.stages must list at least one stage");
    for (std::size_t i = 0; i < stages.size(); ++i) {
        if (stages[i] < 1 || stages[i] > static_cast<int>(backbone.stage_channels.size())) {
            fail("backbone.stages entry " + std::to_string(stages[i]) + " is out of range");
        }
        if (i > 0 && stages[i] <= stages[i - 1]) fail("backbone.stages must be strictly increasing");
    }
    if (!(lr_factor > 0.0 && lr_factor <= 1.0)) fail("views.lr_factor must lie in (0, 1]");
    if (image_size < kMinImageSide) fail("views.image_size must be >= 32");
    if (std::lround(static_cast<double>(image_size) * lr_factor) < static_cast<long>(kMinImageSide)) {
        fail("views.image_size * views.lr_factor must be >= 32");
    }
    if (guidance.structure_kernels.empty()) fail("guidance.structure_kernels must not be empty");
    for (std::size_t k : guidance.structure_kernels) {
        if (k == 0 || k % 2 == 0) fail("guidance.structure_kernels must be odd");
    }
    if (!(guidance.stabilize_eps > 0.0)) fail("guidance.stabilize_eps must be > 0");
    loss.validate();
    if (js_normalization != "softmax") fail("loss.js_normalization supports only 'softmax'");
    score.validate();
    if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) fail("score.fpr_limit must lie in (0, 1]");
    augment.validate();
    if (optimizer.epochs < 1) fail("optimizer.epochs must be >= 1");
    if (optimizer.batch_size < 1) fail("optimizer.batch_size must be >= 1");
    if (!(optimizer.learning_rate_end > 0.0)) fail("optimizer.learning_rate_end must be > 0");
    if (!(optimizer.learning_rate_start >= optimizer.learning_rate_end)) {
        fail("optimizer.learning_rate_start must be >= learning_rate_end");
    }
    if (optimizer.schedule != "cosine_annealing") fail("optimizer.schedule supports only 'cosine_annealing'");
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
        fail("optimizer.beta1/beta2 must lie in [0, 1)");
    }
    if (!(optimizer.epsilon > 0.0)) fail("optimizer.epsilon must be > 0");
    if (optimizer.workers < 1) fail("optimizer.workers must be >= 1");
    if (heatmap.mode == HeatmapMode::global && !(heatmap.hi > heatmap.lo)) fail("heatmap.hi must exceed heatmap.lo");
    if (device != "cpu") fail("run.device '" + device + "' is not available; only 'cpu' is supported");
}

RunConfig parse_config(const std::string& text, bool json) {
    pt::ptree tree;
    std::istringstream in(text);
    try {
        if (json) {
            pt::read_json(in, tree);
        } else {
            pt::read_ini(in, tree);
        }
    } catch (const pt::file_parser_error& e) {
        throw std::invalid_argument(std::string("config: parse error: ") + e.what());
    }
    return from_tree(tree);
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str(), lower(path.extension().string()) == ".json");
}

std::string to_json(const RunConfig& config) { return to_document(config).dump(2); }

std::string to_ini(const RunConfig& config) {
    std::ostringstream out;
    bool first = true;
    const auto doc = to_document(config);
    for (const auto& [section, body] : doc.items()) {
        out << (first ? "" : "\n") << '[' << section << "]\n";
        first = false;
        for (const auto& [key, value] : body.items()) {
            out << key << " = ";
            if (value.is_array()) {
                for (std::size_t i = 0; i < value.size(); ++i) {
                    out << (i ? "," : "");
                    if (value[i].is_number_float()) {
                        out << num(value[i].get<double>());
                    } else if (value[i].is_string()) {
                        out << value[i].get<std::string>();
                    } else {
                        out << value[i].dump();
                    }
                }
            } else if (value.is_string()) {
                out << value.get<std::string>();
            } else if (value.is_number_float()) {
                out << num(value.get<double>());
            } else {
                out << value.dump();
            }
            out << '\n';
        }
    }
    return out.str();
}

std::uint64_t config_hash(const RunConfig& config) {
    RunConfig c = config;
    c.output_dir.clear();
    c.device.clear();
    c.optimizer.workers = 1;
    c.strict_determinism = false;
    const std::string text = to_json(c);
    return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace hlgfa

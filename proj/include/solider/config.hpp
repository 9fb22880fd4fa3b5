#pragma once

// Flat key = value run configuration. Every key has a documented default;
// unknown keys and malformed values are errors. Precedence, lowest first:
// built-in defaults, config file, command-line overrides.

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "solider/trainer.hpp"

namespace solider {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigKey {
    const char* name;
    const char* default_value;
    const char* doc;
};

/// The full key schema in serialization order.
inline const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> keys = {
        {"seed", "0", "global seed; every random stream derives from it"},
        // synthetic corpus
        {"data.image_h", "64", "image height in pixels"},
        {"data.image_w", "32", "image width in pixels"},
        {"data.cell", "8", "pixels per ground-truth label token"},
        {"data.band_fractions", "0.4,0.35,0.25", "upper body, lower body, shoes; must sum to 1"},
        {"data.figure_width", "0.5", "figure width as a fraction of the label grid"},
        {"data.identities", "128", "number of identities"},
        {"data.images_per_identity", "16", "images generated per identity"},
        {"data.palette_size", "8", "shared color palette size"},
        {"data.shade_jitter", "24", "per-identity 8-bit shade offset range"},
        {"data.background_min", "96", "lowest background gray level"},
        {"data.background_max", "160", "highest background gray level"},
        {"data.background_tint", "12", "per-channel background tint range"},
        {"data.noise_sigma", "6", "per-pixel gaussian noise, 8-bit units"},
        {"data.boundary_jitter", "2", "per-image band boundary shift in pixels"},
        {"data.figure_jitter", "2", "per-image horizontal figure shift in pixels"},
        // backbone
        {"model.patch_size", "4", "patch embedding stride"},
        {"model.embed_dim", "32", "first-stage channel count"},
        {"model.depths", "2,2", "blocks per stage"},
        {"model.heads", "2,4", "attention heads per stage"},
        {"model.window", "4", "attention window side"},
        {"model.mlp_ratio", "4", "MLP hidden width multiplier"},
        {"model.shifted_windows", "false", "cyclically shift every second block"},
        {"model.controller_hidden", "16", "controller hidden width"},
        {"model.dino_hidden", "256", "projection head width"},
        {"model.prototypes", "1024", "projection head output dimension K"},
        {"model.semantic_blocks", "2", "semantic head linear/bn/relu blocks"},
        {"model.semantic_hidden", "64", "semantic head width"},
        {"model.parts", "3", "semantic parts N (background adds one class)"},
        // optimization
        {"train.batch_size", "32", "images per step"},
        {"train.phase1_epochs", "30", "self-distillation epochs"},
        {"train.phase2_epochs", "10", "semantic fine-tuning epochs"},
        {"train.lr", "0.2", "phase-1 peak learning rate"},
        {"train.phase2_lr_ratio", "0.1", "phase-2 peak learning rate over phase-1"},
        {"train.lr_min", "1e-6", "cosine schedule floor"},
        {"train.momentum", "0.9", "SGD momentum"},
        {"train.weight_decay", "1e-4", "L2 decay on matrices"},
        {"train.ema_momentum", "0.996", "teacher EMA momentum"},
        {"train.center_momentum", "0.9", "teacher logit center momentum"},
        {"train.temp_student", "0.1", "student softmax temperature"},
        {"train.temp_teacher", "0.04", "teacher softmax temperature"},
        {"train.alpha", "0.5", "balance between the two losses"},
        {"train.lambda_dist", "bernoulli:0.5", "bernoulli:p | uniform | beta:a,b | fixed:v"},
        {"train.masking", "true", "add the masked re-feed term to the semantic loss"},
        // augmentation
        {"augment.crop_min_scale", "0.6", "smallest crop area fraction"},
        {"augment.crop_max_scale", "1", "largest crop area fraction"},
        {"augment.flip_prob", "0.5", "horizontal flip probability"},
        {"augment.brightness", "0.4", "brightness jitter"},
        {"augment.contrast", "0.4", "contrast jitter"},
        {"augment.saturation", "0.4", "saturation jitter"},
        // labeler
        {"labeler.kmeans_restarts", "10", "k-means restarts"},
        {"labeler.kmeans_max_iter", "100", "k-means iteration cap"},
        // analysis
        {"analysis.labels", "ground_truth", "ground_truth | pseudo"},
        {"analysis.probes", "true", "fit linear probes during sweeps"},
    };
    return keys;
}

class Config {
public:
    Config() {
        for (const auto& k : config_schema()) values_[k.name] = k.default_value;
    }

    static bool known(const std::string& key) {
        for (const auto& k : config_schema())
            if (key == k.name) return true;
        return false;
    }

    void set(const std::string& key, const std::string& value) {
        if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
        values_[key] = value;
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }

    /// Parses "key = value" lines; '#' starts a comment. `source` names the
    /// origin in error messages.
    void merge_text(const std::string& text, const std::string& source = "<config>") {
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
            if (!known(key)) throw ConfigError(source + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
            values_[key] = value;
        }
    }

    void merge_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        merge_text(ss.str(), path);
    }

    std::string serialize() const {
        std::ostringstream os;
        for (const auto& k : config_schema()) os << k.name << " = " << values_.at(k.name) << '\n';
        return os.str();
    }

    /// Commented listing of every key with its default.
    static std::string documentation() {
        std::ostringstream os;
        for (const auto& k : config_schema()) os << "# " << k.doc << '\n' << k.name << " = " << k.default_value << "\n\n";
        return os.str();
    }

    std::int64_t integer(const std::string& key) const {
        const auto& v = get(key);
        try {
            std::size_t used = 0;
            const long long x = std::stoll(v, &used);
            if (used == v.size()) return x;
        } catch (const std::exception&) {
        }
        throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
    }

    std::size_t count(const std::string& key) const {
        const auto x = integer(key);
        if (x < 0) throw ConfigError("config key '" + key + "': must be non-negative");
        return static_cast<std::size_t>(x);
    }

    double real(const std::string& key) const { return parse_real(key, get(key)); }

    bool boolean(const std::string& key) const {
        const auto& v = get(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
    }

    std::vector<double> reals(const std::string& key) const {
        std::vector<double> out;
        std::stringstream ss(get(key));
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(parse_real(key, trim(item)));
        if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
        return out;
    }

    std::vector<std::size_t> counts(const std::string& key) const {
        std::vector<std::size_t> out;
        for (double v : reals(key)) {
            if (v < 0 || v != std::floor(v)) throw ConfigError("config key '" + key + "': expected non-negative integers");
            out.push_back(static_cast<std::size_t>(v));
        }
        return out;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static double parse_real(const std::string& key, const std::string& v) {
        try {
            std::size_t used = 0;
            const double x = std::stod(v, &used);
            if (used == v.size()) return x;
        } catch (const std::exception&) {
        }
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }

    std::map<std::string, std::string> values_;
};

inline SyntheticSpec synthetic_spec_from(const Config& c) {
    SyntheticSpec s;
    s.image_h = c.count("data.image_h");
    s.image_w = c.count("data.image_w");
    s.cell = c.count("data.cell");
    const auto f = c.reals("data.band_fractions");
    if (f.size() != 3) throw ConfigError("config key 'data.band_fractions': expected three values");
    s.band_fractions = {f[0], f[1], f[2]};
    s.figure_width = c.real("data.figure_width");
    s.identities = c.count("data.identities");
    s.images_per_identity = c.count("data.images_per_identity");
    s.palette_size = c.count("data.palette_size");
    s.shade_jitter = c.real("data.shade_jitter");
    s.background_min = c.real("data.background_min");
    s.background_max = c.real("data.background_max");
    s.background_tint = c.real("data.background_tint");
    s.noise_sigma = c.real("data.noise_sigma");
    s.boundary_jitter = c.count("data.boundary_jitter");
    s.figure_jitter = c.count("data.figure_jitter");
    try {
        s.validate();
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    return s;
}

/// Builds and validates the training configuration; image size comes from
/// the data keys.
inline TrainConfig train_config_from(const Config& c) {
    TrainConfig t;
    t.seed = static_cast<std::uint64_t>(c.integer("seed"));
    auto& b = t.backbone;
    b.image_h = c.count("data.image_h");
    b.image_w = c.count("data.image_w");
    b.patch_size = c.count("model.patch_size");
    b.embed_dim = c.count("model.embed_dim");
    b.depths = c.counts("model.depths");
    b.heads = c.counts("model.heads");
    b.window_size = c.count("model.window");
    b.mlp_ratio = c.count("model.mlp_ratio");
    b.shifted_windows = c.boolean("model.shifted_windows");
    b.controller_hidden = c.count("model.controller_hidden");
    t.dino_head.hidden = c.count("model.dino_hidden");
    t.dino_head.prototypes = c.count("model.prototypes");
    t.semantic.blocks = c.count("model.semantic_blocks");
    t.semantic.hidden = c.count("model.semantic_hidden");
    t.semantic.parts = c.count("model.parts");
    t.labeler.parts = t.semantic.parts;
    t.labeler.kmeans.restarts = c.count("labeler.kmeans_restarts");
    t.labeler.kmeans.max_iter = c.count("labeler.kmeans_max_iter");
    t.batch_size = c.count("train.batch_size");
    t.phase1_epochs = c.count("train.phase1_epochs");
    t.phase2_epochs = c.count("train.phase2_epochs");
    t.lr = c.real("train.lr");
    t.phase2_lr_ratio = c.real("train.phase2_lr_ratio");
    t.lr_min = c.real("train.lr_min");
    t.momentum = c.real("train.momentum");
    t.weight_decay = c.real("train.weight_decay");
    t.ema_momentum = c.real("train.ema_momentum");
    t.center_momentum = c.real("train.center_momentum");
    t.temp_student = c.real("train.temp_student");
    t.temp_teacher = c.real("train.temp_teacher");
    t.weights.alpha = c.real("train.alpha");
    t.masking = c.boolean("train.masking");
    t.augment.crop_min_scale = c.real("augment.crop_min_scale");
    t.augment.crop_max_scale = c.real("augment.crop_max_scale");
    t.augment.flip_prob = c.real("augment.flip_prob");
    t.augment.brightness = c.real("augment.brightness");
    t.augment.contrast = c.real("augment.contrast");
    t.augment.saturation = c.real("augment.saturation");
    try {
        t.lambda_dist = LambdaDistribution::parse(c.get("train.lambda_dist"));
        t.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return t;
}

}  // namespace solider

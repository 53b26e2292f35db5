#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kan/common.hpp"
#include "kan/model.hpp"
#include "kan/train.hpp"

namespace kan {

// Plain key=value run configuration ('#' starts a comment). Unknown keys are
// rejected; path values resolve relative to the config file's directory.
class RunConfig {
public:
    static const std::set<std::string>& known_keys() {
        static const std::set<std::string> keys = {
            "model.variant", "model.conv1_out", "model.conv2_out", "model.kernel",
            "model.hidden1", "model.hidden2", "model.grid_size", "model.spline_order",
            "model.grid_min", "model.grid_max", "model.rbf_centers", "model.taylor_terms",
            "model.taylor_norm", "model.input_h", "model.input_w",
            "data.kind", "data.path", "data.images", "data.labels",
            "data.train_images", "data.train_labels", "data.val_images", "data.val_labels",
            "data.test_images", "data.test_labels",
            "data.classes", "data.per_class", "data.hw", "data.noise_sigma",
            "data.balance_per_class",
            "train.lr", "train.batch_size", "train.weight_decay", "train.epochs",
            "train.shuffle", "train.early_stop_patience",
            "seed", "out_dir",
        };
        return keys;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream in(path);
        require<IoError>(static_cast<bool>(in), "cannot open config: ", path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        RunConfig cfg;
        cfg.base_dir_ = std::filesystem::absolute(path).parent_path().string();
        cfg.source_text_ = text;
        cfg.parse(text, path);
        return cfg;
    }

    void apply_override(const std::string& assignment) {
        const auto eq = assignment.find('=');
        require<ConfigError>(eq != std::string::npos, "override must be key=value, got '",
                             assignment, "'");
        set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    }

    void set(const std::string& key, const std::string& value) {
        require<ConfigError>(known_keys().count(key) == 1, "unknown config key '", key, "'");
        values_[key] = value;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback = "") const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    long get_int(const std::string& key, long fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stol(it->second);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not an integer: " + it->second);
        }
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not a number: " + it->second);
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const std::string& v = it->second;
        if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
        if (v == "0" || v == "false" || v == "off" || v == "no") return false;
        throw ConfigError("config key '" + key + "' is not a boolean: " + v);
    }

    // Paths resolve relative to the config file location.
    std::string get_path(const std::string& key) const {
        const std::string v = get(key);
        if (v.empty()) return v;
        std::filesystem::path p(v);
        if (p.is_absolute() || base_dir_.empty()) return p.string();
        return (std::filesystem::path(base_dir_) / p).lexically_normal().string();
    }

    const std::string& source_text() const { return source_text_; }

    // Resolved snapshot in sorted key order.
    std::string snapshot() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
        return out;
    }

    ModelSpec model_spec(int classes) const {
        ModelSpec s;
        s.variant = parse_variant(get("model.variant", "sbtaylor"));
        s.backbone.conv1_out = static_cast<int>(get_int("model.conv1_out", 4));
        s.backbone.conv2_out = static_cast<int>(get_int("model.conv2_out", 4));
        s.backbone.kernel = static_cast<int>(get_int("model.kernel", 3));
        s.backbone.input_h = static_cast<int>(get_int("model.input_h", 64));
        s.backbone.input_w = static_cast<int>(get_int("model.input_w", 64));
        s.hidden1 = static_cast<int>(get_int("model.hidden1", 16));
        s.hidden2 = static_cast<int>(get_int("model.hidden2", 16));
        s.classes = classes;
        s.grid_size = static_cast<int>(get_int("model.grid_size", 5));
        s.spline_order = static_cast<int>(get_int("model.spline_order", 3));
        s.grid_min = get_double("model.grid_min", -1.0);
        s.grid_max = get_double("model.grid_max", 1.0);
        s.rbf_centers = static_cast<int>(get_int("model.rbf_centers", 8));
        s.taylor_terms = static_cast<int>(get_int("model.taylor_terms", 5));
        s.taylor_norm = get_bool("model.taylor_norm", true);
        s.validate();
        return s;
    }

    TrainConfig train_config(std::uint64_t seed) const {
        TrainConfig t;
        t.lr = get_double("train.lr", 1e-4);
        t.batch_size = static_cast<int>(get_int("train.batch_size", 32));
        t.weight_decay = get_double("train.weight_decay", 1e-4);
        t.epochs = static_cast<int>(get_int("train.epochs", 50));
        t.shuffle = get_bool("train.shuffle", true);
        t.early_stop_patience = static_cast<int>(get_int("train.early_stop_patience", 0));
        t.seed = seed;
        return t;
    }

private:
    static std::string trim(const std::string& s) {
        std::size_t a = s.find_first_not_of(" \t\r\n");
        std::size_t b = s.find_last_not_of(" \t\r\n");
        return a == std::string::npos ? "" : s.substr(a, b - a + 1);
    }

    void parse(const std::string& text, const std::string& path) {
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            require<ConfigError>(eq != std::string::npos, path, ":", lineno,
                                 ": expected key=value, got '", line, "'");
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }

    std::map<std::string, std::string> values_;
    std::string base_dir_;
    std::string source_text_;
};

}  // namespace kan

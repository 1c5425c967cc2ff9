#pragma once

#include <algorithm>
#include <array>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "t2u/losses.hpp"
#include "t2u/model.hpp"
#include "t2u/optim.hpp"

namespace t2u {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct TrainOptions {
    std::size_t epochs = 200;
    std::size_t batch_size = 4;
    bool augment = false;
    LossConfig loss;
    AdamConfig adam;
    PlateauConfig plateau;
    std::uint64_t seed = 0;
};

/// Flat `key = value` run configuration with `#` comments and dotted keys.
///
/// A config file must list every known key; unknown or duplicate keys are
/// rejected. `defaults()` gives the desk-scale configuration.
class RunConfig {
public:
    static const std::vector<std::pair<std::string, std::string>>& schema() {
        static const std::vector<std::pair<std::string, std::string>> keys{
            {"run.seed", "0"},
            {"model.input_size", "32"},
            {"model.in_channels", "1"},
            {"model.unet_branch", "true"},
            {"model.dropout", "0.2"},
            {"unet.widths", "8,16,32,64"},
            {"unet.out_channels", "16"},
            {"cnn.widths", "8,16,32"},
            {"wasp.enabled", "true"},
            {"wasp.dense_skip", "true"},
            {"wasp.branch_channels", "32"},
            {"wasp.rates", "1,2,4,8"},
            {"vit.patch", "1"},
            {"vit.dim", "32"},
            {"vit.layers", "2"},
            {"vit.heads", "4"},
            {"vit.mlp_ratio", "2"},
            {"decoder.widths", "32,16,8"},
            {"transunet.out_channels", "16"},
            {"fusion.channels", "16"},
            {"loss.kind", "bce_plus_dice"},
            {"loss.dice_smooth", "1"},
            {"loss.bce_epsilon", "1e-7"},
            {"optim.lr", "0.0003"},
            {"optim.beta1", "0.9"},
            {"optim.beta2", "0.999"},
            {"optim.eps", "1e-8"},
            {"sched.patience", "3"},
            {"sched.factor", "0.1"},
            {"sched.min_lr", "1e-6"},
            {"sched.threshold", "1e-6"},
            {"train.epochs", "200"},
            {"train.batch_size", "4"},
            {"train.augment", "false"},
            {"data.split", "0.8,0.1,0.1"},
            {"data.dir", ""},
            {"data.synthetic", "0"},
        };
        return keys;
    }

    static bool known(const std::string& key) {
        const auto& s = schema();
        return std::any_of(s.begin(), s.end(), [&](const auto& kv) { return kv.first == key; });
    }

    static RunConfig defaults() {
        RunConfig c;
        for (const auto& [k, v] : schema()) c.values_[k] = v;
        return c;
    }

    /// Parses a complete config text. Every schema key must be present.
    static RunConfig parse(const std::string& text) {
        RunConfig c;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
            }
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (!known(key)) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
            if (!c.values_.emplace(key, value).second) {
                throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
            }
        }
        for (const auto& kv : schema()) {
            if (!c.values_.count(kv.first)) throw ConfigError("config is missing required key '" + kv.first + "'");
        }
        return c;
    }

    /// Applies a `key=value` override.
    void set(const std::string& key, const std::string& value) {
        if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
        values_[key] = value;
    }

    void set_override(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
        set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    }

    const std::string& raw(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("config is missing required key '" + key + "'");
        return it->second;
    }

    std::size_t get_size(const std::string& key) const { return parse_size(key, raw(key)); }

    std::uint64_t get_u64(const std::string& key) const {
        const std::string& v = raw(key);
        if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
            throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
        }
        errno = 0;
        const auto r = std::strtoull(v.c_str(), nullptr, 10);
        if (errno == ERANGE) throw ConfigError("config key '" + key + "': value out of range");
        return r;
    }

    double get_double(const std::string& key) const { return parse_double(key, raw(key)); }

    bool get_bool(const std::string& key) const {
        const std::string& v = raw(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
    }

    std::vector<std::size_t> get_size_list(const std::string& key, std::size_t expected_len) const {
        std::vector<std::size_t> out;
        for (const auto& item : split_list(raw(key))) out.push_back(parse_size(key, item));
        if (expected_len && out.size() != expected_len) {
            throw ConfigError("config key '" + key + "': expected " + std::to_string(expected_len) + " values, got " +
                              std::to_string(out.size()));
        }
        return out;
    }

    std::vector<double> get_double_list(const std::string& key, std::size_t expected_len) const {
        std::vector<double> out;
        for (const auto& item : split_list(raw(key))) out.push_back(parse_double(key, item));
        if (expected_len && out.size() != expected_len) {
            throw ConfigError("config key '" + key + "': expected " + std::to_string(expected_len) + " values, got " +
                              std::to_string(out.size()));
        }
        return out;
    }

    ModelConfig model_config() const {
        ModelConfig m;
        m.input_size = get_size("model.input_size");
        m.in_channels = get_size("model.in_channels");
        m.use_unet_branch = get_bool("model.unet_branch");
        m.dropout_p = get_double("model.dropout");
        const auto uw = get_size_list("unet.widths", 4);
        std::copy(uw.begin(), uw.end(), m.unet_widths.begin());
        m.unet_out_channels = get_size("unet.out_channels");
        const auto cw = get_size_list("cnn.widths", 3);
        std::copy(cw.begin(), cw.end(), m.cnn_widths.begin());
        m.use_wasp = get_bool("wasp.enabled");
        m.wasp.dense_skip = get_bool("wasp.dense_skip");
        m.wasp.branch_channels = get_size("wasp.branch_channels");
        m.wasp.dilation_rates = get_size_list("wasp.rates", 0);
        m.wasp.in_channels = m.cnn_widths[2];
        m.vit.patch = get_size("vit.patch");
        m.vit.dim = get_size("vit.dim");
        m.vit.layers = get_size("vit.layers");
        m.vit.heads = get_size("vit.heads");
        m.vit.mlp_ratio = get_double("vit.mlp_ratio");
        const auto dw = get_size_list("decoder.widths", 3);
        std::copy(dw.begin(), dw.end(), m.decoder_widths.begin());
        m.transunet_out_channels = get_size("transunet.out_channels");
        m.fusion_channels = get_size("fusion.channels");
        return m;
    }

    TrainOptions train_options() const {
        TrainOptions t;
        t.epochs = get_size("train.epochs");
        t.batch_size = get_size("train.batch_size");
        t.augment = get_bool("train.augment");
        try {
            t.loss.kind = parse_loss_kind(raw("loss.kind"));
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config key 'loss.kind': ") + e.what());
        }
        t.loss.dice_smooth = get_double("loss.dice_smooth");
        t.loss.bce_epsilon = get_double("loss.bce_epsilon");
        t.adam.lr = get_double("optim.lr");
        t.adam.beta1 = get_double("optim.beta1");
        t.adam.beta2 = get_double("optim.beta2");
        t.adam.eps = get_double("optim.eps");
        t.plateau.patience = get_size("sched.patience");
        t.plateau.factor = get_double("sched.factor");
        t.plateau.min_lr = get_double("sched.min_lr");
        t.plateau.threshold = get_double("sched.threshold");
        t.seed = get_u64("run.seed");
        return t;
    }

    std::array<double, 3> split_ratios() const {
        const auto r = get_double_list("data.split", 3);
        return {r[0], r[1], r[2]};
    }

    std::uint64_t seed() const { return get_u64("run.seed"); }

    /// Checks every value. Throws ConfigError naming the offending key.
    void validate() const {
        for (const auto& kv : schema()) raw(kv.first);
        const ModelConfig m = model_config();
        try {
            m.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        const TrainOptions t = train_options();
        if (t.epochs == 0) throw ConfigError("config key 'train.epochs': must be >= 1");
        if (t.batch_size == 0) throw ConfigError("config key 'train.batch_size': must be >= 1");
        if (!(t.adam.lr >= 0)) throw ConfigError("config key 'optim.lr': must be >= 0");
        if (!(t.adam.beta1 >= 0 && t.adam.beta1 < 1)) throw ConfigError("config key 'optim.beta1': must be in [0, 1)");
        if (!(t.adam.beta2 >= 0 && t.adam.beta2 < 1)) throw ConfigError("config key 'optim.beta2': must be in [0, 1)");
        if (!(t.adam.eps > 0)) throw ConfigError("config key 'optim.eps': must be positive");
        try {
            t.loss.validate();
            t.plateau.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        const auto r = split_ratios();
        double total = 0;
        for (double v : r) {
            if (!(v >= 0)) throw ConfigError("config key 'data.split': ratios must be non-negative");
            total += v;
        }
        if (std::abs(total - 1.0) > 1e-9) throw ConfigError("config key 'data.split': ratios must sum to 1");
        const bool has_dir = !raw("data.dir").empty();
        const bool has_synth = get_size("data.synthetic") > 0;
        if (has_dir && has_synth) throw ConfigError("config keys 'data.dir' and 'data.synthetic' are mutually exclusive");
        if (m.in_channels != 1 && m.in_channels != 3) throw ConfigError("config key 'model.in_channels': must be 1 or 3");
    }

    /// Canonical text form: schema order, one `key = value` per line.
    std::string echo() const {
        std::ostringstream os;
        for (const auto& kv : schema()) os << kv.first << " = " << raw(kv.first) << '\n';
        return os.str();
    }

    bool operator==(const RunConfig&) const = default;

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static std::vector<std::string> split_list(const std::string& s) {
        std::vector<std::string> out;
        std::string item;
        std::istringstream in(s);
        while (std::getline(in, item, ',')) out.push_back(trim(item));
        return out;
    }

    static std::size_t parse_size(const std::string& key, const std::string& v) {
        if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
            throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
        }
        errno = 0;
        const auto r = std::strtoull(v.c_str(), nullptr, 10);
        if (errno == ERANGE) throw ConfigError("config key '" + key + "': value out of range");
        return static_cast<std::size_t>(r);
    }

    static double parse_double(const std::string& key, const std::string& v) {
        char* end = nullptr;
        errno = 0;
        const double d = std::strtod(v.c_str(), &end);
        if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(d)) {
            throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
        }
        return d;
    }

    std::map<std::string, std::string> values_;
};

}  // namespace t2u

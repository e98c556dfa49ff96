#pragma once

// Flat `key = value` run configuration. Blank lines and `#` comments are
// ignored; unknown keys and malformed values are errors. Fractions such as
// `12/255` are accepted wherever a real number is expected.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "advshield/noise_update.hpp"
#include "advshield/purification.hpp"

namespace advshield {

class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

struct RunConfig {
    AttackConfig attack;
    std::string input, weights, output;
    std::string purifiers =
        "jpeg:90,jpeg:75,jpeg:50,bits:8,bits:3,resize:0.75:bilinear,resize:0.75:area,resize:0.5:bilinear,"
        "resize:0.5:area";
};

namespace detail {

inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double parse_real(const std::string& v, const std::string& key) {
    auto slash = v.find('/');
    try {
        if (slash == std::string::npos) return parse_double(v, key);
        double den = parse_double(trim(v.substr(slash + 1)), key);
        if (den == 0) throw ConfigError("zero denominator for " + key);
        return parse_double(trim(v.substr(0, slash)), key) / den;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument&) {
        throw ConfigError("bad real '" + v + "' for " + key);
    }
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& key) {
    std::size_t used = 0;
    std::uint64_t out = 0;
    try {
        if (!v.empty() && v[0] != '-') out = std::stoull(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError("bad non-negative integer '" + v + "' for " + key);
    return out;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ConfigError("bad boolean '" + v + "' for " + key + " (use true/false)");
}

inline std::string fmt_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

// One entry per key: how to set it and how to print it back.
struct ConfigField {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigField>& config_fields() {
    using namespace detail;
    auto real = [](std::string key, double AttackConfig::*m) {
        return ConfigField{key, [key, m](RunConfig& c, const std::string& v) { c.attack.*m = parse_real(v, key); },
                           [m](const RunConfig& c) { return fmt_real(c.attack.*m); }};
    };
    auto loss_real = [](std::string key, double LossConfig::*m) {
        return ConfigField{key,
                           [key, m](RunConfig& c, const std::string& v) { c.attack.losses.*m = parse_real(v, key); },
                           [m](const RunConfig& c) { return fmt_real(c.attack.losses.*m); }};
    };
    auto weight = [](std::string key, double LossWeights::*m) {
        return ConfigField{
            key, [key, m](RunConfig& c, const std::string& v) { c.attack.losses.weights.*m = parse_real(v, key); },
            [m](const RunConfig& c) { return fmt_real(c.attack.losses.weights.*m); }};
    };
    auto toggle = [](std::string key, bool LossToggles::*m) {
        return ConfigField{
            key, [key, m](RunConfig& c, const std::string& v) { c.attack.losses.enabled.*m = parse_bool(v, key); },
            [m](const RunConfig& c) { return std::string(c.attack.losses.enabled.*m ? "true" : "false"); }};
    };
    auto path = [](std::string key, std::string RunConfig::*m) {
        return ConfigField{key, [m](RunConfig& c, const std::string& v) { c.*m = v; },
                           [m](const RunConfig& c) { return c.*m; }};
    };
    static const std::vector<ConfigField> fields = {
        real("eta", &AttackConfig::eta),
        real("step", &AttackConfig::step),
        {"steps", [](RunConfig& c, const std::string& v) { c.attack.steps = parse_u64(v, "steps"); },
         [](const RunConfig& c) { return std::to_string(c.attack.steps); }},
        {"seed", [](RunConfig& c, const std::string& v) { c.attack.seed = parse_u64(v, "seed"); },
         [](const RunConfig& c) { return std::to_string(c.attack.seed); }},
        {"random_start",
         [](RunConfig& c, const std::string& v) { c.attack.random_start = parse_bool(v, "random_start"); },
         [](const RunConfig& c) { return std::string(c.attack.random_start ? "true" : "false"); }},
        weight("lambda_proj", &LossWeights::proj),
        weight("lambda_attn", &LossWeights::attn),
        weight("lambda_mtcnn", &LossWeights::mtcnn),
        weight("lambda_id", &LossWeights::id),
        toggle("proj", &LossToggles::proj),
        toggle("attn", &LossToggles::attn),
        toggle("mtcnn", &LossToggles::mtcnn),
        toggle("id", &LossToggles::id),
        loss_real("t_var", &LossConfig::t_var),
        loss_real("t_prob", &LossConfig::t_prob),
        loss_real("beta", &LossConfig::beta),
        loss_real("scale_k", &LossConfig::scale_k),
        loss_real("d_cell", &LossConfig::d_cell),
        loss_real("d_min", &LossConfig::d_min),
        loss_real("d_land", &LossConfig::d_land),
        {"blur", [](RunConfig& c, const std::string& v) { c.attack.blur.enabled = parse_bool(v, "blur"); },
         [](const RunConfig& c) { return std::string(c.attack.blur.enabled ? "true" : "false"); }},
        {"sobel_threshold",
         [](RunConfig& c, const std::string& v) { c.attack.blur.sobel_threshold = parse_real(v, "sobel_threshold"); },
         [](const RunConfig& c) { return fmt_real(c.attack.blur.sobel_threshold); }},
        {"mask_dilation",
         [](RunConfig& c, const std::string& v) { c.attack.blur.dilation = parse_u64(v, "mask_dilation"); },
         [](const RunConfig& c) { return std::to_string(c.attack.blur.dilation); }},
        {"blur_kernel", [](RunConfig& c, const std::string& v) { c.attack.blur.kernel = parse_u64(v, "blur_kernel"); },
         [](const RunConfig& c) { return std::to_string(c.attack.blur.kernel); }},
        {"blur_sigma", [](RunConfig& c, const std::string& v) { c.attack.blur.sigma = parse_real(v, "blur_sigma"); },
         [](const RunConfig& c) { return fmt_real(c.attack.blur.sigma); }},
        {"lowpass", [](RunConfig& c, const std::string& v) { c.attack.lowpass.enabled = parse_bool(v, "lowpass"); },
         [](const RunConfig& c) { return std::string(c.attack.lowpass.enabled ? "true" : "false"); }},
        {"lowpass_patch",
         [](RunConfig& c, const std::string& v) { c.attack.lowpass.patch = parse_u64(v, "lowpass_patch"); },
         [](const RunConfig& c) { return std::to_string(c.attack.lowpass.patch); }},
        {"lowpass_threshold",
         [](RunConfig& c, const std::string& v) {
             c.attack.lowpass.threshold = static_cast<int>(parse_u64(v, "lowpass_threshold"));
         },
         [](const RunConfig& c) { return std::to_string(c.attack.lowpass.threshold); }},
        path("input", &RunConfig::input),
        path("weights", &RunConfig::weights),
        path("output", &RunConfig::output),
        path("purifiers", &RunConfig::purifiers),
    };
    return fields;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : config_fields())
        if (f.key == key) return f.set(cfg, value);
    throw ConfigError("unknown config key '" + key + "'");
}

inline RunConfig parse_config(std::istream& in, const std::string& source = "<config>") {
    RunConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    std::map<std::string, std::size_t> seen;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        std::string where = source + ":" + std::to_string(lineno);
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(where + ": missing key");
        if (auto it = seen.find(key); it != seen.end())
            throw ConfigError(where + ": duplicate key '" + key + "' (first at line " + std::to_string(it->second) +
                              ")");
        seen[key] = lineno;
        try {
            set_config_value(cfg, key, value);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(where + ": " + e.what());
        }
    }
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    return parse_config(in, path);
}

// ADVSHIELD_SEED, when set, replaces the configured seed.
inline void apply_seed_override(RunConfig& cfg, const char* env_value) {
    if (env_value) cfg.attack.seed = detail::parse_u64(env_value, "ADVSHIELD_SEED");
}

// Every key with its effective value, in a fixed order; parseable by parse_config.
inline std::string echo_config(const RunConfig& cfg) {
    std::string s;
    for (const auto& f : config_fields()) s += f.key + " = " + f.get(cfg) + "\n";
    return s;
}

inline void validate_run_config(const RunConfig& cfg) {
    try {
        cfg.attack.validate();
        parse_purifier_list(cfg.purifiers);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

}  // namespace advshield

// SPDX-License-Identifier: Apache-2.0
#include "avf/harness.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace avf::harness {

const std::map<std::string, std::string>& Config::default_values() {
    static const std::map<std::string, std::string> defaults = {
        {"seed", "42"},

        {"world.kind", "affine_gaussian"},
        {"world.channels", "1"},
        {"world.grid_h", "1"},
        {"world.grid_w", "1"},
        {"world.gain", "0.8"},
        {"world.bias", "0.0"},
        {"world.noise_std", "0.3"},
        {"world.a", "1.05"},
        {"world.b", "0.3"},
        {"world.omega", "1.0"},
        {"world.vx", "1.0"},
        {"world.vy", "0.5"},
        {"world.kappa", "0.05"},
        {"world.forcing_std", "0.1"},
        {"world.dt", "0.2"},
        {"world.steps", "4096"},
        {"world.init_mean", "0.0"},
        {"world.init_std", "1.0"},
        {"world.burn_in", "64"},

        {"data.path", ""},
        {"data.train_frac", "0.8"},
        {"data.val_frac", "0.1"},

        {"net.hidden_dim", "32"},
        {"net.depth", "2"},
        {"net.embed_dim", "16"},
        {"net.mixing", "per_cell_dense"},
        {"net.attention_heads", "4"},

        // optimizer defaults follow the published recipe; the epoch budget is
        // deliberately desk-scale (the reference setting trains 300 epochs)
        {"stage1.epochs", "20"},
        {"stage1.steps_per_epoch", "100"},
        {"stage1.batch_size", "32"},
        {"stage1.lr_max", "1e-4"},
        {"stage1.lr_min", "1e-6"},
        {"stage1.weight_decay", "1e-4"},
        {"stage1.beta1", "0.9"},
        {"stage1.beta2", "0.999"},
        {"stage1.eps", "1e-8"},
        {"stage1.time.logit_mu", "-0.4"},
        {"stage1.time.logit_sigma", "1.0"},
        {"stage1.time.boundary_fraction", "0.25"},
        {"stage1.time.scheme", "logit_normal_order"},

        {"stage2.stages", "1:15:1e-5,2:15:1e-5"},
        {"stage2.k_train", "2"},
        {"stage2.steps_per_epoch", "32"},
        {"stage2.batch_size", "1"},
        {"stage2.crps_variant", "paper"},
        {"stage2.lat_weighted", "false"},
        {"stage2.weight_decay", "1e-4"},
        {"stage2.init_checkpoint", ""},

        {"eval.k", "20"},
        {"eval.horizons", "1,2,4,10"},
        {"eval.n_init", "20"},
        {"eval.crps_variant", "paper"},
        {"eval.sampler", "checkpoint"},
        {"eval.checkpoint", ""},

        {"bound.horizon", "8"},
        {"bound.n_samples", "10000"},
        {"bound.gap_states", "16"},
        {"bound.gap_samples", "2000"},
        {"bound.slack_mult", "3.0"},
        {"bound.sampler", "checkpoint"},
        {"bound.checkpoint", ""},

        {"crpsw1.n", "10000"},
        {"crpsw1.y", "0.0"},
    };
    return defaults;
}

Config Config::defaults() {
    Config cfg;
    cfg.values_ = default_values();
    return cfg;
}

void Config::set(const std::string& key, const std::string& value) {
    if (default_values().find(key) == default_values().end()) {
        throw std::invalid_argument("unknown config key: " + key);
    }
    values_[key] = value;
}

namespace {
std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}
} // namespace

void Config::apply_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read config file: " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                        ": expected key = value");
        }
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void Config::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw std::invalid_argument("--set expects key=value, got: " + assignment);
    }
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& Config::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("unknown config key: " + key);
    return it->second;
}

double Config::get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key " + key + ": not a number: " + v);
    }
}

long long Config::get_int(const std::string& key) const {
    const std::string& v = get(key);
    try {
        std::size_t used = 0;
        const long long i = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key " + key + ": not an integer: " + v);
    }
}

bool Config::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config key " + key + ": not a boolean: " + v);
}

std::vector<std::string> Config::get_str_list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<double> Config::get_list(const std::string& key) const {
    std::vector<double> out;
    for (const std::string& s : get_str_list(key)) {
        try {
            out.push_back(std::stod(s));
        } catch (const std::exception&) {
            throw std::invalid_argument("config key " + key + ": not a number: " + s);
        }
    }
    return out;
}

std::string Config::dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    return os.str();
}

worlds::AnalyticKernel kernel_from(const Config& cfg) {
    const std::string kind = cfg.get("world.kind");
    const std::size_t C = static_cast<std::size_t>(cfg.get_int("world.channels"));
    const std::size_t H = static_cast<std::size_t>(cfg.get_int("world.grid_h"));
    const std::size_t W = static_cast<std::size_t>(cfg.get_int("world.grid_w"));
    if (kind == "affine_gaussian") {
        return worlds::AnalyticKernel::affine(cfg.get_list("world.gain"),
                                              cfg.get_double("world.bias"),
                                              cfg.get_double("world.noise_std"), C, H, W);
    }
    if (kind == "chaotic_map") {
        return worlds::AnalyticKernel::chaotic(cfg.get_double("world.a"),
                                               cfg.get_double("world.b"),
                                               cfg.get_double("world.omega"),
                                               cfg.get_double("world.noise_std"), C, H, W);
    }
    if (kind == "advection2d") {
        return worlds::AnalyticKernel::advection(
            C, H, W, cfg.get_double("world.vx"), cfg.get_double("world.vy"),
            cfg.get_double("world.kappa"), cfg.get_double("world.forcing_std"),
            cfg.get_double("world.dt"));
    }
    throw std::invalid_argument("config key world.kind: unknown kernel kind: " + kind);
}

net::NetConfig net_config_from(const Config& cfg) {
    net::NetConfig nc;
    nc.channels = static_cast<std::size_t>(cfg.get_int("world.channels"));
    nc.grid_h = static_cast<std::size_t>(cfg.get_int("world.grid_h"));
    nc.grid_w = static_cast<std::size_t>(cfg.get_int("world.grid_w"));
    nc.hidden_dim = static_cast<std::size_t>(cfg.get_int("net.hidden_dim"));
    nc.depth = static_cast<std::size_t>(cfg.get_int("net.depth"));
    nc.embed_dim = static_cast<std::size_t>(cfg.get_int("net.embed_dim"));
    const std::string mixing = cfg.get("net.mixing");
    if (mixing == "per_cell_dense") {
        nc.mixing = net::Mixing::per_cell_dense;
    } else if (mixing == "full_attention") {
        nc.mixing = net::Mixing::full_attention;
    } else {
        throw std::invalid_argument("config key net.mixing: unknown mode: " + mixing);
    }
    nc.attention_heads = static_cast<std::size_t>(cfg.get_int("net.attention_heads"));
    nc.validate();
    return nc;
}

transport::TimeSamplerConfig time_sampler_from(const Config& cfg) {
    transport::TimeSamplerConfig tc;
    tc.logit_mu = cfg.get_double("stage1.time.logit_mu");
    tc.logit_sigma = cfg.get_double("stage1.time.logit_sigma");
    tc.boundary_fraction = cfg.get_double("stage1.time.boundary_fraction");
    const std::string scheme = cfg.get("stage1.time.scheme");
    if (scheme == "logit_normal_order") {
        tc.scheme = transport::TimeScheme::logit_normal_order;
    } else if (scheme == "uniform_nested") {
        tc.scheme = transport::TimeScheme::uniform_nested;
    } else {
        throw std::invalid_argument("config key stage1.time.scheme: unknown scheme: " + scheme);
    }
    tc.validate();
    return tc;
}

ensemble::Stage2Config stage2_from(const Config& cfg) {
    ensemble::Stage2Config sc;
    sc.schedule.stages.clear();
    for (const std::string& item : cfg.get_str_list("stage2.stages")) {
        // horizon:epochs:lr triples
        std::stringstream ss(item);
        std::string part;
        std::vector<std::string> parts;
        while (std::getline(ss, part, ':')) parts.push_back(part);
        if (parts.size() != 3) {
            throw std::invalid_argument(
                "config key stage2.stages: expected horizon:epochs:lr, got: " + item);
        }
        ensemble::CurriculumStage stage;
        stage.horizon = std::stoul(parts[0]);
        stage.epochs = std::stoul(parts[1]);
        stage.lr = std::stod(parts[2]);
        sc.schedule.stages.push_back(stage);
    }
    sc.schedule.k_train = static_cast<std::size_t>(cfg.get_int("stage2.k_train"));
    sc.steps_per_epoch = static_cast<std::size_t>(cfg.get_int("stage2.steps_per_epoch"));
    sc.batch_size = static_cast<std::size_t>(cfg.get_int("stage2.batch_size"));
    const std::string variant = cfg.get("stage2.crps_variant");
    if (variant == "paper") {
        sc.variant = metrics::CrpsVariant::paper;
    } else if (variant == "fair") {
        sc.variant = metrics::CrpsVariant::fair;
    } else {
        throw std::invalid_argument("config key stage2.crps_variant: unknown variant: " +
                                    variant);
    }
    sc.lat_weighted = cfg.get_bool("stage2.lat_weighted");
    sc.schedule.validate();
    return sc;
}

AdamWConfig adamw_from(const Config& cfg, const std::string& section) {
    AdamWConfig ac;
    ac.beta1 = cfg.get_double("stage1.beta1");
    ac.beta2 = cfg.get_double("stage1.beta2");
    ac.eps = cfg.get_double("stage1.eps");
    ac.weight_decay = cfg.get_double(section + ".weight_decay");
    return ac;
}

} // namespace avf::harness

// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "CLI11.hpp"
#include "avf/harness.hpp"

namespace avf::harness {

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir = "out";
    long long seed = -1;
    bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "flat key = value config file");
    cmd->add_option("--set", opts.overrides, "override a config key (key=value, repeatable)");
    cmd->add_option("--out", opts.out_dir, "output directory (manifest and artifacts)");
    cmd->add_option("--seed", opts.seed, "root seed override")->each([&](const std::string&) {
        opts.seed_set = true;
    });
}

Config resolve(const CommonOpts& opts) {
    Config cfg = Config::defaults();
    if (!opts.config_path.empty()) cfg.apply_file(opts.config_path);
    for (const std::string& o : opts.overrides) cfg.apply_override(o);
    if (opts.seed_set) cfg.set("seed", std::to_string(opts.seed));
    return cfg;
}

} // namespace

int cli(const std::vector<std::string>& args) {
    CLI::App app{"one-step generative transport lab for autoregressive forecasting"};
    app.require_subcommand(1);

    struct Sub {
        const char* name;
        const char* description;
        RunResult (*run)(const Config&, const std::string&);
        CommonOpts opts;
        CLI::App* cmd = nullptr;
    };
    std::vector<Sub> subs = {
        {"gen-data", "generate a synthetic-world dataset file", run_gen_data, {}, nullptr},
        {"train-stage1", "one-step transport pretraining", run_train_stage1, {}, nullptr},
        {"finetune-stage2", "curriculum CRPS calibration", run_finetune_stage2, {}, nullptr},
        {"evaluate", "ensemble rollout metrics (rmse/spread/ssr/crps)", run_evaluate, {},
         nullptr},
        {"verify-bound", "empirical rollout amplification bound report", run_verify_bound, {},
         nullptr},
        {"check-crps-w1", "numeric CRPS vs W1 inspection", run_check_crps_w1, {}, nullptr},
    };
    for (Sub& s : subs) {
        s.cmd = app.add_subcommand(s.name, s.description);
        add_common(s.cmd, s.opts);
    }

    std::vector<const char*> argv;
    argv.push_back("avflow");
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e); // prints help, exit 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    for (Sub& s : subs) {
        if (!s.cmd->parsed()) continue;
        try {
            const Config cfg = resolve(s.opts);
            const RunResult result = s.run(cfg, s.opts.out_dir);
            std::cout << s.name << ": ok, manifest at " << result.manifest_path << "\n";
            return 0;
        } catch (const std::invalid_argument& e) {
            std::cerr << s.name << ": " << e.what() << "\n";
            return 1;
        } catch (const std::domain_error& e) {
            std::cerr << s.name << ": " << e.what() << "\n";
            return 1;
        } catch (const std::exception& e) {
            std::cerr << s.name << ": " << e.what() << "\n";
            return 2;
        }
    }
    return 1;
}

} // namespace avf::harness

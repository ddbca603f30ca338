// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "avf/ensemble.hpp"
#include "avf/optim.hpp"
#include "avf/synthworlds.hpp"
#include "avf/theorybench.hpp"
#include "avf/transport.hpp"

namespace avf::harness {

/// Flat key = value configuration with dotted section keys. Every key has a
/// recorded default; unknown keys are rejected by name. The resolved
/// configuration is persisted verbatim in the run manifest.
class Config {
public:
    static Config defaults();
    static const std::map<std::string, std::string>& default_values();

    void apply_file(const std::string& path);
    /// "key=value" as passed to --set.
    void apply_override(const std::string& assignment);
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    long long get_int(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<double> get_list(const std::string& key) const;
    std::vector<std::string> get_str_list(const std::string& key) const;

    /// Sorted "key = value" lines.
    std::string dump() const;

private:
    std::map<std::string, std::string> values_;
};

worlds::AnalyticKernel kernel_from(const Config& cfg);
net::NetConfig net_config_from(const Config& cfg);
transport::TimeSamplerConfig time_sampler_from(const Config& cfg);
ensemble::Stage2Config stage2_from(const Config& cfg);
AdamWConfig adamw_from(const Config& cfg, const std::string& section);

/// FNV-1a 64 over the file bytes, as a hex string.
std::string file_checksum(const std::string& path);

struct RunResult {
    std::string manifest_path;
    std::vector<std::string> outputs;
};

RunResult run_gen_data(const Config& cfg, const std::string& out_dir);
RunResult run_train_stage1(const Config& cfg, const std::string& out_dir);
RunResult run_finetune_stage2(const Config& cfg, const std::string& out_dir);
RunResult run_evaluate(const Config& cfg, const std::string& out_dir);
RunResult run_verify_bound(const Config& cfg, const std::string& out_dir);
RunResult run_check_crps_w1(const Config& cfg, const std::string& out_dir);

/// Stage-I training on an in-memory dataset; returns the trained parameters
/// and per-epoch losses. Used by the CLI paths and the self-contained
/// bound/evaluation runs.
struct Stage1Result {
    net::NetParams params;
    std::vector<double> epoch_losses;
    bool aborted_nan = false;
};
Stage1Result train_stage1(const Config& cfg, const worlds::Dataset& data, RngStream rng);

/// Entry point behind the avflow binary: subcommands gen-data, train-stage1,
/// finetune-stage2, evaluate, verify-bound, check-crps-w1. Exit codes:
/// 0 success, 1 validation error, 2 runtime failure.
int cli(const std::vector<std::string>& args);

} // namespace avf::harness

// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>

#include "avf/harness.hpp"
#include "json.hpp"

namespace avf::harness {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checksum: cannot read " + path);
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        const std::streamsize n = in.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
        if (!in) break;
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

namespace {

/// Collects inputs/outputs and writes the run manifest.
class RunRecorder {
public:
    RunRecorder(std::string command, const Config& cfg, std::string out_dir)
        : command_(std::move(command)),
          out_dir_(std::move(out_dir)),
          config_dump_(cfg.dump()),
          seed_(cfg.get_int("seed")),
          start_(std::chrono::steady_clock::now()) {
        fs::create_directories(out_dir_);
    }

    std::string path(const std::string& name) const { return (fs::path(out_dir_) / name).string(); }

    void add_input(const std::string& p) { inputs_.push_back(p); }
    void add_output(const std::string& p) { outputs_.push_back(p); }
    void set_status(const std::string& s) { status_ = s; }
    void set_nfe(std::uint64_t n) { nfe_ = n; }
    void note(const std::string& key, const ordered_json& value) { extra_[key] = value; }

    RunResult finalize() {
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        ordered_json j;
        j["command"] = command_;
        j["schema_version"] = 1;
        j["seed"] = seed_;
        j["status"] = status_;
        j["config"] = config_dump_;
        j["inputs"] = ordered_json::array();
        for (const std::string& p : inputs_) {
            j["inputs"].push_back({{"path", p}, {"checksum", file_checksum(p)}});
        }
        j["outputs"] = ordered_json::array();
        for (const std::string& p : outputs_) {
            j["outputs"].push_back({{"path", fs::path(p).filename().string()},
                                    {"checksum", file_checksum(p)}});
        }
        j["nfe_total"] = nfe_;
        for (auto& [k, v] : extra_.items()) j[k] = v;
        j["wall_clock_sec"] = wall;

        RunResult result;
        result.manifest_path = path("manifest.json");
        std::ofstream out(result.manifest_path);
        out << j.dump(2) << "\n";
        if (!out) throw std::runtime_error("cannot write " + result.manifest_path);
        result.outputs = outputs_;
        return result;
    }

private:
    std::string command_;
    std::string out_dir_;
    std::string config_dump_;
    long long seed_;
    std::chrono::steady_clock::time_point start_;
    std::vector<std::string> inputs_;
    std::vector<std::string> outputs_;
    std::string status_ = "ok";
    std::uint64_t nfe_ = 0;
    ordered_json extra_ = ordered_json::object();
};

worlds::SplitSpec split_from(const Config& cfg) {
    worlds::SplitSpec s;
    s.train_frac = cfg.get_double("data.train_frac");
    s.val_frac = cfg.get_double("data.val_frac");
    return s;
}

worlds::Dataset make_dataset(const Config& cfg) {
    const worlds::AnalyticKernel kernel = kernel_from(cfg);
    const worlds::InitialDist init{cfg.get_double("world.init_mean"),
                                   cfg.get_double("world.init_std")};
    return worlds::generate_dataset(kernel, init,
                                    static_cast<std::size_t>(cfg.get_int("world.steps")),
                                    RngStream(cfg.get_int("seed")).child("data"),
                                    split_from(cfg),
                                    static_cast<std::size_t>(cfg.get_int("world.burn_in")));
}

/// Loads data.path when set (recording it as an input), otherwise generates
/// the world deterministically from the seed.
worlds::Dataset acquire_dataset(const Config& cfg, RunRecorder& rec) {
    const std::string path = cfg.get("data.path");
    if (!path.empty()) {
        rec.add_input(path);
        return worlds::load_dataset(path, split_from(cfg));
    }
    return make_dataset(cfg);
}

void check_grid(const Config& cfg, const worlds::Dataset& data) {
    const auto& s = data.fields.shape();
    if (s[1] != static_cast<std::size_t>(cfg.get_int("world.channels")) ||
        s[2] != static_cast<std::size_t>(cfg.get_int("world.grid_h")) ||
        s[3] != static_cast<std::size_t>(cfg.get_int("world.grid_w"))) {
        throw std::invalid_argument("dataset grid " + shape_to_string(s) +
                                    " does not match the world.* config keys");
    }
}

void write_loss_csv(const std::vector<double>& losses, const std::string& path) {
    std::ofstream out(path);
    out << "epoch,loss\n";
    for (std::size_t e = 0; e < losses.size(); ++e) {
        out << e << "," << metrics::format_sig12(losses[e]) << "\n";
    }
    if (!out) throw std::runtime_error("cannot write " + path);
}

using EpochHook = std::function<void(const net::NetParams&, std::size_t, double)>;

Stage1Result train_stage1_impl(const Config& cfg, const worlds::Dataset& data, RngStream rng,
                               const EpochHook& on_epoch) {
    const net::NetConfig nc = net_config_from(cfg);
    check_grid(cfg, data);

    Stage1Result result;
    result.params = net::NetParams::init(nc, rng.child("init"));
    const AdamWConfig acfg = adamw_from(cfg, "stage1");
    AdamWState opt = AdamWState::like(result.params.tensors);
    const transport::TimeSamplerConfig tcfg = time_sampler_from(cfg);

    const std::size_t epochs = static_cast<std::size_t>(cfg.get_int("stage1.epochs"));
    const std::size_t steps = static_cast<std::size_t>(cfg.get_int("stage1.steps_per_epoch"));
    const std::size_t batch = static_cast<std::size_t>(cfg.get_int("stage1.batch_size"));
    const double lr_max = cfg.get_double("stage1.lr_max");
    const double lr_min = cfg.get_double("stage1.lr_min");
    const std::size_t per = nc.channels * nc.grid_h * nc.grid_w;

    net::NetParams last_good = result.params;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const double lr = cosine_lr(epoch, epochs, lr_max, lr_min);
        RngStream epoch_rng = rng.child("epoch").child(std::uint64_t(epoch));
        double epoch_loss = 0.0;
        for (std::size_t step = 0; step < steps; ++step) {
            RngStream srng = epoch_rng.child("step").child(std::uint64_t(step));
            Tensor cond({batch, nc.channels, nc.grid_h, nc.grid_w});
            Tensor target(cond.shape());
            Tensor noise(cond.shape());
            std::vector<double> rvec(batch), tvec(batch);
            double* cd = cond.mutable_data();
            double* xd = target.mutable_data();
            double* ed = noise.mutable_data();
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t tau = srng.next_u64() % (data.train_end - 1);
                Tensor c = worlds::normalize(data.field(tau), data.stats);
                Tensor x = worlds::normalize(data.field(tau + 1), data.stats);
                std::copy(c.data(), c.data() + per, cd + b * per);
                std::copy(x.data(), x.data() + per, xd + b * per);
                Tensor eps = srng.gaussian({nc.channels, nc.grid_h, nc.grid_w});
                std::copy(eps.data(), eps.data() + per, ed + b * per);
                std::tie(rvec[b], tvec[b]) = transport::sample_times(srng, tcfg);
            }
            Graph g;
            auto vars = net::leaf_params(g, result.params);
            Var loss = transport::stage1_loss_graph(g, vars, nc, cond, target, noise, rvec,
                                                    tvec);
            const double loss_value = loss.value().item();
            if (!std::isfinite(loss_value)) {
                result.params = last_good;
                result.aborted_nan = true;
                return result;
            }
            epoch_loss += loss_value;
            g.backward(loss);
            std::vector<Tensor> grads;
            grads.reserve(vars.size());
            for (const Var& v : vars) grads.push_back(g.adjoint(v));
            try {
                adamw_step(result.params.tensors, grads, opt, lr, acfg, &result.params.names);
            } catch (const std::runtime_error&) {
                // non-finite gradients get the same treatment as a NaN loss
                result.params = last_good;
                result.aborted_nan = true;
                return result;
            }
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(steps));
        last_good = result.params;
        if (on_epoch) on_epoch(result.params, epoch, result.epoch_losses.back());
    }
    return result;
}

metrics::LatWeights weights_for(const worlds::Dataset& data) {
    return metrics::latitude_weights(data.latitudes);
}

} // namespace

Stage1Result train_stage1(const Config& cfg, const worlds::Dataset& data, RngStream rng) {
    return train_stage1_impl(cfg, data, std::move(rng), nullptr);
}

RunResult run_gen_data(const Config& cfg, const std::string& out_dir) {
    RunRecorder rec("gen-data", cfg, out_dir);
    worlds::Dataset data = make_dataset(cfg);
    const std::string path = rec.path("dataset.avfd");
    worlds::save_dataset(data, path);
    rec.add_output(path);
    rec.note("steps", data.steps());
    rec.note("train_end", data.train_end);
    return rec.finalize();
}

RunResult run_train_stage1(const Config& cfg, const std::string& out_dir) {
    RunRecorder rec("train-stage1", cfg, out_dir);
    worlds::Dataset data = acquire_dataset(cfg, rec);
    if (cfg.get("data.path").empty()) {
        const std::string dpath = rec.path("dataset.avfd");
        worlds::save_dataset(data, dpath);
        rec.add_output(dpath);
    }
    const std::string ckpt = rec.path("checkpoint.avfp");
    Stage1Result result = train_stage1_impl(
        cfg, data, RngStream(cfg.get_int("seed")).child("stage1"),
        [&](const net::NetParams& p, std::size_t, double) { net::save_params(p, ckpt); });
    if (result.epoch_losses.empty() && result.aborted_nan) {
        rec.set_status("aborted_nan");
        rec.finalize();
        throw std::runtime_error("train-stage1: loss became non-finite before the first "
                                 "checkpoint");
    }
    rec.add_output(ckpt);
    const std::string losses = rec.path("stage1_loss.csv");
    write_loss_csv(result.epoch_losses, losses);
    rec.add_output(losses);
    if (result.aborted_nan) {
        rec.set_status("aborted_nan");
        RunResult rr = rec.finalize();
        throw std::runtime_error("train-stage1: loss became non-finite; last good checkpoint "
                                 "retained at " + ckpt + " (manifest " + rr.manifest_path + ")");
    }
    return rec.finalize();
}

RunResult run_finetune_stage2(const Config& cfg, const std::string& out_dir) {
    RunRecorder rec("finetune-stage2", cfg, out_dir);
    const std::string init_ckpt = cfg.get("stage2.init_checkpoint");
    if (init_ckpt.empty()) {
        throw std::invalid_argument("finetune-stage2: config key stage2.init_checkpoint is "
                                    "required");
    }
    rec.add_input(init_ckpt);
    net::NetParams params = net::load_params(init_ckpt);
    worlds::Dataset data = acquire_dataset(cfg, rec);
    check_grid(cfg, data);

    ensemble::Stage2Config scfg = stage2_from(cfg);
    AdamWState opt = AdamWState::like(params.tensors);
    AdamWConfig acfg = adamw_from(cfg, "stage2");
    ensemble::Stage2Log log = ensemble::finetune_stage2(
        params, data, scfg, opt, acfg, RngStream(cfg.get_int("seed")).child("stage2"));

    const std::string ckpt = rec.path("checkpoint_stage2.avfp");
    net::save_params(params, ckpt);
    rec.add_output(ckpt);
    const std::string losses = rec.path("stage2_loss.csv");
    write_loss_csv(log.epoch_losses, losses);
    rec.add_output(losses);
    rec.note("loss_evaluations", log.loss_evaluations);
    rec.note("optimizer_steps", log.optimizer_steps);
    return rec.finalize();
}

RunResult run_evaluate(const Config& cfg, const std::string& out_dir) {
    RunRecorder rec("evaluate", cfg, out_dir);
    worlds::Dataset data = acquire_dataset(cfg, rec);
    const std::size_t K = static_cast<std::size_t>(cfg.get_int("eval.k"));
    const std::size_t n_init = static_cast<std::size_t>(cfg.get_int("eval.n_init"));
    std::vector<std::size_t> horizons;
    for (double h : cfg.get_list("eval.horizons")) {
        horizons.push_back(static_cast<std::size_t>(h));
    }
    if (horizons.empty()) throw std::invalid_argument("evaluate: eval.horizons is empty");
    const std::size_t max_h = *std::max_element(horizons.begin(), horizons.end());
    const std::size_t T = data.steps();
    if (data.test_begin() + max_h >= T) {
        throw std::invalid_argument("evaluate: horizon " + std::to_string(max_h) +
                                    " exceeds the test split");
    }

    const std::string sampler = cfg.get("eval.sampler");
    std::unique_ptr<transport::VelocityField> field;
    bool normalized_space = false;
    bool kernel_sampler = false;
    if (sampler == "kernel") {
        kernel_sampler = true; // ideal ensemble: members drawn from the true kernel
    } else if (sampler == "checkpoint") {
        const std::string ckpt = cfg.get("eval.checkpoint");
        if (ckpt.empty()) {
            throw std::invalid_argument("evaluate: eval.checkpoint is required when "
                                        "eval.sampler = checkpoint");
        }
        rec.add_input(ckpt);
        field = std::make_unique<transport::NetVelocity>(net::load_params(ckpt));
        normalized_space = true;
    } else if (sampler == "oracle") {
        field = std::make_unique<worlds::OracleVelocity>(kernel_from(cfg));
    } else {
        throw std::invalid_argument("evaluate: unknown eval.sampler: " + sampler);
    }

    const std::size_t usable = T - data.test_begin() - max_h;
    const std::size_t stride = std::max<std::size_t>(1, usable / std::max<std::size_t>(1, n_init));
    std::vector<std::size_t> inits;
    for (std::size_t i = 0; i < n_init && i * stride < usable; ++i) {
        inits.push_back(data.test_begin() + i * stride);
    }

    RngStream rng = RngStream(cfg.get_int("seed")).child("eval");
    const worlds::AnalyticKernel kernel = kernel_from(cfg);
    std::uint64_t kernel_nfe = 0;
    ordered_json first_forecast;
    std::map<std::size_t, metrics::EnsembleSlice> members_by_lead;
    std::map<std::size_t, std::vector<Tensor>> truth_by_lead;
    for (std::size_t i = 0; i < inits.size(); ++i) {
        const std::size_t t0 = inits[i];
        ensemble::EnsembleForecast fc;
        if (kernel_sampler) {
            fc.members.assign(K, {});
            RngStream member_root = rng.child(std::uint64_t(i)).child("member");
            for (std::size_t k = 0; k < K; ++k) {
                RngStream ms = member_root.child(std::uint64_t(k));
                Tensor state = data.field(t0);
                for (std::size_t l = 1; l <= max_h; ++l) {
                    state = worlds::kernel_sample(kernel, state, ms);
                    fc.members[k].push_back(state);
                    ++kernel_nfe;
                }
            }
        } else {
            Tensor initial = data.field(t0);
            if (normalized_space) initial = worlds::normalize(initial, data.stats);
            fc = ensemble::rollout_ensemble(*field, initial, K, max_h,
                                            rng.child(std::uint64_t(i)));
            if (i == 0) {
                const std::string epath = rec.path("ensemble.avfd");
                ensemble::save_ensemble(fc, data.latitudes, data.stats, epath);
                rec.add_output(epath);
                first_forecast["init_index"] = t0;
                first_forecast["member_streams"] = fc.member_stream_paths;
                first_forecast["nfe_count"] = fc.nfe_count;
            }
        }
        for (std::size_t h : horizons) {
            std::vector<Tensor> slice = fc.lead_slice(h);
            if (normalized_space) {
                for (Tensor& m : slice) m = worlds::denormalize(m, data.stats);
            }
            members_by_lead[h].push_back(std::move(slice));
            truth_by_lead[h].push_back(data.field(t0 + h));
        }
    }

    const metrics::LatWeights w = weights_for(data);
    const std::string variant_str = cfg.get("eval.crps_variant");
    const metrics::CrpsVariant variant = variant_str == "fair" ? metrics::CrpsVariant::fair
                                                               : metrics::CrpsVariant::paper;
    metrics::MetricReport report;
    report.ensemble_size = K;
    report.n_init = inits.size();
    for (std::size_t h : horizons) {
        metrics::MetricRow row;
        row.lead = h;
        row.rmse = metrics::rmse(members_by_lead[h], truth_by_lead[h], w);
        row.spread = K >= 2 ? metrics::spread(members_by_lead[h], w) : 0.0;
        row.ssr = (K >= 2 && row.rmse > 0.0) ? metrics::ssr(row.spread, row.rmse, K) : 0.0;
        row.crps = metrics::crps_eval(members_by_lead[h], truth_by_lead[h], w, variant);
        report.rows.push_back(row);
    }
    const std::string csv = rec.path("metrics.csv");
    metrics::write_metric_csv(report, csv);
    rec.add_output(csv);
    rec.set_nfe(kernel_sampler ? kernel_nfe : field->nfe());
    rec.note("n_init", inits.size());
    if (!first_forecast.empty()) rec.note("ensemble", first_forecast);
    return rec.finalize();
}

RunResult run_verify_bound(const Config& cfg, const std::string& out_dir) {
    RunRecorder rec("verify-bound", cfg, out_dir);
    const worlds::AnalyticKernel kernel = kernel_from(cfg);
    const metrics::LatWeights w =
        metrics::latitude_weights(worlds::default_latitudes(kernel.grid_h));

    const std::string sampler = cfg.get("bound.sampler");
    std::unique_ptr<transport::VelocityField> field;
    std::optional<worlds::NormStats> stats;
    if (sampler == "oracle") {
        field = std::make_unique<worlds::OracleVelocity>(kernel);
    } else if (sampler == "checkpoint") {
        const std::string ckpt = cfg.get("bound.checkpoint");
        if (ckpt.empty()) {
            throw std::invalid_argument("verify-bound: bound.checkpoint is required when "
                                        "bound.sampler = checkpoint");
        }
        rec.add_input(ckpt);
        field = std::make_unique<transport::NetVelocity>(net::load_params(ckpt));
        worlds::Dataset data = acquire_dataset(cfg, rec);
        stats = data.stats;
    } else if (sampler == "train_stage1") {
        worlds::Dataset data = acquire_dataset(cfg, rec);
        Stage1Result trained =
            train_stage1(cfg, data, RngStream(cfg.get_int("seed")).child("stage1"));
        if (trained.aborted_nan) {
            throw std::runtime_error("verify-bound: inline stage-1 training diverged");
        }
        field = std::make_unique<transport::NetVelocity>(std::move(trained.params));
        stats = data.stats;
    } else {
        throw std::invalid_argument("verify-bound: unknown bound.sampler: " + sampler);
    }

    bench::ModelKernel model(*field, stats);
    bench::BoundConfig bcfg;
    bcfg.horizon = static_cast<std::size_t>(cfg.get_int("bound.horizon"));
    bcfg.n_samples = static_cast<std::size_t>(cfg.get_int("bound.n_samples"));
    bcfg.gap_states = static_cast<std::size_t>(cfg.get_int("bound.gap_states"));
    bcfg.gap_samples = static_cast<std::size_t>(cfg.get_int("bound.gap_samples"));
    bcfg.slack_mult = cfg.get_double("bound.slack_mult");
    const worlds::InitialDist init{cfg.get_double("world.init_mean"),
                                   cfg.get_double("world.init_std")};
    bench::BoundReport report = bench::verify_rollout_bound(
        model, kernel, init, bcfg, RngStream(cfg.get_int("seed")).child("bound"), w);

    const std::string csv = rec.path("bound.csv");
    bench::write_bound_csv(report, csv);
    rec.add_output(csv);

    ordered_json sidecar;
    sidecar["seed"] = cfg.get_int("seed");
    sidecar["lambda_hat"] = report.lambda_hat;
    sidecar["slack_mult"] = report.slack_mult;
    sidecar["n_samples"] = report.n_samples;
    sidecar["all_hold"] = report.all_hold();
    sidecar["gaps"] = report.gaps;
    sidecar["config"] = cfg.dump();
    const std::string side = rec.path("bound_config.json");
    {
        std::ofstream out(side);
        out << sidecar.dump(2) << "\n";
        if (!out) throw std::runtime_error("cannot write " + side);
    }
    rec.add_output(side);
    rec.set_nfe(field->nfe());
    rec.note("all_hold", report.all_hold());
    return rec.finalize();
}

RunResult run_check_crps_w1(const Config& cfg, const std::string& out_dir) {
    RunRecorder rec("check-crps-w1", cfg, out_dir);
    const std::size_t n = static_cast<std::size_t>(cfg.get_int("crpsw1.n"));
    const double y = cfg.get_double("crpsw1.y");
    RngStream rng = RngStream(cfg.get_int("seed")).child("crpsw1");
    std::vector<double> members(n);
    for (auto& m : members) m = rng.normal();
    const auto [crps, w1] = bench::crps_w1_relation_check(members, y);
    const auto [crps_deg, w1_deg] = bench::crps_w1_relation_check({y + 0.5, y + 0.5}, y);

    if (crps > w1 + 1e-12) {
        throw std::runtime_error("check-crps-w1: crps exceeded the W1 distance");
    }
    if (std::fabs(crps_deg - w1_deg) > 1e-12) {
        throw std::runtime_error("check-crps-w1: degenerate ensemble should give equality");
    }

    const std::string csv = rec.path("crpsw1.csv");
    {
        std::ofstream out(csv);
        out << "case,crps_paper,w1_to_point\n";
        out << "gaussian," << metrics::format_sig12(crps) << "," << metrics::format_sig12(w1)
            << "\n";
        out << "degenerate," << metrics::format_sig12(crps_deg) << ","
            << metrics::format_sig12(w1_deg) << "\n";
        if (!out) throw std::runtime_error("cannot write " + csv);
    }
    rec.add_output(csv);
    return rec.finalize();
}

} // namespace avf::harness

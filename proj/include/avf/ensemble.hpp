// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "avf/optim.hpp"
#include "avf/synthworlds.hpp"
#include "avf/transport.hpp"
#include "avf/verifmetrics.hpp"

namespace avf::ensemble {

/// K member trajectories over H autoregressive lead times.
struct EnsembleForecast {
    std::vector<std::vector<Tensor>> members; // [member][lead-1], each (C, H, W)
    Tensor initial;
    std::vector<std::string> member_stream_paths;
    std::uint64_t nfe_count = 0;

    std::size_t ensemble_size() const { return members.size(); }
    std::size_t horizon() const { return members.empty() ? 0 : members[0].size(); }
    /// Members of one lead time (1-based lead).
    std::vector<Tensor> lead_slice(std::size_t lead) const;
};

/// Autoregressive 1-NFE rollout: every step conditions on the previous
/// prediction; member k uses the noise substream ("member", k, "lead", l).
/// Members advance in one batched field evaluation per lead.
EnsembleForecast rollout_ensemble(const transport::VelocityField& field, const Tensor& initial,
                                  std::size_t n_members, std::size_t horizon, RngStream rng);

/// Ensemble entry appended to the dataset container: fields ordered
/// (member-major, then lead).
void save_ensemble(const EnsembleForecast& forecast, const std::vector<double>& latitudes,
                   const worlds::NormStats& stats, const std::string& path);

/// Empirical CRPS of an ensemble against one observation:
/// (1/K) sum_k |x_k - y| - c_K sum_k sum_k' |x_k - x_k'| under the
/// (optionally latitude-weighted) mean-absolute norm.
/// paper variant: c_K = 1/(2K^2); fair variant: c_K = 1/(2K(K-1)).
Var crps_loss_graph(Graph& g, const std::vector<Var>& members, Var truth,
                    const metrics::LatWeights* weights = nullptr,
                    metrics::CrpsVariant variant = metrics::CrpsVariant::paper);

double crps_loss(const std::vector<Tensor>& members, const Tensor& truth,
                 const metrics::LatWeights* weights = nullptr,
                 metrics::CrpsVariant variant = metrics::CrpsVariant::paper);

struct CurriculumStage {
    std::size_t horizon = 1;
    std::size_t epochs = 15;
    double lr = 1e-5;
};

struct CurriculumSchedule {
    std::vector<CurriculumStage> stages{{1, 15, 1e-5}, {2, 15, 1e-5}};
    std::size_t k_train = 2;
    void validate() const;
};

struct Stage2Config {
    CurriculumSchedule schedule;
    std::size_t steps_per_epoch = 32;
    std::size_t batch_size = 1; // initial conditions per optimizer step
    metrics::CrpsVariant variant = metrics::CrpsVariant::paper;
    bool lat_weighted = false;
    bool detach_between_steps = false; // test hook: stop gradients at step joints
};

struct Stage2Log {
    std::vector<double> epoch_losses;
    std::size_t loss_evaluations = 0; // exactly one per sample (terminal state only)
    std::size_t optimizer_steps = 0;
};

/// Curriculum CRPS calibration with full backpropagation through the
/// autoregressive chain; the loss is evaluated only on terminal states.
Stage2Log finetune_stage2(net::NetParams& params, const worlds::Dataset& data,
                          const Stage2Config& cfg, harness::AdamWState& opt,
                          const harness::AdamWConfig& opt_cfg, RngStream rng);

/// One Stage-II loss graph on a single batch; exposed for gradient tests.
Var stage2_loss_graph(Graph& g, const std::vector<Var>& params, const net::NetConfig& net_cfg,
                      const std::vector<Tensor>& initials, const std::vector<Tensor>& truths,
                      std::size_t horizon, std::size_t k_train, RngStream& rng,
                      const Stage2Config& cfg, const metrics::LatWeights* weights,
                      std::size_t* loss_evals);

} // namespace avf::ensemble

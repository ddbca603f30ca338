// SPDX-License-Identifier: Apache-2.0
#include "avf/ensemble.hpp"

#include <cmath>
#include <stdexcept>

#include "avf/binio.hpp"

namespace avf::ensemble {

std::vector<Tensor> EnsembleForecast::lead_slice(std::size_t lead) const {
    if (lead == 0 || lead > horizon()) {
        throw std::out_of_range("lead_slice: lead " + std::to_string(lead) + " of horizon " +
                                std::to_string(horizon()));
    }
    std::vector<Tensor> out;
    out.reserve(members.size());
    for (const auto& m : members) out.push_back(m[lead - 1]);
    return out;
}

EnsembleForecast rollout_ensemble(const transport::VelocityField& field, const Tensor& initial,
                                  std::size_t n_members, std::size_t horizon, RngStream rng) {
    if (n_members < 1 || horizon < 1) {
        throw std::invalid_argument("rollout_ensemble: need K >= 1 and H >= 1");
    }
    const auto cell = field.field_shape();
    if (initial.shape() != cell) {
        throw std::invalid_argument("rollout_ensemble: initial state shape " +
                                    shape_to_string(initial.shape()) + " vs grid " +
                                    shape_to_string(cell));
    }
    const std::size_t per = shape_numel(cell);
    const std::uint64_t nfe_before = field.nfe();

    EnsembleForecast out;
    out.initial = initial;
    out.members.assign(n_members, {});
    RngStream member_root = rng.child("member");
    for (std::size_t k = 0; k < n_members; ++k) {
        out.member_stream_paths.push_back(member_root.child(std::uint64_t(k)).path_string());
    }

    // members advance together: one batched evaluation per lead
    Tensor cond({n_members, cell[0], cell[1], cell[2]});
    {
        double* cd = cond.mutable_data();
        for (std::size_t k = 0; k < n_members; ++k) {
            std::copy(initial.data(), initial.data() + per, cd + k * per);
        }
    }
    for (std::size_t l = 1; l <= horizon; ++l) {
        Tensor eps(cond.shape());
        double* ed = eps.mutable_data();
        for (std::size_t k = 0; k < n_members; ++k) {
            RngStream s = member_root.child(std::uint64_t(k)).child("lead").child(std::uint64_t(l));
            Tensor draw = s.gaussian(cell);
            std::copy(draw.data(), draw.data() + per, ed + k * per);
        }
        cond = transport::sample_one_step(field, eps, cond);
        for (std::size_t k = 0; k < n_members; ++k) {
            std::vector<double> vals(cond.data() + k * per, cond.data() + (k + 1) * per);
            out.members[k].emplace_back(cell, std::move(vals));
        }
    }
    out.nfe_count = field.nfe() - nfe_before;
    return out;
}

void save_ensemble(const EnsembleForecast& forecast, const std::vector<double>& latitudes,
                   const worlds::NormStats& stats, const std::string& path) {
    const std::size_t K = forecast.ensemble_size(), H = forecast.horizon();
    if (K == 0 || H == 0) throw std::invalid_argument("save_ensemble: empty forecast");
    const auto& cell = forecast.members[0][0].shape();
    BinWriter w(path);
    w.magic("AVFD");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(K * H));
    w.u32(static_cast<std::uint32_t>(cell[0]));
    w.u32(static_cast<std::uint32_t>(cell[1]));
    w.u32(static_cast<std::uint32_t>(cell[2]));
    for (double lat : latitudes) w.f64(lat);
    for (double m : stats.mean) w.f64(m);
    for (double s : stats.std) w.f64(s);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t l = 0; l < H; ++l) {
            const Tensor& f = forecast.members[k][l];
            w.f64_array(f.data(), f.size());
        }
    w.close();
}

namespace {

Var weighted_abs_mean(Graph& g, Var diff, const metrics::LatWeights* weights) {
    if (weights == nullptr) return mean_all(abs(diff));
    const auto& s = diff.value().shape(); // (C, H, W) or (B, C, H, W)
    const std::size_t H = s[s.size() - 2];
    Tensor wrow({H, 1});
    for (std::size_t h = 0; h < H; ++h) wrow.mutable_data()[h] = weights->at_row(h);
    return mean_all(mul(abs(diff), g.leaf(wrow)));
}

} // namespace

Var crps_loss_graph(Graph& g, const std::vector<Var>& members, Var truth,
                    const metrics::LatWeights* weights, metrics::CrpsVariant variant) {
    const std::size_t K = members.size();
    if (K == 0) throw std::invalid_argument("crps_loss: no members");
    if (variant == metrics::CrpsVariant::fair && K < 2) {
        throw std::invalid_argument("crps_loss: fair variant needs K >= 2");
    }
    for (const Var& m : members) {
        if (!m.value().same_shape(truth.value())) {
            throw std::invalid_argument("crps_loss: member shape " +
                                        shape_to_string(m.value().shape()) + " vs truth shape " +
                                        shape_to_string(truth.value().shape()));
        }
    }
    Var term1 = weighted_abs_mean(g, sub(members[0], truth), weights);
    for (std::size_t k = 1; k < K; ++k) {
        term1 = add(term1, weighted_abs_mean(g, sub(members[k], truth), weights));
    }
    term1 = mul_scalar(term1, 1.0 / static_cast<double>(K));
    if (K == 1) return term1; // self-distance term vanishes

    Var term2 = g.scalar(0.0);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t k2 = k + 1; k2 < K; ++k2) {
            term2 = add(term2, weighted_abs_mean(g, sub(members[k], members[k2]), weights));
        }
    const double kd = static_cast<double>(K);
    const double c_K = variant == metrics::CrpsVariant::paper ? 1.0 / (2.0 * kd * kd)
                                                              : 1.0 / (2.0 * kd * (kd - 1.0));
    // off-diagonal pairs appear twice in the double sum
    return sub(term1, mul_scalar(term2, 2.0 * c_K));
}

double crps_loss(const std::vector<Tensor>& members, const Tensor& truth,
                 const metrics::LatWeights* weights, metrics::CrpsVariant variant) {
    Graph g;
    std::vector<Var> vars;
    vars.reserve(members.size());
    for (const Tensor& m : members) vars.push_back(g.leaf(m));
    return crps_loss_graph(g, vars, g.leaf(truth), weights, variant).value().item();
}

void CurriculumSchedule::validate() const {
    if (stages.empty()) throw std::invalid_argument("CurriculumSchedule: no stages");
    std::size_t prev = 0;
    for (const auto& s : stages) {
        if (s.horizon < prev) {
            throw std::invalid_argument("CurriculumSchedule: horizons must be nondecreasing");
        }
        if (s.horizon == 0) throw std::invalid_argument("CurriculumSchedule: zero horizon");
        prev = s.horizon;
    }
    if (k_train < 2) throw std::invalid_argument("CurriculumSchedule: k_train must be >= 2");
}

Var stage2_loss_graph(Graph& g, const std::vector<Var>& params, const net::NetConfig& net_cfg,
                      const std::vector<Tensor>& initials, const std::vector<Tensor>& truths,
                      std::size_t horizon, std::size_t k_train, RngStream& rng,
                      const Stage2Config& cfg, const metrics::LatWeights* weights,
                      std::size_t* loss_evals) {
    const std::size_t B = initials.size();
    const std::size_t K = k_train;
    const auto cell = Tensor::Shape{net_cfg.channels, net_cfg.grid_h, net_cfg.grid_w};
    const std::size_t per = shape_numel(cell);

    // rows ordered (init b, member k)
    Tensor cond0({B * K, cell[0], cell[1], cell[2]});
    {
        double* cd = cond0.mutable_data();
        for (std::size_t bk = 0; bk < B * K; ++bk) {
            const Tensor& x0 = initials[bk / K];
            std::copy(x0.data(), x0.data() + per, cd + bk * per);
        }
    }
    Var cond = g.leaf(std::move(cond0));
    const std::vector<double> zeros(B * K, 0.0), ones(B * K, 1.0);
    Var r = g.leaf(Tensor({B * K}, std::vector<double>(zeros)));
    Var t = g.leaf(Tensor({B * K}, std::vector<double>(ones)));

    for (std::size_t l = 1; l <= horizon; ++l) {
        Tensor eps({B * K, cell[0], cell[1], cell[2]});
        double* ed = eps.mutable_data();
        for (std::size_t bk = 0; bk < B * K; ++bk) {
            RngStream s = rng.child("rollout")
                              .child(std::uint64_t(bk))
                              .child("lead")
                              .child(std::uint64_t(l));
            Tensor draw = s.gaussian(cell);
            std::copy(draw.data(), draw.data() + per, ed + bk * per);
        }
        Var eps_var = g.leaf(std::move(eps));
        Var u = net::net_forward(g, params, net_cfg, eps_var, r, t, cond);
        cond = sub(eps_var, u);
        if (cfg.detach_between_steps && l < horizon) cond = stop_gradient(cond);
    }

    // terminal-state supervision only
    Var loss = g.scalar(0.0);
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<Var> members;
        members.reserve(K);
        for (std::size_t k = 0; k < K; ++k) {
            members.push_back(
                reshape(slice(cond, 0, b * K + k, 1), {cell[0], cell[1], cell[2]}));
        }
        loss = add(loss, crps_loss_graph(g, members, g.leaf(truths[b]), weights, cfg.variant));
        if (loss_evals != nullptr) ++(*loss_evals);
    }
    return mul_scalar(loss, 1.0 / static_cast<double>(B));
}

Stage2Log finetune_stage2(net::NetParams& params, const worlds::Dataset& data,
                          const Stage2Config& cfg, harness::AdamWState& opt,
                          const harness::AdamWConfig& opt_cfg, RngStream rng) {
    cfg.schedule.validate();
    const std::size_t max_h = cfg.schedule.stages.back().horizon;
    if (data.train_end < max_h + 1) {
        throw std::invalid_argument("finetune_stage2: dataset train split of " +
                                    std::to_string(data.train_end) +
                                    " steps cannot supply horizon " + std::to_string(max_h));
    }
    metrics::LatWeights weights = cfg.lat_weighted ? metrics::latitude_weights(data.latitudes)
                                                   : metrics::LatWeights::uniform(
                                                         data.fields.shape()[2]);
    const metrics::LatWeights* wptr = cfg.lat_weighted ? &weights : nullptr;

    Stage2Log log;
    std::size_t stage_index = 0;
    for (const CurriculumStage& stage : cfg.schedule.stages) {
        RngStream stage_rng = rng.child("stage").child(std::uint64_t(stage_index++));
        for (std::size_t epoch = 0; epoch < stage.epochs; ++epoch) {
            RngStream epoch_rng = stage_rng.child("epoch").child(std::uint64_t(epoch));
            double epoch_loss = 0.0;
            for (std::size_t step = 0; step < cfg.steps_per_epoch; ++step) {
                RngStream step_rng = epoch_rng.child("step").child(std::uint64_t(step));
                std::vector<Tensor> initials, truths;
                for (std::size_t b = 0; b < cfg.batch_size; ++b) {
                    const std::size_t span = data.train_end - stage.horizon;
                    const std::size_t tau = step_rng.next_u64() % span;
                    initials.push_back(normalize(data.field(tau), data.stats));
                    truths.push_back(normalize(data.field(tau + stage.horizon), data.stats));
                }
                Graph g;
                auto vars = net::leaf_params(g, params);
                RngStream noise_rng = step_rng.child("noise");
                Var loss = stage2_loss_graph(g, vars, params.config, initials, truths,
                                             stage.horizon, cfg.schedule.k_train, noise_rng, cfg,
                                             wptr, &log.loss_evaluations);
                const double loss_value = loss.value().item();
                if (!std::isfinite(loss_value)) {
                    throw std::runtime_error("finetune_stage2: non-finite loss");
                }
                epoch_loss += loss_value;
                g.backward(loss);
                std::vector<Tensor> grads;
                grads.reserve(vars.size());
                for (const Var& v : vars) grads.push_back(g.adjoint(v));
                harness::adamw_step(params.tensors, grads, opt, stage.lr, opt_cfg,
                                    &params.names);
                ++log.optimizer_steps;
            }
            log.epoch_losses.push_back(epoch_loss / static_cast<double>(cfg.steps_per_epoch));
        }
    }
    return log;
}

} // namespace avf::ensemble

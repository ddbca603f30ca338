// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "avf/ensemble.hpp"
#include "avf/harness.hpp"
#include "avf/synthworlds.hpp"
#include "avf/theorybench.hpp"
#include "avf/transport.hpp"
#include "avf/velnet.hpp"
#include "avf/verifmetrics.hpp"

namespace py = pybind11;
using namespace avf;

namespace {

Tensor tensor_from(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
    Tensor::Shape shape(arr.ndim());
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) {
        shape[i] = static_cast<std::size_t>(arr.shape(i));
    }
    std::vector<double> values(arr.data(), arr.data() + arr.size());
    return Tensor(std::move(shape), std::move(values));
}

py::array_t<double> array_from(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data(), t.data() + t.size(), out.mutable_data());
    return out;
}

using NpArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

metrics::LatWeights weights_from(const std::optional<std::vector<double>>& lats,
                                 std::size_t rows) {
    return lats ? metrics::latitude_weights(*lats) : metrics::LatWeights::uniform(rows);
}

metrics::CrpsVariant variant_from(const std::string& name) {
    if (name == "paper") return metrics::CrpsVariant::paper;
    if (name == "fair") return metrics::CrpsVariant::fair;
    throw std::invalid_argument("variant must be 'paper' or 'fair', got " + name);
}

// (N, K, C, H, W) members plus (N, C, H, W) truths -> library slices
std::pair<metrics::EnsembleSlice, std::vector<Tensor>> slices_from(const NpArray& members,
                                                                   const NpArray& truth) {
    if (members.ndim() != 5 || truth.ndim() != 4) {
        throw std::invalid_argument("expected members (N,K,C,H,W) and truth (N,C,H,W)");
    }
    const std::size_t N = members.shape(0), K = members.shape(1);
    const Tensor::Shape cell{static_cast<std::size_t>(members.shape(2)),
                             static_cast<std::size_t>(members.shape(3)),
                             static_cast<std::size_t>(members.shape(4))};
    const std::size_t per = shape_numel(cell);
    metrics::EnsembleSlice slice(N);
    std::vector<Tensor> truths;
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) {
            std::vector<double> vals(members.data() + (n * K + k) * per,
                                     members.data() + (n * K + k + 1) * per);
            slice[n].emplace_back(cell, std::move(vals));
        }
        std::vector<double> tv(truth.data() + n * per, truth.data() + (n + 1) * per);
        truths.emplace_back(cell, std::move(tv));
    }
    return {std::move(slice), std::move(truths)};
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "One-step average-velocity generative transport lab: samplers, "
              "synthetic worlds, verification metrics and the training harness.";

    py::class_<RngStream>(m, "RngStream")
        .def(py::init<std::uint64_t>(), py::arg("seed"))
        .def("child",
             [](const RngStream& s, std::uint64_t label) { return s.child(label); })
        .def("child",
             [](const RngStream& s, const std::string& label) {
                 return s.child(std::string_view(label));
             })
        .def("normal", &RngStream::normal)
        .def("uniform", &RngStream::uniform)
        .def("gaussian",
             [](RngStream& s, const std::vector<std::size_t>& shape) {
                 return array_from(s.gaussian(Tensor::Shape(shape)));
             })
        .def_property_readonly("counter", &RngStream::counter)
        .def_property_readonly("path", &RngStream::path_string);

    m.def("sinusoidal_code", [](double t, std::size_t dim) {
        return array_from(net::sinusoidal_code(t, dim));
    });

    m.def(
        "sample_path",
        [](const NpArray& target, const NpArray& noise, double t) {
            auto [z, v] = transport::sample_path(tensor_from(target), tensor_from(noise), t);
            return py::make_tuple(array_from(z), array_from(v));
        },
        py::arg("target"), py::arg("noise"), py::arg("t"),
        "Linear path point (z_t, v_t) between target and noise.");

    py::class_<worlds::AnalyticKernel>(m, "AnalyticKernel")
        .def_static("affine", &worlds::AnalyticKernel::affine, py::arg("gain"), py::arg("bias"),
                    py::arg("noise_std"), py::arg("channels") = 1, py::arg("grid_h") = 1,
                    py::arg("grid_w") = 1)
        .def_static("chaotic", &worlds::AnalyticKernel::chaotic, py::arg("a"), py::arg("b"),
                    py::arg("omega"), py::arg("noise_std"), py::arg("channels") = 1,
                    py::arg("grid_h") = 1, py::arg("grid_w") = 1)
        .def_static("advection", &worlds::AnalyticKernel::advection, py::arg("channels"),
                    py::arg("grid_h"), py::arg("grid_w"), py::arg("vx"), py::arg("vy"),
                    py::arg("kappa"), py::arg("forcing_std"), py::arg("time_step"))
        .def("sample",
             [](const worlds::AnalyticKernel& k, const NpArray& c, RngStream& rng) {
                 return array_from(worlds::kernel_sample(k, tensor_from(c), rng));
             })
        .def("mean",
             [](const worlds::AnalyticKernel& k, const NpArray& c) {
                 return array_from(worlds::kernel_mean(k, tensor_from(c)));
             })
        .def("w1_gap",
             [](const worlds::AnalyticKernel& k, const NpArray& a, const NpArray& b,
                const std::optional<std::vector<double>>& lats) {
                 return worlds::kernel_w1_gap(k, tensor_from(a), tensor_from(b),
                                              weights_from(lats, k.grid_h));
             },
             py::arg("c"), py::arg("c_alt"), py::arg("latitudes") = std::nullopt);

    m.def(
        "oracle_avg_velocity",
        [](const worlds::AnalyticKernel& k, const NpArray& z, double r, double t,
           const NpArray& c) {
            return array_from(worlds::oracle_avg_velocity(k, tensor_from(z), r, t,
                                                          tensor_from(c)));
        },
        py::arg("kernel"), py::arg("z"), py::arg("r"), py::arg("t"), py::arg("c"));

    py::class_<worlds::OracleVelocity>(m, "OracleVelocity")
        .def(py::init<worlds::AnalyticKernel>())
        .def("sample_one_step",
             [](const worlds::OracleVelocity& f, const NpArray& noise, const NpArray& c) {
                 return array_from(
                     transport::sample_one_step(f, tensor_from(noise), tensor_from(c)));
             })
        .def("sample_multi_step",
             [](const worlds::OracleVelocity& f, const NpArray& noise, const NpArray& c,
                std::size_t n) {
                 return array_from(
                     transport::sample_multi_step(f, tensor_from(noise), tensor_from(c), n));
             })
        .def_property_readonly("nfe", [](const worlds::OracleVelocity& f) { return f.nfe(); });

    py::class_<transport::NetVelocity>(m, "Model")
        .def_static("load",
                    [](const std::string& path) {
                        return std::make_unique<transport::NetVelocity>(net::load_params(path));
                    })
        .def("save",
             [](const transport::NetVelocity& f, const std::string& path) {
                 net::save_params(f.params(), path);
             })
        .def("forward",
             [](const transport::NetVelocity& f, const NpArray& z, double r, double t,
                const NpArray& c) {
                 return array_from(
                     net::forward(f.params(), tensor_from(z), r, t, tensor_from(c)));
             })
        .def("sample_one_step",
             [](const transport::NetVelocity& f, const NpArray& noise, const NpArray& c) {
                 return array_from(
                     transport::sample_one_step(f, tensor_from(noise), tensor_from(c)));
             })
        .def("sample_multi_step",
             [](const transport::NetVelocity& f, const NpArray& noise, const NpArray& c,
                std::size_t n) {
                 return array_from(
                     transport::sample_multi_step(f, tensor_from(noise), tensor_from(c), n));
             })
        .def("rollout",
             [](const transport::NetVelocity& f, const NpArray& initial, std::size_t members,
                std::size_t horizon, std::uint64_t seed) {
                 ensemble::EnsembleForecast fc = ensemble::rollout_ensemble(
                     f, tensor_from(initial), members, horizon, RngStream(seed));
                 const auto cell = f.field_shape();
                 std::vector<py::ssize_t> shape{
                     static_cast<py::ssize_t>(members), static_cast<py::ssize_t>(horizon),
                     static_cast<py::ssize_t>(cell[0]), static_cast<py::ssize_t>(cell[1]),
                     static_cast<py::ssize_t>(cell[2])};
                 py::array_t<double> out(shape);
                 double* od = out.mutable_data();
                 const std::size_t per = shape_numel(cell);
                 for (std::size_t k = 0; k < members; ++k)
                     for (std::size_t l = 0; l < horizon; ++l) {
                         const Tensor& fld = fc.members[k][l];
                         std::copy(fld.data(), fld.data() + per, od + (k * horizon + l) * per);
                     }
                 return py::make_tuple(out, fc.nfe_count);
             },
             py::arg("initial"), py::arg("members"), py::arg("horizon"), py::arg("seed"))
        .def_property_readonly("nfe", [](const transport::NetVelocity& f) { return f.nfe(); })
        .def_property_readonly("channels",
                               [](const transport::NetVelocity& f) {
                                   return f.params().config.channels;
                               })
        .def_property_readonly("grid", [](const transport::NetVelocity& f) {
            return py::make_tuple(f.params().config.grid_h, f.params().config.grid_w);
        });

    m.def(
        "crps_loss",
        [](const std::vector<NpArray>& members, const NpArray& truth,
           const std::string& variant) {
            std::vector<Tensor> ms;
            ms.reserve(members.size());
            for (const auto& a : members) ms.push_back(tensor_from(a));
            return ensemble::crps_loss(ms, tensor_from(truth), nullptr, variant_from(variant));
        },
        py::arg("members"), py::arg("truth"), py::arg("variant") = "paper");

    m.def("latitude_weights", [](const std::vector<double>& lats) {
        return array_from(metrics::latitude_weights(lats).row);
    });

    m.def(
        "ensemble_metrics",
        [](const NpArray& members, const NpArray& truth,
           const std::optional<std::vector<double>>& lats, const std::string& variant) {
            auto [slice, truths] = slices_from(members, truth);
            const metrics::LatWeights w = weights_from(lats, truths[0].shape()[1]);
            const std::size_t K = slice[0].size();
            py::dict out;
            const double rmse_v = metrics::rmse(slice, truths, w);
            out["rmse"] = rmse_v;
            if (K >= 2) {
                const double spread_v = metrics::spread(slice, w);
                out["spread"] = spread_v;
                out["ssr"] = rmse_v > 0.0 ? metrics::ssr(spread_v, rmse_v, K) : 0.0;
            }
            out["crps"] = metrics::crps_eval(slice, truths, w, variant_from(variant));
            return out;
        },
        py::arg("members"), py::arg("truth"), py::arg("latitudes") = std::nullopt,
        py::arg("variant") = "paper",
        "rmse/spread/ssr/crps of (N,K,C,H,W) members against (N,C,H,W) truths.");

    m.def("wasserstein1_1d", [](std::vector<double> a, std::vector<double> b) {
        return metrics::wasserstein1_1d(std::move(a), std::move(b));
    });

    m.def("crps_w1_relation", [](const std::vector<double>& members, double y) {
        const auto [crps, w1] = bench::crps_w1_relation_check(members, y);
        return py::make_tuple(crps, w1);
    });

    m.def(
        "rectification_residual",
        [](const transport::NetVelocity& f, const NpArray& z, double r, double t,
           const NpArray& c, const NpArray& v) {
            return array_from(bench::rectification_residual(f, tensor_from(z), r, t,
                                                            tensor_from(c), tensor_from(v)));
        },
        py::arg("model"), py::arg("z"), py::arg("r"), py::arg("t"), py::arg("c"), py::arg("v"));

    m.def(
        "run",
        [](const std::vector<std::string>& args) { return harness::cli(args); },
        py::arg("args"),
        "Invoke the command-line harness (gen-data, train-stage1, finetune-stage2, "
        "evaluate, verify-bound, check-crps-w1); returns the exit code.");
}

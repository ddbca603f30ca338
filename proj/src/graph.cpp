// SPDX-License-Identifier: Apache-2.0
#include "avf/graph.hpp"

#include "avf/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace avf {
namespace {

using Ins = std::vector<const Tensor*>;
using Acc = std::function<void(std::size_t, Tensor)>;

// ---- shared kernels ---------------------------------------------------------

template <typename F>
Tensor ew_unary(const Tensor& a, F f) {
    Tensor out(a.shape());
    double* od = out.mutable_data();
    const double* ad = a.data();
    for (std::size_t i = 0; i < a.size(); ++i) od[i] = f(ad[i]);
    return out;
}

template <typename F>
Tensor ew_binary(const char* name, const Tensor& a, const Tensor& b, F f) {
    if (a.same_shape(b)) {
        Tensor out(a.shape());
        double* od = out.mutable_data();
        const double* ad = a.data();
        const double* bd = b.data();
        for (std::size_t i = 0; i < a.size(); ++i) od[i] = f(ad[i], bd[i]);
        return out;
    }
    const auto oshape = broadcast_shapes(name, a.shape(), b.shape());
    Tensor out(oshape);
    double* od = out.mutable_data();
    const double* ad = a.data();
    const double* bd = b.data();
    const auto sa = broadcast_strides(a.shape(), oshape);
    const auto sb = broadcast_strides(b.shape(), oshape);
    std::vector<std::size_t> idx(oshape.size(), 0);
    for (std::size_t flat = 0; flat < out.size(); ++flat) {
        std::size_t ia = 0, ib = 0;
        for (std::size_t d = 0; d < oshape.size(); ++d) {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        od[flat] = f(ad[ia], bd[ib]);
        for (std::size_t d = oshape.size(); d-- > 0;) {
            if (++idx[d] < oshape[d]) break;
            idx[d] = 0;
        }
    }
    return out;
}

Tensor broadcast_value(const Tensor& a, const Tensor::Shape& target) {
    if (a.shape() == target) return a;
    Tensor out(target);
    double* od = out.mutable_data();
    const double* ad = a.data();
    const auto sa = broadcast_strides(a.shape(), target);
    std::vector<std::size_t> idx(target.size(), 0);
    for (std::size_t flat = 0; flat < out.size(); ++flat) {
        std::size_t ia = 0;
        for (std::size_t d = 0; d < target.size(); ++d) ia += idx[d] * sa[d];
        od[flat] = ad[ia];
        for (std::size_t d = target.size(); d-- > 0;) {
            if (++idx[d] < target[d]) break;
            idx[d] = 0;
        }
    }
    return out;
}

Tensor::Shape reduced_shape(const Tensor::Shape& in, const std::vector<std::size_t>& axes,
                            bool keepdims) {
    Tensor::Shape out;
    for (std::size_t d = 0; d < in.size(); ++d) {
        const bool hit = std::find(axes.begin(), axes.end(), d) != axes.end();
        if (!hit) {
            out.push_back(in[d]);
        } else if (keepdims) {
            out.push_back(1);
        }
    }
    return out;
}

// Maps every input flat index to its reduction-output flat index.
std::vector<std::size_t> reduction_map(const Tensor::Shape& in,
                                       const std::vector<std::size_t>& axes, bool keepdims) {
    (void)keepdims; // keepdims only changes the output rank, not the flat layout
    std::vector<std::size_t> ostrides(in.size(), 0);
    {
        std::size_t stride = 1;
        // strides over the kept axes, in row-major order of the output
        std::vector<std::size_t> kept;
        for (std::size_t d = 0; d < in.size(); ++d) {
            if (std::find(axes.begin(), axes.end(), d) == axes.end()) kept.push_back(d);
        }
        for (std::size_t i = kept.size(); i-- > 0;) {
            ostrides[kept[i]] = stride;
            stride *= in[kept[i]];
        }
    }
    std::vector<std::size_t> map(shape_numel(in));
    std::vector<std::size_t> idx(in.size(), 0);
    for (std::size_t flat = 0; flat < map.size(); ++flat) {
        std::size_t o = 0;
        for (std::size_t d = 0; d < in.size(); ++d) o += idx[d] * ostrides[d];
        map[flat] = o;
        for (std::size_t d = in.size(); d-- > 0;) {
            if (++idx[d] < in[d]) break;
            idx[d] = 0;
        }
    }
    return map;
}

Tensor matmul_value(const Tensor& a, const Tensor& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_to_string(sa) +
                                    " and " + shape_to_string(sb));
    }
    const std::size_t m = sa[0], k = sa[1], n = sb[1];
    Tensor out({m, n});
    double* od = out.mutable_data();
    const double* ad = a.data();
    const double* bd = b.data();
    auto rows = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            double* orow = od + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = ad[i * k + p];
                if (av == 0.0) continue;
                const double* brow = bd + p * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    };
    // each output row is written by exactly one worker, so the result is
    // independent of the worker count
    if (m * k * n >= 1u << 20) {
        parallel_for(m, rows);
    } else {
        rows(0, m);
    }
    return out;
}

Tensor swap_last2_value(const Tensor& a) {
    const auto& s = a.shape();
    if (s.size() < 2) {
        throw std::invalid_argument("swap_last2: rank >= 2 required, got " + shape_to_string(s));
    }
    Tensor::Shape oshape = s;
    std::swap(oshape[s.size() - 1], oshape[s.size() - 2]);
    Tensor out(oshape);
    const std::size_t rows = s[s.size() - 2], cols = s[s.size() - 1];
    std::size_t batch = 1;
    for (std::size_t d = 0; d + 2 < s.size(); ++d) batch *= s[d];
    double* od = out.mutable_data();
    const double* ad = a.data();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* src = ad + b * rows * cols;
        double* dst = od + b * rows * cols;
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
    }
    return out;
}

Tensor transpose_value(const Tensor& a) {
    const auto& s = a.shape();
    if (s.size() != 2) {
        throw std::invalid_argument("transpose2d: rank-2 tensor required, got " +
                                    shape_to_string(s));
    }
    Tensor out({s[1], s[0]});
    double* od = out.mutable_data();
    const double* ad = a.data();
    for (std::size_t i = 0; i < s[0]; ++i)
        for (std::size_t j = 0; j < s[1]; ++j) od[j * s[0] + i] = ad[i * s[1] + j];
    return out;
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// ---- rule table -------------------------------------------------------------

struct Rule {
    Tensor (*eval)(const Node&, const Ins&);
    // tan[i] == nullptr means the input carries no tangent (treated as zero)
    Tensor (*jvp)(const Node&, const Ins&, const Ins&);
    void (*vjp)(const Node&, const Ins&, const Tensor& adj, const Acc&);
};

Tensor jvp_zero_like(const Tensor& value) { return Tensor(value.shape()); }

// Elementwise-chain helper for unary ops: tangent_out = dfdx * tangent_in.
template <typename DF>
Tensor unary_jvp(const Tensor& x, const Tensor* tx, DF dfdx) {
    if (!tx) return Tensor(x.shape());
    Tensor out(x.shape());
    double* od = out.mutable_data();
    const double* xd = x.data();
    const double* td = tx->data();
    for (std::size_t i = 0; i < x.size(); ++i) od[i] = dfdx(xd[i]) * td[i];
    return out;
}

template <typename DF>
void unary_vjp(const Node& n, const Ins& in, const Tensor& adj, const Acc& acc, DF dfdx) {
    const Tensor& x = *in[0];
    Tensor g(x.shape());
    double* gd = g.mutable_data();
    const double* xd = x.data();
    const double* ad = adj.data();
    for (std::size_t i = 0; i < x.size(); ++i) gd[i] = dfdx(xd[i]) * ad[i];
    (void)n;
    acc(0, std::move(g));
}

const std::array<Rule, 28>& rule_table() {
    static const std::array<Rule, 28> table = [] {
        std::array<Rule, 28> t{};
        auto set = [&t](Op op, Rule r) { t[static_cast<std::size_t>(op)] = r; };

        set(Op::leaf, {
            [](const Node& n, const Ins&) { return n.value; },
            [](const Node& n, const Ins&, const Ins&) { return jvp_zero_like(n.value); },
            [](const Node&, const Ins&, const Tensor&, const Acc&) {},
        });

        set(Op::add, {
            [](const Node&, const Ins& in) {
                return ew_binary("add", *in[0], *in[1], [](double a, double b) { return a + b; });
            },
            [](const Node& n, const Ins&, const Ins& tan) {
                Tensor out(n.value.shape());
                if (tan[0]) out = broadcast_value(*tan[0], n.value.shape());
                if (tan[1]) out = t_add(out, broadcast_value(*tan[1], n.value.shape()));
                return out;
            },
            [](const Node&, const Ins& in, const Tensor& adj, const Acc& acc) {
                acc(0, reduce_to_shape(adj, in[0]->shape()));
                acc(1, reduce_to_shape(adj, in[1]->shape()));
            },
        });

        set(Op::sub, {
            [](const Node&, const Ins& in) {
                return ew_binary("sub", *in[0], *in[1], [](double a, double b) { return a - b; });
            },
            [](const Node& n, const Ins&, const Ins& tan) {
                Tensor out(n.value.shape());
                if (tan[0]) out = broadcast_value(*tan[0], n.value.shape());
                if (tan[1]) out = t_sub(out, broadcast_value(*tan[1], n.value.shape()));
                return out;
            },
            [](const Node&, const Ins& in, const Tensor& adj, const Acc& acc) {
                acc(0, reduce_to_shape(adj, in[0]->shape()));
                acc(1, reduce_to_shape(t_scale(adj, -1.0), in[1]->shape()));
            },
        });

        set(Op::mul, {
            [](const Node&, const Ins& in) {
                return ew_binary("mul", *in[0], *in[1], [](double a, double b) { return a * b; });
            },
            [](const Node& n, const Ins& in, const Ins& tan) {
                Tensor out(n.value.shape());
                if (tan[0])
                    out = ew_binary("mul", *tan[0], *in[1], [](double a, double b) { return a * b; });
                if (tan[1])
                    out = t_add(out, ew_binary("mul", *in[0], *tan[1],
                                               [](double a, double b) { return a * b; }));
                return out;
            },
            [](const Node&, const Ins& in, const Tensor& adj, const Acc& acc) {
                acc(0, reduce_to_shape(
                           ew_binary("mul", adj, *in[1], [](double a, double b) { return a * b; }),
                           in[0]->shape()));
                acc(1, reduce_to_shape(
                           ew_binary("mul", adj, *in[0], [](double a, double b) { return a * b; }),
                           in[1]->shape()));
            },
        });

        set(Op::div, {
            [](const Node&, const Ins& in) {
                return ew_binary("div", *in[0], *in[1], [](double a, double b) { return a / b; });
            },
            [](const Node& n, const Ins& in, const Ins& tan) {
                Tensor out(n.value.shape());
                if (tan[0])
                    out = ew_binary("div", *tan[0], *in[1], [](double a, double b) { return a / b; });
                if (tan[1]) {
                    Tensor term = ew_binary("div", ew_binary("mul", *in[0], *tan[1],
                                                             [](double a, double b) { return a * b; }),
                                            ew_binary("mul", *in[1], *in[1],
                                                      [](double a, double b) { return a * b; }),
                                            [](double a, double b) { return a / b; });
                    out = t_sub(out, term);
                }
                return out;
            },
            [](const Node&, const Ins& in, const Tensor& adj, const Acc& acc) {
                acc(0, reduce_to_shape(
                           ew_binary("div", adj, *in[1], [](double a, double b) { return a / b; }),
                           in[0]->shape()));
                Tensor gb = ew_binary("div",
                                      ew_binary("mul", adj, *in[0],
                                                [](double a, double b) { return a * b; }),
                                      ew_binary("mul", *in[1], *in[1],
                                                [](double a, double b) { return a * b; }),
                                      [](double a, double b) { return -a / b; });
                acc(1, reduce_to_shape(gb, in[1]->shape()));
            },
        });

        set(Op::neg, {
            [](const Node&, const Ins& in) { return t_scale(*in[0], -1.0); },
            [](const Node& n, const Ins&, const Ins& tan) {
                return tan[0] ? t_scale(*tan[0], -1.0) : jvp_zero_like(n.value);
            },
            [](const Node&, const Ins&, const Tensor& adj, const Acc& acc) {
                acc(0, t_scale(adj, -1.0));
            },
        });

        set(Op::matmul, {
            [](const Node&, const Ins& in) { return matmul_value(*in[0], *in[1]); },
            [](const Node& n, const Ins& in, const Ins& tan) {
                Tensor out(n.value.shape());
                if (tan[0]) out = matmul_value(*tan[0], *in[1]);
                if (tan[1]) out = t_add(out, matmul_value(*in[0], *tan[1]));
                return out;
            },
            [](const Node&, const Ins& in, const Tensor& adj, const Acc& acc) {
                acc(0, matmul_value(adj, transpose_value(*in[1])));
                acc(1, matmul_value(transpose_value(*in[0]), adj));
            },
        });

        set(Op::transpose2d, {
            [](const Node&, const Ins& in) { return transpose_value(*in[0]); },
            [](const Node& n, const Ins&, const Ins& tan) {
                return tan[0] ? transpose_value(*tan[0]) : jvp_zero_like(n.value);
            },
            [](const Node&, const Ins&, const Tensor& adj, const Acc& acc) {
                acc(0, transpose_value(adj));
            },
        });

        set(Op::reshape, {
            [](const Node& n, const Ins& in) {
                if (shape_numel(n.attrs.shape) != in[0]->size()) {
                    throw std::invalid_argument("reshape: cannot view " +
                                                shape_to_string(in[0]->shape()) + " as " +
                                                shape_to_string(n.attrs.shape));
                }
                return Tensor(n.attrs.shape, in[0]->to_vector());
            },
            [](const Node& n, const Ins&, const Ins& tan) {
                return tan[0] ? Tensor(n.attrs.shape, tan[0]->to_vector())
                              : jvp_zero_like(n.value);
            },
            [](const Node&, const Ins& in, const Tensor& adj, const Acc& acc) {
                acc(0, Tensor(in[0]->shape(), adj.to_vector()));
            },
        });

        set(Op::broadcast, {
            [](const Node& n, const Ins& in) { return broadcast_value(*in[0], n.attrs.shape); },
            [](const Node& n, const Ins&, const Ins& tan) {
                return tan[0] ? broadcast_value(*tan[0], n.attrs.shape) : jvp_zero_like(n.value);
            },
            [](const Node&, const Ins& in, const Tensor& adj, const Acc& acc) {
                acc(0, reduce_to_shape(adj, in[0]->shape()));
            },
        });

        set(Op::reduce_sum, {
            [](const Node& n, const Ins& in) {
                const auto& x = *in[0];
                Tensor out(reduced_shape(x.shape(), n.attrs.axes, n.attrs.keepdims));
                double* od = out.mutable_data();
                const auto map = reduction_map(x.shape(), n.attrs.axes, n.attrs.keepdims);
                const double* xd = x.data();
                for (std::size_t i = 0; i < x.size(); ++i) od[map[i]] += xd[i];
                return out;
            },
            [](const Node& n, const Ins& in, const Ins& tan) {
                if (!tan[0]) return jvp_zero_like(n.value);
                Tensor out(n.value.shape());
                double* od = out.mutable_data();
                const auto map = reduction_map(in[0]->shape(), n.attrs.axes, n.attrs.keepdims);
                const double* td = tan[0]->data();
                for (std::size_t i = 0; i < tan[0]->size(); ++i) od[map[i]] += td[i];
                return out;
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                Tensor g(in[0]->shape());
                double* gd = g.mutable_data();
                const auto map = reduction_map(in[0]->shape(), n.attrs.axes, n.attrs.keepdims);
                const double* ad = adj.data();
                for (std::size_t i = 0; i < g.size(); ++i) gd[i] = ad[map[i]];
                acc(0, std::move(g));
            },
        });

        set(Op::reduce_mean, {
            [](const Node& n, const Ins& in) {
                const auto& x = *in[0];
                Tensor out(reduced_shape(x.shape(), n.attrs.axes, n.attrs.keepdims));
                const double inv = static_cast<double>(shape_numel(out.shape())) /
                                   static_cast<double>(x.size() == 0 ? 1 : x.size());
                double* od = out.mutable_data();
                const auto map = reduction_map(x.shape(), n.attrs.axes, n.attrs.keepdims);
                const double* xd = x.data();
                for (std::size_t i = 0; i < x.size(); ++i) od[map[i]] += xd[i];
                for (std::size_t i = 0; i < out.size(); ++i) od[i] *= inv;
                return out;
            },
            [](const Node& n, const Ins& in, const Ins& tan) {
                if (!tan[0]) return jvp_zero_like(n.value);
                Tensor out(n.value.shape());
                const double inv = static_cast<double>(out.size()) /
                                   static_cast<double>(in[0]->size());
                double* od = out.mutable_data();
                const auto map = reduction_map(in[0]->shape(), n.attrs.axes, n.attrs.keepdims);
                const double* td = tan[0]->data();
                for (std::size_t i = 0; i < tan[0]->size(); ++i) od[map[i]] += td[i] * inv;
                return out;
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                Tensor g(in[0]->shape());
                const double inv = static_cast<double>(adj.size()) /
                                   static_cast<double>(in[0]->size());
                double* gd = g.mutable_data();
                const auto map = reduction_map(in[0]->shape(), n.attrs.axes, n.attrs.keepdims);
                const double* ad = adj.data();
                for (std::size_t i = 0; i < g.size(); ++i) gd[i] = ad[map[i]] * inv;
                acc(0, std::move(g));
            },
        });

        set(Op::reduce_max, {
            [](const Node& n, const Ins& in) {
                const auto& x = *in[0];
                Tensor out(reduced_shape(x.shape(), n.attrs.axes, n.attrs.keepdims),
                           -std::numeric_limits<double>::infinity());
                double* od = out.mutable_data();
                const auto map = reduction_map(x.shape(), n.attrs.axes, n.attrs.keepdims);
                const double* xd = x.data();
                for (std::size_t i = 0; i < x.size(); ++i) od[map[i]] = std::max(od[map[i]], xd[i]);
                return out;
            },
            [](const Node& n, const Ins& in, const Ins& tan) {
                if (!tan[0]) return jvp_zero_like(n.value);
                Tensor out(n.value.shape());
                std::vector<bool> taken(out.size(), false);
                double* od = out.mutable_data();
                const auto map = reduction_map(in[0]->shape(), n.attrs.axes, n.attrs.keepdims);
                const double* xd = in[0]->data();
                const double* vd = n.value.data();
                const double* td = tan[0]->data();
                for (std::size_t i = 0; i < in[0]->size(); ++i) {
                    // route to the first element achieving the max
                    if (!taken[map[i]] && xd[i] == vd[map[i]]) {
                        od[map[i]] = td[i];
                        taken[map[i]] = true;
                    }
                }
                return out;
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                Tensor g(in[0]->shape());
                std::vector<bool> taken(adj.size(), false);
                double* gd = g.mutable_data();
                const auto map = reduction_map(in[0]->shape(), n.attrs.axes, n.attrs.keepdims);
                const double* xd = in[0]->data();
                const double* vd = n.value.data();
                const double* ad = adj.data();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (!taken[map[i]] && xd[i] == vd[map[i]]) {
                        gd[i] = ad[map[i]];
                        taken[map[i]] = true;
                    }
                }
                acc(0, std::move(g));
            },
        });

        set(Op::slice, {
            [](const Node& n, const Ins& in) {
                const auto& x = *in[0];
                const auto& s = x.shape();
                if (n.attrs.axis >= s.size() ||
                    n.attrs.start + n.attrs.length > s[n.attrs.axis]) {
                    throw std::invalid_argument("slice: range [" + std::to_string(n.attrs.start) +
                                                "," +
                                                std::to_string(n.attrs.start + n.attrs.length) +
                                                ") out of bounds for " + shape_to_string(s));
                }
                Tensor::Shape oshape = s;
                oshape[n.attrs.axis] = n.attrs.length;
                Tensor out(oshape);
                double* od = out.mutable_data();
                const double* xd = x.data();
                std::size_t outer = 1, inner = 1;
                for (std::size_t d = 0; d < n.attrs.axis; ++d) outer *= s[d];
                for (std::size_t d = n.attrs.axis + 1; d < s.size(); ++d) inner *= s[d];
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* src = xd + (o * s[n.attrs.axis] + n.attrs.start) * inner;
                    double* dst = od + o * n.attrs.length * inner;
                    std::copy(src, src + n.attrs.length * inner, dst);
                }
                return out;
            },
            [](const Node& n, const Ins&, const Ins& tan) {
                if (!tan[0]) return jvp_zero_like(n.value);
                Ins tin{tan[0]};
                return rule_table()[static_cast<std::size_t>(Op::slice)].eval(n, tin);
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                const auto& s = in[0]->shape();
                Tensor g(s);
                double* gd = g.mutable_data();
                const double* ad = adj.data();
                std::size_t outer = 1, inner = 1;
                for (std::size_t d = 0; d < n.attrs.axis; ++d) outer *= s[d];
                for (std::size_t d = n.attrs.axis + 1; d < s.size(); ++d) inner *= s[d];
                for (std::size_t o = 0; o < outer; ++o) {
                    double* dst = gd + (o * s[n.attrs.axis] + n.attrs.start) * inner;
                    const double* src = ad + o * n.attrs.length * inner;
                    std::copy(src, src + n.attrs.length * inner, dst);
                }
                acc(0, std::move(g));
            },
        });

        set(Op::concat, {
            [](const Node& n, const Ins& in) {
                const std::size_t axis = n.attrs.axis;
                const auto& s0 = in[0]->shape();
                if (axis >= s0.size()) {
                    throw std::invalid_argument("concat: axis " + std::to_string(axis) +
                                                " out of range for " + shape_to_string(s0));
                }
                Tensor::Shape oshape = s0;
                std::size_t total = 0;
                for (const Tensor* p : in) {
                    const auto& s = p->shape();
                    if (s.size() != s0.size()) {
                        throw std::invalid_argument("concat: rank mismatch " +
                                                    shape_to_string(s0) + " vs " +
                                                    shape_to_string(s));
                    }
                    for (std::size_t d = 0; d < s.size(); ++d) {
                        if (d != axis && s[d] != s0[d]) {
                            throw std::invalid_argument("concat: incompatible shapes " +
                                                        shape_to_string(s0) + " and " +
                                                        shape_to_string(s));
                        }
                    }
                    total += s[axis];
                }
                oshape[axis] = total;
                Tensor out(oshape);
                double* od = out.mutable_data();
                std::size_t outer = 1, inner = 1;
                for (std::size_t d = 0; d < axis; ++d) outer *= oshape[d];
                for (std::size_t d = axis + 1; d < oshape.size(); ++d) inner *= oshape[d];
                std::size_t offset = 0;
                for (const Tensor* p : in) {
                    const std::size_t len = p->shape()[axis];
                    const double* src = p->data();
                    for (std::size_t o = 0; o < outer; ++o) {
                        double* dst = od + (o * total + offset) * inner;
                        std::copy(src + o * len * inner, src + (o + 1) * len * inner, dst);
                    }
                    offset += len;
                }
                return out;
            },
            [](const Node& n, const Ins& in, const Ins& tan) {
                // concat the tangents, substituting zeros where absent;
                // reserve so pointers into `zeros` stay valid
                std::vector<Tensor> zeros;
                zeros.reserve(in.size());
                Ins tin(in.size());
                for (std::size_t i = 0; i < in.size(); ++i) {
                    if (tan[i]) {
                        tin[i] = tan[i];
                    } else {
                        zeros.emplace_back(in[i]->shape());
                        tin[i] = &zeros.back();
                    }
                }
                // zeros vector must not reallocate after pointers were taken
                return rule_table()[static_cast<std::size_t>(Op::concat)].eval(n, tin);
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                const std::size_t axis = n.attrs.axis;
                std::size_t offset = 0;
                for (std::size_t i = 0; i < in.size(); ++i) {
                    Node sl;
                    sl.attrs.axis = axis;
                    sl.attrs.start = offset;
                    sl.attrs.length = in[i]->shape()[axis];
                    Ins ain{&adj};
                    acc(i, rule_table()[static_cast<std::size_t>(Op::slice)].eval(sl, ain));
                    offset += sl.attrs.length;
                }
            },
        });

        set(Op::exp, {
            [](const Node&, const Ins& in) {
                return ew_unary(*in[0], [](double x) { return std::exp(x); });
            },
            [](const Node&, const Ins& in, const Ins& tan) {
                return unary_jvp(*in[0], tan[0], [](double x) { return std::exp(x); });
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                unary_vjp(n, in, adj, acc, [](double x) { return std::exp(x); });
            },
        });

        set(Op::log, {
            [](const Node&, const Ins& in) {
                return ew_unary(*in[0], [](double x) { return std::log(x); });
            },
            [](const Node&, const Ins& in, const Ins& tan) {
                return unary_jvp(*in[0], tan[0], [](double x) { return 1.0 / x; });
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                unary_vjp(n, in, adj, acc, [](double x) { return 1.0 / x; });
            },
        });

        set(Op::sin, {
            [](const Node&, const Ins& in) {
                return ew_unary(*in[0], [](double x) { return std::sin(x); });
            },
            [](const Node&, const Ins& in, const Ins& tan) {
                return unary_jvp(*in[0], tan[0], [](double x) { return std::cos(x); });
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                unary_vjp(n, in, adj, acc, [](double x) { return std::cos(x); });
            },
        });

        set(Op::cos, {
            [](const Node&, const Ins& in) {
                return ew_unary(*in[0], [](double x) { return std::cos(x); });
            },
            [](const Node&, const Ins& in, const Ins& tan) {
                return unary_jvp(*in[0], tan[0], [](double x) { return -std::sin(x); });
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                unary_vjp(n, in, adj, acc, [](double x) { return -std::sin(x); });
            },
        });

        set(Op::sqrt, {
            [](const Node&, const Ins& in) {
                return ew_unary(*in[0], [](double x) { return std::sqrt(x); });
            },
            [](const Node&, const Ins& in, const Ins& tan) {
                return unary_jvp(*in[0], tan[0], [](double x) { return 0.5 / std::sqrt(x); });
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                unary_vjp(n, in, adj, acc, [](double x) { return 0.5 / std::sqrt(x); });
            },
        });

        set(Op::rsqrt, {
            [](const Node&, const Ins& in) {
                return ew_unary(*in[0], [](double x) { return 1.0 / std::sqrt(x); });
            },
            [](const Node&, const Ins& in, const Ins& tan) {
                return unary_jvp(*in[0], tan[0],
                                 [](double x) { return -0.5 / (x * std::sqrt(x)); });
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                unary_vjp(n, in, adj, acc, [](double x) { return -0.5 / (x * std::sqrt(x)); });
            },
        });

        set(Op::abs, {
            [](const Node&, const Ins& in) {
                return ew_unary(*in[0], [](double x) { return std::fabs(x); });
            },
            [](const Node&, const Ins& in, const Ins& tan) {
                // subgradient 0 at the kink
                return unary_jvp(*in[0], tan[0],
                                 [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                unary_vjp(n, in, adj, acc,
                          [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
            },
        });

        set(Op::square, {
            [](const Node&, const Ins& in) {
                return ew_unary(*in[0], [](double x) { return x * x; });
            },
            [](const Node&, const Ins& in, const Ins& tan) {
                return unary_jvp(*in[0], tan[0], [](double x) { return 2.0 * x; });
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                unary_vjp(n, in, adj, acc, [](double x) { return 2.0 * x; });
            },
        });

        set(Op::sigmoid, {
            [](const Node&, const Ins& in) { return ew_unary(*in[0], stable_sigmoid); },
            [](const Node&, const Ins& in, const Ins& tan) {
                return unary_jvp(*in[0], tan[0], [](double x) {
                    const double s = stable_sigmoid(x);
                    return s * (1.0 - s);
                });
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                unary_vjp(n, in, adj, acc, [](double x) {
                    const double s = stable_sigmoid(x);
                    return s * (1.0 - s);
                });
            },
        });

        set(Op::pow_scalar, {
            [](const Node& n, const Ins& in) {
                const double p = n.attrs.scalar;
                return ew_unary(*in[0], [p](double x) { return std::pow(x, p); });
            },
            [](const Node& n, const Ins& in, const Ins& tan) {
                const double p = n.attrs.scalar;
                return unary_jvp(*in[0], tan[0],
                                 [p](double x) { return p * std::pow(x, p - 1.0); });
            },
            [](const Node& n, const Ins& in, const Tensor& adj, const Acc& acc) {
                const double p = n.attrs.scalar;
                unary_vjp(n, in, adj, acc, [p](double x) { return p * std::pow(x, p - 1.0); });
            },
        });

        set(Op::maximum, {
            [](const Node&, const Ins& in) {
                return ew_binary("maximum", *in[0], *in[1],
                                 [](double a, double b) { return a >= b ? a : b; });
            },
            [](const Node& n, const Ins& in, const Ins& tan) {
                // ties take the first argument's derivative
                Tensor out(n.value.shape());
                Tensor za, zb;
                const Tensor* ta = tan[0];
                const Tensor* tb = tan[1];
                if (!ta) { za = Tensor(in[0]->shape()); ta = &za; }
                if (!tb) { zb = Tensor(in[1]->shape()); tb = &zb; }
                Tensor mask = ew_binary("maximum", *in[0], *in[1],
                                        [](double a, double b) { return a >= b ? 1.0 : 0.0; });
                Tensor left = ew_binary("mul", mask, *ta, [](double m, double t) { return m * t; });
                Tensor invm = ew_unary(mask, [](double m) { return 1.0 - m; });
                Tensor right = ew_binary("mul", invm, *tb, [](double m, double t) { return m * t; });
                return t_add(left, right);
            },
            [](const Node&, const Ins& in, const Tensor& adj, const Acc& acc) {
                Tensor mask = ew_binary("maximum", *in[0], *in[1],
                                        [](double a, double b) { return a >= b ? 1.0 : 0.0; });
                acc(0, reduce_to_shape(ew_binary("mul", adj, mask,
                                                 [](double a, double m) { return a * m; }),
                                       in[0]->shape()));
                Tensor invm = ew_unary(mask, [](double m) { return 1.0 - m; });
                acc(1, reduce_to_shape(ew_binary("mul", adj, invm,
                                                 [](double a, double m) { return a * m; }),
                                       in[1]->shape()));
            },
        });

        set(Op::stop_gradient, {
            [](const Node&, const Ins& in) { return *in[0]; },
            [](const Node& n, const Ins&, const Ins&) { return jvp_zero_like(n.value); },
            [](const Node&, const Ins&, const Tensor&, const Acc&) {},
        });

        set(Op::swap_last2, {
            [](const Node&, const Ins& in) { return swap_last2_value(*in[0]); },
            [](const Node& n, const Ins&, const Ins& tan) {
                return tan[0] ? swap_last2_value(*tan[0]) : jvp_zero_like(n.value);
            },
            [](const Node&, const Ins&, const Tensor& adj, const Acc& acc) {
                acc(0, swap_last2_value(adj)); // self-inverse
            },
        });

        return t;
    }();
    return table;
}

} // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::div: return "div";
        case Op::neg: return "neg";
        case Op::matmul: return "matmul";
        case Op::transpose2d: return "transpose2d";
        case Op::reshape: return "reshape";
        case Op::broadcast: return "broadcast";
        case Op::reduce_sum: return "reduce_sum";
        case Op::reduce_mean: return "reduce_mean";
        case Op::reduce_max: return "reduce_max";
        case Op::slice: return "slice";
        case Op::concat: return "concat";
        case Op::exp: return "exp";
        case Op::log: return "log";
        case Op::sin: return "sin";
        case Op::cos: return "cos";
        case Op::sqrt: return "sqrt";
        case Op::rsqrt: return "rsqrt";
        case Op::abs: return "abs";
        case Op::square: return "square";
        case Op::sigmoid: return "sigmoid";
        case Op::pow_scalar: return "pow_scalar";
        case Op::maximum: return "maximum";
        case Op::stop_gradient: return "stop_gradient";
        case Op::swap_last2: return "swap_last2";
    }
    return "?";
}

const Tensor& Var::value() const { return graph->node(id).value; }

bool Var::has_tangent() const { return graph->node(id).has_tangent; }

Tensor Var::tangent() const {
    const Node& n = graph->node(id);
    return n.has_tangent ? n.tangent : Tensor(n.value.shape());
}

Var Graph::leaf(Tensor value) {
    Node n;
    n.op = Op::leaf;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Graph::leaf(Tensor value, Tensor tangent) {
    if (!value.same_shape(tangent)) {
        throw std::invalid_argument("leaf: tangent shape " + shape_to_string(tangent.shape()) +
                                    " does not match value shape " +
                                    shape_to_string(value.shape()));
    }
    Node n;
    n.op = Op::leaf;
    n.value = std::move(value);
    n.tangent = std::move(tangent);
    n.has_tangent = true;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Graph::apply(Op op, std::vector<std::int32_t> inputs, OpAttrs attrs) {
    const Rule& rule = rule_table()[static_cast<std::size_t>(op)];
    Node n;
    n.op = op;
    n.attrs = std::move(attrs);
    n.inputs = std::move(inputs);

    Ins in(n.inputs.size());
    Ins tan(n.inputs.size(), nullptr);
    bool any_tangent = false;
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const Node& src = nodes_[n.inputs[i]];
        in[i] = &src.value;
        if (src.has_tangent) {
            tan[i] = &src.tangent;
            any_tangent = true;
        }
    }
    n.value = rule.eval(n, in);
    if (any_tangent && op != Op::stop_gradient) {
        n.tangent = rule.jvp(n, in, tan);
        n.has_tangent = true;
    }
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

void Graph::backward(Var output) {
    if (output.graph != this) {
        throw std::invalid_argument("backward: output belongs to another graph");
    }
    if (output.value().size() != 1) {
        throw std::invalid_argument("backward: non-scalar output of shape " +
                                    shape_to_string(output.value().shape()));
    }
    for (Node& n : nodes_) {
        n.has_adjoint = false;
        n.adjoint = Tensor();
    }
    Node& out = nodes_[output.id];
    out.adjoint = Tensor::full(out.value.shape(), 1.0);
    out.has_adjoint = true;

    for (std::int32_t id = output.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.has_adjoint || n.op == Op::leaf) continue;
        Ins in(n.inputs.size());
        for (std::size_t i = 0; i < n.inputs.size(); ++i) in[i] = &nodes_[n.inputs[i]].value;
        const Acc acc = [&](std::size_t slot, Tensor g) {
            Node& dst = nodes_[n.inputs[slot]];
            if (!dst.has_adjoint) {
                dst.adjoint = std::move(g);
                dst.has_adjoint = true;
            } else {
                double* ad = dst.adjoint.mutable_data();
                const double* gd = g.data();
                for (std::size_t k = 0; k < g.size(); ++k) ad[k] += gd[k];
            }
        };
        rule_table()[static_cast<std::size_t>(n.op)].vjp(n, in, n.adjoint, acc);
    }
}

Tensor Graph::adjoint(Var v) const {
    const Node& n = nodes_[v.id];
    return n.has_adjoint ? n.adjoint : Tensor(n.value.shape());
}

bool Graph::replay_matches() const {
    std::vector<Tensor> replayed(nodes_.size());
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        const Node& n = nodes_[id];
        if (n.op == Op::leaf) {
            replayed[id] = n.value;
        } else {
            Ins in(n.inputs.size());
            for (std::size_t i = 0; i < n.inputs.size(); ++i) in[i] = &replayed[n.inputs[i]];
            replayed[id] = rule_table()[static_cast<std::size_t>(n.op)].eval(n, in);
        }
        if (!bitwise_equal(replayed[id], n.value)) return false;
    }
    return true;
}

// ---- free functions ---------------------------------------------------------

namespace {
Graph& same_graph(Var a, Var b, const char* op) {
    if (a.graph != b.graph) {
        throw std::invalid_argument(std::string(op) + ": operands from different graphs");
    }
    return *a.graph;
}
} // namespace

Var add(Var a, Var b) { return same_graph(a, b, "add").apply(Op::add, {a.id, b.id}); }
Var sub(Var a, Var b) { return same_graph(a, b, "sub").apply(Op::sub, {a.id, b.id}); }
Var mul(Var a, Var b) { return same_graph(a, b, "mul").apply(Op::mul, {a.id, b.id}); }
Var div(Var a, Var b) { return same_graph(a, b, "div").apply(Op::div, {a.id, b.id}); }
Var neg(Var a) { return a.graph->apply(Op::neg, {a.id}); }
Var matmul(Var a, Var b) { return same_graph(a, b, "matmul").apply(Op::matmul, {a.id, b.id}); }
Var transpose2d(Var a) { return a.graph->apply(Op::transpose2d, {a.id}); }

Var reshape(Var a, Tensor::Shape shape) {
    OpAttrs attrs;
    attrs.shape = std::move(shape);
    return a.graph->apply(Op::reshape, {a.id}, std::move(attrs));
}

Var broadcast_to(Var a, Tensor::Shape shape) {
    OpAttrs attrs;
    attrs.shape = std::move(shape);
    return a.graph->apply(Op::broadcast, {a.id}, std::move(attrs));
}

namespace {
OpAttrs reduce_attrs(std::vector<std::size_t> axes, bool keepdims, const Var& a) {
    for (std::size_t ax : axes) {
        if (ax >= a.value().rank()) {
            throw std::invalid_argument("reduce: axis " + std::to_string(ax) +
                                        " out of range for " +
                                        shape_to_string(a.value().shape()));
        }
    }
    OpAttrs attrs;
    attrs.axes = std::move(axes);
    attrs.keepdims = keepdims;
    return attrs;
}

std::vector<std::size_t> all_axes(const Var& a) {
    std::vector<std::size_t> axes(a.value().rank());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return axes;
}
} // namespace

Var reduce_sum(Var a, std::vector<std::size_t> axes, bool keepdims) {
    return a.graph->apply(Op::reduce_sum, {a.id}, reduce_attrs(std::move(axes), keepdims, a));
}
Var reduce_mean(Var a, std::vector<std::size_t> axes, bool keepdims) {
    return a.graph->apply(Op::reduce_mean, {a.id}, reduce_attrs(std::move(axes), keepdims, a));
}
Var reduce_max(Var a, std::vector<std::size_t> axes, bool keepdims) {
    return a.graph->apply(Op::reduce_max, {a.id}, reduce_attrs(std::move(axes), keepdims, a));
}
Var sum_all(Var a) { return reduce_sum(a, all_axes(a)); }
Var mean_all(Var a) { return reduce_mean(a, all_axes(a)); }

Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length) {
    OpAttrs attrs;
    attrs.axis = axis;
    attrs.start = start;
    attrs.length = length;
    return a.graph->apply(Op::slice, {a.id}, std::move(attrs));
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: empty input list");
    std::vector<std::int32_t> ids;
    for (const Var& v : parts) {
        same_graph(parts[0], v, "concat");
        ids.push_back(v.id);
    }
    OpAttrs attrs;
    attrs.axis = axis;
    return parts[0].graph->apply(Op::concat, std::move(ids), std::move(attrs));
}

std::vector<Var> split(Var a, std::size_t axis, const std::vector<std::size_t>& sizes) {
    std::size_t total = 0;
    for (std::size_t s : sizes) total += s;
    if (axis >= a.value().rank() || total != a.value().shape()[axis]) {
        throw std::invalid_argument("split: sizes do not cover axis " + std::to_string(axis) +
                                    " of " + shape_to_string(a.value().shape()));
    }
    std::vector<Var> out;
    std::size_t start = 0;
    for (std::size_t s : sizes) {
        out.push_back(slice(a, axis, start, s));
        start += s;
    }
    return out;
}

Var exp(Var a) { return a.graph->apply(Op::exp, {a.id}); }
Var log(Var a) { return a.graph->apply(Op::log, {a.id}); }
Var sin(Var a) { return a.graph->apply(Op::sin, {a.id}); }
Var cos(Var a) { return a.graph->apply(Op::cos, {a.id}); }
Var sqrt(Var a) { return a.graph->apply(Op::sqrt, {a.id}); }
Var rsqrt(Var a) { return a.graph->apply(Op::rsqrt, {a.id}); }
Var abs(Var a) { return a.graph->apply(Op::abs, {a.id}); }
Var square(Var a) { return a.graph->apply(Op::square, {a.id}); }
Var sigmoid(Var a) { return a.graph->apply(Op::sigmoid, {a.id}); }
Var silu(Var a) { return mul(a, sigmoid(a)); }

Var pow_scalar(Var a, double exponent) {
    OpAttrs attrs;
    attrs.scalar = exponent;
    return a.graph->apply(Op::pow_scalar, {a.id}, std::move(attrs));
}

Var maximum(Var a, Var b) { return same_graph(a, b, "maximum").apply(Op::maximum, {a.id, b.id}); }
Var stop_gradient(Var a) { return a.graph->apply(Op::stop_gradient, {a.id}); }
Var swap_last2(Var a) { return a.graph->apply(Op::swap_last2, {a.id}); }

Var softmax_lastdim(Var a) {
    const std::size_t last = a.value().rank() - 1;
    Var shifted = sub(a, stop_gradient(reduce_max(a, {last}, true)));
    Var e = exp(shifted);
    return div(e, reduce_sum(e, {last}, true));
}

Var add_scalar(Var a, double s) { return add(a, a.graph->scalar(s)); }
Var mul_scalar(Var a, double s) { return mul(a, a.graph->scalar(s)); }

std::pair<std::vector<Tensor>, std::vector<Tensor>>
jvp(const VarFn& f, const std::vector<Tensor>& x, const std::vector<Tensor>& tangents) {
    if (x.size() != tangents.size()) {
        throw std::invalid_argument("jvp: " + std::to_string(tangents.size()) +
                                    " tangents for " + std::to_string(x.size()) + " primals");
    }
    Graph g;
    std::vector<Var> leaves;
    leaves.reserve(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) leaves.push_back(g.leaf(x[i], tangents[i]));
    const auto outs = f(g, leaves);
    std::vector<Tensor> values, dirs;
    for (const Var& o : outs) {
        values.push_back(o.value());
        dirs.push_back(o.tangent());
    }
    return {values, dirs};
}

std::vector<Tensor> grad(const VarFn& f, const std::vector<Tensor>& params) {
    Graph g;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) leaves.push_back(g.leaf(p));
    const auto outs = f(g, leaves);
    if (outs.size() != 1) {
        throw std::invalid_argument("grad: function must return exactly one output");
    }
    g.backward(outs[0]);
    std::vector<Tensor> grads;
    grads.reserve(leaves.size());
    for (const Var& l : leaves) grads.push_back(g.adjoint(l));
    return grads;
}

Tensor t_add(const Tensor& a, const Tensor& b) {
    return ew_binary("add", a, b, [](double x, double y) { return x + y; });
}
Tensor t_sub(const Tensor& a, const Tensor& b) {
    return ew_binary("sub", a, b, [](double x, double y) { return x - y; });
}
Tensor t_mul(const Tensor& a, const Tensor& b) {
    return ew_binary("mul", a, b, [](double x, double y) { return x * y; });
}
Tensor t_scale(const Tensor& a, double s) {
    return ew_unary(a, [s](double x) { return x * s; });
}
Tensor t_axpy(double alpha, const Tensor& x, const Tensor& y) {
    if (!x.same_shape(y)) {
        throw std::invalid_argument("axpy: shapes " + shape_to_string(x.shape()) + " and " +
                                    shape_to_string(y.shape()) + " differ");
    }
    Tensor out(x.shape());
    double* od = out.mutable_data();
    const double* xd = x.data();
    const double* yd = y.data();
    for (std::size_t i = 0; i < x.size(); ++i) od[i] = alpha * xd[i] + yd[i];
    return out;
}

} // namespace avf

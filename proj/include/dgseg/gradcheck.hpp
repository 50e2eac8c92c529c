#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dgseg/afb.hpp"
#include "dgseg/dcar.hpp"
#include "dgseg/losses.hpp"
#include "dgseg/ops.hpp"
#include "dgseg/rng.hpp"
#include "dgseg/segnet.hpp"

namespace dgseg {

using LossFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

struct InputGradError {
    double max_abs_diff = 0;
    double max_abs_grad = 0;
    double rel_err = 0;  // max_abs_diff / max(max_abs_grad, floor)
};

/// Compares the tape gradient of a scalar function against central
/// differences, one input tensor at a time. Inputs are perturbed in place.
/// The error of an input is the largest absolute disagreement divided by the
/// largest gradient magnitude of that input (floored at 1e-8).
/// With max_elements > 0 only an evenly strided slice of that many entries
/// per input is perturbed.
inline std::vector<InputGradError> grad_check(const LossFn& fn, std::vector<Tensor<double>> inputs,
                                              double delta = 1e-6, std::size_t max_elements = 0) {
    for (auto& x : inputs) {
        x.set_requires_grad(true);
        x.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        const Tensor<double> loss = fn(inputs);
        if (loss.numel() != 1) throw ShapeError("grad_check: function must return a scalar");
        tape.backward(loss);
        for (const auto& x : inputs) analytic.emplace_back(x.grad().begin(), x.grad().end());
    }
    NoGradScope<double> no_grad;
    std::vector<InputGradError> out;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        InputGradError e;
        auto data = inputs[i].mutable_data();
        const std::size_t n = data.size();
        const std::size_t step = (max_elements == 0 || n <= max_elements) ? 1 : (n + max_elements - 1) / max_elements;
        for (std::size_t k = 0; k < n; k += step) {
            const double orig = data[k];
            data[k] = orig + delta;
            const double up = fn(inputs).item();
            data[k] = orig - delta;
            const double down = fn(inputs).item();
            data[k] = orig;
            const double numeric = (up - down) / (2 * delta);
            e.max_abs_diff = std::max(e.max_abs_diff, std::abs(numeric - analytic[i][k]));
            e.max_abs_grad = std::max({e.max_abs_grad, std::abs(numeric), std::abs(analytic[i][k])});
        }
        e.rel_err = e.max_abs_diff / std::max(e.max_abs_grad, 1e-8);
        out.push_back(e);
    }
    return out;
}

inline double max_rel_err(const std::vector<InputGradError>& errs) {
    double m = 0;
    for (const auto& e : errs) m = std::max(m, e.rel_err);
    return m;
}

/// One randomized gradient-check instance: inputs plus a scalar function.
struct GradCase {
    std::vector<Tensor<double>> inputs;
    LossFn fn;
    std::size_t max_elements = 0;  // per input; 0 checks every entry
};

struct GradCheckSpec {
    std::string name;
    std::function<GradCase(Rng&)> make;
};

struct GradCheckOutcome {
    std::string name;
    std::size_t seeds = 0;
    double worst_rel_err = 0;
    bool passed = false;
};

namespace gc {

inline Tensor<double> randn(Rng& r, Shape s, double stddev = 1.0) { return sample_normal<double>(r, s, stddev); }

/// Values in ±[lo, lo + |N(0,1)|], kept clear of zero for kinked or singular ops.
inline Tensor<double> away_from_zero(Rng& r, Shape s, double lo = 0.2) {
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) {
        const double n = r.normal();
        x = (n < 0 ? -1.0 : 1.0) * (lo + std::abs(n));
    }
    return Tensor<double>(std::move(s), std::move(v));
}

inline Tensor<double> positive(Rng& r, Shape s, double lo = 0.3) {
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) x = lo + 2.0 * r.uniform();
    return Tensor<double>(std::move(s), std::move(v));
}

/// Contracts a tensor output with fixed random weights to get a scalar.
inline LossFn contract(std::function<Tensor<double>(const std::vector<Tensor<double>>&)> op, Rng& r, Shape out) {
    const Tensor<double> w = randn(r, std::move(out));
    return [op, w](const std::vector<Tensor<double>>& in) { return sum(op(in) * w); };
}

inline MaskTensor random_mask(Rng& r, std::size_t b, std::size_t h, std::size_t w, std::size_t k) {
    MaskTensor m;
    m.batch = b;
    m.height = h;
    m.width = w;
    m.labels.resize(b * h * w);
    for (auto& l : m.labels) l = static_cast<int>(r.below(k));
    return m;
}

inline AttentionParams<double> attention_params(Rng& r, std::size_t c, std::size_t heads) {
    return AttentionParams<double>::init(c, heads, r);
}

}  // namespace gc

/// Every differentiable op and composed module checked by the suite.
inline std::vector<GradCheckSpec> gradcheck_specs() {
    using V = std::vector<Tensor<double>>;
    using namespace gc;
    std::vector<GradCheckSpec> s;
    const auto binary = [&](std::string name, BinaryKind kind, Shape a, Shape b, Shape out) {
        s.push_back({name, [=](Rng& r) {
                         Tensor<double> x = randn(r, a);
                         Tensor<double> y = kind == BinaryKind::div ? away_from_zero(r, b, 0.5) : randn(r, b);
                         return GradCase{{x, y}, contract([kind](const V& v) { return elementwise(kind, v[0], v[1]); },
                                                         r, out)};
                     }});
    };
    binary("add", BinaryKind::add, {3, 4}, {3, 4}, {3, 4});
    binary("add_broadcast", BinaryKind::add, {2, 3, 4}, {3, 1}, {2, 3, 4});
    binary("sub_broadcast", BinaryKind::sub, {2, 1, 4}, {3, 1}, {2, 3, 4});
    binary("mul", BinaryKind::mul, {4, 5}, {4, 5}, {4, 5});
    binary("mul_broadcast", BinaryKind::mul, {2, 3, 2, 2}, {1, 3, 1, 1}, {2, 3, 2, 2});
    binary("div", BinaryKind::div, {3, 4}, {3, 4}, {3, 4});
    binary("div_broadcast", BinaryKind::div, {4, 3}, {1, 3}, {4, 3});

    const auto unary_case = [&](std::string name, std::function<Tensor<double>(Rng&, Shape)> gen,
                                std::function<Tensor<double>(const Tensor<double>&)> op) {
        s.push_back({name, [=](Rng& r) {
                         const Shape sh{3, 5};
                         return GradCase{{gen(r, sh)}, contract([op](const V& v) { return op(v[0]); }, r, sh)};
                     }});
    };
    const auto normal_gen = [](Rng& r, Shape sh) { return randn(r, sh); };
    const auto away_gen = [](Rng& r, Shape sh) { return away_from_zero(r, sh); };
    const auto pos_gen = [](Rng& r, Shape sh) { return positive(r, sh); };
    unary_case("scale", normal_gen, [](const Tensor<double>& x) { return x * 1.7; });
    unary_case("add_scalar", normal_gen, [](const Tensor<double>& x) { return x + 0.3; });
    unary_case("scalar_minus", normal_gen, [](const Tensor<double>& x) { return 2.0 - x; });
    unary_case("relu", away_gen, [](const Tensor<double>& x) { return relu(x); });
    unary_case("square", normal_gen, [](const Tensor<double>& x) { return square(x); });
    unary_case("sqrt", pos_gen, [](const Tensor<double>& x) { return sqrt(x); });
    unary_case("exp", normal_gen, [](const Tensor<double>& x) { return exp(x); });
    unary_case("log", pos_gen, [](const Tensor<double>& x) { return log(x); });

    s.push_back({"sum", [](Rng& r) {
                     return GradCase{{randn(r, {4, 4})}, [](const V& v) { return square(sum(v[0])); }};
                 }});
    s.push_back({"mean", [](Rng& r) {
                     return GradCase{{randn(r, {4, 4})}, [](const V& v) { return exp(mean(v[0])); }};
                 }});
    s.push_back({"sum_axes", [](Rng& r) {
                     return GradCase{{randn(r, {2, 3, 4})},
                                     contract([](const V& v) { return sum_axes(v[0], {0, 2}); }, r, {3})};
                 }});
    s.push_back({"mean_axes_keepdim", [](Rng& r) {
                     return GradCase{{randn(r, {2, 3, 4})},
                                     contract([](const V& v) { return mean_axes(v[0], {1}, true); }, r, {2, 1, 4})};
                 }});
    s.push_back({"reshape", [](Rng& r) {
                     return GradCase{{randn(r, {2, 6})},
                                     contract([](const V& v) { return reshape(v[0], {3, 4}); }, r, {3, 4})};
                 }});
    s.push_back({"permute", [](Rng& r) {
                     return GradCase{{randn(r, {2, 3, 4})},
                                     contract([](const V& v) { return permute(v[0], {2, 0, 1}); }, r, {4, 2, 3})};
                 }});
    s.push_back({"transpose", [](Rng& r) {
                     return GradCase{{randn(r, {3, 5})}, contract([](const V& v) { return transpose(v[0]); }, r, {5, 3})};
                 }});
    s.push_back({"slice", [](Rng& r) {
                     return GradCase{{randn(r, {3, 6})},
                                     contract([](const V& v) { return slice(v[0], 1, 2, 3); }, r, {3, 3})};
                 }});
    s.push_back({"concat", [](Rng& r) {
                     return GradCase{{randn(r, {2, 3}), randn(r, {2, 2})},
                                     contract([](const V& v) { return concat(v, 1); }, r, {2, 5})};
                 }});
    s.push_back({"matmul", [](Rng& r) {
                     return GradCase{{randn(r, {3, 4}), randn(r, {4, 5})},
                                     contract([](const V& v) { return matmul(v[0], v[1]); }, r, {3, 5})};
                 }});
    s.push_back({"softmax", [](Rng& r) {
                     return GradCase{{randn(r, {3, 5})}, contract([](const V& v) { return softmax(v[0], 1); }, r, {3, 5})};
                 }});
    s.push_back({"softmax_axis0", [](Rng& r) {
                     return GradCase{{randn(r, {2, 4, 3})},
                                     contract([](const V& v) { return softmax(v[0], 1); }, r, {2, 4, 3})};
                 }});
    s.push_back({"log_softmax", [](Rng& r) {
                     return GradCase{{randn(r, {2, 3, 2, 2})},
                                     contract([](const V& v) { return log_softmax(v[0], 1); }, r, {2, 3, 2, 2})};
                 }});
    s.push_back({"instance_norm_rows", [](Rng& r) {
                     return GradCase{{randn(r, {4, 5})},
                                     contract([](const V& v) { return instance_norm(v[0], {1}); }, r, {4, 5})};
                 }});
    s.push_back({"instance_norm_spatial", [](Rng& r) {
                     return GradCase{{randn(r, {2, 2, 3, 3})},
                                     contract([](const V& v) { return instance_norm(v[0], {2, 3}); }, r, {2, 2, 3, 3})};
                 }});
    s.push_back({"channel_stats", [](Rng& r) {
                     const Tensor<double> wm = randn(r, {2, 3}), ws = randn(r, {2, 3});
                     return GradCase{{randn(r, {2, 3, 3, 3})}, [wm, ws](const V& v) {
                                         const auto st = channel_stats(v[0]);
                                         return sum(st.mu * wm) + sum(st.sigma * ws);
                                     }};
                 }});
    s.push_back({"conv2d_pad1", [](Rng& r) {
                     return GradCase{{randn(r, {1, 2, 5, 5}), randn(r, {3, 2, 3, 3})},
                                     contract([](const V& v) { return conv2d(v[0], v[1], 1, 1); }, r, {1, 3, 5, 5})};
                 }});
    s.push_back({"conv2d_stride2", [](Rng& r) {
                     return GradCase{{randn(r, {2, 2, 4, 4}), randn(r, {2, 2, 3, 3})},
                                     contract([](const V& v) { return conv2d(v[0], v[1], 2, 1); }, r, {2, 2, 2, 2})};
                 }});
    s.push_back({"conv2d_1x1", [](Rng& r) {
                     return GradCase{{randn(r, {2, 3, 3, 3}), randn(r, {2, 3, 1, 1})},
                                     contract([](const V& v) { return conv2d(v[0], v[1]); }, r, {2, 2, 3, 3})};
                 }});
    s.push_back({"upsample2x", [](Rng& r) {
                     return GradCase{{randn(r, {1, 2, 3, 3})},
                                     contract([](const V& v) { return upsample2x(v[0]); }, r, {1, 2, 6, 6})};
                 }});

    // Composed modules.
    s.push_back({"afb_blend", [](Rng& r) {
                     const AfbDraw<double> d = sample_afb_draw<double>(r, 2, 3, AfbConfig{});
                     return GradCase{{randn(r, {2, 3, 3, 3}, 2.0)},
                                     contract([d](const V& v) { return blend_style(v[0], d); }, r, {2, 3, 3, 3})};
                 }});
    s.push_back({"afb_apply", [](Rng& r) {
                     const Rng fixed = Rng::substream(r.next_u64(), {}, "afb");
                     return GradCase{{randn(r, {2, 2, 4, 4})}, contract(
                                                                 [fixed](const V& v) {
                                                                     Rng local = fixed;
                                                                     return apply_afb(v[0], local, AfbConfig{});
                                                                 },
                                                                 r, {2, 2, 4, 4})};
                 }});
    s.push_back({"mixstyle_reference", [](Rng& r) {
                     const Tensor<double> w(Shape{2}, {0.3, 0.8});
                     return GradCase{{randn(r, {2, 2, 3, 3})},
                                     contract([w](const V& v) { return convex_mixstyle_reference(v[0], {1, 0}, w); }, r,
                                              {2, 2, 3, 3})};
                 }});
    for (std::size_t heads : {2u, 4u}) {
        s.push_back({"channel_attention_h" + std::to_string(heads), [heads](Rng& r) {
                         const auto p = attention_params(r, 4, heads);
                         return GradCase{{randn(r, {4, 4}), randn(r, {4, 4}), p.w_q, p.w_k, p.w_v, p.w_out},
                                         contract(
                                             [heads](const V& v) {
                                                 AttentionParams<double> q{v[2], v[3], v[4], v[5], heads};
                                                 return channel_cross_attention(v[0], v[1], q);
                                             },
                                             r, {4, 4})};
                     }});
    }
    for (Fusion fusion : {Fusion::sum, Fusion::concat}) {
        s.push_back({fusion == Fusion::sum ? "dcar_block_sum" : "dcar_block_concat", [fusion](Rng& r) {
                         DcarConfig cfg;
                         cfg.heads = 2;
                         cfg.fusion = fusion;
                         const auto p = DcarParams<double>::init(4, cfg, r);
                         const Tensor<double> wo = randn(r, {4, 4}), wg = randn(r, {4, 4});
                         V inputs{randn(r, {4, 4}), randn(r, {4, 4}), p.cross_orig.w_q, p.self_gen.w_v};
                         if (fusion == Fusion::concat) inputs.push_back(p.fuse_orig);
                         return GradCase{inputs, [p, fusion, wo, wg](const V& v) {
                                             auto [o, g] = dcar_block(BottleneckPair<double>{v[0], v[1]}, p, fusion);
                                             return sum(o * wo) + sum(g * wg);
                                         }};
                     }});
    }
    s.push_back({"dcar_forward", [](Rng& r) {
                     DcarConfig cfg;
                     cfg.heads = 4;
                     const auto p = DcarParams<double>::init(4, cfg, r);
                     const Tensor<double> wo = randn(r, {2, 4, 2, 2}), wg = randn(r, {2, 4, 2, 2});
                     return GradCase{{randn(r, {2, 4, 2, 2}), randn(r, {2, 4, 2, 2})}, [p, wo, wg](const V& v) {
                                         auto [o, g] = dcar_forward(v[0], v[1], p);
                                         return sum(o * wo) + sum(g * wg);
                                     }};
                 }});

    // Losses.
    s.push_back({"dice_loss", [](Rng& r) {
                     const MaskTensor m = random_mask(r, 2, 3, 3, 3);
                     return GradCase{{randn(r, {2, 3, 3, 3})}, [m](const V& v) { return dice_loss(v[0], m); }};
                 }});
    s.push_back({"ce_loss", [](Rng& r) {
                     const MaskTensor m = random_mask(r, 2, 3, 3, 3);
                     return GradCase{{randn(r, {2, 3, 3, 3})}, [m](const V& v) { return ce_loss(v[0], m); }};
                 }});
    s.push_back({"consistency_loss", [](Rng& r) {
                     return GradCase{{randn(r, {2, 3, 3, 3}), randn(r, {2, 3, 3, 3})},
                                     [](const V& v) { return consistency_loss(v[0], v[1]); }};
                 }});
    s.push_back({"total_loss", [](Rng& r) {
                     const MaskTensor m = random_mask(r, 2, 3, 3, 3);
                     return GradCase{{randn(r, {2, 3, 3, 3}), randn(r, {2, 3, 3, 3})}, [m](const V& v) {
                                         return compute_losses(v[0], v[1], m, {0, 1}).total;
                                     }};
                 }});

    // End to end: training loss against slices of network weights.
    s.push_back({"end_to_end_weights", [](Rng& r) {
                     NetworkConfig net;
                     net.stage_widths = {4, 8};
                     net.image_size = 8;
                     DcarConfig dcar;
                     dcar.heads = 4;
                     auto model = std::make_shared<SegNet<double>>(net, dcar, r.next_u64());
                     const Tensor<double> x = randn(r, {1, 1, 8, 8});
                     const MaskTensor m = random_mask(r, 1, 8, 8, 3);
                     const Rng afb = Rng::substream(r.next_u64(), {}, "afb");
                     AfbConfig cfg;
                     cfg.apply_probability = 1.0;
                     V weights{model->parameter("enc1.conv1.w"), model->parameter("enc2.conv2.w"),
                               model->parameter("dec1.conv2.w"), model->parameter("head.w"),
                               model->parameter("head.b"), model->parameter("dcar.cross_orig.w_out")};
                     return GradCase{weights, [model, x, m, afb, cfg](const V&) {
                                         Rng local = afb;
                                         const auto out = model->forward_train(x, local, cfg, true);
                                         return compute_losses(out.logits_orig, out.logits_gen, m, {0}).total;
                                     },
                                     64};
                 }});
    return s;
}

/// Runs every spec over `seeds` seeds; an op passes when its worst relative
/// error stays below `tol`.
inline std::vector<GradCheckOutcome> run_gradcheck_suite(std::size_t seeds = 20, double tol = 1e-4,
                                                         std::uint64_t base_seed = 20240611) {
    std::vector<GradCheckOutcome> out;
    for (const auto& spec : gradcheck_specs()) {
        GradCheckOutcome o;
        o.name = spec.name;
        for (std::size_t k = 0; k < seeds; ++k) {
            Rng r = Rng::substream(base_seed, {k}, spec.name);
            GradCase c = spec.make(r);
            o.worst_rel_err = std::max(o.worst_rel_err, max_rel_err(grad_check(c.fn, c.inputs, 1e-6, c.max_elements)));
            ++o.seeds;
        }
        o.passed = o.worst_rel_err < tol;
        out.push_back(o);
    }
    return out;
}

}  // namespace dgseg

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dgseg/ops.hpp"
#include "dgseg/rng.hpp"

namespace dgseg {

enum class Fusion { sum, concat };

struct DcarConfig {
    bool enabled = true;
    std::size_t heads = 4;
    Fusion fusion = Fusion::sum;
    bool share_weights = false;  // one parameter set for both branches
};

/// Projections of one channel-attention block: w_q, w_k, w_v are C×2C,
/// w_out is 2C×C.
template <typename T>
struct AttentionParams {
    Tensor<T> w_q, w_k, w_v, w_out;
    std::size_t heads = 4;

    std::size_t channels() const { return w_q.dim(0); }

    void validate() const {
        const std::size_t c = w_q.dim(0);
        if (w_q.shape() != Shape{c, 2 * c} || w_k.shape() != w_q.shape() || w_v.shape() != w_q.shape() ||
            w_out.shape() != Shape{2 * c, c}) {
            throw ShapeError("AttentionParams: expected C×2C projections and a 2C×C output map");
        }
        if (heads == 0 || (2 * c) % heads != 0) {
            throw ShapeError("AttentionParams: heads must divide 2C = " + std::to_string(2 * c));
        }
    }

    static AttentionParams init(std::size_t c, std::size_t heads, Rng& rng) {
        const auto proj = [&](std::size_t in, std::size_t out) {
            Tensor<T> w = sample_normal<T>(rng, Shape{in, out}, static_cast<T>(1.0 / std::sqrt(double(in))));
            w.set_requires_grad(true);
            return w;
        };
        AttentionParams p{proj(c, 2 * c), proj(c, 2 * c), proj(c, 2 * c), proj(2 * c, c), heads};
        p.validate();
        return p;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named(const std::string& prefix) const {
        return {{prefix + ".w_q", w_q}, {prefix + ".w_k", w_k}, {prefix + ".w_v", w_v}, {prefix + ".w_out", w_out}};
    }
};

template <typename T>
struct ChannelAttentionResult {
    Tensor<T> output;                 // HW×C
    std::vector<Tensor<T>> attention; // per head, d×d, rows sum to 1
};

/// Cross-channel attention. Queries come from `query_src`, keys and values
/// from `kv_src` (both HW×C). Per head of width d = 2C/heads:
///   S = q_hᵀ k_h (d×d), A = softmax_rows(instance_norm_rows(S)),
///   out_h = (A v_hᵀ)ᵀ (HW×d);
/// the heads are concatenated and projected by w_out.
template <typename T>
ChannelAttentionResult<T> channel_attention_detailed(const Tensor<T>& query_src, const Tensor<T>& kv_src,
                                                     const AttentionParams<T>& p) {
    p.validate();
    if (query_src.rank() != 2 || query_src.shape() != kv_src.shape() || query_src.dim(1) != p.channels()) {
        throw ShapeError("channel_attention: expected matching HW×" + std::to_string(p.channels()) +
                         " inputs, got " + shape_str(query_src.shape()) + " and " + shape_str(kv_src.shape()));
    }
    if (query_src.dim(0) == 0) throw ShapeError("channel_attention: empty spatial extent");
    const Tensor<T> q = matmul(query_src, p.w_q);
    const Tensor<T> k = matmul(kv_src, p.w_k);
    const Tensor<T> v = matmul(kv_src, p.w_v);
    const std::size_t d = 2 * p.channels() / p.heads;
    ChannelAttentionResult<T> res;
    std::vector<Tensor<T>> heads;
    heads.reserve(p.heads);
    for (std::size_t h = 0; h < p.heads; ++h) {
        const Tensor<T> qh = slice(q, 1, h * d, d);
        const Tensor<T> kh = slice(k, 1, h * d, d);
        const Tensor<T> vh = slice(v, 1, h * d, d);
        const Tensor<T> sim = matmul(transpose(qh), kh);
        const Tensor<T> attn = softmax(instance_norm(sim, {1}), 1);
        heads.push_back(transpose(matmul(attn, transpose(vh))));
        res.attention.push_back(attn);
    }
    res.output = matmul(concat(heads, 1), p.w_out);
    return res;
}

template <typename T>
Tensor<T> channel_cross_attention(const Tensor<T>& query_src, const Tensor<T>& kv_src, const AttentionParams<T>& p) {
    return channel_attention_detailed(query_src, kv_src, p).output;
}

template <typename T>
Tensor<T> channel_self_attention(const Tensor<T>& src, const AttentionParams<T>& p) {
    return channel_cross_attention(src, src, p);
}

/// Flattened bottleneck features of the two branches for one instance.
template <typename T>
struct BottleneckPair {
    Tensor<T> f_bar;      // HW×C, original branch
    Tensor<T> f_bar_afb;  // HW×C, generated branch
};

/// Parameters of the whole regularizer: four attention blocks and, for
/// concat fusion, a 2C×C projection per branch.
template <typename T>
struct DcarParams {
    AttentionParams<T> cross_orig, cross_gen, self_orig, self_gen;
    Tensor<T> fuse_orig, fuse_gen;  // used only with Fusion::concat

    static DcarParams init(std::size_t c, const DcarConfig& cfg, Rng& rng) {
        DcarParams p;
        p.cross_orig = AttentionParams<T>::init(c, cfg.heads, rng);
        p.self_orig = AttentionParams<T>::init(c, cfg.heads, rng);
        if (cfg.share_weights) {
            p.cross_gen = p.cross_orig;
            p.self_gen = p.self_orig;
        } else {
            p.cross_gen = AttentionParams<T>::init(c, cfg.heads, rng);
            p.self_gen = AttentionParams<T>::init(c, cfg.heads, rng);
        }
        if (cfg.fusion == Fusion::concat) {
            const T stddev = static_cast<T>(1.0 / std::sqrt(2.0 * double(c)));
            p.fuse_orig = sample_normal<T>(rng, Shape{2 * c, c}, stddev);
            p.fuse_orig.set_requires_grad(true);
            if (cfg.share_weights) {
                p.fuse_gen = p.fuse_orig;
            } else {
                p.fuse_gen = sample_normal<T>(rng, Shape{2 * c, c}, stddev);
                p.fuse_gen.set_requires_grad(true);
            }
        }
        return p;
    }

    /// Distinct trainable tensors, each listed once.
    std::vector<std::pair<std::string, Tensor<T>>> named(const DcarConfig& cfg) const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        const auto add = [&](const std::vector<std::pair<std::string, Tensor<T>>>& v) {
            out.insert(out.end(), v.begin(), v.end());
        };
        add(cross_orig.named("dcar.cross_orig"));
        add(self_orig.named("dcar.self_orig"));
        if (!cfg.share_weights) {
            add(cross_gen.named("dcar.cross_gen"));
            add(self_gen.named("dcar.self_gen"));
        }
        if (cfg.fusion == Fusion::concat) {
            out.emplace_back("dcar.fuse_orig", fuse_orig);
            if (!cfg.share_weights) out.emplace_back("dcar.fuse_gen", fuse_gen);
        }
        return out;
    }
};

namespace detail {

template <typename T>
Tensor<T> fuse(const Tensor<T>& reconstructed, const Tensor<T>& refined, Fusion mode, const Tensor<T>& proj) {
    if (mode == Fusion::sum) return reconstructed + refined;
    return matmul(concat(std::vector<Tensor<T>>{reconstructed, refined}, 1), proj);
}

}  // namespace detail

/// Original branch: cross(f̄ → f̄_AFB) fused with self(f̄); the generated branch
/// runs the mirrored process with its own parameters.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> dcar_block(const BottleneckPair<T>& pair, const DcarParams<T>& p,
                                           Fusion fusion = Fusion::sum) {
    if (pair.f_bar.shape() != pair.f_bar_afb.shape()) {
        throw ShapeError("dcar_block: branch shapes differ: " + shape_str(pair.f_bar.shape()) + " vs " +
                         shape_str(pair.f_bar_afb.shape()));
    }
    Tensor<T> orig = detail::fuse(channel_cross_attention(pair.f_bar, pair.f_bar_afb, p.cross_orig),
                                  channel_self_attention(pair.f_bar, p.self_orig), fusion, p.fuse_orig);
    Tensor<T> gen = detail::fuse(channel_cross_attention(pair.f_bar_afb, pair.f_bar, p.cross_gen),
                                 channel_self_attention(pair.f_bar_afb, p.self_gen), fusion, p.fuse_gen);
    return {orig, gen};
}

/// Single-branch inference form: the cross path receives the same features.
template <typename T>
Tensor<T> dcar_single(const Tensor<T>& f_bar, const DcarParams<T>& p, Fusion fusion = Fusion::sum) {
    return detail::fuse(channel_cross_attention(f_bar, f_bar, p.cross_orig), channel_self_attention(f_bar, p.self_orig),
                        fusion, p.fuse_orig);
}

namespace detail {

/// B×C×H×W -> per-instance HW×C views (row-major over H then W).
template <typename T>
std::vector<Tensor<T>> to_tokens(const Tensor<T>& f) {
    const std::size_t b = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
    const Tensor<T> flat = reshape(permute(f, {0, 2, 3, 1}), Shape{b, hw, c});
    std::vector<Tensor<T>> out;
    for (std::size_t n = 0; n < b; ++n) out.push_back(reshape(slice(flat, 0, n, 1), Shape{hw, c}));
    return out;
}

template <typename T>
Tensor<T> from_tokens(const std::vector<Tensor<T>>& tokens, std::size_t h, std::size_t w) {
    const std::size_t c = tokens.at(0).dim(1);
    std::vector<Tensor<T>> parts;
    for (const auto& t : tokens) parts.push_back(reshape(t, Shape{1, h, w, c}));
    return permute(concat(parts, 0), {0, 3, 1, 2});
}

}  // namespace detail

/// dcar_block applied independently to every instance of two B×C×H×W maps.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> dcar_forward(const Tensor<T>& f_orig, const Tensor<T>& f_gen, const DcarParams<T>& p,
                                             Fusion fusion = Fusion::sum) {
    if (f_orig.rank() != 4 || f_orig.shape() != f_gen.shape()) {
        throw ShapeError("dcar_forward: expected matching B×C×H×W maps");
    }
    const auto to = detail::to_tokens(f_orig);
    const auto tg = detail::to_tokens(f_gen);
    std::vector<Tensor<T>> out_o, out_g;
    for (std::size_t n = 0; n < to.size(); ++n) {
        auto [o, g] = dcar_block(BottleneckPair<T>{to[n], tg[n]}, p, fusion);
        out_o.push_back(o);
        out_g.push_back(g);
    }
    return {detail::from_tokens(out_o, f_orig.dim(2), f_orig.dim(3)),
            detail::from_tokens(out_g, f_orig.dim(2), f_orig.dim(3))};
}

template <typename T>
Tensor<T> dcar_forward_single(const Tensor<T>& f, const DcarParams<T>& p, Fusion fusion = Fusion::sum) {
    if (f.rank() != 4) throw ShapeError("dcar_forward_single: expected B×C×H×W");
    std::vector<Tensor<T>> out;
    for (const auto& t : detail::to_tokens(f)) out.push_back(dcar_single(t, p, fusion));
    return detail::from_tokens(out, f.dim(2), f.dim(3));
}

}  // namespace dgseg

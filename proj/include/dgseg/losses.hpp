#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "dgseg/ops.hpp"

namespace dgseg {

/// Integer class labels laid out B×H×W.
struct MaskTensor {
    std::size_t batch = 0, height = 0, width = 0;
    std::vector<int> labels;

    std::size_t plane() const { return height * width; }
    std::span<const int> image(std::size_t b) const {
        return std::span<const int>(labels).subspan(b * plane(), plane());
    }
};

template <typename T>
Tensor<T> one_hot(const MaskTensor& m, std::size_t num_classes) {
    if (m.labels.size() != m.batch * m.plane()) throw ShapeError("one_hot: mask size mismatch");
    std::vector<T> v(m.batch * num_classes * m.plane(), T(0));
    for (std::size_t b = 0; b < m.batch; ++b) {
        for (std::size_t i = 0; i < m.plane(); ++i) {
            const int c = m.labels[b * m.plane() + i];
            if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
                throw std::invalid_argument("mask label " + std::to_string(c) + " outside [0, " +
                                            std::to_string(num_classes) + ")");
            }
            v[(b * num_classes + static_cast<std::size_t>(c)) * m.plane() + i] = T(1);
        }
    }
    return Tensor<T>(Shape{m.batch, num_classes, m.height, m.width}, std::move(v));
}

namespace detail {
template <typename T>
void check_logits_mask(const Tensor<T>& logits, const MaskTensor& m, std::string_view op) {
    if (logits.rank() != 4 || logits.dim(0) != m.batch || logits.dim(2) != m.height || logits.dim(3) != m.width) {
        throw ShapeError(std::string(op) + ": logits " + shape_str(logits.shape()) + " do not match mask " +
                         shape_str(Shape{m.batch, m.height, m.width}));
    }
}
}  // namespace detail

/// Soft Dice loss per instance: 1 - mean_k (2 Σ p g + s) / (Σ p + Σ g + s). Shape [B].
template <typename T>
Tensor<T> dice_loss_per_sample(const Tensor<T>& logits, const MaskTensor& target, T smooth = T(1e-5)) {
    detail::check_logits_mask(logits, target, "dice_loss");
    const Tensor<T> g = one_hot<T>(target, logits.dim(1));
    const Tensor<T> p = softmax(logits, 1);
    const Tensor<T> inter = sum_axes(p * g, {2, 3});
    const Tensor<T> denom = sum_axes(p, {2, 3}) + sum_axes(g, {2, 3}) + smooth;
    const Tensor<T> dice = (inter * T(2) + smooth) / denom;
    return T(1) - mean_axes(dice, {1});
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const MaskTensor& target, T smooth = T(1e-5)) {
    return mean(dice_loss_per_sample(logits, target, smooth));
}

/// Pixel-averaged cross-entropy per instance. Shape [B].
template <typename T>
Tensor<T> ce_loss_per_sample(const Tensor<T>& logits, const MaskTensor& target) {
    detail::check_logits_mask(logits, target, "ce_loss");
    const Tensor<T> g = one_hot<T>(target, logits.dim(1));
    const T inv = T(-1) / static_cast<T>(target.plane());
    return sum_axes(g * log_softmax(logits, 1), {1, 2, 3}) * inv;
}

template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const MaskTensor& target) {
    return mean(ce_loss_per_sample(logits, target));
}

/// Mean squared difference of the two branches' class probabilities. Shape [B].
template <typename T>
Tensor<T> consistency_loss_per_sample(const Tensor<T>& logits_orig, const Tensor<T>& logits_gen) {
    if (logits_orig.shape() != logits_gen.shape() || logits_orig.rank() != 4) {
        throw ShapeError("consistency_loss: shapes differ: " + shape_str(logits_orig.shape()) + " vs " +
                         shape_str(logits_gen.shape()));
    }
    return mean_axes(square(softmax(logits_orig, 1) - softmax(logits_gen, 1)), {1, 2, 3});
}

template <typename T>
Tensor<T> consistency_loss(const Tensor<T>& logits_orig, const Tensor<T>& logits_gen) {
    return mean(consistency_loss_per_sample(logits_orig, logits_gen));
}

template <typename T>
struct DomainLoss {
    Tensor<T> seg;
    Tensor<T> consist;
};

/// (1/D) Σ_d (seg_d + consist_d).
template <typename T>
Tensor<T> total_loss(const std::vector<DomainLoss<T>>& per_domain) {
    if (per_domain.empty()) throw std::invalid_argument("total_loss: no domains");
    Tensor<T> acc = per_domain[0].seg + per_domain[0].consist;
    for (std::size_t d = 1; d < per_domain.size(); ++d) acc = acc + per_domain[d].seg + per_domain[d].consist;
    return acc * (T(1) / static_cast<T>(per_domain.size()));
}

struct LossWeights {
    double dice = 1.0;
    double ce = 1.0;
    double consist = 1.0;
};

template <typename T>
struct LossBreakdown {
    Tensor<T> seg_orig;  // batch mean of dice + ce, original branch
    Tensor<T> seg_gen;
    Tensor<T> consist;
    Tensor<T> total;
};

/// Full objective for a batch whose instances carry domain ids. For each
/// domain present, seg is (dice + ce) averaged over both branches and over
/// that domain's instances; consist is averaged likewise.
template <typename T>
LossBreakdown<T> compute_losses(const Tensor<T>& logits_orig, const Tensor<T>& logits_gen, const MaskTensor& target,
                                const std::vector<int>& domain_ids, const LossWeights& w = {}) {
    if (domain_ids.size() != target.batch) throw ShapeError("compute_losses: one domain id per instance required");
    const bool single = logits_orig.same_storage(logits_gen);
    const auto seg_of = [&](const Tensor<T>& logits) {
        return dice_loss_per_sample(logits, target) * static_cast<T>(w.dice) +
               ce_loss_per_sample(logits, target) * static_cast<T>(w.ce);
    };
    const Tensor<T> seg_o = seg_of(logits_orig);
    const Tensor<T> seg_g = single ? seg_o : seg_of(logits_gen);
    const Tensor<T> cons = single ? Tensor<T>::zeros(Shape{target.batch})
                                  : consistency_loss_per_sample(logits_orig, logits_gen) * static_cast<T>(w.consist);
    const Tensor<T> seg_mean = single ? seg_o : (seg_o + seg_g) * T(0.5);

    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t b = 0; b < domain_ids.size(); ++b) groups[domain_ids[b]].push_back(b);
    std::vector<DomainLoss<T>> per_domain;
    for (const auto& [domain, members] : groups) {
        std::vector<T> weight(target.batch, T(0));
        for (auto b : members) weight[b] = T(1) / static_cast<T>(members.size());
        const Tensor<T> wt(Shape{target.batch}, std::move(weight));
        per_domain.push_back({sum(seg_mean * wt), sum(cons * wt)});
    }
    return {mean(seg_o), mean(seg_g), mean(cons), total_loss(per_domain)};
}

}  // namespace dgseg

#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace dgseg {

/// 2|P∩G| / (|P|+|G|) for one class of two label maps; 1 when both are empty.
inline double dice_coefficient(std::span<const int> pred, std::span<const int> gt, int class_id) {
    if (pred.size() != gt.size()) throw std::invalid_argument("dice_coefficient: mask sizes differ");
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred[i] == class_id, b = gt[i] == class_id;
        p += a;
        g += b;
        both += a && b;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// Binary mask (row-major h×w) of pixels whose label equals class_id.
inline std::vector<bool> class_mask(std::span<const int> labels, int class_id) {
    std::vector<bool> m(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) m[i] = labels[i] == class_id;
    return m;
}

/// Foreground pixels with at least one 4-neighbour outside the mask.
/// Pixels beyond the image border count as background.
inline std::vector<bool> mask_boundary(const std::vector<bool>& m, std::size_t h, std::size_t w) {
    std::vector<bool> b(m.size(), false);
    const auto on = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
        if (y < 0 || x < 0 || y >= std::ptrdiff_t(h) || x >= std::ptrdiff_t(w)) return false;
        return static_cast<bool>(m[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)]);
    };
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (!m[y * w + x]) continue;
            const auto yy = std::ptrdiff_t(y), xx = std::ptrdiff_t(x);
            b[y * w + x] = !on(yy - 1, xx) || !on(yy + 1, xx) || !on(yy, xx - 1) || !on(yy, xx + 1);
        }
    }
    return b;
}

namespace detail {

/// 1-D squared distance transform (Felzenszwalb & Huttenlocher lower envelope).
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
    const std::size_t n = f.size();
    std::vector<std::size_t> v(n);
    std::vector<double> z(n + 1);
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::size_t k = 0;
    std::size_t first = n;
    for (std::size_t q = 0; q < n; ++q) {
        if (std::isfinite(f[q])) {
            first = q;
            break;
        }
    }
    d.assign(n, inf);
    if (first == n) return;
    v[0] = first;
    z[0] = -inf;
    z[1] = inf;
    for (std::size_t q = first + 1; q < n; ++q) {
        if (!std::isfinite(f[q])) continue;
        const double fq = f[q] + double(q) * double(q);
        double s;
        while (true) {
            const double p = double(v[k]);
            s = (fq - (f[v[k]] + p * p)) / (2.0 * (double(q) - p));
            if (s <= z[k] && k > 0) {
                --k;
                continue;
            }
            break;
        }
        if (s <= z[k]) {
            // k == 0 and the new parabola dominates everywhere
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < double(q)) ++k;
        const double dq = double(q) - double(v[k]);
        d[q] = dq * dq + f[v[k]];
    }
}

}  // namespace detail

/// Exact Euclidean distance from every pixel to the nearest set pixel of `sites`.
/// Infinite everywhere when `sites` is empty.
inline std::vector<double> distance_to(const std::vector<bool>& sites, std::size_t h, std::size_t w) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> grid(h * w);
    for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = sites[i] ? 0.0 : inf;
    std::vector<double> f, d;
    f.resize(h);
    for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t y = 0; y < h; ++y) f[y] = grid[y * w + x];
        detail::edt_1d(f, d);
        for (std::size_t y = 0; y < h; ++y) grid[y * w + x] = d[y];
    }
    f.resize(w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) f[x] = grid[y * w + x];
        detail::edt_1d(f, d);
        for (std::size_t x = 0; x < w; ++x) grid[y * w + x] = std::sqrt(d[x]);
    }
    return grid;
}

/// Symmetric average surface distance in pixels between two binary masks:
/// the mean boundary-to-boundary distance P→G averaged with G→P.
/// std::nullopt when either mask is empty.
inline std::optional<double> average_surface_distance(const std::vector<bool>& pred, const std::vector<bool>& gt,
                                                      std::size_t h, std::size_t w) {
    if (pred.size() != h * w || gt.size() != h * w) {
        throw std::invalid_argument("average_surface_distance: mask sizes differ");
    }
    const auto bp = mask_boundary(pred, h, w);
    const auto bg = mask_boundary(gt, h, w);
    const auto directed = [&](const std::vector<bool>& from, const std::vector<bool>& to) -> std::optional<double> {
        const auto dist = distance_to(to, h, w);
        double s = 0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < from.size(); ++i) {
            if (!from[i]) continue;
            s += dist[i];
            ++n;
        }
        if (n == 0 || !std::isfinite(s)) return std::nullopt;
        return s / static_cast<double>(n);
    };
    const auto a = directed(bp, bg);
    const auto b = directed(bg, bp);
    if (!a || !b) return std::nullopt;
    return 0.5 * (*a + *b);
}

/// ASD of one class between two label maps.
inline std::optional<double> average_surface_distance(std::span<const int> pred, std::span<const int> gt,
                                                      int class_id, std::size_t h, std::size_t w) {
    return average_surface_distance(class_mask(pred, class_id), class_mask(gt, class_id), h, w);
}

}  // namespace dgseg

#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "dgseg/losses.hpp"
#include "dgseg/rng.hpp"

namespace dgseg {

/// Appearance transform of one synthetic acquisition site. Geometry is never
/// touched, only intensities.
struct DomainSpec {
    int domain_id = 0;
    double gamma = 1.0;
    double intensity_scale = 1.0;
    double intensity_offset = 0.0;
    double noise_std = 0.0;
    double texture_frequency = 0.0;  // cycles per image; 0 disables
    double texture_amplitude = 0.0;
    double texture_angle = 0.0;      // radians
    int blur_radius = 0;             // box-blur half width in pixels

    void validate() const {
        if (!(gamma > 0.0)) throw std::invalid_argument("DomainSpec: gamma must be > 0");
        if (noise_std < 0.0) throw std::invalid_argument("DomainSpec: noise_std must be >= 0");
        if (blur_radius < 0) throw std::invalid_argument("DomainSpec: blur_radius must be >= 0");
    }
};

inline nlohmann::json to_json(const DomainSpec& d) {
    return {{"domain_id", d.domain_id},
            {"gamma", d.gamma},
            {"intensity_scale", d.intensity_scale},
            {"intensity_offset", d.intensity_offset},
            {"noise_std", d.noise_std},
            {"texture_frequency", d.texture_frequency},
            {"texture_amplitude", d.texture_amplitude},
            {"texture_angle", d.texture_angle},
            {"blur_radius", d.blur_radius}};
}

inline DomainSpec domain_from_json(const nlohmann::json& j) {
    DomainSpec d;
    d.domain_id = j.at("domain_id").get<int>();
    d.gamma = j.at("gamma").get<double>();
    d.intensity_scale = j.at("intensity_scale").get<double>();
    d.intensity_offset = j.at("intensity_offset").get<double>();
    d.noise_std = j.at("noise_std").get<double>();
    d.texture_frequency = j.at("texture_frequency").get<double>();
    d.texture_amplitude = j.at("texture_amplitude").get<double>();
    d.texture_angle = j.at("texture_angle").get<double>();
    d.blur_radius = j.at("blur_radius").get<int>();
    d.validate();
    return d;
}

/// One image (1×H×W, values on the 16-bit grid in [0,1]) with its 3-class
/// mask: 0 background, 1 outer structure, 2 inner structure (inner ⊂ outer).
struct DomainSample {
    std::vector<double> image;
    std::vector<int> mask;
    int domain_id = 0;
    int sample_id = 0;
};

struct Corpus {
    std::size_t image_size = 0;
    std::size_t n_per_domain = 0;
    std::uint64_t seed = 0;
    std::vector<DomainSpec> domains;
    std::vector<DomainSample> samples;  // domain-major order

    std::vector<int> domain_ids() const {
        std::vector<int> ids;
        for (const auto& d : domains) ids.push_back(d.domain_id);
        return ids;
    }
};

inline constexpr std::size_t kNumClasses = 3;

namespace detail {

constexpr double kPi = 3.14159265358979323846;

/// Sample geometry: two nested perturbed ellipses.
struct Geometry {
    double cx, cy, rx, ry, angle;
    double icx, icy, irx, iry, iangle;
    std::array<double, 3> amp, phase, iamp, iphase;
    std::vector<std::array<double, 4>> vessels;  // x0, y0, x1, y1 (normalized)
};

inline Geometry sample_geometry(std::uint64_t seed, int sample_id) {
    Rng r = Rng::substream(seed, {static_cast<std::uint64_t>(sample_id)}, "geometry");
    Geometry g{};
    g.cx = 0.5 + (r.uniform() - 0.5) * 0.2;
    g.cy = 0.5 + (r.uniform() - 0.5) * 0.2;
    g.rx = 0.20 + 0.10 * r.uniform();
    g.ry = g.rx * (0.8 + 0.4 * r.uniform());
    g.angle = r.uniform() * kPi;
    const double ratio = 0.35 + 0.25 * r.uniform();
    g.irx = g.rx * ratio;
    g.iry = g.ry * ratio * (0.85 + 0.3 * r.uniform());
    g.iangle = r.uniform() * kPi;
    const double slack = std::min(g.rx, g.ry) * (1.0 - ratio) * 0.3;
    g.icx = g.cx + (r.uniform() - 0.5) * slack;
    g.icy = g.cy + (r.uniform() - 0.5) * slack;
    for (int k = 0; k < 3; ++k) {
        g.amp[k] = 0.05 * r.uniform();
        g.phase[k] = 2 * kPi * r.uniform();
        g.iamp[k] = 0.05 * r.uniform();
        g.iphase[k] = 2 * kPi * r.uniform();
    }
    const int n_vessels = 3 + static_cast<int>(r.below(3));
    for (int v = 0; v < n_vessels; ++v) {
        const double a = 2 * kPi * r.uniform();
        const double len = 0.35 + 0.3 * r.uniform();
        g.vessels.push_back({g.cx, g.cy, g.cx + len * std::cos(a), g.cy + len * std::sin(a)});
    }
    return g;
}

/// Normalized radial coordinate (< 1 inside) of a perturbed ellipse.
inline double radial(double x, double y, double cx, double cy, double rx, double ry, double angle,
                     const std::array<double, 3>& amp, const std::array<double, 3>& phase) {
    const double dx = x - cx, dy = y - cy;
    const double u = dx * std::cos(angle) + dy * std::sin(angle);
    const double v = -dx * std::sin(angle) + dy * std::cos(angle);
    const double rho = std::sqrt((u / rx) * (u / rx) + (v / ry) * (v / ry));
    const double phi = std::atan2(v, u);
    double scale = 1.0;
    for (int k = 0; k < 3; ++k) scale += amp[k] * std::cos((k + 2) * phi + phase[k]);
    return rho / scale;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double segment_distance(double px, double py, const std::array<double, 4>& s) {
    const double vx = s[2] - s[0], vy = s[3] - s[1];
    const double t = std::clamp(((px - s[0]) * vx + (py - s[1]) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
    const double ex = s[0] + t * vx - px, ey = s[1] + t * vy - py;
    return std::sqrt(ex * ex + ey * ey);
}

/// Domain-independent clean rendering and its mask.
inline void render_anatomy(const Geometry& g, std::size_t n, std::vector<double>& clean, std::vector<int>& mask) {
    clean.assign(n * n, 0.0);
    mask.assign(n * n, 0);
    const double sharp = 1.5 * static_cast<double>(n);
    for (std::size_t yi = 0; yi < n; ++yi) {
        for (std::size_t xi = 0; xi < n; ++xi) {
            const double x = (static_cast<double>(xi) + 0.5) / static_cast<double>(n);
            const double y = (static_cast<double>(yi) + 0.5) / static_cast<double>(n);
            const double ro = radial(x, y, g.cx, g.cy, g.rx, g.ry, g.angle, g.amp, g.phase);
            const double ri = radial(x, y, g.icx, g.icy, g.irx, g.iry, g.iangle, g.iamp, g.iphase);
            double v = 0.25 + 0.35 * sigmoid((1.0 - ro) * sharp * g.rx) + 0.3 * sigmoid((1.0 - ri) * sharp * g.irx);
            double vessel = 0.0;
            for (const auto& s : g.vessels) {
                const double d = segment_distance(x, y, s) * static_cast<double>(n);
                vessel = std::max(vessel, std::exp(-d * d / 1.5));
            }
            v *= 1.0 - 0.15 * vessel;
            clean[yi * n + xi] = v;
            const bool outer = ro < 1.0;
            const bool inner = ri < 1.0 && outer;
            mask[yi * n + xi] = inner ? 2 : (outer ? 1 : 0);
        }
    }
}

inline std::vector<double> box_blur(const std::vector<double>& img, std::size_t n, int radius) {
    if (radius <= 0) return img;
    std::vector<double> tmp(img.size()), out(img.size());
    const auto at = [n](std::ptrdiff_t i) { return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, std::ptrdiff_t(n) - 1)); };
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
            double s = 0;
            for (int k = -radius; k <= radius; ++k) s += img[y * n + at(std::ptrdiff_t(x) + k)];
            tmp[y * n + x] = s / (2 * radius + 1);
        }
    }
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
            double s = 0;
            for (int k = -radius; k <= radius; ++k) s += tmp[at(std::ptrdiff_t(y) + k) * n + x];
            out[y * n + x] = s / (2 * radius + 1);
        }
    }
    return out;
}

inline double quantize16(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 65535.0) / 65535.0; }

}  // namespace detail

/// Applies a domain's appearance to a clean rendering. Noise is keyed by
/// (seed, domain, sample) so each image is reproducible on its own.
inline std::vector<double> apply_domain_style(const std::vector<double>& clean, std::size_t n, const DomainSpec& d,
                                              std::uint64_t seed, int sample_id) {
    d.validate();
    std::vector<double> img(clean.size());
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
            double v = std::pow(clean[y * n + x], d.gamma);
            if (d.texture_frequency > 0.0) {
                const double u = (static_cast<double>(x) * std::cos(d.texture_angle) +
                                  static_cast<double>(y) * std::sin(d.texture_angle)) /
                                 static_cast<double>(n);
                v *= 1.0 + d.texture_amplitude * std::sin(2 * detail::kPi * d.texture_frequency * u);
            }
            img[y * n + x] = v;
        }
    }
    img = detail::box_blur(img, n, d.blur_radius);
    Rng noise = Rng::substream(seed, {static_cast<std::uint64_t>(d.domain_id), static_cast<std::uint64_t>(sample_id)},
                               "noise");
    for (auto& v : img) {
        v = d.intensity_offset + d.intensity_scale * v + d.noise_std * noise.normal();
        v = detail::quantize16(v);
    }
    return img;
}

/// Built-in appearance table for the first four sites; further sites draw
/// their parameters from the seed.
inline std::vector<DomainSpec> default_domains(std::size_t n_domains, std::uint64_t seed) {
    std::vector<DomainSpec> out = {
        {0, 0.6, 0.85, 0.10, 0.02, 0.0, 0.0, 0.0, 0},
        {1, 1.6, 0.75, 0.20, 0.05, 5.0, 0.20, 0.6, 1},
        {2, 1.0, 1.00, 0.00, 0.08, 3.0, 0.15, 2.0, 0},
        {3, 2.6, 0.65, 0.05, 0.03, 8.0, 0.25, 1.2, 1},
    };
    out.resize(std::min(n_domains, out.size()));
    Rng r = Rng::substream(seed, {}, "domains");
    for (std::size_t d = out.size(); d < n_domains; ++d) {
        DomainSpec s;
        s.domain_id = static_cast<int>(d);
        s.gamma = 0.5 + 2.5 * r.uniform();
        s.intensity_scale = 0.5 + 0.5 * r.uniform();
        s.intensity_offset = 0.3 * r.uniform();
        s.noise_std = 0.1 * r.uniform();
        s.texture_frequency = std::floor(10.0 * r.uniform());
        s.texture_amplitude = 0.25 * r.uniform();
        s.texture_angle = detail::kPi * r.uniform();
        s.blur_radius = static_cast<int>(r.below(3));
        out.push_back(s);
    }
    return out;
}

inline Corpus generate_corpus(std::size_t n_domains, std::size_t n_per_domain, std::uint64_t seed,
                              std::size_t image_size = 64) {
    if (n_domains < 2) throw std::invalid_argument("generate_corpus: at least two domains required");
    if (n_per_domain == 0) throw std::invalid_argument("generate_corpus: n_per_domain must be positive");
    if (image_size < 8) throw std::invalid_argument("generate_corpus: image_size must be at least 8");
    Corpus c;
    c.image_size = image_size;
    c.n_per_domain = n_per_domain;
    c.seed = seed;
    c.domains = default_domains(n_domains, seed);
    std::vector<std::vector<double>> clean(n_per_domain);
    std::vector<std::vector<int>> masks(n_per_domain);
    for (std::size_t i = 0; i < n_per_domain; ++i) {
        detail::render_anatomy(detail::sample_geometry(seed, static_cast<int>(i)), image_size, clean[i], masks[i]);
    }
    for (const auto& d : c.domains) {
        for (std::size_t i = 0; i < n_per_domain; ++i) {
            c.samples.push_back({apply_domain_style(clean[i], image_size, d, seed, static_cast<int>(i)), masks[i],
                                 d.domain_id, static_cast<int>(i)});
        }
    }
    return c;
}

struct Split {
    std::vector<const DomainSample*> train;
    std::vector<const DomainSample*> test;
};

inline Split leave_one_out_split(const Corpus& c, int target_domain) {
    const auto ids = c.domain_ids();
    if (std::find(ids.begin(), ids.end(), target_domain) == ids.end()) {
        throw std::invalid_argument("leave_one_out_split: unknown domain " + std::to_string(target_domain));
    }
    Split s;
    for (const auto& smp : c.samples) (smp.domain_id == target_domain ? s.test : s.train).push_back(&smp);
    return s;
}

template <typename T>
Tensor<T> images_to_batch(const std::vector<const DomainSample*>& samples, std::size_t image_size) {
    const std::size_t plane = image_size * image_size;
    std::vector<T> v(samples.size() * plane);
    for (std::size_t b = 0; b < samples.size(); ++b) {
        if (samples[b]->image.size() != plane) throw ShapeError("images_to_batch: image size mismatch");
        std::transform(samples[b]->image.begin(), samples[b]->image.end(), v.begin() + b * plane,
                       [](double x) { return static_cast<T>(x); });
    }
    return Tensor<T>(Shape{samples.size(), 1, image_size, image_size}, std::move(v));
}

inline MaskTensor masks_to_batch(const std::vector<const DomainSample*>& samples, std::size_t image_size) {
    MaskTensor m{samples.size(), image_size, image_size, {}};
    for (const auto* s : samples) m.labels.insert(m.labels.end(), s->mask.begin(), s->mask.end());
    return m;
}

// ---------------------------------------------------------------------------
// On-disk layout: manifest.json, images/d{D}_s{S}.pgm (16-bit), masks/d{D}_s{S}.pgm (8-bit labels)
// ---------------------------------------------------------------------------

namespace detail {

inline void write_pgm(const std::filesystem::path& p, std::size_t n, const std::vector<int>& values, int maxval) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << "P5\n" << n << ' ' << n << '\n' << maxval << '\n';
    for (int v : values) {
        if (maxval > 255) {
            os.put(static_cast<char>((v >> 8) & 0xff));
            os.put(static_cast<char>(v & 0xff));
        } else {
            os.put(static_cast<char>(v & 0xff));
        }
    }
}

inline std::vector<int> read_pgm(const std::filesystem::path& p, std::size_t expected_n, int& maxval) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + p.string());
    std::string magic;
    std::size_t w = 0, h = 0;
    is >> magic >> w >> h >> maxval;
    is.get();
    if (magic != "P5" || w != expected_n || h != expected_n || maxval <= 0 || maxval > 65535) {
        throw std::runtime_error("malformed PGM " + p.string());
    }
    std::vector<int> out(w * h);
    for (auto& v : out) {
        if (maxval > 255) {
            const int hi = is.get(), lo = is.get();
            v = (hi << 8) | lo;
        } else {
            v = is.get();
        }
    }
    if (!is) throw std::runtime_error("truncated PGM " + p.string());
    return out;
}

inline std::string sample_stem(int domain, int sample) {
    return "d" + std::to_string(domain) + "_s" + std::to_string(sample);
}

}  // namespace detail

inline void write_corpus(const Corpus& c, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    nlohmann::json manifest;
    manifest["format"] = "dgseg-corpus-1";
    manifest["image_size"] = c.image_size;
    manifest["n_per_domain"] = c.n_per_domain;
    manifest["seed"] = c.seed;
    manifest["num_classes"] = kNumClasses;
    for (const auto& d : c.domains) manifest["domains"].push_back(to_json(d));
    for (const auto& s : c.samples) {
        const std::string stem = detail::sample_stem(s.domain_id, s.sample_id);
        std::vector<int> px(s.image.size());
        std::transform(s.image.begin(), s.image.end(), px.begin(),
                       [](double v) { return static_cast<int>(std::lround(v * 65535.0)); });
        detail::write_pgm(dir / "images" / (stem + ".pgm"), c.image_size, px, 65535);
        detail::write_pgm(dir / "masks" / (stem + ".pgm"), c.image_size, s.mask, 255);
        manifest["samples"].push_back({{"domain_id", s.domain_id},
                                       {"sample_id", s.sample_id},
                                       {"image", "images/" + stem + ".pgm"},
                                       {"mask", "masks/" + stem + ".pgm"}});
    }
    std::ofstream os(dir / "manifest.json");
    os << manifest.dump(2) << '\n';
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw std::runtime_error("no corpus manifest in " + dir.string());
    const nlohmann::json m = nlohmann::json::parse(is);
    Corpus c;
    c.image_size = m.at("image_size").get<std::size_t>();
    c.n_per_domain = m.at("n_per_domain").get<std::size_t>();
    c.seed = m.at("seed").get<std::uint64_t>();
    for (const auto& d : m.at("domains")) c.domains.push_back(domain_from_json(d));
    for (const auto& s : m.at("samples")) {
        DomainSample smp;
        smp.domain_id = s.at("domain_id").get<int>();
        smp.sample_id = s.at("sample_id").get<int>();
        int maxval = 0;
        const auto px = detail::read_pgm(dir / s.at("image").get<std::string>(), c.image_size, maxval);
        smp.image.resize(px.size());
        std::transform(px.begin(), px.end(), smp.image.begin(),
                       [maxval](int v) { return static_cast<double>(v) / static_cast<double>(maxval); });
        smp.mask = detail::read_pgm(dir / s.at("mask").get<std::string>(), c.image_size, maxval);
        for (int v : smp.mask) {
            if (v < 0 || v >= static_cast<int>(kNumClasses)) throw std::runtime_error("mask label out of range");
        }
        c.samples.push_back(std::move(smp));
    }
    return c;
}

}  // namespace dgseg

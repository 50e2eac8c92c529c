#pragma once

#include <map>
#include <string>
#include <vector>

#include "dgseg/afb.hpp"
#include "dgseg/dcar.hpp"
#include "dgseg/ops.hpp"
#include "dgseg/rng.hpp"

namespace dgseg {

struct NetworkConfig {
    std::size_t in_channels = 1;
    std::size_t num_classes = 3;
    std::vector<std::size_t> stage_widths{8, 16, 32};
    std::size_t image_size = 64;

    void validate() const {
        if (stage_widths.size() < 2) throw std::invalid_argument("network: at least two stages required");
        if (stage_widths.back() % 2 != 0) throw std::invalid_argument("network: bottleneck width must be even");
        if (in_channels == 0 || num_classes < 2) throw std::invalid_argument("network: invalid channel counts");
        const std::size_t down = std::size_t{1} << (stage_widths.size() - 1);
        if (image_size < 2 * down || image_size % down != 0) {
            throw std::invalid_argument("network: image_size must be divisible by " + std::to_string(down));
        }
    }
};

template <typename T>
struct ForwardOutput {
    Tensor<T> logits_orig;        // B×K×H×W
    Tensor<T> logits_gen;         // B×K×H×W
    Tensor<T> bottleneck_orig;    // B×C×h×w, after the encoder
    Tensor<T> bottleneck_gen;
    bool perturbed = false;       // AFB fired at least once
};

/// U-shaped encoder-decoder. Encoder stage s: two (3×3 conv, instance norm,
/// ReLU) with the first conv strided by 2 for s > 0. Decoder: nearest 2×
/// upsampling, concatenation with the matching encoder output, two
/// (conv, norm, ReLU), then a 1×1 classifier with bias. AFB may follow any
/// encoder stage; DCAR couples the two bottlenecks.
template <typename T>
class SegNet {
public:
    using NamedTensor = std::pair<std::string, Tensor<T>>;

    SegNet(NetworkConfig net, DcarConfig dcar, std::uint64_t seed) : net_(std::move(net)), dcar_cfg_(dcar) {
        net_.validate();
        Rng rng = Rng::substream(seed, {}, "init");
        const auto& w = net_.stage_widths;
        const std::size_t n = w.size();
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t in = s == 0 ? net_.in_channels : w[s - 1];
            add_conv(rng, enc_name(s, 1), w[s], in, 3);
            add_conv(rng, enc_name(s, 2), w[s], w[s], 3);
        }
        for (std::size_t s = n - 1; s-- > 0;) {
            add_conv(rng, dec_name(s, 1), w[s], w[s + 1] + w[s], 3);
            add_conv(rng, dec_name(s, 2), w[s], w[s], 3);
        }
        add_conv(rng, "head.w", net_.num_classes, w[0], 1);
        add_param("head.b", Tensor<T>::zeros(Shape{1, net_.num_classes, 1, 1}));
        if (dcar_cfg_.enabled) {
            if ((2 * w.back()) % dcar_cfg_.heads != 0) {
                throw std::invalid_argument("network: dcar.heads must divide twice the bottleneck width");
            }
            dcar_ = DcarParams<T>::init(w.back(), dcar_cfg_, rng);
            for (auto& [name, t] : dcar_.named(dcar_cfg_)) {
                order_.push_back(name);
                params_[name] = t;
            }
        }
    }

    const NetworkConfig& config() const { return net_; }
    const DcarConfig& dcar_config() const { return dcar_cfg_; }

    std::vector<NamedTensor> named_parameters() const {
        std::vector<NamedTensor> out;
        for (const auto& name : order_) out.emplace_back(name, params_.at(name));
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t total = 0;
        for (const auto& name : order_) total += params_.at(name).numel();
        return total;
    }

    Tensor<T> parameter(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
        return it->second;
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    /// Two-branch training pass. `afb_rng` drives both the per-stage firing
    /// coin and the AFB samples.
    ForwardOutput<T> forward_train(const Tensor<T>& x, Rng& afb_rng, const AfbConfig& afb, bool enable_afb) const {
        check_input(x);
        const std::size_t n = net_.stage_widths.size();
        std::vector<Tensor<T>> skip_o, skip_g;
        Tensor<T> cur_o = x, cur_g = x;
        bool perturbed = false;
        for (std::size_t s = 0; s < n; ++s) {
            cur_o = encoder_stage(s, cur_o);
            cur_g = perturbed ? encoder_stage(s, cur_g) : cur_o;
            if (enable_afb && fires_after(afb, s) && afb_rng.uniform() < afb.apply_probability) {
                cur_g = guarded("afb" + std::to_string(s + 1), [&] { return apply_afb(cur_g, afb_rng, afb); });
                perturbed = true;
            }
            skip_o.push_back(cur_o);
            skip_g.push_back(cur_g);
        }
        ForwardOutput<T> out;
        out.perturbed = perturbed;
        out.bottleneck_orig = cur_o;
        out.bottleneck_gen = cur_g;
        Tensor<T> z_o = cur_o, z_g = cur_g;
        if (dcar_cfg_.enabled) {
            std::tie(z_o, z_g) = guarded("dcar", [&] { return dcar_forward(cur_o, cur_g, dcar_, dcar_cfg_.fusion); });
        }
        out.logits_orig = decode(z_o, skip_o);
        out.logits_gen = (perturbed || dcar_cfg_.enabled) ? decode(z_g, skip_g) : out.logits_orig;
        return out;
    }

    /// Single-branch inference; AFB never applies.
    Tensor<T> forward_eval(const Tensor<T>& x) const {
        check_input(x);
        std::vector<Tensor<T>> skips;
        Tensor<T> cur = x;
        for (std::size_t s = 0; s < net_.stage_widths.size(); ++s) {
            cur = encoder_stage(s, cur);
            skips.push_back(cur);
        }
        if (dcar_cfg_.enabled) {
            cur = guarded("dcar", [&] { return dcar_forward_single(cur, dcar_, dcar_cfg_.fusion); });
        }
        return decode(cur, skips);
    }

    /// Output of encoder stage `stage` (0-based) for input x.
    Tensor<T> encode_through(const Tensor<T>& x, std::size_t stage) const {
        check_input(x);
        Tensor<T> cur = x;
        for (std::size_t s = 0; s <= stage; ++s) cur = encoder_stage(s, cur);
        return cur;
    }

    /// Copies values into an existing parameter (checkpoint loading).
    void load_parameter(const std::string& name, const Tensor<T>& value) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
        if (it->second.shape() != value.shape()) {
            throw ShapeError("parameter " + name + ": expected " + shape_str(it->second.shape()) + ", got " +
                             shape_str(value.shape()));
        }
        auto dst = it->second.mutable_data();
        std::copy(value.data().begin(), value.data().end(), dst.begin());
    }

private:
    static std::string enc_name(std::size_t s, int k) {
        return "enc" + std::to_string(s + 1) + ".conv" + std::to_string(k) + ".w";
    }
    static std::string dec_name(std::size_t s, int k) {
        return "dec" + std::to_string(s + 1) + ".conv" + std::to_string(k) + ".w";
    }

    void add_param(const std::string& name, Tensor<T> t) {
        t.set_requires_grad(true);
        order_.push_back(name);
        params_[name] = t;
    }

    void add_conv(Rng& rng, const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
        const double fan_in = static_cast<double>(in * k * k);
        add_param(name, sample_normal<T>(rng, Shape{out, in, k, k}, static_cast<T>(std::sqrt(2.0 / fan_in))));
    }

    void check_input(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.dim(1) != net_.in_channels) {
            throw ShapeError("segnet: expected B×" + std::to_string(net_.in_channels) + "×H×W input, got " +
                             shape_str(x.shape()));
        }
        const std::size_t down = std::size_t{1} << (net_.stage_widths.size() - 1);
        if (x.dim(2) % down != 0 || x.dim(3) % down != 0) {
            throw ShapeError("segnet: spatial size must be divisible by " + std::to_string(down));
        }
    }

    static bool fires_after(const AfbConfig& afb, std::size_t stage) {
        return std::find(afb.insertion_points.begin(), afb.insertion_points.end(), static_cast<int>(stage + 1)) !=
               afb.insertion_points.end();
    }

    template <typename Fn>
    static auto guarded(const std::string& layer, Fn&& fn) {
        try {
            return fn();
        } catch (const NumericError& e) {
            throw NumericError("layer " + layer + ": " + e.what());
        }
    }

    Tensor<T> conv_block(const std::string& name, const Tensor<T>& x, std::size_t stride) const {
        return guarded(name, [&] { return relu(instance_norm(conv2d(x, params_.at(name), stride, 1), {2, 3})); });
    }

    Tensor<T> encoder_stage(std::size_t s, const Tensor<T>& x) const {
        const Tensor<T> h = conv_block(enc_name(s, 1), x, s == 0 ? 1 : 2);
        return conv_block(enc_name(s, 2), h, 1);
    }

    Tensor<T> decode(const Tensor<T>& bottleneck, const std::vector<Tensor<T>>& skips) const {
        Tensor<T> cur = bottleneck;
        for (std::size_t s = net_.stage_widths.size() - 1; s-- > 0;) {
            cur = guarded("dec" + std::to_string(s + 1) + ".up",
                          [&] { return concat(std::vector<Tensor<T>>{upsample2x(cur), skips[s]}, 1); });
            cur = conv_block(dec_name(s, 1), cur, 1);
            cur = conv_block(dec_name(s, 2), cur, 1);
        }
        return guarded("head", [&] { return conv2d(cur, params_.at("head.w"), 1, 0) + params_.at("head.b"); });
    }

    NetworkConfig net_;
    DcarConfig dcar_cfg_;
    DcarParams<T> dcar_;
    std::vector<std::string> order_;
    std::map<std::string, Tensor<T>> params_;
};

}  // namespace dgseg

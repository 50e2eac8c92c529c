#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dgseg/afb.hpp"
#include "dgseg/dcar.hpp"
#include "dgseg/losses.hpp"
#include "dgseg/segnet.hpp"

namespace dgseg {

/// Flat `dotted.key = value` settings. Lines starting with '#' are comments.
class ConfigMap {
public:
    static ConfigMap parse(std::istream& is) {
        ConfigMap c;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            if (trim(line).empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
            }
            c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return c;
    }

    static ConfigMap load(const std::filesystem::path& p) {
        std::ifstream is(p);
        if (!is) throw std::runtime_error("cannot read config " + p.string());
        return parse(is);
    }

    void set(const std::string& key, const std::string& value) {
        if (key.empty()) throw std::invalid_argument("config: empty key");
        values_[key] = value;
    }

    /// Applies a `key=value` override.
    void set_assignment(const std::string& kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("override '" + kv + "' is not key=value");
        set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::map<std::string, std::string>& values() const { return values_; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }
    double get(const std::string& key, double fallback) const {
        return has(key) ? parse_number<double>(key) : fallback;
    }
    std::int64_t get(const std::string& key, std::int64_t fallback) const {
        return has(key) ? parse_number<std::int64_t>(key) : fallback;
    }
    bool get(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const std::string v = values_.at(key);
        if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "off" || v == "no") return false;
        throw std::invalid_argument("config " + key + ": expected boolean, got '" + v + "'");
    }
    std::vector<std::int64_t> get_list(const std::string& key, std::vector<std::int64_t> fallback) const {
        if (!has(key)) return fallback;
        std::vector<std::int64_t> out;
        std::stringstream ss(values_.at(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (trim(item).empty()) continue;
            out.push_back(std::stoll(trim(item)));
        }
        return out;
    }

    /// Rejects keys that no consumer knows about (typos in overrides).
    void require_known(const std::vector<std::string>& known) const {
        for (const auto& [k, v] : values_) {
            if (std::find(known.begin(), known.end(), k) == known.end()) {
                throw std::invalid_argument("unknown config key '" + k + "'");
            }
        }
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

private:
    template <typename N>
    N parse_number(const std::string& key) const {
        const std::string& v = values_.at(key);
        std::size_t pos = 0;
        N out{};
        try {
            if constexpr (std::is_floating_point_v<N>) {
                out = std::stod(v, &pos);
            } else {
                out = static_cast<N>(std::stoll(v, &pos));
            }
        } catch (const std::exception&) {
            pos = std::string::npos;
        }
        if (pos != v.size()) throw std::invalid_argument("config " + key + ": not a number: '" + v + "'");
        return out;
    }

    std::map<std::string, std::string> values_;
};

enum class Precision { f32, f64 };

struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    double lr0 = 0.01;
    double momentum = 0.99;
    double poly_power = 0.9;
    double val_fraction = 0.1;
    bool enable_afb = true;
    bool enable_dcar = true;
    int target_domain = 0;
    Precision precision = Precision::f32;
    std::string corpus_path;
    std::string out_dir;
    std::string run_id = "run";
    AfbConfig afb;
    DcarConfig dcar;
    LossWeights loss;
    std::vector<std::size_t> stage_widths{8, 16, 32};

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
        if (!(lr0 > 0.0)) throw std::invalid_argument("train.lr0 must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train.momentum must be in [0,1)");
        if (!(poly_power >= 0.0)) throw std::invalid_argument("train.poly_power must be >= 0");
        if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
            throw std::invalid_argument("train.val_fraction must be in [0,1)");
        }
        afb.validate();
    }

    static const std::vector<std::string>& known_keys() {
        static const std::vector<std::string> keys = {
            "seed",           "run_id",          "train.epochs",        "train.batch_size",  "train.lr0",
            "train.momentum", "train.poly_power", "train.val_fraction", "train.target_domain", "train.precision",
            "afb.enabled",    "afb.alpha",       "afb.apply_probability", "afb.sigma_floor", "afb.insertion_points",
            "dcar.enabled",   "dcar.heads",      "dcar.fusion",         "dcar.share_weights", "net.stage_widths",
            "loss.dice_weight", "loss.ce_weight", "loss.consist_weight", "corpus.path",      "out.dir"};
        return keys;
    }

    static RunConfig from(const ConfigMap& m) {
        m.require_known(known_keys());
        RunConfig c;
        c.seed = static_cast<std::uint64_t>(m.get("seed", std::int64_t{0}));
        c.run_id = m.get("run_id", c.run_id);
        c.epochs = static_cast<std::size_t>(m.get("train.epochs", std::int64_t(c.epochs)));
        c.batch_size = static_cast<std::size_t>(m.get("train.batch_size", std::int64_t(c.batch_size)));
        c.lr0 = m.get("train.lr0", c.lr0);
        c.momentum = m.get("train.momentum", c.momentum);
        c.poly_power = m.get("train.poly_power", c.poly_power);
        c.val_fraction = m.get("train.val_fraction", c.val_fraction);
        c.target_domain = static_cast<int>(m.get("train.target_domain", std::int64_t(c.target_domain)));
        const std::string prec = m.get("train.precision", std::string("f32"));
        if (prec == "f32" || prec == "float") {
            c.precision = Precision::f32;
        } else if (prec == "f64" || prec == "double") {
            c.precision = Precision::f64;
        } else {
            throw std::invalid_argument("train.precision must be f32 or f64");
        }
        c.enable_afb = m.get("afb.enabled", c.enable_afb);
        c.afb.alpha = m.get("afb.alpha", c.afb.alpha);
        c.afb.apply_probability = m.get("afb.apply_probability", c.afb.apply_probability);
        c.afb.sigma_floor = m.get("afb.sigma_floor", c.afb.sigma_floor);
        {
            std::vector<std::int64_t> def(c.afb.insertion_points.begin(), c.afb.insertion_points.end());
            const auto pts = m.get_list("afb.insertion_points", def);
            c.afb.insertion_points.assign(pts.begin(), pts.end());
        }
        c.enable_dcar = m.get("dcar.enabled", c.enable_dcar);
        c.dcar.heads = static_cast<std::size_t>(m.get("dcar.heads", std::int64_t(c.dcar.heads)));
        const std::string fusion = m.get("dcar.fusion", std::string("sum"));
        if (fusion == "sum") {
            c.dcar.fusion = Fusion::sum;
        } else if (fusion == "concat") {
            c.dcar.fusion = Fusion::concat;
        } else {
            throw std::invalid_argument("dcar.fusion must be sum or concat");
        }
        c.dcar.share_weights = m.get("dcar.share_weights", c.dcar.share_weights);
        {
            std::vector<std::int64_t> def(c.stage_widths.begin(), c.stage_widths.end());
            const auto w = m.get_list("net.stage_widths", def);
            c.stage_widths.assign(w.begin(), w.end());
        }
        c.loss.dice = m.get("loss.dice_weight", c.loss.dice);
        c.loss.ce = m.get("loss.ce_weight", c.loss.ce);
        c.loss.consist = m.get("loss.consist_weight", c.loss.consist);
        c.corpus_path = m.get("corpus.path", c.corpus_path);
        c.out_dir = m.get("out.dir", c.out_dir);
        c.dcar.enabled = c.enable_dcar;
        c.validate();
        return c;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["run_id"] = run_id;
        j["train.epochs"] = epochs;
        j["train.batch_size"] = batch_size;
        j["train.lr0"] = lr0;
        j["train.momentum"] = momentum;
        j["train.poly_power"] = poly_power;
        j["train.val_fraction"] = val_fraction;
        j["train.target_domain"] = target_domain;
        j["train.precision"] = precision == Precision::f32 ? "f32" : "f64";
        j["afb.enabled"] = enable_afb;
        j["afb.alpha"] = afb.alpha;
        j["afb.apply_probability"] = afb.apply_probability;
        j["afb.sigma_floor"] = afb.sigma_floor;
        j["afb.insertion_points"] = afb.insertion_points;
        j["dcar.enabled"] = enable_dcar;
        j["dcar.heads"] = dcar.heads;
        j["dcar.fusion"] = dcar.fusion == Fusion::sum ? "sum" : "concat";
        j["dcar.share_weights"] = dcar.share_weights;
        j["net.stage_widths"] = stage_widths;
        j["loss.dice_weight"] = loss.dice;
        j["loss.ce_weight"] = loss.ce;
        j["loss.consist_weight"] = loss.consist;
        j["corpus.path"] = corpus_path;
        j["out.dir"] = out_dir;
        return j;
    }
};

}  // namespace dgseg

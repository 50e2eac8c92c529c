#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dgseg/afb.hpp"
#include "dgseg/config.hpp"
#include "dgseg/losses.hpp"
#include "dgseg/metrics.hpp"
#include "dgseg/segnet.hpp"
#include "dgseg/snapshot.hpp"
#include "dgseg/synthdg.hpp"

namespace dgseg {

/// lr0 * (1 - step/total)^power; exactly lr0 at step 0 and 0 at step == total.
inline double poly_lr(double lr0, std::size_t step, std::size_t total, double power) {
    if (total == 0 || step >= total) return 0.0;
    return lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

/// SGD with heavy-ball momentum: v = m v + g; p -= lr v.
template <typename T>
class SgdMomentum {
public:
    explicit SgdMomentum(double momentum) : momentum_(momentum) {}

    void step(std::vector<std::pair<std::string, Tensor<T>>>& params, double lr) {
        if (velocity_.empty()) {
            for (auto& [name, p] : params) velocity_.emplace_back(p.numel(), T(0));
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto data = params[i].second.mutable_data();
            auto grad = params[i].second.grad();
            auto& v = velocity_[i];
            for (std::size_t k = 0; k < v.size(); ++k) {
                v[k] = static_cast<T>(momentum_) * v[k] + grad[k];
                data[k] -= static_cast<T>(lr) * v[k];
            }
        }
    }

private:
    double momentum_;
    std::vector<std::vector<T>> velocity_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct ImageMetrics {
    int sample_id = 0;
    int domain_id = 0;
    int class_id = 0;
    double dice = 0.0;
    std::optional<double> asd;
};

struct ClassMetrics {
    int class_id = 0;
    double dice = 0.0;            // mean over images
    double asd = 0.0;             // mean over images with a defined ASD
    std::size_t n_undefined_asd = 0;
};

struct FoldMetrics {
    int target_domain = 0;
    std::vector<ClassMetrics> classes;  // structure classes only (background excluded)
    std::vector<ImageMetrics> images;

    /// Mean Dice over structure classes, in [0, 1].
    double mean_dice() const {
        if (classes.empty()) return 0.0;
        double s = 0;
        for (const auto& c : classes) s += c.dice;
        return s / static_cast<double>(classes.size());
    }
};

/// Aggregates per-image rows into per-class means.
inline std::vector<ClassMetrics> aggregate_classes(const std::vector<ImageMetrics>& rows, std::size_t num_classes) {
    std::vector<ClassMetrics> out;
    for (std::size_t k = 1; k < num_classes; ++k) {
        ClassMetrics cm;
        cm.class_id = static_cast<int>(k);
        std::size_t n = 0, n_asd = 0;
        double asd = 0;
        for (const auto& r : rows) {
            if (r.class_id != cm.class_id) continue;
            cm.dice += r.dice;
            ++n;
            if (r.asd) {
                asd += *r.asd;
                ++n_asd;
            } else {
                ++cm.n_undefined_asd;
            }
        }
        if (n) cm.dice /= static_cast<double>(n);
        cm.asd = n_asd ? asd / static_cast<double>(n_asd) : std::numeric_limits<double>::quiet_NaN();
        out.push_back(cm);
    }
    return out;
}

/// Scores predicted label maps against the ground truth of `samples`.
inline FoldMetrics score_predictions(const std::vector<const DomainSample*>& samples,
                                     const std::vector<std::vector<int>>& predictions, std::size_t image_size,
                                     int target_domain, std::size_t num_classes = kNumClasses) {
    if (samples.size() != predictions.size()) throw std::invalid_argument("score_predictions: count mismatch");
    FoldMetrics fm;
    fm.target_domain = target_domain;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        for (std::size_t k = 1; k < num_classes; ++k) {
            ImageMetrics im;
            im.sample_id = samples[i]->sample_id;
            im.domain_id = samples[i]->domain_id;
            im.class_id = static_cast<int>(k);
            im.dice = dice_coefficient(predictions[i], samples[i]->mask, im.class_id);
            im.asd = average_surface_distance(predictions[i], samples[i]->mask, im.class_id, image_size, image_size);
            fm.images.push_back(im);
        }
    }
    fm.classes = aggregate_classes(fm.images, num_classes);
    return fm;
}

template <typename T>
std::vector<std::vector<int>> predict(const SegNet<T>& net, const std::vector<const DomainSample*>& samples,
                                      std::size_t image_size, std::size_t batch_size = 16) {
    NoGradScope<T> no_grad;
    std::vector<std::vector<int>> out;
    const std::size_t plane = image_size * image_size;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t end = std::min(samples.size(), start + batch_size);
        std::vector<const DomainSample*> chunk(samples.begin() + std::ptrdiff_t(start),
                                               samples.begin() + std::ptrdiff_t(end));
        const auto labels = argmax_channels(net.forward_eval(images_to_batch<T>(chunk, image_size)));
        for (std::size_t b = 0; b < chunk.size(); ++b) {
            out.emplace_back(labels.begin() + std::ptrdiff_t(b * plane), labels.begin() + std::ptrdiff_t((b + 1) * plane));
        }
    }
    return out;
}

template <typename T>
FoldMetrics evaluate_model(const SegNet<T>& net, const std::vector<const DomainSample*>& samples,
                           std::size_t image_size, int target_domain) {
    return score_predictions(samples, predict(net, samples, image_size), image_size, target_domain,
                             net.config().num_classes);
}

inline std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

/// Per-class rows: run_id, seed, fold, class, dice, asd, n_undefined_asd.
inline void write_metrics_csv(std::ostream& os, const std::string& run_id, std::uint64_t seed, const FoldMetrics& fm,
                              bool header = true) {
    if (header) os << "run_id,seed,fold,class,dice,asd,n_undefined_asd\n";
    for (const auto& c : fm.classes) {
        os << run_id << ',' << seed << ',' << fm.target_domain << ',' << c.class_id << ',' << fmt_double(c.dice)
           << ',' << fmt_double(c.asd) << ',' << c.n_undefined_asd << '\n';
    }
}

inline void write_image_metrics_csv(std::ostream& os, const std::string& run_id, std::uint64_t seed,
                                    const FoldMetrics& fm) {
    os << "run_id,seed,fold,sample_id,class,dice,asd\n";
    for (const auto& r : fm.images) {
        os << run_id << ',' << seed << ',' << fm.target_domain << ',' << r.sample_id << ',' << r.class_id << ','
           << fmt_double(r.dice) << ',' << (r.asd ? fmt_double(*r.asd) : std::string("undefined")) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: one snapshot file per parameter plus manifest.json
// ---------------------------------------------------------------------------

inline nlohmann::json network_json(const NetworkConfig& n, const DcarConfig& d) {
    return {{"in_channels", n.in_channels},
            {"num_classes", n.num_classes},
            {"stage_widths", n.stage_widths},
            {"image_size", n.image_size},
            {"dcar.enabled", d.enabled},
            {"dcar.heads", d.heads},
            {"dcar.fusion", d.fusion == Fusion::sum ? "sum" : "concat"},
            {"dcar.share_weights", d.share_weights}};
}

template <typename T>
void save_checkpoint(const SegNet<T>& net, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json m;
    m["format"] = "dgseg-checkpoint-1";
    m["network"] = network_json(net.config(), net.dcar_config());
    for (const auto& [name, t] : net.named_parameters()) {
        const std::string file = name + ".dgt";
        save_snapshot(dir / file, t);
        m["parameters"].push_back({{"name", name}, {"file", file}});
    }
    std::ofstream os(dir / "manifest.json");
    os << m.dump(2) << '\n';
}

struct CheckpointInfo {
    NetworkConfig net;
    DcarConfig dcar;
};

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw std::runtime_error("no checkpoint manifest in " + dir.string());
    const auto m = nlohmann::json::parse(is).at("network");
    CheckpointInfo info;
    info.net.in_channels = m.at("in_channels").get<std::size_t>();
    info.net.num_classes = m.at("num_classes").get<std::size_t>();
    info.net.stage_widths = m.at("stage_widths").get<std::vector<std::size_t>>();
    info.net.image_size = m.at("image_size").get<std::size_t>();
    info.dcar.enabled = m.at("dcar.enabled").get<bool>();
    info.dcar.heads = m.at("dcar.heads").get<std::size_t>();
    info.dcar.fusion = m.at("dcar.fusion").get<std::string>() == "concat" ? Fusion::concat : Fusion::sum;
    info.dcar.share_weights = m.at("dcar.share_weights").get<bool>();
    return info;
}

template <typename T>
SegNet<T> load_checkpoint(const std::filesystem::path& dir) {
    const CheckpointInfo info = read_checkpoint_info(dir);
    SegNet<T> net(info.net, info.dcar, 0);
    std::ifstream is(dir / "manifest.json");
    const auto m = nlohmann::json::parse(is);
    std::size_t loaded = 0;
    for (const auto& p : m.at("parameters")) {
        net.load_parameter(p.at("name").get<std::string>(), load_snapshot<T>(dir / p.at("file").get<std::string>()));
        ++loaded;
    }
    if (loaded != net.named_parameters().size()) {
        throw std::runtime_error("checkpoint " + dir.string() + " does not cover every parameter");
    }
    return net;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochTrace {
    std::size_t epoch = 0;
    double seg_orig = 0, seg_gen = 0, consist = 0, total = 0;
    double val_dice = 0;
    double lr_end = 0;
};

struct RunReport {
    RunConfig config;
    std::vector<EpochTrace> trace;
    FoldMetrics metrics;
    std::size_t best_epoch = 0;  // 0 = initial weights
    double wall_seconds = 0;
    std::size_t parameter_count = 0;
    std::vector<std::uint64_t> seeds;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["config"] = config.to_json();
        j["seeds"] = seeds;
        j["n_seeds"] = seeds.size();
        j["parameter_count"] = parameter_count;
        j["best_epoch"] = best_epoch;
        j["wall_seconds"] = wall_seconds;
        for (const auto& e : trace) {
            j["trace"].push_back({{"epoch", e.epoch},
                                  {"seg_orig", e.seg_orig},
                                  {"seg_gen", e.seg_gen},
                                  {"consist", e.consist},
                                  {"total", e.total},
                                  {"val_dice", e.val_dice},
                                  {"lr_end", e.lr_end}});
        }
        j["target_domain"] = metrics.target_domain;
        j["mean_dice"] = metrics.mean_dice();
        for (const auto& c : metrics.classes) {
            j["classes"].push_back({{"class", c.class_id},
                                    {"dice", c.dice},
                                    {"asd", std::isnan(c.asd) ? nlohmann::json(nullptr) : nlohmann::json(c.asd)},
                                    {"n_undefined_asd", c.n_undefined_asd}});
        }
        return j;
    }
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training-set split into optimization and validation indices.
inline std::pair<std::vector<const DomainSample*>, std::vector<const DomainSample*>> validation_split(
    const std::vector<const DomainSample*>& train, double fraction, std::uint64_t seed) {
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng r = Rng::substream(seed, {}, "validation");
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[r.below(i)]);
    const auto n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(train.size())));
    std::vector<const DomainSample*> opt, val;
    for (std::size_t i = 0; i < idx.size(); ++i) (i < n_val ? val : opt).push_back(train[idx[i]]);
    return {opt, val};
}

template <typename T>
struct TrainResult {
    RunReport report;
    SegNet<T> net;
};

/// Trains on `split.train` (less the validation share) and scores `split.test`.
template <typename T>
TrainResult<T> train_split(const RunConfig& cfg, std::size_t image_size, const Split& split) {
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    auto [opt_set, val_set] = validation_split(split.train, cfg.val_fraction, cfg.seed);
    if (opt_set.empty()) throw std::invalid_argument("train: empty training set");

    NetworkConfig net_cfg;
    net_cfg.stage_widths = cfg.stage_widths;
    net_cfg.image_size = image_size;
    net_cfg.num_classes = kNumClasses;
    DcarConfig dcar = cfg.dcar;
    dcar.enabled = cfg.enable_dcar;
    SegNet<T> net(net_cfg, dcar, cfg.seed);
    auto params = net.named_parameters();
    SgdMomentum<T> sgd(cfg.momentum);

    const std::size_t steps_per_epoch = (opt_set.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    const auto& model_set = val_set.empty() ? opt_set : val_set;

    RunReport report;
    report.config = cfg;
    report.seeds = {cfg.seed};
    report.parameter_count = net.parameter_count();

    const auto snapshot_params = [&] {
        std::vector<std::vector<T>> v;
        for (const auto& [name, p] : params) v.emplace_back(p.data().begin(), p.data().end());
        return v;
    };
    double best_val = evaluate_model(net, model_set, image_size, cfg.target_domain).mean_dice();
    auto best_params = snapshot_params();
    std::size_t global_step = 0;
    // One pass over the optimization set. Epoch 0 only measures the loss of
    // the initial weights; later epochs take SGD steps.
    const auto run_epoch = [&](std::size_t epoch) {
        const bool update = epoch > 0;
        std::vector<std::size_t> order(opt_set.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle = Rng::substream(cfg.seed, {epoch}, "order");
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

        EpochTrace tr;
        tr.epoch = epoch;
        tr.lr_end = cfg.lr0;
        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            std::vector<const DomainSample*> batch;
            std::vector<int> domains;
            for (std::size_t i = step * cfg.batch_size; i < std::min(order.size(), (step + 1) * cfg.batch_size); ++i) {
                batch.push_back(opt_set[order[i]]);
                domains.push_back(opt_set[order[i]]->domain_id);
            }
            const Tensor<T> x = images_to_batch<T>(batch, image_size);
            const MaskTensor y = masks_to_batch(batch, image_size);
            Rng afb_rng = Rng::substream(cfg.seed, {epoch, step}, "afb");
            net.zero_grad();
            LossBreakdown<T> losses;
            try {
                Tape<T> tape;
                std::optional<TapeScope<T>> scope;
                std::optional<NoGradScope<T>> frozen;
                if (update) {
                    scope.emplace(tape);
                } else {
                    frozen.emplace();
                }
                const ForwardOutput<T> out = net.forward_train(x, afb_rng, cfg.afb, cfg.enable_afb);
                losses = compute_losses(out.logits_orig, out.logits_gen, y, domains, cfg.loss);
                if (update) tape.backward(losses.total);
            } catch (const NumericError& e) {
                std::ostringstream msg;
                msg << "non-finite value at epoch " << epoch << " step " << step << " (batch samples:";
                for (const auto* s : batch) msg << " d" << s->domain_id << "_s" << s->sample_id;
                msg << "): " << e.what();
                if (!cfg.out_dir.empty()) {
                    std::filesystem::create_directories(cfg.out_dir);
                    std::ofstream dump(std::filesystem::path(cfg.out_dir) / "nan_dump.txt");
                    dump << msg.str() << '\n';
                }
                throw TrainingError(msg.str());
            }
            if (update) {
                const double lr = poly_lr(cfg.lr0, global_step++, total_steps, cfg.poly_power);
                sgd.step(params, lr);
                tr.lr_end = lr;
            }
            tr.seg_orig += static_cast<double>(losses.seg_orig.item());
            tr.seg_gen += static_cast<double>(losses.seg_gen.item());
            tr.consist += static_cast<double>(losses.consist.item());
            tr.total += static_cast<double>(losses.total.item());
        }
        const double n = static_cast<double>(steps_per_epoch);
        tr.seg_orig /= n;
        tr.seg_gen /= n;
        tr.consist /= n;
        tr.total /= n;
        return tr;
    };

    EpochTrace initial = run_epoch(0);
    initial.val_dice = best_val;
    report.trace.push_back(initial);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochTrace tr = run_epoch(epoch);
        tr.val_dice = evaluate_model(net, model_set, image_size, cfg.target_domain).mean_dice();
        if (tr.val_dice > best_val) {
            best_val = tr.val_dice;
            best_params = snapshot_params();
            report.best_epoch = epoch;
        }
        report.trace.push_back(tr);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto dst = params[i].second.mutable_data();
        std::copy(best_params[i].begin(), best_params[i].end(), dst.begin());
    }
    report.metrics = evaluate_model(net, split.test, image_size, cfg.target_domain);
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {std::move(report), std::move(net)};
}

/// Train and test drawn from the same domain: a seeded `test_fraction` of
/// its samples is held out.
inline Split in_domain_split(const Corpus& c, int domain, double test_fraction, std::uint64_t seed) {
    const Split loo = leave_one_out_split(c, domain);
    auto [train, test] = validation_split(loo.test, test_fraction, seed);
    return {train, test};
}

template <typename T>
TrainResult<T> train_on(const RunConfig& cfg, const Corpus& corpus) {
    return train_split<T>(cfg, corpus.image_size, leave_one_out_split(corpus, cfg.target_domain));
}

/// Writes summary.json, metrics.csv, per_image.csv and the checkpoint under cfg.out_dir.
template <typename T>
void write_run_outputs(const TrainResult<T>& res) {
    const auto& cfg = res.report.config;
    if (cfg.out_dir.empty()) return;
    const std::filesystem::path dir(cfg.out_dir);
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "summary.json") << res.report.to_json().dump(2) << '\n';
    std::ofstream metrics(dir / "metrics.csv");
    write_metrics_csv(metrics, cfg.run_id, cfg.seed, res.report.metrics);
    std::ofstream per_image(dir / "per_image.csv");
    write_image_metrics_csv(per_image, cfg.run_id, cfg.seed, res.report.metrics);
    save_checkpoint(res.net, dir / "checkpoint");
}

/// Trains at the configured precision and returns the report.
inline RunReport train(const RunConfig& cfg, const Corpus& corpus) {
    if (cfg.precision == Precision::f64) {
        auto res = train_on<double>(cfg, corpus);
        write_run_outputs(res);
        return res.report;
    }
    auto res = train_on<float>(cfg, corpus);
    write_run_outputs(res);
    return res.report;
}

inline RunReport train(const RunConfig& cfg) {
    if (cfg.corpus_path.empty()) throw std::invalid_argument("train: corpus.path not set");
    return train(cfg, read_corpus(cfg.corpus_path));
}

inline FoldMetrics evaluate(const std::filesystem::path& checkpoint, const Corpus& corpus, int target_domain) {
    const SegNet<double> net = load_checkpoint<double>(checkpoint);
    if (net.config().image_size != corpus.image_size) {
        throw ShapeError("evaluate: checkpoint expects " + std::to_string(net.config().image_size) +
                         " px images, corpus has " + std::to_string(corpus.image_size));
    }
    return evaluate_model(net, leave_one_out_split(corpus, target_domain).test, corpus.image_size, target_domain);
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

struct Variant {
    std::string name;
    bool afb;
    bool dcar;
};

inline const std::vector<Variant>& ablation_variants() {
    static const std::vector<Variant> v = {{"base", false, false}, {"afb", true, false}, {"afb+dcar", true, true}};
    return v;
}

struct AblationRun {
    std::string variant;
    int target_domain;
    std::uint64_t seed;
    double mean_dice;  // percent
    double wall_seconds;
};

struct AblationTable {
    std::vector<int> domains;
    std::vector<std::string> variants;
    std::vector<std::vector<double>> dice;  // [variant][domain], percent, mean over seeds
    std::vector<double> avg;                // [variant]
    std::vector<AblationRun> runs;
    std::size_t n_seeds = 0;

    void write_csv(std::ostream& os) const {
        os << "variant";
        for (int d : domains) os << ",domain" << d;
        os << ",avg,n_seeds\n";
        for (std::size_t v = 0; v < variants.size(); ++v) {
            os << variants[v];
            for (double x : dice[v]) os << ',' << fmt_double(x);
            os << ',' << fmt_double(avg[v]) << ',' << n_seeds << '\n';
        }
    }

    void write_runs_csv(std::ostream& os) const {
        os << "variant,target_domain,seed,mean_dice,wall_seconds\n";
        for (const auto& r : runs) {
            os << r.variant << ',' << r.target_domain << ',' << r.seed << ',' << fmt_double(r.mean_dice) << ','
               << fmt_double(r.wall_seconds) << '\n';
        }
    }
};

/// Builds the variant × domain table from completed runs.
inline AblationTable tabulate(const std::vector<AblationRun>& runs, const std::vector<int>& domains,
                              std::size_t n_seeds) {
    AblationTable t;
    t.domains = domains;
    t.runs = runs;
    t.n_seeds = n_seeds;
    for (const auto& v : ablation_variants()) {
        t.variants.push_back(v.name);
        std::vector<double> row;
        for (int d : domains) {
            double s = 0;
            std::size_t n = 0;
            for (const auto& r : runs) {
                if (r.variant == v.name && r.target_domain == d) {
                    s += r.mean_dice;
                    ++n;
                }
            }
            row.push_back(n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN());
        }
        double a = 0;
        for (double x : row) a += x;
        t.avg.push_back(a / static_cast<double>(row.size()));
        t.dice.push_back(std::move(row));
    }
    return t;
}

/// Runs {base, +AFB, +AFB+DCAR} × every leave-one-out fold × seeds. Runs are
/// independent and may execute on `jobs` threads; each writes to its own
/// directory under base.out_dir when that is set.
inline AblationTable ablate(const RunConfig& base, const Corpus& corpus, const std::vector<std::uint64_t>& seeds,
                            std::size_t jobs = 1, std::ostream* log = nullptr) {
    struct Job {
        RunConfig cfg;
        std::string variant;
    };
    std::vector<Job> work;
    for (const auto& v : ablation_variants()) {
        for (int d : corpus.domain_ids()) {
            for (auto s : seeds) {
                RunConfig c = base;
                c.enable_afb = v.afb;
                c.enable_dcar = v.dcar;
                c.dcar.enabled = v.dcar;
                c.target_domain = d;
                c.seed = s;
                c.run_id = v.name + "_t" + std::to_string(d) + "_s" + std::to_string(s);
                if (!base.out_dir.empty()) c.out_dir = (std::filesystem::path(base.out_dir) / c.run_id).string();
                work.push_back({c, v.name});
            }
        }
    }
    std::vector<AblationRun> runs(work.size());
    const auto run_one = [&](std::size_t i) {
        const RunReport r = train(work[i].cfg, corpus);
        runs[i] = {work[i].variant, work[i].cfg.target_domain, work[i].cfg.seed, 100.0 * r.metrics.mean_dice(),
                   r.wall_seconds};
    };
    jobs = std::max<std::size_t>(1, jobs);
    for (std::size_t i = 0; i < work.size(); i += jobs) {
        std::vector<std::future<void>> pending;
        for (std::size_t k = i; k < std::min(work.size(), i + jobs); ++k) {
            pending.push_back(std::async(std::launch::async, run_one, k));
        }
        for (auto& f : pending) f.get();
        if (log) {
            for (std::size_t k = i; k < std::min(work.size(), i + jobs); ++k) {
                *log << work[k].cfg.run_id << " dice=" << std::fixed << std::setprecision(2) << runs[k].mean_dice
                     << " (" << std::setprecision(1) << runs[k].wall_seconds << "s)\n" << std::defaultfloat
                     << std::flush;
            }
        }
    }
    return tabulate(runs, corpus.domain_ids(), seeds.size());
}

// ---------------------------------------------------------------------------
// Style-statistics scatter
// ---------------------------------------------------------------------------

struct StatPoint {
    std::string cloud;  // source | mixstyle | afb
    std::size_t draw;
    std::size_t channel;
    double mu, sigma;
};

struct ScatterResult {
    std::vector<StatPoint> points;
    std::vector<double> mu_min, mu_max, sigma_min, sigma_max;  // per-channel source envelope
    double afb_outside_fraction = 0;
    double afb_inside_fraction = 0;
    double mixstyle_outside_fraction = 0;
    std::size_t encoder_stage = 1;
    bool trained_encoder = false;

    void write_csv(std::ostream& os) const {
        os << "# encoder=" << (trained_encoder ? "trained" : "random-init") << " stage=" << encoder_stage
           << " afb_outside=" << fmt_double(afb_outside_fraction)
           << " mixstyle_outside=" << fmt_double(mixstyle_outside_fraction) << '\n';
        os << "cloud,draw,channel,mu,sigma\n";
        for (const auto& p : points) {
            os << p.cloud << ',' << p.draw << ',' << p.channel << ',' << fmt_double(p.mu) << ',' << fmt_double(p.sigma)
               << '\n';
        }
    }
};

/// Channel statistics of every image's encoder-stage features, as [image][channel].
template <typename T>
std::pair<std::vector<std::vector<double>>, std::vector<std::vector<double>>> source_statistics(
    const SegNet<T>& net, const std::vector<const DomainSample*>& samples, std::size_t image_size, std::size_t stage) {
    NoGradScope<T> no_grad;
    std::vector<std::vector<double>> mus, sigmas;
    for (std::size_t start = 0; start < samples.size(); start += 16) {
        std::vector<const DomainSample*> chunk(samples.begin() + std::ptrdiff_t(start),
                                               samples.begin() + std::ptrdiff_t(std::min(samples.size(), start + 16)));
        const auto st = channel_stats(net.encode_through(images_to_batch<T>(chunk, image_size), stage - 1));
        const std::size_t c = st.mu.dim(1);
        for (std::size_t b = 0; b < chunk.size(); ++b) {
            mus.emplace_back(st.mu.data().begin() + std::ptrdiff_t(b * c), st.mu.data().begin() + std::ptrdiff_t((b + 1) * c));
            sigmas.emplace_back(st.sigma.data().begin() + std::ptrdiff_t(b * c),
                                st.sigma.data().begin() + std::ptrdiff_t((b + 1) * c));
        }
    }
    return {mus, sigmas};
}

/// Source, MixStyle-convex and AFB (mu, sigma) clouds at one encoder stage.
/// A mixed statistic lies outside when its mu or sigma falls strictly
/// outside the per-channel [min, max] over all source images.
template <typename T>
ScatterResult stats_scatter(const SegNet<T>& net, const std::vector<const DomainSample*>& samples,
                            std::size_t image_size, std::size_t n_draws, std::uint64_t seed, const AfbConfig& afb,
                            std::size_t stage = 1, bool trained = false) {
    if (samples.size() < 2) throw std::invalid_argument("stats_scatter: at least two source images required");
    const auto [mus, sigmas] = source_statistics(net, samples, image_size, stage);
    const std::size_t c = mus[0].size();
    ScatterResult res;
    res.encoder_stage = stage;
    res.trained_encoder = trained;
    res.mu_min.assign(c, std::numeric_limits<double>::infinity());
    res.mu_max.assign(c, -std::numeric_limits<double>::infinity());
    res.sigma_min = res.mu_min;
    res.sigma_max = res.mu_max;
    for (std::size_t i = 0; i < mus.size(); ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            res.mu_min[ch] = std::min(res.mu_min[ch], mus[i][ch]);
            res.mu_max[ch] = std::max(res.mu_max[ch], mus[i][ch]);
            res.sigma_min[ch] = std::min(res.sigma_min[ch], sigmas[i][ch]);
            res.sigma_max[ch] = std::max(res.sigma_max[ch], sigmas[i][ch]);
        }
    }
    const auto outside = [&](std::size_t ch, double mu, double sigma) {
        return mu < res.mu_min[ch] || mu > res.mu_max[ch] || sigma < res.sigma_min[ch] || sigma > res.sigma_max[ch];
    };
    Rng pick = Rng::substream(seed, {}, "scatter.pick");
    Rng mix_rng = Rng::substream(seed, {}, "scatter.mixstyle");
    Rng afb_rng = Rng::substream(seed, {}, "scatter.afb");
    std::size_t afb_out = 0, mix_out = 0;
    for (std::size_t draw = 0; draw < n_draws; ++draw) {
        const std::size_t i = pick.below(mus.size());
        std::size_t j = pick.below(mus.size() - 1);
        if (j >= i) ++j;
        for (std::size_t ch = 0; ch < c; ++ch) res.points.push_back({"source", draw, ch, mus[i][ch], sigmas[i][ch]});

        const double w = std::clamp(mix_rng.beta(afb.alpha, afb.alpha), 0.0, 1.0);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double mu = w * mus[i][ch] + (1 - w) * mus[j][ch];
            const double sg = w * sigmas[i][ch] + (1 - w) * sigmas[j][ch];
            mix_out += outside(ch, mu, sg);
            res.points.push_back({"mixstyle", draw, ch, mu, sg});
        }

        const AfbDraw<double> d = sample_afb_draw<double>(afb_rng, 1, c, afb);
        const FeatureStats<double> orig{Tensor<double>(Shape{1, c}, mus[i]), Tensor<double>(Shape{1, c}, sigmas[i])};
        const FeatureStats<double> mixed = mix_stats(orig, FeatureStats<double>{d.mu_aug, d.sigma_aug}, d.keep);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double mu = mixed.mu.data()[ch], sg = mixed.sigma.data()[ch];
            afb_out += outside(ch, mu, sg);
            res.points.push_back({"afb", draw, ch, mu, sg});
        }
    }
    const double denom = static_cast<double>(n_draws * c);
    res.afb_outside_fraction = static_cast<double>(afb_out) / denom;
    res.afb_inside_fraction = 1.0 - res.afb_outside_fraction;
    res.mixstyle_outside_fraction = static_cast<double>(mix_out) / denom;
    return res;
}

}  // namespace dgseg

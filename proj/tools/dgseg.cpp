// dgseg: corpus generation, training, evaluation, ablation sweeps and
// diagnostics for the AFB + DCAR segmentation pipeline.

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dgseg/config.hpp"
#include "dgseg/gradcheck.hpp"
#include "dgseg/harness.hpp"
#include "dgseg/synthdg.hpp"

namespace {

using namespace dgseg;

struct ConfigArgs {
    std::string file;
    std::vector<std::string> overrides;

    void attach(CLI::App* app) {
        app->add_option("-c,--config", file, "config file with dotted keys")->check(CLI::ExistingFile);
        app->add_option("-s,--set", overrides, "override, key=value (repeatable)");
    }

    RunConfig resolve(const std::vector<std::pair<std::string, std::string>>& flags) const {
        ConfigMap m = file.empty() ? ConfigMap{} : ConfigMap::load(file);
        for (const auto& [k, v] : flags) {
            if (!v.empty()) m.set(k, v);
        }
        for (const auto& kv : overrides) m.set_assignment(kv);
        return RunConfig::from(m);
    }
};

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = ConfigMap::trim(item);
        if (!item.empty()) out.push_back(std::stoull(item));
    }
    if (out.empty()) throw std::invalid_argument("no seeds given");
    return out;
}

void write_file(const std::filesystem::path& p, const std::string& content) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << content;
}

int cmd_gen_data(int domains, int per_domain, std::uint64_t seed, int image_size, const std::string& out) {
    const Corpus c = generate_corpus(static_cast<std::size_t>(domains), static_cast<std::size_t>(per_domain), seed,
                                     static_cast<std::size_t>(image_size));
    write_corpus(c, out);
    std::cout << "wrote " << c.samples.size() << " samples (" << domains << " domains, " << image_size << " px) to "
              << out << '\n';
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    const RunReport r = train(cfg);
    std::cout << "run " << cfg.run_id << " target=" << cfg.target_domain << " best_epoch=" << r.best_epoch
              << " mean_dice=" << std::fixed << std::setprecision(4) << r.metrics.mean_dice() << " ("
              << std::setprecision(1) << r.wall_seconds << " s)\n";
    std::cout << std::defaultfloat;
    write_metrics_csv(std::cout, cfg.run_id, cfg.seed, r.metrics);
    if (!cfg.out_dir.empty()) std::cout << "outputs in " << cfg.out_dir << '\n';
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus_dir, int target, std::uint64_t seed,
             const std::string& run_id, const std::string& out, const std::string& per_image) {
    const FoldMetrics fm = evaluate(checkpoint, read_corpus(corpus_dir), target);
    std::ostringstream csv;
    write_metrics_csv(csv, run_id, seed, fm);
    if (out.empty()) {
        std::cout << csv.str();
    } else {
        write_file(out, csv.str());
    }
    if (!per_image.empty()) {
        std::ostringstream rows;
        write_image_metrics_csv(rows, run_id, seed, fm);
        write_file(per_image, rows.str());
    }
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& seeds, std::size_t jobs) {
    if (cfg.corpus_path.empty()) throw std::invalid_argument("ablate: corpus.path not set");
    const Corpus corpus = read_corpus(cfg.corpus_path);
    const auto t = ablate(cfg, corpus, parse_seeds(seeds), jobs, &std::cerr);
    std::ostringstream table, runs;
    t.write_csv(table);
    t.write_runs_csv(runs);
    std::cout << table.str();
    if (!cfg.out_dir.empty()) {
        write_file(std::filesystem::path(cfg.out_dir) / "ablation.csv", table.str());
        write_file(std::filesystem::path(cfg.out_dir) / "ablation_runs.csv", runs.str());
    }
    return 0;
}

int cmd_stats_scatter(const std::string& corpus_dir, const std::string& checkpoint, std::size_t draws,
                      std::uint64_t seed, int stage, int exclude, const std::string& out) {
    const Corpus corpus = read_corpus(corpus_dir);
    std::vector<const DomainSample*> source;
    for (const auto& s : corpus.samples) {
        if (s.domain_id != exclude) source.push_back(&s);
    }
    ScatterResult r;
    if (checkpoint.empty()) {
        NetworkConfig net;
        net.image_size = corpus.image_size;
        DcarConfig dcar;
        dcar.enabled = false;
        const SegNet<double> model(net, dcar, seed);
        r = stats_scatter(model, source, corpus.image_size, draws, seed, AfbConfig{}, static_cast<std::size_t>(stage));
    } else {
        const SegNet<double> model = load_checkpoint<double>(checkpoint);
        r = stats_scatter(model, source, corpus.image_size, draws, seed, AfbConfig{}, static_cast<std::size_t>(stage),
                          true);
    }
    std::ostringstream csv;
    r.write_csv(csv);
    if (out.empty()) {
        std::cout << csv.str();
    } else {
        write_file(out, csv.str());
        std::cout << "afb outside envelope: " << r.afb_outside_fraction
                  << ", mixstyle outside envelope: " << r.mixstyle_outside_fraction << '\n';
    }
    return 0;
}

int cmd_gradcheck(std::size_t seeds, double tol) {
    bool ok = true;
    for (const auto& o : run_gradcheck_suite(seeds, tol)) {
        std::cout << (o.passed ? "PASS " : "FAIL ") << std::left << std::setw(28) << o.name << " seeds=" << o.seeds
                  << " max_rel_err=" << std::scientific << std::setprecision(3) << o.worst_rel_err << std::defaultfloat
                  << '\n';
        ok = ok && o.passed;
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dgseg: domain-generalizing segmentation with AFB and DCAR"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic multi-domain corpus");
    int domains = 4, per_domain = 50, image_size = 64;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    gen->add_option("--domains", domains, "number of style domains")->check(CLI::Range(2, 64));
    gen->add_option("--per-domain", per_domain, "samples per domain")->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed, "corpus seed");
    gen->add_option("--image-size", image_size, "square image side (multiple of 4)")->check(CLI::PositiveNumber);
    gen->add_option("--out", gen_out, "output directory")->required();

    ConfigArgs train_cfg;
    std::string train_corpus, train_out, train_target, train_seed;
    auto* tr = app.add_subcommand("train", "train one leave-one-domain-out run");
    train_cfg.attach(tr);
    tr->add_option("--corpus", train_corpus, "corpus directory (corpus.path)");
    tr->add_option("--out", train_out, "run output directory (out.dir)");
    tr->add_option("--target", train_target, "held-out domain (train.target_domain)");
    tr->add_option("--seed", train_seed, "run seed (seed)");

    std::string ev_ckpt, ev_corpus, ev_out, ev_per_image, ev_run_id = "eval";
    int ev_target = 0;
    std::uint64_t ev_seed = 0;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a target domain");
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
    ev->add_option("--corpus", ev_corpus, "corpus directory")->required();
    ev->add_option("--target", ev_target, "target domain")->required();
    ev->add_option("--seed", ev_seed, "seed recorded in the CSV rows");
    ev->add_option("--run-id", ev_run_id, "run id recorded in the CSV rows");
    ev->add_option("--out", ev_out, "per-class CSV (stdout if omitted)");
    ev->add_option("--per-image", ev_per_image, "per-image CSV");

    ConfigArgs abl_cfg;
    std::string abl_corpus, abl_out, abl_seeds = "0,1,2";
    std::size_t abl_jobs = 1;
    auto* ab = app.add_subcommand("ablate", "base / +AFB / +AFB+DCAR over all folds and seeds");
    abl_cfg.attach(ab);
    ab->add_option("--corpus", abl_corpus, "corpus directory (corpus.path)");
    ab->add_option("--out", abl_out, "sweep output directory (out.dir)");
    ab->add_option("--seeds", abl_seeds, "comma-separated seeds");
    ab->add_option("-j,--jobs", abl_jobs, "concurrent runs")->check(CLI::PositiveNumber);

    std::string sc_corpus, sc_ckpt, sc_out;
    std::size_t sc_draws = 10000;
    std::uint64_t sc_seed = 0;
    int sc_stage = 1, sc_exclude = -1;
    auto* sc = app.add_subcommand("stats-scatter", "feature-statistic clouds: source, MixStyle, AFB");
    sc->add_option("--corpus", sc_corpus, "corpus directory")->required();
    sc->add_option("--checkpoint", sc_ckpt, "trained checkpoint (default: random-init encoder)");
    sc->add_option("--draws", sc_draws, "mixing draws per cloud")->check(CLI::PositiveNumber);
    sc->add_option("--seed", sc_seed, "seed for initialization and draws");
    sc->add_option("--stage", sc_stage, "encoder stage (1-based)")->check(CLI::PositiveNumber);
    sc->add_option("--exclude-domain", sc_exclude, "domain left out of the source set");
    sc->add_option("--out", sc_out, "CSV path (stdout if omitted)");

    std::size_t gc_seeds = 20;
    double gc_tol = 1e-4;
    auto* gcmd = app.add_subcommand("gradcheck", "central-difference check of every differentiable op");
    gcmd->add_option("--seeds", gc_seeds, "random instances per op")->check(CLI::PositiveNumber);
    gcmd->add_option("--tol", gc_tol, "relative error tolerance");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) return cmd_gen_data(domains, per_domain, gen_seed, image_size, gen_out);
        if (*tr) {
            return cmd_train(train_cfg.resolve({{"corpus.path", train_corpus},
                                                {"out.dir", train_out},
                                                {"train.target_domain", train_target},
                                                {"seed", train_seed}}));
        }
        if (*ev) return cmd_eval(ev_ckpt, ev_corpus, ev_target, ev_seed, ev_run_id, ev_out, ev_per_image);
        if (*ab) return cmd_ablate(abl_cfg.resolve({{"corpus.path", abl_corpus}, {"out.dir", abl_out}}), abl_seeds, abl_jobs);
        if (*sc) {
            return cmd_stats_scatter(sc_corpus, sc_ckpt, sc_draws, sc_seed, sc_stage, sc_exclude, sc_out);
        }
        if (*gcmd) return cmd_gradcheck(gc_seeds, gc_tol);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

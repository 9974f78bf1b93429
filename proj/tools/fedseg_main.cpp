#include <CLI11.hpp>

#include "fedseg/config.hpp"
#include "fedseg/gradcheck.hpp"
#include "fedseg/harness.hpp"
#include "fedseg/synthdata.hpp"

#include <cstdio>
#include <string>
#include <vector>

namespace {

struct CommonOpts {
    std::string config_path;
    std::string seed_list;
    std::string out_dir;
    int threads = 0;
};

void add_common(CLI::App* cmd, CommonOpts* opts) {
    cmd->add_option("--config", opts->config_path, "experiment config file");
    cmd->add_option("--seed", opts->seed_list, "override seed list, e.g. 1,2,3");
    cmd->add_option("--out", opts->out_dir, "output directory");
    cmd->add_option("--threads", opts->threads, "worker threads for independent cells");
}

fedseg::ExperimentConfig load_config(const CommonOpts& opts) {
    fedseg::ExperimentConfig cfg;
    if (!opts.config_path.empty())
        cfg = fedseg::ExperimentConfig::from_file(opts.config_path);
    if (!opts.seed_list.empty()) {
        cfg.seeds.clear();
        std::string item;
        std::stringstream ss(opts.seed_list);
        while (std::getline(ss, item, ',')) cfg.seeds.push_back(std::stoull(item));
    }
    if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
    if (opts.threads > 0) cfg.threads = opts.threads;
    cfg.validate();
    return cfg;
}

int finish(const fedseg::HarnessResult& result, const fedseg::ExperimentConfig& cfg) {
    fedseg::write_outputs(result, cfg.out_dir);
    std::printf("%s", result.csv.c_str());
    for (const auto& e : result.errors) std::fprintf(stderr, "error: %s\n", e.c_str());
    std::fprintf(stderr, "wrote %s/%s.csv (%zu rows ok, %zu cells failed)\n",
                 cfg.out_dir.c_str(), result.command.c_str(), result.reports.size(),
                 result.errors.size());
    return result.ok() ? 0 : 1;
}

int cmd_gradcheck(int shapes, std::uint64_t seed, const std::string& mutate) {
    const auto results = fedseg::run_gradcheck_suite(shapes, seed, 1e-4, mutate);
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("%-22s max_rel_err %.3e over %lld elements  %s\n", r.op.c_str(),
                    r.max_rel_err, static_cast<long long>(r.checked_elements),
                    r.pass ? "PASS" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    std::printf("gradcheck: %s\n", all_pass ? "all ops pass" : "FAILURES present");
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedseg: federated domain-generalization segmentation simulator"};
    app.require_subcommand(1);

    CommonOpts opts;

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op");
    int gc_shapes = 20;
    std::uint64_t gc_seed = 2024;
    std::string gc_mutate;
    gradcheck->add_option("--shapes", gc_shapes, "randomized shapes per op");
    gradcheck->add_option("--rng-seed", gc_seed, "seed of the random shapes");
    gradcheck->add_option("--mutate", gc_mutate,
                          "test fixture: corrupt the named op's gradient to prove detection");

    auto* gen = app.add_subcommand("gen-data", "generate and export the synthetic dataset");
    add_common(gen, &opts);

    auto* loo = app.add_subcommand("loo", "leave-one-domain-out evaluation");
    add_common(loo, &opts);
    auto* ablate = app.add_subcommand("ablate", "component ablation (baseline/MLA/BIN/MLA+BIN)");
    add_common(ablate, &opts);
    auto* sweep_depth = app.add_subcommand("sweep-bin-depth", "BIN depth sweep 0..levels");
    add_common(sweep_depth, &opts);
    auto* sweep_clients = app.add_subcommand("sweep-clients", "seen-client-count sweep");
    add_common(sweep_clients, &opts);
    auto* compare = app.add_subcommand("compare-ibn", "BIN vs IBN blocks");
    add_common(compare, &opts);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the configured dataset");
    std::string checkpoint;
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    add_common(eval, &opts);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gradcheck->parsed()) return cmd_gradcheck(gc_shapes, gc_seed, gc_mutate);

        const fedseg::ExperimentConfig cfg = load_config(opts);
        if (gen->parsed()) {
            const auto ds = fedseg::generate(cfg.domains, cfg.per_domain, cfg.image_size,
                                             cfg.seeds.front(), cfg.structures);
            fedseg::export_dataset(ds, cfg.out_dir);
            std::fprintf(stderr, "wrote dataset (%d domains, checksum %u) under %s\n",
                         ds.domains, ds.checksum(), cfg.out_dir.c_str());
            return 0;
        }
        if (eval->parsed()) return finish(fedseg::run_eval_checkpoint(cfg, checkpoint), cfg);
        if (loo->parsed()) return finish(fedseg::run_loo(cfg), cfg);
        if (ablate->parsed()) return finish(fedseg::run_ablate(cfg), cfg);
        if (sweep_depth->parsed()) return finish(fedseg::run_sweep_bin_depth(cfg), cfg);
        if (sweep_clients->parsed()) return finish(fedseg::run_sweep_clients(cfg), cfg);
        if (compare->parsed()) return finish(fedseg::run_compare_ibn(cfg), cfg);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "fedseg: %s\n", e.what());
        return 1;
    }
    return 1;
}

#include "fedseg/harness.hpp"

#include "fedseg/crc32.hpp"
#include "fedseg/fedsim.hpp"
#include "fedseg/rng.hpp"

#include <atomic>
#include <chrono>
#include <fstream>
#include <map>
#include <thread>

namespace fedseg {

namespace {

// Everything one grid cell needs: which domains train, which net, and which
// methods are read off the shared training afterwards.
struct CellSpec {
    std::uint64_t seed = 0;
    int unseen = -1;
    int depth = 0;
    std::string block = "bin";
    std::vector<int> seen;  // ascending domain ids
    std::vector<Method> methods;
    std::string extra_value;
};

struct CellOutput {
    std::vector<EvalReport> reports;  // one per method, in spec order
    nlohmann::json log;
    std::string error;
};

std::uint64_t subset_mask(const std::vector<int>& seen) {
    std::uint64_t mask = 0;
    for (int d : seen) mask |= 1ull << d;
    return mask;
}

int block_code(const std::string& block, int depth) {
    if (depth == 0) return 0;  // depth 0 is a plain net whatever the block says
    if (block == "plain") return 0;
    if (block == "bin") return 1;
    if (block == "ibn") return 2;
    throw ConfigError("unknown block '" + block + "'");
}

// Seed of one federation training; shared by every command so that e.g. the
// client-count sweep at c = k reproduces the LOO rows bitwise.
std::uint64_t fed_seed(std::uint64_t master, const CellSpec& spec) {
    return Rng::derive(master, {rng_tag::kFederation, static_cast<std::uint64_t>(spec.unseen),
                                static_cast<std::uint64_t>(spec.depth),
                                static_cast<std::uint64_t>(block_code(spec.block, spec.depth)),
                                subset_mask(spec.seen)});
}

bool method_uses_bin(Method m) { return m == Method::BinOnly || m == Method::MlaBin; }
bool method_uses_mla(Method m) { return m == Method::MlaOnly || m == Method::MlaBin; }

struct MlaParts {
    FeatureExtractor extractor;
    Dam dam;
    DamTrainResult log;
};

MlaParts train_mla(const ExperimentConfig& cfg, const FederationDataset& ds,
                   const CellSpec& spec) {
    MlaParts parts;
    parts.extractor = FeatureExtractor::build(cfg.extractor_config(),
                                              Rng::derive(spec.seed, {rng_tag::kExtractor}));
    // clients extract locally and upload only (feature, label) rows; the
    // upload's domain field is the position among the seen domains
    std::vector<FeatureUpload> uploads;
    for (std::size_t pos = 0; pos < spec.seen.size(); ++pos) {
        FeatureUpload up;
        up.domain = static_cast<int>(pos);
        for (const SegSample& s : ds.train[static_cast<std::size_t>(spec.seen[pos])])
            up.features.push_back(parts.extractor.extract(s.image));
        uploads.push_back(std::move(up));
    }
    DomainFeatureBank bank = build_bank_from_uploads(uploads, parts.extractor.feature_dim());
    parts.dam = Dam::init(parts.extractor.feature_dim(), static_cast<int>(spec.seen.size()),
                          Rng::derive(spec.seed, {rng_tag::kDamInit,
                                                  static_cast<std::uint64_t>(spec.unseen),
                                                  subset_mask(spec.seen)}),
                          cfg.dam_hidden);
    parts.log = train_dam(parts.dam, bank, cfg.dam_epochs, cfg.dam_lr,
                          Rng::derive(spec.seed, {rng_tag::kDamTrain,
                                                  static_cast<std::uint64_t>(spec.unseen),
                                                  subset_mask(spec.seen)}),
                          cfg.batch_size);
    return parts;
}

CellOutput run_cell(const ExperimentConfig& cfg, const FederationDataset& ds,
                    const CellSpec& spec, bool parallel_clients) {
    CellOutput out;
    const NetConfig net_cfg = cfg.net_config(spec.depth, spec.block);

    std::vector<ClientState> clients;
    for (int d : spec.seen) {
        ClientState c;
        c.domain = d;
        c.data = &ds.train[static_cast<std::size_t>(d)];
        c.net = SegNet::build(net_cfg, Rng::derive(spec.seed, {rng_tag::kNetInit,
                                                               static_cast<std::uint64_t>(d)}));
        clients.push_back(std::move(c));
    }
    FederationResult fed =
        run_federation(clients, net_cfg, cfg.rounds, cfg.epochs_per_round, cfg.batch_size,
                       cfg.schedule(), fed_seed(spec.seed, spec), parallel_clients);

    bool need_mla = false;
    for (Method m : spec.methods) need_mla = need_mla || method_uses_mla(m);
    MlaParts mla;
    if (need_mla && spec.seen.size() >= 2) mla = train_mla(cfg, ds, spec);

    const EvalOptions eval_opts{0.5, cfg.batch_size};
    for (Method m : spec.methods) {
        ModelFn model;
        if (!method_uses_mla(m)) {
            model = [&](const Tensor& batch, int) {
                return aggregate_forward(net_cfg, fed.global, batch);
            };
        } else if (spec.seen.size() < 2) {
            // a single seen domain: the similarity weighting is trivially 1.0
            model = [&](const Tensor& batch, int) {
                return aggregate_forward(net_cfg, fed.local_models[0], batch);
            };
        } else if (cfg.weight_granularity() == WeightGranularity::PerDataset) {
            // one weight vector per evaluated domain, from its whole test split
            std::map<int, ParamSet> per_domain;
            for (int d = 0; d < ds.domains; ++d) {
                std::vector<Eigen::VectorXd> features;
                for (const SegSample& s : ds.test[static_cast<std::size_t>(d)])
                    features.push_back(mla.extractor.extract(s.image));
                per_domain.emplace(d, aggregate(fed.local_models,
                                                infer_weights(mla.dam, features)));
            }
            auto shared = std::make_shared<std::map<int, ParamSet>>(std::move(per_domain));
            model = [&, shared](const Tensor& batch, int domain) {
                return aggregate_forward(net_cfg, shared->at(domain), batch);
            };
        } else {
            model = [&](const Tensor& batch, int) {
                return mla_inference(net_cfg, fed.local_models, mla.dam, mla.extractor, batch,
                                     cfg.weight_granularity());
            };
        }
        out.reports.push_back(
            evaluate(model, ds, method_name(m), spec.unseen, spec.seed, eval_opts));
    }

    out.log["seed"] = spec.seed;
    out.log["unseen"] = spec.unseen;
    out.log["depth"] = spec.depth;
    out.log["block"] = spec.block;
    out.log["seen"] = spec.seen;
    if (need_mla && spec.seen.size() >= 2) {
        out.log["dam_train_accuracy"] = mla.log.train_accuracy;
        if (!mla.log.epoch_loss.empty()) out.log["dam_final_loss"] = mla.log.epoch_loss.back();
    }
    nlohmann::json rounds = nlohmann::json::array();
    for (const RoundLog& r : fed.rounds)
        rounds.push_back({{"round", r.round}, {"lr", r.lr}, {"dice", r.client_train_dice}});
    out.log["rounds"] = std::move(rounds);
    return out;
}

std::vector<int> all_seen(int domains, int unseen) {
    std::vector<int> seen;
    for (int d = 0; d < domains; ++d)
        if (d != unseen) seen.push_back(d);
    return seen;
}

int method_depth(const ExperimentConfig& cfg, Method m) {
    return method_uses_bin(m) ? cfg.bin_depth : 0;
}

HarnessResult run_grid(const ExperimentConfig& cfg, const std::string& command,
                       const std::string& extra_name, const std::vector<CellSpec>& specs) {
    const auto t0 = std::chrono::steady_clock::now();
    HarnessResult result;
    result.command = command;
    result.extra_name = extra_name;

    // datasets are per seed, shared read-only across cells
    std::map<std::uint64_t, FederationDataset> datasets;
    for (const CellSpec& s : specs)
        if (!datasets.count(s.seed))
            datasets.emplace(s.seed, generate(cfg.domains, cfg.per_domain, cfg.image_size,
                                              s.seed, cfg.structures));

    std::vector<CellOutput> outputs(specs.size());
    const int workers = std::min<int>(cfg.threads, static_cast<int>(specs.size()));
    const bool parallel_clients = workers <= 1;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= specs.size()) return;
            try {
                outputs[i] = run_cell(cfg, datasets.at(specs[i].seed), specs[i],
                                      parallel_clients);
            } catch (const std::exception& e) {
                outputs[i].error = e.what();
            }
        }
    };
    if (workers > 1) {
        std::vector<std::thread> pool;
        for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    } else {
        worker();
    }

    // deterministic emission order = spec order
    result.csv = csv_header(extra_name);
    nlohmann::json cells = nlohmann::json::array();
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (!outputs[i].error.empty()) {
            result.errors.push_back("cell " + std::to_string(i) + " (seed " +
                                    std::to_string(specs[i].seed) + ", unseen " +
                                    std::to_string(specs[i].unseen) + "): " + outputs[i].error);
            continue;
        }
        for (const EvalReport& r : outputs[i].reports) {
            result.csv += r.to_csv(false, extra_name, specs[i].extra_value);
            result.reports.push_back(r);
            result.extra_values.push_back(specs[i].extra_value);
        }
        cells.push_back(outputs[i].log);
    }

    const auto t1 = std::chrono::steady_clock::now();
    result.manifest["command"] = command;
    result.manifest["config"] = cfg.to_json();
    result.manifest["extra_column"] = extra_name;
    nlohmann::json checksums;
    for (const auto& [seed, ds] : datasets) checksums[std::to_string(seed)] = ds.checksum();
    result.manifest["dataset_checksums"] = std::move(checksums);
    result.manifest["cells"] = std::move(cells);
    result.manifest["csv_crc32"] = crc32(result.csv.data(), result.csv.size());
    result.manifest["wall_clock_sec"] = std::chrono::duration<double>(t1 - t0).count();
    if (!result.errors.empty()) result.manifest["errors"] = result.errors;
    return result;
}

}  // namespace

HarnessResult run_loo(const ExperimentConfig& cfg) {
    cfg.validate();
    const Method m = cfg.run_method();
    std::vector<CellSpec> specs;
    for (std::uint64_t seed : cfg.seeds)
        for (int unseen = 0; unseen < cfg.domains; ++unseen)
            specs.push_back({seed, unseen, method_depth(cfg, m), cfg.block,
                             all_seen(cfg.domains, unseen), {m}, ""});
    return run_grid(cfg, "loo", "", specs);
}

HarnessResult run_ablate(const ExperimentConfig& cfg) {
    cfg.validate();
    std::vector<CellSpec> specs;
    for (std::uint64_t seed : cfg.seeds) {
        for (int unseen = 0; unseen < cfg.domains; ++unseen) {
            const auto seen = all_seen(cfg.domains, unseen);
            // plain net shared by the two non-BIN methods...
            specs.push_back({seed, unseen, 0, cfg.block, seen,
                             {Method::FedavgBaseline, Method::MlaOnly}, ""});
            // ...and the BIN net shared by the two BIN methods
            specs.push_back({seed, unseen, cfg.bin_depth, cfg.block, seen,
                             {Method::BinOnly, Method::MlaBin}, ""});
        }
    }
    return run_grid(cfg, "ablate", "", specs);
}

HarnessResult run_sweep_bin_depth(const ExperimentConfig& cfg) {
    cfg.validate();
    const Method m = cfg.run_method();
    std::vector<CellSpec> specs;
    for (std::uint64_t seed : cfg.seeds)
        for (int unseen = 0; unseen < cfg.domains; ++unseen)
            for (int depth = 0; depth <= cfg.levels; ++depth)
                specs.push_back({seed, unseen, method_uses_bin(m) ? depth : 0, cfg.block,
                                 all_seen(cfg.domains, unseen), {m}, std::to_string(depth)});
    return run_grid(cfg, "sweep-bin-depth", "depth", specs);
}

HarnessResult run_sweep_clients(const ExperimentConfig& cfg) {
    cfg.validate();
    const int unseen = cfg.sweep_unseen;
    const auto seen_all = all_seen(cfg.domains, unseen);
    const int k = static_cast<int>(seen_all.size());
    std::vector<CellSpec> specs;
    for (std::uint64_t seed : cfg.seeds) {
        for (int c = 1; c <= k; ++c) {
            // seed-deterministic subset: first c of a seeded shuffle, ascending
            Rng rng(Rng::derive(seed, {rng_tag::kSubset, static_cast<std::uint64_t>(c)}));
            const auto perm = rng.permutation(k);
            std::vector<int> seen;
            for (int i = 0; i < c; ++i)
                seen.push_back(seen_all[static_cast<std::size_t>(perm[i])]);
            std::sort(seen.begin(), seen.end());
            specs.push_back({seed, unseen, cfg.bin_depth, cfg.block, seen, {Method::MlaBin},
                             std::to_string(c)});
            specs.push_back({seed, unseen, 0, cfg.block, seen, {Method::FedavgBaseline},
                             std::to_string(c)});
        }
    }
    return run_grid(cfg, "sweep-clients", "clients", specs);
}

HarnessResult run_compare_ibn(const ExperimentConfig& cfg) {
    cfg.validate();
    std::vector<CellSpec> specs;
    for (std::uint64_t seed : cfg.seeds) {
        for (int unseen = 0; unseen < cfg.domains; ++unseen) {
            const auto seen = all_seen(cfg.domains, unseen);
            specs.push_back({seed, unseen, cfg.bin_depth, "bin", seen, {Method::MlaBin}, "bin"});
            specs.push_back({seed, unseen, cfg.bin_depth, "ibn", seen, {Method::MlaBin}, "ibn"});
        }
    }
    return run_grid(cfg, "compare-ibn", "block", specs);
}

HarnessResult run_eval_checkpoint(const ExperimentConfig& cfg,
                                  const std::filesystem::path& checkpoint) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    HarnessResult result;
    result.command = "eval";
    const ParamSet params = load_checkpoint(checkpoint);
    const NetConfig net_cfg = cfg.net_config();
    {
        SegNet shell = SegNet::build(net_cfg, 0);
        std::string why;
        if (!shell.snapshot().same_signature(params, &why))
            throw ConfigError("checkpoint does not match the configured net: " + why);
    }
    const FederationDataset ds = generate(cfg.domains, cfg.per_domain, cfg.image_size,
                                          cfg.seeds.front(), cfg.structures);
    auto model = [&](const Tensor& batch, int) {
        return aggregate_forward(net_cfg, params, batch);
    };
    EvalReport report =
        evaluate(model, ds, "checkpoint", /*unseen_domain=*/-1, cfg.seeds.front(),
                 {0.5, cfg.batch_size});
    result.csv = csv_header() + report.to_csv(false);
    result.reports.push_back(std::move(report));
    const auto t1 = std::chrono::steady_clock::now();
    result.manifest["command"] = "eval";
    result.manifest["config"] = cfg.to_json();
    result.manifest["checkpoint"] = checkpoint.string();
    result.manifest["csv_crc32"] = crc32(result.csv.data(), result.csv.size());
    result.manifest["wall_clock_sec"] = std::chrono::duration<double>(t1 - t0).count();
    return result;
}

HarnessResult run_command(const std::string& command, const ExperimentConfig& cfg) {
    if (command == "loo") return run_loo(cfg);
    if (command == "ablate") return run_ablate(cfg);
    if (command == "sweep-bin-depth") return run_sweep_bin_depth(cfg);
    if (command == "sweep-clients") return run_sweep_clients(cfg);
    if (command == "compare-ibn") return run_compare_ibn(cfg);
    throw ConfigError("unknown command '" + command + "'");
}

void write_outputs(const HarnessResult& result, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream f(out_dir / (result.command + ".csv"), std::ios::binary);
        if (!f) throw ConfigError("cannot write CSV under '" + out_dir.string() + "'");
        f << result.csv;
    }
    {
        std::ofstream f(out_dir / (result.command + "_manifest.json"));
        if (!f) throw ConfigError("cannot write manifest under '" + out_dir.string() + "'");
        f << result.manifest.dump(2) << "\n";
    }
}

bool rerun_matches_manifest(const std::filesystem::path& manifest_path, std::string* why) {
    std::ifstream f(manifest_path);
    if (!f) throw ConfigError("cannot open manifest '" + manifest_path.string() + "'");
    nlohmann::json manifest = nlohmann::json::parse(f);
    const ExperimentConfig cfg = ExperimentConfig::from_json(manifest.at("config"));
    const HarnessResult res = run_command(manifest.at("command"), cfg);
    if (!res.ok()) {
        if (why) *why = "re-run reported errors";
        return false;
    }
    const std::uint32_t crc = crc32(res.csv.data(), res.csv.size());
    if (crc != manifest.at("csv_crc32").get<std::uint32_t>()) {
        if (why)
            *why = "CSV checksum " + std::to_string(crc) + " != recorded " +
                   std::to_string(manifest.at("csv_crc32").get<std::uint32_t>());
        return false;
    }
    return true;
}

}  // namespace fedseg

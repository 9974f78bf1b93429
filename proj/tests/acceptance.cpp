// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criteria 5-7 share a single full-scale ablation grid and
// dominate the runtime.

#include "fedseg/config.hpp"
#include "fedseg/crc32.hpp"
#include "fedseg/fedsim.hpp"
#include "fedseg/gradcheck.hpp"
#include "fedseg/harness.hpp"
#include "fedseg/metrics.hpp"
#include "fedseg/rng.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <thread>

using namespace fedseg;

namespace {

int g_failures = 0;

void report(int number, const std::string& label, bool pass, const std::string& details,
            double seconds) {
    std::printf("criterion %2d (%s): %s  [%s; %.1f s]\n", number, label.c_str(),
                pass ? "PASS" : "FAIL", details.c_str(), seconds);
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

template <typename F>
void criterion(int number, const std::string& label, F&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = false;
    std::string details;
    try {
        pass = body(&details);
    } catch (const std::exception& e) {
        details = std::string("exception: ") + e.what();
    }
    const double sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report(number, label, pass, details, sec);
}

std::string fmt(double v, int prec = 2) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

Tensor random_batch(Rng& rng, std::int64_t n, std::int64_t size) {
    Tensor t({n, 1, size, size});
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(0.0, 1.0);
    return t;
}

// independent brute-force metric oracles (duplicated on purpose: these never
// touch the library implementations)
double oracle_dsc(const Tensor& a, const Tensor& b) {
    double inter = 0, sa = 0, sb = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        inter += a.data()[i] * b.data()[i];
        sa += a.data()[i];
        sb += b.data()[i];
    }
    if (sa + sb == 0) return 100.0;
    return 200.0 * inter / (sa + sb);
}

double oracle_asd(const Tensor& a, const Tensor& b) {
    const int h = static_cast<int>(a.dim(0)), w = static_cast<int>(a.dim(1));
    auto boundary = [&](const Tensor& m) {
        std::vector<std::pair<int, int>> out;
        auto at = [&](int y, int x) {
            if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
            return m.data()[y * w + x];
        };
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (at(y, x) == 1.0 && (at(y - 1, x) == 0.0 || at(y + 1, x) == 0.0 ||
                                        at(y, x - 1) == 0.0 || at(y, x + 1) == 0.0))
                    out.emplace_back(y, x);
        return out;
    };
    auto ba = boundary(a), bb = boundary(b);
    if (ba.empty() || bb.empty()) return -1.0;
    auto dir = [](const auto& from, const auto& to) {
        double s = 0;
        for (auto [fy, fx] : from) {
            double best = 1e300;
            for (auto [ty, tx] : to)
                best = std::min(best, std::hypot(double(fy - ty), double(fx - tx)));
            s += best;
        }
        return s / from.size();
    };
    return 0.5 * (dir(ba, bb) + dir(bb, ba));
}

// criteria 5-7 read the unseen/seen DSC means off the shared ablation grid
struct GridSummary {
    // [method][seed] -> mean unseen-domain DSC over the 4 held-out cells
    std::map<std::string, std::map<std::uint64_t, double>> unseen;
    double baseline_seen_dsc = 0.0;
    double wall_sec = 0.0;
    bool ok = false;
    std::string error;
};

GridSummary run_grid_for_criteria(const ExperimentConfig& cfg) {
    GridSummary g;
    const auto t0 = std::chrono::steady_clock::now();
    HarnessResult result = run_ablate(cfg);
    g.wall_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!result.ok()) {
        g.error = result.errors.front();
        return g;
    }
    std::map<std::string, std::map<std::uint64_t, std::pair<double, int>>> acc;
    double seen_sum = 0.0;
    int seen_n = 0;
    for (const EvalReport& rep : result.reports) {
        const EvalRow& unseen_row = rep.rows[static_cast<std::size_t>(rep.unseen_domain)];
        auto& cell = acc[rep.method][rep.seed];
        cell.first += unseen_row.dsc;
        cell.second += 1;
        if (rep.method == "fedavg-baseline") {
            for (const EvalRow& row : rep.rows) {
                if (row.domain == rep.unseen_domain) continue;
                seen_sum += row.dsc;
                ++seen_n;
            }
        }
    }
    for (auto& [method, by_seed] : acc)
        for (auto& [seed, cell] : by_seed)
            g.unseen[method][seed] = cell.first / cell.second;
    g.baseline_seen_dsc = seen_sum / seen_n;
    g.ok = true;

    // keep the grid on disk for inspection
    std::error_code ec;
    std::filesystem::create_directories("acceptance-results", ec);
    if (!ec) write_outputs(result, "acceptance-results");
    return g;
}

double mean_over_seeds(const std::map<std::uint64_t, double>& m) {
    double s = 0;
    for (const auto& [seed, v] : m) s += v;
    return s / static_cast<double>(m.size());
}

}  // namespace

int main() {
    ExperimentConfig cfg;  // the paper-shaped defaults
    cfg.threads = std::max(1u, std::thread::hardware_concurrency());

    criterion(1, "gradient checks", [&](std::string* details) {
        const auto results = run_gradcheck_suite(20, 2024, 1e-4);
        double worst = 0.0;
        bool pass = !results.empty();
        for (const auto& r : results) {
            worst = std::max(worst, r.max_rel_err);
            pass = pass && r.pass && r.checked_elements > 0;
        }
        *details = std::to_string(results.size()) + " ops, worst rel err " + fmt(worst, 10);
        return pass;
    });

    criterion(2, "aggregation algebra", [&](std::string* details) {
        bool pass = true;
        Rng rng(5);
        std::vector<ParamSet> models;
        for (int i = 0; i < 3; ++i) {
            ParamSet ps;
            Tensor a({6, 5}), b({17});
            for (std::int64_t j = 0; j < a.numel(); ++j) a.data()[j] = rng.uniform(-3, 3);
            for (std::int64_t j = 0; j < b.numel(); ++j) b.data()[j] = rng.uniform(-3, 3);
            ps.add("w", std::move(a));
            ps.add("b", std::move(b));
            models.push_back(std::move(ps));
        }
        // one-hot identity, bitwise
        pass = pass && aggregate(models, AggWeights::one_hot(3, 2)).bitwise_equal(models[2]);
        // convex envelope
        ParamSet mix = aggregate(models, AggWeights::from(Eigen::Vector3d(0.2, 0.45, 0.35)));
        for (std::size_t p = 0; p < mix.size() && pass; ++p) {
            for (std::int64_t i = 0; i < mix.items()[p].second.numel(); ++i) {
                double lo = 1e300, hi = -1e300;
                for (const auto& m : models) {
                    lo = std::min(lo, m.items()[p].second.data()[i]);
                    hi = std::max(hi, m.items()[p].second.data()[i]);
                }
                const double v = mix.items()[p].second.data()[i];
                if (v < lo - 1e-12 || v > hi + 1e-12) {
                    pass = false;
                    break;
                }
            }
        }
        // linearity within 1e-12
        Eigen::Vector3d u(0.6, 0.15, 0.25), v(0.05, 0.8, 0.15);
        const double alpha = 0.4;
        ParamSet lhs = aggregate(models, AggWeights::from(alpha * u + (1 - alpha) * v));
        ParamSet pa = aggregate(models, AggWeights::from(u));
        ParamSet pb = aggregate(models, AggWeights::from(v));
        double worst = 0.0;
        for (std::size_t p = 0; p < lhs.size(); ++p)
            for (std::int64_t i = 0; i < lhs.items()[p].second.numel(); ++i)
                worst = std::max(worst,
                                 std::abs(lhs.items()[p].second.data()[i] -
                                          (alpha * pa.items()[p].second.data()[i] +
                                           (1 - alpha) * pb.items()[p].second.data()[i])));
        pass = pass && worst <= 1e-12;
        // paper case ratios, exact
        AggWeights w = fedavg_weights(std::vector<std::int64_t>{30, 30, 19, 13, 12, 12});
        pass = pass && w[0] == 30.0 / 116.0 && w[1] == 30.0 / 116.0 && w[2] == 19.0 / 116.0 &&
               w[3] == 13.0 / 116.0 && w[4] == 12.0 / 116.0 && w[5] == 12.0 / 116.0;
        *details = "one-hot bitwise, envelope, linearity dev " + fmt(worst, 16) +
                   ", 30:30:19:13:12:12 ratios exact";
        return pass;
    });

    criterion(3, "style invariance", [&](std::string* details) {
        NetConfig net_cfg = cfg.net_config();  // levels 5, bin_depth 3
        SegNet net = SegNet::build(net_cfg, 404);
        Rng rng(405);
        (void)net.forward(random_batch(rng, 2, cfg.image_size), true);
        Tensor x = random_batch(rng, 1, cfg.image_size);
        Tensor ref = net.forward(x, false);
        double worst = 0.0;
        for (int rep = 0; rep < 100; ++rep) {
            const double a = rng.uniform(0.3, 3.0), b = rng.uniform(-1.0, 1.0);
            Tensor xs(x.shape());
            xs.array() = a * x.array() + b;
            worst = std::max(worst, (net.forward(xs, false).array() - ref.array())
                                        .abs()
                                        .maxCoeff());
        }
        NetConfig plain_cfg = cfg.net_config(0);
        SegNet plain = SegNet::build(plain_cfg, 404);
        Rng rng2(405);
        (void)plain.forward(random_batch(rng2, 2, cfg.image_size), true);
        Tensor x2 = random_batch(rng2, 1, cfg.image_size);
        Tensor ref2 = plain.forward(x2, false);
        double control = 0.0;
        for (int rep = 0; rep < 100; ++rep) {
            const double a = rng2.uniform(0.3, 3.0), b = rng2.uniform(-1.0, 1.0);
            Tensor xs(x2.shape());
            xs.array() = a * x2.array() + b;
            control = std::max(control, (plain.forward(xs, false).array() - ref2.array())
                                            .abs()
                                            .maxCoeff());
        }
        *details = "bin_depth 3 max dev " + fmt(worst, 10) + " (< 1e-6), bin_depth 0 control " +
                   fmt(control, 6) + " (> 1e-3)";
        return worst < 1e-6 && control > 1e-3;
    });

    criterion(4, "DAM training accuracy", [&](std::string* details) {
        FederationDataset ds =
            generate(cfg.domains, cfg.per_domain, cfg.image_size, /*seed=*/1, cfg.structures);
        FeatureExtractor fx =
            FeatureExtractor::build(cfg.extractor_config(), Rng::derive(1, {rng_tag::kExtractor}));
        std::vector<std::vector<Tensor>> images(static_cast<std::size_t>(cfg.domains));
        for (int d = 0; d < cfg.domains; ++d)
            for (const auto& s : ds.train[static_cast<std::size_t>(d)])
                images[static_cast<std::size_t>(d)].push_back(s.image);
        DomainFeatureBank bank = build_bank(images, fx);

        Dam dam = Dam::init(fx.feature_dim(), cfg.domains, 11, cfg.dam_hidden);
        DamTrainResult trained = train_dam(dam, bank, cfg.dam_epochs, cfg.dam_lr, 12,
                                           cfg.batch_size);

        DomainFeatureBank shuffled = bank;
        Rng rng(13);
        const auto perm = rng.permutation(static_cast<std::int64_t>(shuffled.rows.size()));
        for (std::size_t i = 0; i < shuffled.rows.size(); ++i)
            shuffled.rows[i].domain = bank.rows[static_cast<std::size_t>(perm[i])].domain;
        Dam dam2 = Dam::init(fx.feature_dim(), cfg.domains, 14, cfg.dam_hidden);
        DamTrainResult chance = train_dam(dam2, shuffled, cfg.dam_epochs, cfg.dam_lr, 15,
                                          cfg.batch_size);

        *details = "bank accuracy " + fmt(100 * trained.train_accuracy, 1) +
                   "% (need >= 95), shuffled " + fmt(100 * chance.train_accuracy, 1) +
                   "% (need 25 +/- 10)";
        return trained.train_accuracy >= 0.95 && chance.train_accuracy >= 0.15 &&
               chance.train_accuracy <= 0.35;
    });

    criterion(8, "metric oracles", [&](std::string* details) {
        Rng rng(71);
        bool pass = true;
        double worst_asd = 0.0;
        int asd_cases = 0;
        for (int rep = 0; rep < 50; ++rep) {
            Tensor a({9, 9}), b({9, 9});
            for (std::int64_t i = 0; i < 81; ++i) {
                a.data()[i] = rng.uniform() < 0.35 ? 1.0 : 0.0;
                b.data()[i] = rng.uniform() < 0.35 ? 1.0 : 0.0;
            }
            pass = pass && dsc_percent(a, b) == oracle_dsc(a, b);
            const double expected = oracle_asd(a, b);
            if (expected >= 0.0) {
                const double got = asd_pixels(a, b);
                worst_asd = std::max(worst_asd, std::abs(got - expected));
                ++asd_cases;
            }
        }
        pass = pass && worst_asd <= 1e-9 && asd_cases >= 40;
        // hand examples
        Tensor p({4, 4}), g({4, 4});
        p.data()[0] = p.data()[1] = p.data()[2] = p.data()[3] = 1.0;
        g.data()[0] = g.data()[1] = g.data()[8] = g.data()[9] = 1.0;
        pass = pass && dsc_percent(p, g) == 50.0;
        Tensor q1 = Tensor::zeros({8, 8}), q2 = Tensor::zeros({8, 8});
        q1.data()[0] = 1.0;
        q2.data()[3 * 8 + 4] = 1.0;
        pass = pass && asd_pixels(q1, q2) == 5.0;
        *details = std::to_string(asd_cases) + " asd cases, worst |diff| " + fmt(worst_asd, 12) +
                   "; hand examples exact";
        return pass;
    });

    criterion(9, "reproducibility across runs and thread counts", [&](std::string* details) {
        ExperimentConfig small = ExperimentConfig::from_file(
            std::filesystem::path(FEDSEG_SOURCE_DIR) / "configs" / "smoke.cfg");
        small.threads = 1;
        HarnessResult a = run_loo(small);
        HarnessResult b = run_loo(small);
        ExperimentConfig threaded = small;
        threaded.threads = 4;
        HarnessResult c = run_loo(threaded);
        const bool pass = a.ok() && b.ok() && c.ok() && a.csv == b.csv && a.csv == c.csv;
        *details = "CSV bytes " + std::to_string(a.csv.size()) +
                   ", rerun equal: " + (a.csv == b.csv ? "yes" : "no") +
                   ", threads 1 vs 4 equal: " + (a.csv == c.csv ? "yes" : "no");
        return pass;
    });

    criterion(10, "serialization round trips and corruption rejection", [&](std::string* details) {
        namespace fs = std::filesystem;
        bool pass = true;
        std::string note;
        const fs::path ckpt = fs::temp_directory_path() / "fedseg_acc.mlbn";
        ParamSet ps = SegNet::build(cfg.net_config(), 5).snapshot();
        save_checkpoint(ps, ckpt);
        pass = pass && load_checkpoint(ckpt).bitwise_equal(ps);
        {
            std::fstream f(ckpt, std::ios::in | std::ios::out | std::ios::binary);
            f.seekp(64);
            const char junk = 'J';
            f.write(&junk, 1);
        }
        try {
            (void)load_checkpoint(ckpt);
            pass = false;
            note += "corrupt checkpoint accepted; ";
        } catch (const TensorError& e) {
            if (std::string(e.what()).find("checksum") == std::string::npos) {
                pass = false;
                note += "checkpoint diagnostic lacks field name; ";
            }
        }
        fs::remove(ckpt);

        const fs::path bankp = fs::temp_directory_path() / "fedseg_acc.mlab";
        DomainFeatureBank bank;
        bank.k = 3;
        bank.feature_dim = 8;
        Rng rng(3);
        for (int d = 0; d < 3; ++d)
            for (int i = 0; i < 4; ++i) {
                Eigen::VectorXd v(8);
                for (int j = 0; j < 8; ++j) v[j] = rng.uniform(-1, 1);
                bank.rows.push_back({static_cast<std::uint32_t>(d), v});
            }
        bank.save(bankp);
        pass = pass && DomainFeatureBank::load(bankp).bitwise_equal(bank);
        {
            std::fstream f(bankp, std::ios::in | std::ios::out | std::ios::binary);
            f.seekp(4);  // version field
            const char nine = 9;
            f.write(&nine, 1);
        }
        try {
            (void)DomainFeatureBank::load(bankp);
            pass = false;
            note += "corrupt bank accepted; ";
        } catch (const TensorError& e) {
            if (std::string(e.what()).find("version") == std::string::npos) {
                pass = false;
                note += "bank diagnostic lacks field name; ";
            }
        }
        fs::remove(bankp);
        *details = note.empty() ? "checkpoint and bank round trip bit-exactly, corruption named"
                                : note;
        return pass;
    });

    // ---- the shared full-scale grid for criteria 5, 6, 7 ----
    std::printf("running the full ablation grid (%d seeds x %d unseen domains x 2 nets, "
                "%d rounds each; %d worker threads)...\n",
                static_cast<int>(cfg.seeds.size()), cfg.domains, cfg.rounds, cfg.threads);
    std::fflush(stdout);
    GridSummary grid = run_grid_for_criteria(cfg);

    criterion(5, "directional gain of MLA-BIN over FedAvg", [&](std::string* details) {
        if (!grid.ok) {
            *details = grid.error;
            return false;
        }
        int wins = 0;
        double gap = 0.0;
        std::string per_seed;
        for (const auto& [seed, mla_bin] : grid.unseen.at("mla-bin")) {
            const double base = grid.unseen.at("fedavg-baseline").at(seed);
            wins += mla_bin >= base;
            gap += mla_bin - base;
            per_seed += " s" + std::to_string(seed) + ":" + fmt(mla_bin - base, 2);
        }
        const int seeds = static_cast<int>(grid.unseen.at("mla-bin").size());
        gap /= seeds;
        *details = "wins " + std::to_string(wins) + "/" + std::to_string(seeds) +
                   " (need >= 4), mean gap " + fmt(gap, 2) + " DSC (need > 0);" + per_seed +
                   "; grid " + fmt(grid.wall_sec / 60.0, 1) + " min (target < 45 on 4 cores)";
        return wins >= 4 && gap > 0.0;
    });

    criterion(6, "component ablation shape", [&](std::string* details) {
        if (!grid.ok) {
            *details = grid.error;
            return false;
        }
        const double base = mean_over_seeds(grid.unseen.at("fedavg-baseline"));
        const double mla = mean_over_seeds(grid.unseen.at("mla-only"));
        const double bin = mean_over_seeds(grid.unseen.at("bin-only"));
        const double both = mean_over_seeds(grid.unseen.at("mla-bin"));
        *details = "unseen DSC: baseline " + fmt(base, 2) + ", mla " + fmt(mla, 2) + ", bin " +
                   fmt(bin, 2) + ", mla+bin " + fmt(both, 2);
        return mla >= base && bin >= base && both >= std::max(mla, bin) - 1.0;
    });

    criterion(7, "seen-domain competence of the FedAvg baseline", [&](std::string* details) {
        if (!grid.ok) {
            *details = grid.error;
            return false;
        }
        *details = "mean seen-domain test DSC " + fmt(grid.baseline_seen_dsc, 2) +
                   " (need >= 85)";
        return grid.baseline_seen_dsc >= 85.0;
    });

    std::printf("acceptance: %d criterion(s) failed\n", g_failures);
    return g_failures == 0 ? 0 : 1;
}

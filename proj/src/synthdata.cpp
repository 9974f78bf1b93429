#include "fedseg/synthdata.hpp"

#include "fedseg/crc32.hpp"
#include "fedseg/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

namespace fedseg {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Ellipse {
    double cx, cy, rx, ry, rot, amp, phase;
    int lobes;
};

struct Content {
    std::vector<double> field;  // (H*W) image before styling, in [0, 1]
    std::vector<double> outer;  // binary
    std::vector<double> inner;  // binary, subset of outer (two-structure mode)
};

// normalized elliptic radius and angle of (x, y) relative to e
inline double elliptic_radius(const Ellipse& e, double x, double y, double* theta) {
    const double dx = x - e.cx, dy = y - e.cy;
    const double c = std::cos(e.rot), s = std::sin(e.rot);
    const double u = (c * dx + s * dy) / e.rx;
    const double v = (-s * dx + c * dy) / e.ry;
    *theta = std::atan2(v, u);
    return std::sqrt(u * u + v * v);
}

Content make_content(Rng& rng, int size, int structures) {
    const int h = size, w = size;
    const int max_tries = 100;
    for (int attempt = 0; attempt < max_tries; ++attempt) {
        const int n_ell = static_cast<int>(rng.uniform_int(2, 4));
        std::vector<Ellipse> ells;
        double cx0 = rng.uniform(0.35, 0.65) * w;
        double cy0 = rng.uniform(0.35, 0.65) * h;
        for (int i = 0; i < n_ell; ++i) {
            Ellipse e;
            if (i == 0) {
                e.cx = cx0;
                e.cy = cy0;
                e.rx = rng.uniform(0.14, 0.26) * w;
                e.ry = rng.uniform(0.14, 0.26) * h;
            } else {
                e.cx = cx0 + rng.uniform(-0.15, 0.15) * w;
                e.cy = cy0 + rng.uniform(-0.15, 0.15) * h;
                e.rx = rng.uniform(0.08, 0.18) * w;
                e.ry = rng.uniform(0.08, 0.18) * h;
            }
            e.rot = rng.uniform(0.0, std::numbers::pi);
            e.amp = rng.uniform(0.05, 0.20);
            e.lobes = static_cast<int>(rng.uniform_int(3, 6));
            e.phase = rng.uniform(0.0, kTwoPi);
            ells.push_back(e);
        }
        const double om1 = static_cast<double>(rng.uniform_int(1, 3));
        const double om2 = static_cast<double>(rng.uniform_int(1, 3));
        const double p1 = rng.uniform(), p2 = rng.uniform();

        Content c;
        c.field.assign(static_cast<std::size_t>(h * w), 0.0);
        c.outer.assign(static_cast<std::size_t>(h * w), 0.0);
        c.inner.assign(static_cast<std::size_t>(h * w), 0.0);
        std::int64_t fg = 0, bg = 0, inner_fg = 0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const std::size_t idx = static_cast<std::size_t>(y * w + x);
                bool in_outer = false, in_inner = false;
                for (const Ellipse& e : ells) {
                    double theta;
                    const double r = elliptic_radius(e, x + 0.5, y + 0.5, &theta);
                    const double edge = 1.0 + e.amp * std::sin(e.lobes * theta + e.phase);
                    if (r <= edge) in_outer = true;
                    if (r <= 0.5 * edge) in_inner = true;
                    if (in_outer && in_inner) break;
                }
                const double tex =
                    0.06 * std::sin(kTwoPi * (om1 * x / w + p1)) *
                    std::sin(kTwoPi * (om2 * y / h + p2));
                double v = 0.22 + tex;
                if (in_outer) v += 0.56;
                if (structures == 2 && in_inner) v += 0.12;
                c.field[idx] = v;
                c.outer[idx] = in_outer ? 1.0 : 0.0;
                c.inner[idx] = in_inner ? 1.0 : 0.0;
                fg += in_outer;
                bg += !in_outer;
                inner_fg += in_inner;
            }
        }
        const bool ok = fg > 0 && bg > 0 && (structures != 2 || (inner_fg > 0 && inner_fg < fg));
        if (ok) return c;
    }
    throw TensorError("synthdata: failed to draw a non-degenerate blob after " +
                      std::to_string(max_tries) + " tries");
}

Tensor apply_style(const Content& c, const DomainStyle& st, int domain, int size, Rng& noise_rng) {
    const int h = size, w = size;
    Tensor img({1, h, w});
    double* out = img.data();

    // identity components are skipped so the canonical domain reproduces the
    // content bit for bit
    for (std::size_t i = 0; i < c.field.size(); ++i) {
        double v = c.field[i];
        if (st.gamma != 1.0) v = std::pow(v, st.gamma);
        if (st.scale != 1.0 || st.offset != 0.0) v = st.scale * v + st.offset;
        out[i] = v;
    }
    if (st.texture_freq > 0) {
        const double f = st.texture_freq;
        const double p1 = std::fmod(0.37 * domain, 1.0), p2 = std::fmod(0.61 * domain, 1.0);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const std::size_t i = static_cast<std::size_t>(y * w + x);
                if (c.outer[i] == 0.0)
                    out[i] += 0.08 * std::sin(kTwoPi * (f * x / w + p1)) *
                              std::sin(kTwoPi * (f * y / h + p2));
            }
    }
    if (st.noise_sigma > 0.0)
        for (std::size_t i = 0; i < c.field.size(); ++i)
            out[i] += noise_rng.normal(0.0, st.noise_sigma);
    return img;
}

void validate_style(const DomainStyle& s, int idx) {
    if (s.scale < 0.3 || s.scale > 3.0)
        throw TensorError("DomainStyle " + std::to_string(idx) + ": scale out of [0.3, 3]");
    if (s.gamma < 0.5 || s.gamma > 2.0)
        throw TensorError("DomainStyle " + std::to_string(idx) + ": gamma out of [0.5, 2]");
    if (s.noise_sigma < 0.0 || s.noise_sigma > 0.1)
        throw TensorError("DomainStyle " + std::to_string(idx) + ": noise sigma out of [0, 0.1]");
}

}  // namespace

std::vector<DomainStyle> default_styles(int k_plus_1) {
    static const std::vector<DomainStyle> table = {
        {1.00, 0.00, 1.00, 0, 0.000},
        {1.55, 0.22, 0.80, 3, 0.020},
        {0.62, -0.10, 1.45, 5, 0.035},
        {2.10, 0.45, 1.15, 7, 0.015},
        {0.45, 1.30, 0.60, 2, 0.050},
        {1.25, -0.35, 1.80, 9, 0.030},
        {2.80, 0.65, 0.90, 4, 0.060},
        {0.80, 1.10, 1.30, 6, 0.080},
    };
    if (k_plus_1 < 1 || k_plus_1 > static_cast<int>(table.size()))
        throw TensorError("default_styles: supports 1.." + std::to_string(table.size()) +
                          " domains, asked for " + std::to_string(k_plus_1));
    return {table.begin(), table.begin() + k_plus_1};
}

FederationDataset generate(int domains, int per_domain, int image_size, std::uint64_t seed,
                           int structures, const std::vector<DomainStyle>* styles) {
    if (domains < 3) throw TensorError("generate: need at least 3 domains (k+1 >= 3)");
    if (per_domain < 20) throw TensorError("generate: need at least 20 samples per domain");
    if (image_size < 8) throw TensorError("generate: image size too small");
    if (structures != 1 && structures != 2)
        throw TensorError("generate: structures must be 1 or 2");

    FederationDataset ds;
    ds.domains = domains;
    ds.image_size = image_size;
    ds.structures = structures;
    ds.seed = seed;
    ds.styles = styles ? *styles : default_styles(domains);
    if (static_cast<int>(ds.styles.size()) != domains)
        throw TensorError("generate: got " + std::to_string(ds.styles.size()) + " styles for " +
                          std::to_string(domains) + " domains");
    for (int d = 0; d < domains; ++d) validate_style(ds.styles[static_cast<std::size_t>(d)], d);

    const int test_count = per_domain / 4;
    const int train_count = per_domain - test_count;
    ds.train.resize(static_cast<std::size_t>(domains));
    ds.test.resize(static_cast<std::size_t>(domains));

    const std::int64_t hw = static_cast<std::int64_t>(image_size) * image_size;
    for (int t = 0; t < per_domain; ++t) {
        Rng content_rng(Rng::derive(seed, {rng_tag::kContent, static_cast<std::uint64_t>(t)}));
        Content content = make_content(content_rng, image_size, structures);

        Tensor mask({structures, image_size, image_size});
        std::copy(content.outer.begin(), content.outer.end(), mask.data());
        if (structures == 2)
            std::copy(content.inner.begin(), content.inner.end(), mask.data() + hw);

        for (int d = 0; d < domains; ++d) {
            Rng noise_rng(Rng::derive(
                seed, {rng_tag::kNoise, static_cast<std::uint64_t>(d),
                       static_cast<std::uint64_t>(t)}));
            SegSample sample;
            sample.image = apply_style(content, ds.styles[static_cast<std::size_t>(d)], d,
                                       image_size, noise_rng);
            sample.mask = mask.clone();
            sample.domain = d;
            auto& dest = t < train_count ? ds.train[static_cast<std::size_t>(d)]
                                         : ds.test[static_cast<std::size_t>(d)];
            dest.push_back(std::move(sample));
        }
    }
    return ds;
}

std::uint32_t FederationDataset::checksum() const {
    std::uint32_t crc = 0;
    auto feed = [&](const std::vector<std::vector<SegSample>>& sets) {
        for (const auto& samples : sets)
            for (const auto& s : samples) {
                crc = crc32(s.image.data(),
                            sizeof(double) * static_cast<std::size_t>(s.image.numel()), crc);
                crc = crc32(s.mask.data(),
                            sizeof(double) * static_cast<std::size_t>(s.mask.numel()), crc);
            }
    };
    feed(train);
    feed(test);
    return crc;
}

void export_dataset(const FederationDataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    auto write_raw = [](const fs::path& p, const Tensor& t) {
        std::ofstream f(p, std::ios::binary);
        if (!f) throw TensorError("export_dataset: cannot write " + p.string());
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(sizeof(double) * t.numel()));
    };
    char name[64];
    for (int d = 0; d < ds.domains; ++d) {
        const fs::path ddir = dir / ("domain_" + std::to_string(d));
        fs::create_directories(ddir);
        const auto& tr = ds.train[static_cast<std::size_t>(d)];
        const auto& te = ds.test[static_cast<std::size_t>(d)];
        for (std::size_t i = 0; i < tr.size(); ++i) {
            std::snprintf(name, sizeof(name), "train_%03zu", i);
            write_raw(ddir / (std::string(name) + ".img"), tr[i].image);
            write_raw(ddir / (std::string(name) + ".msk"), tr[i].mask);
        }
        for (std::size_t i = 0; i < te.size(); ++i) {
            std::snprintf(name, sizeof(name), "test_%03zu", i);
            write_raw(ddir / (std::string(name) + ".img"), te[i].image);
            write_raw(ddir / (std::string(name) + ".msk"), te[i].mask);
        }
    }

    nlohmann::json manifest;
    manifest["image_size"] = ds.image_size;
    manifest["domains"] = ds.domains;
    manifest["structures"] = ds.structures;
    manifest["seed"] = ds.seed;
    manifest["train_per_domain"] = ds.train.empty() ? 0 : ds.train[0].size();
    manifest["test_per_domain"] = ds.test.empty() ? 0 : ds.test[0].size();
    manifest["dtype"] = "float64";
    manifest["byte_order"] = "little";
    manifest["image_shape"] = {1, ds.image_size, ds.image_size};
    manifest["mask_shape"] = {ds.structures, ds.image_size, ds.image_size};
    manifest["checksum"] = ds.checksum();
    for (const auto& s : ds.styles)
        manifest["styles"].push_back({{"scale", s.scale},
                                      {"offset", s.offset},
                                      {"gamma", s.gamma},
                                      {"texture_freq", s.texture_freq},
                                      {"noise_sigma", s.noise_sigma}});
    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

}  // namespace fedseg

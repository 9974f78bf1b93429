#include "fedseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace fedseg {

namespace {

void require_binary_2d(const Tensor& m, const char* what) {
    if (m.rank() != 2)
        throw MetricError(std::string(what) + " must be a rank-2 mask, got " +
                          shape_str(m.shape()));
    const auto& a = m.array();
    if (((a != 0.0) && (a != 1.0)).any())
        throw MetricError(std::string(what) + " must be exactly binary");
}

}  // namespace

double dsc_percent(const Tensor& pred_mask, const Tensor& true_mask) {
    require_binary_2d(pred_mask, "dsc: prediction");
    require_binary_2d(true_mask, "dsc: ground truth");
    if (!pred_mask.same_shape(true_mask))
        throw MetricError("dsc: shape mismatch " + shape_str(pred_mask.shape()) + " vs " +
                          shape_str(true_mask.shape()));
    const double inter = (pred_mask.array() * true_mask.array()).sum();
    const double total = pred_mask.array().sum() + true_mask.array().sum();
    if (total == 0.0) return 100.0;  // both empty: vacuous perfect agreement
    return 100.0 * 2.0 * inter / total;
}

std::vector<std::pair<int, int>> mask_boundary(const Tensor& mask) {
    require_binary_2d(mask, "boundary: mask");
    const int h = static_cast<int>(mask.dim(0)), w = static_cast<int>(mask.dim(1));
    const double* m = mask.data();
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (m[y * w + x] != 1.0) continue;
            const bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
            if (edge || m[(y - 1) * w + x] == 0.0 || m[(y + 1) * w + x] == 0.0 ||
                m[y * w + x - 1] == 0.0 || m[y * w + x + 1] == 0.0)
                out.emplace_back(y, x);
        }
    }
    return out;
}

double asd_pixels(const Tensor& pred_mask, const Tensor& true_mask) {
    if (!pred_mask.same_shape(true_mask))
        throw MetricError("asd: shape mismatch " + shape_str(pred_mask.shape()) + " vs " +
                          shape_str(true_mask.shape()));
    const auto a = mask_boundary(pred_mask);
    const auto b = mask_boundary(true_mask);
    if (a.empty()) throw MetricError("asd: prediction has an empty boundary");
    if (b.empty()) throw MetricError("asd: ground truth has an empty boundary");

    auto directed = [](const std::vector<std::pair<int, int>>& from,
                       const std::vector<std::pair<int, int>>& to) {
        double total = 0.0;
        for (const auto& [fy, fx] : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& [ty, tx] : to) {
                const double dy = fy - ty, dx = fx - tx;
                best = std::min(best, dy * dy + dx * dx);
            }
            total += std::sqrt(best);
        }
        return total / static_cast<double>(from.size());
    };
    return 0.5 * (directed(a, b) + directed(b, a));
}

EvalRow EvalReport::average() const {
    EvalRow avg;
    avg.domain = -1;
    if (rows.empty()) return avg;
    double dsc_sum = 0.0, asd_sum = 0.0;
    std::int64_t asd_n = 0;
    for (const auto& r : rows) {
        dsc_sum += r.dsc;
        if (r.asd) {
            asd_sum += *r.asd;
            ++asd_n;
        }
        avg.asd_excluded += r.asd_excluded;
    }
    avg.dsc = dsc_sum / static_cast<double>(rows.size());
    if (asd_n > 0) avg.asd = asd_sum / static_cast<double>(asd_n);
    return avg;
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string row_line(const std::string& method, int unseen, const std::string& domain,
                     const EvalRow& r, std::uint64_t seed, const std::string& extra_value) {
    std::string line = method + "," + std::to_string(unseen) + "," + domain + "," +
                       fmt_double(r.dsc) + "," + (r.asd ? fmt_double(*r.asd) : "nan") + "," +
                       std::to_string(seed);
    if (!extra_value.empty()) line += "," + extra_value;
    return line + "\n";
}

}  // namespace

std::string csv_header(const std::string& extra_name) {
    std::string h = "method,unseen_domain,domain,dsc,asd,seed";
    if (!extra_name.empty()) h += "," + extra_name;
    return h + "\n";
}

std::string EvalReport::to_csv(bool header, const std::string& extra_name,
                               const std::string& extra_value) const {
    std::string out;
    if (header) out += csv_header(extra_name);
    for (const auto& r : rows)
        out += row_line(method, unseen_domain, std::to_string(r.domain), r, seed, extra_value);
    out += row_line(method, unseen_domain, "avg", average(), seed, extra_value);
    return out;
}

EvalReport evaluate(const ModelFn& model, const FederationDataset& ds, const std::string& method,
                    int unseen_domain, std::uint64_t seed, const EvalOptions& opts) {
    EvalReport report;
    report.method = method;
    report.unseen_domain = unseen_domain;
    report.seed = seed;

    const std::int64_t hw = static_cast<std::int64_t>(ds.image_size) * ds.image_size;
    for (int d = 0; d < ds.domains; ++d) {
        const auto& samples = ds.test[static_cast<std::size_t>(d)];
        if (samples.empty()) throw MetricError("evaluate: empty test set for domain " +
                                               std::to_string(d));
        EvalRow row;
        row.domain = d;
        double dsc_sum = 0.0, asd_sum = 0.0;
        std::int64_t asd_n = 0;
        for (std::size_t start = 0; start < samples.size();
             start += static_cast<std::size_t>(opts.batch_size)) {
            const std::size_t count =
                std::min(samples.size() - start, static_cast<std::size_t>(opts.batch_size));
            Tensor batch({static_cast<std::int64_t>(count), 1, ds.image_size, ds.image_size});
            for (std::size_t i = 0; i < count; ++i)
                std::copy_n(samples[start + i].image.data(), hw, batch.data() + i * hw);
            NoGradGuard ng;
            Tensor probs = model(batch, d);
            if (probs.rank() != 4 || probs.dim(0) != static_cast<std::int64_t>(count) ||
                probs.dim(1) != ds.structures || probs.dim(2) != ds.image_size ||
                probs.dim(3) != ds.image_size)
                throw MetricError("evaluate: model output " + shape_str(probs.shape()) +
                                  " does not match expected mask shape");
            for (std::size_t i = 0; i < count; ++i) {
                double sample_dsc = 0.0;
                bool sample_asd_ok = true;
                double sample_asd = 0.0;
                for (int s = 0; s < ds.structures; ++s) {
                    Tensor pred({ds.image_size, ds.image_size});
                    const double* src = probs.data() + (i * ds.structures + s) * hw;
                    for (std::int64_t j = 0; j < hw; ++j)
                        pred.data()[j] = src[j] >= opts.threshold ? 1.0 : 0.0;
                    Tensor truth({ds.image_size, ds.image_size});
                    std::copy_n(samples[start + i].mask.data() + s * hw, hw, truth.data());
                    sample_dsc += dsc_percent(pred, truth);
                    try {
                        sample_asd += asd_pixels(pred, truth);
                    } catch (const MetricError&) {
                        sample_asd_ok = false;
                    }
                }
                dsc_sum += sample_dsc / ds.structures;
                if (sample_asd_ok) {
                    asd_sum += sample_asd / ds.structures;
                    ++asd_n;
                } else {
                    ++row.asd_excluded;
                }
            }
        }
        row.dsc = dsc_sum / static_cast<double>(samples.size());
        if (asd_n > 0) row.asd = asd_sum / static_cast<double>(asd_n);
        report.rows.push_back(row);
    }
    return report;
}

}  // namespace fedseg

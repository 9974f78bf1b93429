#pragma once

#include "fedseg/synthdata.hpp"
#include "fedseg/tensor.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace fedseg {

class MetricError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dice similarity coefficient in percent on exactly-binary (H, W) masks.
// Both masks empty counts as perfect (100) vacuous agreement.
double dsc_percent(const Tensor& pred_mask, const Tensor& true_mask);

// Average surface distance in pixels: the symmetric mean of the two
// directed average nearest-boundary distances, computed by exhaustive
// boundary-pair search. Boundary pixels are foreground pixels with a
// 4-neighbour background, the image border counting as background.
// Throws MetricError if either mask has an empty boundary.
double asd_pixels(const Tensor& pred_mask, const Tensor& true_mask);

// boundary extraction exposed for tests
std::vector<std::pair<int, int>> mask_boundary(const Tensor& mask);

struct EvalRow {
    int domain = -1;
    double dsc = 0.0;                 // mean over samples (and structures)
    std::optional<double> asd;        // absent if every sample was excluded
    std::int64_t asd_excluded = 0;    // samples without a valid surface distance
};

struct EvalReport {
    std::string method;
    int unseen_domain = -1;
    std::uint64_t seed = 0;
    std::vector<EvalRow> rows;  // one per evaluated domain

    EvalRow average() const;
    // rows in the schema: method,unseen_domain,domain,dsc,asd,seed followed
    // by an "avg" row; extra_* adds a fixed trailing column to every line
    std::string to_csv(bool header, const std::string& extra_name = "",
                       const std::string& extra_value = "") const;
};

std::string csv_header(const std::string& extra_name = "");

struct EvalOptions {
    double threshold = 0.5;
    int batch_size = 8;
};

// Evaluates `model` (a batch of images plus the domain it came from ->
// per-pixel probabilities) on every domain's test split. Deterministic;
// samples with an empty predicted or true boundary contribute to dsc but
// are excluded (and counted) for asd.
using ModelFn = std::function<Tensor(const Tensor& batch, int domain)>;
EvalReport evaluate(const ModelFn& model, const FederationDataset& ds, const std::string& method,
                    int unseen_domain, std::uint64_t seed, const EvalOptions& opts = {});

}  // namespace fedseg

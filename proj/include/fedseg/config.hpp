#pragma once

#include "fedseg/fedsim.hpp"
#include "fedseg/segnet.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fedseg {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Method { FedavgBaseline, MlaOnly, BinOnly, MlaBin };
const char* method_name(Method m);
Method method_from_string(const std::string& s);

// Full experiment configuration; defaults are the desk-scale paper-shaped
// run. Parsed from an INI-style file of [section] key = value lines where
// unknown sections or keys are rejected.
struct ExperimentConfig {
    // [dataset]
    int domains = 4;
    int per_domain = 80;  // quarter goes to the test split
    int image_size = 64;
    int structures = 1;

    // [net]
    int levels = 5;
    int base_channels = 8;
    int bin_depth = 3;
    std::string block = "bin";  // bin | ibn | plain

    // [federation]
    int rounds = 60;
    int epochs_per_round = 1;
    int batch_size = 8;
    double lr = 0.01;
    int lr_step = 100;
    double lr_factor = 0.8;

    // [mla]
    int dam_epochs = 100;
    double dam_lr = 0.001;
    int dam_hidden = 64;
    std::string granularity = "batch";  // image | batch | dataset
    int extractor_levels = 3;
    int extractor_base = 8;

    // [run]
    std::string method = "mla-bin";
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::string out_dir = "results";
    int threads = 1;
    int sweep_unseen = 0;  // fixed unseen domain for the client-count sweep

    static ExperimentConfig from_file(const std::filesystem::path& path);
    static ExperimentConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    void validate() const;

    NetConfig net_config(int depth_override = -1, const std::string& block_override = "") const;
    ExtractorConfig extractor_config() const;
    LrSchedule schedule() const;
    Method run_method() const { return method_from_string(method); }
    WeightGranularity weight_granularity() const;
};

}  // namespace fedseg

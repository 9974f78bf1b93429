#include "fedseg/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace fedseg {

const char* method_name(Method m) {
    switch (m) {
        case Method::FedavgBaseline: return "fedavg-baseline";
        case Method::MlaOnly: return "mla-only";
        case Method::BinOnly: return "bin-only";
        case Method::MlaBin: return "mla-bin";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    if (s == "fedavg-baseline") return Method::FedavgBaseline;
    if (s == "mla-only") return Method::MlaOnly;
    if (s == "bin-only") return Method::BinOnly;
    if (s == "mla-bin") return Method::MlaBin;
    throw ConfigError("unknown method '" + s +
                      "' (expected fedavg-baseline | mla-only | bin-only | mla-bin)");
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& value) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        std::size_t used = 0;
        const std::uint64_t v = std::stoull(item, &used);
        if (used != item.size()) throw ConfigError("bad seed '" + item + "'");
        seeds.push_back(v);
    }
    return seeds;
}

// typed setter table; one entry per accepted [section] key
struct Setter {
    std::function<void(ExperimentConfig&, const std::string&)> apply;
};

int to_int(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const int out = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    }
}

double to_double(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
}

std::map<std::string, Setter> make_setters() {
    std::map<std::string, Setter> m;
    auto add_int = [&](const std::string& key, int ExperimentConfig::* field) {
        m[key] = {[key, field](ExperimentConfig& c, const std::string& v) {
            c.*field = to_int(v, key);
        }};
    };
    auto add_double = [&](const std::string& key, double ExperimentConfig::* field) {
        m[key] = {[key, field](ExperimentConfig& c, const std::string& v) {
            c.*field = to_double(v, key);
        }};
    };
    auto add_string = [&](const std::string& key, std::string ExperimentConfig::* field) {
        m[key] = {[field](ExperimentConfig& c, const std::string& v) { c.*field = v; }};
    };
    add_int("dataset.domains", &ExperimentConfig::domains);
    add_int("dataset.per_domain", &ExperimentConfig::per_domain);
    add_int("dataset.image_size", &ExperimentConfig::image_size);
    add_int("dataset.structures", &ExperimentConfig::structures);
    add_int("net.levels", &ExperimentConfig::levels);
    add_int("net.base_channels", &ExperimentConfig::base_channels);
    add_int("net.bin_depth", &ExperimentConfig::bin_depth);
    add_string("net.block", &ExperimentConfig::block);
    add_int("federation.rounds", &ExperimentConfig::rounds);
    add_int("federation.epochs_per_round", &ExperimentConfig::epochs_per_round);
    add_int("federation.batch_size", &ExperimentConfig::batch_size);
    add_double("federation.lr", &ExperimentConfig::lr);
    add_int("federation.lr_step", &ExperimentConfig::lr_step);
    add_double("federation.lr_factor", &ExperimentConfig::lr_factor);
    add_int("mla.dam_epochs", &ExperimentConfig::dam_epochs);
    add_double("mla.dam_lr", &ExperimentConfig::dam_lr);
    add_int("mla.dam_hidden", &ExperimentConfig::dam_hidden);
    add_string("mla.granularity", &ExperimentConfig::granularity);
    add_int("mla.extractor_levels", &ExperimentConfig::extractor_levels);
    add_int("mla.extractor_base", &ExperimentConfig::extractor_base);
    add_string("run.method", &ExperimentConfig::method);
    add_string("run.out", &ExperimentConfig::out_dir);
    add_int("run.threads", &ExperimentConfig::threads);
    add_int("run.sweep_unseen", &ExperimentConfig::sweep_unseen);
    m["run.seeds"] = {[](ExperimentConfig& c, const std::string& v) {
        c.seeds = parse_seed_list(v);
    }};
    return m;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path.string() + "'");
    static const auto setters = make_setters();

    ExperimentConfig cfg;
    std::string line, section;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto comment = line.find('#');
        if (comment != std::string::npos) line = line.substr(0, comment);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                                  ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                              ": expected key = value");
        const std::string key = section + "." + trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto it = setters.find(key);
        if (it == setters.end())
            throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                              ": unknown key '" + key + "'");
        it->second.apply(cfg, value);
    }
    cfg.validate();
    return cfg;
}

nlohmann::json ExperimentConfig::to_json() const {
    return {
        {"dataset",
         {{"domains", domains},
          {"per_domain", per_domain},
          {"image_size", image_size},
          {"structures", structures}}},
        {"net",
         {{"levels", levels},
          {"base_channels", base_channels},
          {"bin_depth", bin_depth},
          {"block", block}}},
        {"federation",
         {{"rounds", rounds},
          {"epochs_per_round", epochs_per_round},
          {"batch_size", batch_size},
          {"lr", lr},
          {"lr_step", lr_step},
          {"lr_factor", lr_factor}}},
        {"mla",
         {{"dam_epochs", dam_epochs},
          {"dam_lr", dam_lr},
          {"dam_hidden", dam_hidden},
          {"granularity", granularity},
          {"extractor_levels", extractor_levels},
          {"extractor_base", extractor_base}}},
        {"run",
         {{"method", method},
          {"seeds", seeds},
          {"out", out_dir},
          {"threads", threads},
          {"sweep_unseen", sweep_unseen}}},
    };
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    const auto& ds = j.at("dataset");
    c.domains = ds.at("domains");
    c.per_domain = ds.at("per_domain");
    c.image_size = ds.at("image_size");
    c.structures = ds.at("structures");
    const auto& net = j.at("net");
    c.levels = net.at("levels");
    c.base_channels = net.at("base_channels");
    c.bin_depth = net.at("bin_depth");
    c.block = net.at("block");
    const auto& fed = j.at("federation");
    c.rounds = fed.at("rounds");
    c.epochs_per_round = fed.at("epochs_per_round");
    c.batch_size = fed.at("batch_size");
    c.lr = fed.at("lr");
    c.lr_step = fed.at("lr_step");
    c.lr_factor = fed.at("lr_factor");
    const auto& mla = j.at("mla");
    c.dam_epochs = mla.at("dam_epochs");
    c.dam_lr = mla.at("dam_lr");
    c.dam_hidden = mla.at("dam_hidden");
    c.granularity = mla.at("granularity");
    c.extractor_levels = mla.at("extractor_levels");
    c.extractor_base = mla.at("extractor_base");
    const auto& run = j.at("run");
    c.method = run.at("method");
    c.seeds = run.at("seeds").get<std::vector<std::uint64_t>>();
    c.out_dir = run.at("out");
    c.threads = run.at("threads");
    c.sweep_unseen = run.at("sweep_unseen");
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    if (domains < 3) throw ConfigError("dataset.domains must be >= 3 (k+1 seen+unseen domains)");
    if (domains > 8) throw ConfigError("dataset.domains must be <= 8 (default style table size)");
    if (per_domain < 20) throw ConfigError("dataset.per_domain must be >= 20");
    if (structures != 1 && structures != 2) throw ConfigError("dataset.structures must be 1 or 2");
    if (levels < 1) throw ConfigError("net.levels must be >= 1");
    if (bin_depth < 0 || bin_depth > levels)
        throw ConfigError("net.bin_depth must lie in [0, net.levels]");
    if (block != "bin" && block != "ibn" && block != "plain")
        throw ConfigError("net.block must be bin | ibn | plain");
    const int div = 1 << (levels - 1);
    if (image_size % div != 0)
        throw ConfigError("dataset.image_size " + std::to_string(image_size) +
                          " is not divisible by 2^(levels-1) = " + std::to_string(div));
    const int xdiv = 1 << (extractor_levels - 1);
    if (extractor_levels < 1 || image_size % xdiv != 0)
        throw ConfigError("dataset.image_size is not divisible by 2^(extractor_levels-1)");
    if (rounds < 0) throw ConfigError("federation.rounds must be >= 0");
    if (epochs_per_round < 0) throw ConfigError("federation.epochs_per_round must be >= 0");
    if (batch_size < 1) throw ConfigError("federation.batch_size must be >= 1");
    if (lr <= 0 || lr_factor <= 0 || lr_step < 1) throw ConfigError("bad learning-rate schedule");
    if (dam_epochs < 0 || dam_lr <= 0 || dam_hidden < 1) throw ConfigError("bad mla settings");
    if (granularity != "image" && granularity != "batch" && granularity != "dataset")
        throw ConfigError("mla.granularity must be image | batch | dataset");
    if (seeds.empty()) throw ConfigError("run.seeds must not be empty");
    if (threads < 1) throw ConfigError("run.threads must be >= 1");
    if (sweep_unseen < 0 || sweep_unseen >= domains)
        throw ConfigError("run.sweep_unseen out of range");
    (void)method_from_string(method);
    net_config().validate();
}

NetConfig ExperimentConfig::net_config(int depth_override, const std::string& block_override) const {
    NetConfig nc;
    nc.levels = levels;
    nc.base_channels = base_channels;
    nc.bin_depth = depth_override >= 0 ? depth_override : bin_depth;
    const std::string& b = block_override.empty() ? block : block_override;
    nc.shallow_kind = b == "ibn" ? BlockKind::IBN
                                 : (b == "plain" ? BlockKind::PlainConv : BlockKind::BIN);
    nc.in_channels = 1;
    nc.out_channels = structures;
    return nc;
}

ExtractorConfig ExperimentConfig::extractor_config() const {
    ExtractorConfig xc;
    xc.levels = extractor_levels;
    xc.base_channels = extractor_base;
    xc.in_channels = 1;
    return xc;
}

LrSchedule ExperimentConfig::schedule() const { return {lr, lr_step, lr_factor}; }

WeightGranularity ExperimentConfig::weight_granularity() const {
    if (granularity == "image") return WeightGranularity::PerImage;
    if (granularity == "dataset") return WeightGranularity::PerDataset;
    return WeightGranularity::PerBatch;
}

}  // namespace fedseg

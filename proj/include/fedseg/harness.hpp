#pragma once

#include "fedseg/config.hpp"
#include "fedseg/metrics.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace fedseg {

// Output of one experiment command: the evaluation reports in emission
// order, the CSV rendering, and a manifest sufficient to re-run the command
// bit-identically.
struct HarnessResult {
    std::string command;
    std::vector<EvalReport> reports;
    std::vector<std::string> extra_values;  // parallel to reports when extra_name is set
    std::string extra_name;                 // e.g. "depth" for the BIN-depth sweep
    std::string csv;
    nlohmann::json manifest;
    std::vector<std::string> errors;  // failed cells; partial results are still present

    bool ok() const { return errors.empty(); }
};

// Leave-one-domain-out evaluation of the configured method.
HarnessResult run_loo(const ExperimentConfig& cfg);

// The four-way component ablation {fedavg-baseline, mla-only, bin-only,
// mla-bin}; federations are shared between the methods that only differ in
// inference-time weighting.
HarnessResult run_ablate(const ExperimentConfig& cfg);

// One LOO per BIN depth 0..levels; adds a "depth" column.
HarnessResult run_sweep_bin_depth(const ExperimentConfig& cfg);

// Seen-client-count sweep at the fixed unseen domain, mla-bin vs
// fedavg-baseline at each count; adds a "clients" column.
HarnessResult run_sweep_clients(const ExperimentConfig& cfg);

// BIN vs IBN blocks at the configured depth; adds a "block" column.
HarnessResult run_compare_ibn(const ExperimentConfig& cfg);

// Evaluates a checkpointed model on the configured dataset (no training).
HarnessResult run_eval_checkpoint(const ExperimentConfig& cfg,
                                  const std::filesystem::path& checkpoint);

HarnessResult run_command(const std::string& command, const ExperimentConfig& cfg);

// Writes <command>.csv and <command>_manifest.json under out_dir.
void write_outputs(const HarnessResult& result, const std::filesystem::path& out_dir);

// Re-runs the command recorded in a manifest and reports whether the CSV
// reproduced byte for byte.
bool rerun_matches_manifest(const std::filesystem::path& manifest_path, std::string* why = nullptr);

}  // namespace fedseg

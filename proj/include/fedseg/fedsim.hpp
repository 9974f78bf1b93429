#pragma once

#include "fedseg/adam.hpp"
#include "fedseg/mla.hpp"
#include "fedseg/params.hpp"
#include "fedseg/segnet.hpp"
#include "fedseg/synthdata.hpp"

#include <cstdint>
#include <filesystem>
#include <variant>
#include <vector>

namespace fedseg {

// Step decay: lr(e) = base * factor^floor(e / step).
struct LrSchedule {
    double base = 0.01;
    int step = 100;
    double factor = 0.8;

    double at(std::int64_t epoch) const;
};

// One simulated client. Holds only its own shard; nothing here ever
// references another client's data.
struct ClientState {
    int domain = -1;
    const std::vector<SegSample>* data = nullptr;  // training shard, not owned
    SegNet net;
    AdamState adam;

    std::int64_t n() const { return data ? static_cast<std::int64_t>(data->size()) : 0; }
};

// The client <-> server message contract. Parameters, counts and feature
// rows are the only payloads; there is no variant that could carry an
// image-shaped tensor.
struct ServerToClient {
    std::int64_t round = 0;
    ParamSet global;
};
struct ClientToServer {
    std::int64_t round = 0;
    int domain = -1;
    ParamSet params;
    std::int64_t n = 0;
};
struct FeatureUpload {
    int domain = -1;
    std::vector<Eigen::VectorXd> features;
};
using RoundMessage = std::variant<ServerToClient, ClientToServer, FeatureUpload>;

// Assembles the server-side feature bank from client uploads; the upload's
// domain field is the client's position among the seen domains (the label
// space of the DAM).
DomainFeatureBank build_bank_from_uploads(const std::vector<FeatureUpload>& uploads,
                                          int feature_dim);

// Elementwise convex combination of signature-identical models, BN running
// statistics included. Exact one-hot weights return a bitwise copy of the
// selected model.
ParamSet aggregate(const std::vector<ParamSet>& models, const AggWeights& weights);

// w_i = n_i / sum(n)
AggWeights fedavg_weights(const std::vector<std::int64_t>& sample_counts);
AggWeights fedavg_weights(const std::vector<ClientState>& clients);

// Loads the distributed global model and runs `epochs_per_round` local Adam
// epochs of Dice loss at the scheduled learning rate. The client's sample
// order comes from a stream keyed by (run_seed, domain, round), so results
// do not depend on scheduling. mean_train_dice (optional) receives the mean
// over batches of 100*(1 - loss).
ClientToServer local_train(ClientState& client, const ServerToClient& from_server,
                           int epochs_per_round, int batch_size, const LrSchedule& schedule,
                           std::int64_t global_epoch, std::uint64_t run_seed,
                           double* mean_train_dice = nullptr);

struct RoundLog {
    std::int64_t round = 0;
    double lr = 0.0;
    std::vector<double> client_train_dice;  // by client order
};

struct FederationResult {
    ParamSet global;                      // final aggregated model
    std::vector<ParamSet> local_models;   // final per-client models, client order
    std::vector<RoundLog> rounds;
};

// Per round: distribute -> local training on every client (optionally in
// parallel threads) -> aggregate with data-proportional weights. Bitwise
// reproducible for a fixed seed regardless of `parallel_clients`.
FederationResult run_federation(std::vector<ClientState>& clients, const NetConfig& cfg,
                                int rounds, int epochs_per_round, int batch_size,
                                const LrSchedule& schedule, std::uint64_t seed,
                                bool parallel_clients = false);

enum class WeightGranularity { PerImage, PerBatch, PerDataset };

// Builds a model from the given parameters and runs an eval-mode forward.
Tensor aggregate_forward(const NetConfig& cfg, const ParamSet& params, const Tensor& batch);

// Attention-weighted inference on an unseen batch: extract features, infer
// aggregation weights from the DAM, aggregate the local models, forward in
// eval mode. PerImage re-aggregates for every image; PerBatch uses one
// weight vector averaged over the batch. (Dataset granularity is the
// caller precomputing weights and using mla_inference_with_weights.)
Tensor mla_inference(const NetConfig& cfg, const std::vector<ParamSet>& local_models,
                     const Dam& dam, const FeatureExtractor& extractor, const Tensor& batch,
                     WeightGranularity granularity = WeightGranularity::PerBatch,
                     std::vector<AggWeights>* used_weights = nullptr);

Tensor mla_inference_with_weights(const NetConfig& cfg,
                                  const std::vector<ParamSet>& local_models,
                                  const AggWeights& weights, const Tensor& batch);

// Checkpoint file: "MLBN" magic, version, named shape table and float64
// payload, CRC32 over everything preceding it. Round trips are bit-exact.
void save_checkpoint(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_checkpoint(const std::filesystem::path& path);

}  // namespace fedseg

#include "fedseg/fedsim.hpp"

#include "fedseg/crc32.hpp"
#include "fedseg/ops.hpp"
#include "fedseg/rng.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <thread>

namespace fedseg {

double LrSchedule::at(std::int64_t epoch) const {
    if (epoch < 0) throw TensorError("LrSchedule: negative epoch");
    return base * std::pow(factor, static_cast<double>(epoch / step));
}

DomainFeatureBank build_bank_from_uploads(const std::vector<FeatureUpload>& uploads,
                                          int feature_dim) {
    if (uploads.size() < 2)
        throw TensorError("build_bank_from_uploads: needs uploads from at least 2 domains");
    DomainFeatureBank bank;
    bank.k = static_cast<std::uint32_t>(uploads.size());
    bank.feature_dim = static_cast<std::uint32_t>(feature_dim);
    for (const FeatureUpload& up : uploads) {
        if (up.features.empty())
            throw TensorError("build_bank_from_uploads: domain " + std::to_string(up.domain) +
                              " uploaded no features");
        for (const auto& fvec : up.features)
            bank.rows.push_back({static_cast<std::uint32_t>(up.domain), fvec});
    }
    bank.validate();
    return bank;
}

// -------------------------------------------------------------- aggregate

ParamSet aggregate(const std::vector<ParamSet>& models, const AggWeights& weights) {
    if (models.empty()) throw TensorError("aggregate: no models");
    if (static_cast<int>(models.size()) != weights.k())
        throw TensorError("aggregate: " + std::to_string(models.size()) + " models but " +
                          std::to_string(weights.k()) + " weights");
    std::string why;
    for (std::size_t i = 1; i < models.size(); ++i)
        if (!models[0].same_signature(models[i], &why))
            throw TensorError("aggregate: model " + std::to_string(i) +
                              " signature mismatch: " + why);

    int hot = -1;
    if (weights.exact_one_hot(&hot)) return models[static_cast<std::size_t>(hot)].clone();

    ParamSet out;
    for (std::size_t p = 0; p < models[0].size(); ++p) {
        const auto& name = models[0].items()[p].first;
        Tensor acc(models[0].items()[p].second.shape());
        acc.array() = weights[0] * models[0].items()[p].second.array();
        for (std::size_t i = 1; i < models.size(); ++i)
            acc.array() += weights[static_cast<int>(i)] * models[i].items()[p].second.array();
        out.add(name, std::move(acc));
    }
    return out;
}

AggWeights fedavg_weights(const std::vector<std::int64_t>& sample_counts) {
    if (sample_counts.empty()) throw TensorError("fedavg_weights: no clients");
    double total = 0.0;
    for (std::int64_t n : sample_counts) {
        if (n < 0) throw TensorError("fedavg_weights: negative sample count");
        total += static_cast<double>(n);
    }
    if (total <= 0.0) throw TensorError("fedavg_weights: no samples");
    Eigen::VectorXd w(static_cast<Eigen::Index>(sample_counts.size()));
    for (std::size_t i = 0; i < sample_counts.size(); ++i)
        w[static_cast<Eigen::Index>(i)] = static_cast<double>(sample_counts[i]) / total;
    return AggWeights::from(std::move(w));
}

AggWeights fedavg_weights(const std::vector<ClientState>& clients) {
    std::vector<std::int64_t> counts;
    for (const auto& c : clients) counts.push_back(c.n());
    return fedavg_weights(counts);
}

// ------------------------------------------------------------- local train

namespace {

// assemble (B, 1, H, W) images and one (B, 1, H, W) target per structure
void make_batch(const std::vector<SegSample>& data, const std::vector<std::int64_t>& order,
                std::int64_t start, std::int64_t count, Tensor* images,
                std::vector<Tensor>* targets) {
    const Tensor& first_img = data[0].image;
    const std::int64_t h = first_img.dim(1), w = first_img.dim(2), hw = h * w;
    const std::int64_t structures = data[0].mask.dim(0);
    *images = Tensor({count, 1, h, w});
    targets->clear();
    for (std::int64_t s = 0; s < structures; ++s) targets->emplace_back(Shape{count, 1, h, w});
    for (std::int64_t i = 0; i < count; ++i) {
        const SegSample& sample = data[static_cast<std::size_t>(order[start + i])];
        std::copy_n(sample.image.data(), hw, images->data() + i * hw);
        for (std::int64_t s = 0; s < structures; ++s)
            std::copy_n(sample.mask.data() + s * hw, hw, (*targets)[s].data() + i * hw);
    }
}

Tensor seg_loss(const Tensor& pred, const std::vector<Tensor>& targets) {
    const std::int64_t structures = static_cast<std::int64_t>(targets.size());
    if (structures == 1) return dice_loss(pred, targets[0]);
    Tensor total;
    for (std::int64_t s = 0; s < structures; ++s) {
        Tensor part = dice_loss(slice_channels(pred, s, s + 1), targets[s]);
        total = s == 0 ? part : add(total, part);
    }
    return scale(total, 1.0 / static_cast<double>(structures));
}

}  // namespace

ClientToServer local_train(ClientState& client, const ServerToClient& from_server,
                           int epochs_per_round, int batch_size, const LrSchedule& schedule,
                           std::int64_t global_epoch, std::uint64_t run_seed,
                           double* mean_train_dice) {
    if (!client.data || client.data->empty())
        throw TensorError("local_train: client " + std::to_string(client.domain) +
                          " has no data");
    if (batch_size < 1) throw TensorError("local_train: batch_size must be positive");
    client.net.load(from_server.global);

    const std::vector<SegSample>& data = *client.data;
    const std::int64_t n = static_cast<std::int64_t>(data.size());
    double dice_sum = 0.0;
    std::int64_t batches = 0;

    for (int e = 0; e < epochs_per_round; ++e) {
        Rng rng(Rng::derive(run_seed, {rng_tag::kClient, static_cast<std::uint64_t>(client.domain),
                                       static_cast<std::uint64_t>(from_server.round),
                                       static_cast<std::uint64_t>(e)}));
        const auto order = rng.permutation(n);
        const double lr = schedule.at(global_epoch + e);
        for (std::int64_t start = 0; start < n; start += batch_size) {
            const std::int64_t count = std::min<std::int64_t>(batch_size, n - start);
            Tensor images;
            std::vector<Tensor> targets;
            make_batch(data, order, start, count, &images, &targets);
            client.net.zero_grad();
            Tensor pred = client.net.forward(images, /*train=*/true);
            Tensor loss = seg_loss(pred, targets);
            loss.backward();
            std::vector<Tensor> params = client.net.trainable();
            adam_step(params, client.adam, lr);
            dice_sum += 100.0 * (1.0 - loss.item());
            ++batches;
        }
    }
    if (mean_train_dice)
        *mean_train_dice = batches > 0 ? dice_sum / static_cast<double>(batches) : 0.0;

    ClientToServer reply;
    reply.round = from_server.round;
    reply.domain = client.domain;
    reply.params = client.net.snapshot();
    reply.n = n;
    return reply;
}

// --------------------------------------------------------------- rounds

FederationResult run_federation(std::vector<ClientState>& clients, const NetConfig& cfg,
                                int rounds, int epochs_per_round, int batch_size,
                                const LrSchedule& schedule, std::uint64_t seed,
                                bool parallel_clients) {
    if (clients.empty()) throw TensorError("run_federation: no clients");
    FederationResult result;
    {
        SegNet init = SegNet::build(cfg, Rng::derive(seed, {rng_tag::kNetInit}));
        result.global = init.snapshot();
    }
    const AggWeights weights = fedavg_weights(clients);

    for (int round = 0; round < rounds; ++round) {
        const std::int64_t global_epoch = static_cast<std::int64_t>(round) * epochs_per_round;
        std::vector<ClientToServer> replies(clients.size());
        std::vector<double> round_dice(clients.size(), 0.0);
        std::vector<std::exception_ptr> errors(clients.size());

        auto run_client = [&](std::size_t i) {
            try {
                ServerToClient msg{round, result.global.clone()};
                replies[i] = local_train(clients[i], msg, epochs_per_round, batch_size, schedule,
                                         global_epoch, seed, &round_dice[i]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        };

        if (parallel_clients && clients.size() > 1) {
            std::vector<std::thread> threads;
            for (std::size_t i = 0; i < clients.size(); ++i)
                threads.emplace_back(run_client, i);
            for (auto& t : threads) t.join();
        } else {
            for (std::size_t i = 0; i < clients.size(); ++i) run_client(i);
        }

        for (std::size_t i = 0; i < clients.size(); ++i) {
            if (errors[i]) {
                try {
                    std::rethrow_exception(errors[i]);
                } catch (const std::exception& e) {
                    throw TensorError("run_federation: client domain " +
                                      std::to_string(clients[i].domain) + " failed at round " +
                                      std::to_string(round) + ": " + e.what());
                }
            }
        }

        std::vector<ParamSet> models;
        models.reserve(clients.size());
        for (auto& reply : replies) models.push_back(std::move(reply.params));
        result.global = aggregate(models, weights);
        if (round == rounds - 1) result.local_models = std::move(models);

        RoundLog log;
        log.round = round;
        log.lr = schedule.at(global_epoch);
        log.client_train_dice = std::move(round_dice);
        result.rounds.push_back(std::move(log));
    }

    if (result.local_models.empty())
        for (std::size_t i = 0; i < clients.size(); ++i)
            result.local_models.push_back(result.global.clone());
    return result;
}

// ------------------------------------------------------------- inference

Tensor aggregate_forward(const NetConfig& cfg, const ParamSet& params, const Tensor& batch) {
    SegNet shell = SegNet::build(cfg, 0);
    shell.load(params);
    NoGradGuard ng;
    return shell.forward(batch, /*train=*/false);
}

Tensor mla_inference(const NetConfig& cfg, const std::vector<ParamSet>& local_models,
                     const Dam& dam, const FeatureExtractor& extractor, const Tensor& batch,
                     WeightGranularity granularity, std::vector<AggWeights>* used_weights) {
    if (batch.rank() != 4)
        throw TensorError("mla_inference: batch must be (N, 1, H, W), got " +
                          shape_str(batch.shape()));
    const std::int64_t n = batch.dim(0);
    const std::int64_t chw = batch.numel() / n;
    auto image_at = [&](std::int64_t i) {
        Tensor img({1, batch.dim(1), batch.dim(2), batch.dim(3)});
        std::copy_n(batch.data() + i * chw, chw, img.data());
        return img;
    };

    if (granularity == WeightGranularity::PerImage) {
        Tensor out;
        for (std::int64_t i = 0; i < n; ++i) {
            Tensor img = image_at(i);
            AggWeights w = infer_weights(dam, {extractor.extract(img)});
            if (used_weights) used_weights->push_back(w);
            Tensor pred = mla_inference_with_weights(cfg, local_models, w, img);
            if (i == 0) {
                out = Tensor({n, pred.dim(1), pred.dim(2), pred.dim(3)});
            }
            std::copy_n(pred.data(), pred.numel(), out.data() + i * pred.numel());
        }
        return out;
    }

    // batch granularity (dataset granularity precomputes weights upstream)
    std::vector<Eigen::VectorXd> features;
    features.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) features.push_back(extractor.extract(image_at(i)));
    AggWeights w = infer_weights(dam, features);
    if (used_weights) used_weights->push_back(w);
    return mla_inference_with_weights(cfg, local_models, w, batch);
}

Tensor mla_inference_with_weights(const NetConfig& cfg,
                                  const std::vector<ParamSet>& local_models,
                                  const AggWeights& weights, const Tensor& batch) {
    return aggregate_forward(cfg, aggregate(local_models, weights), batch);
}

// ------------------------------------------------------------ checkpoint

namespace {

constexpr char kCkptMagic[4] = {'M', 'L', 'B', 'N'};
constexpr std::uint32_t kCkptVersion = 1;
constexpr std::int64_t kMaxElements = 1ll << 30;  // shape sanity cap

template <typename T>
void append(std::string& buf, T value) {
    static_assert(std::endian::native == std::endian::little,
                  "checkpoint format is little-endian only");
    buf.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

class Reader {
public:
    Reader(const std::string& buf, std::size_t limit) : buf_(buf), limit_(limit) {}

    template <typename T>
    T read(const std::string& field) {
        if (pos_ + sizeof(T) > limit_)
            throw TensorError("checkpoint: truncated while reading " + field);
        T value;
        std::memcpy(&value, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    std::string read_bytes(std::size_t count, const std::string& field) {
        if (pos_ + count > limit_)
            throw TensorError("checkpoint: truncated while reading " + field);
        std::string out = buf_.substr(pos_, count);
        pos_ += count;
        return out;
    }

    void read_doubles(double* dst, std::size_t count, const std::string& field) {
        if (pos_ + count * sizeof(double) > limit_)
            throw TensorError("checkpoint: truncated while reading " + field);
        std::memcpy(dst, buf_.data() + pos_, count * sizeof(double));
        pos_ += count * sizeof(double);
    }

    std::size_t pos() const { return pos_; }

private:
    const std::string& buf_;
    std::size_t limit_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
    if (params.empty()) throw TensorError("save_checkpoint: empty parameter set");
    std::string buf;
    buf.append(kCkptMagic, 4);
    append(buf, kCkptVersion);
    append(buf, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params.items()) {
        if (name.size() > 0xFFFF)
            throw TensorError("save_checkpoint: parameter name too long: '" + name + "'");
        append(buf, static_cast<std::uint16_t>(name.size()));
        buf.append(name);
        if (t.rank() > 0xFF) throw TensorError("save_checkpoint: rank too large for '" + name + "'");
        append(buf, static_cast<std::uint8_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) append(buf, static_cast<std::uint32_t>(t.dim(d)));
        buf.append(reinterpret_cast<const char*>(t.data()), sizeof(double) * t.numel());
    }
    append(buf, crc32(buf.data(), buf.size()));

    std::ofstream f(path, std::ios::binary);
    if (!f) throw TensorError("save_checkpoint: cannot open '" + path.string() + "' for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw TensorError("save_checkpoint: write failed for '" + path.string() + "'");
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw TensorError("load_checkpoint: cannot open '" + path.string() + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (buf.size() < 4 + sizeof(std::uint32_t) * 3)
        throw TensorError("load_checkpoint: file too short to be a checkpoint");
    if (std::memcmp(buf.data(), kCkptMagic, 4) != 0)
        throw TensorError("load_checkpoint: bad magic (not a checkpoint file)");

    const std::size_t payload = buf.size() - sizeof(std::uint32_t);
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, buf.data() + payload, sizeof(stored_crc));
    const std::uint32_t actual_crc = crc32(buf.data(), payload);
    if (stored_crc != actual_crc)
        throw TensorError("load_checkpoint: checksum mismatch (stored " +
                          std::to_string(stored_crc) + ", computed " +
                          std::to_string(actual_crc) + ")");

    Reader r(buf, payload);
    r.read_bytes(4, "magic");
    const auto version = r.read<std::uint32_t>("version");
    if (version != kCkptVersion)
        throw TensorError("load_checkpoint: version mismatch: file has " +
                          std::to_string(version) + ", reader expects " +
                          std::to_string(kCkptVersion));
    const auto count = r.read<std::uint32_t>("parameter count");
    if (count == 0 || count > 1'000'000)
        throw TensorError("load_checkpoint: implausible parameter count " +
                          std::to_string(count));

    ParamSet out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.read<std::uint16_t>("name length of parameter " +
                                                    std::to_string(i));
        const std::string name =
            r.read_bytes(name_len, "name of parameter " + std::to_string(i));
        const auto rank = r.read<std::uint8_t>("rank of '" + name + "'");
        if (rank == 0 || rank > 8)
            throw TensorError("load_checkpoint: implausible rank " + std::to_string(rank) +
                              " for '" + name + "'");
        Shape shape;
        std::int64_t numel = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            const auto extent = r.read<std::uint32_t>("shape of '" + name + "'");
            if (extent == 0)
                throw TensorError("load_checkpoint: zero extent in shape of '" + name + "'");
            numel *= extent;
            if (numel > kMaxElements)
                throw TensorError("load_checkpoint: shape of '" + name +
                                  "' overflows the element cap");
            shape.push_back(extent);
        }
        Tensor t(shape);
        r.read_doubles(t.data(), static_cast<std::size_t>(numel), "data of '" + name + "'");
        if (!t.array().allFinite())
            throw TensorError("load_checkpoint: non-finite data in '" + name + "'");
        out.add(name, std::move(t));
    }
    if (r.pos() != payload)
        throw TensorError("load_checkpoint: " + std::to_string(payload - r.pos()) +
                          " trailing bytes after the last parameter");
    return out;
}

}  // namespace fedseg

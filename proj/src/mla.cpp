#include "fedseg/mla.hpp"

#include "fedseg/rng.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace fedseg {

// ---------------------------------------------------------------- weights

AggWeights AggWeights::from(Eigen::VectorXd w, double tolerance) {
    if (w.size() == 0) throw TensorError("AggWeights: empty weight vector");
    if (!w.allFinite()) throw TensorError("AggWeights: non-finite weight");
    double sum = 0.0;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        if (w[i] < -1e-12 || w[i] > 1.0 + tolerance)
            throw TensorError("AggWeights: weight " + std::to_string(w[i]) +
                              " outside [0, 1] at index " + std::to_string(i));
        if (w[i] < 0.0) w[i] = 0.0;
        sum += w[i];
    }
    if (std::abs(sum - 1.0) > tolerance)
        throw TensorError("AggWeights: weights sum to " + std::to_string(sum) +
                          ", off the simplex by more than " + std::to_string(tolerance));
    AggWeights out;
    out.w_ = std::move(w);
    return out;
}

AggWeights AggWeights::one_hot(int k, int j) {
    if (j < 0 || j >= k) throw TensorError("AggWeights::one_hot: index out of range");
    Eigen::VectorXd w = Eigen::VectorXd::Zero(k);
    w[j] = 1.0;
    return from(std::move(w));
}

AggWeights AggWeights::uniform(int k) {
    if (k < 1) throw TensorError("AggWeights::uniform: k must be positive");
    return from(Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k)));
}

bool AggWeights::exact_one_hot(int* index) const {
    int hot = -1;
    for (Eigen::Index i = 0; i < w_.size(); ++i) {
        if (w_[i] == 1.0) {
            if (hot >= 0) return false;
            hot = static_cast<int>(i);
        } else if (w_[i] != 0.0) {
            return false;
        }
    }
    if (hot < 0) return false;
    if (index) *index = hot;
    return true;
}

// -------------------------------------------------------------- extractor

FeatureExtractor FeatureExtractor::build(const ExtractorConfig& cfg, std::uint64_t seed) {
    if (cfg.levels < 1 || cfg.base_channels < 1 || cfg.in_channels < 1)
        throw TensorError("ExtractorConfig: all dimensions must be positive");
    FeatureExtractor fx;
    fx.cfg_ = cfg;
    Rng rng(seed);
    auto make_conv = [&](std::int64_t in_c, std::int64_t out_c) {
        Conv c;
        c.w = Tensor({out_c, in_c, 3, 3});
        const double stddev = std::sqrt(2.0 / static_cast<double>(in_c * 9));
        for (std::int64_t i = 0; i < c.w.numel(); ++i) c.w.data()[i] = rng.normal(0.0, stddev);
        c.b = Tensor::zeros({out_c});
        return c;
    };
    for (int l = 1; l <= cfg.levels; ++l) {
        const std::int64_t out_c = static_cast<std::int64_t>(cfg.base_channels) << (l - 1);
        const std::int64_t in_c = l == 1 ? cfg.in_channels : out_c / 2;
        fx.levels_.push_back({make_conv(in_c, out_c), make_conv(out_c, out_c)});
    }
    return fx;
}

Eigen::VectorXd FeatureExtractor::extract(const Tensor& image) const {
    if (levels_.empty()) throw TensorError("FeatureExtractor: not built");
    NoGradGuard ng;  // frozen: no gradient ever flows here
    Tensor f;
    if (image.rank() == 3)
        f = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    else
        f = image;
    if (f.rank() != 4 || f.dim(0) != 1 || f.dim(1) != cfg_.in_channels)
        throw TensorError("FeatureExtractor: expected a single (1, " +
                          std::to_string(cfg_.in_channels) + ", H, W) image, got " +
                          shape_str(image.shape()));
    const std::int64_t div = std::int64_t{1} << (cfg_.levels - 1);
    if (f.dim(2) % div != 0 || f.dim(3) % div != 0)
        throw TensorError("FeatureExtractor: spatial size " + shape_str(f.shape()) +
                          " not divisible by " + std::to_string(div));

    for (std::size_t l = 0; l < levels_.size(); ++l) {
        f = relu(conv2d(f, levels_[l][0].w, levels_[l][0].b, 1, 1, PadMode::Replicate));
        f = relu(conv2d(f, levels_[l][1].w, levels_[l][1].b, 1, 1, PadMode::Replicate));
        if (l + 1 < levels_.size()) f = max_pool2x2(f);
    }
    Tensor pooled = global_avg_pool(f);  // (1, F)
    Eigen::VectorXd out(pooled.numel());
    std::memcpy(out.data(), pooled.data(), sizeof(double) * pooled.numel());
    return out;
}

// ------------------------------------------------------------------- bank

void DomainFeatureBank::validate() const {
    if (k < 2) throw TensorError("DomainFeatureBank: needs at least 2 domains");
    if (feature_dim == 0) throw TensorError("DomainFeatureBank: zero feature dimension");
    std::vector<std::int64_t> counts(k, 0);
    for (const auto& r : rows) {
        if (r.domain >= k)
            throw TensorError("DomainFeatureBank: row domain " + std::to_string(r.domain) +
                              " out of range for k=" + std::to_string(k));
        if (r.feature.size() != static_cast<Eigen::Index>(feature_dim))
            throw TensorError("DomainFeatureBank: row feature length " +
                              std::to_string(r.feature.size()) + " != " +
                              std::to_string(feature_dim));
        if (!r.feature.allFinite())
            throw TensorError("DomainFeatureBank: non-finite feature");
        counts[r.domain] += 1;
    }
    for (std::uint32_t d = 0; d < k; ++d)
        if (counts[d] == 0)
            throw TensorError("DomainFeatureBank: domain " + std::to_string(d) + " has no rows");
}

namespace {

constexpr char kBankMagic[4] = {'M', 'L', 'A', 'B'};
constexpr std::uint32_t kBankVersion = 1;

template <typename T>
void write_le(std::ostream& out, T value) {
    // host is little-endian on every supported target; asserted in save()
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const char* field) {
    T value;
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw TensorError(std::string("feature bank: truncated while reading ") + field);
    return value;
}

}  // namespace

void DomainFeatureBank::save(const std::filesystem::path& path) const {
    static_assert(std::endian::native == std::endian::little,
                  "bank format is little-endian only");
    validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw TensorError("feature bank: cannot open '" + path.string() + "' for writing");
    f.write(kBankMagic, 4);
    write_le(f, kBankVersion);
    write_le(f, k);
    write_le(f, feature_dim);
    write_le(f, static_cast<std::uint64_t>(rows.size()));
    for (const auto& r : rows) {
        write_le(f, r.domain);
        f.write(reinterpret_cast<const char*>(r.feature.data()),
                static_cast<std::streamsize>(sizeof(double) * feature_dim));
    }
    if (!f) throw TensorError("feature bank: write failed for '" + path.string() + "'");
}

DomainFeatureBank DomainFeatureBank::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw TensorError("feature bank: cannot open '" + path.string() + "'");
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kBankMagic, 4) != 0)
        throw TensorError("feature bank: bad magic in '" + path.string() + "'");
    const auto version = read_le<std::uint32_t>(f, "version");
    if (version != kBankVersion)
        throw TensorError("feature bank: version mismatch: file has " + std::to_string(version) +
                          ", reader expects " + std::to_string(kBankVersion));
    DomainFeatureBank bank;
    bank.k = read_le<std::uint32_t>(f, "domain count");
    bank.feature_dim = read_le<std::uint32_t>(f, "feature dimension");
    if (bank.feature_dim == 0 || bank.feature_dim > (1u << 20))
        throw TensorError("feature bank: implausible feature dimension " +
                          std::to_string(bank.feature_dim));
    const auto count = read_le<std::uint64_t>(f, "row count");
    if (count > (1ull << 32)) throw TensorError("feature bank: implausible row count");
    bank.rows.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        Row r;
        r.domain = read_le<std::uint32_t>(f, ("domain of row " + std::to_string(i)).c_str());
        r.feature.resize(bank.feature_dim);
        f.read(reinterpret_cast<char*>(r.feature.data()),
               static_cast<std::streamsize>(sizeof(double) * bank.feature_dim));
        if (!f)
            throw TensorError("feature bank: truncated while reading feature of row " +
                              std::to_string(i));
        bank.rows.push_back(std::move(r));
    }
    bank.validate();
    return bank;
}

bool DomainFeatureBank::bitwise_equal(const DomainFeatureBank& other) const {
    if (k != other.k || feature_dim != other.feature_dim || rows.size() != other.rows.size())
        return false;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].domain != other.rows[i].domain) return false;
        if (std::memcmp(rows[i].feature.data(), other.rows[i].feature.data(),
                        sizeof(double) * feature_dim) != 0)
            return false;
    }
    return true;
}

DomainFeatureBank build_bank(const std::vector<std::vector<Tensor>>& images_per_domain,
                             const FeatureExtractor& extractor) {
    if (images_per_domain.size() < 2)
        throw TensorError("build_bank: needs at least 2 domains");
    DomainFeatureBank bank;
    bank.k = static_cast<std::uint32_t>(images_per_domain.size());
    bank.feature_dim = static_cast<std::uint32_t>(extractor.feature_dim());
    for (std::uint32_t d = 0; d < bank.k; ++d) {
        const auto& images = images_per_domain[d];
        if (images.empty())
            throw TensorError("build_bank: domain " + std::to_string(d) + " has no images");
        for (const Tensor& img : images)
            bank.rows.push_back({d, extractor.extract(img)});
    }
    bank.validate();
    return bank;
}

// -------------------------------------------------------------------- DAM

Dam Dam::init(int feature_dim, int k, std::uint64_t seed, int hidden) {
    if (feature_dim < 1 || k < 2 || hidden < 1)
        throw TensorError("Dam::init: feature_dim >= 1, k >= 2, hidden >= 1 required");
    Dam dam;
    dam.feature_dim_ = feature_dim;
    dam.k_ = k;
    Rng rng(seed);
    auto he = [&](Shape shape, std::int64_t fan_in) {
        Tensor t(std::move(shape));
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0, stddev);
        t.set_requires_grad(true);
        return t;
    };
    dam.conv_w_ = he({feature_dim, feature_dim, 1, 1}, feature_dim);
    dam.conv_b_ = Tensor::zeros({feature_dim});
    dam.conv_b_.set_requires_grad(true);
    dam.fc1_w_ = he({hidden, feature_dim}, feature_dim);
    dam.fc1_b_ = Tensor::zeros({hidden});
    dam.fc1_b_.set_requires_grad(true);
    dam.fc2_w_ = he({k, hidden}, hidden);
    dam.fc2_b_ = Tensor::zeros({k});
    dam.fc2_b_.set_requires_grad(true);
    return dam;
}

Tensor Dam::forward(const Tensor& features, bool with_grad) {
    if (k_ == 0) throw TensorError("Dam: not initialized");
    if (features.rank() != 2 || features.dim(1) != feature_dim_)
        throw TensorError("Dam: expected features (B, " + std::to_string(feature_dim_) +
                          "), got " + shape_str(features.shape()));
    std::unique_ptr<NoGradGuard> guard;
    if (!with_grad) guard = std::make_unique<NoGradGuard>();
    const std::int64_t b = features.dim(0);
    // the feature is viewed as (B, F, 1, 1) for the 1x1 conv, then flattened
    Tensor x = reshape(features, {b, feature_dim_, 1, 1});
    x = relu(conv2d(x, conv_w_, conv_b_, 0, 1, PadMode::Zero));
    x = reshape(x, {b, feature_dim_});
    x = relu(fully_connected(x, fc1_w_, fc1_b_));
    x = fully_connected(x, fc2_w_, fc2_b_);
    return softmax(x);
}

Eigen::VectorXd Dam::probs(const Eigen::VectorXd& feature) const {
    if (feature.size() != feature_dim_)
        throw TensorError("Dam: feature length " + std::to_string(feature.size()) +
                          " != " + std::to_string(feature_dim_));
    Tensor f({1, feature_dim_});
    std::memcpy(f.data(), feature.data(), sizeof(double) * feature_dim_);
    Tensor p = const_cast<Dam*>(this)->forward(f, /*with_grad=*/false);
    Eigen::VectorXd out(k_);
    std::memcpy(out.data(), p.data(), sizeof(double) * k_);
    return out;
}

std::vector<Tensor> Dam::trainable() const {
    return {conv_w_, conv_b_, fc1_w_, fc1_b_, fc2_w_, fc2_b_};
}

void Dam::zero_grad() {
    for (Tensor t : trainable()) t.zero_grad();
}

DamTrainResult train_dam(Dam& dam, const DomainFeatureBank& bank, int epochs, double lr,
                         std::uint64_t seed, int batch_size) {
    bank.validate();
    if (static_cast<int>(bank.k) != dam.k() ||
        static_cast<int>(bank.feature_dim) != dam.feature_dim())
        throw TensorError("train_dam: bank (k=" + std::to_string(bank.k) + ", F=" +
                          std::to_string(bank.feature_dim) + ") does not match DAM");
    if (batch_size < 1) throw TensorError("train_dam: batch_size must be positive");

    DamTrainResult result;
    std::vector<Tensor> params = dam.trainable();
    AdamState adam;
    const std::int64_t n = static_cast<std::int64_t>(bank.rows.size());
    const std::int64_t f = bank.feature_dim;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        Rng rng(Rng::derive(seed, {rng_tag::kDamTrain, static_cast<std::uint64_t>(epoch)}));
        const auto perm = rng.permutation(n);
        double epoch_loss = 0.0;
        std::int64_t batches = 0;
        for (std::int64_t start = 0; start < n; start += batch_size) {
            const std::int64_t count = std::min<std::int64_t>(batch_size, n - start);
            Tensor feats({count, f});
            std::vector<std::int64_t> labels(static_cast<std::size_t>(count));
            for (std::int64_t i = 0; i < count; ++i) {
                const auto& row = bank.rows[static_cast<std::size_t>(perm[start + i])];
                std::memcpy(feats.data() + i * f, row.feature.data(), sizeof(double) * f);
                labels[static_cast<std::size_t>(i)] = row.domain;
            }
            dam.zero_grad();
            Tensor loss;
            try {
                Tensor probs = dam.forward(feats, /*with_grad=*/true);
                loss = cross_entropy(probs, labels);
                loss.backward();
                adam_step(params, adam, lr);
            } catch (const TensorError& e) {
                throw TensorError("train_dam: aborted at epoch " + std::to_string(epoch) + ": " +
                                  e.what());
            }
            epoch_loss += loss.item();
            ++batches;
        }
        result.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
    }

    // training accuracy on the bank
    std::int64_t correct = 0;
    for (const auto& row : bank.rows) {
        Eigen::VectorXd p = dam.probs(row.feature);
        Eigen::Index arg;
        p.maxCoeff(&arg);
        if (static_cast<std::uint32_t>(arg) == row.domain) ++correct;
    }
    result.train_accuracy = static_cast<double>(correct) / static_cast<double>(bank.rows.size());
    return result;
}

AggWeights infer_weights(const Dam& dam, const std::vector<Eigen::VectorXd>& features) {
    if (features.empty()) throw TensorError("infer_weights: no features");
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(dam.k());
    for (const auto& fvec : features) acc += dam.probs(fvec);
    acc /= static_cast<double>(features.size());
    acc /= acc.sum();  // renormalize the average exactly onto the simplex
    return AggWeights::from(std::move(acc));
}

}  // namespace fedseg

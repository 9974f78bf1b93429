#pragma once

#include "fedseg/adam.hpp"
#include "fedseg/ops.hpp"
#include "fedseg/params.hpp"
#include "fedseg/tensor.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace fedseg {

// Length-k probability vector over seen domains; the weights of the model
// aggregation. Construction validates the simplex constraint.
class AggWeights {
public:
    static AggWeights from(Eigen::VectorXd w, double tolerance = 1e-6);
    static AggWeights one_hot(int k, int j);
    static AggWeights uniform(int k);

    int k() const { return static_cast<int>(w_.size()); }
    const Eigen::VectorXd& vec() const { return w_; }
    double operator[](int i) const { return w_[i]; }

    // exact one-hot detection (1.0 and 0.0 bit patterns)
    bool exact_one_hot(int* index) const;

private:
    AggWeights() = default;
    Eigen::VectorXd w_;
};

struct ExtractorConfig {
    int levels = 3;
    int base_channels = 8;
    int in_channels = 1;

    int feature_dim() const { return base_channels << (levels - 1); }
};

// Frozen convolutional encoder shared by every client: two conv3x3+ReLU
// units per level with max-pooling between levels and global average
// pooling on top. The parameters come deterministically from a
// server-distributed seed, so every client holds bitwise-identical weights;
// nothing here is ever trained.
class FeatureExtractor {
public:
    FeatureExtractor() = default;
    static FeatureExtractor build(const ExtractorConfig& cfg, std::uint64_t seed);

    int feature_dim() const { return cfg_.feature_dim(); }
    const ExtractorConfig& config() const { return cfg_; }

    // image (1, 1, H, W) or (1, H, W) -> length-F feature (Eq. GAP(Enc(x)))
    Eigen::VectorXd extract(const Tensor& image) const;

private:
    struct Conv {
        Tensor w, b;
    };
    ExtractorConfig cfg_;
    std::vector<std::array<Conv, 2>> levels_;
};

// Server-side table of (feature, domain) rows; the only client data that
// ever crosses to the server.
struct DomainFeatureBank {
    std::uint32_t k = 0;            // number of seen domains
    std::uint32_t feature_dim = 0;  // F

    struct Row {
        std::uint32_t domain;  // in [0, k)
        Eigen::VectorXd feature;
    };
    std::vector<Row> rows;

    void validate() const;
    void save(const std::filesystem::path& path) const;
    static DomainFeatureBank load(const std::filesystem::path& path);
    bool bitwise_equal(const DomainFeatureBank& other) const;
};

// One row per image, domain label = position in `images_per_domain`.
// Only features and labels leave this function; images never do.
DomainFeatureBank build_bank(const std::vector<std::vector<Tensor>>& images_per_domain,
                             const FeatureExtractor& extractor);

// Domain attention module: 1x1 conv (F -> F over a 1x1 spatial map), two
// fully connected layers (F -> hidden -> k) and a softmax head.
class Dam {
public:
    Dam() = default;
    static Dam init(int feature_dim, int k, std::uint64_t seed, int hidden = 64);

    int k() const { return k_; }
    int feature_dim() const { return feature_dim_; }

    // batched forward on (B, F) feature rows -> (B, k) probabilities
    Tensor forward(const Tensor& features, bool with_grad);
    Eigen::VectorXd probs(const Eigen::VectorXd& feature) const;

    std::vector<Tensor> trainable() const;
    void zero_grad();

private:
    int feature_dim_ = 0;
    int k_ = 0;
    Tensor conv_w_, conv_b_;  // (F, F, 1, 1), (F)
    Tensor fc1_w_, fc1_b_;    // (hidden, F), (hidden)
    Tensor fc2_w_, fc2_b_;    // (k, hidden), (k)
};

struct DamTrainResult {
    std::vector<double> epoch_loss;
    double train_accuracy = 0.0;  // on the bank after the last epoch
};

// Adam on cross-entropy over (feature -> domain) rows, minibatched and
// shuffled per epoch from the given seed.
DamTrainResult train_dam(Dam& dam, const DomainFeatureBank& bank, int epochs, double lr,
                         std::uint64_t seed, int batch_size = 8);

// Softmax similarity of each feature to the seen domains, averaged over the
// given features and renormalized.
AggWeights infer_weights(const Dam& dam, const std::vector<Eigen::VectorXd>& features);

}  // namespace fedseg

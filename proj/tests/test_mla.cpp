#include <doctest.h>

#include "fedseg/mla.hpp"
#include "fedseg/rng.hpp"
#include "fedseg/synthdata.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace fedseg;

namespace {

ExtractorConfig small_extractor() {
    ExtractorConfig xc;
    xc.levels = 3;
    xc.base_channels = 4;  // F = 16
    return xc;
}

// bank with tight, well-separated clusters: rows of domain d sit near 10*e_d
DomainFeatureBank separable_bank(int k, int per_domain, int f, std::uint64_t seed) {
    Rng rng(seed);
    DomainFeatureBank bank;
    bank.k = static_cast<std::uint32_t>(k);
    bank.feature_dim = static_cast<std::uint32_t>(f);
    for (int d = 0; d < k; ++d) {
        for (int i = 0; i < per_domain; ++i) {
            Eigen::VectorXd v(f);
            for (int j = 0; j < f; ++j) v[j] = rng.normal(0.0, 0.1);
            v[d % f] += 10.0;
            bank.rows.push_back({static_cast<std::uint32_t>(d), v});
        }
    }
    return bank;
}

}  // namespace

TEST_CASE("agg weights validate the simplex") {
    CHECK_THROWS_AS((void)AggWeights::from(Eigen::Vector3d(0.5, 0.2, 0.2)), TensorError);
    CHECK_THROWS_AS((void)AggWeights::from(Eigen::Vector3d(1.5, -0.3, -0.2)), TensorError);
    AggWeights w = AggWeights::from(Eigen::Vector3d(0.5, 0.25, 0.25));
    CHECK(w.k() == 3);
    int hot = -1;
    CHECK(!w.exact_one_hot(&hot));
    CHECK(AggWeights::one_hot(4, 2).exact_one_hot(&hot));
    CHECK(hot == 2);
}

TEST_CASE("frozen extractor is deterministic and shared by seed") {
    FeatureExtractor a = FeatureExtractor::build(small_extractor(), 77);
    FeatureExtractor b = FeatureExtractor::build(small_extractor(), 77);
    CHECK(a.feature_dim() == 16);

    Tensor img = Tensor::full({1, 1, 16, 16}, 0.5);
    Eigen::VectorXd fa = a.extract(img);
    Eigen::VectorXd fb = b.extract(img);
    REQUIRE(fa.size() == 16);
    CHECK(std::memcmp(fa.data(), fb.data(), sizeof(double) * 16) == 0);
    CHECK(fa.allFinite());

    // repeated extraction of the same image is bitwise stable
    Eigen::VectorXd fa2 = a.extract(img);
    CHECK(std::memcmp(fa.data(), fa2.data(), sizeof(double) * 16) == 0);

    SUBCASE("features distinguish differently styled images") {
        FederationDataset ds = generate(3, 20, 16, 3);
        Eigen::VectorXd f0 = a.extract(ds.train[0][0].image);
        Eigen::VectorXd f1 = a.extract(ds.train[1][0].image);  // same content, other style
        const double cos = f0.dot(f1) / (f0.norm() * f1.norm());
        CHECK(cos < 1.0 - 1e-9);
    }
}

TEST_CASE("bank construction counts, determinism and the privacy boundary") {
    FeatureExtractor fx = FeatureExtractor::build(small_extractor(), 5);
    FederationDataset ds = generate(3, 20, 16, 9);
    std::vector<std::vector<Tensor>> images(3);
    for (int d = 0; d < 3; ++d)
        for (int i = 0; i < 10; ++i) images[d].push_back(ds.train[d][i].image);

    DomainFeatureBank bank = build_bank(images, fx);
    CHECK(bank.rows.size() == 30);
    CHECK(bank.k == 3);
    std::vector<int> counts(3, 0);
    for (const auto& r : bank.rows) counts[r.domain]++;
    CHECK(counts == std::vector<int>{10, 10, 10});

    DomainFeatureBank bank2 = build_bank(images, fx);
    CHECK(bank.bitwise_equal(bank2));

    // privacy: rows carry length-F vectors only, far smaller than any image
    for (const auto& r : bank.rows)
        CHECK(r.feature.size() == fx.feature_dim());
    CHECK(fx.feature_dim() < 16 * 16);

    CHECK_THROWS_AS((void)build_bank({images[0]}, fx), TensorError);
    images[1].clear();
    CHECK_THROWS_WITH_AS((void)build_bank(images, fx), doctest::Contains("no images"),
                         TensorError);
}

TEST_CASE("bank file round-trips bit-exactly and rejects corruption") {
    namespace fs = std::filesystem;
    DomainFeatureBank bank = separable_bank(3, 4, 8, 11);
    const fs::path path = fs::temp_directory_path() / "fedseg_bank_test.mlab";
    bank.save(path);
    DomainFeatureBank loaded = DomainFeatureBank::load(path);
    CHECK(bank.bitwise_equal(loaded));

    auto corrupt = [&](std::size_t offset, char value) {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(offset));
        f.write(&value, 1);
    };

    SUBCASE("bad magic") {
        corrupt(0, 'X');
        CHECK_THROWS_WITH_AS((void)DomainFeatureBank::load(path), doctest::Contains("magic"),
                             TensorError);
    }
    SUBCASE("version mismatch reports both versions") {
        corrupt(4, 9);
        CHECK_THROWS_WITH_AS((void)DomainFeatureBank::load(path),
                             doctest::Contains("version mismatch"), TensorError);
    }
    SUBCASE("out-of-range domain label") {
        // first row's domain field sits after magic+version+k+F+count
        corrupt(4 + 4 + 4 + 4 + 8, 7);
        CHECK_THROWS_WITH_AS((void)DomainFeatureBank::load(path),
                             doctest::Contains("out of range"), TensorError);
    }
    SUBCASE("truncation names the failing row") {
        fs::resize_file(path, fs::file_size(path) - 5);
        CHECK_THROWS_WITH_AS((void)DomainFeatureBank::load(path),
                             doctest::Contains("truncated"), TensorError);
    }
    fs::remove(path);
}

TEST_CASE("DAM outputs live on the simplex from initialization on") {
    Dam dam = Dam::init(8, 3, 123);
    Rng rng(5);
    for (int rep = 0; rep < 20; ++rep) {
        Eigen::VectorXd f(8);
        for (int j = 0; j < 8; ++j) f[j] = rng.uniform(-5.0, 5.0);
        Eigen::VectorXd p = dam.probs(f);
        CHECK(std::abs(p.sum() - 1.0) < 1e-9);
        for (int j = 0; j < 3; ++j) CHECK(p[j] >= 0.0);
    }
    CHECK_THROWS_AS((void)dam.probs(Eigen::VectorXd::Zero(9)), TensorError);
}

TEST_CASE("training on a separable bank reaches near-perfect accuracy, reproducibly") {
    DomainFeatureBank bank = separable_bank(3, 30, 8, 17);
    Dam dam = Dam::init(8, 3, 42);
    DamTrainResult log = train_dam(dam, bank, 100, 0.001, 7);
    CHECK(log.train_accuracy >= 0.99);
    CHECK(log.epoch_loss.size() == 100);
    CHECK(log.epoch_loss.back() < log.epoch_loss.front());

    SUBCASE("training-bank features classify to their own domain") {
        Eigen::Index arg;
        dam.probs(bank.rows[0].feature).maxCoeff(&arg);
        CHECK(arg == 0);
        dam.probs(bank.rows[35].feature).maxCoeff(&arg);
        CHECK(arg == 1);
    }

    SUBCASE("identical seeds reproduce identical training") {
        Dam dam2 = Dam::init(8, 3, 42);
        DamTrainResult log2 = train_dam(dam2, bank, 100, 0.001, 7);
        CHECK(log2.train_accuracy == log.train_accuracy);
        CHECK(log2.epoch_loss.back() == log.epoch_loss.back());
        Eigen::VectorXd pa = dam.probs(bank.rows[3].feature);
        Eigen::VectorXd pb = dam2.probs(bank.rows[3].feature);
        CHECK(std::memcmp(pa.data(), pb.data(), sizeof(double) * 3) == 0);
    }

    SUBCASE("epochs = 0 leaves the DAM at initialization") {
        Dam fresh = Dam::init(8, 3, 42);
        DamTrainResult none = train_dam(fresh, bank, 0, 0.001, 7);
        CHECK(none.epoch_loss.empty());
        Eigen::VectorXd p = fresh.probs(bank.rows[0].feature);
        CHECK(std::abs(p.sum() - 1.0) < 1e-9);
    }
}

TEST_CASE("weight inference averages per-feature similarities") {
    DomainFeatureBank bank = separable_bank(3, 30, 8, 19);
    Dam dam = Dam::init(8, 3, 1);
    (void)train_dam(dam, bank, 150, 0.002, 3);

    // two features from domains 0 and 1 with near-one-hot predictions
    Eigen::VectorXd f0 = bank.rows[2].feature;
    Eigen::VectorXd f1 = bank.rows[32].feature;
    AggWeights w = infer_weights(dam, {f0, f1});
    CHECK(std::abs(w.vec().sum() - 1.0) < 1e-9);
    CHECK(w[0] == doctest::Approx(0.5).epsilon(0.05));
    CHECK(w[1] == doctest::Approx(0.5).epsilon(0.05));
    CHECK(w[2] < 0.05);
}

TEST_CASE("bank features from the synthetic generator are linearly separable") {
    FeatureExtractor fx = FeatureExtractor::build(small_extractor(), 31);
    FederationDataset ds = generate(4, 20, 32, 13);
    std::vector<std::vector<Tensor>> images(4);
    for (int d = 0; d < 4; ++d)
        for (const auto& s : ds.train[static_cast<std::size_t>(d)])
            images[d].push_back(s.image);
    DomainFeatureBank bank = build_bank(images, fx);

    // linear probe: plain softmax regression, full-batch gradient descent
    const int f = fx.feature_dim(), k = 4;
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(k, f);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(k);
    // standardize features so one learning rate fits every coordinate
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(f), sd = Eigen::VectorXd::Zero(f);
    for (const auto& r : bank.rows) mu += r.feature;
    mu /= static_cast<double>(bank.rows.size());
    for (const auto& r : bank.rows) sd += (r.feature - mu).cwiseAbs2();
    sd = (sd / static_cast<double>(bank.rows.size())).cwiseSqrt().cwiseMax(1e-9);
    auto probs = [&](const Eigen::VectorXd& x) {
        Eigen::VectorXd z = w * ((x - mu).cwiseQuotient(sd)) + b;
        Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
        return Eigen::VectorXd(e / e.sum());
    };
    for (int epoch = 0; epoch < 200; ++epoch) {
        Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(k, f);
        Eigen::VectorXd gb = Eigen::VectorXd::Zero(k);
        for (const auto& r : bank.rows) {
            Eigen::VectorXd p = probs(r.feature);
            p[r.domain] -= 1.0;
            gw += p * ((r.feature - mu).cwiseQuotient(sd)).transpose();
            gb += p;
        }
        w -= 0.1 / bank.rows.size() * gw;
        b -= 0.1 / bank.rows.size() * gb;
    }
    int correct = 0;
    for (const auto& r : bank.rows) {
        Eigen::Index arg;
        probs(r.feature).maxCoeff(&arg);
        correct += static_cast<std::uint32_t>(arg) == r.domain;
    }
    const double accuracy = double(correct) / double(bank.rows.size());
    INFO("linear probe accuracy ", accuracy);
    CHECK(accuracy >= 0.90);
}

TEST_CASE("shuffled labels close the leakage channel") {
    FeatureExtractor fx = FeatureExtractor::build(small_extractor(), 31);
    FederationDataset ds = generate(4, 20, 32, 13);
    std::vector<std::vector<Tensor>> images(4);
    for (int d = 0; d < 4; ++d)
        for (const auto& s : ds.train[static_cast<std::size_t>(d)])
            images[d].push_back(s.image);
    DomainFeatureBank bank = build_bank(images, fx);

    Rng rng(55);
    const auto perm = rng.permutation(static_cast<std::int64_t>(bank.rows.size()));
    std::vector<std::uint32_t> labels;
    for (const auto& r : bank.rows) labels.push_back(r.domain);
    for (std::size_t i = 0; i < bank.rows.size(); ++i)
        bank.rows[i].domain = labels[static_cast<std::size_t>(perm[i])];

    Dam dam = Dam::init(fx.feature_dim(), 4, 2);
    DamTrainResult log = train_dam(dam, bank, 100, 0.001, 4);
    INFO("shuffled-label accuracy ", log.train_accuracy);
    CHECK(log.train_accuracy >= 0.25 - 0.10);
    CHECK(log.train_accuracy <= 0.25 + 0.10);
}

#include <doctest.h>

#include "fedseg/fedsim.hpp"
#include "fedseg/crc32.hpp"
#include "fedseg/rng.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace fedseg;

namespace {

NetConfig tiny_net(int bin_depth = 1) {
    NetConfig cfg;
    cfg.levels = 2;
    cfg.base_channels = 4;
    cfg.bin_depth = bin_depth;
    return cfg;
}

ParamSet random_params(Rng& rng, std::initializer_list<std::pair<const char*, Shape>> spec) {
    ParamSet ps;
    for (const auto& [name, shape] : spec) {
        Tensor t(shape);
        for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-2.0, 2.0);
        ps.add(name, std::move(t));
    }
    return ps;
}

FederationDataset tiny_data(std::uint64_t seed = 3) { return generate(3, 20, 16, seed); }

std::vector<ClientState> make_clients(const FederationDataset& ds, const NetConfig& cfg,
                                      const std::vector<int>& domains, std::uint64_t seed) {
    std::vector<ClientState> clients;
    for (int d : domains) {
        ClientState c;
        c.domain = d;
        c.data = &ds.train[static_cast<std::size_t>(d)];
        c.net = SegNet::build(cfg, Rng::derive(seed, {rng_tag::kNetInit, (std::uint64_t)d}));
        clients.push_back(std::move(c));
    }
    return clients;
}

}  // namespace

TEST_CASE("aggregate: one-hot identity, midpoint, convexity, linearity") {
    Rng rng(1);
    auto spec = {std::pair<const char*, Shape>{"a", {2, 3}},
                 std::pair<const char*, Shape>{"b", {4}}};
    std::vector<ParamSet> models;
    for (int i = 0; i < 3; ++i) models.push_back(random_params(rng, spec));

    SUBCASE("one-hot weights return the selected model bitwise") {
        ParamSet out = aggregate(models, AggWeights::one_hot(3, 1));
        CHECK(out.bitwise_equal(models[1]));
    }

    SUBCASE("two models with 0.0 and 2.0 average to 1.0") {
        ParamSet m0, m1;
        m0.add("x", Tensor::from({1}, {0.0}));
        m1.add("x", Tensor::from({1}, {2.0}));
        ParamSet out = aggregate({m0, m1}, AggWeights::uniform(2));
        CHECK(out.at("x").item() == 1.0);
    }

    SUBCASE("identical models are a fixed point for any weights") {
        std::vector<ParamSet> same = {models[0].clone(), models[0].clone(), models[0].clone()};
        ParamSet out = aggregate(same, AggWeights::from(Eigen::Vector3d(0.6, 0.3, 0.1)));
        for (std::size_t p = 0; p < out.size(); ++p)
            for (std::int64_t i = 0; i < out.items()[p].second.numel(); ++i)
                CHECK(out.items()[p].second.data()[i] ==
                      doctest::Approx(models[0].items()[p].second.data()[i]).epsilon(1e-12));
    }

    SUBCASE("convex envelope containment") {
        ParamSet out = aggregate(models, AggWeights::from(Eigen::Vector3d(0.2, 0.5, 0.3)));
        for (std::size_t p = 0; p < out.size(); ++p) {
            for (std::int64_t i = 0; i < out.items()[p].second.numel(); ++i) {
                double lo = 1e300, hi = -1e300;
                for (const auto& m : models) {
                    lo = std::min(lo, m.items()[p].second.data()[i]);
                    hi = std::max(hi, m.items()[p].second.data()[i]);
                }
                CHECK(out.items()[p].second.data()[i] >= lo - 1e-12);
                CHECK(out.items()[p].second.data()[i] <= hi + 1e-12);
            }
        }
    }

    SUBCASE("linearity in the weights") {
        Eigen::Vector3d u(0.7, 0.2, 0.1), v(0.1, 0.3, 0.6);
        const double alpha = 0.35;
        ParamSet lhs = aggregate(models, AggWeights::from(alpha * u + (1 - alpha) * v));
        ParamSet a = aggregate(models, AggWeights::from(u));
        ParamSet b = aggregate(models, AggWeights::from(v));
        for (std::size_t p = 0; p < lhs.size(); ++p)
            for (std::int64_t i = 0; i < lhs.items()[p].second.numel(); ++i) {
                const double rhs = alpha * a.items()[p].second.data()[i] +
                                   (1 - alpha) * b.items()[p].second.data()[i];
                CHECK(lhs.items()[p].second.data()[i] == doctest::Approx(rhs).epsilon(1e-12));
            }
    }

    SUBCASE("signature and weight validation") {
        std::vector<ParamSet> bad = {models[0].clone(), random_params(rng, spec)};
        bad[1].add("extra", Tensor::zeros({1}));
        CHECK_THROWS_WITH_AS((void)aggregate(bad, AggWeights::uniform(2)),
                             doctest::Contains("signature"), TensorError);
        CHECK_THROWS_AS((void)aggregate(models, AggWeights::uniform(2)), TensorError);
        CHECK_THROWS_AS((void)AggWeights::from(Eigen::Vector3d(0.4, 0.4, 0.4)), TensorError);
    }
}

TEST_CASE("fedavg weights reproduce the case-ratio example exactly") {
    AggWeights w = fedavg_weights(std::vector<std::int64_t>{30, 30, 19, 13, 12, 12});
    CHECK(w[0] == 30.0 / 116.0);
    CHECK(w[1] == 30.0 / 116.0);
    CHECK(w[2] == 19.0 / 116.0);
    CHECK(w[3] == 13.0 / 116.0);
    CHECK(w[4] == 12.0 / 116.0);
    CHECK(w[5] == 12.0 / 116.0);

    AggWeights eq = fedavg_weights(std::vector<std::int64_t>{7, 7, 7});
    for (int i = 0; i < 3; ++i) CHECK(eq[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));
    AggWeights solo = fedavg_weights(std::vector<std::int64_t>{5});
    CHECK(solo[0] == 1.0);
    CHECK_THROWS_AS((void)fedavg_weights(std::vector<std::int64_t>{}), TensorError);
    CHECK_THROWS_AS((void)fedavg_weights(std::vector<std::int64_t>{0, 0}), TensorError);
}

TEST_CASE("learning-rate schedule") {
    LrSchedule s;  // 0.01, step 100, factor 0.8
    CHECK(s.at(0) == 0.01);
    CHECK(s.at(99) == 0.01);
    CHECK(s.at(100) == doctest::Approx(0.008).epsilon(1e-12));
    CHECK(s.at(250) == doctest::Approx(0.0064).epsilon(1e-12));
}

TEST_CASE("local_train with zero epochs echoes the global parameters") {
    FederationDataset ds = tiny_data();
    auto clients = make_clients(ds, tiny_net(), {0}, 4);
    ParamSet global = SegNet::build(tiny_net(), 11).snapshot();
    ClientToServer reply = local_train(clients[0], {0, global.clone()}, 0, 8, {}, 0, 5);
    CHECK(reply.params.bitwise_equal(global));
    CHECK(reply.n == 15);
    CHECK(reply.domain == 0);
}

TEST_CASE("local training reduces the loss on the client's own data") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        FederationDataset ds = tiny_data(seed);
        auto clients = make_clients(ds, tiny_net(), {1}, seed);
        ParamSet global = SegNet::build(tiny_net(), Rng::derive(seed, {rng_tag::kNetInit}))
                              .snapshot();
        double before = 0.0, after = 0.0;
        (void)local_train(clients[0], {0, global.clone()}, 1, 8, {}, 0, seed, &before);
        (void)local_train(clients[0], {1, clients[0].net.snapshot()}, 1, 8, {}, 1, seed,
                          &after);
        CHECK(after > before);  // mean train dice rises as loss falls
    }
}

TEST_CASE("identical clients produce identical updates") {
    FederationDataset ds = tiny_data();
    NetConfig cfg = tiny_net();
    ClientState a, b;
    a.domain = b.domain = 2;  // same stream key: same domain, same data
    a.data = b.data = &ds.train[2];
    a.net = SegNet::build(cfg, 1);
    b.net = SegNet::build(cfg, 2);  // different initial nets are overwritten by load
    ParamSet global = SegNet::build(cfg, 9).snapshot();
    ClientToServer ra = local_train(a, {0, global.clone()}, 1, 4, {}, 0, 77);
    ClientToServer rb = local_train(b, {0, global.clone()}, 1, 4, {}, 0, 77);
    CHECK(ra.params.bitwise_equal(rb.params));
}

TEST_CASE("zero rounds returns the seed-initialized model") {
    FederationDataset ds = tiny_data();
    auto clients = make_clients(ds, tiny_net(), {0, 1}, 5);
    FederationResult fed = run_federation(clients, tiny_net(), 0, 1, 8, {}, 5);
    ParamSet expected = SegNet::build(tiny_net(), Rng::derive(5, {rng_tag::kNetInit})).snapshot();
    CHECK(fed.global.bitwise_equal(expected));
    CHECK(fed.local_models.size() == 2);
}

TEST_CASE("one client federation equals centralized training") {
    FederationDataset ds = tiny_data();
    NetConfig cfg = tiny_net();
    auto clients = make_clients(ds, cfg, {1}, 7);
    FederationResult fed = run_federation(clients, cfg, 3, 1, 8, {}, 7);

    // manual trajectory: load -> train -> snapshot each round
    ClientState solo;
    solo.domain = 1;
    solo.data = &ds.train[1];
    solo.net = SegNet::build(cfg, 123);
    ParamSet global = SegNet::build(cfg, Rng::derive(7, {rng_tag::kNetInit})).snapshot();
    for (int round = 0; round < 3; ++round) {
        ClientToServer reply = local_train(solo, {round, global.clone()}, 1, 8, {}, round, 7);
        global = std::move(reply.params);
    }
    CHECK(fed.global.bitwise_equal(global));
}

TEST_CASE("two clients with identical data follow the solo trajectory") {
    FederationDataset ds = tiny_data();
    NetConfig cfg = tiny_net();
    // both clients share domain id, data and therefore the sample stream
    std::vector<ClientState> pair;
    for (int i = 0; i < 2; ++i) {
        ClientState c;
        c.domain = 0;
        c.data = &ds.train[0];
        c.net = SegNet::build(cfg, 50 + i);
        pair.push_back(std::move(c));
    }
    FederationResult fed = run_federation(pair, cfg, 2, 1, 8, {}, 13);

    auto solo = make_clients(ds, cfg, {0}, 13);
    FederationResult ref = run_federation(solo, cfg, 2, 1, 8, {}, 13);
    REQUIRE(fed.global.same_signature(ref.global));
    for (std::size_t p = 0; p < fed.global.size(); ++p) {
        const auto& a = fed.global.items()[p].second.array();
        const auto& b = ref.global.items()[p].second.array();
        CHECK((a - b).abs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("federation results do not depend on client scheduling") {
    FederationDataset ds = tiny_data();
    auto c1 = make_clients(ds, tiny_net(), {0, 1, 2}, 6);
    auto c2 = make_clients(ds, tiny_net(), {0, 1, 2}, 6);
    FederationResult parallel = run_federation(c1, tiny_net(), 2, 1, 8, {}, 21, true);
    FederationResult serial = run_federation(c2, tiny_net(), 2, 1, 8, {}, 21, false);
    CHECK(parallel.global.bitwise_equal(serial.global));
    REQUIRE(parallel.local_models.size() == 3);
    for (int i = 0; i < 3; ++i)
        CHECK(parallel.local_models[i].bitwise_equal(serial.local_models[i]));
    CHECK(parallel.rounds.size() == 2);
    CHECK(parallel.rounds[0].client_train_dice == serial.rounds[0].client_train_dice);
}

TEST_CASE("mla inference composes aggregation and forward") {
    FederationDataset ds = tiny_data();
    NetConfig cfg = tiny_net();
    auto clients = make_clients(ds, cfg, {0, 1, 2}, 8);
    FederationResult fed = run_federation(clients, cfg, 1, 1, 8, {}, 8);

    Tensor batch({2, 1, 16, 16});
    std::copy_n(ds.test[0][0].image.data(), 256, batch.data());
    std::copy_n(ds.test[0][1].image.data(), 256, batch.data() + 256);

    SUBCASE("one-hot weights reproduce the selected local model exactly") {
        Tensor via_mla = mla_inference_with_weights(cfg, fed.local_models,
                                                    AggWeights::one_hot(3, 2), batch);
        Tensor direct = aggregate_forward(cfg, fed.local_models[2], batch);
        CHECK(std::memcmp(via_mla.data(), direct.data(),
                          sizeof(double) * via_mla.numel()) == 0);
    }
    SUBCASE("uniform weights reproduce the plain average model") {
        Tensor via_mla = mla_inference_with_weights(cfg, fed.local_models,
                                                    AggWeights::uniform(3), batch);
        Tensor direct =
            aggregate_forward(cfg, aggregate(fed.local_models, AggWeights::uniform(3)), batch);
        CHECK(std::memcmp(via_mla.data(), direct.data(),
                          sizeof(double) * via_mla.numel()) == 0);
    }
}

TEST_CASE("round messages cannot carry image-shaped tensors") {
    FederationDataset ds = tiny_data();
    auto clients = make_clients(ds, tiny_net(), {0, 1}, 9);
    ParamSet global = SegNet::build(tiny_net(), Rng::derive(9, {rng_tag::kNetInit})).snapshot();
    ClientToServer up = local_train(clients[0], {0, global.clone()}, 1, 8, {}, 0, 9);

    const std::int64_t h = 16, w = 16;
    auto image_shaped = [&](const ParamSet& ps) {
        for (const auto& [name, t] : ps.items()) {
            const auto& s = t.shape();
            if (s.size() >= 2 && s[s.size() - 2] == h && s[s.size() - 1] == w) return true;
        }
        return false;
    };
    std::vector<RoundMessage> messages;
    messages.emplace_back(ServerToClient{0, global.clone()});
    messages.emplace_back(std::move(up));
    messages.emplace_back(FeatureUpload{0, {Eigen::VectorXd::Zero(16)}});
    for (const auto& msg : messages) {
        std::visit(
            [&](const auto& m) {
                using T = std::decay_t<decltype(m)>;
                if constexpr (std::is_same_v<T, ServerToClient>) {
                    CHECK(!image_shaped(m.global));
                } else if constexpr (std::is_same_v<T, ClientToServer>) {
                    CHECK(!image_shaped(m.params));
                } else {
                    // FeatureUpload holds flat vectors by construction; verify length
                    for (const auto& fvec : m.features) CHECK(fvec.size() < h * w);
                }
            },
            msg);
    }

    SUBCASE("the serialized form carries no image-shaped entry either") {
        namespace fs = std::filesystem;
        const fs::path path = fs::temp_directory_path() / "fedseg_audit.mlbn";
        const auto& params = std::get<ClientToServer>(messages[1]).params;
        save_checkpoint(params, path);
        ParamSet loaded = load_checkpoint(path);
        CHECK(!image_shaped(loaded));
        fs::remove(path);
    }
}

TEST_CASE("checkpoint round trip and corruption handling") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "fedseg_ckpt_test.mlbn";
    ParamSet ps = SegNet::build(tiny_net(), 33).snapshot();
    save_checkpoint(ps, path);
    ParamSet loaded = load_checkpoint(path);
    CHECK(ps.bitwise_equal(loaded));

    const auto size = fs::file_size(path);
    auto corrupt = [&](std::size_t offset, char value) {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(offset));
        f.write(&value, 1);
    };

    SUBCASE("bad magic") {
        corrupt(1, 'x');
        CHECK_THROWS_WITH_AS((void)load_checkpoint(path), doctest::Contains("magic"),
                             TensorError);
    }
    SUBCASE("version mismatch reports both versions") {
        corrupt(4, 3);
        // the CRC guard fires first unless it is recomputed, so rewrite it too
        std::string buf;
        {
            std::ifstream f(path, std::ios::binary);
            buf.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
        }
        const std::uint32_t crc = fedseg::crc32(buf.data(), buf.size() - 4);
        {
            std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
            f.seekp(static_cast<std::streamoff>(buf.size() - 4));
            f.write(reinterpret_cast<const char*>(&crc), 4);
        }
        CHECK_THROWS_WITH_AS((void)load_checkpoint(path),
                             doctest::Contains("file has 3, reader expects 1"), TensorError);
    }
    SUBCASE("flipped payload byte fails the checksum") {
        corrupt(200, 'z');
        CHECK_THROWS_WITH_AS((void)load_checkpoint(path), doctest::Contains("checksum"),
                             TensorError);
    }
    SUBCASE("truncation names the parameter being read") {
        fs::resize_file(path, size - 12);
        try {
            (void)load_checkpoint(path);
            FAIL("expected an error");
        } catch (const TensorError& e) {
            const std::string what = e.what();
            // the CRC guard fires before parsing on a plainly truncated file
            const bool detected = what.find("truncated") != std::string::npos ||
                                  what.find("checksum") != std::string::npos ||
                                  what.find("too short") != std::string::npos;
            CHECK(detected);
        }
    }
    fs::remove(path);
}

TEST_CASE("truncated checkpoint payload names the offending parameter") {
    // bypass the CRC by rebuilding a consistent file that simply ends early
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "fedseg_ckpt_trunc.mlbn";
    ParamSet ps;
    ps.add("alpha", Tensor::from({2}, {1.0, 2.0}));
    ps.add("beta.gamma", Tensor::from({3}, {3.0, 4.0, 5.0}));
    save_checkpoint(ps, path);

    std::string buf;
    {
        std::ifstream f(path, std::ios::binary);
        buf.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    }
    buf.resize(buf.size() - 4 - 10);  // drop the CRC and part of beta.gamma's data
    const std::uint32_t crc = fedseg::crc32(buf.data(), buf.size());
    buf.append(reinterpret_cast<const char*>(&crc), 4);
    {
        std::ofstream f(path, std::ios::binary);
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
    CHECK_THROWS_WITH_AS((void)load_checkpoint(path), doctest::Contains("beta.gamma"),
                         TensorError);
    fs::remove(path);
}

#include "fedseg/segnet.hpp"

#include "fedseg/rng.hpp"

#include <cmath>

namespace fedseg {

namespace {

// epsilon of the style-normalizing IN layers; tiny so that the affine
// invariance holds to ~1e-9 rather than ~1e-5
constexpr double kInEps = 1e-12;

}  // namespace

const char* block_kind_name(BlockKind k) {
    switch (k) {
        case BlockKind::PlainConv: return "plain";
        case BlockKind::BIN: return "bin";
        case BlockKind::IBN: return "ibn";
    }
    return "?";
}

void NetConfig::validate() const {
    if (levels < 1) throw TensorError("NetConfig: levels must be >= 1");
    if (base_channels < 1) throw TensorError("NetConfig: base_channels must be >= 1");
    if (bin_depth < 0 || bin_depth > levels)
        throw TensorError("NetConfig: bin_depth " + std::to_string(bin_depth) +
                          " out of range [0, " + std::to_string(levels) + "]");
    if (in_channels < 1 || out_channels < 1)
        throw TensorError("NetConfig: channel counts must be positive");
    if (shallow_kind == BlockKind::IBN && bin_depth > 0 && base_channels < 2)
        throw TensorError("NetConfig: IBN blocks need base_channels >= 2 to split");
}

std::int64_t NetConfig::level_channels(int level) const {
    return static_cast<std::int64_t>(base_channels) << (level - 1);
}

SegNet SegNet::build(const NetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    SegNet net;
    net.cfg_ = cfg;
    Rng rng(seed);

    auto make_conv = [&](std::int64_t in_c, std::int64_t out_c, std::int64_t k) {
        Conv c;
        c.pad = static_cast<int>(k / 2);
        c.w = Tensor({out_c, in_c, k, k});
        const double stddev = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
        for (std::int64_t i = 0; i < c.w.numel(); ++i) c.w.data()[i] = rng.normal(0.0, stddev);
        c.w.set_requires_grad(true);
        c.b = Tensor::zeros({out_c});
        c.b.set_requires_grad(true);
        return c;
    };
    auto make_bn = [&](std::int64_t c) {
        Bn bn;
        bn.gamma = Tensor::full({c}, 1.0);
        bn.gamma.set_requires_grad(true);
        bn.beta = Tensor::zeros({c});
        bn.beta.set_requires_grad(true);
        bn.running_mean = Tensor::zeros({c});
        bn.running_var = Tensor::full({c}, 1.0);
        bn.batches = Tensor::scalar(0.0);
        return bn;
    };
    auto bn_channels = [&](BlockKind kind, std::int64_t c) {
        // the IBN block batch-normalizes only the second half of the split
        return kind == BlockKind::IBN ? c - c / 2 : c;
    };
    auto reg_sub = [&](const std::string& prefix, Sub& s) {
        net.registry_.emplace_back(prefix + ".conv.w", s.conv.w);
        net.registry_.emplace_back(prefix + ".conv.b", s.conv.b);
        net.registry_.emplace_back(prefix + ".bn.gamma", s.bn.gamma);
        net.registry_.emplace_back(prefix + ".bn.beta", s.bn.beta);
        net.registry_.emplace_back(prefix + ".bn.running_mean", s.bn.running_mean);
        net.registry_.emplace_back(prefix + ".bn.running_var", s.bn.running_var);
        net.registry_.emplace_back(prefix + ".bn.batches", s.bn.batches);
    };
    auto make_block = [&](BlockKind kind, std::int64_t in_c, std::int64_t out_c) {
        Block b;
        b.kind = kind;
        b.s1.conv = make_conv(in_c, out_c, 3);
        b.s1.bn = make_bn(bn_channels(kind, out_c));
        b.s2.conv = make_conv(out_c, out_c, 3);
        b.s2.bn = make_bn(bn_channels(kind, out_c));
        return b;
    };

    // encoder
    for (int l = 1; l <= cfg.levels; ++l) {
        const BlockKind kind = l <= cfg.bin_depth ? cfg.shallow_kind : BlockKind::PlainConv;
        const std::int64_t in_c = l == 1 ? cfg.in_channels : cfg.level_channels(l - 1);
        net.enc_.push_back(make_block(kind, in_c, cfg.level_channels(l)));
        const std::string name = "enc" + std::to_string(l);
        reg_sub(name + ".sub1", net.enc_.back().s1);
        reg_sub(name + ".sub2", net.enc_.back().s2);
    }
    // decoder, deepest first (restores level l from level l+1)
    for (int l = cfg.levels - 1; l >= 1; --l) {
        const std::int64_t skip_c = cfg.level_channels(l);
        const std::int64_t up_c = cfg.level_channels(l + 1);
        net.dec_.push_back(make_block(BlockKind::PlainConv, skip_c + up_c, skip_c));
        const std::string name = "dec" + std::to_string(l);
        reg_sub(name + ".sub1", net.dec_.back().s1);
        reg_sub(name + ".sub2", net.dec_.back().s2);
    }
    // head
    net.head_ = make_conv(cfg.base_channels, cfg.out_channels, 1);
    net.registry_.emplace_back("head.w", net.head_.w);
    net.registry_.emplace_back("head.b", net.head_.b);
    return net;
}

Tensor SegNet::apply_sub(Sub& s, BlockKind kind, const Tensor& x, bool train) {
    Tensor y = conv2d(x, s.conv.w, s.conv.b, s.conv.pad, 1, PadMode::Replicate);
    switch (kind) {
        case BlockKind::PlainConv:
            y = batch_norm(y, s.bn.gamma, s.bn.beta, s.bn.running_mean, s.bn.running_var,
                           s.bn.batches, train);
            break;
        case BlockKind::BIN:
            y = batch_norm(y, s.bn.gamma, s.bn.beta, s.bn.running_mean, s.bn.running_var,
                           s.bn.batches, train);
            y = instance_norm(y, kInEps);
            break;
        case BlockKind::IBN: {
            const std::int64_t c = y.dim(1);
            const std::int64_t half = c / 2;
            Tensor in_part = instance_norm(slice_channels(y, 0, half), kInEps);
            Tensor bn_part = batch_norm(slice_channels(y, half, c), s.bn.gamma, s.bn.beta,
                                        s.bn.running_mean, s.bn.running_var, s.bn.batches, train);
            y = concat_channels(in_part, bn_part);
            break;
        }
    }
    return relu(y);
}

Tensor SegNet::apply_block(Block& b, const Tensor& x, bool train) {
    return apply_sub(b.s2, b.kind, apply_sub(b.s1, b.kind, x, train), train);
}

Tensor SegNet::forward(const Tensor& batch, bool train) {
    if (!defined()) throw TensorError("SegNet: forward on an unbuilt net");
    if (batch.rank() != 4 || batch.dim(1) != cfg_.in_channels)
        throw TensorError("SegNet: expected input [N, " + std::to_string(cfg_.in_channels) +
                          ", H, W], got " + shape_str(batch.shape()));
    const std::int64_t div = std::int64_t{1} << (cfg_.levels - 1);
    if (batch.dim(2) % div != 0 || batch.dim(3) % div != 0)
        throw TensorError("SegNet: spatial size " + shape_str(batch.shape()) +
                          " not divisible by " + std::to_string(div));

    std::vector<Tensor> skips;
    Tensor f = batch;
    for (int l = 0; l < cfg_.levels; ++l) {
        f = apply_block(enc_[static_cast<std::size_t>(l)], f, train);
        if (l < cfg_.levels - 1) {
            skips.push_back(f);
            f = max_pool2x2(f);
        }
    }
    for (std::size_t i = 0; i < dec_.size(); ++i) {
        f = upsample_nearest2x(f);
        f = concat_channels(skips[skips.size() - 1 - i], f);
        f = apply_block(dec_[i], f, train);
    }
    Tensor logits = conv2d(f, head_.w, head_.b, 0, 1, PadMode::Zero);
    return sigmoid(logits);
}

ParamSet SegNet::snapshot() const {
    ParamSet ps;
    for (const auto& [name, t] : registry_) {
        Tensor c = t.clone();
        c.set_requires_grad(false);
        ps.add(name, std::move(c));
    }
    return ps;
}

void SegNet::load(const ParamSet& params) {
    if (params.size() != registry_.size())
        throw TensorError("SegNet::load: expected " + std::to_string(registry_.size()) +
                          " entries, got " + std::to_string(params.size()));
    for (auto& [name, t] : registry_) {
        const Tensor& src = params.at(name);
        if (src.shape() != t.shape())
            throw TensorError("SegNet::load: shape mismatch for '" + name + "': " +
                              shape_str(src.shape()) + " vs " + shape_str(t.shape()));
        t.array() = src.array();
    }
}

std::vector<Tensor> SegNet::trainable() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : registry_)
        if (t.requires_grad()) out.push_back(t);
    return out;
}

void SegNet::zero_grad() {
    for (auto& [name, t] : registry_) t.zero_grad();
}

SegNet build_segnet(const NetConfig& cfg, std::uint64_t seed) { return SegNet::build(cfg, seed); }

SegNet build_ibn_segnet(const NetConfig& cfg, std::uint64_t seed) {
    NetConfig ibn = cfg;
    ibn.shallow_kind = BlockKind::IBN;
    return SegNet::build(ibn, seed);
}

std::vector<BlockKind> SegNet::encoder_kinds() const {
    std::vector<BlockKind> kinds;
    for (const auto& b : enc_) kinds.push_back(b.kind);
    return kinds;
}

}  // namespace fedseg

#pragma once

#include "fedseg/ops.hpp"
#include "fedseg/params.hpp"
#include "fedseg/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace fedseg {

enum class BlockKind {
    PlainConv,  // (conv3x3 - BN - ReLU) x2
    BIN,        // (conv3x3 - BN - IN - ReLU) x2
    IBN,        // (conv3x3 - split half-IN / half-BN - concat - ReLU) x2
};

const char* block_kind_name(BlockKind k);

struct NetConfig {
    int levels = 5;         // encoder depth, bottleneck included
    int base_channels = 8;  // width of level 1, doubling per level
    int bin_depth = 3;      // how many top encoder levels use shallow_kind
    BlockKind shallow_kind = BlockKind::BIN;
    int in_channels = 1;
    int out_channels = 1;

    void validate() const;
    std::int64_t level_channels(int level) const;  // 1-based
};

// U-Net style segmentation network: encoder blocks with max-pooling,
// nearest-neighbour upsampling decoder with skip concatenation, 1x1 conv +
// sigmoid head. Encoder levels 1..bin_depth use the configured shallow
// block; everything else (deeper encoder levels and the whole decoder) is
// a plain conv block. All convolutions replicate-pad so that a global
// affine intensity change of the input stays an exact per-channel affine
// change of conv outputs, which the first IN then removes.
class SegNet {
public:
    SegNet() = default;
    SegNet(const SegNet&) = delete;
    SegNet& operator=(const SegNet&) = delete;
    SegNet(SegNet&&) = default;
    SegNet& operator=(SegNet&&) = default;

    // Deterministic He-normal initialization from the seed; the draw order
    // does not depend on the block kind, so nets built with different kinds
    // but the same seed share conv weights bitwise.
    static SegNet build(const NetConfig& cfg, std::uint64_t seed);

    Tensor forward(const Tensor& batch, bool train);

    // Named snapshot of every parameter and BN statistic, in a stable order.
    ParamSet snapshot() const;
    void load(const ParamSet& params);

    std::vector<Tensor> trainable() const;
    void zero_grad();

    const NetConfig& config() const { return cfg_; }
    std::vector<BlockKind> encoder_kinds() const;
    bool defined() const { return !enc_.empty(); }

private:
    struct Conv {
        Tensor w, b;
        int pad = 1;
    };
    struct Bn {
        Tensor gamma, beta, running_mean, running_var, batches;
    };
    struct Sub {
        Conv conv;
        Bn bn;
    };
    struct Block {
        BlockKind kind = BlockKind::PlainConv;
        Sub s1, s2;
    };

    Tensor apply_sub(Sub& s, BlockKind kind, const Tensor& x, bool train);
    Tensor apply_block(Block& b, const Tensor& x, bool train);

    NetConfig cfg_;
    std::vector<Block> enc_;  // size levels
    std::vector<Block> dec_;  // size levels-1, deepest first
    Conv head_;
    std::vector<std::pair<std::string, Tensor>> registry_;
};

// Builders for the two shallow-block families: build_segnet honors the
// configured kind (BIN by default), build_ibn_segnet forces the IBN variant
// in the top bin_depth levels.
SegNet build_segnet(const NetConfig& cfg, std::uint64_t seed);
SegNet build_ibn_segnet(const NetConfig& cfg, std::uint64_t seed);

}  // namespace fedseg

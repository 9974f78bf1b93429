#pragma once

#include "fedseg/tensor.hpp"

#include <vector>

namespace fedseg {

enum class PadMode {
    Zero,       // out-of-image taps read 0
    Replicate,  // out-of-image taps read the nearest edge pixel
};

// 2D cross-correlation. input NCHW, weight (out, in, kh, kw) with square
// 1x1 or 3x3 kernels, bias (out). Backward produces gradients for input,
// weight and bias.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int padding, int stride = 1, PadMode pad_mode = PadMode::Zero);

// Batch normalization over (N, H, W) per channel, biased variance. Train
// mode updates running stats in place (exponential moving average) and
// bumps `tracked`; eval mode requires tracked > 0 and uses the running
// stats. gamma/beta are the learnable affine.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, Tensor& tracked,
                  bool train, double momentum = 0.1, double epsilon = 1e-5);

// Per-(instance, channel) standardization over H, W with biased variance.
// No learnable affine, which is what makes the output exactly invariant to
// positive per-channel affine maps of the input (up to the epsilon guard).
Tensor instance_norm(const Tensor& input, double epsilon = 1e-12);

Tensor relu(const Tensor& input);
Tensor sigmoid(const Tensor& input);

// 2x2 max pooling with stride 2; H and W must be even. Ties give the
// gradient to the first maximal element in row-major window order.
Tensor max_pool2x2(const Tensor& input);

Tensor upsample_nearest2x(const Tensor& input);

// NCHW -> NC mean over the spatial extent.
Tensor global_avg_pool(const Tensor& input);

// input (N, F), weight (out, F), bias (out) -> (N, out)
Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias);

// row-wise softmax on (N, C)
Tensor softmax(const Tensor& input);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& input, std::int64_t c_begin, std::int64_t c_end);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor reshape(const Tensor& input, Shape shape);

// 1 - (2*sum(P*G) + eps) / (sum P + sum G + eps), differentiable in pred.
// target must be exactly binary.
Tensor dice_loss(const Tensor& pred, const Tensor& target, double epsilon = 1e-5);

// probs is a row-stochastic (N, C) matrix (post-softmax); returns the mean
// over rows of -log(probs[row, label]), probabilities clamped at 1e-12.
Tensor cross_entropy(const Tensor& probs, const std::vector<std::int64_t>& labels);

}  // namespace fedseg

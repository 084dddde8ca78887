#pragma once

#include <cstddef>
#include <vector>

#include "fedmenu/autograd.hpp"

namespace fedmenu::ops {

/// Zero-padded cross-correlation. input [B,Cin,H,W], kernel [Cout,Cin,kh,kw], bias [Cout].
/// kh and kw must be odd; the output extent (H + 2*padding - kh)/stride + 1 must divide exactly.
Var conv2d(const Var& input, const Var& kernel, const Var& bias, int stride, int padding);

/// Per-(batch, channel) plane normalization (x - mean) / sqrt(var + eps), no affine.
Var instance_norm(const Var& input, double eps);

Var leaky_relu(const Var& input, double slope);

/// Softmax across the channel axis with max subtraction.
Var softmax_channels(const Var& input);

/// 2x2 stride-2 max pooling. Ties route to the first element in row-major scan order.
Var maxpool2(const Var& input);

/// Nearest-neighbour 2x upsampling.
Var upsample2(const Var& input);

/// Concatenates along the channel axis in argument order.
Var concat_channels(const std::vector<Var>& parts);

/// Sums the listed channels into a single channel: [B,C,H,W] -> [B,1,H,W].
Var channel_sum(const Var& input, const std::vector<std::size_t>& channels);

/// [B,1,H,W] -> [B,2,H,W] holding (1 - x, x).
Var binary_pair(const Var& input);

/// Elementwise clamp to [lo, hi]; gradient passes only strictly inside the interval.
Var clamp(const Var& input, double lo, double hi);

/// Selects batch entries in the given order.
Var batch_select(const Var& input, const std::vector<std::size_t>& indices);

/// Mean over pixels of -sum_c y_c * ln(max(p_c, clamp_eps)).
Var cross_entropy(const Var& probs, const Tensor& onehot, double clamp_eps);

/// Mean over batch and channels of 1 - (2 sum(p*y) + smooth) / (sum(p) + sum(y) + smooth).
Var dice(const Var& probs, const Tensor& onehot, double smooth);

/// sum_i weights[i] * terms[i], accumulated left to right. All terms share one shape.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

Var mul(const Var& a, const Var& b);

/// Sum of all elements as a scalar.
Var sum(const Var& input);

}  // namespace fedmenu::ops

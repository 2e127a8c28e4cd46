#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fcan/tensor.hpp"

namespace fcan {

struct Conv2dParams {
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t dilation = 1;
};

/// Output extent of a convolution along one axis; throws when the dilated
/// kernel does not fit the padded input.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, const Conv2dParams& p);

/// Cross-correlation. input is [C_in,H,W] or [N,C_in,H,W]; kernel is
/// [C_out,C_in,kh,kw]; bias, when non-empty, is [C_out].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Conv2dParams& params = {});
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, const Conv2dParams& params);

constexpr double kBatchNormEps = 1e-5;
constexpr double kBatchNormMomentum = 0.9;

enum class BnMode { Train, Eval };

/// Running per-channel statistics. Variances are population (biased) variances.
struct BatchNormStats {
    std::vector<double> mean;
    std::vector<double> var;

    explicit BatchNormStats(std::size_t channels = 0) : mean(channels, 0.0), var(channels, 1.0) {}
};

/// x is [C,H,W] or [N,C,H,W]. Train mode normalizes with the batch's own
/// statistics and folds them into `stats` by EMA (running = 0.9 running + 0.1 batch)
/// unless update_stats is false; eval mode normalizes with `stats`.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, BnMode mode,
                  bool update_stats = true);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// Bilinear resize of the last two axes with half-pixel centres (align_corners = false).
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor bilinear_upsample(const Tensor& x, std::size_t factor);

/// Average pooling of the last two axes into bins x bins near-equal regions.
Tensor adaptive_avg_pool(const Tensor& x, std::size_t bins);

/// Concatenates along the channel axis (axis 0 for rank 3, axis 1 for rank 4).
Tensor concat_channels(const std::vector<Tensor>& parts);

Tensor reshape(const Tensor& x, Shape shape);
/// Item n of a batch tensor, rank reduced by one.
Tensor select(const Tensor& x, std::size_t n);
/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& items);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// mean((a - b)^2) over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

/// mean(log(clamp(x, eps, 1-eps))); clamped counts how many entries hit the clamp.
Tensor mean_log(const Tensor& x, double eps, std::size_t* clamped = nullptr);
/// mean(log(1 - clamp(x, eps, 1-eps))).
Tensor mean_log1m(const Tensor& x, double eps, std::size_t* clamped = nullptr);

/// G[i][j] = <vec(M_i), vec(M_j)> / (H*W) for M of shape [N,H,W].
Tensor gram_matrix(const Tensor& features);

inline constexpr std::int32_t kIgnoreLabel = 255;

struct CrossEntropy {
    Tensor loss;
    std::size_t counted = 0;
    bool all_ignored = false;
};

/// Mean per-pixel softmax cross-entropy. logits [K,H,W] or [N,K,H,W]; labels
/// hold N*H*W entries, each in [0,K) or ignore_index.
CrossEntropy softmax_ce_loss(const Tensor& logits, std::span<const std::int32_t> labels,
                             std::int32_t ignore_index = kIgnoreLabel);

/// Channel softmax of [K,H,W] or [N,K,H,W]. Not recorded.
Tensor softmax_channels(const Tensor& logits);

/// Per-pixel argmax over channels of [K,H,W].
std::vector<std::int32_t> argmax_channels(const Tensor& scores);

/// Throws NumericalError naming `where` if any element is NaN/Inf.
void check_finite(const Tensor& t, const char* where);

}  // namespace fcan

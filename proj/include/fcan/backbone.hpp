#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fcan/ops.hpp"
#include "fcan/tensor.hpp"

namespace fcan {

inline constexpr std::size_t kNumStages = 5;
inline const std::array<std::string, kNumStages> kLayerNames{"c1", "c2", "c3", "c4", "c5"};

/// Index of a layer name in kLayerNames; throws for unknown names.
std::size_t layer_index(const std::string& name);

struct BackboneConfig {
    std::array<std::size_t, kNumStages> widths{16, 32, 64, 96, 128};
    std::size_t num_classes = 5;
    /// Per-channel pixel mean subtracted from [0,1] inputs (source-domain statistics).
    std::array<double, 3> input_mean{0.5, 0.5, 0.5};
};

inline constexpr std::size_t kMinInputExtent = 32;
inline constexpr std::size_t kOutputStride = 8;

/// Ordered layer-name -> feature map, shallowest first.
class FeaturePyramid {
public:
    void add(std::string name, Tensor map);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::size_t size() const { return layers_.size(); }
    const std::vector<std::pair<std::string, Tensor>>& layers() const { return layers_; }

private:
    std::vector<std::pair<std::string, Tensor>> layers_;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct ForwardOptions {
    BnMode mode = BnMode::Eval;
    bool update_stats = true;
    /// Stop after this stage (1-based); kNumStages runs the whole trunk.
    std::size_t depth = kNumStages;
};

/// Five conv-bn-relu stages (three stride-2, then dilation 2 and 4; output
/// stride 8) followed by a two-scale pyramid-pooling segmentation head.
class MiniFCN {
public:
    struct Stage {
        Tensor kernel;
        Tensor gamma;
        Tensor beta;
        BatchNormStats stats;
        Conv2dParams conv;
    };

    MiniFCN(const BackboneConfig& config, std::uint64_t seed);

    const BackboneConfig& config() const { return config_; }

    /// images: [3,H,W] or [N,3,H,W] with values in [0,1], H,W >= 32.
    FeaturePyramid forward_features(const Tensor& images, const ForwardOptions& opts = {});

    /// Class scores at input resolution ([K,H,W] or [N,K,H,W]) computed from c5.
    Tensor head(const Tensor& c5, std::size_t out_h, std::size_t out_w) const;

    Tensor segment(const Tensor& images, const ForwardOptions& opts = {});

    /// Deep copy: parameters and statistics are not shared with the original.
    MiniFCN clone() const;

    /// Learnable tensors in a fixed order.
    std::vector<NamedTensor> parameters() const;
    /// Running BN statistics exported as [2,C] tensors (row 0 mean, row 1 var).
    std::vector<NamedTensor> bn_statistics() const;
    void set_bn_statistics(const std::string& name, const Tensor& stats);
    std::size_t parameter_count() const;

    std::vector<Stage>& stages() { return stages_; }
    const std::vector<Stage>& stages() const { return stages_; }
    Tensor& head_kernel() { return head_kernel_; }
    Tensor& head_bias() { return head_bias_; }

    void set_requires_grad(bool flag);
    void zero_grad();

    void save(const std::filesystem::path& dir) const;
    static MiniFCN load(const std::filesystem::path& dir);

    /// Validates image shape and subtracts the configured pixel mean.
    Tensor normalize_input(const Tensor& images) const;

private:
    BackboneConfig config_;
    std::vector<Stage> stages_;
    Tensor head_kernel_;
    Tensor head_bias_;
};

/// Adaptive batch normalization: replaces every stage's running statistics by
/// population statistics over the target images. Stage l is measured with
/// stages 1..l-1 already using their recomputed statistics. Weights untouched.
MiniFCN adapt_bn_stats(const MiniFCN& model, const std::vector<Tensor>& target_images);

inline constexpr std::size_t kMinAdaptImages = 8;

/// Stage-l convolution outputs (pre-BN) for each image with stages < l in eval
/// mode; exposed for verifying adapt_bn_stats.
std::vector<Tensor> stage_preactivations(MiniFCN& model, const std::vector<Tensor>& images, std::size_t stage);

}  // namespace fcan

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fcan/backbone.hpp"

namespace fcan {

/// Channel correlation matrix of one layer's response maps, entries divided
/// by the map area (normalizer = H*W).
struct GramMatrix {
    std::string layer;
    Tensor values;  // [N,N]
    double normalizer = 1.0;
};

GramMatrix gram(const Tensor& feature_map, const std::string& layer = {});

/// Averaged Gram matrices over a corpus of images; one entry per layer.
struct DomainStyle {
    std::vector<GramMatrix> layers;
    std::size_t source_count = 0;

    const GramMatrix& at(const std::string& layer) const;
    bool contains(const std::string& layer) const;

    void save(const std::filesystem::path& dir) const;
    static DomainStyle load(const std::filesystem::path& dir);
};

DomainStyle domain_style(const std::vector<Tensor>& images, MiniFCN& extractor, const std::vector<std::string>& layers);

/// Weight per backbone layer, indexed like kLayerNames.
using LayerWeights = std::array<double, kNumStages>;

enum class AanInit { Noise, Source };

struct AANConfig {
    LayerWeights content_weights{0.0, 0.0, 0.0, 1.0, 0.0};
    LayerWeights style_weights{1.0, 1.0, 1.0, 1.0, 1.0};
    /// Style weight; nullopt selects the automatic calibration (style gradient
    /// L1 norm = kAlphaGradientRatio x content gradient L1 norm at iteration 0).
    std::optional<double> alpha;
    double beta = 10.0;
    std::size_t iterations = 1000;
    AanInit init = AanInit::Noise;
    std::uint64_t seed = 0;

    void validate() const;
};

inline constexpr double kAlphaGradientRatio = 0.1;

/// Sum over layers of w_l * mean squared elementwise difference.
Tensor content_loss(const FeaturePyramid& pyr_o, const FeaturePyramid& pyr_s, const LayerWeights& weights);

/// Sum over layers of w_l * mean squared entrywise Gram difference.
Tensor style_loss(const std::vector<GramMatrix>& grams_o, const DomainStyle& style, const LayerWeights& weights);

struct AanLoss {
    Tensor total;
    Tensor content;
    Tensor style;
};

/// Content + alpha * style evaluated through the frozen extractor (eval-mode BN).
AanLoss aan_loss(const Tensor& x_o, const Tensor& x_s, const DomainStyle& style, MiniFCN& extractor,
                 const AANConfig& config, double alpha);

/// Step size of iteration i (1-based): beta * (I - i) / I.
double aan_step_size(double beta, std::size_t i, std::size_t iterations);

/// x - step * g / ||g||_1; returns x unchanged when g is all zero.
std::vector<double> normalized_step(std::span<const double> x, std::span<const double> g, double step);

double calibrate_alpha(const Tensor& x_o, const Tensor& x_s, const DomainStyle& style, MiniFCN& extractor,
                       const AANConfig& config);

struct AanTrace {
    double alpha = 0.0;
    std::vector<double> losses;  // L_AAN at x_o^0 .. x_o^{I}
    std::size_t skipped_steps = 0;
};

/// Renders x_s with the domain style by normalized gradient descent in pixel
/// space; pixels are clamped to [0,1] after every step.
Tensor adapt_image(const Tensor& x_s, const DomainStyle& style, MiniFCN& extractor, const AANConfig& config,
                   AanTrace* trace = nullptr);

}  // namespace fcan

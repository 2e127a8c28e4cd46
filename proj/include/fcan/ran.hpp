#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fcan/backbone.hpp"
#include "fcan/data.hpp"

namespace fcan {

struct DiscriminatorConfig {
    std::size_t in_channels = 128;
    std::size_t branches = 4;          // k; branch r uses dilation r (1-based)
    std::size_t branch_channels = 128; // c
    /// Global-average the features first, giving a single image-level score (Z = 1).
    bool image_level = false;
};

/// Per-region target-domain probabilities, values in (0,1).
struct DomainScoreMap {
    Tensor values;  // [1,H,W]
    std::size_t z() const { return values.numel(); }
};

/// k parallel dilated 3x3 convolutions (ReLU), concatenated, fused by a 1x1
/// convolution and squashed by a sigmoid.
class Discriminator {
public:
    Discriminator(const DiscriminatorConfig& config, std::uint64_t seed);

    const DiscriminatorConfig& config() const { return config_; }

    /// features [C,H,W] -> [1,H,W], or [N,C,H,W] -> [N,1,H,W] (H = W = 1 when image level).
    Tensor forward(const Tensor& features) const;
    /// Pre-sigmoid scores; used by forward().
    Tensor logits(const Tensor& features) const;

    std::vector<NamedTensor> parameters() const;
    void set_requires_grad(bool flag);
    void zero_grad();
    Discriminator clone() const;

    Tensor& branch_kernel(std::size_t r) { return branch_kernels_[r]; }
    Tensor& branch_bias(std::size_t r) { return branch_biases_[r]; }
    Tensor& fuse_kernel() { return fuse_kernel_; }
    Tensor& fuse_bias() { return fuse_bias_; }

    void save(const std::filesystem::path& dir) const;
    static Discriminator load(const std::filesystem::path& dir);

private:
    DiscriminatorConfig config_;
    std::vector<Tensor> branch_kernels_;
    std::vector<Tensor> branch_biases_;
    Tensor fuse_kernel_;
    Tensor fuse_bias_;
};

DomainScoreMap discriminate(const Discriminator& disc, const Tensor& features);

inline constexpr double kScoreEps = 1e-7;

struct AdversarialLoss {
    Tensor value;
    std::size_t clamped = 0;  // scores that hit [eps, 1-eps]
};

/// -mean log D(target) - mean log(1 - D(source)), each mean over its own map.
AdversarialLoss adversarial_loss(const Tensor& scores_s, const Tensor& scores_t);
AdversarialLoss adversarial_loss(const DomainScoreMap& scores_s, const DomainScoreMap& scores_t);

/// base * (1 - iter/max_iter)^power.
double poly_lr(double base, std::size_t iter, std::size_t max_iter, double power);

/// SGD with momentum and L2 weight decay: v = mu v + lr (g + wd w); w -= v.
class Sgd {
public:
    Sgd(std::vector<Tensor> params, double momentum, double weight_decay);
    void step(double lr);

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double momentum_;
    double weight_decay_;
};

enum class Phase { Pretrain, Adversarial };

struct TrainConfig {
    double lambda = 5.0;    // segmentation weight in the adversarial objective
    double lambda_s = 5.0;  // source segmentation weight (semi-supervised)
    double lambda_t = 0.0;  // labelled-target segmentation weight (semi-supervised)
    double base_lr = 0.0025;
    double disc_lr = 0.0;   // 0: same base LR as the segmenter
    double power = 0.9;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    std::size_t batch_size = 6;
    std::size_t max_iterations = 30000;
    Phase phase = Phase::Pretrain;
    std::size_t d_steps = 1;
    std::size_t f_steps = 1;
    std::uint64_t seed = 0;

    static TrainConfig pretrain_defaults();
    static TrainConfig adversarial_defaults();
    void validate() const;
};

struct LossRow {
    std::size_t iter;
    double lr;
    double seg;
    double adv;
};

/// "iter,lr,L_seg,L_adv" rows with fixed formatting.
std::string losses_csv(const std::vector<LossRow>& rows);

/// Deterministic minibatch index stream: reshuffles on every pass.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed);
    std::vector<std::size_t> next();

private:
    std::size_t n_, batch_, pos_;
    std::vector<std::size_t> order_;
    std::uint64_t state_;
    void reshuffle();
};

Tensor gather_images(const std::vector<Tensor>& images, const std::vector<std::size_t>& idx);
std::vector<std::int32_t> gather_labels(const std::vector<LabelMap>& labels, const std::vector<std::size_t>& idx);

struct PretrainResult {
    std::vector<LossRow> log;
};

/// Source-only training of the segmenter with SGD under the poly schedule.
PretrainResult pretrain_segmenter(MiniFCN& model, const Dataset& source, const TrainConfig& config);

struct Batch {
    Tensor images;                     // [N,3,H,W]
    std::vector<std::int32_t> labels;  // empty for unlabelled batches
    bool empty() const { return images.rank() != 4; }
};

struct SegmenterObjective {
    Tensor total;     // lambda_s L_seg(X_s) + lambda_t L_seg(X_t^l) - L_adv
    Tensor seg_s;
    Tensor seg_t;     // zero when no labelled target batch
    Tensor adv;
    Tensor features_s;
    Tensor features_t;
    std::size_t clamped = 0;
};

/// Segmenter-side objective with train-mode BN over each domain's batch.
SegmenterObjective segmenter_objective(MiniFCN& model, const Discriminator& disc, const Batch& batch_s,
                                       const Batch& batch_t, const Batch& labeled_t, double lambda_s,
                                       double lambda_t, bool update_stats = true);

struct StepLosses {
    double seg = 0.0;
    double seg_t = 0.0;
    double adv_d = 0.0;  // L_adv seen by the discriminator step
    double adv_f = 0.0;  // L_adv seen by the segmenter step
    std::size_t clamped = 0;
};

/// Descends L_adv on the discriminator with detached features.
double discriminator_step(Discriminator& disc, Sgd& opt, const Tensor& features_s, const Tensor& features_t,
                          double lr, std::size_t* clamped = nullptr);

struct Optimizers {
    Sgd segmenter;
    Sgd discriminator;
};

Optimizers make_optimizers(MiniFCN& model, Discriminator& disc, const TrainConfig& config);

/// One round of d_steps discriminator updates followed by f_steps segmenter
/// updates on the objective lambda_s L_seg(X_s) + lambda_t L_seg(X_t^l) - L_adv.
StepLosses adversarial_step(MiniFCN& model, Discriminator& disc, Optimizers& opt, const Batch& batch_s,
                            const Batch& batch_t, const Batch& labeled_t, const TrainConfig& config, double lr_f,
                            double lr_d);

struct RanResult {
    std::vector<LossRow> log;
};

/// Adversarial fine-tuning for config.max_iterations rounds; labeled_target
/// may be empty (pure unsupervised adaptation).
RanResult train_ran(MiniFCN& model, Discriminator& disc, const Dataset& source, const Dataset& target,
                    const TrainConfig& config, const Dataset& labeled_target = {});

/// c5 features of each image in eval mode, stacked [N,C,h,w].
Tensor extract_c5(MiniFCN& model, const std::vector<Tensor>& images);

struct ProbeConfig {
    std::size_t iterations = 300;
    std::size_t batch_size = 8;
    double lr = 0.01;
    std::uint64_t seed = 0;
};

/// Trains a fresh discriminator on frozen features and returns its per-region
/// domain accuracy on held-out features.
double probe_domain_accuracy(const Tensor& train_s, const Tensor& train_t, const Tensor& test_s,
                             const Tensor& test_t, const DiscriminatorConfig& disc_config,
                             const ProbeConfig& probe);

}  // namespace fcan

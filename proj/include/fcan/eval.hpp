#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fcan/backbone.hpp"
#include "fcan/data.hpp"

namespace fcan {

/// K x K pixel counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t num_classes = 0);

    /// Adds one prediction/ground-truth pair. Pixels whose ground truth is
    /// the ignore label are skipped; any other value outside [0,K) is rejected.
    void add(const LabelMap& pred, const LabelMap& gt);
    void merge(const ConfusionMatrix& other);

    std::size_t num_classes() const { return k_; }
    std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * k_ + pred]; }
    std::uint64_t total() const;
    bool operator==(const ConfusionMatrix&) const = default;

private:
    std::size_t k_;
    std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes);

struct IoUReport {
    std::vector<std::optional<double>> per_class;  // nullopt: class absent from both maps
    double miou = 0.0;                             // 0 when no class is applicable
    std::size_t applicable = 0;
};

IoUReport iou_report(const ConfusionMatrix& cm);

/// One row per class ("class,iou", NA for absent classes) and a final mIoU row.
std::string iou_csv(const IoUReport& report);

/// Arithmetic mean of equally shaped per-pixel probability maps.
Tensor fuse_scores(const std::vector<Tensor>& maps);

inline const std::vector<double> kDefaultScales{0.75, 1.0, 1.25};

/// Softmax scores at input resolution averaged over rescaled copies of the
/// image. Scales whose resized input falls below the backbone minimum are
/// skipped and counted in *skipped.
Tensor multiscale_infer(MiniFCN& model, const Tensor& image, const std::vector<double>& scales,
                        std::size_t* skipped = nullptr);

/// Eval-mode softmax scores [K,H,W] for one image.
Tensor predict_scores(MiniFCN& model, const Tensor& image);
LabelMap scores_to_labels(const Tensor& scores);

/// Confusion over a labelled dataset, optionally with multi-scale inference.
ConfusionMatrix evaluate(MiniFCN& model, const Dataset& data, const std::vector<double>& scales = {1.0});

}  // namespace fcan

#include "fcan/eval.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace fcan {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {}

void ConfusionMatrix::add(const LabelMap& pred, const LabelMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
        throw ShapeError("confusion: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
    }
    const auto k = static_cast<std::int32_t>(k_);
    for (std::size_t i = 0; i < gt.values.size(); ++i) {
        const std::int32_t g = gt.values[i];
        if (g == kIgnoreLabel) continue;
        const std::int32_t p = pred.values[i];
        if (g < 0 || g >= k || p < 0 || p >= k) {
            throw std::out_of_range("confusion: label pair (" + std::to_string(g) + "," + std::to_string(p) +
                                    ") outside [0," + std::to_string(k_) + ") at pixel " + std::to_string(i));
        }
        ++counts_[static_cast<std::size_t>(g) * k_ + static_cast<std::size_t>(p)];
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw std::invalid_argument("confusion: cannot merge matrices of different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
}

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes) {
    ConfusionMatrix cm(num_classes);
    cm.add(pred, gt);
    return cm;
}

IoUReport iou_report(const ConfusionMatrix& cm) {
    const std::size_t k = cm.num_classes();
    IoUReport r;
    r.per_class.resize(k);
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        std::uint64_t row = 0, col = 0;
        for (std::size_t j = 0; j < k; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        const std::uint64_t tp = cm.at(c, c);
        const std::uint64_t uni = row + col - tp;
        if (uni == 0) continue;
        r.per_class[c] = static_cast<double>(tp) / static_cast<double>(uni);
        sum += *r.per_class[c];
        ++r.applicable;
    }
    if (r.applicable) r.miou = sum / static_cast<double>(r.applicable);
    return r;
}

std::string iou_csv(const IoUReport& report) {
    std::ostringstream os;
    os << "class,iou\n" << std::fixed << std::setprecision(6);
    for (std::size_t c = 0; c < report.per_class.size(); ++c) {
        os << c << ',';
        if (report.per_class[c]) {
            os << *report.per_class[c];
        } else {
            os << "NA";
        }
        os << '\n';
    }
    os << "mIoU," << report.miou << '\n';
    return os.str();
}

Tensor fuse_scores(const std::vector<Tensor>& maps) {
    if (maps.empty()) throw std::invalid_argument("fuse_scores: no score maps");
    std::vector<double> acc(maps[0].numel(), 0.0);
    for (const auto& m : maps) {
        if (m.shape() != maps[0].shape()) {
            throw ShapeError("fuse_scores: shape mismatch " + shape_str(maps[0].shape()) + " vs " +
                             shape_str(m.shape()));
        }
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += m[i];
    }
    const double n = static_cast<double>(maps.size());
    for (auto& v : acc) v /= n;
    return Tensor(maps[0].shape(), std::move(acc));
}

Tensor predict_scores(MiniFCN& model, const Tensor& image) {
    NoTapeScope no_tape;
    return softmax_channels(model.segment(image, ForwardOptions{BnMode::Eval, false, kNumStages}));
}

LabelMap scores_to_labels(const Tensor& scores) {
    LabelMap out(scores.dim(1), scores.dim(2));
    out.values = argmax_channels(scores);
    return out;
}

Tensor multiscale_infer(MiniFCN& model, const Tensor& image, const std::vector<double>& scales,
                        std::size_t* skipped) {
    if (scales.empty()) throw std::invalid_argument("multiscale_infer: empty scale set");
    if (image.rank() != 3) throw ShapeError("multiscale_infer: expected [3,H,W], got " + shape_str(image.shape()));
    NoTapeScope no_tape;
    const std::size_t h = image.dim(1), w = image.dim(2);
    std::vector<Tensor> maps;
    std::size_t dropped = 0;
    for (double s : scales) {
        if (!(s > 0.0)) throw std::invalid_argument("multiscale_infer: scales must be positive");
        const auto sh = static_cast<std::size_t>(std::lround(static_cast<double>(h) * s));
        const auto sw = static_cast<std::size_t>(std::lround(static_cast<double>(w) * s));
        if (sh < kMinInputExtent || sw < kMinInputExtent) {
            ++dropped;
            continue;
        }
        Tensor resized = (sh == h && sw == w) ? image : bilinear_resize(image, sh, sw);
        Tensor probs = predict_scores(model, resized);
        maps.push_back((sh == h && sw == w) ? probs : bilinear_resize(probs, h, w));
    }
    if (skipped) *skipped = dropped;
    if (maps.empty()) throw std::invalid_argument("multiscale_infer: every scale produced a degenerate input");
    return fuse_scores(maps);
}

ConfusionMatrix evaluate(MiniFCN& model, const Dataset& data, const std::vector<double>& scales) {
    if (data.labels.size() != data.images.size()) throw std::invalid_argument("evaluate: dataset lacks labels");
    ConfusionMatrix cm(model.config().num_classes);
    for (std::size_t i = 0; i < data.size(); ++i) {
        Tensor scores = (scales.size() == 1 && scales[0] == 1.0) ? predict_scores(model, data.images[i])
                                                                 : multiscale_infer(model, data.images[i], scales);
        cm.add(scores_to_labels(scores), data.labels[i]);
    }
    return cm;
}

}  // namespace fcan

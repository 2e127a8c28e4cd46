#include "fcan/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>

#include "fcan/checkpoint.hpp"

namespace fcan {

namespace {

constexpr std::array<std::size_t, kNumStages> kStrides{2, 2, 2, 1, 1};
constexpr std::array<std::size_t, kNumStages> kDilations{1, 1, 1, 2, 4};
constexpr std::size_t kPoolBins[] = {1, 2};

Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.mutable_data()) v = dist(rng);
    return t;
}

// Running accumulation of per-channel mean and M2 (Chan et al. merge).
struct ChannelMoments {
    std::vector<double> mean, m2;
    double count = 0.0;

    explicit ChannelMoments(std::size_t c) : mean(c, 0.0), m2(c, 0.0) {}

    void add(const Tensor& map) {  // map is [C,H,W]
        const std::size_t c_n = map.dim(0), plane = map.dim(1) * map.dim(2);
        const double nb = static_cast<double>(plane);
        for (std::size_t c = 0; c < c_n; ++c) {
            const double* p = map.data().data() + c * plane;
            double s = 0.0;
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
            const double mb = s / nb;
            double m2b = 0.0;
            for (std::size_t i = 0; i < plane; ++i) m2b += (p[i] - mb) * (p[i] - mb);
            const double delta = mb - mean[c];
            const double total = count + nb;
            mean[c] += delta * nb / total;
            m2[c] += m2b + delta * delta * count * nb / total;
        }
        count += nb;
    }
};

}  // namespace

std::size_t layer_index(const std::string& name) {
    for (std::size_t i = 0; i < kNumStages; ++i) {
        if (kLayerNames[i] == name) return i;
    }
    throw std::invalid_argument("unknown layer '" + name + "' (expected one of c1..c5)");
}

void FeaturePyramid::add(std::string name, Tensor map) { layers_.emplace_back(std::move(name), std::move(map)); }

const Tensor& FeaturePyramid::at(const std::string& name) const {
    for (const auto& [n, t] : layers_) {
        if (n == name) return t;
    }
    throw std::out_of_range("feature pyramid has no layer '" + name + "'");
}

bool FeaturePyramid::contains(const std::string& name) const {
    for (const auto& [n, t] : layers_) {
        if (n == name) return true;
    }
    return false;
}

MiniFCN::MiniFCN(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
    if (config.num_classes < 2) {
        throw std::invalid_argument("segmentation head needs at least 2 classes, got " +
                                    std::to_string(config.num_classes));
    }
    std::mt19937_64 rng(seed);
    std::size_t in_c = 3;
    for (std::size_t s = 0; s < kNumStages; ++s) {
        const std::size_t out_c = config.widths[s];
        if (out_c == 0) throw std::invalid_argument("stage widths must be positive");
        Stage st{he_normal({out_c, in_c, 3, 3}, in_c * 9, rng), Tensor::full({out_c}, 1.0), Tensor::zeros({out_c}),
                 BatchNormStats(out_c), Conv2dParams{kStrides[s], kDilations[s], kDilations[s]}};
        stages_.push_back(std::move(st));
        in_c = out_c;
    }
    const std::size_t head_in = in_c * (1 + std::size(kPoolBins));
    head_kernel_ = he_normal({config.num_classes, head_in, 1, 1}, head_in, rng);
    head_bias_ = Tensor::zeros({config.num_classes});
}

Tensor MiniFCN::normalize_input(const Tensor& images) const {
    const bool batched = images.rank() == 4;
    if (!(images.rank() == 3 || batched) || images.dim(batched ? 1 : 0) != 3) {
        throw ShapeError("backbone expects [3,H,W] or [N,3,H,W] images, got " + shape_str(images.shape()));
    }
    const std::size_t h = images.dim(images.rank() - 2), w = images.dim(images.rank() - 1);
    if (h < kMinInputExtent || w < kMinInputExtent) {
        throw ShapeError("input " + shape_str(images.shape()) + " smaller than the 32x32 minimum");
    }
    const std::size_t n = batched ? images.dim(0) : 1;
    std::vector<double> offset(images.numel());
    const std::size_t plane = h * w;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c)
            std::fill_n(offset.begin() + static_cast<std::ptrdiff_t>((i * 3 + c) * plane), plane,
                        config_.input_mean[c]);
    return sub(images, Tensor(images.shape(), std::move(offset)));
}

FeaturePyramid MiniFCN::forward_features(const Tensor& images, const ForwardOptions& opts) {
    if (opts.depth < 1 || opts.depth > kNumStages) throw std::invalid_argument("forward depth must be in 1..5");
    FeaturePyramid pyramid;
    Tensor x = normalize_input(images);
    for (std::size_t s = 0; s < opts.depth; ++s) {
        auto& st = stages_[s];
        x = conv2d(x, st.kernel, st.conv);
        x = batch_norm(x, st.gamma, st.beta, st.stats, opts.mode, opts.update_stats);
        x = relu(x);
        pyramid.add(kLayerNames[s], x);
    }
    return pyramid;
}

Tensor MiniFCN::head(const Tensor& c5, std::size_t out_h, std::size_t out_w) const {
    const std::size_t fh = c5.dim(c5.rank() - 2), fw = c5.dim(c5.rank() - 1);
    std::vector<Tensor> parts{c5};
    for (std::size_t bins : kPoolBins) {
        parts.push_back(bilinear_resize(adaptive_avg_pool(c5, bins), fh, fw));
    }
    Tensor logits = conv2d(concat_channels(parts), head_kernel_, head_bias_, Conv2dParams{});
    if (out_h == fh * kOutputStride && out_w == fw * kOutputStride) return bilinear_upsample(logits, kOutputStride);
    return bilinear_resize(logits, out_h, out_w);
}

Tensor MiniFCN::segment(const Tensor& images, const ForwardOptions& opts) {
    ForwardOptions full = opts;
    full.depth = kNumStages;
    FeaturePyramid pyr = forward_features(images, full);
    return head(pyr.at("c5"), images.dim(images.rank() - 2), images.dim(images.rank() - 1));
}

MiniFCN MiniFCN::clone() const {
    MiniFCN copy = *this;
    for (auto& st : copy.stages_) {
        st.kernel = st.kernel.clone();
        st.gamma = st.gamma.clone();
        st.beta = st.beta.clone();
    }
    copy.head_kernel_ = head_kernel_.clone();
    copy.head_bias_ = head_bias_.clone();
    return copy;
}

std::vector<NamedTensor> MiniFCN::parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t s = 0; s < kNumStages; ++s) {
        const auto& st = stages_[s];
        out.push_back({kLayerNames[s] + ".conv.weight", st.kernel});
        out.push_back({kLayerNames[s] + ".bn.gamma", st.gamma});
        out.push_back({kLayerNames[s] + ".bn.beta", st.beta});
    }
    out.push_back({"head.weight", head_kernel_});
    out.push_back({"head.bias", head_bias_});
    return out;
}

std::vector<NamedTensor> MiniFCN::bn_statistics() const {
    std::vector<NamedTensor> out;
    for (std::size_t s = 0; s < kNumStages; ++s) {
        const auto& st = stages_[s];
        std::vector<double> data(st.stats.mean);
        data.insert(data.end(), st.stats.var.begin(), st.stats.var.end());
        out.push_back({kLayerNames[s] + ".bn.stats", Tensor({2, st.stats.mean.size()}, std::move(data))});
    }
    return out;
}

void MiniFCN::set_bn_statistics(const std::string& name, const Tensor& stats) {
    const auto dot = name.find('.');
    auto& st = stages_[layer_index(name.substr(0, dot))];
    const std::size_t c = st.stats.mean.size();
    if (stats.shape() != Shape{2, c}) {
        throw ShapeError("BN statistics for " + name + " must be [2," + std::to_string(c) + "], got " +
                         shape_str(stats.shape()));
    }
    std::copy_n(stats.data().begin(), c, st.stats.mean.begin());
    std::copy_n(stats.data().begin() + static_cast<std::ptrdiff_t>(c), c, st.stats.var.begin());
}

std::size_t MiniFCN::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
}

void MiniFCN::set_requires_grad(bool flag) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(flag);
}

void MiniFCN::zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
}

void MiniFCN::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "fcan-minifcn";
    manifest["widths"] = config_.widths;
    manifest["num_classes"] = config_.num_classes;
    manifest["input_mean"] = config_.input_mean;
    auto& entries = manifest["tensors"] = nlohmann::json::array();
    auto write = [&](const NamedTensor& nt, const char* kind) {
        const std::string file = nt.name + ".fct";
        save_fct(dir / file, nt.tensor, DType::F64);
        entries.push_back({{"name", nt.name}, {"kind", kind}, {"file", file}, {"shape", nt.tensor.shape()}});
    };
    for (const auto& p : parameters()) write(p, "parameter");
    for (const auto& s : bn_statistics()) write(s, "bn_stats");
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

MiniFCN MiniFCN::load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("missing model manifest in " + dir.string());
    const auto manifest = nlohmann::json::parse(in);
    if (manifest.value("format", "") != "fcan-minifcn") {
        throw std::runtime_error(dir.string() + " is not a MiniFCN checkpoint");
    }
    BackboneConfig cfg;
    cfg.widths = manifest.at("widths").get<std::array<std::size_t, kNumStages>>();
    cfg.num_classes = manifest.at("num_classes").get<std::size_t>();
    cfg.input_mean = manifest.at("input_mean").get<std::array<double, 3>>();
    MiniFCN model(cfg, 0);
    auto params = model.parameters();
    for (const auto& e : manifest.at("tensors")) {
        const auto name = e.at("name").get<std::string>();
        Tensor t = load_fct(dir / e.at("file").get<std::string>());
        if (e.at("kind") == "bn_stats") {
            model.set_bn_statistics(name, t);
            continue;
        }
        auto it = std::find_if(params.begin(), params.end(), [&](const NamedTensor& p) { return p.name == name; });
        if (it == params.end()) throw std::runtime_error("checkpoint has unknown parameter " + name);
        if (it->tensor.shape() != t.shape()) {
            throw ShapeError("checkpoint parameter " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                             shape_str(it->tensor.shape()));
        }
        std::copy(t.data().begin(), t.data().end(), it->tensor.mutable_data().begin());
    }
    return model;
}

std::vector<Tensor> stage_preactivations(MiniFCN& model, const std::vector<Tensor>& images, std::size_t stage) {
    if (stage < 1 || stage > kNumStages) throw std::invalid_argument("stage must be in 1..5");
    NoTapeScope no_tape;
    std::vector<Tensor> out;
    out.reserve(images.size());
    const auto& st = model.stages()[stage - 1];
    for (const auto& img : images) {
        Tensor x;
        if (stage == 1) {
            x = model.normalize_input(img);
        } else {
            ForwardOptions opts;
            opts.depth = stage - 1;
            x = model.forward_features(img, opts).at(kLayerNames[stage - 2]);
        }
        out.push_back(conv2d(x, st.kernel, st.conv));
    }
    return out;
}

MiniFCN adapt_bn_stats(const MiniFCN& model, const std::vector<Tensor>& target_images) {
    if (target_images.empty()) throw std::invalid_argument("adapt_bn_stats: empty target image set");
    if (target_images.size() < kMinAdaptImages) {
        throw std::invalid_argument("adapt_bn_stats: need at least " + std::to_string(kMinAdaptImages) +
                                    " target images, got " + std::to_string(target_images.size()));
    }
    MiniFCN adapted = model.clone();
    for (std::size_t s = 1; s <= kNumStages; ++s) {
        auto pre = stage_preactivations(adapted, target_images, s);
        auto& st = adapted.stages()[s - 1];
        ChannelMoments moments(st.stats.mean.size());
        for (const auto& map : pre) moments.add(map);
        for (std::size_t c = 0; c < st.stats.mean.size(); ++c) {
            st.stats.mean[c] = moments.mean[c];
            st.stats.var[c] = moments.m2[c] / moments.count;
        }
    }
    return adapted;
}

}  // namespace fcan

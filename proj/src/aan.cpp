#include "fcan/aan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>

#include "fcan/checkpoint.hpp"

namespace fcan {

namespace {

std::size_t deepest_weighted(const LayerWeights& a, const LayerWeights& b) {
    std::size_t depth = 0;
    for (std::size_t l = 0; l < kNumStages; ++l) {
        if (a[l] != 0.0 || b[l] != 0.0) depth = l + 1;
    }
    return depth;
}

FeaturePyramid extract(MiniFCN& extractor, const Tensor& image, std::size_t depth) {
    return extractor.forward_features(image, ForwardOptions{BnMode::Eval, false, depth});
}

std::vector<GramMatrix> grams_of(const FeaturePyramid& pyr, const LayerWeights& weights) {
    std::vector<GramMatrix> out;
    for (std::size_t l = 0; l < kNumStages; ++l) {
        if (weights[l] != 0.0) out.push_back(gram(pyr.at(kLayerNames[l]), kLayerNames[l]));
    }
    return out;
}

double l1(std::span<const double> g) {
    double s = 0.0;
    for (double v : g) s += std::abs(v);
    return s;
}

}  // namespace

GramMatrix gram(const Tensor& feature_map, const std::string& layer) {
    if (feature_map.rank() != 3) {
        throw ShapeError("gram: expected a [N,H,W] feature map, got " + shape_str(feature_map.shape()));
    }
    return GramMatrix{layer, gram_matrix(feature_map), static_cast<double>(feature_map.dim(1) * feature_map.dim(2))};
}

const GramMatrix& DomainStyle::at(const std::string& layer) const {
    for (const auto& g : layers) {
        if (g.layer == layer) return g;
    }
    throw std::out_of_range("domain style has no layer '" + layer + "'");
}

bool DomainStyle::contains(const std::string& layer) const {
    return std::any_of(layers.begin(), layers.end(), [&](const GramMatrix& g) { return g.layer == layer; });
}

void DomainStyle::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "fcan-domain-style";
    manifest["source_count"] = source_count;
    auto& entries = manifest["layers"] = nlohmann::json::array();
    for (const auto& g : layers) {
        const std::string file = "gram_" + g.layer + ".fct";
        save_fct(dir / file, g.values, DType::F64);
        entries.push_back({{"layer", g.layer}, {"file", file}, {"normalizer", g.normalizer}});
    }
    std::ofstream(dir / "style.json") << manifest.dump(2) << '\n';
}

DomainStyle DomainStyle::load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "style.json");
    if (!in) throw std::runtime_error("missing style.json in " + dir.string());
    const auto manifest = nlohmann::json::parse(in);
    if (manifest.value("format", "") != "fcan-domain-style") {
        throw std::runtime_error(dir.string() + " does not hold a domain style");
    }
    DomainStyle style;
    style.source_count = manifest.at("source_count").get<std::size_t>();
    for (const auto& e : manifest.at("layers")) {
        style.layers.push_back(GramMatrix{e.at("layer").get<std::string>(),
                                          load_fct(dir / e.at("file").get<std::string>()),
                                          e.at("normalizer").get<double>()});
    }
    return style;
}

DomainStyle domain_style(const std::vector<Tensor>& images, MiniFCN& extractor, const std::vector<std::string>& layers) {
    if (images.empty()) throw std::invalid_argument("domain_style: empty image set");
    if (layers.empty()) throw std::invalid_argument("domain_style: no layers requested");
    std::size_t depth = 0;
    for (const auto& name : layers) depth = std::max(depth, layer_index(name) + 1);

    NoTapeScope no_tape;
    std::vector<std::vector<double>> sums(layers.size());
    std::vector<Shape> shapes(layers.size());
    std::vector<double> normalizers(layers.size(), 0.0);
    for (const auto& img : images) {
        FeaturePyramid pyr = extract(extractor, img, depth);
        for (std::size_t k = 0; k < layers.size(); ++k) {
            GramMatrix g = gram(pyr.at(layers[k]), layers[k]);
            if (sums[k].empty()) {
                sums[k].assign(g.values.numel(), 0.0);
                shapes[k] = g.values.shape();
                normalizers[k] = g.normalizer;
            }
            for (std::size_t i = 0; i < sums[k].size(); ++i) sums[k][i] += g.values[i];
        }
    }
    DomainStyle style;
    style.source_count = images.size();
    const double m = static_cast<double>(images.size());
    for (std::size_t k = 0; k < layers.size(); ++k) {
        for (auto& v : sums[k]) v /= m;
        style.layers.push_back(GramMatrix{layers[k], Tensor(shapes[k], std::move(sums[k])), normalizers[k]});
    }
    return style;
}

void AANConfig::validate() const {
    if (alpha && *alpha < 0.0) throw std::invalid_argument("AAN alpha must be >= 0");
    if (!(beta > 0.0)) throw std::invalid_argument("AAN beta must be > 0");
    if (iterations < 1) throw std::invalid_argument("AAN iterations must be >= 1");
    const auto nonzero = [](const LayerWeights& w) {
        return std::any_of(w.begin(), w.end(), [](double v) { return v != 0.0; });
    };
    if (!nonzero(content_weights) || !nonzero(style_weights)) {
        throw std::invalid_argument("AAN needs at least one nonzero content weight and one nonzero style weight");
    }
}

Tensor content_loss(const FeaturePyramid& pyr_o, const FeaturePyramid& pyr_s, const LayerWeights& weights) {
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t l = 0; l < kNumStages; ++l) {
        if (weights[l] == 0.0) continue;
        const auto& name = kLayerNames[l];
        total = add(total, scale(mse(pyr_o.at(name), pyr_s.at(name)), weights[l]));
    }
    return total;
}

Tensor style_loss(const std::vector<GramMatrix>& grams_o, const DomainStyle& style, const LayerWeights& weights) {
    Tensor total = Tensor::scalar(0.0);
    for (const auto& g : grams_o) {
        const double w = weights[layer_index(g.layer)];
        if (w == 0.0) continue;
        const GramMatrix& target = style.at(g.layer);
        if (target.values.shape() != g.values.shape()) {
            throw ShapeError("style_loss: layer " + g.layer + " Gram " + shape_str(g.values.shape()) +
                             " vs domain style " + shape_str(target.values.shape()));
        }
        total = add(total, scale(mse(g.values, target.values), w));
    }
    return total;
}

AanLoss aan_loss(const Tensor& x_o, const Tensor& x_s, const DomainStyle& style, MiniFCN& extractor,
                 const AANConfig& config, double alpha) {
    const std::size_t depth = deepest_weighted(config.content_weights, config.style_weights);
    FeaturePyramid pyr_s;
    {
        NoTapeScope no_tape;
        pyr_s = extract(extractor, x_s, depth);
    }
    FeaturePyramid pyr_o = extract(extractor, x_o, depth);
    Tensor content = content_loss(pyr_o, pyr_s, config.content_weights);
    Tensor style_term = style_loss(grams_of(pyr_o, config.style_weights), style, config.style_weights);
    return AanLoss{add(content, scale(style_term, alpha)), content, style_term};
}

double aan_step_size(double beta, std::size_t i, std::size_t iterations) {
    return beta * static_cast<double>(iterations - i) / static_cast<double>(iterations);
}

std::vector<double> normalized_step(std::span<const double> x, std::span<const double> g, double step) {
    std::vector<double> out(x.begin(), x.end());
    const double norm = l1(g);
    if (norm == 0.0) return out;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= step * g[i] / norm;
    return out;
}

namespace {

// Pixel gradients of the content and style terms, separately.
std::pair<std::vector<double>, std::vector<double>> split_gradients(const Tensor& x_o, const Tensor& x_s,
                                                                    const DomainStyle& style, MiniFCN& extractor,
                                                                    const AANConfig& config) {
    std::pair<std::vector<double>, std::vector<double>> out;
    for (int term = 0; term < 2; ++term) {
        Tensor probe = x_o.detach();
        probe.set_requires_grad(true);
        Tape tape;
        TapeScope scope(tape);
        AanLoss l = aan_loss(probe, x_s, style, extractor, config, 1.0);
        tape.backward(term == 0 ? l.content : l.style);
        std::vector<double> g(probe.numel(), 0.0);
        if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), g.begin());
        (term == 0 ? out.first : out.second) = std::move(g);
    }
    return out;
}

Tensor initial_image(const Tensor& x_s, const AANConfig& config) {
    if (config.init == AanInit::Source) return x_s.detach();
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor x = Tensor::zeros(x_s.shape());
    for (auto& v : x.mutable_data()) v = u(rng);
    return x;
}

}  // namespace

double calibrate_alpha(const Tensor& x_o, const Tensor& x_s, const DomainStyle& style, MiniFCN& extractor,
                       const AANConfig& config) {
    auto [gc, gs] = split_gradients(x_o, x_s, style, extractor, config);
    const double ns = l1(gs);
    if (ns == 0.0) return 0.0;
    return kAlphaGradientRatio * l1(gc) / ns;
}

Tensor adapt_image(const Tensor& x_s, const DomainStyle& style, MiniFCN& extractor, const AANConfig& config,
                   AanTrace* trace) {
    config.validate();
    if (x_s.rank() != 3 || x_s.dim(0) != 3) {
        throw ShapeError("adapt_image: expected a [3,H,W] source image, got " + shape_str(x_s.shape()));
    }
    for (const auto& p : extractor.parameters()) {
        if (p.tensor.requires_grad()) {
            throw std::invalid_argument("adapt_image: extractor parameter " + p.name + " is not frozen");
        }
    }
    Tensor x = initial_image(x_s, config);
    double alpha = config.alpha ? *config.alpha : 0.0;
    if (!config.alpha) {
        // Calibrated on a noise start.
        AANConfig noise_cfg = config;
        noise_cfg.init = AanInit::Noise;
        alpha = calibrate_alpha(initial_image(x_s, noise_cfg), x_s, style, extractor, config);
    }
    if (trace) {
        trace->alpha = alpha;
        trace->losses.clear();
        trace->skipped_steps = 0;
    }

    for (std::size_t i = 1; i <= config.iterations + 1; ++i) {
        if (i > config.iterations && !trace) break;
        Tensor probe = x.detach();
        probe.set_requires_grad(true);
        Tape tape;
        TapeScope scope(tape);
        AanLoss l = aan_loss(probe, x_s, style, extractor, config, alpha);
        check_finite(l.total, "AAN loss");
        if (trace) trace->losses.push_back(l.total.item());
        if (i > config.iterations) break;  // the last pass only measures x_o^I
        tape.backward(l.total);
        if (!probe.has_grad() || l1(probe.grad()) == 0.0) {
            if (trace) ++trace->skipped_steps;
            continue;
        }
        auto next = normalized_step(probe.data(), probe.grad(), aan_step_size(config.beta, i, config.iterations));
        for (auto& v : next) v = std::clamp(v, 0.0, 1.0);
        x = Tensor(x_s.shape(), std::move(next));
    }
    return x;
}

}  // namespace fcan

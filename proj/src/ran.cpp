#include "fcan/ran.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <random>
#include <sstream>

#include "fcan/checkpoint.hpp"

namespace fcan {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Tensor normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.mutable_data()) v = dist(rng);
    return t;
}

std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
    std::vector<Tensor> out;
    out.reserve(named.size());
    for (const auto& n : named) out.push_back(n.tensor);
    return out;
}

void check_loss(const Tensor& loss, const char* what, std::size_t iter) {
    if (!std::isfinite(loss.item())) {
        throw NumericalError(std::string(what) + " diverged (value " + std::to_string(loss.item()) + ") at iteration " +
                             std::to_string(iter));
    }
}

}  // namespace

Discriminator::Discriminator(const DiscriminatorConfig& config, std::uint64_t seed) : config_(config) {
    if (config.in_channels == 0 || config.branches == 0 || config.branch_channels == 0) {
        throw std::invalid_argument("discriminator widths and branch count must be positive");
    }
    std::mt19937_64 rng(seed);
    const std::size_t c = config.branch_channels;
    for (std::size_t r = 0; r < config.branches; ++r) {
        branch_kernels_.push_back(
            normal_init({c, config.in_channels, 3, 3}, std::sqrt(2.0 / static_cast<double>(config.in_channels * 9)), rng));
        branch_biases_.push_back(Tensor::zeros({c}));
    }
    const std::size_t fused = c * config.branches;
    fuse_kernel_ = normal_init({1, fused, 1, 1}, std::sqrt(1.0 / static_cast<double>(fused)), rng);
    fuse_bias_ = Tensor::zeros({1});
}

Tensor Discriminator::logits(const Tensor& features) const {
    const std::size_t channel_axis = features.rank() == 4 ? 1 : 0;
    if ((features.rank() != 3 && features.rank() != 4) || features.dim(channel_axis) != config_.in_channels) {
        throw ShapeError("discriminator expects " + std::to_string(config_.in_channels) + " input channels, got " +
                         shape_str(features.shape()));
    }
    Tensor x = config_.image_level ? adaptive_avg_pool(features, 1) : features;
    std::vector<Tensor> branches;
    branches.reserve(config_.branches);
    for (std::size_t r = 0; r < config_.branches; ++r) {
        const std::size_t rate = r + 1;
        branches.push_back(relu(conv2d(x, branch_kernels_[r], branch_biases_[r], Conv2dParams{1, rate, rate})));
    }
    Tensor stacked = branches.size() == 1 ? branches[0] : concat_channels(branches);
    return conv2d(stacked, fuse_kernel_, fuse_bias_, Conv2dParams{});
}

Tensor Discriminator::forward(const Tensor& features) const { return sigmoid(logits(features)); }

std::vector<NamedTensor> Discriminator::parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t r = 0; r < config_.branches; ++r) {
        out.push_back({"aspp" + std::to_string(r + 1) + ".weight", branch_kernels_[r]});
        out.push_back({"aspp" + std::to_string(r + 1) + ".bias", branch_biases_[r]});
    }
    out.push_back({"fuse.weight", fuse_kernel_});
    out.push_back({"fuse.bias", fuse_bias_});
    return out;
}

void Discriminator::set_requires_grad(bool flag) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(flag);
}

void Discriminator::zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
}

Discriminator Discriminator::clone() const {
    Discriminator copy = *this;
    for (auto& k : copy.branch_kernels_) k = k.clone();
    for (auto& b : copy.branch_biases_) b = b.clone();
    copy.fuse_kernel_ = fuse_kernel_.clone();
    copy.fuse_bias_ = fuse_bias_.clone();
    return copy;
}

void Discriminator::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "fcan-discriminator";
    manifest["in_channels"] = config_.in_channels;
    manifest["branches"] = config_.branches;
    manifest["branch_channels"] = config_.branch_channels;
    manifest["image_level"] = config_.image_level;
    auto& entries = manifest["tensors"] = nlohmann::json::array();
    for (const auto& p : parameters()) {
        const std::string file = p.name + ".fct";
        save_fct(dir / file, p.tensor, DType::F64);
        entries.push_back({{"name", p.name}, {"file", file}, {"shape", p.tensor.shape()}});
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Discriminator Discriminator::load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("missing discriminator manifest in " + dir.string());
    const auto m = nlohmann::json::parse(in);
    if (m.value("format", "") != "fcan-discriminator") {
        throw std::runtime_error(dir.string() + " is not a discriminator checkpoint");
    }
    DiscriminatorConfig cfg{m.at("in_channels").get<std::size_t>(), m.at("branches").get<std::size_t>(),
                            m.at("branch_channels").get<std::size_t>(), m.at("image_level").get<bool>()};
    Discriminator disc(cfg, 0);
    auto params = disc.parameters();
    for (const auto& e : m.at("tensors")) {
        const auto name = e.at("name").get<std::string>();
        Tensor t = load_fct(dir / e.at("file").get<std::string>());
        auto it = std::find_if(params.begin(), params.end(), [&](const NamedTensor& p) { return p.name == name; });
        if (it == params.end() || it->tensor.shape() != t.shape()) {
            throw std::runtime_error("discriminator checkpoint entry " + name + " does not match the architecture");
        }
        std::copy(t.data().begin(), t.data().end(), it->tensor.mutable_data().begin());
    }
    return disc;
}

DomainScoreMap discriminate(const Discriminator& disc, const Tensor& features) {
    if (features.rank() != 3) {
        throw ShapeError("discriminate: expected [C,H,W] features, got " + shape_str(features.shape()));
    }
    return DomainScoreMap{disc.forward(features)};
}

AdversarialLoss adversarial_loss(const Tensor& scores_s, const Tensor& scores_t) {
    std::size_t clamped_t = 0, clamped_s = 0;
    Tensor target_term = mean_log(scores_t, kScoreEps, &clamped_t);
    Tensor source_term = mean_log1m(scores_s, kScoreEps, &clamped_s);
    return AdversarialLoss{scale(add(target_term, source_term), -1.0), clamped_t + clamped_s};
}

AdversarialLoss adversarial_loss(const DomainScoreMap& scores_s, const DomainScoreMap& scores_t) {
    return adversarial_loss(scores_s.values, scores_t.values);
}

double poly_lr(double base, std::size_t iter, std::size_t max_iter, double power) {
    if (max_iter == 0) throw std::invalid_argument("poly_lr: max_iter must be positive");
    if (iter > max_iter) {
        throw std::out_of_range("poly_lr: iteration " + std::to_string(iter) + " beyond max " +
                                std::to_string(max_iter));
    }
    return base * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

Sgd::Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void Sgd::step(double lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        auto w = p.mutable_data();
        auto g = p.grad();
        auto& v = velocity_[k];
        const bool has = !g.empty();
        for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = momentum_ * v[i] + lr * ((has ? g[i] : 0.0) + weight_decay_ * w[i]);
            w[i] -= v[i];
        }
        p.zero_grad();
    }
}

TrainConfig TrainConfig::pretrain_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::adversarial_defaults() {
    TrainConfig c;
    c.phase = Phase::Adversarial;
    c.base_lr = 0.0001;
    c.batch_size = 8;
    c.max_iterations = 10000;
    return c;
}

void TrainConfig::validate() const {
    if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be > 0");
    if (lambda_s < 0.0 || lambda_t < 0.0) throw std::invalid_argument("lambda_s and lambda_t must be >= 0");
    if (!(base_lr > 0.0)) throw std::invalid_argument("learning rate must be > 0");
    if (disc_lr < 0.0) throw std::invalid_argument("discriminator learning rate must be >= 0");
    if (!(power > 0.0)) throw std::invalid_argument("poly power must be > 0");
    if (max_iterations < 1) throw std::invalid_argument("max iterations must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (d_steps < 1 || f_steps < 1) throw std::invalid_argument("alternation ratio entries must be >= 1");
}

std::string losses_csv(const std::vector<LossRow>& rows) {
    std::ostringstream os;
    os << "iter,lr,L_seg,L_adv\n";
    os << std::setprecision(10);
    for (const auto& r : rows) os << r.iter << ',' << r.lr << ',' << r.seg << ',' << r.adv << '\n';
    return os.str();
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
    : n_(n), batch_(batch), pos_(0), order_(n), state_(seed) {
    if (n == 0) throw std::invalid_argument("BatchSampler: empty dataset");
    if (batch == 0) throw std::invalid_argument("BatchSampler: batch size must be positive");
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    reshuffle();
}

void BatchSampler::reshuffle() {
    for (std::size_t i = n_; i > 1; --i) {
        const std::size_t j = splitmix64(state_) % i;
        std::swap(order_[i - 1], order_[j]);
    }
    pos_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
    std::vector<std::size_t> idx;
    idx.reserve(batch_);
    while (idx.size() < batch_) {
        if (pos_ == n_) reshuffle();
        idx.push_back(order_[pos_++]);
    }
    return idx;
}

Tensor gather_images(const std::vector<Tensor>& images, const std::vector<std::size_t>& idx) {
    std::vector<Tensor> picked;
    picked.reserve(idx.size());
    for (auto i : idx) picked.push_back(images.at(i));
    NoTapeScope no_tape;
    return stack(picked);
}

std::vector<std::int32_t> gather_labels(const std::vector<LabelMap>& labels, const std::vector<std::size_t>& idx) {
    std::vector<std::int32_t> out;
    for (auto i : idx) {
        const auto& v = labels.at(i).values;
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

PretrainResult pretrain_segmenter(MiniFCN& model, const Dataset& source, const TrainConfig& config) {
    config.validate();
    if (source.labels.size() != source.images.size() || source.images.empty()) {
        throw std::invalid_argument("pretrain_segmenter: source dataset must be labelled and nonempty");
    }
    model.set_requires_grad(true);
    Sgd opt(tensors_of(model.parameters()), config.momentum, config.weight_decay);
    BatchSampler sampler(source.size(), config.batch_size, config.seed);
    PretrainResult result;
    result.log.reserve(config.max_iterations);
    for (std::size_t iter = 0; iter < config.max_iterations; ++iter) {
        const double lr = poly_lr(config.base_lr, iter, config.max_iterations, config.power);
        const auto idx = sampler.next();
        Tensor x = gather_images(source.images, idx);
        const auto y = gather_labels(source.labels, idx);
        Tape tape;
        TapeScope scope(tape);
        Tensor logits = model.segment(x, ForwardOptions{BnMode::Train, true, kNumStages});
        CrossEntropy ce = softmax_ce_loss(logits, y);
        check_loss(ce.loss, "segmentation loss", iter);
        tape.backward(ce.loss);
        opt.step(lr);
        result.log.push_back({iter, lr, ce.loss.item(), 0.0});
    }
    model.set_requires_grad(false);
    return result;
}

namespace {

struct DomainForward {
    Tensor seg_s;
    Tensor seg_t;
    Tensor features_s;
    Tensor features_t;
};

DomainForward forward_domains(MiniFCN& model, const Batch& batch_s, const Batch& batch_t, const Batch& labeled_t,
                              bool update_stats) {
    if (batch_s.empty() || batch_t.empty()) throw std::invalid_argument("adversarial batches must be nonempty");
    const ForwardOptions train{BnMode::Train, update_stats, kNumStages};
    DomainForward out;
    FeaturePyramid pyr_s = model.forward_features(batch_s.images, train);
    out.features_s = pyr_s.at("c5");
    const std::size_t h = batch_s.images.dim(2), w = batch_s.images.dim(3);
    out.seg_s = softmax_ce_loss(model.head(out.features_s, h, w), batch_s.labels).loss;
    out.features_t = model.forward_features(batch_t.images, train).at("c5");
    out.seg_t = Tensor::scalar(0.0);
    if (!labeled_t.empty()) {
        Tensor logits = model.segment(labeled_t.images, train);
        out.seg_t = softmax_ce_loss(logits, labeled_t.labels).loss;
    }
    return out;
}

SegmenterObjective combine(DomainForward fwd, const Discriminator& disc, double lambda_s, double lambda_t) {
    SegmenterObjective obj;
    AdversarialLoss adv = adversarial_loss(disc.forward(fwd.features_s), disc.forward(fwd.features_t));
    obj.seg_s = fwd.seg_s;
    obj.seg_t = fwd.seg_t;
    obj.adv = adv.value;
    obj.clamped = adv.clamped;
    obj.total = sub(add(scale(fwd.seg_s, lambda_s), scale(fwd.seg_t, lambda_t)), adv.value);
    obj.features_s = fwd.features_s;
    obj.features_t = fwd.features_t;
    return obj;
}

}  // namespace

SegmenterObjective segmenter_objective(MiniFCN& model, const Discriminator& disc, const Batch& batch_s,
                                       const Batch& batch_t, const Batch& labeled_t, double lambda_s,
                                       double lambda_t, bool update_stats) {
    return combine(forward_domains(model, batch_s, batch_t, labeled_t, update_stats), disc, lambda_s, lambda_t);
}

double discriminator_step(Discriminator& disc, Sgd& opt, const Tensor& features_s, const Tensor& features_t,
                          double lr, std::size_t* clamped) {
    disc.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    AdversarialLoss adv = adversarial_loss(disc.forward(features_s.detach()), disc.forward(features_t.detach()));
    check_loss(adv.value, "discriminator loss", 0);
    tape.backward(adv.value);
    opt.step(lr);
    disc.set_requires_grad(false);
    if (clamped) *clamped = adv.clamped;
    return adv.value.item();
}

Optimizers make_optimizers(MiniFCN& model, Discriminator& disc, const TrainConfig& config) {
    return Optimizers{Sgd(tensors_of(model.parameters()), config.momentum, config.weight_decay),
                      Sgd(tensors_of(disc.parameters()), config.momentum, config.weight_decay)};
}

StepLosses adversarial_step(MiniFCN& model, Discriminator& disc, Optimizers& opt, const Batch& batch_s,
                            const Batch& batch_t, const Batch& labeled_t, const TrainConfig& config, double lr_f,
                            double lr_d) {
    const bool semi = !labeled_t.empty() && config.lambda_t > 0.0;
    const double lambda_s = semi ? config.lambda_s : config.lambda;
    const double lambda_t = semi ? config.lambda_t : 0.0;
    const Batch none{};
    StepLosses out;

    disc.set_requires_grad(false);
    model.set_requires_grad(true);
    Tape tape;
    DomainForward fwd;
    {
        TapeScope scope(tape);
        fwd = forward_domains(model, batch_s, batch_t, semi ? labeled_t : none, true);
    }
    // D-steps see the features of the current segmenter, detached from it.
    for (std::size_t d = 0; d < config.d_steps; ++d) {
        std::size_t clamped = 0;
        out.adv_d = discriminator_step(disc, opt.discriminator, fwd.features_s, fwd.features_t, lr_d, &clamped);
        out.clamped += clamped;
    }
    for (std::size_t f = 0; f < config.f_steps; ++f) {
        if (f > 0) {
            tape.clear();
            TapeScope scope(tape);
            fwd = forward_domains(model, batch_s, batch_t, semi ? labeled_t : none, true);
        }
        SegmenterObjective obj;
        {
            TapeScope scope(tape);
            obj = combine(fwd, disc, lambda_s, lambda_t);
        }
        check_loss(obj.total, "segmenter objective", 0);
        tape.backward(obj.total);
        opt.segmenter.step(lr_f);
        out.seg = obj.seg_s.item();
        out.seg_t = obj.seg_t.item();
        out.adv_f = obj.adv.item();
        out.clamped += obj.clamped;
    }
    model.set_requires_grad(false);
    return out;
}

RanResult train_ran(MiniFCN& model, Discriminator& disc, const Dataset& source, const Dataset& target,
                    const TrainConfig& config, const Dataset& labeled_target) {
    config.validate();
    if (source.labels.size() != source.images.size() || source.images.empty() || target.images.empty()) {
        throw std::invalid_argument("train_ran: needs a labelled source set and a nonempty target set");
    }
    const bool semi = labeled_target.size() > 0 && config.lambda_t > 0.0;
    if (semi && labeled_target.labels.size() != labeled_target.images.size()) {
        throw std::invalid_argument("train_ran: labelled target images lack labels");
    }
    Optimizers opt = make_optimizers(model, disc, config);
    std::uint64_t streams = config.seed;
    BatchSampler src(source.size(), config.batch_size, splitmix64(streams));
    BatchSampler tgt(target.size(), config.batch_size, splitmix64(streams));
    std::optional<BatchSampler> lab;
    if (semi) lab.emplace(labeled_target.size(), std::min(config.batch_size, labeled_target.size()), splitmix64(streams));

    const double disc_base = config.disc_lr > 0.0 ? config.disc_lr : config.base_lr;
    RanResult result;
    result.log.reserve(config.max_iterations);
    for (std::size_t iter = 0; iter < config.max_iterations; ++iter) {
        const double lr_f = poly_lr(config.base_lr, iter, config.max_iterations, config.power);
        const double lr_d = poly_lr(disc_base, iter, config.max_iterations, config.power);
        const auto is = src.next();
        Batch bs{gather_images(source.images, is), gather_labels(source.labels, is)};
        Batch bt{gather_images(target.images, tgt.next()), {}};
        Batch bl{};
        if (lab) {
            const auto il = lab->next();
            bl = Batch{gather_images(labeled_target.images, il), gather_labels(labeled_target.labels, il)};
        }
        StepLosses l = adversarial_step(model, disc, opt, bs, bt, bl, config, lr_f, lr_d);
        result.log.push_back({iter, lr_f, l.seg, l.adv_f});
    }
    return result;
}

Tensor extract_c5(MiniFCN& model, const std::vector<Tensor>& images) {
    NoTapeScope no_tape;
    std::vector<Tensor> maps;
    maps.reserve(images.size());
    for (const auto& img : images) {
        maps.push_back(model.forward_features(img, ForwardOptions{BnMode::Eval, false, kNumStages}).at("c5"));
    }
    return stack(maps);
}

double probe_domain_accuracy(const Tensor& train_s, const Tensor& train_t, const Tensor& test_s,
                             const Tensor& test_t, const DiscriminatorConfig& disc_config,
                             const ProbeConfig& probe) {
    Discriminator disc(disc_config, probe.seed);
    Sgd opt(tensors_of(disc.parameters()), 0.9, 0.0);
    std::uint64_t streams = probe.seed ^ 0x5bd1e995ULL;
    BatchSampler ss(train_s.dim(0), std::min(probe.batch_size, train_s.dim(0)), splitmix64(streams));
    BatchSampler st(train_t.dim(0), std::min(probe.batch_size, train_t.dim(0)), splitmix64(streams));
    auto pick = [](const Tensor& all, const std::vector<std::size_t>& idx) {
        std::vector<Tensor> items;
        for (auto i : idx) items.push_back(select(all, i));
        return stack(items);
    };
    for (std::size_t it = 0; it < probe.iterations; ++it) {
        Tensor fs, ft;
        {
            NoTapeScope no_tape;
            fs = pick(train_s, ss.next());
            ft = pick(train_t, st.next());
        }
        discriminator_step(disc, opt, fs, ft, poly_lr(probe.lr, it, probe.iterations, 0.9));
    }
    NoTapeScope no_tape;
    Tensor ps = disc.forward(test_s);
    Tensor pt = disc.forward(test_t);
    std::size_t correct = 0;
    for (double v : ps.data()) correct += v < 0.5 ? 1 : 0;
    for (double v : pt.data()) correct += v > 0.5 ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(ps.numel() + pt.numel());
}

}  // namespace fcan

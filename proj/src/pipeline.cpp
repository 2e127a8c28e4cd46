#include "fcan/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace fcan {

namespace {

using nlohmann::json;

// Reads one JSON object and reports unconsumed keys as unknown.
class ObjectReader {
public:
    ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj.is_object()) throw ConfigError(where() + " must be a JSON object");
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where() + "." + key + ": " + e.what());
        }
    }

    template <typename Fn>
    void section(const std::string& key, Fn&& fn) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        ObjectReader sub(*it, path_ + "." + key);
        fn(sub);
        sub.finish();
    }

    bool has(const std::string& key) const { return obj_.contains(key); }
    const json& raw(const std::string& key) {
        seen_.insert(key);
        return obj_.at(key);
    }

    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError("unknown key " + path_ + "." + it.key());
        }
    }

private:
    std::string where() const { return path_; }
    const json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_style(ObjectReader& r, StyleParams& s) {
    r.get("hue_rotation_deg", s.hue_rotation_deg);
    r.get("brightness", s.brightness);
    r.get("contrast", s.contrast);
    r.get("noise_sigma", s.noise_sigma);
    r.get("texture_amplitude", s.texture_amplitude);
    r.get("texture_frequency", s.texture_frequency);
    r.get("channel_gain", s.channel_gain);
}

json style_json(const StyleParams& s) {
    return {{"hue_rotation_deg", s.hue_rotation_deg}, {"brightness", s.brightness},
            {"contrast", s.contrast},                 {"noise_sigma", s.noise_sigma},
            {"texture_amplitude", s.texture_amplitude}, {"texture_frequency", s.texture_frequency},
            {"channel_gain", s.channel_gain}};
}

void read_train(ObjectReader& r, TrainConfig& t, bool adversarial) {
    r.get("lr", t.base_lr);
    r.get("iterations", t.max_iterations);
    r.get("batch_size", t.batch_size);
    r.get("momentum", t.momentum);
    r.get("weight_decay", t.weight_decay);
    r.get("power", t.power);
    if (adversarial) {
        r.get("disc_lr", t.disc_lr);
        r.get("lambda", t.lambda);
        r.get("lambda_s", t.lambda_s);
        r.get("lambda_t", t.lambda_t);
        r.get("d_steps", t.d_steps);
        r.get("f_steps", t.f_steps);
    }
}

json train_json(const TrainConfig& t, bool adversarial) {
    json j{{"lr", t.base_lr},         {"iterations", t.max_iterations}, {"batch_size", t.batch_size},
           {"momentum", t.momentum},  {"weight_decay", t.weight_decay}, {"power", t.power}};
    if (adversarial) {
        j["disc_lr"] = t.disc_lr;
        j["lambda"] = t.lambda;
        j["lambda_s"] = t.lambda_s;
        j["lambda_t"] = t.lambda_t;
        j["d_steps"] = t.d_steps;
        j["f_steps"] = t.f_steps;
    }
    return j;
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed * 0x9e3779b97f4a7c15ULL + stream * 0xd1b54a32d192ed03ULL + 0x632be59bd9b4e019ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

enum Stream : std::uint64_t {
    kSourceData = 1,
    kTargetData,
    kTargetVal,
    kSourceVal,
    kModelInit,
    kPretrain,
    kDisc,
    kAdapt,
    kRender,
    kProbe,
    kLabeled,
};

void report(const Progress& progress, const std::string& msg) {
    if (progress) progress(msg);
}

double miou_percent(MiniFCN& model, const Dataset& data, const std::vector<double>& scales) {
    return 100.0 * iou_report(evaluate(model, data, scales)).miou;
}

Dataset with_images(const Dataset& base, std::vector<Tensor> images) {
    Dataset d;
    d.images = std::move(images);
    d.labels = base.labels;
    return d;
}

std::vector<Tensor> first_n(const std::vector<Tensor>& v, std::size_t n) {
    return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

}  // namespace

PipelineConfig::PipelineConfig() {
    backbone.widths = {8, 16, 32, 48, 64};

    ran.pretrain = TrainConfig::pretrain_defaults();
    ran.pretrain.base_lr = 0.01;
    ran.pretrain.max_iterations = 300;
    ran.pretrain.batch_size = 8;

    ran.adapt = TrainConfig::adversarial_defaults();
    ran.adapt.base_lr = 0.002;
    ran.adapt.max_iterations = 250;
    ran.adapt.batch_size = 4;

    aan.config.init = AanInit::Source;
    aan.config.iterations = 10;
    aan.config.beta = 1000.0;
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& doc) {
    PipelineConfig c;
    try {
        ObjectReader root(doc, "config");
        root.get("seed", c.seed);
        if (root.has("output_dir")) c.output_dir = root.raw("output_dir").get<std::string>();
        root.section("data", [&](ObjectReader& r) {
            r.get("height", c.data.height);
            r.get("width", c.data.width);
            r.get("num_classes", c.data.num_classes);
            r.get("source_train", c.data.source_train);
            r.get("target_train", c.data.target_train);
            r.get("target_val", c.data.target_val);
            r.get("source_val", c.data.source_val);
            r.section("source_style", [&](ObjectReader& s) { read_style(s, c.data.source_style); });
            r.section("target_style", [&](ObjectReader& s) { read_style(s, c.data.target_style); });
        });
        root.section("backbone", [&](ObjectReader& r) {
            r.get("widths", c.backbone.widths);
            r.get("input_mean", c.backbone.input_mean);
        });
        root.section("aan", [&](ObjectReader& r) {
            r.get("content_weights", c.aan.config.content_weights);
            r.get("style_weights", c.aan.config.style_weights);
            if (r.has("alpha")) {
                const auto& a = r.raw("alpha");
                if (a.is_null()) {
                    c.aan.config.alpha.reset();
                } else if (a.is_number()) {
                    c.aan.config.alpha = a.get<double>();
                } else {
                    throw ConfigError("config.aan.alpha must be a number or null");
                }
            }
            r.get("beta", c.aan.config.beta);
            r.get("iterations", c.aan.config.iterations);
            if (r.has("init")) {
                const auto& v = r.raw("init");
                const std::string s = v.is_string() ? v.get<std::string>() : "";
                if (s == "noise") {
                    c.aan.config.init = AanInit::Noise;
                } else if (s == "source") {
                    c.aan.config.init = AanInit::Source;
                } else {
                    throw ConfigError("config.aan.init must be \"noise\" or \"source\"");
                }
            }
            r.get("style_layers", c.aan.style_layers);
            r.get("style_images", c.aan.style_images);
        });
        root.section("ran", [&](ObjectReader& r) {
            r.section("pretrain", [&](ObjectReader& s) { read_train(s, c.ran.pretrain, false); });
            r.section("adapt", [&](ObjectReader& s) { read_train(s, c.ran.adapt, true); });
            r.get("disc_branches", c.ran.disc_branches);
            r.get("disc_channels", c.ran.disc_channels);
        });
        root.section("eval", [&](ObjectReader& r) { r.get("scales", c.eval.scales); });
        root.finish();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return from_json(doc);
}

nlohmann::json PipelineConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["output_dir"] = output_dir.string();
    j["data"] = {{"height", data.height},
                 {"width", data.width},
                 {"num_classes", data.num_classes},
                 {"source_train", data.source_train},
                 {"target_train", data.target_train},
                 {"target_val", data.target_val},
                 {"source_val", data.source_val},
                 {"source_style", style_json(data.source_style)},
                 {"target_style", style_json(data.target_style)}};
    j["backbone"] = {{"widths", backbone.widths}, {"input_mean", backbone.input_mean}};
    j["aan"] = {{"content_weights", aan.config.content_weights},
                {"style_weights", aan.config.style_weights},
                {"alpha", aan.config.alpha ? json(*aan.config.alpha) : json(nullptr)},
                {"beta", aan.config.beta},
                {"iterations", aan.config.iterations},
                {"init", aan.config.init == AanInit::Noise ? "noise" : "source"},
                {"style_layers", aan.style_layers},
                {"style_images", aan.style_images}};
    j["ran"] = {{"pretrain", train_json(ran.pretrain, false)},
                {"adapt", train_json(ran.adapt, true)},
                {"disc_branches", ran.disc_branches},
                {"disc_channels", ran.disc_channels}};
    j["eval"] = {{"scales", eval.scales}};
    return j;
}

void PipelineConfig::validate() const {
    try {
        if (data.height < kMinInputExtent || data.width < kMinInputExtent) {
            throw ConfigError("data.height and data.width must be >= " + std::to_string(kMinInputExtent));
        }
        if (data.num_classes < 2 || data.num_classes > 5) throw ConfigError("data.num_classes must be in [2,5]");
        if (data.source_train == 0 || data.target_train < kMinAdaptImages || data.target_val == 0) {
            throw ConfigError("data needs source_train >= 1, target_train >= " + std::to_string(kMinAdaptImages) +
                              " and target_val >= 1");
        }
        for (auto w : backbone.widths) {
            if (w == 0) throw ConfigError("backbone.widths must be positive");
        }
        aan.config.validate();
        if (aan.style_layers.empty()) throw ConfigError("aan.style_layers must not be empty");
        for (const auto& l : aan.style_layers) layer_index(l);
        if (aan.style_images == 0) throw ConfigError("aan.style_images must be >= 1");
        ran.pretrain.validate();
        ran.adapt.validate();
        if (ran.disc_branches == 0 || ran.disc_channels == 0) {
            throw ConfigError("ran.disc_branches and ran.disc_channels must be >= 1");
        }
        if (eval.scales.empty()) throw ConfigError("eval.scales must not be empty");
        for (double s : eval.scales) {
            if (!(s > 0.0)) throw ConfigError("eval.scales entries must be > 0");
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

void PipelineConfig::write_resolved(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.json") << to_json().dump(2) << '\n';
}

DiscriminatorConfig PipelineConfig::discriminator(std::size_t branches, bool image_level) const {
    return DiscriminatorConfig{backbone.widths.back(), branches, ran.disc_channels, image_level};
}

SceneSpec PipelineConfig::scene_spec() const {
    SceneSpec s;
    s.height = data.height;
    s.width = data.width;
    s.num_classes = data.num_classes;
    s.source = data.source_style;
    s.target = data.target_style;
    return s;
}

Benchmark make_benchmark(const PipelineConfig& cfg, std::uint64_t seed) {
    const SceneSpec spec = cfg.scene_spec();
    Benchmark b;
    b.source = make_dataset(spec, Domain::Source, cfg.data.source_train, mix(seed, kSourceData));
    b.target = make_dataset(spec, Domain::Target, cfg.data.target_train, mix(seed, kTargetData));
    b.target_val = make_dataset(spec, Domain::Target, cfg.data.target_val, mix(seed, kTargetVal));
    b.source_val = make_dataset(spec, Domain::Source, cfg.data.source_val, mix(seed, kSourceVal));
    return b;
}

MiniFCN pretrain_fcn(const PipelineConfig& cfg, const Dataset& source, std::uint64_t seed,
                     std::vector<LossRow>* log) {
    BackboneConfig bc = cfg.backbone;
    bc.num_classes = cfg.data.num_classes;
    MiniFCN model(bc, mix(seed, kModelInit));
    TrainConfig tc = cfg.ran.pretrain;
    tc.phase = Phase::Pretrain;
    tc.seed = mix(seed, kPretrain);
    PretrainResult r = pretrain_segmenter(model, source, tc);
    if (log) *log = std::move(r.log);
    return model;
}

std::vector<Tensor> render_images(const PipelineConfig& cfg, const std::vector<Tensor>& images,
                                  const std::vector<Tensor>& style_images, MiniFCN& extractor, std::uint64_t seed) {
    extractor.set_requires_grad(false);
    DomainStyle style = domain_style(first_n(style_images, cfg.aan.style_images), extractor, cfg.aan.style_layers);
    std::vector<Tensor> out;
    out.reserve(images.size());
    AANConfig ac = cfg.aan.config;
    for (std::size_t i = 0; i < images.size(); ++i) {
        ac.seed = mix(mix(seed, kRender), i);
        out.push_back(adapt_image(images[i], style, extractor, ac));
    }
    return out;
}

MiniFCN adapt_ran(const PipelineConfig& cfg, const MiniFCN& init, const Dataset& source, const Dataset& target,
                  const DiscriminatorConfig& disc_cfg, std::uint64_t seed, const Dataset& labeled_target,
                  std::vector<LossRow>* log) {
    MiniFCN model = init.clone();
    Discriminator disc(disc_cfg, mix(seed, kDisc));
    TrainConfig tc = cfg.ran.adapt;
    tc.phase = Phase::Adversarial;
    tc.seed = mix(seed, kAdapt);
    RanResult r = train_ran(model, disc, source, target, tc, labeled_target);
    if (log) *log = std::move(r.log);
    return adapt_bn_stats(model, target.images);
}

std::string preset_name(Preset p) {
    switch (p) {
        case Preset::Fcn: return "FCN";
        case Preset::Abn: return "+ABN";
        case Preset::Ada: return "+ADA";
        case Preset::Conv: return "+Conv";
        case Preset::Aspp: return "+ASPP";
        case Preset::Fcan: return "FCAN";
    }
    return "?";
}

Preset parse_preset(const std::string& name) {
    std::string n;
    for (char ch : name) n.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    if (!n.empty() && n[0] == '+') n.erase(0, 1);
    for (auto p : kAllPresets) {
        std::string candidate;
        for (char ch : preset_name(p)) {
            if (ch != '+') candidate.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
        if (candidate == n) return p;
    }
    throw ConfigError("unknown preset '" + name + "' (expected FCN, ABN, ADA, Conv, ASPP or FCAN)");
}

double preset_reference(Preset p) {
    switch (p) {
        case Preset::Fcn: return 29.15;
        case Preset::Abn: return 35.51;
        case Preset::Ada: return 41.29;
        case Preset::Conv: return 43.17;
        case Preset::Aspp: return 44.81;
        case Preset::Fcan: return 46.60;
    }
    return 0.0;
}

double AblationRow::mean() const {
    if (miou.empty()) return 0.0;
    double s = 0.0;
    for (double v : miou) s += v;
    return s / static_cast<double>(miou.size());
}

double AblationRow::median() const {
    if (miou.empty()) return 0.0;
    std::vector<double> v = miou;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

const AblationRow& AblationReport::row(Preset p) const {
    for (const auto& r : rows) {
        if (r.preset == p) return r;
    }
    throw std::out_of_range("ablation report has no row for " + preset_name(p));
}

const MiniFCN& SeedModels::at(Preset p) const {
    for (const auto& [preset, model] : models) {
        if (preset == p) return model;
    }
    throw std::out_of_range("no model for preset " + preset_name(p));
}

namespace {

// Runs `fn`, tagging any failure with the stage name.
template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const NumericalError& e) {
        throw NumericalError("stage " + name + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError("stage " + name + ": " + e.what());
    } catch (const std::exception& e) {
        throw std::runtime_error("stage " + name + ": " + e.what());
    }
}

}  // namespace

AblationReport run_ablation(const PipelineConfig& cfg, const std::vector<std::uint64_t>& seeds,
                            const std::vector<Preset>& presets, const Progress& progress, const SeedHook& hook) {
    cfg.validate();
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    if (presets.empty()) throw ConfigError("ablation needs at least one preset");
    AblationReport rep;
    rep.seeds = seeds;
    for (auto p : presets) rep.rows.push_back(AblationRow{p, {}});
    const auto wants = [&](Preset p) { return std::find(presets.begin(), presets.end(), p) != presets.end(); };

    for (auto seed : seeds) {
        const std::string tag = "seed " + std::to_string(seed) + ": ";
        Benchmark bench = stage("data", [&] { return make_benchmark(cfg, seed); });
        report(progress, tag + "pretraining");
        MiniFCN fcn = stage("pretrain", [&] { return pretrain_fcn(cfg, bench.source, seed); });
        SeedModels models{seed, &bench, {}};
        const auto record = [&](Preset p, MiniFCN m) {
            const double v = miou_percent(m, bench.target_val, cfg.eval.scales);
            for (auto& r : rep.rows) {
                if (r.preset == p) r.miou.push_back(v);
            }
            report(progress, tag + preset_name(p) + " mIoU " + std::to_string(v));
            models.models.emplace_back(p, std::move(m));
        };
        if (wants(Preset::Fcn)) record(Preset::Fcn, fcn.clone());
        if (wants(Preset::Abn)) {
            record(Preset::Abn, stage("abn", [&] { return adapt_bn_stats(fcn, bench.target.images); }));
        }
        const std::array<std::pair<Preset, DiscriminatorConfig>, 3> ran_presets{{
            {Preset::Ada, cfg.discriminator(1, true)},
            {Preset::Conv, cfg.discriminator(1, false)},
            {Preset::Aspp, cfg.discriminator(cfg.ran.disc_branches, false)},
        }};
        for (const auto& [p, dc] : ran_presets) {
            if (!wants(p)) continue;
            report(progress, tag + "adapting " + preset_name(p));
            record(p, stage("ran " + preset_name(p), [&] { return adapt_ran(cfg, fcn, bench.source, bench.target, dc, seed); }));
        }
        if (wants(Preset::Fcan)) {
            report(progress, tag + "rendering source images");
            Dataset rendered = stage("aan", [&] {
                return with_images(bench.source, render_images(cfg, bench.source.images, bench.target.images, fcn, seed));
            });
            report(progress, tag + "adapting FCAN");
            record(Preset::Fcan, stage("ran FCAN", [&] {
                       return adapt_ran(cfg, fcn, rendered, bench.target,
                                        cfg.discriminator(cfg.ran.disc_branches, false), seed);
                   }));
        }
        if (hook) hook(models);
    }
    return rep;
}

std::string ablation_csv(const AblationReport& report) {
    std::ostringstream os;
    os << "preset,reference,mean";
    for (auto s : report.seeds) os << ",seed_" << s;
    os << '\n' << std::fixed << std::setprecision(4);
    for (const auto& r : report.rows) {
        os << preset_name(r.preset) << ',' << std::setprecision(2) << preset_reference(r.preset) << ','
           << std::setprecision(4) << r.mean();
        for (double v : r.miou) os << ',' << v;
        os << '\n';
    }
    return os.str();
}

std::string direction_name(Direction d) {
    switch (d) {
        case Direction::SrcTar: return "src-tar";
        case Direction::SrcTarAda: return "src-tar_ada";
        case Direction::SrcAdaTar: return "src_ada-tar";
        case Direction::SrcAdaTarAda: return "src_ada-tar_ada";
    }
    return "?";
}

Direction parse_direction(const std::string& name) {
    if (name == "best-single") return kBestSingleDirection;
    for (auto d : kAllDirections) {
        if (direction_name(d) == name) return d;
    }
    throw ConfigError("unknown direction '" + name +
                      "' (expected src-tar, src-tar_ada, src_ada-tar, src_ada-tar_ada or best-single)");
}

DirectionReport run_directions(const PipelineConfig& cfg, std::uint64_t seed, const Progress& progress) {
    cfg.validate();
    Benchmark bench = stage("data", [&] { return make_benchmark(cfg, seed); });
    report(progress, "pretraining");
    MiniFCN fcn = stage("pretrain", [&] { return pretrain_fcn(cfg, bench.source, seed); });

    report(progress, "rendering source images with the target style");
    Dataset src_ada = stage("aan", [&] {
        return with_images(bench.source, render_images(cfg, bench.source.images, bench.target.images, fcn, seed));
    });
    // Target images rendered with the source style, for training and for testing.
    report(progress, "rendering target images with the source style");
    Dataset tar_ada, val_ada;
    stage("aan", [&] {
        tar_ada = with_images(bench.target,
                              render_images(cfg, bench.target.images, bench.source.images, fcn, mix(seed, 1)));
        val_ada = with_images(bench.target_val,
                              render_images(cfg, bench.target_val.images, bench.source.images, fcn, mix(seed, 2)));
        return 0;
    });

    const DiscriminatorConfig dc = cfg.discriminator(cfg.ran.disc_branches, false);
    DirectionReport rep;
    std::vector<std::vector<Tensor>> scores(4);
    for (std::size_t k = 0; k < kAllDirections.size(); ++k) {
        const Direction d = kAllDirections[k];
        const bool sa = d == Direction::SrcAdaTar || d == Direction::SrcAdaTarAda;
        const bool ta = d == Direction::SrcTarAda || d == Direction::SrcAdaTarAda;
        report(progress, "adapting " + direction_name(d));
        MiniFCN m = stage("ran " + direction_name(d), [&] {
            return adapt_ran(cfg, fcn, sa ? src_ada : bench.source, ta ? tar_ada : bench.target, dc, seed);
        });
        const Dataset& val = ta ? val_ada : bench.target_val;
        ConfusionMatrix cm(cfg.data.num_classes);
        for (std::size_t i = 0; i < val.size(); ++i) {
            Tensor s = multiscale_infer(m, val.images[i], cfg.eval.scales);
            cm.add(scores_to_labels(s), val.labels[i]);
            scores[k].push_back(std::move(s));
        }
        rep.miou[k] = 100.0 * iou_report(cm).miou;
    }
    ConfusionMatrix fused(cfg.data.num_classes);
    for (std::size_t i = 0; i < bench.target_val.size(); ++i) {
        Tensor f = fuse_scores({scores[0][i], scores[1][i], scores[2][i], scores[3][i]});
        fused.add(scores_to_labels(f), bench.target_val.labels[i]);
    }
    rep.fused = 100.0 * iou_report(fused).miou;
    return rep;
}

std::string directions_csv(const DirectionReport& report) {
    std::ostringstream os;
    os << "setting,mIoU\n" << std::fixed << std::setprecision(4);
    for (std::size_t k = 0; k < kAllDirections.size(); ++k) {
        os << direction_name(kAllDirections[k]) << ',' << report.miou[k] << '\n';
    }
    os << "late-fusion," << report.fused << '\n';
    return os.str();
}

SemiSupReport run_semisup(const PipelineConfig& cfg, std::uint64_t seed, const std::vector<std::size_t>& counts,
                          const Progress& progress) {
    cfg.validate();
    Benchmark bench = stage("data", [&] { return make_benchmark(cfg, seed); });
    for (auto n : counts) {
        if (n > bench.target.size()) {
            throw ConfigError("labelled target count " + std::to_string(n) + " exceeds the " +
                              std::to_string(bench.target.size()) + " target training images");
        }
    }
    report(progress, "pretraining");
    MiniFCN fcn = stage("pretrain", [&] { return pretrain_fcn(cfg, bench.source, seed); });
    report(progress, "rendering source images");
    Dataset rendered = stage("aan", [&] {
        return with_images(bench.source, render_images(cfg, bench.source.images, bench.target.images, fcn, seed));
    });
    // Nested labelled subsets: every larger set contains the smaller ones.
    std::vector<std::size_t> order(bench.target.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    BatchSampler shuffle(order.size(), order.size(), mix(seed, kLabeled));
    order = shuffle.next();

    SemiSupReport rep;
    const DiscriminatorConfig dc = cfg.discriminator(cfg.ran.disc_branches, false);
    for (auto n : counts) {
        Dataset labeled;
        for (std::size_t i = 0; i < n; ++i) {
            labeled.images.push_back(bench.target.images[order[i]]);
            labeled.labels.push_back(bench.target.labels[order[i]]);
        }
        PipelineConfig c = cfg;
        if (n == 0) {
            c.ran.adapt.lambda_t = 0.0;
        } else if (c.ran.adapt.lambda_t == 0.0) {
            c.ran.adapt.lambda_t = c.ran.adapt.lambda_s;
        }
        report(progress, "adapting with " + std::to_string(n) + " labelled target images");
        MiniFCN m = stage("ran-semisup", [&] { return adapt_ran(c, fcn, rendered, bench.target, dc, seed, labeled); });
        rep.labeled_counts.push_back(n);
        rep.miou.push_back(miou_percent(m, bench.target_val, cfg.eval.scales));
    }
    return rep;
}

ProbeReport probe_models(const PipelineConfig& cfg, const Benchmark& bench, const MiniFCN& source_only,
                         const MiniFCN& adapted, std::uint64_t seed) {
    ProbeConfig pc;
    pc.seed = mix(seed, kProbe);
    const DiscriminatorConfig dc = cfg.discriminator(cfg.ran.disc_branches, false);
    ProbeReport rep;
    {
        MiniFCN m = source_only.clone();
        rep.before = probe_domain_accuracy(extract_c5(m, bench.source.images), extract_c5(m, bench.target.images),
                                           extract_c5(m, bench.source_val.images),
                                           extract_c5(m, bench.target_val.images), dc, pc);
    }
    MiniFCN on_source = adapt_bn_stats(adapted, bench.source.images);
    MiniFCN on_target = adapt_bn_stats(adapted, bench.target.images);
    rep.after = probe_domain_accuracy(
        extract_c5(on_source, bench.source.images), extract_c5(on_target, bench.target.images),
        extract_c5(on_source, bench.source_val.images), extract_c5(on_target, bench.target_val.images), dc, pc);
    return rep;
}

ProbeReport run_probe(const PipelineConfig& cfg, std::uint64_t seed, const Progress& progress) {
    ProbeReport rep;
    run_ablation(cfg, {seed}, {Preset::Fcn, Preset::Fcan}, progress, [&](const SeedModels& m) {
        rep = probe_models(cfg, *m.bench, m.at(Preset::Fcn), m.at(Preset::Fcan), seed);
    });
    return rep;
}

}  // namespace fcan

// Command-line front end: one subcommand per pipeline stage.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fcan/checkpoint.hpp"
#include "fcan/pipeline.hpp"

using namespace fcan;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

std::vector<std::string> split(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<double> parse_doubles(const std::string& s, const std::string& flag) {
    std::vector<double> out;
    for (const auto& item : split(s)) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError(flag + ": '" + item + "' is not a number");
        }
    }
    return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    for (const auto& item : split(s)) {
        try {
            out.push_back(std::stoull(item));
        } catch (const std::exception&) {
            throw ConfigError("--seeds: '" + item + "' is not an unsigned integer");
        }
    }
    if (out.empty()) throw ConfigError("--seeds must list at least one seed");
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void progress(const std::string& msg) { std::cerr << "[fcan] " << msg << '\n'; }

std::string indexed(const char* pattern, std::size_t i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, i);
    return buf;
}

// Shared --config handling: load, then let subcommand flags override.
struct ConfigOption {
    std::string path;
    PipelineConfig resolve() const { return path.empty() ? PipelineConfig{} : PipelineConfig::load(path); }
};

void add_config(CLI::App* app, ConfigOption& opt) {
    app->add_option("--config", opt.path, "pipeline configuration (JSON)")->check(CLI::ExistingFile);
}

MiniFCN extractor_for(const std::string& model_dir, const PipelineConfig& cfg, std::uint64_t seed) {
    if (!model_dir.empty()) return MiniFCN::load(model_dir);
    BackboneConfig bc = cfg.backbone;
    bc.num_classes = cfg.data.num_classes;
    return MiniFCN(bc, seed);
}

std::vector<std::string> style_layer_list(const std::string& flag, const PipelineConfig& cfg) {
    if (flag.empty()) return cfg.aan.style_layers;
    auto layers = split(flag);
    for (const auto& l : layers) layer_index(l);
    return layers;
}

// ---- synth-data -----------------------------------------------------------

struct SynthArgs {
    ConfigOption cfg;
    std::string out;
    std::size_t n = 0;
    std::uint64_t seed = 0;
    std::string domain = "source";
    std::size_t height = 0, width = 0, classes = 0;
};

void run_synth(const SynthArgs& a) {
    PipelineConfig cfg = a.cfg.resolve();
    if (a.height) cfg.data.height = a.height;
    if (a.width) cfg.data.width = a.width;
    if (a.classes) cfg.data.num_classes = a.classes;
    cfg.seed = a.seed;
    cfg.output_dir = a.out;
    cfg.validate();
    const Domain domain = parse_domain(a.domain);
    if (a.n == 0) throw ConfigError("--n must be >= 1");
    const SceneSpec spec = cfg.scene_spec();
    fs::create_directories(a.out);
    for (std::size_t i = 0; i < a.n; ++i) {
        SceneSpec s = spec;
        s.seed = a.seed + i;
        Scene scene = gen_scene(s, domain);
        save_image(fs::path(a.out) / indexed("img_%05zu.ppm", i), scene.image);
        save_labels(fs::path(a.out) / indexed("lbl_%05zu.pgm", i), scene.labels);
    }
    nlohmann::json manifest{{"format", "fcan-synth"},
                            {"count", a.n},
                            {"seed", a.seed},
                            {"domain", std::string(domain_name(domain))},
                            {"height", cfg.data.height},
                            {"width", cfg.data.width},
                            {"num_classes", cfg.data.num_classes},
                            {"image_pattern", "img_%05d.ppm"},
                            {"label_pattern", "lbl_%05d.pgm"}};
    write_text(fs::path(a.out) / "manifest.json", manifest.dump(2) + "\n");
    cfg.write_resolved(a.out);
}

// ---- aan-style / aan-adapt ------------------------------------------------

struct StyleArgs {
    ConfigOption cfg;
    std::string images, out, model, layers;
    std::size_t count = 0;
    std::uint64_t seed = 0;
};

void run_style(const StyleArgs& a) {
    PipelineConfig cfg = a.cfg.resolve();
    cfg.seed = a.seed;
    cfg.output_dir = a.out;
    if (!a.layers.empty()) cfg.aan.style_layers = style_layer_list(a.layers, cfg);
    if (a.count) cfg.aan.style_images = a.count;
    cfg.validate();
    Dataset ds = load_dataset_dir(a.images, false);
    MiniFCN extractor = extractor_for(a.model, cfg, a.seed);
    extractor.set_requires_grad(false);
    std::vector<Tensor> imgs(ds.images.begin(),
                             ds.images.begin() + static_cast<std::ptrdiff_t>(std::min(cfg.aan.style_images, ds.size())));
    DomainStyle style = domain_style(imgs, extractor, cfg.aan.style_layers);
    style.save(a.out);
    cfg.write_resolved(a.out);
}

struct AdaptImageArgs {
    ConfigOption cfg;
    std::string input, style, out, model, layers, weights, init;
    std::optional<double> alpha, beta;
    std::size_t iters = 0;
    std::uint64_t seed = 0;
};

void run_aan_adapt(const AdaptImageArgs& a) {
    PipelineConfig cfg = a.cfg.resolve();
    cfg.seed = a.seed;
    AANConfig& ac = cfg.aan.config;
    if (a.alpha) ac.alpha = *a.alpha;
    if (a.beta) ac.beta = *a.beta;
    if (a.iters) ac.iterations = a.iters;
    if (!a.init.empty()) {
        if (a.init == "noise") {
            ac.init = AanInit::Noise;
        } else if (a.init == "source") {
            ac.init = AanInit::Source;
        } else {
            throw ConfigError("--init must be noise or source");
        }
    }
    if (!a.layers.empty() || !a.weights.empty()) {
        const auto layers = style_layer_list(a.layers, cfg);
        const auto weights = a.weights.empty() ? std::vector<double>(layers.size(), 1.0)
                                               : parse_doubles(a.weights, "--weights");
        if (weights.size() != layers.size()) {
            throw ConfigError("--weights needs one value per style layer (" + std::to_string(layers.size()) + ")");
        }
        ac.style_weights.fill(0.0);
        for (std::size_t i = 0; i < layers.size(); ++i) ac.style_weights[layer_index(layers[i])] = weights[i];
        cfg.aan.style_layers = layers;
    }
    cfg.validate();

    DomainStyle style = DomainStyle::load(a.style);
    for (std::size_t l = 0; l < kNumStages; ++l) {
        if (ac.style_weights[l] != 0.0 && !style.contains(kLayerNames[l])) {
            throw ConfigError("style in " + a.style + " has no Gram matrix for layer " + kLayerNames[l]);
        }
    }
    MiniFCN extractor = extractor_for(a.model, cfg, a.seed);
    extractor.set_requires_grad(false);

    const bool dir_mode = fs::is_directory(a.input);
    std::vector<fs::path> inputs;
    if (dir_mode) {
        for (std::size_t i = 0; fs::exists(fs::path(a.input) / indexed("img_%05zu.ppm", i)); ++i) {
            inputs.push_back(fs::path(a.input) / indexed("img_%05zu.ppm", i));
        }
        if (inputs.empty()) throw std::runtime_error("no img_00000.ppm in " + a.input);
    } else {
        inputs.push_back(a.input);
    }
    const fs::path out_dir = dir_mode ? fs::path(a.out) : fs::path(a.out).parent_path();
    if (!out_dir.empty()) fs::create_directories(out_dir);

    std::ostringstream csv;
    csv << "image,iter,loss\n" << std::setprecision(10);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        AANConfig per = ac;
        per.seed = a.seed + k;
        AanTrace trace;
        Tensor out = adapt_image(load_image(inputs[k]), style, extractor, per, &trace);
        save_image(dir_mode ? out_dir / inputs[k].filename() : fs::path(a.out), out);
        for (std::size_t i = 0; i < trace.losses.size(); ++i) csv << k << ',' << i << ',' << trace.losses[i] << '\n';
        progress(inputs[k].filename().string() + ": alpha " + std::to_string(trace.alpha) + ", loss " +
                 std::to_string(trace.losses.front()) + " -> " + std::to_string(trace.losses.back()));
    }
    const fs::path csv_path = dir_mode ? out_dir / "aan_losses.csv" : fs::path(a.out).replace_extension(".losses.csv");
    write_text(csv_path, csv.str());
    cfg.output_dir = out_dir;
    cfg.write_resolved(out_dir.empty() ? fs::path(".") : out_dir);
}

// ---- ran-* ----------------------------------------------------------------

struct TrainFlags {
    std::size_t iters = 0, batch = 0;
    std::optional<double> lr;
    std::uint64_t seed = 0;
};

void add_train_flags(CLI::App* app, TrainFlags& f) {
    app->add_option("--iters", f.iters, "iterations (overrides the config)");
    app->add_option("--lr", f.lr, "base learning rate (overrides the config)");
    app->add_option("--batch", f.batch, "minibatch size (overrides the config)");
    app->add_option("--seed", f.seed, "random seed");
}

void apply_train_flags(const TrainFlags& f, TrainConfig& t) {
    if (f.iters) t.max_iterations = f.iters;
    if (f.lr) t.base_lr = *f.lr;
    if (f.batch) t.batch_size = f.batch;
    t.seed = f.seed;
}

struct PretrainArgs {
    ConfigOption cfg;
    TrainFlags train;
    std::string source, out;
};

void run_pretrain(const PretrainArgs& a) {
    PipelineConfig cfg = a.cfg.resolve();
    apply_train_flags(a.train, cfg.ran.pretrain);
    cfg.seed = a.train.seed;
    cfg.output_dir = a.out;
    cfg.validate();
    Dataset src = load_dataset_dir(a.source, true);
    BackboneConfig bc = cfg.backbone;
    bc.num_classes = cfg.data.num_classes;
    MiniFCN model(bc, a.train.seed);
    PretrainResult r = pretrain_segmenter(model, src, cfg.ran.pretrain);
    model.save(fs::path(a.out) / "model");
    write_text(fs::path(a.out) / "losses.csv", losses_csv(r.log));
    cfg.write_resolved(a.out);
}

struct AdaptArgs {
    ConfigOption cfg;
    TrainFlags train;
    std::string model, source, target, labeled, out, disc = "aspp", preset = "src-tar";
    std::optional<double> lambda, lambda_s, lambda_t;
    std::size_t branches = 0;
};

void run_adapt(const AdaptArgs& a, bool semisup) {
    PipelineConfig cfg = a.cfg.resolve();
    TrainConfig& t = cfg.ran.adapt;
    apply_train_flags(a.train, t);
    if (a.lambda) t.lambda = *a.lambda;
    if (a.lambda_s) t.lambda_s = *a.lambda_s;
    if (a.lambda_t) t.lambda_t = *a.lambda_t;
    if (semisup && t.lambda_t == 0.0) t.lambda_t = t.lambda_s;
    if (a.branches) cfg.ran.disc_branches = a.branches;
    cfg.seed = a.train.seed;
    cfg.output_dir = a.out;
    cfg.validate();

    DiscriminatorConfig dc;
    if (a.disc == "ada") {
        dc = cfg.discriminator(1, true);
    } else if (a.disc == "conv") {
        dc = cfg.discriminator(1, false);
    } else if (a.disc == "aspp") {
        dc = cfg.discriminator(cfg.ran.disc_branches, false);
    } else {
        throw ConfigError("--disc must be ada, conv or aspp");
    }
    const Direction dir = parse_direction(a.preset);

    MiniFCN model = MiniFCN::load(a.model);
    if (model.config().widths.back() != dc.in_channels) dc.in_channels = model.config().widths.back();
    Dataset src = load_dataset_dir(a.source, true);
    Dataset tgt = load_dataset_dir(a.target, false);
    Dataset lab;
    if (semisup) lab = load_dataset_dir(a.labeled, true);

    const bool src_ada = dir == Direction::SrcAdaTar || dir == Direction::SrcAdaTarAda;
    const bool tar_ada = dir == Direction::SrcTarAda || dir == Direction::SrcAdaTarAda;
    if (src_ada || tar_ada) {
        MiniFCN extractor = model.clone();
        const std::vector<Tensor> source_images = src.images;
        if (src_ada) {
            progress("rendering source images with the target style");
            src.images = render_images(cfg, src.images, tgt.images, extractor, a.train.seed);
        }
        if (tar_ada) {
            progress("rendering target images with the source style");
            tgt.images = render_images(cfg, tgt.images, source_images, extractor, a.train.seed + 1);
        }
    }
    Discriminator disc(dc, a.train.seed + 1);
    RanResult r = train_ran(model, disc, src, tgt, t, lab);
    model.save(fs::path(a.out) / "model");
    disc.save(fs::path(a.out) / "discriminator");
    write_text(fs::path(a.out) / "losses.csv", losses_csv(r.log));
    cfg.write_resolved(a.out);
}

// ---- abn / eval / fuse ----------------------------------------------------

struct AbnArgs {
    std::string model, target, out;
};

void run_abn(const AbnArgs& a) {
    MiniFCN model = MiniFCN::load(a.model);
    Dataset tgt = load_dataset_dir(a.target, false);
    adapt_bn_stats(model, tgt.images).save(a.out);
}

struct EvalArgs {
    std::string pred, gt, model, out = "iou.csv", scales, save_scores, save_pred;
    std::size_t classes = 0;
};

void run_eval(const EvalArgs& a) {
    if (a.pred.empty() == a.model.empty()) throw ConfigError("eval needs exactly one of --pred or --model");
    Dataset gt = load_dataset_dir(a.gt, true);
    std::optional<MiniFCN> model;
    std::size_t k = a.classes;
    if (!a.model.empty()) {
        model.emplace(MiniFCN::load(a.model));
        if (k == 0) k = model->config().num_classes;
        if (k != model->config().num_classes) {
            throw ConfigError("--classes " + std::to_string(k) + " disagrees with the model's " +
                              std::to_string(model->config().num_classes) + " classes");
        }
    }
    if (k < 2) throw ConfigError("--classes must be >= 2");
    const std::vector<double> scales = a.scales.empty() ? std::vector<double>{1.0} : parse_doubles(a.scales, "--scales");
    for (double s : scales) {
        if (!(s > 0.0)) throw ConfigError("--scales entries must be > 0");
    }

    ConfusionMatrix cm(k);
    for (std::size_t i = 0; i < gt.size(); ++i) {
        LabelMap pred;
        if (model) {
            std::size_t skipped = 0;
            Tensor scores = multiscale_infer(*model, gt.images[i], scales, &skipped);
            if (skipped) progress("image " + std::to_string(i) + ": skipped " + std::to_string(skipped) + " scale(s)");
            if (!a.save_scores.empty()) {
                fs::create_directories(a.save_scores);
                save_fct(fs::path(a.save_scores) / indexed("scores_%05zu.fct", i), scores, DType::F64);
            }
            pred = scores_to_labels(scores);
        } else {
            pred = load_labels(fs::path(a.pred) / indexed("lbl_%05zu.pgm", i));
        }
        if (!a.save_pred.empty()) {
            fs::create_directories(a.save_pred);
            save_labels(fs::path(a.save_pred) / indexed("lbl_%05zu.pgm", i), pred);
        }
        cm.add(pred, gt.labels[i]);
    }
    const IoUReport rep = iou_report(cm);
    write_text(a.out, iou_csv(rep));
    std::cout << "mIoU " << std::fixed << std::setprecision(4) << 100.0 * rep.miou << '\n';
}

struct FuseArgs {
    std::string inputs, out, labels;
};

void run_fuse(const FuseArgs& a) {
    std::vector<Tensor> maps;
    for (const auto& p : split(a.inputs)) maps.push_back(load_fct(p));
    if (maps.empty()) throw ConfigError("--inputs must list at least one score map");
    Tensor fused = fuse_scores(maps);
    save_fct(a.out, fused, DType::F64);
    if (!a.labels.empty()) save_labels(a.labels, scores_to_labels(fused));
}

// ---- ablate ---------------------------------------------------------------

struct AblateArgs {
    ConfigOption cfg;
    std::string seeds = "0,1,2,3,4", presets, grid = "ladder", out;
    std::string labeled = "0,8,32,128";
};

void run_ablate(const AblateArgs& a) {
    PipelineConfig cfg = a.cfg.resolve();
    if (!a.out.empty()) cfg.output_dir = a.out;
    cfg.validate();
    const auto seeds = parse_seeds(a.seeds);
    cfg.seed = seeds.front();
    const fs::path out = cfg.output_dir;
    fs::create_directories(out);
    cfg.write_resolved(out);
    if (a.grid == "ladder") {
        std::vector<Preset> presets;
        if (a.presets.empty()) {
            presets.assign(kAllPresets.begin(), kAllPresets.end());
        } else {
            for (const auto& p : split(a.presets)) presets.push_back(parse_preset(p));
        }
        AblationReport rep = run_ablation(cfg, seeds, presets, progress);
        write_text(out / "ablation.csv", ablation_csv(rep));
    } else if (a.grid == "directions") {
        for (auto s : seeds) {
            DirectionReport rep = run_directions(cfg, s, progress);
            write_text(out / ("directions_seed_" + std::to_string(s) + ".csv"), directions_csv(rep));
        }
    } else if (a.grid == "semisup") {
        std::vector<std::size_t> counts;
        for (const auto& c : split(a.labeled)) counts.push_back(static_cast<std::size_t>(std::stoull(c)));
        std::ostringstream csv;
        csv << "seed,labeled,mIoU\n" << std::fixed << std::setprecision(4);
        for (auto s : seeds) {
            SemiSupReport rep = run_semisup(cfg, s, counts, progress);
            for (std::size_t i = 0; i < rep.miou.size(); ++i) {
                csv << s << ',' << rep.labeled_counts[i] << ',' << rep.miou[i] << '\n';
            }
        }
        write_text(out / "semisup.csv", csv.str());
    } else {
        throw ConfigError("--grid must be ladder, directions or semisup");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fcan: appearance and representation adaptation for semantic segmentation"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth-data", "generate a synthetic labelled image set");
    add_config(c_synth, synth.cfg);
    c_synth->add_option("--out", synth.out, "output directory")->required();
    c_synth->add_option("--n", synth.n, "number of scenes")->required();
    c_synth->add_option("--seed", synth.seed, "seed of the first scene");
    c_synth->add_option("--domain", synth.domain, "source or target")->check(CLI::IsMember({"source", "target"}));
    c_synth->add_option("--height", synth.height, "canvas height");
    c_synth->add_option("--width", synth.width, "canvas width");
    c_synth->add_option("--classes", synth.classes, "class count (2..5)");

    StyleArgs style;
    auto* c_style = app.add_subcommand("aan-style", "average Gram matrices of an image set into a domain style");
    add_config(c_style, style.cfg);
    c_style->add_option("--images", style.images, "directory of img_%05d.ppm")->required();
    c_style->add_option("--out", style.out, "output directory")->required();
    c_style->add_option("--model", style.model, "extractor checkpoint (default: random init from --seed)");
    c_style->add_option("--layers", style.layers, "comma-separated layers, e.g. c1,c2,c3,c4,c5");
    c_style->add_option("--count", style.count, "number of images to average");
    c_style->add_option("--seed", style.seed, "seed of the random extractor");

    AdaptImageArgs aan;
    auto* c_aan = app.add_subcommand("aan-adapt", "render image(s) with a domain style");
    add_config(c_aan, aan.cfg);
    c_aan->add_option("--input", aan.input, "PPM image or directory of img_%05d.ppm")->required();
    c_aan->add_option("--style", aan.style, "directory written by aan-style")->required();
    c_aan->add_option("--out", aan.out, "output PPM (or directory for directory input)")->required();
    c_aan->add_option("--model", aan.model, "extractor checkpoint (default: random init from --seed)");
    c_aan->add_option("--alpha", aan.alpha, "style weight (default: automatic)");
    c_aan->add_option("--beta", aan.beta, "initial step size");
    c_aan->add_option("--iters", aan.iters, "iterations");
    c_aan->add_option("--layers", aan.layers, "style layers");
    c_aan->add_option("--weights", aan.weights, "style weight per --layers entry");
    c_aan->add_option("--init", aan.init, "noise or source");
    c_aan->add_option("--seed", aan.seed, "seed for the noise initialisation and random extractor");

    PretrainArgs pre;
    auto* c_pre = app.add_subcommand("ran-pretrain", "train the segmenter on labelled source images");
    add_config(c_pre, pre.cfg);
    add_train_flags(c_pre, pre.train);
    c_pre->add_option("--source", pre.source, "labelled source directory")->required();
    c_pre->add_option("--out", pre.out, "output directory")->required();

    AdaptArgs adapt;
    auto* c_adapt = app.add_subcommand("ran-adapt", "adversarial adaptation to unlabelled target images");
    AdaptArgs semi;
    auto* c_semi = app.add_subcommand("ran-semisup", "adversarial adaptation with some labelled target images");
    for (auto [cmd, args] : {std::pair{c_adapt, &adapt}, std::pair{c_semi, &semi}}) {
        add_config(cmd, args->cfg);
        add_train_flags(cmd, args->train);
        cmd->add_option("--model", args->model, "pretrained segmenter checkpoint")->required();
        cmd->add_option("--source", args->source, "labelled source directory")->required();
        cmd->add_option("--target", args->target, "target image directory")->required();
        cmd->add_option("--out", args->out, "output directory")->required();
        cmd->add_option("--disc", args->disc, "discriminator: ada, conv or aspp");
        cmd->add_option("--branches", args->branches, "dilated branches of the aspp discriminator");
        cmd->add_option("--preset", args->preset,
                        "src-tar, src-tar_ada, src_ada-tar, src_ada-tar_ada or best-single");
        cmd->add_option("--lambda", args->lambda, "segmentation weight");
    }
    c_semi->add_option("--labeled", semi.labeled, "labelled target directory")->required();
    c_semi->add_option("--lambda-s", semi.lambda_s, "source segmentation weight");
    c_semi->add_option("--lambda-t", semi.lambda_t, "labelled-target segmentation weight");

    AbnArgs abn;
    auto* c_abn = app.add_subcommand("abn", "recompute BN statistics on target images");
    c_abn->add_option("--model", abn.model, "segmenter checkpoint")->required();
    c_abn->add_option("--target", abn.target, "target image directory")->required();
    c_abn->add_option("--out", abn.out, "output checkpoint directory")->required();

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "per-class IoU and mIoU");
    c_eval->add_option("--gt", ev.gt, "labelled directory")->required();
    c_eval->add_option("--pred", ev.pred, "directory of predicted lbl_%05d.pgm");
    c_eval->add_option("--model", ev.model, "segmenter checkpoint to run on the --gt images");
    c_eval->add_option("--classes", ev.classes, "class count");
    c_eval->add_option("--scales", ev.scales, "inference scales, e.g. 0.75,1,1.25");
    c_eval->add_option("--out", ev.out, "output CSV");
    c_eval->add_option("--save-scores", ev.save_scores, "write per-image score maps (.fct) here");
    c_eval->add_option("--save-pred", ev.save_pred, "write predicted label maps here");

    FuseArgs fuse;
    auto* c_fuse = app.add_subcommand("fuse", "average score maps");
    c_fuse->add_option("--inputs", fuse.inputs, "comma-separated .fct score maps")->required();
    c_fuse->add_option("--out", fuse.out, "output .fct")->required();
    c_fuse->add_option("--labels", fuse.labels, "also write the argmax label map (PGM)");

    AblateArgs abl;
    auto* c_abl = app.add_subcommand("ablate", "run the synthetic benchmark");
    add_config(c_abl, abl.cfg);
    c_abl->add_option("--seeds", abl.seeds, "comma-separated seeds");
    c_abl->add_option("--presets", abl.presets, "subset of FCN,ABN,ADA,Conv,ASPP,FCAN");
    c_abl->add_option("--grid", abl.grid, "ladder, directions or semisup");
    c_abl->add_option("--labeled", abl.labeled, "labelled target counts for the semisup grid");
    c_abl->add_option("--out", abl.out, "output directory (overrides the config)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*c_synth) run_synth(synth);
        else if (*c_style) run_style(style);
        else if (*c_aan) run_aan_adapt(aan);
        else if (*c_pre) run_pretrain(pre);
        else if (*c_adapt) run_adapt(adapt, false);
        else if (*c_semi) run_adapt(semi, true);
        else if (*c_abn) run_abn(abn);
        else if (*c_eval) run_eval(ev);
        else if (*c_fuse) run_fuse(fuse);
        else if (*c_abl) run_ablate(abl);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::invalid_argument& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::out_of_range& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitOk;
}

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fcan/aan.hpp"
#include "fcan/backbone.hpp"
#include "fcan/data.hpp"
#include "fcan/eval.hpp"
#include "fcan/ran.hpp"

namespace fcan {

/// Malformed or out-of-range configuration (CLI exit code 2).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct DataSection {
    std::size_t height = 128;
    std::size_t width = 128;
    std::size_t num_classes = 5;
    std::size_t source_train = 200;
    std::size_t target_train = 200;
    std::size_t target_val = 100;
    std::size_t source_val = 50;
    StyleParams source_style = default_source_style();
    StyleParams target_style = default_target_style();
};

struct AanSection {
    AANConfig config;
    std::vector<std::string> style_layers{"c1", "c2", "c3", "c4", "c5"};
    /// Images averaged into a domain style (first N of the training split).
    std::size_t style_images = 32;
};

struct RanSection {
    TrainConfig pretrain;
    TrainConfig adapt;
    std::size_t disc_branches = 4;
    std::size_t disc_channels = 32;
};

struct EvalSection {
    std::vector<double> scales{1.0};
};

/// Desk-scale defaults for every stage. Module-level defaults (TrainConfig,
/// AANConfig) keep their full-scale values; this struct overrides them.
struct PipelineConfig {
    DataSection data;
    BackboneConfig backbone;
    AanSection aan;
    RanSection ran;
    EvalSection eval;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "fcan_out";

    PipelineConfig();

    /// Missing keys keep their defaults; unknown keys throw ConfigError.
    static PipelineConfig from_json(const nlohmann::json& doc);
    static PipelineConfig load(const std::filesystem::path& path);
    nlohmann::json to_json() const;
    void validate() const;
    /// Writes the resolved document to dir/config.json.
    void write_resolved(const std::filesystem::path& dir) const;

    DiscriminatorConfig discriminator(std::size_t branches, bool image_level) const;
    SceneSpec scene_spec() const;
};

/// Splits of one benchmark seed. Target-train labels are kept only to draw
/// labelled subsets for semi-supervised runs.
struct Benchmark {
    Dataset source;
    Dataset target;
    Dataset target_val;
    Dataset source_val;
};

Benchmark make_benchmark(const PipelineConfig& cfg, std::uint64_t seed);

/// Source-only pretraining of a fresh segmenter.
MiniFCN pretrain_fcn(const PipelineConfig& cfg, const Dataset& source, std::uint64_t seed,
                     std::vector<LossRow>* log = nullptr);

/// Renders every image of `images` with the style averaged over `style_images`
/// using the frozen extractor.
std::vector<Tensor> render_images(const PipelineConfig& cfg, const std::vector<Tensor>& images,
                                  const std::vector<Tensor>& style_images, MiniFCN& extractor, std::uint64_t seed);

/// Adversarial fine-tuning from `init` followed by target-side ABN.
MiniFCN adapt_ran(const PipelineConfig& cfg, const MiniFCN& init, const Dataset& source, const Dataset& target,
                  const DiscriminatorConfig& disc, std::uint64_t seed, const Dataset& labeled_target = {},
                  std::vector<LossRow>* log = nullptr);

enum class Preset { Fcn, Abn, Ada, Conv, Aspp, Fcan };
inline constexpr std::array<Preset, 6> kAllPresets{Preset::Fcn, Preset::Abn, Preset::Ada,
                                                   Preset::Conv, Preset::Aspp, Preset::Fcan};
std::string preset_name(Preset p);
Preset parse_preset(const std::string& name);
/// Reference column of the ablation report.
double preset_reference(Preset p);

struct AblationRow {
    Preset preset;
    std::vector<double> miou;  // percent, one per seed
    double mean() const;
    double median() const;
};

struct AblationReport {
    std::vector<std::uint64_t> seeds;
    std::vector<AblationRow> rows;
    const AblationRow& row(Preset p) const;
};

using Progress = std::function<void(const std::string&)>;

/// Final model of every preset run for one seed.
struct SeedModels {
    std::uint64_t seed = 0;
    const Benchmark* bench = nullptr;
    std::vector<std::pair<Preset, MiniFCN>> models;
    const MiniFCN& at(Preset p) const;
};
using SeedHook = std::function<void(const SeedModels&)>;

/// Runs the requested presets for every seed; stages shared between presets
/// (pretraining, ABN, rendering) are computed once per seed.
AblationReport run_ablation(const PipelineConfig& cfg, const std::vector<std::uint64_t>& seeds,
                            const std::vector<Preset>& presets = {kAllPresets.begin(), kAllPresets.end()},
                            const Progress& progress = {}, const SeedHook& hook = {});

/// "preset,reference,mean,seed_<s>..." rows.
std::string ablation_csv(const AblationReport& report);

/// Which side of the adversarial pair is rendered by AAN.
enum class Direction { SrcTar, SrcTarAda, SrcAdaTar, SrcAdaTarAda };
inline constexpr std::array<Direction, 4> kAllDirections{Direction::SrcTar, Direction::SrcTarAda,
                                                         Direction::SrcAdaTar, Direction::SrcAdaTarAda};
inline constexpr Direction kBestSingleDirection = Direction::SrcAdaTar;
std::string direction_name(Direction d);
Direction parse_direction(const std::string& name);

struct DirectionReport {
    std::array<double, 4> miou{};  // indexed like kAllDirections
    double fused = 0.0;
};

/// Trains one adapted model per direction and scores the late fusion of their
/// per-pixel probabilities on the target validation split.
DirectionReport run_directions(const PipelineConfig& cfg, std::uint64_t seed, const Progress& progress = {});
std::string directions_csv(const DirectionReport& report);

struct SemiSupReport {
    std::vector<std::size_t> labeled_counts;
    std::vector<double> miou;
};

/// FCAN with labelled target subsets of each size (0 = unsupervised).
SemiSupReport run_semisup(const PipelineConfig& cfg, std::uint64_t seed, const std::vector<std::size_t>& counts,
                          const Progress& progress = {});

struct ProbeReport {
    double before = 0.0;  // domain accuracy on source-only features
    double after = 0.0;   // domain accuracy on adapted features
};

/// Trains fresh probe discriminators on frozen c5 features. Before
/// adaptation both domains go through the source-trained segmenter; after
/// adaptation each domain is normalized with its own BN statistics.
ProbeReport probe_models(const PipelineConfig& cfg, const Benchmark& bench, const MiniFCN& source_only,
                         const MiniFCN& adapted, std::uint64_t seed);
ProbeReport run_probe(const PipelineConfig& cfg, std::uint64_t seed, const Progress& progress = {});

}  // namespace fcan

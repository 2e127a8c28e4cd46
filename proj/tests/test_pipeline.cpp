#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fcan/pipeline.hpp"

using namespace fcan;
using nlohmann::json;

namespace {

json tiny_json() {
    return json::parse(R"({
      "data": {"height": 32, "width": 32, "num_classes": 3, "source_train": 8, "target_train": 8,
               "target_val": 3, "source_val": 2},
      "backbone": {"widths": [3, 3, 4, 4, 5]},
      "aan": {"iterations": 2, "style_images": 2, "alpha": 1.0},
      "ran": {"pretrain": {"iterations": 3, "batch_size": 2},
              "adapt": {"iterations": 2, "batch_size": 2},
              "disc_branches": 2, "disc_channels": 2},
      "eval": {"scales": [1.0]}
    })");
}

PipelineConfig tiny() { return PipelineConfig::from_json(tiny_json()); }

}  // namespace

TEST(Config, DefaultsValidateAndRoundTrip) {
    PipelineConfig d;
    EXPECT_NO_THROW(d.validate());
    PipelineConfig c = tiny();
    EXPECT_EQ(c.data.height, 32u);
    EXPECT_EQ(c.ran.pretrain.max_iterations, 3u);
    EXPECT_EQ(c.ran.adapt.max_iterations, 2u);
    EXPECT_EQ(c.data.target_val, 3u);
    EXPECT_EQ(c.ran.adapt.lambda, d.ran.adapt.lambda);
    PipelineConfig back = PipelineConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(*back.aan.config.alpha, 1.0);
    json auto_alpha = tiny_json();
    auto_alpha["aan"]["alpha"] = nullptr;
    EXPECT_FALSE(PipelineConfig::from_json(auto_alpha).aan.config.alpha.has_value());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    json j = tiny_json();
    j["ran"]["adapt"]["lamda"] = 3.0;
    EXPECT_THROW(PipelineConfig::from_json(j), ConfigError);
    j = tiny_json();
    j["extra"] = 1;
    EXPECT_THROW(PipelineConfig::from_json(j), ConfigError);
    j = tiny_json();
    j["data"]["num_classes"] = 9;
    EXPECT_THROW(PipelineConfig::from_json(j).validate(), ConfigError);
    j = tiny_json();
    j["data"]["height"] = "tall";
    EXPECT_THROW(PipelineConfig::from_json(j), ConfigError);
    j = tiny_json();
    j["aan"]["init"] = "zeros";
    EXPECT_THROW(PipelineConfig::from_json(j), ConfigError);
    j = tiny_json();
    j["aan"]["style_layers"] = {"c7"};
    EXPECT_THROW(PipelineConfig::from_json(j).validate(), ConfigError);
    j = tiny_json();
    j["eval"]["scales"] = json::array();
    EXPECT_THROW(PipelineConfig::from_json(j).validate(), ConfigError);
    EXPECT_THROW(PipelineConfig::load("/nonexistent/config.json"), ConfigError);
}

TEST(Config, WriteResolvedProducesLoadableFile) {
    const auto dir = std::filesystem::temp_directory_path() / "fcan_test_pipeline_cfg";
    std::filesystem::remove_all(dir);
    tiny().write_resolved(dir);
    PipelineConfig r = PipelineConfig::load(dir / "config.json");
    EXPECT_EQ(r.to_json(), tiny().to_json());
    std::filesystem::remove_all(dir);
}

TEST(Names, PresetsAndDirectionsParse) {
    for (auto p : kAllPresets) EXPECT_EQ(parse_preset(preset_name(p)), p);
    EXPECT_EQ(preset_name(Preset::Abn), "+ABN");
    EXPECT_DOUBLE_EQ(preset_reference(Preset::Fcan), 46.60);
    EXPECT_THROW(parse_preset("nope"), std::invalid_argument);
    for (auto d : kAllDirections) EXPECT_EQ(parse_direction(direction_name(d)), d);
    EXPECT_EQ(parse_direction("best-single"), Direction::SrcAdaTar);
    EXPECT_THROW(parse_direction("tar-src"), std::invalid_argument);
}

TEST(Benchmark, SplitsHaveConfiguredSizesAndDistinctScenes) {
    PipelineConfig c = tiny();
    Benchmark b = make_benchmark(c, 0);
    EXPECT_EQ(b.source.size(), 8u);
    EXPECT_EQ(b.target.size(), 8u);
    EXPECT_EQ(b.target_val.size(), 3u);
    EXPECT_EQ(b.source_val.size(), 2u);
    EXPECT_EQ(b.target.labels.size(), 8u);
    EXPECT_NE(b.source.labels[0], b.target.labels[0]);
    EXPECT_NE(b.target.labels[0], b.target_val.labels[0]);
    Benchmark again = make_benchmark(c, 0);
    EXPECT_EQ(again.target_val.labels, b.target_val.labels);
}

TEST(Ablation, ReportsSixRowsAndFcnMatchesStandaloneRun) {
    PipelineConfig c = tiny();
    std::vector<std::string> log;
    std::size_t hooks = 0;
    AblationReport rep = run_ablation(
        c, {0, 1}, {kAllPresets.begin(), kAllPresets.end()}, [&](const std::string& m) { log.push_back(m); },
        [&](const SeedModels& s) {
            ++hooks;
            EXPECT_EQ(s.models.size(), 6u);
            EXPECT_NO_THROW(s.at(Preset::Fcan));
        });
    EXPECT_EQ(hooks, 2u);
    ASSERT_EQ(rep.rows.size(), 6u);
    for (const auto& r : rep.rows) {
        EXPECT_EQ(r.miou.size(), 2u);
        for (double v : r.miou) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 100.0);
        }
    }
    EXPECT_FALSE(log.empty());

    for (std::uint64_t seed : {0u, 1u}) {
        Benchmark b = make_benchmark(c, seed);
        MiniFCN fcn = pretrain_fcn(c, b.source, seed);
        const double standalone = 100.0 * iou_report(evaluate(fcn, b.target_val, c.eval.scales)).miou;
        EXPECT_EQ(rep.row(Preset::Fcn).miou[seed], standalone);
        MiniFCN abn = adapt_bn_stats(fcn, b.target.images);
        EXPECT_EQ(rep.row(Preset::Abn).miou[seed], 100.0 * iou_report(evaluate(abn, b.target_val)).miou);
    }

    const std::string csv = ablation_csv(rep);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "preset,reference,mean,seed_0,seed_1");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
    EXPECT_NE(csv.find("\nFCAN,46.60,"), std::string::npos);
}

TEST(Ablation, RowStatistics) {
    AblationRow r{Preset::Fcn, {3.0, 1.0, 10.0, 2.0}};
    EXPECT_DOUBLE_EQ(r.mean(), 4.0);
    EXPECT_DOUBLE_EQ(r.median(), 2.5);
    AblationReport rep;
    EXPECT_THROW(rep.row(Preset::Fcn), std::out_of_range);
    EXPECT_THROW(run_ablation(tiny(), {}), ConfigError);
}

TEST(Ablation, IsDeterministic) {
    PipelineConfig c = tiny();
    const std::vector<Preset> p{Preset::Fcn, Preset::Aspp};
    EXPECT_EQ(ablation_csv(run_ablation(c, {3}, p)), ablation_csv(run_ablation(c, {3}, p)));
}

TEST(Directions, FourSettingsAndFusion) {
    DirectionReport r = run_directions(tiny(), 0);
    for (double v : r.miou) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 100.0);
    }
    const std::string csv = directions_csv(r);
    EXPECT_EQ(csv.rfind("setting,mIoU\n", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
    EXPECT_NE(csv.find("src_ada-tar,"), std::string::npos);
}

TEST(SemiSup, OneResultPerLabelledCount) {
    SemiSupReport r = run_semisup(tiny(), 0, {0, 2, 4});
    EXPECT_EQ(r.labeled_counts, (std::vector<std::size_t>{0, 2, 4}));
    ASSERT_EQ(r.miou.size(), 3u);
    EXPECT_THROW(run_semisup(tiny(), 0, {9}), ConfigError);
}

TEST(ProbeRun, ReturnsAccuracies) {
    ProbeReport r = run_probe(tiny(), 0);
    EXPECT_GE(r.before, 0.0);
    EXPECT_LE(r.before, 1.0);
    EXPECT_GE(r.after, 0.0);
    EXPECT_LE(r.after, 1.0);
}

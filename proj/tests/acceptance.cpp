// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--work DIR] [--only 1,2,...]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "fcan/pipeline.hpp"
#include "suites.hpp"

using namespace fcan;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Outcome criterion_analytic() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto checks = suites::analytic_checks();
    const double t = seconds_since(t0);
    Outcome o{t < 1.0, {}};
    std::size_t failed = 0;
    for (const auto& c : checks) {
        if (!c.pass()) {
            ++failed;
            o.detail += " [" + c.name + " = " + fmt("%.9g", c.value) + ", expected " + fmt("%.9g", c.expected) + "]";
        }
    }
    o.pass = o.pass && failed == 0;
    o.detail = std::to_string(checks.size() - failed) + "/" + std::to_string(checks.size()) + " values within 1e-6, " +
               fmt("%.3f s", t) + o.detail;
    return o;
}

Outcome criterion_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    std::map<std::string, double> worst;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (const auto& r : suites::gradient_checks(seed)) worst[r.name] = std::max(worst[r.name], r.max_error);
    }
    const double t = seconds_since(t0);
    double max_err = 0.0;
    std::string argmax, failures;
    for (const auto& [name, e] : worst) {
        if (e > max_err) {
            max_err = e;
            argmax = name;
        }
        if (!(e < 1e-6)) failures += " " + name;
    }
    Outcome o{failures.empty() && t < 60.0, {}};
    o.detail = std::to_string(worst.size()) + " checks x 10 seeds, max rel. error " + fmt("%.2e", max_err) + " (" +
               argmax + "), " + fmt("%.1f s", t);
    if (!failures.empty()) o.detail += "; failing:" + failures;
    return o;
}

Outcome criterion_aan() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = suites::aan_descent(0);
    const double t = seconds_since(t0);
    Outcome o{r.ratio() <= 0.10 && r.running_min_non_increasing && t < 120.0, {}};
    o.detail = "L_AAN " + fmt("%.4g", r.initial) + " -> " + fmt("%.4g", r.final_loss) + " (ratio " +
               fmt("%.3f", r.ratio()) + "), running min " +
               (r.running_min_non_increasing ? "non-increasing" : "INCREASES") + ", " + fmt("%.1f s", t);
    return o;
}

struct LadderResult {
    Outcome ordering;
    Outcome probe;
};

LadderResult criteria_ladder_and_probe(const fs::path& work, bool want_probe) {
    const auto t0 = std::chrono::steady_clock::now();
    PipelineConfig cfg;
    const std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::vector<ProbeReport> probes;
    double probe_seconds = 0.0;
    const auto progress = [](const std::string& m) { std::cerr << "  " << m << std::endl; };
    const auto hook = [&](const SeedModels& s) {
        if (!want_probe) return;
        const auto p0 = std::chrono::steady_clock::now();
        ProbeReport p = probe_models(cfg, *s.bench, s.at(Preset::Fcn), s.at(Preset::Fcan), s.seed);
        probe_seconds += seconds_since(p0);
        std::cerr << "  seed " << s.seed << ": probe accuracy before " << p.before << ", after " << p.after
                  << std::endl;
        probes.push_back(p);
    };
    AblationReport rep = run_ablation(cfg, seeds, {Preset::Fcn, Preset::Abn, Preset::Fcan}, progress, hook);
    const double t = seconds_since(t0) - probe_seconds;
    std::ofstream(work / "ablation.csv") << ablation_csv(rep);

    const auto& fcn = rep.row(Preset::Fcn).miou;
    const auto& abn = rep.row(Preset::Abn).miou;
    const auto& fcan = rep.row(Preset::Fcan).miou;
    std::size_t abn_wins = 0, fcan_wins = 0;
    std::vector<double> gains;
    std::ostringstream per_seed;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        abn_wins += fcn[i] < abn[i];
        fcan_wins += abn[i] < fcan[i];
        gains.push_back(fcan[i] - fcn[i]);
        per_seed << " s" << seeds[i] << "=" << fmt("%.1f", fcn[i]) << "/" << fmt("%.1f", abn[i]) << "/"
                 << fmt("%.1f", fcan[i]);
    }
    std::sort(gains.begin(), gains.end());
    const double median_gain = gains[gains.size() / 2];

    LadderResult out;
    out.ordering.pass = abn_wins >= 4 && fcan_wins >= 4 && median_gain >= 5.0 && t < 1800.0;
    out.ordering.detail = "FCN<ABN in " + std::to_string(abn_wins) + "/5, ABN<FCAN in " + std::to_string(fcan_wins) +
                          "/5, median FCAN-FCN gain " + fmt("%.2f", median_gain) + " mIoU; FCN/ABN/FCAN:" +
                          per_seed.str() + "; " + fmt("%.0f s", t);
    if (want_probe) {
        std::size_t ok = 0;
        std::ostringstream detail;
        for (std::size_t i = 0; i < probes.size(); ++i) {
            ok += probes[i].before > 0.9 && probes[i].after < 0.8;
            detail << " s" << seeds[i] << "=" << fmt("%.3f", probes[i].before) << "->" << fmt("%.3f", probes[i].after);
        }
        out.probe.pass = ok >= 4;
        out.probe.detail = "before>0.9 and after<0.8 in " + std::to_string(ok) + "/5 seeds;" + detail.str() + "; " +
                           fmt("%.0f s", probe_seconds);
    }
    return out;
}

Outcome criterion_semisup(const fs::path& work) {
    const auto t0 = std::chrono::steady_clock::now();
    PipelineConfig cfg;
    const std::vector<std::size_t> counts{0, 8, 32, 128};
    SemiSupReport r =
        run_semisup(cfg, 0, counts, [](const std::string& m) { std::cerr << "  semisup: " << m << std::endl; });
    std::ofstream csv(work / "semisup.csv");
    csv << "labeled,mIoU\n";
    bool ok = true;
    std::ostringstream detail;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        csv << counts[i] << ',' << fmt("%.4f", r.miou[i]) << '\n';
        if (i > 0 && r.miou[i] < r.miou[i - 1] - 1.0) ok = false;
        detail << (i ? ", " : "") << counts[i] << ":" << fmt("%.2f", r.miou[i]);
    }
    return {ok, "mIoU by labelled count " + detail.str() + "; " + fmt("%.0f s", seconds_since(t0))};
}

Outcome criterion_oracles() {
    const auto iou = suites::iou_oracle(1000, 2024);
    const auto conv = suites::conv_oracle(100, 2024);
    const bool ok = iou.cases == 1000 && iou.mismatches == 0 && iou.max_error <= 1e-10 && conv.cases == 100 &&
                    conv.mismatches == 0 && conv.max_error <= 1e-10;
    return {ok, "IoU 1000 pairs max diff " + fmt("%.1e", iou.max_error) + " (" + std::to_string(iou.mismatches) +
                    " applicability mismatches); conv2d 100 cases max diff " + fmt("%.1e", conv.max_error)};
}

// ---- CLI determinism ----------------------------------------------------------

int run_cli(const fs::path& dir, const std::string& threads, const std::string& args) {
    const std::string cmd = "cd '" + dir.string() + "' && FCAN_THREADS=" + threads + " '" FCAN_CLI_PATH "' " + args +
                            " > /dev/null 2>> cli.log";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const char* kTinyConfig = R"({
  "data": {"height": 48, "width": 48, "num_classes": 4, "source_train": 12, "target_train": 12,
           "target_val": 4, "source_val": 2},
  "backbone": {"widths": [4, 6, 8, 8, 12]},
  "aan": {"iterations": 5, "style_images": 4},
  "ran": {"pretrain": {"iterations": 6, "batch_size": 4},
          "adapt": {"iterations": 4, "batch_size": 2},
          "disc_branches": 2, "disc_channels": 4}
})";

const std::vector<std::string> kCliScript{
    "synth-data --config tiny.json --out src --n 12 --domain source --seed 1",
    "synth-data --config tiny.json --out tgt --n 12 --domain target --seed 500",
    "synth-data --config tiny.json --out val --n 4 --domain target --seed 900",
    "synth-data --config tiny.json --out lab --n 4 --domain target --seed 700",
    "aan-style --config tiny.json --images tgt --out style --count 4 --seed 3",
    "aan-adapt --config tiny.json --input src --style style --out rendered --iters 5 --seed 3",
    "ran-pretrain --config tiny.json --source src --out pre --seed 4",
    "ran-adapt --config tiny.json --model pre/model --source src --target tgt --out adapted --disc aspp --seed 5",
    "ran-adapt --config tiny.json --model pre/model --source src --target tgt --out adapted_ada --disc ada --seed 5",
    "ran-semisup --config tiny.json --model pre/model --source src --target tgt --labeled lab --out semi --seed 6",
    "abn --model adapted/model --target tgt --out abn",
    "eval --gt val --model abn --out iou.csv --scales 0.75,1,1.25 --save-scores scores --save-pred pred",
    "eval --gt val --pred pred --classes 4 --out iou_pred.csv",
    "fuse --inputs scores/scores_00000.fct,scores/scores_00001.fct --out fused.fct --labels fused.pgm",
    "ablate --config tiny.json --seeds 0,1 --out ablate",
    "ablate --config tiny.json --seeds 0 --grid directions --out directions",
    "ablate --config tiny.json --seeds 0 --grid semisup --labeled 0,2,4 --out semisup",
};

Outcome criterion_determinism(const fs::path& work) {
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path root = work / "determinism";
    fs::remove_all(root);
    const std::array<std::pair<std::string, std::string>, 2> runs{{{"run1", "1"}, {"run2", "4"}}};
    for (const auto& [name, threads] : runs) {
        const fs::path dir = root / name;
        fs::create_directories(dir);
        std::ofstream(dir / "tiny.json") << kTinyConfig;
        for (const auto& args : kCliScript) {
            const int rc = run_cli(dir, threads, args);
            if (rc != 0) return {false, name + ": 'fcan " + args + "' exited with " + std::to_string(rc)};
        }
    }
    std::size_t files = 0, csvs = 0;
    std::vector<std::string> differing;
    std::set<std::string> seen;
    for (const auto& e : fs::recursive_directory_iterator(root / "run1")) {
        if (!e.is_regular_file()) continue;
        const fs::path rel = fs::relative(e.path(), root / "run1");
        if (rel == "cli.log") continue;
        seen.insert(rel.string());
        ++files;
        csvs += rel.extension() == ".csv";
        const fs::path other = root / "run2" / rel;
        if (!fs::exists(other) || read_bytes(e.path()) != read_bytes(other)) differing.push_back(rel.string());
    }
    for (const auto& e : fs::recursive_directory_iterator(root / "run2")) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), root / "run2").string();
        if (rel != "cli.log" && !seen.count(rel)) differing.push_back(rel);
    }
    Outcome o{differing.empty() && csvs > 0, {}};
    o.detail = std::to_string(kCliScript.size()) + " commands run twice (FCAN_THREADS=1 vs 4): " +
               std::to_string(files - differing.size()) + "/" + std::to_string(files) + " output files identical (" +
               std::to_string(csvs) + " CSV); " + fmt("%.0f s", seconds_since(t0));
    for (std::size_t i = 0; i < std::min<std::size_t>(differing.size(), 5); ++i) o.detail += " differs: " + differing[i];
    return o;
}

void print(int id, const Outcome& o) {
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
    fs::path work = "acceptance_work";
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--work" && i + 1 < argc) {
            work = argv[++i];
        } else if (a == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            std::string tok;
            while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
        } else {
            std::cerr << "usage: acceptance [--work DIR] [--only 1,2,...]\n";
            return 2;
        }
    }
    fs::create_directories(work);
    const auto wanted = [&](int id) { return only.empty() || only.count(id); };

    bool all = true;
    const auto report = [&](int id, const Outcome& o) {
        all = all && o.pass;
        print(id, o);
    };
    const auto guarded = [&](int id, const std::function<Outcome()>& fn) {
        try {
            report(id, fn());
        } catch (const std::exception& e) {
            report(id, {false, std::string("exception: ") + e.what()});
        }
    };

    if (wanted(1)) guarded(1, criterion_analytic);
    if (wanted(2)) guarded(2, criterion_gradients);
    if (wanted(3)) guarded(3, criterion_aan);
    if (wanted(4) || wanted(5)) {
        try {
            LadderResult r = criteria_ladder_and_probe(work, wanted(5));
            if (wanted(4)) report(4, r.ordering);
            if (wanted(5)) report(5, r.probe);
        } catch (const std::exception& e) {
            if (wanted(4)) report(4, {false, std::string("exception: ") + e.what()});
            if (wanted(5)) report(5, {false, std::string("exception: ") + e.what()});
        }
    }
    if (wanted(6)) guarded(6, [&] { return criterion_semisup(work); });
    if (wanted(7)) guarded(7, criterion_oracles);
    if (wanted(8)) guarded(8, [&] { return criterion_determinism(work); });
    return all ? 0 : 1;
}

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fcan/ops.hpp"
#include "fcan/tensor.hpp"

namespace fcan {

/// H x W class indices; kIgnoreLabel marks pixels excluded from losses and metrics.
struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::int32_t> values;

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, std::int32_t fill = 0) : height(h), width(w), values(h * w, fill) {}

    std::int32_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
    std::int32_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
    bool operator==(const LabelMap&) const = default;
};

enum class Domain { Source, Target };

Domain parse_domain(std::string_view name);
std::string_view domain_name(Domain d);

/// Low-level appearance of one domain. Layout never depends on these.
struct StyleParams {
    double hue_rotation_deg = 0.0;  // rotation of every palette colour around the grey axis
    double brightness = 0.0;        // added after contrast
    double contrast = 1.0;          // scales deviations from mid-grey
    double noise_sigma = 0.02;      // per-pixel gaussian noise
    double texture_amplitude = 0.0; // sinusoidal texture strength
    double texture_frequency = 0.0; // cycles per pixel
    std::array<double, 3> channel_gain{1.0, 1.0, 1.0};
};

StyleParams default_source_style();
StyleParams default_target_style();

/// Class ids of the default 5-class scene vocabulary.
enum SceneClass : std::int32_t { kBackground = 0, kRoad = 1, kBox = 2, kDisk = 3, kTriangle = 4 };

struct SceneSpec {
    std::uint64_t seed = 0;
    std::size_t height = 128;
    std::size_t width = 128;
    std::size_t num_classes = 5;  // 2..5; classes >= num_classes are not drawn
    StyleParams source = default_source_style();
    StyleParams target = default_target_style();
};

inline constexpr std::size_t kMinCanvas = 16;

struct Scene {
    Tensor image;  // [3,H,W] in [0,1]
    LabelMap labels;
};

/// Layout is drawn from spec.seed alone; appearance from the seed and the
/// domain's style, so both domains share labels for a given seed.
Scene gen_scene(const SceneSpec& spec, Domain domain);

struct Dataset {
    std::vector<Tensor> images;
    std::vector<LabelMap> labels;
    std::size_t size() const { return images.size(); }
};

/// Scenes with seeds base_seed, base_seed+1, ...
Dataset make_dataset(const SceneSpec& base, Domain domain, std::size_t count, std::uint64_t base_seed);

/// Raised for malformed or truncated PNM data.
class PnmError : public std::runtime_error {
public:
    PnmError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

/// Binary PPM (P6, maxval 255) to [3,H,W] reals in [0,1].
Tensor decode_ppm(std::string_view bytes);
std::string encode_ppm(const Tensor& image);
/// Binary PGM (P5, maxval 255) to labels; byte 255 is the ignore label.
LabelMap decode_pgm(std::string_view bytes);
std::string encode_pgm(const LabelMap& labels);

Tensor load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Tensor& image);
LabelMap load_labels(const std::filesystem::path& path);
void save_labels(const std::filesystem::path& path, const LabelMap& labels);

/// Reads img_%05d.ppm (and lbl_%05d.pgm when present) from a directory in index order.
Dataset load_dataset_dir(const std::filesystem::path& dir, bool require_labels);

}  // namespace fcan

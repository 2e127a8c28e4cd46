#include "fcan/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace fcan {

namespace {

using Rgb = std::array<double, 3>;

constexpr std::uint64_t kTargetStream = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kSourceStream = 0x632be59bd9b4e019ULL;

const std::array<Rgb, 5> kPalette{{
    {0.62, 0.72, 0.86},  // background
    {0.42, 0.40, 0.44},  // road
    {0.85, 0.30, 0.22},  // box
    {0.25, 0.72, 0.32},  // disk
    {0.28, 0.36, 0.88},  // triangle
}};

struct Shape2d {
    SceneClass cls;
    double cx, cy, r;
    double angle;
};

struct Layout {
    double road_top, road_bottom, road_center, road_half_top, road_half_bottom;
    std::vector<Shape2d> shapes;
};

Layout draw_layout(const SceneSpec& spec) {
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double h = static_cast<double>(spec.height), w = static_cast<double>(spec.width);
    Layout lay{};
    lay.road_top = h * (0.50 + 0.15 * u(rng));
    lay.road_bottom = h;
    lay.road_center = w * (0.35 + 0.30 * u(rng));
    lay.road_half_top = w * (0.04 + 0.06 * u(rng));
    lay.road_half_bottom = w * (0.30 + 0.20 * u(rng));

    std::vector<SceneClass> kinds;
    for (SceneClass c : {kBox, kDisk, kTriangle}) {
        if (static_cast<std::size_t>(c) < spec.num_classes) kinds.push_back(c);
    }
    if (kinds.empty()) return lay;
    const int count = 2 + static_cast<int>(u(rng) * 3.0);
    const double side = std::min(h, w);
    for (int i = 0; i < count; ++i) {
        Shape2d s{};
        s.cls = kinds[static_cast<std::size_t>(u(rng) * static_cast<double>(kinds.size())) % kinds.size()];
        s.r = side * (0.08 + 0.10 * u(rng));
        s.cx = s.r + (w - 2 * s.r) * u(rng);
        s.cy = s.r + (h - 2 * s.r) * u(rng);
        s.angle = 2.0 * std::numbers::pi * u(rng);
        lay.shapes.push_back(s);
    }
    return lay;
}

bool inside(const Shape2d& s, double x, double y) {
    const double dx = x - s.cx, dy = y - s.cy;
    switch (s.cls) {
        case kBox:
            return std::abs(dx) <= s.r && std::abs(dy) <= 0.7 * s.r;
        case kDisk:
            return dx * dx + dy * dy <= s.r * s.r;
        case kTriangle: {
            // Upward isoceles triangle inscribed in the radius-r circle.
            const double top = s.cy - s.r, base = s.cy + 0.6 * s.r;
            if (y < top || y > base) return false;
            const double half = (y - top) / (base - top) * 0.95 * s.r;
            return std::abs(dx) <= half;
        }
        default:
            return false;
    }
}

LabelMap rasterize(const SceneSpec& spec, const Layout& lay, std::vector<int>& owner) {
    LabelMap labels(spec.height, spec.width, kBackground);
    owner.assign(spec.height * spec.width, -1);
    for (std::size_t y = 0; y < spec.height; ++y) {
        const double py = static_cast<double>(y) + 0.5;
        for (std::size_t x = 0; x < spec.width; ++x) {
            const double px = static_cast<double>(x) + 0.5;
            if (spec.num_classes > kRoad && py >= lay.road_top) {
                const double t = (py - lay.road_top) / (lay.road_bottom - lay.road_top);
                const double half = lay.road_half_top + t * (lay.road_half_bottom - lay.road_half_top);
                if (std::abs(px - lay.road_center) <= half) labels.at(y, x) = kRoad;
            }
            for (std::size_t k = 0; k < lay.shapes.size(); ++k) {
                if (inside(lay.shapes[k], px, py)) {
                    labels.at(y, x) = lay.shapes[k].cls;
                    owner[y * spec.width + x] = static_cast<int>(k);
                }
            }
        }
    }
    return labels;
}

Rgb rotate_hue(const Rgb& c, double degrees) {
    // Rodrigues rotation about the grey axis (1,1,1)/sqrt(3).
    const double th = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    const double k = 1.0 / std::sqrt(3.0);
    const double dot = (c[0] + c[1] + c[2]) * k;
    const Rgb cross{k * (c[2] - c[1]), k * (c[0] - c[2]), k * (c[1] - c[0])};
    Rgb out;
    for (int i = 0; i < 3; ++i) out[i] = c[i] * cs + cross[i] * sn + k * dot * (1 - cs);
    return out;
}

}  // namespace

Domain parse_domain(std::string_view name) {
    if (name == "source") return Domain::Source;
    if (name == "target") return Domain::Target;
    throw std::invalid_argument("unknown domain '" + std::string(name) + "' (expected source or target)");
}

std::string_view domain_name(Domain d) { return d == Domain::Source ? "source" : "target"; }

StyleParams default_source_style() { return StyleParams{}; }

StyleParams default_target_style() {
    StyleParams s;
    s.hue_rotation_deg = 50.0;
    s.brightness = -0.08;
    s.contrast = 0.6;
    s.noise_sigma = 0.06;
    s.texture_amplitude = 0.12;
    s.texture_frequency = 0.22;
    s.channel_gain = {1.0, 0.9, 1.15};
    return s;
}

Scene gen_scene(const SceneSpec& spec, Domain domain) {
    if (spec.height < kMinCanvas || spec.width < kMinCanvas) {
        throw std::invalid_argument("canvas " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                                    " too small for any shape (minimum 16x16)");
    }
    if (spec.num_classes < 2 || spec.num_classes > kPalette.size()) {
        throw std::invalid_argument("scene class count must be in 2..5");
    }
    const Layout lay = draw_layout(spec);
    std::vector<int> owner;
    LabelMap labels = rasterize(spec, lay, owner);

    const StyleParams& style = domain == Domain::Source ? spec.source : spec.target;
    std::mt19937_64 rng(spec.seed ^ (domain == Domain::Source ? kSourceStream : kTargetStream));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);

    // Per-region colour: background, road, then one per shape.
    auto jitter = [&](Rgb c) {
        for (auto& v : c) v = std::clamp(v + 0.16 * (u(rng) - 0.5), 0.0, 1.0);
        return rotate_hue(c, style.hue_rotation_deg);
    };
    const Rgb bg = jitter(kPalette[kBackground]);
    const Rgb road = jitter(kPalette[kRoad]);
    std::vector<Rgb> shape_colors;
    std::vector<double> shape_phase;
    for (const auto& s : lay.shapes) {
        shape_colors.push_back(jitter(kPalette[s.cls]));
        shape_phase.push_back(s.angle);
    }
    const double bg_phase = 2.0 * std::numbers::pi * u(rng);

    const std::size_t plane = spec.height * spec.width;
    std::vector<double> pixels(3 * plane);
    const double two_pi_f = 2.0 * std::numbers::pi * style.texture_frequency;
    for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t x = 0; x < spec.width; ++x) {
            const std::size_t i = y * spec.width + x;
            Rgb c;
            double phase = bg_phase;
            const int k = owner[i];
            if (k >= 0) {
                c = shape_colors[static_cast<std::size_t>(k)];
                phase = shape_phase[static_cast<std::size_t>(k)];
            } else if (labels.values[i] == kRoad) {
                c = road;
                phase = bg_phase + 1.0;
            } else {
                // Background gets a vertical gradient.
                const double g = 0.15 * (static_cast<double>(y) / static_cast<double>(spec.height) - 0.5);
                c = {bg[0] - g, bg[1] - g, bg[2] - g};
            }
            const double tex = style.texture_amplitude *
                               std::sin(two_pi_f * (static_cast<double>(x) * std::cos(phase) +
                                                    static_cast<double>(y) * std::sin(phase)));
            for (std::size_t ch = 0; ch < 3; ++ch) {
                double v = c[ch] + tex;
                v = (v - 0.5) * style.contrast + 0.5 + style.brightness;
                v = v * style.channel_gain[ch] + style.noise_sigma * noise(rng);
                pixels[ch * plane + i] = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return Scene{Tensor({3, spec.height, spec.width}, std::move(pixels)), std::move(labels)};
}

Dataset make_dataset(const SceneSpec& base, Domain domain, std::size_t count, std::uint64_t base_seed) {
    Dataset ds;
    ds.images.reserve(count);
    ds.labels.reserve(count);
    SceneSpec spec = base;
    for (std::size_t i = 0; i < count; ++i) {
        spec.seed = base_seed + i;
        Scene s = gen_scene(spec, domain);
        ds.images.push_back(std::move(s.image));
        ds.labels.push_back(std::move(s.labels));
    }
    return ds;
}

namespace {

struct PnmHeader {
    std::size_t width, height, payload_offset;
};

PnmHeader parse_pnm_header(std::string_view bytes, std::string_view magic) {
    if (bytes.size() < 2 || bytes.substr(0, 2) != magic) {
        throw PnmError("expected magic " + std::string(magic), 0);
    }
    std::size_t pos = 2;
    auto skip_space = [&] {
        for (;;) {
            while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            return;
        }
    };
    auto read_uint = [&](const char* what) {
        skip_space();
        const std::size_t start = pos;
        std::size_t v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
            if (v > (1u << 24)) throw PnmError(std::string(what) + " too large", start);
            ++pos;
        }
        if (pos == start) throw PnmError(std::string("malformed ") + what, start);
        return v;
    };
    PnmHeader h{};
    h.width = read_uint("width");
    h.height = read_uint("height");
    const std::size_t maxval_at = pos;
    const std::size_t maxval = read_uint("maxval");
    if (h.width == 0 || h.height == 0) throw PnmError("zero image dimension", maxval_at);
    if (maxval != 255) throw PnmError("unsupported maxval " + std::to_string(maxval), maxval_at);
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        throw PnmError("missing whitespace after header", pos);
    }
    h.payload_offset = pos + 1;
    return h;
}

std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

Tensor decode_ppm(std::string_view bytes) {
    const PnmHeader h = parse_pnm_header(bytes, "P6");
    const std::size_t plane = h.width * h.height;
    if (bytes.size() < h.payload_offset + 3 * plane) {
        throw PnmError("truncated PPM payload (expected " + std::to_string(3 * plane) + " bytes)", bytes.size());
    }
    std::vector<double> data(3 * plane);
    for (std::size_t i = 0; i < plane; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            data[c * plane + i] = static_cast<unsigned char>(bytes[h.payload_offset + 3 * i + c]) / 255.0;
        }
    }
    return Tensor({3, h.height, h.width}, std::move(data));
}

std::string encode_ppm(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw ShapeError("PPM images must be [3,H,W], got " + shape_str(image.shape()));
    }
    const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    const std::size_t header = out.size();
    out.resize(header + 3 * plane);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) out[header + 3 * i + c] = static_cast<char>(quantize(image[c * plane + i]));
    return out;
}

LabelMap decode_pgm(std::string_view bytes) {
    const PnmHeader h = parse_pnm_header(bytes, "P5");
    const std::size_t plane = h.width * h.height;
    if (bytes.size() < h.payload_offset + plane) {
        throw PnmError("truncated PGM payload (expected " + std::to_string(plane) + " bytes)", bytes.size());
    }
    LabelMap labels(h.height, h.width);
    for (std::size_t i = 0; i < plane; ++i) {
        labels.values[i] = static_cast<unsigned char>(bytes[h.payload_offset + i]);
    }
    return labels;
}

std::string encode_pgm(const LabelMap& labels) {
    std::string out = "P5\n" + std::to_string(labels.width) + " " + std::to_string(labels.height) + "\n255\n";
    const std::size_t header = out.size();
    out.resize(header + labels.values.size());
    for (std::size_t i = 0; i < labels.values.size(); ++i) {
        const auto v = labels.values[i];
        if (v < 0 || v > 255) throw std::invalid_argument("label " + std::to_string(v) + " does not fit a PGM byte");
        out[header + i] = static_cast<char>(v);
    }
    return out;
}

Tensor load_image(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }
void save_image(const std::filesystem::path& path, const Tensor& image) { write_file(path, encode_ppm(image)); }
LabelMap load_labels(const std::filesystem::path& path) { return decode_pgm(read_file(path)); }
void save_labels(const std::filesystem::path& path, const LabelMap& labels) { write_file(path, encode_pgm(labels)); }

Dataset load_dataset_dir(const std::filesystem::path& dir, bool require_labels) {
    Dataset ds;
    for (std::size_t i = 0;; ++i) {
        char img_name[32], lbl_name[32];
        std::snprintf(img_name, sizeof img_name, "img_%05zu.ppm", i);
        std::snprintf(lbl_name, sizeof lbl_name, "lbl_%05zu.pgm", i);
        if (!std::filesystem::exists(dir / img_name)) break;
        ds.images.push_back(load_image(dir / img_name));
        if (std::filesystem::exists(dir / lbl_name)) {
            ds.labels.push_back(load_labels(dir / lbl_name));
        } else if (require_labels) {
            throw std::runtime_error("missing " + (dir / lbl_name).string());
        }
    }
    if (ds.images.empty()) throw std::runtime_error("no img_00000.ppm found in " + dir.string());
    if (!ds.labels.empty() && ds.labels.size() != ds.images.size()) {
        throw std::runtime_error("label count does not match image count in " + dir.string());
    }
    return ds;
}

}  // namespace fcan

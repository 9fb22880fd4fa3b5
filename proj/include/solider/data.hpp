#pragma once

// Datasets: the synthetic erect-figure corpus with ground-truth part labels,
// directory ingestion, normalization, and label-grid export.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "solider/backbone.hpp"
#include "solider/image_io.hpp"
#include "solider/labeler.hpp"
#include "solider/rng.hpp"

namespace solider {

struct NormStats {
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> stddev{0.25, 0.25, 0.25};
};

/// Decoded images plus optional ground truth. Pixels are normalized floats,
/// (count, 3, H, W).
struct Dataset {
    std::size_t height = 0, width = 0;
    std::vector<float> pixels;
    std::vector<std::string> names;
    std::vector<int> identities;  // -1 when unknown
    // Ground-truth token labels (1..parts+1), empty when unavailable.
    std::size_t label_h = 0, label_w = 0, parts = 0;
    std::vector<std::vector<int>> gt_labels;
    NormStats norm;
    std::size_t skipped = 0;  // unreadable files encountered during ingestion

    std::size_t size() const { return names.size(); }
    std::size_t image_elems() const { return 3 * height * width; }
    bool has_ground_truth() const { return !gt_labels.empty(); }

    template <typename T>
    ImageBatch<T> batch(const std::vector<std::size_t>& indices) const {
        const std::size_t per = image_elems();
        std::vector<T> px(indices.size() * per);
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (std::size_t j = 0; j < per; ++j) px[i * per + j] = static_cast<T>(pixels[indices[i] * per + j]);
        return {Tensor<T>({indices.size(), 3, height, width}, std::move(px)), indices};
    }

    SemanticLabelMap ground_truth(std::size_t i) const {
        SemanticLabelMap m;
        m.height = label_h;
        m.width = label_w;
        m.part_count = parts;
        m.labels = gt_labels.at(i);
        return m;
    }
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

NormStats compute_norm_stats(const std::vector<RgbImage>& images);

inline NormStats compute_norm_stats(const std::vector<RgbImage>& images) {
    NormStats s;
    std::array<double, 3> sum{}, sq{};
    double count = 0;
    for (const auto& img : images) {
        for (std::size_t p = 0; p < img.width * img.height; ++p)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = img.pixels[p * 3 + c] / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        count += static_cast<double>(img.width * img.height);
    }
    if (count == 0) return s;
    for (std::size_t c = 0; c < 3; ++c) {
        s.mean[c] = sum[c] / count;
        s.stddev[c] = std::max(std::sqrt(std::max(sq[c] / count - s.mean[c] * s.mean[c], 0.0)), 1e-3);
    }
    return s;
}

/// Appends (3, H, W) normalized planes of img to out.
inline void append_normalized(const RgbImage& img, const NormStats& norm, std::vector<float>& out) {
    const std::size_t plane = img.width * img.height;
    const std::size_t base = out.size();
    out.resize(base + 3 * plane);
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c)
            out[base + c * plane + p] = static_cast<float>((img.pixels[p * 3 + c] / 255.0 - norm.mean[c]) / norm.stddev[c]);
}

/// Recovers 8-bit RGB from a normalized (3, H, W) plane set.
inline RgbImage denormalize(const float* planes, std::size_t h, std::size_t w, const NormStats& norm) {
    RgbImage img;
    img.width = w;
    img.height = h;
    img.pixels.resize(w * h * 3);
    for (std::size_t p = 0; p < w * h; ++p)
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = (planes[c * w * h + p] * norm.stddev[c] + norm.mean[c]) * 255.0;
            img.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
        }
    return img;
}

// ------------------------------------------------------------ synthetic data

struct SyntheticSpec {
    std::size_t image_h = 64, image_w = 32;
    std::size_t cell = 8;  // pixels per ground-truth label token
    std::array<double, 3> band_fractions{0.4, 0.35, 0.25};  // upper body, lower body, shoes
    double figure_width = 0.5;                              // fraction of the label-grid columns
    std::size_t identities = 128;
    std::size_t images_per_identity = 16;
    std::size_t palette_size = 8;
    double shade_jitter = 24.0;       // per-identity 8-bit offset around the palette color
    double background_min = 96.0;     // gray level range of per-image background
    double background_max = 160.0;
    double background_tint = 12.0;    // per-channel deviation from gray
    double noise_sigma = 6.0;         // per-pixel 8-bit gaussian noise
    std::size_t boundary_jitter = 2;  // per-image pixel shift of band boundaries
    std::size_t figure_jitter = 2;    // per-image horizontal pixel shift of the figure

    std::size_t grid_h() const { return image_h / cell; }
    std::size_t grid_w() const { return image_w / cell; }
    std::size_t count() const { return identities * images_per_identity; }

    void validate() const {
        const double total = band_fractions[0] + band_fractions[1] + band_fractions[2];
        if (std::abs(total - 1.0) > 1e-9) throw DataError("synthetic spec: band fractions must sum to 1");
        for (double f : band_fractions)
            if (f <= 0) throw DataError("synthetic spec: band fractions must be positive");
        if (cell == 0 || image_h % cell || image_w % cell) throw DataError("synthetic spec: cell must tile the image");
        if (!(figure_width > 0 && figure_width <= 1)) throw DataError("synthetic spec: figure width must be in (0,1]");
        if (identities == 0 || images_per_identity == 0 || palette_size == 0) throw DataError("synthetic spec: empty corpus");
        if (background_min > background_max) throw DataError("synthetic spec: background range inverted");
    }

    /// Row boundaries of the three bands on the label grid: cumulative
    /// fractions rounded half-up, the last band takes the remainder.
    std::array<std::size_t, 2> band_boundaries() const {
        const double rows = static_cast<double>(grid_h());
        const auto b1 = static_cast<std::size_t>(std::floor(band_fractions[0] * rows + 0.5 + 1e-9));
        const auto b2 = static_cast<std::size_t>(std::floor((band_fractions[0] + band_fractions[1]) * rows + 0.5 + 1e-9));
        return {std::min(b1, grid_h()), std::min(std::max(b2, b1), grid_h())};
    }

    /// First and one-past-last label-grid column covered by the figure.
    std::array<std::size_t, 2> figure_columns() const {
        const std::size_t gw = grid_w();
        const auto cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(figure_width * gw + 0.5)));
        const std::size_t start = (gw - std::min(cols, gw)) / 2;
        return {start, start + std::min(cols, gw)};
    }
};

namespace detail {

inline std::array<double, 3> palette_color(std::size_t i, std::size_t palette_size) {
    // Evenly spaced hues at full saturation plus a dark and a light entry.
    if (i + 2 == palette_size) return {40, 40, 48};
    if (i + 1 == palette_size && palette_size > 2) return {210, 210, 200};
    const std::size_t hues = palette_size > 2 ? palette_size - 2 : palette_size;
    const double h = 6.0 * static_cast<double>(i) / static_cast<double>(hues);
    const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
    std::array<double, 3> rgb{};
    switch (static_cast<int>(h)) {
        case 0: rgb = {1, x, 0}; break;
        case 1: rgb = {x, 1, 0}; break;
        case 2: rgb = {0, 1, x}; break;
        case 3: rgb = {0, x, 1}; break;
        case 4: rgb = {x, 0, 1}; break;
        default: rgb = {1, 0, x}; break;
    }
    for (auto& v : rgb) v = 30.0 + 200.0 * v;
    return rgb;
}

inline std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

}  // namespace detail

struct SyntheticCorpus {
    std::vector<RgbImage> images;
    std::vector<std::string> names;
    std::vector<int> identities;
    std::vector<std::vector<int>> labels;  // label grid per image, 1..3 parts, 4 background
    std::size_t label_h = 0, label_w = 0;
};

/// Deterministic corpus of erect figures: three horizontal color bands
/// (upper body, lower body, shoes) over a low-contrast background. Each
/// identity draws all three colors from one shared palette, so the same
/// color appears on different parts across identities.
inline SyntheticCorpus gen_synthetic_corpus(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    SyntheticCorpus out;
    out.label_h = spec.grid_h();
    out.label_w = spec.grid_w();
    const auto bounds = spec.band_boundaries();
    const auto cols = spec.figure_columns();
    const std::size_t H = spec.image_h, W = spec.image_w, cell = spec.cell;

    for (std::size_t id = 0; id < spec.identities; ++id) {
        Rng id_rng(derive_seed(seed, 0x1D, id));
        std::array<std::array<double, 3>, 3> colors{};
        for (auto& col : colors) {
            col = detail::palette_color(id_rng.index(spec.palette_size), spec.palette_size);
            for (auto& v : col) v += id_rng.uniform(-spec.shade_jitter, spec.shade_jitter);
        }
        for (std::size_t k = 0; k < spec.images_per_identity; ++k) {
            const std::size_t index = id * spec.images_per_identity + k;
            Rng rng(derive_seed(seed, 0x1A, index));
            const double gray = rng.uniform(spec.background_min, spec.background_max);
            std::array<double, 3> bg{};
            for (auto& v : bg) v = gray + rng.uniform(-spec.background_tint, spec.background_tint);
            auto jitter = [&](std::size_t j) {
                return j ? static_cast<long>(rng.index(2 * j + 1)) - static_cast<long>(j) : 0L;
            };
            const long b1 = static_cast<long>(bounds[0] * cell) + jitter(spec.boundary_jitter);
            const long b2 = static_cast<long>(bounds[1] * cell) + jitter(spec.boundary_jitter);
            const long shift = jitter(spec.figure_jitter);
            const long x0 = static_cast<long>(cols[0] * cell) + shift, x1 = static_cast<long>(cols[1] * cell) + shift;

            RgbImage img;
            img.width = W;
            img.height = H;
            img.pixels.resize(W * H * 3);
            std::vector<int> pixel_label(W * H);
            for (std::size_t r = 0; r < H; ++r)
                for (std::size_t c = 0; c < W; ++c) {
                    const long rr = static_cast<long>(r), cc = static_cast<long>(c);
                    int label = 4;
                    if (cc >= x0 && cc < x1) label = rr < b1 ? 1 : (rr < b2 ? 2 : 3);
                    pixel_label[r * W + c] = label;
                    const auto& base = label == 4 ? bg : colors[label - 1];
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        const double noise = spec.noise_sigma > 0 ? rng.normal(0.0, spec.noise_sigma) : 0.0;
                        img.at(r, c, ch) = detail::to_u8(base[ch] + noise);
                    }
                }
            // Token label = majority pixel label in its cell, ties to the lower label.
            std::vector<int> grid(out.label_h * out.label_w);
            for (std::size_t gr = 0; gr < out.label_h; ++gr)
                for (std::size_t gc = 0; gc < out.label_w; ++gc) {
                    std::array<std::size_t, 5> votes{};
                    for (std::size_t r = gr * cell; r < (gr + 1) * cell; ++r)
                        for (std::size_t c = gc * cell; c < (gc + 1) * cell; ++c) ++votes[pixel_label[r * W + c]];
                    int best = 1;
                    for (int l = 2; l <= 4; ++l)
                        if (votes[l] > votes[best]) best = l;
                    grid[gr * out.label_w + gc] = best;
                }
            std::ostringstream name;
            name << "img_" << std::setw(5) << std::setfill('0') << index << ".png";
            out.images.push_back(std::move(img));
            out.names.push_back(name.str());
            out.identities.push_back(static_cast<int>(id));
            out.labels.push_back(std::move(grid));
        }
    }
    return out;
}

/// Normalizes a decoded corpus into a Dataset. When norm is null, statistics
/// are computed from the corpus itself.
inline Dataset make_dataset(const SyntheticCorpus& corpus, const NormStats* norm = nullptr) {
    Dataset ds;
    if (corpus.images.empty()) return ds;
    ds.height = corpus.images[0].height;
    ds.width = corpus.images[0].width;
    ds.norm = norm ? *norm : compute_norm_stats(corpus.images);
    ds.pixels.reserve(corpus.images.size() * ds.image_elems());
    for (const auto& img : corpus.images) append_normalized(img, ds.norm, ds.pixels);
    ds.names = corpus.names;
    ds.identities = corpus.identities;
    ds.gt_labels = corpus.labels;
    ds.label_h = corpus.label_h;
    ds.label_w = corpus.label_w;
    ds.parts = 3;
    return ds;
}

// ------------------------------------------------------------------ label IO

/// Flat binary label grids: "SOLLBL01", u32 count, h, w, parts, then
/// count*h*w uint8 labels, row-major per image.
inline void write_label_grids(const std::filesystem::path& path, const std::vector<std::vector<int>>& grids, std::size_t h,
                              std::size_t w, std::size_t parts) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write("SOLLBL01", 8);
    auto put = [&](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
        out.write(reinterpret_cast<char*>(b), 4);
    };
    put(static_cast<std::uint32_t>(grids.size()));
    put(static_cast<std::uint32_t>(h));
    put(static_cast<std::uint32_t>(w));
    put(static_cast<std::uint32_t>(parts));
    for (const auto& g : grids) {
        if (g.size() != h * w) throw DataError("label grid size mismatch");
        for (int l : g) out.put(static_cast<char>(l));
    }
}

struct LabelGrids {
    std::size_t h = 0, w = 0, parts = 0;
    std::vector<std::vector<int>> grids;
};

inline LabelGrids read_label_grids(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "SOLLBL01", 8) != 0) throw DataError("bad label grid file: " + path.string());
    auto get = [&]() {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        if (!in) throw DataError("truncated label grid file: " + path.string());
        return static_cast<std::size_t>(b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24));
    };
    LabelGrids lg;
    const std::size_t count = get();
    lg.h = get();
    lg.w = get();
    lg.parts = get();
    lg.grids.assign(count, std::vector<int>(lg.h * lg.w));
    for (auto& g : lg.grids)
        for (auto& l : g) {
            const int c = in.get();
            if (c == EOF) throw DataError("truncated label grid file: " + path.string());
            l = c;
        }
    return lg;
}

/// Blends a per-part color over the image for visual inspection.
inline RgbImage label_overlay(const RgbImage& img, const SemanticLabelMap& labels, double alpha = 0.5) {
    static const std::array<std::array<double, 3>, 5> colors{{{230, 25, 75}, {60, 180, 75}, {0, 130, 200}, {245, 130, 48}, {145, 30, 180}}};
    RgbImage out = img;
    const std::size_t ch = img.height / labels.height, cw = img.width / labels.width;
    for (std::size_t r = 0; r < img.height; ++r)
        for (std::size_t c = 0; c < img.width; ++c) {
            const int l = labels.at(r / ch, c / cw);
            if (l == labels.background()) continue;
            const auto& col = colors[static_cast<std::size_t>(l - 1) % colors.size()];
            for (std::size_t k = 0; k < 3; ++k) out.at(r, c, k) = detail::to_u8((1 - alpha) * img.at(r, c, k) + alpha * col[k]);
        }
    return out;
}

// ---------------------------------------------------------------- ingestion

/// Writes the corpus as PNG files plus manifest.csv (file, identity) and
/// labels.bin.
inline void write_corpus(const std::filesystem::path& dir, const SyntheticCorpus& corpus, bool overlays = false) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.csv");
    manifest << "file,identity\n";
    for (std::size_t i = 0; i < corpus.images.size(); ++i) {
        write_png(dir / corpus.names[i], corpus.images[i]);
        manifest << corpus.names[i] << ',' << corpus.identities[i] << '\n';
    }
    write_label_grids(dir / "labels.bin", corpus.labels, corpus.label_h, corpus.label_w, 3);
    if (overlays) {
        std::filesystem::create_directories(dir / "overlays");
        for (std::size_t i = 0; i < corpus.images.size(); ++i) {
            SemanticLabelMap m{corpus.label_h, corpus.label_w, 3, corpus.labels[i], false};
            write_png(dir / "overlays" / corpus.names[i], label_overlay(corpus.images[i], m));
        }
    }
}

/// Loads every PNG/PPM in dir (sorted by filename), resized to the target
/// size. Unreadable or non-image files are skipped and counted. When the
/// directory carries manifest.csv and labels.bin from write_corpus, identities
/// and ground-truth labels are attached; when norm is null the statistics are
/// computed from the loaded images.
inline Dataset ingest_images(const std::filesystem::path& dir, std::size_t target_h, std::size_t target_w,
                             const NormStats* norm = nullptr, std::ostream* warn = &std::cerr) {
    if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end(), [](const auto& a, const auto& b) { return a.filename() < b.filename(); });

    Dataset ds;
    ds.height = target_h;
    ds.width = target_w;
    std::vector<RgbImage> images;
    for (const auto& f : files) {
        const auto name = f.filename().string();
        if (name == "manifest.csv" || name == "labels.bin" || name.ends_with(".config")) continue;
        try {
            images.push_back(resize_bilinear(read_image(f), target_w, target_h));
            ds.names.push_back(name);
        } catch (const ImageReadError& e) {
            ++ds.skipped;
            if (warn) *warn << "warning: skipping " << f.string() << ": " << e.what() << '\n';
        }
    }
    ds.norm = norm ? *norm : compute_norm_stats(images);
    for (const auto& img : images) append_normalized(img, ds.norm, ds.pixels);
    ds.identities.assign(ds.names.size(), -1);

    if (std::filesystem::exists(dir / "manifest.csv")) {
        std::ifstream in(dir / "manifest.csv");
        std::string line;
        std::getline(in, line);
        std::map<std::string, std::pair<std::size_t, int>> entry;  // file -> (row, identity)
        std::size_t row = 0;
        while (std::getline(in, line)) {
            const auto comma = line.find(',');
            if (comma == std::string::npos) continue;
            entry[line.substr(0, comma)] = {row++, std::stoi(line.substr(comma + 1))};
        }
        LabelGrids grids;
        const bool have_labels = std::filesystem::exists(dir / "labels.bin");
        if (have_labels) grids = read_label_grids(dir / "labels.bin");
        bool all_labeled = have_labels && !ds.names.empty();
        std::vector<std::vector<int>> gt;
        for (std::size_t i = 0; i < ds.names.size(); ++i) {
            auto it = entry.find(ds.names[i]);
            if (it == entry.end()) {
                all_labeled = false;
                continue;
            }
            ds.identities[i] = it->second.second;
            if (have_labels && it->second.first < grids.grids.size()) gt.push_back(grids.grids[it->second.first]);
            else all_labeled = false;
        }
        if (all_labeled) {
            ds.gt_labels = std::move(gt);
            ds.label_h = grids.h;
            ds.label_w = grids.w;
            ds.parts = grids.parts;
        }
    }
    return ds;
}

}  // namespace solider

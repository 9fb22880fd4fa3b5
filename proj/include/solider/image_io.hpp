#pragma once

// 8-bit RGB images: PNG through libpng, binary PPM (P6) by hand.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace solider {

struct ImageReadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RgbImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major

    std::uint8_t& at(std::size_t r, std::size_t c, std::size_t ch) { return pixels[(r * width + c) * 3 + ch]; }
    std::uint8_t at(std::size_t r, std::size_t c, std::size_t ch) const { return pixels[(r * width + c) * 3 + ch]; }
};

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline RgbImage read_png(const std::filesystem::path& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw ImageReadError("cannot open " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw ImageReadError("not a PNG file: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw ImageReadError("libpng initialization failed");
    }
    RgbImage img;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageReadError("corrupt PNG: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png), png_set_strip_alpha(png);
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    if (png_get_rowbytes(png, info) != img.width * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageReadError("unsupported PNG layout: " + path.string());
    }
    img.pixels.resize(img.width * img.height * 3);
    rows.resize(img.height);
    for (std::size_t r = 0; r < img.height; ++r) rows[r] = img.pixels.data() + r * img.width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("libpng initialization failed");
    }
    std::vector<png_bytep> rows(img.height);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("PNG encoding failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t r = 0; r < img.height; ++r) rows[r] = const_cast<png_bytep>(img.pixels.data() + r * img.width * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageReadError("cannot open " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P6") throw ImageReadError("not a binary PPM: " + path.string());
    auto next_int = [&]() {
        int v = -1;
        while (in >> std::ws && in.peek() == '#') in.ignore(1 << 20, '\n');
        in >> v;
        return v;
    };
    const int w = next_int(), h = next_int(), maxval = next_int();
    if (w <= 0 || h <= 0 || maxval != 255) throw ImageReadError("unsupported PPM header: " + path.string());
    in.get();
    RgbImage img;
    img.width = static_cast<std::size_t>(w);
    img.height = static_cast<std::size_t>(h);
    img.pixels.resize(img.width * img.height * 3);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw ImageReadError("truncated PPM: " + path.string());
    return img;
}

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

/// Reads PNG or PPM by extension (case-insensitive).
inline RgbImage read_image(const std::filesystem::path& path) {
    std::string ext = path.extension().string();
    for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (ext == ".png") return read_png(path);
    if (ext == ".ppm") return read_ppm(path);
    throw ImageReadError("unsupported image type: " + path.string());
}

/// Bilinear resize with pixel-center alignment.
inline RgbImage resize_bilinear(const RgbImage& src, std::size_t out_w, std::size_t out_h) {
    if (src.width == out_w && src.height == out_h) return src;
    RgbImage dst;
    dst.width = out_w;
    dst.height = out_h;
    dst.pixels.resize(out_w * out_h * 3);
    const double fy = static_cast<double>(src.height) / static_cast<double>(out_h);
    const double fx = static_cast<double>(src.width) / static_cast<double>(out_w);
    for (std::size_t r = 0; r < out_h; ++r) {
        const double sy = std::clamp((static_cast<double>(r) + 0.5) * fy - 0.5, 0.0, static_cast<double>(src.height - 1));
        const std::size_t r0 = static_cast<std::size_t>(sy), r1 = std::min(r0 + 1, src.height - 1);
        const double wy = sy - static_cast<double>(r0);
        for (std::size_t c = 0; c < out_w; ++c) {
            const double sx = std::clamp((static_cast<double>(c) + 0.5) * fx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const std::size_t c0 = static_cast<std::size_t>(sx), c1 = std::min(c0 + 1, src.width - 1);
            const double wx = sx - static_cast<double>(c0);
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const double top = src.at(r0, c0, ch) * (1 - wx) + src.at(r0, c1, ch) * wx;
                const double bot = src.at(r1, c0, ch) * (1 - wx) + src.at(r1, c1, ch) * wx;
                dst.at(r, c, ch) = static_cast<std::uint8_t>(std::lround(std::clamp(top * (1 - wy) + bot * wy, 0.0, 255.0)));
            }
        }
    }
    return dst;
}

}  // namespace solider

#pragma once

#include "shadowgs/image.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace sgs {

// ---------------------------------------------------------------------------
// sRGB transfer. Color-like channels are stored linear internally and
// converted on 8-bit export only.
// ---------------------------------------------------------------------------

inline double linear_to_srgb(double x)
{
    x = std::clamp(x, 0.0, 1.0);
    return x <= 0.0031308 ? 12.92 * x : 1.055 * std::pow(x, 1.0 / 2.4) - 0.055;
}

inline double srgb_to_linear(double s)
{
    s = std::clamp(s, 0.0, 1.0);
    return s <= 0.04045 ? s / 12.92 : std::pow((s + 0.055) / 1.055, 2.4);
}

// ---------------------------------------------------------------------------
// PFM: "Pf" (1 channel) / "PF" (3 channels), float32 rows stored bottom-up,
// negative scale marks little-endian data.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_pfm_impl(const std::string& path, int w, int h, int channels,
                           const double* data)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(err::kIo, "cannot open for writing: " + path);
    out << (channels == 3 ? "PF" : "Pf") << "\n" << w << " " << h << "\n" << -1.0 << "\n";
    std::vector<float> row(static_cast<size_t>(w) * channels);
    for (int y = h - 1; y >= 0; --y) {
        const double* src = data + static_cast<size_t>(y) * w * channels;
        for (size_t i = 0; i < row.size(); ++i) row[i] = static_cast<float>(src[i]);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!out) throw Error(err::kIo, "write failed: " + path);
}

inline void read_pfm_impl(const std::string& path, int& w, int& h, int& channels,
                          std::vector<double>& data)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(err::kIo, "cannot open: " + path);
    std::string magic;
    double scale = 0.0;
    in >> magic >> w >> h >> scale;
    if (!in || (magic != "PF" && magic != "Pf") || w <= 0 || h <= 0)
        throw Error(err::kParse, "not a PFM file: " + path);
    in.get();  // single whitespace after the scale
    channels = magic == "PF" ? 3 : 1;
    const bool little_endian = scale < 0.0;
    if (!little_endian) throw Error(err::kParse, "big-endian PFM unsupported: " + path);
    data.assign(static_cast<size_t>(w) * h * channels, 0.0);
    std::vector<float> row(static_cast<size_t>(w) * channels);
    for (int y = h - 1; y >= 0; --y) {
        in.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(float)));
        if (!in) throw Error(err::kParse, "truncated PFM data: " + path);
        double* dst = data.data() + static_cast<size_t>(y) * w * channels;
        for (size_t i = 0; i < row.size(); ++i) dst[i] = row[i];
    }
}

}  // namespace detail

template <int C>
void write_pfm(const std::string& path, const Image<C>& img)
{
    static_assert(C == 1 || C == 3, "PFM holds 1 or 3 channels");
    detail::write_pfm_impl(path, img.width, img.height, C, img.data.data());
}

inline Image1 read_pfm1(const std::string& path)
{
    int w, h, c;
    std::vector<double> data;
    detail::read_pfm_impl(path, w, h, c, data);
    if (c != 1) throw Error(err::kParse, "expected 1-channel PFM: " + path);
    Image1 img(w, h);
    img.data = std::move(data);
    return img;
}

inline Image3 read_pfm3(const std::string& path)
{
    int w, h, c;
    std::vector<double> data;
    detail::read_pfm_impl(path, w, h, c, data);
    if (c != 3) throw Error(err::kParse, "expected 3-channel PFM: " + path);
    Image3 img(w, h);
    img.data = std::move(data);
    return img;
}

// ---------------------------------------------------------------------------
// PNG, 8-bit. Color images pass through the sRGB transfer on export/import;
// mask-style grayscale images use a plain linear 0..255 mapping.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_png8(const std::string& path, int w, int h, int channels,
                       const std::vector<unsigned char>& bytes)
{
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw Error(err::kIo, "cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw Error(err::kIo, "libpng write failure: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, w, h, 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y)
        rows[y] = const_cast<png_bytep>(bytes.data() + static_cast<size_t>(y) * w * channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline void read_png8(const std::string& path, int& w, int& h, int& channels,
                      std::vector<unsigned char>& bytes)
{
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw Error(err::kIo, "cannot open: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw Error(err::kParse, "libpng read failure: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    w = static_cast<int>(png_get_image_width(png, info));
    h = static_cast<int>(png_get_image_height(png, info));
    int color = png_get_color_type(png, info);
    channels = color == PNG_COLOR_TYPE_GRAY ? 1 : 3;
    bytes.assign(static_cast<size_t>(w) * h * channels, 0);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y)
        rows[y] = bytes.data() + static_cast<size_t>(y) * w * channels;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
}

inline unsigned char to_byte(double v)
{
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Writes a linear-light color image as 8-bit sRGB PNG.
inline void write_png_color(const std::string& path, const Image3& img)
{
    std::vector<unsigned char> bytes(img.pixel_count() * 3);
    for (size_t i = 0; i < img.pixel_count() * 3; ++i)
        bytes[i] = detail::to_byte(linear_to_srgb(img.data[i]));
    detail::write_png8(path, img.width, img.height, 3, bytes);
}

/// Writes a [0,1] map (shadow/visibility/mask) as grayscale PNG, 255 = 1.0.
inline void write_png_gray(const std::string& path, const Image1& img)
{
    std::vector<unsigned char> bytes(img.pixel_count());
    for (size_t i = 0; i < img.pixel_count(); ++i) bytes[i] = detail::to_byte(img.data[i]);
    detail::write_png8(path, img.width, img.height, 1, bytes);
}

/// Reads an 8-bit PNG as linear-light color (sRGB decoded).
inline Image3 read_png_color(const std::string& path)
{
    int w, h, c;
    std::vector<unsigned char> bytes;
    detail::read_png8(path, w, h, c, bytes);
    Image3 img(w, h);
    for (size_t i = 0; i < img.pixel_count(); ++i)
        for (int k = 0; k < 3; ++k)
            img.data[i * 3 + k] = srgb_to_linear(bytes[i * c + (c == 3 ? k : 0)] / 255.0);
    return img;
}

/// Reads an 8-bit PNG as a [0,1] grayscale map with linear mapping
/// (255 = 1.0). Color inputs are averaged.
inline Image1 read_png_gray(const std::string& path)
{
    int w, h, c;
    std::vector<unsigned char> bytes;
    detail::read_png8(path, w, h, c, bytes);
    Image1 img(w, h);
    for (size_t i = 0; i < img.pixel_count(); ++i) {
        double v = 0.0;
        for (int k = 0; k < c; ++k) v += bytes[i * c + k];
        img.data[i] = v / (255.0 * c);
    }
    return img;
}

// ---------------------------------------------------------------------------
// Key/value text files (cameras, config snapshots). One "key v0 v1 ..." per
// line; '#' starts a comment.
// ---------------------------------------------------------------------------

using KvMap = std::map<std::string, std::vector<double>>;

inline void write_kv(const std::string& path, const std::vector<std::pair<std::string, std::vector<double>>>& kv)
{
    std::ofstream out(path);
    if (!out) throw Error(err::kIo, "cannot open for writing: " + path);
    out.precision(17);
    for (const auto& [key, values] : kv) {
        out << key;
        for (double v : values) out << " " << v;
        out << "\n";
    }
}

inline KvMap read_kv(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw Error(err::kIo, "cannot open: " + path);
    KvMap kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ss(line);
        std::string key;
        if (!(ss >> key)) continue;
        std::vector<double> values;
        double v;
        while (ss >> v) values.push_back(v);
        if (!ss.eof())
            throw Error(err::kParse,
                        path + ":" + std::to_string(lineno) + ": non-numeric value for '" + key + "'");
        kv[key] = std::move(values);
    }
    return kv;
}

inline const std::vector<double>& kv_require(const KvMap& kv, const std::string& key,
                                             size_t count, const std::string& path)
{
    auto it = kv.find(key);
    if (it == kv.end()) throw Error(err::kParse, path + ": missing key '" + key + "'");
    if (it->second.size() != count)
        throw Error(err::kParse, path + ": key '" + key + "' needs " + std::to_string(count) +
                                     " values, got " + std::to_string(it->second.size()));
    return it->second;
}

}  // namespace sgs

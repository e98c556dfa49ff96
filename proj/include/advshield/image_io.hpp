#pragma once

// 8-bit RGB images on disk: binary PPM (P6, maxval 255) and PNG (8-bit RGB
// or RGBA, alpha dropped). Pixels map to [0,1] by /255 on load and back by
// round-half-up on save, so load -> save is pixel-exact.

#include <png.h>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "advshield/tensor.hpp"

namespace advshield {

class ImageError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

enum class ImageFormat { ppm, png };

inline ImageFormat format_for(const std::string& path) {
    auto dot = path.rfind('.');
    std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (ext == "ppm") return ImageFormat::ppm;
    if (ext == "png") return ImageFormat::png;
    throw ImageError("unsupported image extension for '" + path + "' (use .ppm or .png)");
}

// Interleaved 8-bit RGB <-> planar [3,h,w] in [0,1].
inline Tensor from_rgb8(const std::vector<unsigned char>& rgb, std::size_t h, std::size_t w) {
    std::vector<double> v(3 * h * w);
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t c = 0; c < 3; ++c) v[c * h * w + i] = rgb[i * 3 + c] / 255.0;
    return Tensor({3, h, w}, std::move(v));
}

inline std::vector<unsigned char> to_rgb8(const Tensor& img) {
    if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("expected a 3xHxW image, got " + shape_str(img.shape()));
    std::size_t hw = img.dim(1) * img.dim(2);
    std::vector<unsigned char> rgb(3 * hw);
    for (std::size_t i = 0; i < hw; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            double v = std::clamp(img[c * hw + i], 0.0, 1.0);
            rgb[i * 3 + c] = static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
        }
    return rgb;
}

namespace detail {

inline void skip_ppm_space(std::istream& in) {
    for (;;) {
        int ch = in.peek();
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (ch != EOF && std::isspace(ch)) {
            in.get();
        } else {
            return;
        }
    }
}

inline std::size_t read_ppm_int(std::istream& in, const std::string& path) {
    skip_ppm_space(in);
    std::size_t v = 0;
    if (!(in >> v)) throw ImageError("malformed PPM header in '" + path + "'");
    return v;
}

}  // namespace detail

inline Tensor read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageError("cannot open '" + path + "'");
    char magic[2] = {};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '6') throw ImageError("'" + path + "' is not a binary (P6) PPM");
    std::size_t w = detail::read_ppm_int(in, path), h = detail::read_ppm_int(in, path);
    std::size_t maxval = detail::read_ppm_int(in, path);
    if (w == 0 || h == 0) throw ImageError("empty PPM '" + path + "'");
    if (maxval != 255) throw ImageError("only 8-bit PPM (maxval 255) is supported: '" + path + "'");
    in.get();  // single whitespace before the raster
    std::vector<unsigned char> rgb(3 * w * h);
    in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!in) throw ImageError("truncated PPM raster in '" + path + "'");
    return from_rgb8(rgb, h, w);
}

inline void write_ppm(const std::string& path, const Tensor& img) {
    auto rgb = to_rgb8(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageError("cannot write '" + path + "'");
    out << "P6\n" << img.dim(2) << ' ' << img.dim(1) << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!out) throw ImageError("write failed for '" + path + "'");
}

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline Tensor read_png(const std::string& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw ImageError("cannot read PNG '" + path + "': " + image.message);
    if (image.format & PNG_FORMAT_FLAG_LINEAR) {
        png_image_free(&image);
        throw ImageError("only 8-bit PNG is supported: '" + path + "'");
    }
    image.format = PNG_FORMAT_RGB;
    std::vector<unsigned char> rgb(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, rgb.data(), 0, nullptr))
        throw ImageError("cannot decode PNG '" + path + "': " + image.message);
    return from_rgb8(rgb, image.height, image.width);
}

inline void write_png(const std::string& path, const Tensor& img) {
    auto rgb = to_rgb8(img);
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.dim(2));
    image.height = static_cast<png_uint_32>(img.dim(1));
    image.format = PNG_FORMAT_RGB;
    detail::FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw ImageError("cannot write '" + path + "'");
    if (!png_image_write_to_stdio(&image, f.get(), 0, rgb.data(), 0, nullptr))
        throw ImageError("cannot encode PNG '" + path + "': " + image.message);
}

inline Tensor read_image(const std::string& path) {
    return format_for(path) == ImageFormat::png ? read_png(path) : read_ppm(path);
}

inline void write_image(const std::string& path, const Tensor& img) {
    if (format_for(path) == ImageFormat::png)
        write_png(path, img);
    else
        write_ppm(path, img);
}

}  // namespace advshield

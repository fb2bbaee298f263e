#include "rvernet/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace rvernet {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

ImageU8 read_png(const std::string& path, int channels) {
    RV_CHECK_CFG(channels == 1 || channels == 3, "read_png: channels must be 1 or 3, got ",
                 channels);
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    RV_CHECK_CFG(fp != nullptr, "cannot open ", path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    RV_CHECK_CFG(png != nullptr, "libpng: read struct allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw ConfigError("libpng: info struct allocation failed");
    }
    ImageU8 img;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ConfigError(strcat_msg("libpng: failed to decode ", path));
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_set_expand(png);  // palette -> rgb, gray<8 -> 8, tRNS -> alpha
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (channels == 3)
        png_set_gray_to_rgb(png);
    else
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);

    img.width = (int)png_get_image_width(png, info);
    img.height = (int)png_get_image_height(png, info);
    img.channels = channels;
    img.pixels.resize((size_t)img.width * img.height * channels);
    rows.resize((size_t)img.height);
    for (int y = 0; y < img.height; ++y)
        rows[(size_t)y] = img.pixels.data() + (size_t)y * img.width * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const std::string& path, const ImageU8& img) {
    RV_CHECK_CFG(img.channels == 1 || img.channels == 3,
                 "write_png: channels must be 1 or 3, got ", img.channels);
    RV_CHECK_CFG(img.width > 0 && img.height > 0 &&
                     img.pixels.size() == (size_t)img.width * img.height * img.channels,
                 "write_png: inconsistent image buffer for ", path);
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    RV_CHECK_CFG(fp != nullptr, "cannot open ", path, " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    RV_CHECK_CFG(png != nullptr, "libpng: write struct allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw ConfigError("libpng: info struct allocation failed");
    }
    std::vector<png_const_bytep> rows((size_t)img.height);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ConfigError(strcat_msg("libpng: failed to encode ", path));
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, (png_uint_32)img.width, (png_uint_32)img.height, 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
        rows[(size_t)y] = img.pixels.data() + (size_t)y * img.width * img.channels;
    png_write_image(png, const_cast<png_bytepp>(rows.data()));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace rvernet

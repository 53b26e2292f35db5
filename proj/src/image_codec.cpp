#include "kan/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace kan {

namespace {

std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

// ----------------------------- PNG ---------------------------------------

struct PngReadCursor {
    const unsigned char* data;
    std::size_t size;
    std::size_t offset;
};

void png_read_from_memory(png_structp png, png_bytep out, png_size_t count) {
    auto* cur = static_cast<PngReadCursor*>(png_get_io_ptr(png));
    if (cur->offset + count > cur->size) png_error(png, "truncated PNG stream");
    std::memcpy(out, cur->data + cur->offset, count);
    cur->offset += count;
}

ImageU8 decode_png(const std::vector<unsigned char>& bytes, const std::string& path) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw Error("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw Error("libpng init failed");
    }
    PngReadCursor cur{bytes.data(), bytes.size(), 0};
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("undecodable PNG: " + path);
    }
    png_set_read_fn(png, &cur, png_read_from_memory);
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const int channels = png_get_channels(png, info);
    ImageU8 img;
    img.height = static_cast<int>(h);
    img.width = static_cast<int>(w);
    img.channels = channels >= 3 ? 3 : 1;
    img.pixels.resize(static_cast<std::size_t>(h) * w * img.channels);

    std::vector<unsigned char> row(png_get_rowbytes(png, info));
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < img.channels; ++c)
                img.pixels[img.idx(static_cast<int>(y), static_cast<int>(x), c)] =
                    row[x * channels + (channels >= 3 ? c : 0)];
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

struct PngWriteSink {
    std::vector<unsigned char> bytes;
};

void png_write_to_memory(png_structp png, png_bytep data, png_size_t count) {
    auto* sink = static_cast<PngWriteSink*>(png_get_io_ptr(png));
    sink->bytes.insert(sink->bytes.end(), data, data + count);
}

void png_flush_noop(png_structp) {}

// ----------------------------- JPEG --------------------------------------

struct JpegErrorTrap {
    jpeg_error_mgr mgr;
    std::jmp_buf env;
};

void jpeg_error_trap(j_common_ptr cinfo) {
    auto* trap = reinterpret_cast<JpegErrorTrap*>(cinfo->err);
    std::longjmp(trap->env, 1);
}

ImageU8 decode_jpeg(const std::vector<unsigned char>& bytes, const std::string& path) {
    jpeg_decompress_struct cinfo;
    JpegErrorTrap trap;
    cinfo.err = jpeg_std_error(&trap.mgr);
    trap.mgr.error_exit = jpeg_error_trap;
    if (setjmp(trap.env)) {
        jpeg_destroy_decompress(&cinfo);
        throw FormatError("undecodable JPEG: " + path);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = cinfo.num_components >= 3 ? JCS_RGB : JCS_GRAYSCALE;
    jpeg_start_decompress(&cinfo);

    ImageU8 img;
    img.height = static_cast<int>(cinfo.output_height);
    img.width = static_cast<int>(cinfo.output_width);
    img.channels = cinfo.output_components >= 3 ? 3 : 1;
    img.pixels.resize(static_cast<std::size_t>(img.height) * img.width * img.channels);

    std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * cinfo.output_components);
    while (cinfo.output_scanline < cinfo.output_height) {
        const int y = static_cast<int>(cinfo.output_scanline);
        unsigned char* rp = row.data();
        jpeg_read_scanlines(&cinfo, &rp, 1);
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                img.pixels[img.idx(y, x, c)] = row[x * cinfo.output_components + c];
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

// ----------------------------- BMP ---------------------------------------

std::uint32_t le32(const unsigned char* p) {
    return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t le16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

// Uncompressed 8/24/32-bit BMP, bottom-up or top-down rows.
ImageU8 decode_bmp(const std::vector<unsigned char>& bytes, const std::string& path) {
    if (bytes.size() < 54) throw FormatError("undecodable BMP (truncated header): " + path);
    const std::uint32_t data_offset = le32(&bytes[10]);
    const std::uint32_t header_size = le32(&bytes[14]);
    if (header_size < 40) throw FormatError("undecodable BMP (unsupported header): " + path);
    const std::int32_t width = static_cast<std::int32_t>(le32(&bytes[18]));
    std::int32_t height = static_cast<std::int32_t>(le32(&bytes[22]));
    const std::uint16_t bpp = le16(&bytes[28]);
    const std::uint32_t compression = le32(&bytes[30]);
    const bool top_down = height < 0;
    if (top_down) height = -height;
    if (width <= 0 || height <= 0 || compression != 0 || (bpp != 8 && bpp != 24 && bpp != 32))
        throw FormatError("undecodable BMP (unsupported encoding): " + path);

    // 8-bit BMPs carry a palette right after the info header.
    const unsigned char* palette = nullptr;
    if (bpp == 8) {
        if (14 + header_size + 1024 > bytes.size())
            throw FormatError("undecodable BMP (missing palette): " + path);
        palette = &bytes[14 + header_size];
    }

    const std::size_t row_stride = ((static_cast<std::size_t>(width) * bpp + 31) / 32) * 4;
    if (static_cast<std::size_t>(data_offset) + row_stride * height > bytes.size())
        throw FormatError("undecodable BMP (truncated payload): " + path);

    ImageU8 img;
    img.height = height;
    img.width = width;
    img.channels = 3;
    img.pixels.resize(static_cast<std::size_t>(height) * width * 3);
    for (int y = 0; y < height; ++y) {
        const int src_y = top_down ? y : height - 1 - y;
        const unsigned char* row = &bytes[data_offset + row_stride * src_y];
        for (int x = 0; x < width; ++x) {
            unsigned char r, g, b;
            if (bpp == 8) {
                const unsigned char* entry = palette + 4 * row[x];
                b = entry[0];
                g = entry[1];
                r = entry[2];
            } else {
                const unsigned char* px = row + x * (bpp / 8);
                b = px[0];
                g = px[1];
                r = px[2];
            }
            img.pixels[img.idx(y, x, 0)] = r;
            img.pixels[img.idx(y, x, 1)] = g;
            img.pixels[img.idx(y, x, 2)] = b;
        }
    }
    return img;
}

}  // namespace

ImageU8 decode_image_file(const std::string& path) {
    const std::vector<unsigned char> bytes = read_file_bytes(path);
    if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G')
        return decode_png(bytes, path);
    if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8) return decode_jpeg(bytes, path);
    if (bytes.size() >= 2 && bytes[0] == 'B' && bytes[1] == 'M') return decode_bmp(bytes, path);
    throw FormatError("undecodable image (unknown magic): " + path);
}

void write_png(const std::string& path, const ImageU8& image) {
    require<ContractError>(image.channels == 1 || image.channels == 3,
                           "write_png: channels must be 1 or 3, got ", image.channels);
    require<ContractError>(image.height > 0 && image.width > 0, "write_png: empty image");
    require<ContractError>(image.pixels.size() ==
                               static_cast<std::size_t>(image.height) * image.width * image.channels,
                           "write_png: pixel buffer size mismatch");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw Error("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw Error("libpng init failed");
    }
    PngWriteSink sink;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("PNG encode failed for " + path);
    }
    png_set_write_fn(png, &sink, png_write_to_memory, png_flush_noop);
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
                 static_cast<png_uint_32>(image.height), 8,
                 image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y)
        png_write_row(png, const_cast<png_bytep>(&image.pixels[image.idx(y, 0, 0)]));
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write file: " + path);
    out.write(reinterpret_cast<const char*>(sink.bytes.data()),
              static_cast<std::streamsize>(sink.bytes.size()));
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace kan

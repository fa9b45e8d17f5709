#include "camoforge/imageio.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "camoforge/errors.hpp"

namespace camoforge {

namespace {

const uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4], const uint8_t* data, size_t len) {
    put_u32(out, static_cast<uint32_t>(len));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    if (len) out.insert(out.end(), data, data + len);
    uint32_t crc = crc32(0, out.data() + start, static_cast<uInt>(4 + len));
    put_u32(out, crc);
}

std::vector<uint8_t> zlib_deflate(const std::vector<uint8_t>& in) {
    uLongf bound = compressBound(static_cast<uLong>(in.size()));
    std::vector<uint8_t> out(bound);
    if (compress2(out.data(), &bound, in.data(), static_cast<uLong>(in.size()), 6) != Z_OK)
        throw IoError("png: deflate failed");
    out.resize(bound);
    return out;
}

std::vector<uint8_t> zlib_inflate(const std::vector<uint8_t>& in, size_t expected) {
    std::vector<uint8_t> out(expected);
    uLongf dst_len = static_cast<uLongf>(expected);
    int rc = uncompress(out.data(), &dst_len, in.data(), static_cast<uLong>(in.size()));
    if (rc != Z_OK || dst_len != expected) throw IoError("png: inflate failed or size mismatch");
    return out;
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

std::vector<uint8_t> encode_png(const ImageU8& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.pixels.size() != static_cast<size_t>(img.width) * img.height * 3)
        throw ParameterError("encode_png: inconsistent image dimensions");

    const size_t stride = static_cast<size_t>(img.width) * 3;
    std::vector<uint8_t> raw;
    raw.reserve((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter type none
        raw.insert(raw.end(), img.pixels.begin() + y * stride, img.pixels.begin() + (y + 1) * stride);
    }
    std::vector<uint8_t> compressed = zlib_deflate(raw);

    std::vector<uint8_t> out(kPngSig, kPngSig + 8);
    uint8_t ihdr[13];
    ihdr[0] = static_cast<uint8_t>(img.width >> 24);
    ihdr[1] = static_cast<uint8_t>(img.width >> 16);
    ihdr[2] = static_cast<uint8_t>(img.width >> 8);
    ihdr[3] = static_cast<uint8_t>(img.width);
    ihdr[4] = static_cast<uint8_t>(img.height >> 24);
    ihdr[5] = static_cast<uint8_t>(img.height >> 16);
    ihdr[6] = static_cast<uint8_t>(img.height >> 8);
    ihdr[7] = static_cast<uint8_t>(img.height);
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 2;   // color type RGB
    ihdr[10] = 0;  // compression
    ihdr[11] = 0;  // filter
    ihdr[12] = 0;  // interlace
    append_chunk(out, "IHDR", ihdr, 13);
    append_chunk(out, "IDAT", compressed.data(), compressed.size());
    append_chunk(out, "IEND", nullptr, 0);
    return out;
}

ImageU8 decode_png(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0)
        throw IoError("png: bad signature");

    int width = 0, height = 0, bit_depth = 0, color_type = 0;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    bool saw_ihdr = false;
    while (pos + 12 <= bytes.size()) {
        uint32_t len = get_u32(&bytes[pos]);
        if (pos + 12 + len > bytes.size()) throw IoError("png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
        const uint8_t* data = &bytes[pos + 8];
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw IoError("png: bad IHDR");
            width = static_cast<int>(get_u32(data));
            height = static_cast<int>(get_u32(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw IoError("png: interlaced images unsupported");
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || width <= 0 || height <= 0) throw IoError("png: missing IHDR");
    if (bit_depth != 8) throw IoError("png: only 8-bit depth supported");
    int channels;
    if (color_type == 2)
        channels = 3;
    else if (color_type == 6)
        channels = 4;
    else if (color_type == 0)
        channels = 1;
    else
        throw IoError("png: unsupported color type");

    const size_t stride = static_cast<size_t>(width) * channels;
    std::vector<uint8_t> raw = zlib_inflate(idat, (stride + 1) * height);

    // Unfilter in place per scanline.
    std::vector<uint8_t> prev(stride, 0);
    ImageU8 img(width, height);
    std::vector<uint8_t> cur(stride);
    for (int y = 0; y < height; ++y) {
        const uint8_t* row = &raw[static_cast<size_t>(y) * (stride + 1)];
        uint8_t filter = row[0];
        const uint8_t* src = row + 1;
        for (size_t i = 0; i < stride; ++i) {
            int a = i >= static_cast<size_t>(channels) ? cur[i - channels] : 0;
            int b = prev[i];
            int c = i >= static_cast<size_t>(channels) ? prev[i - channels] : 0;
            int x = src[i];
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: x += paeth(a, b, c); break;
                default: throw IoError("png: unknown filter type");
            }
            cur[i] = static_cast<uint8_t>(x);
        }
        for (int xpx = 0; xpx < width; ++xpx) {
            uint8_t* dst = img.at(xpx, y);
            if (channels == 1) {
                dst[0] = dst[1] = dst[2] = cur[xpx];
            } else {
                dst[0] = cur[xpx * channels + 0];
                dst[1] = cur[xpx * channels + 1];
                dst[2] = cur[xpx * channels + 2];
            }
        }
        prev = cur;
    }
    return img;
}

void write_png(const std::string& path, const ImageU8& img) {
    std::vector<uint8_t> bytes = encode_png(img);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

ImageU8 read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

std::vector<double> image_to_planar(const ImageU8& img) {
    const size_t n = static_cast<size_t>(img.width) * img.height;
    std::vector<double> planar(3 * n);
    for (size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) planar[c * n + i] = img.pixels[i * 3 + c] / 255.0;
    return planar;
}

ImageU8 planar_to_image(const std::vector<double>& planar, int width, int height) {
    const size_t n = static_cast<size_t>(width) * height;
    if (planar.size() != 3 * n) throw ParameterError("planar_to_image: size mismatch");
    ImageU8 img(width, height);
    for (size_t i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) {
            double v = planar[c * n + i];
            v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
            img.pixels[i * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0));
        }
    }
    return img;
}

}  // namespace camoforge

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace exprbench {

// 8-bit single-channel image, row-major.
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    GrayImage() = default;
    GrayImage(int w, int h, std::uint8_t fill = 0)
        : width(w), height(h),
          pixels(static_cast<std::size_t>(w) * h, fill) {
        if (w < 1 || h < 1)
            throw std::invalid_argument("GrayImage: dimensions must be >= 1");
    }

    std::uint8_t& at(int y, int x) {
        return pixels[static_cast<std::size_t>(y) * width + x];
    }
    std::uint8_t at(int y, int x) const {
        return pixels[static_cast<std::size_t>(y) * width + x];
    }

    bool operator==(const GrayImage& o) const {
        return width == o.width && height == o.height && pixels == o.pixels;
    }
};

inline GrayImage crop(const GrayImage& img, int row0, int col0, int h, int w) {
    if (row0 < 0 || col0 < 0 || row0 + h > img.height || col0 + w > img.width)
        throw std::invalid_argument("crop: window out of bounds");
    GrayImage out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            out.at(y, x) = img.at(row0 + y, col0 + x);
    return out;
}

inline GrayImage hflip(const GrayImage& img) {
    GrayImage out(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out.at(y, x) = img.at(y, img.width - 1 - x);
    return out;
}

// Bilinear sample with replicated borders, real-valued coordinates.
inline double sample_bilinear(const GrayImage& img, double x, double y) {
    const auto clampi = [](int v, int lo, int hi) {
        return std::min(std::max(v, lo), hi);
    };
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    double fx = x - x0;
    double fy = y - y0;
    int x0c = clampi(x0, 0, img.width - 1);
    int x1c = clampi(x0 + 1, 0, img.width - 1);
    int y0c = clampi(y0, 0, img.height - 1);
    int y1c = clampi(y0 + 1, 0, img.height - 1);
    double v00 = img.at(y0c, x0c), v01 = img.at(y0c, x1c);
    double v10 = img.at(y1c, x0c), v11 = img.at(y1c, x1c);
    double top = v00 + fx * (v01 - v00);
    double bot = v10 + fx * (v11 - v10);
    return top + fy * (bot - top);
}

// 2x3 affine matrix mapping output pixel coordinates to input coordinates:
// in_x = m[0]*x + m[1]*y + m[2], in_y = m[3]*x + m[4]*y + m[5].
struct Affine {
    double m[6];
    void apply(double x, double y, double& ox, double& oy) const {
        ox = m[0] * x + m[1] * y + m[2];
        oy = m[3] * x + m[4] * y + m[5];
    }
};

inline GrayImage warp_affine(const GrayImage& img, const Affine& inv,
                             int out_w, int out_h) {
    GrayImage out(out_w, out_h);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            double sx, sy;
            inv.apply(x, y, sx, sy);
            double v = sample_bilinear(img, sx, sy);
            long q = std::lround(v);
            out.at(y, x) = static_cast<std::uint8_t>(std::clamp(q, 0L, 255L));
        }
    return out;
}

// --- portable graymap (P5 binary, P2 ascii on read) ---

namespace detail {
inline int pnm_next_int(std::istream& in, const std::string& path) {
    // skips whitespace and '#' comments
    int ch;
    while ((ch = in.peek()) != EOF) {
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(ch)) {
            in.get();
        } else {
            break;
        }
    }
    int v;
    if (!(in >> v))
        throw std::runtime_error("pgm: malformed header in " + path);
    return v;
}
} // namespace detail

inline GrayImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("pgm: cannot open " + path);
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P5" && magic != "P2")
        throw std::runtime_error("pgm: unsupported magic in " + path);
    int w = detail::pnm_next_int(in, path);
    int h = detail::pnm_next_int(in, path);
    int maxval = detail::pnm_next_int(in, path);
    if (w < 1 || h < 1 || maxval < 1 || maxval > 255)
        throw std::runtime_error("pgm: unsupported geometry/maxval in " + path);
    GrayImage img(w, h);
    if (magic == "P5") {
        in.get(); // single whitespace after maxval
        in.read(reinterpret_cast<char*>(img.pixels.data()),
                static_cast<std::streamsize>(img.pixels.size()));
        if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
            throw std::runtime_error("pgm: truncated data in " + path);
    } else {
        for (auto& p : img.pixels) {
            int v = detail::pnm_next_int(in, path);
            if (v < 0 || v > maxval)
                throw std::runtime_error("pgm: sample out of range in " + path);
            p = static_cast<std::uint8_t>(v);
        }
    }
    return img;
}

inline void write_pgm(const GrayImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("pgm: cannot write " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out)
        throw std::runtime_error("pgm: write failed for " + path);
}

} // namespace exprbench

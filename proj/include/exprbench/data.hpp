#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "exprbench/image.hpp"
#include "exprbench/rng.hpp"

namespace exprbench {

// emotion class ids 0..6
inline const std::array<std::string, 7>& class_names() {
    static const std::array<std::string, 7> names = {
        "angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"};
    return names;
}

enum class CropTag {
    original,
    center, center_f,
    tl, tl_f,
    tr, tr_f,
    bl, bl_f,
    br, br_f,
};

inline const char* crop_tag_name(CropTag t) {
    switch (t) {
    case CropTag::original: return "original";
    case CropTag::center: return "center";
    case CropTag::center_f: return "center+f";
    case CropTag::tl: return "tl";
    case CropTag::tl_f: return "tl+f";
    case CropTag::tr: return "tr";
    case CropTag::tr_f: return "tr+f";
    case CropTag::bl: return "bl";
    case CropTag::bl_f: return "bl+f";
    case CropTag::br: return "br";
    case CropTag::br_f: return "br+f";
    }
    return "?";
}

// Eye centers in image coordinates (x right, y down).
struct Landmarks {
    double left_x = 0, left_y = 0;
    double right_x = 0, right_y = 0;
};

struct Sample {
    GrayImage image;
    int label = 0;
    std::string source_id;
    CropTag tag = CropTag::original;
    std::string usage; // FER Usage column, empty for directory datasets
    std::optional<Landmarks> landmarks;
};

struct Dataset {
    std::string name;
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }

    std::array<std::int64_t, 7> class_histogram() const {
        std::array<std::int64_t, 7> h{};
        for (const Sample& s : samples)
            ++h[static_cast<std::size_t>(s.label)];
        return h;
    }
};

// A loader never silently drops rows: sample count plus row_errors count
// equals the input row count.
struct LoadReport {
    Dataset dataset;
    std::vector<std::string> row_errors;
};

// ---------------------------------------------------------------------------
// FER-2013 CSV: header `emotion,pixels,Usage`, rows of a class id, 2304
// space-separated pixel values, and a usage tag.

inline LoadReport load_fer_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("fer csv: cannot open " + path);
    LoadReport rep;
    rep.dataset.name = std::filesystem::path(path).stem().string();
    std::string line;
    std::size_t lineno = 0, rowno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty())
            continue;
        if (lineno == 1 && line.rfind("emotion", 0) == 0)
            continue; // header
        ++rowno;
        auto fail = [&](const std::string& why) {
            rep.row_errors.push_back("row " + std::to_string(rowno) + ": " + why);
        };
        std::size_t first = line.find(',');
        std::size_t last = line.rfind(',');
        if (first == std::string::npos || last == first) {
            fail("expected emotion,pixels,usage");
            continue;
        }
        int emotion = -1;
        try {
            emotion = std::stoi(line.substr(0, first));
        } catch (const std::exception&) {
            fail("bad emotion field");
            continue;
        }
        if (emotion < 0 || emotion > 6) {
            fail("emotion out of range 0..6");
            continue;
        }
        Sample s;
        s.image = GrayImage(48, 48);
        const char* p = line.data() + first + 1;
        const char* end = line.data() + last;
        std::size_t count = 0;
        bool bad = false;
        while (p < end && !bad) {
            while (p < end && *p == ' ')
                ++p;
            if (p >= end)
                break;
            int v = 0;
            bool digit = false;
            while (p < end && *p >= '0' && *p <= '9') {
                v = v * 10 + (*p - '0');
                digit = true;
                ++p;
                if (v > 255) {
                    bad = true;
                    break;
                }
            }
            if (!digit || (p < end && *p != ' ')) {
                bad = true;
                break;
            }
            if (count < s.image.pixels.size())
                s.image.pixels[count] = static_cast<std::uint8_t>(v);
            ++count;
        }
        if (bad) {
            fail("malformed pixel field");
            continue;
        }
        if (count != 2304) {
            fail("expected 2304 pixels, got " + std::to_string(count));
            continue;
        }
        s.label = emotion;
        s.usage = line.substr(last + 1);
        s.source_id = rep.dataset.name + ":" + std::to_string(rowno);
        rep.dataset.samples.push_back(std::move(s));
    }
    return rep;
}

inline Dataset subset_by_usage(const Dataset& ds,
                               const std::vector<std::string>& usages) {
    Dataset out;
    out.name = ds.name;
    for (const Sample& s : ds.samples)
        if (std::find(usages.begin(), usages.end(), s.usage) != usages.end())
            out.samples.push_back(s);
    return out;
}

// ---------------------------------------------------------------------------
// labeled image directories: one subdirectory per class name, optional
// landmark sidecar CSV `filename,lx,ly,rx,ry`.

inline std::unordered_map<std::string, Landmarks>
load_landmark_sidecar(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("landmarks: cannot open " + path);
    std::unordered_map<std::string, Landmarks> out;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty())
            continue;
        if (first && line.rfind("filename", 0) == 0) {
            first = false;
            continue;
        }
        first = false;
        std::stringstream ss(line);
        std::string fname, f[4];
        if (!std::getline(ss, fname, ','))
            throw std::runtime_error("landmarks: malformed line: " + line);
        Landmarks lm;
        double* vals[4] = {&lm.left_x, &lm.left_y, &lm.right_x, &lm.right_y};
        for (int i = 0; i < 4; ++i) {
            if (!std::getline(ss, f[i], ','))
                throw std::runtime_error("landmarks: malformed line: " + line);
            try {
                *vals[i] = std::stod(f[i]);
            } catch (const std::exception&) {
                throw std::runtime_error("landmarks: bad number in line: " + line);
            }
        }
        if (!out.emplace(fname, lm).second)
            throw std::runtime_error("landmarks: duplicate filename " + fname);
    }
    return out;
}

inline LoadReport load_image_dir(const std::string& root,
                                 const std::string& landmarks_file = "") {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root))
        throw std::runtime_error("image dir: not a directory: " + root);

    std::unordered_map<std::string, Landmarks> sidecar;
    if (!landmarks_file.empty())
        sidecar = load_landmark_sidecar(landmarks_file);
    std::unordered_set<std::string> sidecar_used;

    LoadReport rep;
    rep.dataset.name = fs::path(root).filename().string();

    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(root)) {
        if (!e.is_directory())
            continue;
        std::string cname = e.path().filename().string();
        if (std::find(class_names().begin(), class_names().end(), cname) ==
            class_names().end())
            throw std::runtime_error("image dir: unknown class directory " +
                                     cname);
        class_dirs.push_back(e.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());

    for (const fs::path& dir : class_dirs) {
        const std::string cname = dir.filename().string();
        const int label = static_cast<int>(
            std::find(class_names().begin(), class_names().end(), cname) -
            class_names().begin());
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file())
                files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const fs::path& f : files) {
            Sample s;
            try {
                s.image = read_pgm(f.string());
            } catch (const std::exception& ex) {
                rep.row_errors.push_back(std::string("unreadable image ") +
                                         f.string() + ": " + ex.what());
                continue;
            }
            s.label = label;
            s.source_id = cname + "/" + f.filename().string();
            auto it = sidecar.find(f.filename().string());
            if (it != sidecar.end()) {
                s.landmarks = it->second;
                sidecar_used.insert(it->first);
            }
            rep.dataset.samples.push_back(std::move(s));
        }
    }
    for (const auto& [fname, lm] : sidecar)
        if (!sidecar_used.count(fname))
            throw std::runtime_error("landmarks: entry for missing file " +
                                     fname);
    return rep;
}

// ---------------------------------------------------------------------------
// exclusion list: one source_id per line, '#' comments

inline std::unordered_set<std::string>
load_exclusion_list(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("exclusions: cannot open " + path);
    std::unordered_set<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
            line.pop_back();
        if (line.empty() || line[0] == '#')
            continue;
        out.insert(line);
    }
    return out;
}

inline Dataset apply_exclusions(const Dataset& ds,
                                const std::unordered_set<std::string>& drop) {
    Dataset out;
    out.name = ds.name;
    for (const Sample& s : ds.samples)
        if (!drop.count(s.source_id))
            out.samples.push_back(s);
    return out;
}

// ---------------------------------------------------------------------------
// eye registration: rotate about the eye midpoint so the eye line is
// horizontal, then scale/translate so the interocular distance is 19.2 px
// and the eye midpoint lands at (24, 19.2) of the 48x48 output.

inline constexpr int kFaceSize = 48;
inline constexpr double kInterocular = 19.2; // 0.4 * 48
inline constexpr double kEyeMidX = 24.0;
inline constexpr double kEyeMidY = 19.2;

inline Affine invert_affine(const Affine& a) {
    double det = a.m[0] * a.m[4] - a.m[1] * a.m[3];
    if (std::abs(det) < 1e-12)
        throw std::invalid_argument("invert_affine: singular transform");
    double i0 = a.m[4] / det, i1 = -a.m[1] / det;
    double i3 = -a.m[3] / det, i4 = a.m[0] / det;
    return Affine{{i0, i1, -(i0 * a.m[2] + i1 * a.m[5]),
                   i3, i4, -(i3 * a.m[2] + i4 * a.m[5])}};
}

// Input -> output map of the registration warp.
inline Affine registration_transform(const Landmarks& in) {
    Landmarks lm = in;
    if (lm.right_x < lm.left_x) {
        std::swap(lm.left_x, lm.right_x);
        std::swap(lm.left_y, lm.right_y);
    }
    double dx = lm.right_x - lm.left_x;
    double dy = lm.right_y - lm.left_y;
    double dist = std::sqrt(dx * dx + dy * dy);
    if (dist < 1e-6)
        throw std::invalid_argument("registration: coincident eye landmarks");
    double mx = 0.5 * (lm.left_x + lm.right_x);
    double my = 0.5 * (lm.left_y + lm.right_y);
    double theta = std::atan2(dy, dx);
    double s = kInterocular / dist;
    double c = std::cos(theta), sn = std::sin(theta);
    // q = s * R(-theta) * (p - mid) + (kEyeMidX, kEyeMidY)
    double a0 = s * c, a1 = s * sn;
    double a3 = -s * sn, a4 = s * c;
    return Affine{{a0, a1, kEyeMidX - a0 * mx - a1 * my,
                   a3, a4, kEyeMidY - a3 * mx - a4 * my}};
}

inline GrayImage register_face(const GrayImage& img, const Landmarks& lm) {
    Affine fwd = registration_transform(lm);
    return warp_affine(img, invert_affine(fwd), kFaceSize, kFaceSize);
}

// Plain bilinear resize (pixel-center convention); used for landmark-less
// images that are not already 48x48.
inline GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h) {
    double sx = static_cast<double>(img.width) / out_w;
    double sy = static_cast<double>(img.height) / out_h;
    Affine inv{{sx, 0.0, 0.5 * sx - 0.5, 0.0, sy, 0.5 * sy - 0.5}};
    return warp_affine(img, inv, out_w, out_h);
}

// Registration when landmarks are present, pass-through / resize otherwise.
inline GrayImage to_canonical48(const Sample& s) {
    if (s.landmarks)
        return register_face(s.image, *s.landmarks);
    if (s.image.width == kFaceSize && s.image.height == kFaceSize)
        return s.image;
    return resize_bilinear(s.image, kFaceSize, kFaceSize);
}

// ---------------------------------------------------------------------------
// 10x augmentation: five 42x42 crops, each plain and horizontally flipped

inline constexpr int kCropSize = 42;

inline GrayImage center_crop42(const GrayImage& img48) {
    return crop(img48, 3, 3, kCropSize, kCropSize);
}

inline std::vector<Sample> augment(const Sample& s) {
    if (s.image.width != kFaceSize || s.image.height != kFaceSize)
        throw std::invalid_argument("augment: input must be 48x48");
    struct Offset {
        int row, col;
        CropTag plain, flipped;
    };
    static const Offset offsets[5] = {
        {3, 3, CropTag::center, CropTag::center_f},
        {0, 0, CropTag::tl, CropTag::tl_f},
        {0, 6, CropTag::tr, CropTag::tr_f},
        {6, 0, CropTag::bl, CropTag::bl_f},
        {6, 6, CropTag::br, CropTag::br_f},
    };
    std::vector<Sample> out;
    out.reserve(10);
    for (const Offset& o : offsets) {
        GrayImage c = crop(s.image, o.row, o.col, kCropSize, kCropSize);
        Sample plain;
        plain.image = c;
        plain.label = s.label;
        plain.source_id = s.source_id;
        plain.usage = s.usage;
        plain.tag = o.plain;
        Sample flipped = plain;
        flipped.image = hflip(c);
        flipped.tag = o.flipped;
        out.push_back(std::move(plain));
        out.push_back(std::move(flipped));
    }
    return out;
}

inline Dataset augment_all(const Dataset& ds) {
    Dataset out;
    out.name = ds.name;
    out.samples.reserve(ds.samples.size() * 10);
    for (const Sample& s : ds.samples)
        for (Sample& child : augment(s))
            out.samples.push_back(std::move(child));
    return out;
}

// ---------------------------------------------------------------------------
// per-epoch validation split

enum class SplitBy { source, crop };

// Disjoint partition with |val| = round(fraction * N) at the grouping level.
// SplitBy::source keeps all crops of one original image on the same side.
inline std::pair<Dataset, Dataset> epoch_split(const Dataset& ds,
                                               double fraction, Rng& rng,
                                               SplitBy by = SplitBy::source) {
    if (fraction <= 0.0 || fraction >= 1.0)
        throw std::invalid_argument("epoch_split: fraction must be in (0,1)");
    Dataset train, val;
    train.name = ds.name;
    val.name = ds.name;

    auto shuffled = [&rng](std::size_t n) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i)
            idx[i] = i;
        for (std::size_t i = n; i > 1; --i) {
            std::size_t j = rng.next_below(i);
            std::swap(idx[i - 1], idx[j]);
        }
        return idx;
    };

    if (by == SplitBy::source) {
        std::vector<std::string> sources;
        std::unordered_map<std::string, std::size_t> seen;
        for (const Sample& s : ds.samples)
            if (seen.emplace(s.source_id, sources.size()).second)
                sources.push_back(s.source_id);
        const std::size_t n = sources.size();
        const std::size_t n_val = static_cast<std::size_t>(
            std::lround(fraction * static_cast<double>(n)));
        if (n_val == 0 || n_val >= n)
            throw std::invalid_argument(
                "epoch_split: dataset too small for this fraction");
        std::vector<std::size_t> order = shuffled(n);
        std::unordered_set<std::string> val_sources;
        for (std::size_t i = 0; i < n_val; ++i)
            val_sources.insert(sources[order[i]]);
        for (const Sample& s : ds.samples)
            (val_sources.count(s.source_id) ? val : train)
                .samples.push_back(s);
    } else {
        const std::size_t n = ds.samples.size();
        const std::size_t n_val = static_cast<std::size_t>(
            std::lround(fraction * static_cast<double>(n)));
        if (n_val == 0 || n_val >= n)
            throw std::invalid_argument(
                "epoch_split: dataset too small for this fraction");
        std::vector<std::size_t> order = shuffled(n);
        std::vector<char> in_val(n, 0);
        for (std::size_t i = 0; i < n_val; ++i)
            in_val[order[i]] = 1;
        for (std::size_t i = 0; i < n; ++i)
            (in_val[i] ? val : train).samples.push_back(ds.samples[i]);
    }
    return {std::move(train), std::move(val)};
}

} // namespace exprbench

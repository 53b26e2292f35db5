#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "kan/image.hpp"
#include "kan/rng.hpp"
#include "kan/tensor.hpp"

namespace kan {

struct Dataset {
    Tensor<float> images;  // [N x C x H x W], values in [0, 1]
    std::vector<int> labels;
    std::vector<std::string> class_names;
    std::string provenance;
    std::vector<Index> source_index;  // parent index per sample; empty means identity

    Index size() const { return images.defined() ? images.dim(0) : 0; }
    int classes() const { return static_cast<int>(class_names.size()); }
    Index channels() const { return images.dim(1); }
    Index height() const { return images.dim(2); }
    Index width() const { return images.dim(3); }

    void validate() const {
        require<ContractError>(images.defined() && images.rank() == 4,
                               "Dataset: images must be NxCxHxW");
        require<ContractError>(static_cast<Index>(labels.size()) == size(),
                               "Dataset: ", labels.size(), " labels for ", size(), " images");
        for (int y : labels)
            require<IndexError>(y >= 0 && y < classes(), "Dataset: label ", y,
                                " out of range for ", classes(), " classes");
    }
};

struct SplitAssignment {
    std::vector<Index> train, val, test;
    std::uint64_t seed = 0;
};

struct ReductionSpec {
    double fraction = 1.0;
    std::uint64_t seed = 0;
};

inline Dataset subset(const Dataset& ds, const std::vector<Index>& indices) {
    const Index per = ds.images.size() / std::max<Index>(ds.size(), 1);
    Dataset out;
    out.images = Tensor<float>(Shape{static_cast<Index>(indices.size()), ds.channels(),
                                     ds.height(), ds.width()});
    out.labels.reserve(indices.size());
    out.source_index.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const Index src = indices[i];
        require<IndexError>(src >= 0 && src < ds.size(), "subset: index ", src, " out of range");
        std::copy_n(ds.images.data() + src * per, per, out.images.data() + static_cast<Index>(i) * per);
        out.labels.push_back(ds.labels[static_cast<std::size_t>(src)]);
        out.source_index.push_back(src);
    }
    out.class_names = ds.class_names;
    out.provenance = ds.provenance + "#subset";
    return out;
}

inline Dataset resize_dataset(const Dataset& ds, int h, int w) {
    if (ds.height() == h && ds.width() == w) return ds;
    Dataset out;
    out.images = Tensor<float>(Shape{ds.size(), ds.channels(), h, w});
    const Index sp = ds.channels() * ds.height() * ds.width();
    const Index dp = ds.channels() * h * w;
    for (Index i = 0; i < ds.size(); ++i)
        resize_bilinear_chw(ds.images.data() + i * sp, static_cast<int>(ds.channels()),
                            static_cast<int>(ds.height()), static_cast<int>(ds.width()),
                            out.images.data() + i * dp, h, w);
    out.labels = ds.labels;
    out.class_names = ds.class_names;
    out.provenance = ds.provenance;
    out.source_index = ds.source_index;
    return out;
}

// ---------------------------------------------------------------------------
// Class-per-directory image ingestion
// ---------------------------------------------------------------------------

namespace detail {

// Float CHW in [0,1]; grayscale replicated to 3 channels. No enhancement.
inline std::vector<float> image_to_chw(const ImageU8& img) {
    std::vector<float> out(static_cast<std::size_t>(3) * img.height * img.width);
    for (int c = 0; c < 3; ++c) {
        const int sc = img.channels == 3 ? c : 0;
        float* plane = out.data() + static_cast<std::size_t>(c) * img.height * img.width;
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                plane[y * img.width + x] = img.pixels[img.idx(y, x, sc)] / 255.0f;
    }
    return out;
}

}  // namespace detail

// Alphabetical class directories define label indices; files load in
// alphabetical order within each class. Bilinear resize to (h, w); no
// histogram or contrast enhancement.
inline Dataset load_image_directory(const std::string& root, int h, int w) {
    namespace fs = std::filesystem;
    require<IoError>(fs::is_directory(root), "dataset root is not a directory: ", root);

    std::vector<std::string> class_dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) class_dirs.push_back(entry.path().filename().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    require<IoError>(!class_dirs.empty(), "no class directories under: ", root);

    std::vector<std::pair<std::string, int>> files;  // path, label
    for (std::size_t c = 0; c < class_dirs.size(); ++c) {
        std::vector<std::string> names;
        for (const auto& entry : fs::directory_iterator(fs::path(root) / class_dirs[c]))
            if (entry.is_regular_file()) names.push_back(entry.path().string());
        std::sort(names.begin(), names.end());
        require<Error>(!names.empty(), "empty class directory: ",
                       (fs::path(root) / class_dirs[c]).string());
        for (auto& n : names) files.emplace_back(std::move(n), static_cast<int>(c));
    }

    Dataset ds;
    ds.class_names = class_dirs;
    ds.provenance = "dir:" + root;
    ds.images = Tensor<float>(Shape{static_cast<Index>(files.size()), 3, h, w});
    ds.labels.reserve(files.size());
    const Index per = static_cast<Index>(3) * h * w;
    for (std::size_t i = 0; i < files.size(); ++i) {
        const ImageU8 img = decode_image_file(files[i].first);
        const std::vector<float> chw = detail::image_to_chw(img);
        resize_bilinear_chw(chw.data(), 3, img.height, img.width,
                            ds.images.data() + static_cast<Index>(i) * per, h, w);
        ds.labels.push_back(files[i].second);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// IDX (MNIST-lineage) binary container
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    require<FormatError>(static_cast<bool>(in), "truncated IDX header: ", path);
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | b[3];
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Big-endian magic + dims + raw unsigned bytes; pixels scaled by 1/255 and
// replicated to 3 channels.
inline Dataset load_idx_pair(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imf(images_path, std::ios::binary);
    require<IoError>(static_cast<bool>(imf), "cannot open IDX images: ", images_path);
    std::ifstream lbf(labels_path, std::ios::binary);
    require<IoError>(static_cast<bool>(lbf), "cannot open IDX labels: ", labels_path);

    const std::uint32_t im_magic = detail::read_be32(imf, images_path);
    require<FormatError>(im_magic == kIdxImagesMagic, "bad IDX image magic 0x", std::hex, im_magic,
                         " in ", images_path);
    const std::uint32_t n = detail::read_be32(imf, images_path);
    const std::uint32_t h = detail::read_be32(imf, images_path);
    const std::uint32_t w = detail::read_be32(imf, images_path);

    const std::uint32_t lb_magic = detail::read_be32(lbf, labels_path);
    require<FormatError>(lb_magic == kIdxLabelsMagic, "bad IDX label magic 0x", std::hex, lb_magic,
                         " in ", labels_path);
    const std::uint32_t ln = detail::read_be32(lbf, labels_path);
    require<FormatError>(n == ln, "IDX count mismatch: ", n, " images vs ", ln, " labels");

    std::vector<unsigned char> raw(static_cast<std::size_t>(n) * h * w);
    imf.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    require<FormatError>(static_cast<bool>(imf), "truncated IDX image payload: ", images_path);
    std::vector<unsigned char> lraw(n);
    lbf.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(lraw.size()));
    require<FormatError>(static_cast<bool>(lbf), "truncated IDX label payload: ", labels_path);

    Dataset ds;
    ds.provenance = "idx:" + images_path;
    ds.images = Tensor<float>(Shape{static_cast<Index>(n), 3, static_cast<Index>(h),
                                    static_cast<Index>(w)});
    ds.labels.reserve(n);
    int max_label = 0;
    const Index plane = static_cast<Index>(h) * w;
    for (std::uint32_t i = 0; i < n; ++i) {
        float* base = ds.images.data() + static_cast<Index>(i) * 3 * plane;
        for (Index p = 0; p < plane; ++p) {
            const float v = raw[static_cast<std::size_t>(i) * plane + static_cast<std::size_t>(p)] / 255.0f;
            base[p] = v;
            base[plane + p] = v;
            base[2 * plane + p] = v;
        }
        ds.labels.push_back(lraw[i]);
        max_label = std::max(max_label, static_cast<int>(lraw[i]));
    }
    for (int c = 0; c <= max_label; ++c) ds.class_names.push_back("class_" + std::to_string(c));
    return ds;
}

inline void save_idx_pair(const Dataset& ds, const std::string& images_path,
                          const std::string& labels_path) {
    std::ofstream imf(images_path, std::ios::binary | std::ios::trunc);
    require<IoError>(static_cast<bool>(imf), "cannot write IDX images: ", images_path);
    std::ofstream lbf(labels_path, std::ios::binary | std::ios::trunc);
    require<IoError>(static_cast<bool>(lbf), "cannot write IDX labels: ", labels_path);

    detail::write_be32(imf, kIdxImagesMagic);
    detail::write_be32(imf, static_cast<std::uint32_t>(ds.size()));
    detail::write_be32(imf, static_cast<std::uint32_t>(ds.height()));
    detail::write_be32(imf, static_cast<std::uint32_t>(ds.width()));
    const Index plane = ds.height() * ds.width();
    std::vector<unsigned char> row(static_cast<std::size_t>(plane));
    for (Index i = 0; i < ds.size(); ++i) {
        const float* base = ds.images.data() + i * ds.channels() * plane;  // channel 0
        for (Index p = 0; p < plane; ++p) {
            const float v = std::clamp(base[p], 0.0f, 1.0f);
            row[static_cast<std::size_t>(p)] = static_cast<unsigned char>(std::lround(v * 255.0f));
        }
        imf.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    detail::write_be32(lbf, kIdxLabelsMagic);
    detail::write_be32(lbf, static_cast<std::uint32_t>(ds.size()));
    for (Index i = 0; i < ds.size(); ++i) {
        const unsigned char y = static_cast<unsigned char>(ds.labels[static_cast<std::size_t>(i)]);
        lbf.write(reinterpret_cast<const char*>(&y), 1);
    }
    require<IoError>(static_cast<bool>(imf) && static_cast<bool>(lbf), "IDX write failed");
}

// ---------------------------------------------------------------------------
// Splitting, reduction, balancing
// ---------------------------------------------------------------------------

// Per-class seeded Fisher-Yates shuffle, then a proportional cut with floor
// rounding; the residue goes to train first, then val, then test.
inline SplitAssignment stratified_split(const Dataset& ds,
                                        std::array<double, 3> ratios = {0.70, 0.20, 0.10},
                                        std::uint64_t seed = 0) {
    ds.validate();
    const double rsum = ratios[0] + ratios[1] + ratios[2];
    require<ContractError>(std::abs(rsum - 1.0) < 1e-9, "stratified_split: ratios must sum to 1");
    for (double r : ratios)
        require<ContractError>(r > 0, "stratified_split: ratios must be positive");

    SplitAssignment split;
    split.seed = seed;
    for (int c = 0; c < ds.classes(); ++c) {
        std::vector<Index> idx;
        for (Index i = 0; i < ds.size(); ++i)
            if (ds.labels[static_cast<std::size_t>(i)] == c) idx.push_back(i);
        require<Error>(idx.size() >= 3, "stratified_split: class '",
                       ds.class_names[static_cast<std::size_t>(c)], "' has only ", idx.size(),
                       " samples (need >= 3)");
        Xoshiro256ss rng(stage_seed(seed, "split-class-" + std::to_string(c)));
        fisher_yates(idx, rng);

        const Index n = static_cast<Index>(idx.size());
        std::array<Index, 3> take{static_cast<Index>(std::floor(ratios[0] * n)),
                                  static_cast<Index>(std::floor(ratios[1] * n)),
                                  static_cast<Index>(std::floor(ratios[2] * n))};
        Index residue = n - (take[0] + take[1] + take[2]);
        for (int k = 0; residue > 0; k = (k + 1) % 3, --residue) take[static_cast<std::size_t>(k)] += 1;

        Index at = 0;
        for (Index i = 0; i < take[0]; ++i) split.train.push_back(idx[static_cast<std::size_t>(at++)]);
        for (Index i = 0; i < take[1]; ++i) split.val.push_back(idx[static_cast<std::size_t>(at++)]);
        for (Index i = 0; i < take[2]; ++i) split.test.push_back(idx[static_cast<std::size_t>(at++)]);
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

// Per-class stratified subsample of the training indices; floor rounding per
// class with largest-remainder top-up until the global floor(p * N_train) is
// reached. Validation and test sets pass through untouched.
inline SplitAssignment reduce_training_set(const SplitAssignment& split,
                                           const std::vector<int>& labels,
                                           const ReductionSpec& spec) {
    require<Error>(spec.fraction > 0.0 && spec.fraction <= 1.0,
                   "reduce_training_set: fraction must be in (0, 1], got ", spec.fraction);
    if (spec.fraction == 1.0) return split;

    std::vector<std::vector<Index>> by_class;
    for (Index i : split.train) {
        const int c = labels[static_cast<std::size_t>(i)];
        if (static_cast<std::size_t>(c) >= by_class.size()) by_class.resize(static_cast<std::size_t>(c) + 1);
        by_class[static_cast<std::size_t>(c)].push_back(i);
    }
    const Index n_train = static_cast<Index>(split.train.size());
    const Index target = static_cast<Index>(std::floor(spec.fraction * static_cast<double>(n_train) + 1e-9));

    struct ClassPlan {
        std::size_t cls;
        Index keep;
        double remainder;
    };
    std::vector<ClassPlan> plan;
    Index kept = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (by_class[c].empty()) continue;
        const double exact = spec.fraction * static_cast<double>(by_class[c].size());
        const Index keep = static_cast<Index>(std::floor(exact + 1e-9));
        plan.push_back(ClassPlan{c, keep, exact - static_cast<double>(keep)});
        kept += keep;
    }
    std::stable_sort(plan.begin(), plan.end(), [](const ClassPlan& a, const ClassPlan& b) {
        return a.remainder > b.remainder;
    });
    for (std::size_t i = 0; kept < target && i < plan.size(); ++i) {
        if (plan[i].keep < static_cast<Index>(by_class[plan[i].cls].size())) {
            plan[i].keep += 1;
            kept += 1;
        }
    }

    SplitAssignment out;
    out.seed = split.seed;
    out.val = split.val;
    out.test = split.test;
    for (const auto& p : plan) {
        std::vector<Index> idx = by_class[p.cls];
        Xoshiro256ss rng(stage_seed(spec.seed, "reduce-class-" + std::to_string(p.cls)));
        fisher_yates(idx, rng);
        idx.resize(static_cast<std::size_t>(p.keep));
        out.train.insert(out.train.end(), idx.begin(), idx.end());
    }
    std::sort(out.train.begin(), out.train.end());
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

namespace aug {

inline void flip_horizontal(float* img, int channels, int h, int w) {
    for (int c = 0; c < channels; ++c) {
        float* plane = img + static_cast<std::size_t>(c) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w / 2; ++x) std::swap(plane[y * w + x], plane[y * w + (w - 1 - x)]);
    }
}

// Rotation about the image center, bilinear sampling, zero fill outside.
inline void rotate_deg(float* img, int channels, int h, int w, double degrees) {
    const double rad = degrees * M_PI / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    std::vector<float> src(img, img + static_cast<std::size_t>(channels) * h * w);
    for (int c = 0; c < channels; ++c) {
        const float* sp = src.data() + static_cast<std::size_t>(c) * h * w;
        float* dp = img + static_cast<std::size_t>(c) * h * w;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double dy = y - cy, dx = x - cx;
                const double syf = cs * dy - sn * dx + cy;
                const double sxf = sn * dy + cs * dx + cx;
                const int y0 = static_cast<int>(std::floor(syf));
                const int x0 = static_cast<int>(std::floor(sxf));
                double v = 0.0;
                if (y0 >= -1 && y0 < h && x0 >= -1 && x0 < w) {
                    const double wy = syf - y0, wx = sxf - x0;
                    auto at = [&](int yy, int xx) -> double {
                        return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? sp[yy * w + xx] : 0.0;
                    };
                    v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
                        wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1));
                }
                dp[y * w + x] = static_cast<float>(v);
            }
        }
    }
}

inline void adjust_brightness(float* img, int channels, int h, int w, double scale) {
    const std::size_t n = static_cast<std::size_t>(channels) * h * w;
    for (std::size_t i = 0; i < n; ++i)
        img[i] = std::clamp(static_cast<float>(img[i] * scale), 0.0f, 1.0f);
}

// Unsharp mask with a 3x3 box blur (replicated borders).
inline void unsharp_mask(float* img, int channels, int h, int w, double strength) {
    std::vector<float> blur(static_cast<std::size_t>(channels) * h * w);
    for (int c = 0; c < channels; ++c) {
        const float* sp = img + static_cast<std::size_t>(c) * h * w;
        float* bp = blur.data() + static_cast<std::size_t>(c) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int yy = std::clamp(y + dy, 0, h - 1);
                        const int xx = std::clamp(x + dx, 0, w - 1);
                        acc += sp[yy * w + xx];
                    }
                bp[y * w + x] = static_cast<float>(acc / 9.0);
            }
    }
    const std::size_t n = static_cast<std::size_t>(channels) * h * w;
    for (std::size_t i = 0; i < n; ++i)
        img[i] = std::clamp(static_cast<float>(img[i] + strength * (img[i] - blur[i])), 0.0f, 1.0f);
}

}  // namespace aug

// Classes above target are randomly subsampled; classes below are topped up
// with transformed copies (flip, rotation within +/-20 degrees, brightness in
// [0.8, 1.2], unsharp strength in [0, 0.5]). source_index records lineage.
inline Dataset augment_balance(const Dataset& ds, Index target_per_class, std::uint64_t seed) {
    ds.validate();
    require<ContractError>(target_per_class >= 1, "augment_balance: target must be >= 1");

    const Index per = ds.channels() * ds.height() * ds.width();
    std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(ds.classes()));
    for (Index i = 0; i < ds.size(); ++i)
        by_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);

    Dataset out;
    out.class_names = ds.class_names;
    out.provenance = ds.provenance + "#balanced";
    out.images = Tensor<float>(Shape{static_cast<Index>(ds.classes()) * target_per_class,
                                     ds.channels(), ds.height(), ds.width()});
    Index cursor = 0;
    auto emit = [&](const float* pixels, int label, Index src) {
        std::copy_n(pixels, per, out.images.data() + cursor * per);
        out.labels.push_back(label);
        out.source_index.push_back(src);
        ++cursor;
    };

    for (std::size_t c = 0; c < by_class.size(); ++c) {
        Xoshiro256ss rng(stage_seed(seed, "balance-class-" + std::to_string(c)));
        std::vector<Index> idx = by_class[c];
        const Index n = static_cast<Index>(idx.size());
        if (n >= target_per_class) {
            fisher_yates(idx, rng);
            idx.resize(static_cast<std::size_t>(target_per_class));
            std::sort(idx.begin(), idx.end());
            for (Index i : idx) emit(ds.images.data() + i * per, static_cast<int>(c), i);
            continue;
        }
        for (Index i : idx) emit(ds.images.data() + i * per, static_cast<int>(c), i);
        std::vector<float> scratch(static_cast<std::size_t>(per));
        for (Index k = n; k < target_per_class; ++k) {
            const Index src = idx[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(n)))];
            std::copy_n(ds.images.data() + src * per, per, scratch.data());
            const bool flip = rng.uniform() < 0.5;
            const double angle = rng.uniform(-20.0, 20.0);
            const double brightness = rng.uniform(0.8, 1.2);
            const double sharpen = rng.uniform(0.0, 0.5);
            const int ch = static_cast<int>(ds.channels());
            const int ih = static_cast<int>(ds.height());
            const int iw = static_cast<int>(ds.width());
            if (flip) aug::flip_horizontal(scratch.data(), ch, ih, iw);
            aug::rotate_deg(scratch.data(), ch, ih, iw, angle);
            aug::adjust_brightness(scratch.data(), ch, ih, iw, brightness);
            aug::unsharp_mask(scratch.data(), ch, ih, iw, sharpen);
            emit(scratch.data(), static_cast<int>(c), src);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic desk-scale datasets
// ---------------------------------------------------------------------------

namespace detail {

inline void paint_family(int family, int h, int w, float* plane) {
    const int band = std::max(1, h / 4);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    const double unit = std::min(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double r = std::hypot(y - cy, x - cx);
            float v = 0.0f;
            switch (family) {
                case 0: v = (y / band) % 2 == 0 ? 1.0f : 0.0f; break;              // horizontal bars
                case 1: v = (x / band) % 2 == 0 ? 1.0f : 0.0f; break;              // vertical bars
                case 2: v = r <= unit * 0.25 ? 1.0f : 0.0f; break;                 // disk
                case 3: v = (r >= unit * 0.22 && r <= unit * 0.38) ? 1.0f : 0.0f; break;  // ring
                case 4: {                                                           // cross
                    const int t = std::max(1, h / 8);
                    v = (std::abs(y - static_cast<int>(cy)) <= t ||
                         std::abs(x - static_cast<int>(cx)) <= t)
                            ? 1.0f
                            : 0.0f;
                    break;
                }
                case 5: {                                                           // checker
                    const int cell = std::max(1, h / 4);
                    v = ((y / cell) + (x / cell)) % 2 == 0 ? 1.0f : 0.0f;
                    break;
                }
                default: break;
            }
            plane[y * w + x] = v;
        }
    }
}

}  // namespace detail

inline const std::array<const char*, 6> kSynthFamilies = {"bars_h", "bars_v", "disk",
                                                          "ring",   "cross",  "checker"};

// One parametric shape family per class plus additive Gaussian pixel noise.
inline Dataset synth_generate(int classes, Index per_class, int h, int w, std::uint64_t seed,
                              double noise_sigma = 0.05) {
    require<ContractError>(classes >= 2 && classes <= 6,
                           "synth_generate: classes must be in [2, 6], got ", classes);
    require<ContractError>(per_class >= 1, "synth_generate: per_class must be >= 1");

    Dataset ds;
    ds.provenance = "synth";
    for (int c = 0; c < classes; ++c) ds.class_names.push_back(kSynthFamilies[static_cast<std::size_t>(c)]);
    ds.images = Tensor<float>(Shape{static_cast<Index>(classes) * per_class, 3, h, w});
    const Index plane = static_cast<Index>(h) * w;

    Xoshiro256ss rng(stage_seed(seed, "synth"));
    std::vector<float> pattern(static_cast<std::size_t>(plane));
    Index cursor = 0;
    for (int c = 0; c < classes; ++c) {
        detail::paint_family(c, h, w, pattern.data());
        for (Index i = 0; i < per_class; ++i) {
            float* base = ds.images.data() + cursor * 3 * plane;
            for (int ch = 0; ch < 3; ++ch)
                for (Index p = 0; p < plane; ++p) {
                    const double noisy = pattern[static_cast<std::size_t>(p)] +
                                         (noise_sigma > 0 ? noise_sigma * rng.normal() : 0.0);
                    base[ch * plane + p] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
                }
            ds.labels.push_back(c);
            ++cursor;
        }
    }
    return ds;
}

}  // namespace kan

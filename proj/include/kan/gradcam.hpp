#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "kan/image.hpp"
#include "kan/model.hpp"

namespace kan {

struct Heatmap {
    int raw_h = 0, raw_w = 0;
    std::vector<float> raw;  // max-normalized, in [0, 1]
    int out_h = 0, out_w = 0;
    std::vector<float> upsampled;  // bilinear, input resolution
    int target_class = 0;
    bool flat = false;  // zero gradient map; raw left identically 0
};

// Gradient-weighted class activation map over the last convolutional feature
// map: channel weights are the spatial means of d(logit_c)/d(features), the
// map is relu(sum_k alpha_k A_k) normalized by its maximum.
template <typename Scalar>
Heatmap gradcam(const Model<Scalar>& model, const Tensor<Scalar>& image, int target_class) {
    require<ShapeError>(image.rank() == 4 && image.dim(0) == 1, "gradcam: expects a 1xCxHxW image, got ",
                        shape_str(image.shape()));
    require<IndexError>(target_class >= 0 && target_class < model.spec.classes, "gradcam: class ",
                        target_class, " out of range [0,", model.spec.classes, ")");

    ForwardTrace<Scalar> trace;
    Tape<Scalar> tape;
    Tensor<Scalar> features;
    {
        TapeScope<Scalar> scope(tape);
        Tensor<Scalar> logits = model.forward(image, /*training=*/false, &trace);
        features = trace.conv_features;
        backward(take(logits, static_cast<Index>(target_class)));
    }
    // Parameter gradients accumulated here are scratch; drop them.
    for (const auto& p : model.params) {
        Tensor<Scalar> handle = p.tensor;
        handle.zero_grad();
    }

    const Index C = features.dim(1), H = features.dim(2), W = features.dim(3);
    Heatmap hm;
    hm.raw_h = static_cast<int>(H);
    hm.raw_w = static_cast<int>(W);
    hm.raw.assign(static_cast<std::size_t>(H * W), 0.0f);
    hm.target_class = target_class;

    const auto& grad = features.grad();
    if (!grad.empty()) {
        for (Index k = 0; k < C; ++k) {
            double alpha = 0;
            for (Index p = 0; p < H * W; ++p) alpha += static_cast<double>(grad[static_cast<std::size_t>(k * H * W + p)]);
            alpha /= static_cast<double>(H * W);
            for (Index p = 0; p < H * W; ++p)
                hm.raw[static_cast<std::size_t>(p)] +=
                    static_cast<float>(alpha * static_cast<double>(features[k * H * W + p]));
        }
    }
    float peak = 0;
    for (auto& v : hm.raw) {
        v = v > 0 ? v : 0;
        peak = std::max(peak, v);
    }
    if (peak < 1e-12f) {
        hm.flat = true;
        std::fill(hm.raw.begin(), hm.raw.end(), 0.0f);
    } else {
        for (auto& v : hm.raw) v /= peak;
    }

    hm.out_h = static_cast<int>(image.dim(2));
    hm.out_w = static_cast<int>(image.dim(3));
    hm.upsampled.resize(static_cast<std::size_t>(hm.out_h) * hm.out_w);
    resize_bilinear_chw(hm.raw.data(), 1, hm.raw_h, hm.raw_w, hm.upsampled.data(), hm.out_h,
                        hm.out_w);
    return hm;
}

// Grayscale source blended with the blue-to-red colormap at 0.5 alpha.
inline void overlay_export(const Heatmap& hm, const Tensor<float>& image, const std::string& path) {
    require<ShapeError>(image.rank() == 4 && image.dim(0) == 1, "overlay_export: expects 1xCxHxW");
    const Index C = image.dim(1), H = image.dim(2), W = image.dim(3);
    require<ShapeError>(static_cast<int>(H) == hm.out_h && static_cast<int>(W) == hm.out_w,
                        "overlay_export: heatmap ", hm.out_h, "x", hm.out_w,
                        " does not match image ", H, "x", W);
    ImageU8 out;
    out.height = static_cast<int>(H);
    out.width = static_cast<int>(W);
    out.channels = 3;
    out.pixels.resize(static_cast<std::size_t>(H * W) * 3);
    for (Index p = 0; p < H * W; ++p) {
        double gray = 0;
        for (Index c = 0; c < C; ++c) gray += image[c * H * W + p];
        gray /= static_cast<double>(C);
        const int g255 = std::clamp(static_cast<int>(std::lround(gray * 255.0)), 0, 255);
        unsigned char rgb[3];
        heat_colormap(static_cast<int>(std::lround(hm.upsampled[static_cast<std::size_t>(p)] * 255.0f)), rgb);
        for (int c = 0; c < 3; ++c)
            out.pixels[static_cast<std::size_t>(p) * 3 + static_cast<std::size_t>(c)] =
                static_cast<unsigned char>(std::clamp(
                    static_cast<int>(std::lround(0.5 * g255 + 0.5 * rgb[c])), 0, 255));
    }
    write_png(path, out);
}

inline void heatmap_csv(const Heatmap& hm, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    require<IoError>(static_cast<bool>(out), "cannot write heatmap CSV: ", path);
    out << "y,x,value\n";
    char buf[64];
    for (int y = 0; y < hm.out_h; ++y)
        for (int x = 0; x < hm.out_w; ++x) {
            std::snprintf(buf, sizeof(buf), "%d,%d,%.9g\n", y, x,
                          hm.upsampled[static_cast<std::size_t>(y) * hm.out_w + x]);
            out << buf;
        }
    require<IoError>(static_cast<bool>(out), "heatmap CSV write failed: ", path);
}

}  // namespace kan

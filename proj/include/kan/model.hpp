#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kan/layers.hpp"
#include "kan/rng.hpp"

namespace kan {

enum class Variant { SBTAYLOR, SBRBF, SBWAVELET };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::SBTAYLOR: return "sbtaylor";
        case Variant::SBRBF: return "sbrbf";
        case Variant::SBWAVELET: return "sbwavelet";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "sbtaylor") return Variant::SBTAYLOR;
    if (s == "sbrbf") return Variant::SBRBF;
    if (s == "sbwavelet") return Variant::SBWAVELET;
    throw ConfigError("unknown variant '" + s + "' (expected sbtaylor, sbrbf or sbwavelet)");
}

struct BackboneConfig {
    int in_channels = 3;
    int conv1_out = 4;
    int conv2_out = 4;
    int kernel = 3;
    int pool = 2;
    int input_h = 64;
    int input_w = 64;
};

struct ModelSpec {
    Variant variant = Variant::SBTAYLOR;
    BackboneConfig backbone;
    int hidden1 = 16;
    int hidden2 = 16;
    int classes = 2;
    int grid_size = 5;
    int spline_order = 3;
    double grid_min = -1.0;
    double grid_max = 1.0;
    int rbf_centers = 8;   // grid_size + spline_order by the BSRBF convention
    int taylor_terms = 5;
    bool taylor_norm = true;

    Index flatten_dim() const {
        return static_cast<Index>(backbone.conv2_out) * (backbone.input_h / 4) *
               (backbone.input_w / 4);
    }

    std::array<Index, 4> kan_dims() const {
        return {flatten_dim(), static_cast<Index>(hidden1), static_cast<Index>(hidden2),
                static_cast<Index>(classes)};
    }

    SplineGrid grid() const { return SplineGrid(grid_min, grid_max, grid_size, spline_order); }

    void validate() const {
        require<ConfigError>(backbone.in_channels >= 1, "model spec: in_channels must be >= 1, got ",
                             backbone.in_channels);
        require<ConfigError>(backbone.conv1_out >= 1, "model spec: conv1_out must be >= 1, got ",
                             backbone.conv1_out);
        require<ConfigError>(backbone.conv2_out >= 1, "model spec: conv2_out must be >= 1, got ",
                             backbone.conv2_out);
        require<ConfigError>(backbone.kernel >= 1 && backbone.kernel % 2 == 1,
                             "model spec: kernel must be odd and >= 1, got ", backbone.kernel);
        require<ConfigError>(backbone.pool == 2, "model spec: pool must be 2, got ", backbone.pool);
        require<ConfigError>(backbone.input_h >= 4 && backbone.input_h % 4 == 0,
                             "model spec: input_h must be a positive multiple of 4, got ",
                             backbone.input_h);
        require<ConfigError>(backbone.input_w >= 4 && backbone.input_w % 4 == 0,
                             "model spec: input_w must be a positive multiple of 4, got ",
                             backbone.input_w);
        require<ConfigError>(hidden1 >= 1, "model spec: hidden1 must be >= 1, got ", hidden1);
        require<ConfigError>(hidden2 >= 1, "model spec: hidden2 must be >= 1, got ", hidden2);
        require<ConfigError>(classes >= 2, "model spec: classes must be >= 2, got ", classes);
        require<ConfigError>(grid_size >= 1, "model spec: grid_size must be >= 1, got ", grid_size);
        require<ConfigError>(spline_order >= 0, "model spec: spline_order must be >= 0, got ",
                             spline_order);
        require<ConfigError>(grid_min < grid_max, "model spec: grid_min must be < grid_max, got ",
                             grid_min, " and ", grid_max);
        require<ConfigError>(rbf_centers >= 2, "model spec: rbf_centers must be >= 2, got ",
                             rbf_centers);
        require<ConfigError>(taylor_terms >= 1, "model spec: taylor_terms must be >= 1, got ",
                             taylor_terms);
    }

    // Fixed-order key=value serialization; the checkpoint and manifest carrier.
    std::string canonical_text() const {
        std::ostringstream os;
        os << "variant=" << variant_name(variant) << '\n'
           << "in_channels=" << backbone.in_channels << '\n'
           << "input_h=" << backbone.input_h << '\n'
           << "input_w=" << backbone.input_w << '\n'
           << "conv1_out=" << backbone.conv1_out << '\n'
           << "conv2_out=" << backbone.conv2_out << '\n'
           << "kernel=" << backbone.kernel << '\n'
           << "pool=" << backbone.pool << '\n'
           << "hidden1=" << hidden1 << '\n'
           << "hidden2=" << hidden2 << '\n'
           << "classes=" << classes << '\n'
           << "grid_size=" << grid_size << '\n'
           << "spline_order=" << spline_order << '\n'
           << "grid_min=" << format_double(grid_min) << '\n'
           << "grid_max=" << format_double(grid_max) << '\n'
           << "rbf_centers=" << rbf_centers << '\n'
           << "taylor_terms=" << taylor_terms << '\n'
           << "taylor_norm=" << (taylor_norm ? 1 : 0) << '\n';
        return os.str();
    }

    static ModelSpec from_text(const std::string& text) {
        std::map<std::string, std::string> kv;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto eq = line.find('=');
            require<FormatError>(eq != std::string::npos, "model spec text: bad line '", line, "'");
            kv[line.substr(0, eq)] = line.substr(eq + 1);
        }
        auto get = [&kv](const char* key) -> const std::string& {
            auto it = kv.find(key);
            require<FormatError>(it != kv.end(), "model spec text: missing key '", key, "'");
            return it->second;
        };
        try {
            return parse_fields(get);
        } catch (const Error&) {
            throw;
        } catch (const std::exception& e) {
            throw FormatError(std::string("model spec text: ") + e.what());
        }
    }

private:
    template <typename Getter>
    static ModelSpec parse_fields(Getter& get) {
        ModelSpec s;
        s.variant = parse_variant(get("variant"));
        s.backbone.in_channels = std::stoi(get("in_channels"));
        s.backbone.input_h = std::stoi(get("input_h"));
        s.backbone.input_w = std::stoi(get("input_w"));
        s.backbone.conv1_out = std::stoi(get("conv1_out"));
        s.backbone.conv2_out = std::stoi(get("conv2_out"));
        s.backbone.kernel = std::stoi(get("kernel"));
        s.backbone.pool = std::stoi(get("pool"));
        s.hidden1 = std::stoi(get("hidden1"));
        s.hidden2 = std::stoi(get("hidden2"));
        s.classes = std::stoi(get("classes"));
        s.grid_size = std::stoi(get("grid_size"));
        s.spline_order = std::stoi(get("spline_order"));
        s.grid_min = std::stod(get("grid_min"));
        s.grid_max = std::stod(get("grid_max"));
        s.rbf_centers = std::stoi(get("rbf_centers"));
        s.taylor_terms = std::stoi(get("taylor_terms"));
        s.taylor_norm = get("taylor_norm") != "0";
        s.validate();
        return s;
    }

    static std::string format_double(double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return buf;
    }
};

template <typename Scalar>
struct ConvLayer {
    Tensor<Scalar> weight;  // [out x in x k x k]
    Tensor<Scalar> bias;    // [out]
};

template <typename Scalar>
struct ForwardTrace {
    Tensor<Scalar> conv_features;  // last conv activation map, pre-pool
};

template <typename Scalar>
struct NamedParam {
    std::string name;
    Tensor<Scalar> tensor;
    bool trainable = true;
};

template <typename Scalar>
class Model {
public:
    ModelSpec spec;
    ConvLayer<Scalar> conv1, conv2;
    std::vector<KanLinearParams<Scalar>> taylor_layers;
    std::vector<SbrbfLayerParams<Scalar>> rbf_layers;
    std::vector<WaveletParams<Scalar>> wavelet_layers;
    std::vector<BatchNormState<Scalar>> wavelet_norms;
    std::vector<NamedParam<Scalar>> params;  // registry in construction order

    Tensor<Scalar> forward(const Tensor<Scalar>& images, bool training = false,
                           ForwardTrace<Scalar>* trace = nullptr) const {
        require<ShapeError>(images.rank() == 4 && images.dim(1) == spec.backbone.in_channels &&
                                images.dim(2) == spec.backbone.input_h &&
                                images.dim(3) == spec.backbone.input_w,
                            "model forward: input ", shape_str(images.shape()),
                            " does not match spec ", spec.backbone.in_channels, "x",
                            spec.backbone.input_h, "x", spec.backbone.input_w);
        const Index B = images.dim(0);
        const Index pad = spec.backbone.kernel / 2;
        Tensor<Scalar> x1 = relu(conv2d(images, conv1.weight, conv1.bias, 1, pad));
        Tensor<Scalar> x2 = maxpool2d(x1, spec.backbone.pool, spec.backbone.pool);
        Tensor<Scalar> x3 = relu(conv2d(x2, conv2.weight, conv2.bias, 1, pad));
        if (trace) trace->conv_features = x3;
        Tensor<Scalar> x4 = maxpool2d(x3, spec.backbone.pool, spec.backbone.pool);
        Tensor<Scalar> h = reshape(x4, Shape{B, spec.flatten_dim()});

        switch (spec.variant) {
            case Variant::SBTAYLOR: {
                if (spec.taylor_norm) h = layer_norm(h);
                h = taylor_expand(spec.taylor_terms, h);
                for (std::size_t i = 0; i < taylor_layers.size(); ++i) {
                    h = kan_linear_forward(taylor_layers[i], h);
                    if (i + 1 < taylor_layers.size()) h = relu(h);
                }
                break;
            }
            case Variant::SBRBF: {
                for (std::size_t i = 0; i < rbf_layers.size(); ++i) {
                    h = sbrbf_layer_forward(rbf_layers[i], h);
                    if (i + 1 < rbf_layers.size()) h = relu(h);
                }
                break;
            }
            case Variant::SBWAVELET: {
                for (std::size_t i = 0; i < wavelet_layers.size(); ++i) {
                    auto& bn = const_cast<Model*>(this)->wavelet_norms[i];
                    h = sbwavelet_layer_forward(wavelet_layers[i], bn, h, training);
                    if (i + 1 < wavelet_layers.size()) h = relu(h);
                }
                break;
            }
        }
        return h;
    }

    void zero_grads() {
        for (auto& p : params) p.tensor.zero_grad();
    }

    const NamedParam<Scalar>* find_param(const std::string& name) const {
        for (const auto& p : params)
            if (p.name == name) return &p;
        return nullptr;
    }
};

namespace detail {

template <typename Scalar>
void kaiming_uniform(Tensor<Scalar>& t, Index fan_in, Xoshiro256ss& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
}

// Spline coefficients fitted to small uniform targets sampled on the knot
// positions; applied to every spline-weight block for comparable starts.
template <typename Scalar>
Tensor<Scalar> init_spline_coeffs(const SplineGrid& grid, Index in_dim, Index out_dim,
                                  Xoshiro256ss& rng) {
    const Index P = static_cast<Index>(grid.knots.size());
    Tensor<Scalar> sx(Shape{P, in_dim});
    for (Index p = 0; p < P; ++p)
        for (Index d = 0; d < in_dim; ++d)
            sx[p * in_dim + d] = static_cast<Scalar>(grid.knots[static_cast<std::size_t>(p)]);
    Tensor<Scalar> sy(Shape{P, in_dim, out_dim});
    for (Index i = 0; i < sy.size(); ++i) sy[i] = static_cast<Scalar>(rng.uniform(-0.1, 0.1));
    return least_squares_fit(grid, sx, sy).coefficients;
}

}  // namespace detail

template <typename Scalar>
Model<Scalar> build_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model<Scalar> m;
    m.spec = spec;
    Xoshiro256ss rng(stage_seed(seed, "model-init"));
    const SplineGrid grid = spec.grid();
    const Index K = grid.basis_count();
    const auto dims = spec.kan_dims();

    auto reg = [&m](const std::string& name, Tensor<Scalar> t, bool trainable = true) {
        t.set_requires_grad(trainable);
        m.params.push_back(NamedParam<Scalar>{name, t, trainable});
    };

    const auto& bb = spec.backbone;
    m.conv1.weight = Tensor<Scalar>(Shape{bb.conv1_out, bb.in_channels, bb.kernel, bb.kernel});
    m.conv1.bias = Tensor<Scalar>(Shape{bb.conv1_out});
    detail::kaiming_uniform(m.conv1.weight, static_cast<Index>(bb.in_channels) * bb.kernel * bb.kernel, rng);
    detail::kaiming_uniform(m.conv1.bias, static_cast<Index>(bb.in_channels) * bb.kernel * bb.kernel, rng);
    reg("conv1.weight", m.conv1.weight);
    reg("conv1.bias", m.conv1.bias);

    m.conv2.weight = Tensor<Scalar>(Shape{bb.conv2_out, bb.conv1_out, bb.kernel, bb.kernel});
    m.conv2.bias = Tensor<Scalar>(Shape{bb.conv2_out});
    detail::kaiming_uniform(m.conv2.weight, static_cast<Index>(bb.conv1_out) * bb.kernel * bb.kernel, rng);
    detail::kaiming_uniform(m.conv2.bias, static_cast<Index>(bb.conv1_out) * bb.kernel * bb.kernel, rng);
    reg("conv2.weight", m.conv2.weight);
    reg("conv2.bias", m.conv2.bias);

    for (int layer = 0; layer < 3; ++layer) {
        const Index in = dims[static_cast<std::size_t>(layer)];
        const Index out = dims[static_cast<std::size_t>(layer) + 1];
        const std::string prefix = "kan" + std::to_string(layer + 1) + ".";
        switch (spec.variant) {
            case Variant::SBTAYLOR: {
                KanLinearParams<Scalar> p;
                p.grid = grid;
                p.in_dim = in;
                p.out_dim = out;
                p.base_weight = Tensor<Scalar>(Shape{out, in});
                detail::kaiming_uniform(p.base_weight, in, rng);
                p.spline_weight = detail::init_spline_coeffs<Scalar>(grid, in, out, rng);
                p.spline_scaler = Tensor<Scalar>(Shape{out, in}, Scalar(1));
                reg(prefix + "base_weight", p.base_weight);
                reg(prefix + "spline_weight", p.spline_weight);
                reg(prefix + "spline_scaler", p.spline_scaler);
                m.taylor_layers.push_back(std::move(p));
                break;
            }
            case Variant::SBRBF: {
                SbrbfLayerParams<Scalar> p;
                p.grid = grid;
                p.in_dim = in;
                p.out_dim = out;
                p.ln_weight = Tensor<Scalar>(Shape{in}, Scalar(1));
                p.ln_bias = Tensor<Scalar>(Shape{in});
                p.base_weight = Tensor<Scalar>(Shape{out, in});
                detail::kaiming_uniform(p.base_weight, in, rng);
                const Index Mc = spec.rbf_centers;
                p.combined_weight = Tensor<Scalar>(Shape{out, in * (K + Mc)});
                detail::kaiming_uniform(p.combined_weight, in * (K + Mc), rng);
                Tensor<Scalar> coeffs = detail::init_spline_coeffs<Scalar>(grid, in, out, rng);
                for (Index o = 0; o < out; ++o)
                    for (Index d = 0; d < in; ++d)
                        for (Index k = 0; k < K; ++k)
                            p.combined_weight[o * in * (K + Mc) + d * K + k] =
                                coeffs[(o * in + d) * K + k];
                p.centers = make_rbf_centers<Scalar>(grid, Mc, &p.beta);
                reg(prefix + "layer_norm.weight", p.ln_weight);
                reg(prefix + "layer_norm.bias", p.ln_bias);
                reg(prefix + "base_weight", p.base_weight);
                reg(prefix + "combined_weight", p.combined_weight);
                m.rbf_layers.push_back(std::move(p));
                break;
            }
            case Variant::SBWAVELET: {
                WaveletParams<Scalar> p;
                p.grid = grid;
                p.in_dim = in;
                p.out_dim = out;
                // softplus(rho) + floor == 1
                const double rho = std::log(std::exp(1.0 - kWaveletScaleFloor) - 1.0);
                p.scale_raw = Tensor<Scalar>(Shape{in}, static_cast<Scalar>(rho));
                p.translation = Tensor<Scalar>(Shape{in});
                p.wavelet_weight = Tensor<Scalar>(Shape{out, in});
                detail::kaiming_uniform(p.wavelet_weight, in, rng);
                p.spline_weight = detail::init_spline_coeffs<Scalar>(grid, in, out, rng);
                p.combine_logits = Tensor<Scalar>(Shape{2});
                BatchNormState<Scalar> bn;
                bn.weight = Tensor<Scalar>(Shape{out}, Scalar(1));
                bn.bias = Tensor<Scalar>(Shape{out});
                bn.running_mean = Tensor<Scalar>(Shape{out});
                bn.running_var = Tensor<Scalar>(Shape{out}, Scalar(1));
                reg(prefix + "scale_raw", p.scale_raw);
                reg(prefix + "translation", p.translation);
                reg(prefix + "wavelet_weight", p.wavelet_weight);
                reg(prefix + "spline_weight", p.spline_weight);
                reg(prefix + "combine_logits", p.combine_logits);
                reg(prefix + "batch_norm.weight", bn.weight);
                reg(prefix + "batch_norm.bias", bn.bias);
                reg(prefix + "batch_norm.running_mean", bn.running_mean, false);
                reg(prefix + "batch_norm.running_var", bn.running_var, false);
                m.wavelet_layers.push_back(std::move(p));
                m.wavelet_norms.push_back(std::move(bn));
                break;
            }
        }
    }
    return m;
}

struct LayerCount {
    std::string name;
    Index trainable = 0;
    Index non_trainable = 0;
};

struct ParameterCount {
    Index trainable = 0;
    Index non_trainable = 0;
    Index total = 0;
    std::vector<LayerCount> per_layer;
};

template <typename Scalar>
ParameterCount parameter_count(const Model<Scalar>& m) {
    ParameterCount pc;
    for (const auto& p : m.params) {
        const std::string layer = p.name.substr(0, p.name.find('.'));
        if (pc.per_layer.empty() || pc.per_layer.back().name != layer)
            pc.per_layer.push_back(LayerCount{layer, 0, 0});
        auto& row = pc.per_layer.back();
        if (p.trainable) {
            row.trainable += p.tensor.size();
            pc.trainable += p.tensor.size();
        } else {
            row.non_trainable += p.tensor.size();
            pc.non_trainable += p.tensor.size();
        }
    }
    pc.total = pc.trainable + pc.non_trainable;
    return pc;
}

}  // namespace kan

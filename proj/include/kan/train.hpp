#pragma once

#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "kan/data.hpp"
#include "kan/metrics.hpp"
#include "kan/model.hpp"

namespace kan {

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 32;
    double weight_decay = 1e-4;  // L2
    int epochs = 50;
    std::uint64_t seed = 0;
    bool shuffle = true;
    int early_stop_patience = 0;  // 0 disables; counts epochs without val-loss improvement
};

struct TrainReport {
    std::vector<double> train_loss, train_acc, val_loss, val_acc;
    int best_epoch = 0;  // 0-based index into the series
    double wall_seconds = 0;

    int epochs_run() const { return static_cast<int>(train_loss.size()); }

    std::string to_csv() const {
        std::string out = "epoch,train_loss,train_acc,val_loss,val_acc\n";
        char buf[160];
        for (std::size_t e = 0; e < train_loss.size(); ++e) {
            std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g,%.10g\n", e + 1, train_loss[e],
                          train_acc[e], val_loss[e], val_acc[e]);
            out += buf;
        }
        return out;
    }
};

template <typename Scalar>
struct EvalResult {
    double loss = 0;
    ConfusionMatrix cm{1};
    Tensor<Scalar> scores;  // [N x C] softmax probabilities
};

namespace detail {

template <typename Scalar>
int argmax_row(const Scalar* row, Index n) {
    int best = 0;
    for (Index c = 1; c < n; ++c)
        if (row[c] > row[best]) best = static_cast<int>(c);
    return best;
}

template <typename Scalar>
Tensor<Scalar> gather_batch(const Dataset& ds, const std::vector<Index>& order, Index from,
                            Index count, std::vector<int>* labels) {
    const Index per = ds.channels() * ds.height() * ds.width();
    Tensor<Scalar> batch(Shape{count, ds.channels(), ds.height(), ds.width()});
    for (Index i = 0; i < count; ++i) {
        const Index src = order[static_cast<std::size_t>(from + i)];
        const float* sp = ds.images.data() + src * per;
        Scalar* dp = batch.data() + i * per;
        for (Index p = 0; p < per; ++p) dp[p] = static_cast<Scalar>(sp[p]);
        if (labels) labels->push_back(ds.labels[static_cast<std::size_t>(src)]);
    }
    return batch;
}

}  // namespace detail

// Inference pass over the whole dataset: mean loss, confusion matrix and the
// softmax scores, deterministic and side-effect free.
template <typename Scalar>
EvalResult<Scalar> evaluate(const Model<Scalar>& model, const Dataset& ds, int batch_size = 32) {
    require<ContractError>(ds.size() > 0, "evaluate: empty dataset");
    require<ContractError>(batch_size >= 1, "evaluate: batch_size must be >= 1");
    ds.validate();
    require<Error>(ds.classes() == model.spec.classes, "evaluate: dataset has ", ds.classes(),
                   " classes but model expects ", model.spec.classes);

    std::vector<Index> order(static_cast<std::size_t>(ds.size()));
    std::iota(order.begin(), order.end(), 0);

    EvalResult<Scalar> result;
    result.cm = ConfusionMatrix(model.spec.classes);
    result.scores = Tensor<Scalar>(Shape{ds.size(), static_cast<Index>(model.spec.classes)});
    double total_loss = 0;
    for (Index at = 0; at < ds.size(); at += batch_size) {
        const Index count = std::min<Index>(batch_size, ds.size() - at);
        std::vector<int> labels;
        Tensor<Scalar> batch = detail::gather_batch<Scalar>(ds, order, at, count, &labels);
        Tensor<Scalar> logits = model.forward(batch, /*training=*/false);
        total_loss += static_cast<double>(cross_entropy(logits, labels).item()) * count;
        Tensor<Scalar> probs = softmax_rows(logits);
        const Index C = model.spec.classes;
        for (Index i = 0; i < count; ++i) {
            const int pred = detail::argmax_row(logits.data() + i * C, C);
            result.cm.add(labels[static_cast<std::size_t>(i)], pred);
            std::copy_n(probs.data() + i * C, C, result.scores.data() + (at + i) * C);
        }
    }
    result.loss = total_loss / static_cast<double>(ds.size());
    return result;
}

namespace detail {

template <typename Scalar>
std::string param_norm_snapshot(const Model<Scalar>& model) {
    std::ostringstream os;
    for (const auto& p : model.params) {
        double norm = 0;
        for (Index i = 0; i < p.tensor.size(); ++i)
            norm += static_cast<double>(p.tensor[i]) * static_cast<double>(p.tensor[i]);
        os << ' ' << p.name << "=" << std::sqrt(norm);
    }
    return os.str();
}

}  // namespace detail

// Plain SGD: theta <- theta - lr * (grad + weight_decay * theta). Keeps the
// best-validation-accuracy weights (ties resolve to the earlier epoch) and
// restores them before returning.
template <typename Scalar>
TrainReport train(Model<Scalar>& model, const Dataset& train_ds, const Dataset& val_ds,
                  const TrainConfig& cfg) {
    require<ContractError>(train_ds.size() > 0 && val_ds.size() > 0, "train: datasets must be non-empty");
    train_ds.validate();
    val_ds.validate();
    require<ContractError>(cfg.lr >= 0, "train: lr must be >= 0");
    require<ContractError>(cfg.batch_size >= 1, "train: batch_size must be >= 1");
    if (model.spec.variant == Variant::SBWAVELET)
        require<ContractError>(cfg.batch_size >= 2,
                               "train: batch-norm training requires batch_size >= 2");

    const auto t0 = std::chrono::steady_clock::now();
    TrainReport report;
    std::vector<std::vector<Scalar>> best_params;
    double best_val_acc = -1;
    int epochs_since_best_loss = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();

    std::vector<Index> order(static_cast<std::size_t>(train_ds.size()));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.shuffle) {
            std::iota(order.begin(), order.end(), 0);
            Xoshiro256ss rng(stage_seed(cfg.seed, "shuffle-epoch-" + std::to_string(epoch)));
            fisher_yates(order, rng);
        }
        double epoch_loss = 0;
        Index correct = 0, seen = 0;
        for (Index at = 0; at < train_ds.size(); at += cfg.batch_size) {
            const Index count = std::min<Index>(cfg.batch_size, train_ds.size() - at);
            if (model.spec.variant == Variant::SBWAVELET && count < 2) break;  // leftover singleton
            std::vector<int> labels;
            Tensor<Scalar> batch = detail::gather_batch<Scalar>(train_ds, order, at, count, &labels);

            Tape<Scalar> tape;
            double batch_loss;
            {
                TapeScope<Scalar> scope(tape);
                Tensor<Scalar> logits = model.forward(batch, /*training=*/true);
                Tensor<Scalar> loss = cross_entropy(logits, labels);
                batch_loss = static_cast<double>(loss.item());
                if (!std::isfinite(batch_loss))
                    throw Error(format_msg("train: non-finite loss at epoch ", epoch + 1, " batch ",
                                           at / cfg.batch_size + 1, "; parameter norms:",
                                           detail::param_norm_snapshot(model)));
                const Index C = model.spec.classes;
                for (Index i = 0; i < count; ++i)
                    if (detail::argmax_row(logits.data() + i * C, C) == labels[static_cast<std::size_t>(i)])
                        ++correct;
                backward(loss);
            }
            epoch_loss += batch_loss * static_cast<double>(count);
            seen += count;

            const Scalar lr = static_cast<Scalar>(cfg.lr);
            const Scalar wd = static_cast<Scalar>(cfg.weight_decay);
            for (auto& p : model.params) {
                if (!p.trainable) continue;
                Scalar* theta = p.tensor.data();
                if (p.tensor.has_grad()) {
                    const auto& g = p.tensor.grad();
                    for (Index i = 0; i < p.tensor.size(); ++i)
                        theta[i] -= lr * (g[static_cast<std::size_t>(i)] + wd * theta[i]);
                } else if (wd != Scalar(0)) {
                    for (Index i = 0; i < p.tensor.size(); ++i) theta[i] -= lr * wd * theta[i];
                }
            }
            model.zero_grads();
        }
        report.train_loss.push_back(epoch_loss / static_cast<double>(seen));
        report.train_acc.push_back(static_cast<double>(correct) / static_cast<double>(seen));

        EvalResult<Scalar> val = evaluate(model, val_ds, cfg.batch_size);
        const double val_acc = static_cast<double>(val.cm.trace()) / static_cast<double>(val.cm.total());
        report.val_loss.push_back(val.loss);
        report.val_acc.push_back(val_acc);

        if (val_acc > best_val_acc) {
            best_val_acc = val_acc;
            report.best_epoch = epoch;
            best_params.clear();
            for (const auto& p : model.params) best_params.push_back(p.tensor.values());
        }
        if (cfg.early_stop_patience > 0) {
            if (val.loss < best_val_loss) {
                best_val_loss = val.loss;
                epochs_since_best_loss = 0;
            } else if (++epochs_since_best_loss >= cfg.early_stop_patience) {
                break;
            }
        }
    }

    if (!best_params.empty())
        for (std::size_t i = 0; i < model.params.size(); ++i)
            model.params[i].tensor.values() = best_params[i];

    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, length-prefixed spec text, then per-tensor records
// (name, rank, dims as u64 LE, float32 LE values).
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'K', 'A', 'N', 'C', 'K', 'P', 'T', '1'};

namespace detail {

inline void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& in, const std::string& path) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    require<FormatError>(static_cast<bool>(in), "checkpoint truncated at offset ",
                         static_cast<long long>(in.tellg()), ": ", path);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

template <typename Scalar>
void save_checkpoint(const Model<Scalar>& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require<IoError>(static_cast<bool>(out), "cannot write checkpoint: ", path);
    out.write(kCheckpointMagic, 8);
    const std::string spec = model.spec.canonical_text();
    detail::write_u64(out, spec.size());
    out.write(spec.data(), static_cast<std::streamsize>(spec.size()));
    detail::write_u64(out, model.params.size());
    for (const auto& p : model.params) {
        detail::write_u64(out, p.name.size());
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::write_u64(out, p.tensor.shape().size());
        for (Index d : p.tensor.shape()) detail::write_u64(out, static_cast<std::uint64_t>(d));
        for (Index i = 0; i < p.tensor.size(); ++i) {
            const float v = static_cast<float>(p.tensor[i]);
            static_assert(sizeof(float) == 4);
            out.write(reinterpret_cast<const char*>(&v), 4);
        }
    }
    require<IoError>(static_cast<bool>(out), "checkpoint write failed: ", path);
}

inline Model<float> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require<IoError>(static_cast<bool>(in), "cannot open checkpoint: ", path);
    char magic[8];
    in.read(magic, 8);
    require<FormatError>(static_cast<bool>(in) && std::memcmp(magic, kCheckpointMagic, 8) == 0,
                         "bad checkpoint magic at offset 0: ", path);
    const std::uint64_t spec_len = detail::read_u64(in, path);
    require<FormatError>(spec_len < (1u << 20), "implausible spec length ", spec_len, ": ", path);
    std::string spec_text(spec_len, '\0');
    in.read(spec_text.data(), static_cast<std::streamsize>(spec_len));
    require<FormatError>(static_cast<bool>(in), "checkpoint truncated in spec text: ", path);

    Model<float> model = build_model<float>(ModelSpec::from_text(spec_text), /*seed=*/0);
    const std::uint64_t count = detail::read_u64(in, path);
    require<FormatError>(count == model.params.size(), "checkpoint has ", count,
                         " tensors but spec builds ", model.params.size(), ": ", path);
    for (auto& p : model.params) {
        const std::uint64_t name_len = detail::read_u64(in, path);
        require<FormatError>(name_len < 4096, "implausible tensor name length: ", path);
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        require<FormatError>(static_cast<bool>(in) && name == p.name, "checkpoint tensor '", name,
                             "' does not match expected '", p.name, "' at offset ",
                             static_cast<long long>(in.tellg()), ": ", path);
        const std::uint64_t rank = detail::read_u64(in, path);
        require<FormatError>(rank == p.tensor.shape().size(), "rank mismatch for '", name, "': ",
                             path);
        for (Index d : p.tensor.shape()) {
            const std::uint64_t dim = detail::read_u64(in, path);
            require<FormatError>(dim == static_cast<std::uint64_t>(d), "shape mismatch for '", name,
                                 "' at offset ", static_cast<long long>(in.tellg()), ": ", path);
        }
        in.read(reinterpret_cast<char*>(p.tensor.data()),
                static_cast<std::streamsize>(p.tensor.size() * 4));
        require<FormatError>(static_cast<bool>(in), "checkpoint truncated in tensor '", name,
                             "': ", path);
    }
    return model;
}

}  // namespace kan

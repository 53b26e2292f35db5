#include <CLI11.hpp>

#include <atomic>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "kan/config.hpp"
#include "kan/data.hpp"
#include "kan/gradcam.hpp"
#include "kan/metrics.hpp"
#include "kan/model.hpp"
#include "kan/sha1.hpp"
#include "kan/train.hpp"

namespace fs = std::filesystem;
using namespace kan;

namespace {

struct LoadedData {
    Dataset ds;
    SplitAssignment split;
};

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    require<IoError>(static_cast<bool>(out), "cannot write: ", path);
    out << content;
    require<IoError>(static_cast<bool>(out), "write failed: ", path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require<IoError>(static_cast<bool>(in), "cannot open: ", path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void require_readable(const std::string& path, const char* what) {
    require<IoError>(fs::exists(path), what, " not found: ", path);
}

// Combines one dataset out of pre-split IDX pairs; split indices follow the
// concatenation order.
LoadedData load_presplit_idx(const RunConfig& cfg) {
    LoadedData out;
    std::array<std::pair<std::string, std::string>, 3> pairs = {
        std::make_pair(cfg.get_path("data.train_images"), cfg.get_path("data.train_labels")),
        std::make_pair(cfg.get_path("data.val_images"), cfg.get_path("data.val_labels")),
        std::make_pair(cfg.get_path("data.test_images"), cfg.get_path("data.test_labels"))};
    for (const auto& [im, lb] : pairs) {
        require_readable(im, "IDX images");
        require_readable(lb, "IDX labels");
    }
    std::vector<Dataset> parts;
    for (const auto& [im, lb] : pairs) parts.push_back(load_idx_pair(im, lb));
    int classes = 0;
    for (const auto& p : parts) classes = std::max(classes, p.classes());
    Index total = 0;
    for (const auto& p : parts) total += p.size();

    Dataset& ds = out.ds;
    ds.provenance = "idx3:" + pairs[0].first;
    ds.images = Tensor<float>(Shape{total, parts[0].channels(), parts[0].height(), parts[0].width()});
    for (int c = 0; c < classes; ++c) ds.class_names.push_back("class_" + std::to_string(c));
    const Index per = parts[0].channels() * parts[0].height() * parts[0].width();
    Index cursor = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        require<FormatError>(parts[k].height() == parts[0].height() &&
                                 parts[k].width() == parts[0].width(),
                             "pre-split IDX parts disagree on image size");
        std::vector<Index>* dest = k == 0 ? &out.split.train : (k == 1 ? &out.split.val : &out.split.test);
        for (Index i = 0; i < parts[k].size(); ++i) {
            std::copy_n(parts[k].images.data() + i * per, per, ds.images.data() + cursor * per);
            ds.labels.push_back(parts[k].labels[static_cast<std::size_t>(i)]);
            dest->push_back(cursor);
            ++cursor;
        }
    }
    return out;
}

LoadedData load_data(const RunConfig& cfg, std::uint64_t seed) {
    const std::string kind = cfg.get("data.kind", "synth");
    LoadedData out;
    if (kind == "synth") {
        const int classes = static_cast<int>(cfg.get_int("data.classes", 2));
        const Index per_class = cfg.get_int("data.per_class", 428);
        const int hw = static_cast<int>(cfg.get_int("data.hw", 16));
        const double sigma = cfg.get_double("data.noise_sigma", 0.05);
        out.ds = synth_generate(classes, per_class, hw, hw, stage_seed(seed, "synth-data"), sigma);
    } else if (kind == "image_dir") {
        const std::string root = cfg.get_path("data.path");
        require<ConfigError>(!root.empty(), "data.kind=image_dir requires data.path");
        require_readable(root, "dataset directory");
        out.ds = load_image_directory(root, static_cast<int>(cfg.get_int("model.input_h", 64)),
                                      static_cast<int>(cfg.get_int("model.input_w", 64)));
    } else if (kind == "idx") {
        if (cfg.has("data.train_images")) return load_presplit_idx(cfg);
        const std::string im = cfg.get_path("data.images");
        const std::string lb = cfg.get_path("data.labels");
        require<ConfigError>(!im.empty() && !lb.empty(),
                             "data.kind=idx requires data.images and data.labels");
        require_readable(im, "IDX images");
        require_readable(lb, "IDX labels");
        out.ds = load_idx_pair(im, lb);
    } else {
        throw ConfigError("unknown data.kind '" + kind + "'");
    }
    out.split = stratified_split(out.ds, {0.70, 0.20, 0.10}, stage_seed(seed, "split"));
    return out;
}

Dataset fit_to_model(const Dataset& ds, const ModelSpec& spec) {
    return resize_dataset(ds, spec.backbone.input_h, spec.backbone.input_w);
}

std::string dataset_input_hash(const RunConfig& cfg) {
    const std::string kind = cfg.get("data.kind", "synth");
    Sha1 sha;
    sha.update("kind=" + kind + "\n");
    if (kind == "synth") {
        sha.update(cfg.get("data.classes", "2") + "," + cfg.get("data.per_class", "428") + "," +
                   cfg.get("data.hw", "16") + "," + cfg.get("data.noise_sigma", "0.05"));
    } else if (kind == "image_dir") {
        std::vector<std::string> files;
        for (const auto& e : fs::recursive_directory_iterator(cfg.get_path("data.path")))
            if (e.is_regular_file()) files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) sha.update(f + ":" + git_blob_hash(read_text_file(f)) + "\n");
    } else {
        for (const char* key : {"data.images", "data.labels", "data.train_images",
                                "data.train_labels", "data.val_images", "data.val_labels",
                                "data.test_images", "data.test_labels"}) {
            if (!cfg.has(key)) continue;
            const std::string f = cfg.get_path(key);
            sha.update(std::string(key) + ":" + git_blob_hash(read_text_file(f)) + "\n");
        }
    }
    return sha.hex_digest();
}

void write_manifest(const std::string& out_dir, const RunConfig& cfg, const std::string& command,
                    std::uint64_t seed) {
    std::ostringstream os;
    os << "command=" << command << "\n";
    os << "seed=" << seed << "\n";
    os << "config_blob=" << git_blob_hash(cfg.source_text()) << "\n";
    os << "inputs_hash=" << dataset_input_hash(cfg) << "\n";
    const std::time_t now = std::time(nullptr);
    char stamp[64];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    os << "timestamp=" << stamp << "\n";
    os << "--- resolved config ---\n" << cfg.snapshot();
    write_text_file((fs::path(out_dir) / "manifest.txt").string(), os.str());
}

void write_roc_csvs(const std::string& out_dir, const RocResult& roc) {
    auto dump = [&](const std::string& name, const RocCurve& c) {
        std::ostringstream os;
        os << "fpr,tpr,threshold\n";
        char buf[96];
        for (std::size_t i = 0; i < c.fpr.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%.10g\n", c.fpr[i], c.tpr[i],
                          c.threshold[i]);
            os << buf;
        }
        write_text_file((fs::path(out_dir) / name).string(), os.str());
    };
    for (std::size_t k = 0; k < roc.per_class.size(); ++k)
        if (roc.per_class[k]) dump("roc_class_" + std::to_string(k) + ".csv", *roc.per_class[k]);
    if (roc.micro) dump("roc_micro.csv", *roc.micro);
}

struct SplitSets {
    Dataset train, val, test;
};

SplitSets materialize_splits(const RunConfig& cfg, const LoadedData& data, const ModelSpec& spec,
                             std::uint64_t seed) {
    SplitSets sets;
    Dataset train_raw = subset(data.ds, data.split.train);
    const Index balance_target = cfg.get_int("data.balance_per_class", 0);
    if (balance_target > 0)
        train_raw = augment_balance(train_raw, balance_target, stage_seed(seed, "balance"));
    sets.train = fit_to_model(train_raw, spec);
    sets.val = fit_to_model(subset(data.ds, data.split.val), spec);
    sets.test = fit_to_model(subset(data.ds, data.split.test), spec);
    return sets;
}

int cmd_train(const RunConfig& cfg, std::uint64_t seed, const std::string& out_dir) {
    fs::create_directories(out_dir);
    LoadedData data = load_data(cfg, seed);
    const ModelSpec spec = cfg.model_spec(data.ds.classes());
    SplitSets sets = materialize_splits(cfg, data, spec, seed);

    Model<float> model = build_model<float>(spec, seed);
    const TrainConfig tcfg = cfg.train_config(seed);
    TrainReport report = train(model, sets.train, sets.val, tcfg);
    EvalResult<float> test = evaluate(model, sets.test, tcfg.batch_size);
    RocResult roc = roc_auc(test.scores, sets.test.labels);
    MetricsReport metrics = compute_metrics_report(test.cm, &roc);

    save_checkpoint(model, (fs::path(out_dir) / "checkpoint.kan").string());
    write_text_file((fs::path(out_dir) / "metrics.csv").string(), metrics.to_csv());
    write_text_file((fs::path(out_dir) / "train_log.csv").string(), report.to_csv());
    write_roc_csvs(out_dir, roc);
    write_manifest(out_dir, cfg, "train", seed);

    std::cout << "trained " << variant_name(spec.variant) << " for " << report.epochs_run()
              << " epochs (best epoch " << report.best_epoch + 1 << ", "
              << MetricsReport::fmt(report.wall_seconds) << " s)\n";
    std::cout << "test metrics:\n" << metrics.to_table();
    std::cout << "artifacts in " << out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const RunConfig* cfg, const std::string& data_dir,
             const std::string& split_name, std::uint64_t seed, const std::string& out_dir,
             bool weighted) {
    require_readable(checkpoint, "checkpoint");
    Model<float> model = load_checkpoint(checkpoint);
    fs::create_directories(out_dir);

    Dataset eval_ds;
    if (!data_dir.empty()) {
        require_readable(data_dir, "dataset directory");
        eval_ds = load_image_directory(data_dir, model.spec.backbone.input_h,
                                       model.spec.backbone.input_w);
    } else {
        require<ConfigError>(cfg != nullptr, "eval needs --data or --config");
        LoadedData data = load_data(*cfg, seed);
        if (split_name == "all") {
            eval_ds = fit_to_model(data.ds, model.spec);
        } else {
            const std::vector<Index>* idx = split_name == "train" ? &data.split.train
                                            : split_name == "val" ? &data.split.val
                                                                  : &data.split.test;
            eval_ds = fit_to_model(subset(data.ds, *idx), model.spec);
        }
    }
    require<Error>(eval_ds.classes() == model.spec.classes, "class count mismatch: dataset has ",
                   eval_ds.classes(), " classes, checkpoint expects ", model.spec.classes);

    EvalResult<float> res = evaluate(model, eval_ds);
    RocResult roc = roc_auc(res.scores, eval_ds.labels);
    MetricsReport metrics = compute_metrics_report(res.cm, &roc);
    write_text_file((fs::path(out_dir) / "metrics.csv").string(), metrics.to_csv(weighted));
    write_roc_csvs(out_dir, roc);

    std::cout << "evaluated " << eval_ds.size() << " samples (" << split_name << ")\n"
              << metrics.to_table();
    return 0;
}

int cmd_reduce_sweep(const RunConfig& cfg, std::uint64_t seed, const std::string& out_dir,
                     const std::string& fractions_arg, int jobs) {
    fs::create_directories(out_dir);
    std::vector<double> fractions;
    if (fractions_arg.empty()) {
        for (int pct = 100; pct >= 20; pct -= 5) fractions.push_back(pct / 100.0);
    } else {
        std::istringstream is(fractions_arg);
        std::string tok;
        while (std::getline(is, tok, ','))
            if (!tok.empty()) fractions.push_back(std::stod(tok));
    }

    LoadedData data = load_data(cfg, seed);
    const ModelSpec spec = cfg.model_spec(data.ds.classes());
    SplitSets sets = materialize_splits(cfg, data, spec, seed);

    if (const char* cap = std::getenv("KANLAB_THREADS"))
        jobs = std::min(jobs, std::max(1, std::atoi(cap)));
    jobs = std::max(1, std::min<int>(jobs, static_cast<int>(fractions.size())));

    struct Row {
        bool ok = false;
        std::string text;
        std::string error;
    };
    std::vector<Row> rows(fractions.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&]() {
        for (;;) {
            const std::size_t k = next.fetch_add(1);
            if (k >= fractions.size()) return;
            const double p = fractions[k];
            char tag[32];
            std::snprintf(tag, sizeof(tag), "%.2f", p);
            try {
                SplitAssignment full;
                full.train.resize(static_cast<std::size_t>(sets.train.size()));
                std::iota(full.train.begin(), full.train.end(), 0);
                ReductionSpec rspec{p, stage_seed(seed, std::string("reduce-") + tag)};
                SplitAssignment reduced = reduce_training_set(full, sets.train.labels, rspec);
                Dataset train_p = subset(sets.train, reduced.train);

                Model<float> model = build_model<float>(spec, stage_seed(seed, std::string("init-") + tag));
                TrainConfig tcfg = cfg.train_config(stage_seed(seed, std::string("train-") + tag));
                TrainReport rep = train(model, train_p, sets.val, tcfg);
                (void)rep;
                EvalResult<float> test = evaluate(model, sets.test, tcfg.batch_size);
                BasicMetrics bm = basic_metrics(test.cm);
                char line[256];
                std::snprintf(line, sizeof(line), "%.2f,%lld,%.10g,%.10g,%.10g,%.10g\n", p,
                              static_cast<long long>(train_p.size()), bm.accuracy,
                              bm.macro_precision, bm.macro_recall, bm.macro_f1);
                rows[k].ok = true;
                rows[k].text = line;
            } catch (const std::exception& e) {
                rows[k].error = e.what();
            }
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    std::string csv = "fraction,n_train,accuracy,precision,recall,f1\n";
    bool any_failed = false;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        if (rows[k].ok) {
            csv += rows[k].text;
        } else {
            any_failed = true;
            std::cerr << "fraction " << fractions[k] << " failed: " << rows[k].error << "\n";
        }
    }
    write_text_file((fs::path(out_dir) / "sweep.csv").string(), csv);
    write_manifest(out_dir, cfg, "reduce-sweep", seed);
    std::cout << csv;
    return any_failed ? 1 : 0;
}

int cmd_gradcam(const std::string& checkpoint, const std::string& image_path, int target_class,
                const std::string& out_png) {
    require_readable(checkpoint, "checkpoint");
    require_readable(image_path, "image");
    Model<float> model = load_checkpoint(checkpoint);

    const ImageU8 raw = decode_image_file(image_path);
    std::vector<float> chw(static_cast<std::size_t>(3) * raw.height * raw.width);
    {
        // reuse the dataset carriage rules: [0,1] floats, gray replicated
        for (int c = 0; c < 3; ++c) {
            const int sc = raw.channels == 3 ? c : 0;
            for (int y = 0; y < raw.height; ++y)
                for (int x = 0; x < raw.width; ++x)
                    chw[(static_cast<std::size_t>(c) * raw.height + y) * raw.width + x] =
                        raw.pixels[raw.idx(y, x, sc)] / 255.0f;
        }
    }
    const int H = model.spec.backbone.input_h, W = model.spec.backbone.input_w;
    Tensor<float> image(Shape{1, 3, H, W});
    resize_bilinear_chw(chw.data(), 3, raw.height, raw.width, image.data(), H, W);

    if (target_class < 0) {
        Tensor<float> logits = model.forward(image, false);
        target_class = 0;
        for (Index c = 1; c < logits.size(); ++c)
            if (logits[c] > logits[target_class]) target_class = static_cast<int>(c);
    }
    Heatmap hm = gradcam(model, image, target_class);
    overlay_export(hm, image, out_png);
    const std::string csv_path = out_png + ".csv";
    heatmap_csv(hm, csv_path);
    std::cout << "class " << hm.target_class << (hm.flat ? " (flat map)" : "") << " -> " << out_png
              << ", " << csv_path << "\n";
    return 0;
}

int cmd_info(const std::string& checkpoint, const RunConfig* cfg, std::uint64_t seed) {
    ModelSpec spec;
    ParameterCount pc;
    if (!checkpoint.empty()) {
        require_readable(checkpoint, "checkpoint");
        Model<float> model = load_checkpoint(checkpoint);
        spec = model.spec;
        pc = parameter_count(model);
    } else {
        require<ConfigError>(cfg != nullptr, "info needs --checkpoint or --config");
        int classes = static_cast<int>(cfg->get_int("data.classes", 0));
        if (classes == 0) {
            LoadedData data = load_data(*cfg, seed);
            classes = data.ds.classes();
        }
        spec = cfg->model_spec(classes);
        Model<float> model = build_model<float>(spec, seed);
        pc = parameter_count(model);
    }
    std::cout << "variant: " << variant_name(spec.variant) << "\n";
    std::cout << "input: " << spec.backbone.in_channels << "x" << spec.backbone.input_h << "x"
              << spec.backbone.input_w << ", flatten " << spec.flatten_dim() << ", kan dims ["
              << spec.flatten_dim() << ", " << spec.hidden1 << ", " << spec.hidden2 << ", "
              << spec.classes << "]\n";
    std::cout << "layer breakdown (trainable / non-trainable):\n";
    for (const auto& row : pc.per_layer)
        std::cout << "  " << row.name << ": " << row.trainable << " / " << row.non_trainable
                  << "\n";
    std::cout << "trainable: " << pc.trainable << "\n";
    std::cout << "non_trainable: " << pc.non_trainable << "\n";
    std::cout << "total: " << pc.total << "\n";
    return 0;
}

int cmd_synth(int classes, long per_class, int hw, std::uint64_t seed, const std::string& out_dir) {
    fs::create_directories(out_dir);
    Dataset ds = synth_generate(classes, per_class, hw, hw, stage_seed(seed, "synth-data"));
    save_idx_pair(ds, (fs::path(out_dir) / "images.idx").string(),
                  (fs::path(out_dir) / "labels.idx").string());
    std::string names;
    for (const auto& n : ds.class_names) names += n + "\n";
    write_text_file((fs::path(out_dir) / "classes.txt").string(), names);
    std::cout << "wrote " << ds.size() << " images (" << classes << " classes, " << hw << "x" << hw
              << ") to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kanlab: spline-based KAN training and analysis"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "runs/latest", data_dir, checkpoint, image_path, out_png;
    std::string fractions, split_name = "test";
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    bool seed_given = false;
    int jobs = 1, target_class = -1, synth_classes = 2, synth_hw = 16;
    long synth_per_class = 428;
    bool weighted = false;

    app.add_option("--config", config_path, "key=value config file")->envname("KANLAB_CONFIG");
    app.add_option("--seed", seed, "master seed (overrides config)")->each([&](const std::string&) {
        seed_given = true;
    });
    app.add_option("--out-dir", out_dir, "output directory");
    app.add_option("--jobs", jobs, "parallel workers for sweeps");
    app.add_option("--set", overrides, "config override key=value (repeatable)");

    auto* train_cmd = app.add_subcommand("train", "split, train, evaluate, write artifacts");
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--data", data_dir, "class-per-directory image root");
    eval_cmd->add_option("--split", split_name, "train|val|test|all (with --config)");
    eval_cmd->add_flag("--weighted", weighted, "report weighted instead of macro averages");
    auto* sweep_cmd = app.add_subcommand("reduce-sweep", "retrain across training-set fractions");
    sweep_cmd->add_option("--fractions", fractions, "comma list, default 1.00,0.95,...,0.20");
    auto* gradcam_cmd = app.add_subcommand("gradcam", "class activation heatmap for one image");
    gradcam_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    gradcam_cmd->add_option("--image", image_path, "input image (PNG/JPEG/BMP)")->required();
    gradcam_cmd->add_option("--class", target_class, "target class (default: argmax)");
    gradcam_cmd->add_option("--out", out_png, "output PNG path")->required();
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic IDX dataset");
    synth_cmd->add_option("--classes", synth_classes, "number of classes (2-6)");
    synth_cmd->add_option("--per-class", synth_per_class, "samples per class");
    synth_cmd->add_option("--hw", synth_hw, "image height/width");
    auto* info_cmd = app.add_subcommand("info", "print model structure and parameter counts");
    info_cmd->add_option("--checkpoint", checkpoint, "checkpoint file");

    CLI11_PARSE(app, argc, argv);

    try {
        std::optional<RunConfig> cfg;
        if (!config_path.empty()) {
            cfg = RunConfig::from_file(config_path);
            for (const auto& o : overrides) cfg->apply_override(o);
        }
        if (!seed_given && cfg)
            seed = static_cast<std::uint64_t>(cfg->get_int("seed", 0));
        if (cfg && cfg->has("out_dir") && out_dir == "runs/latest") out_dir = cfg->get_path("out_dir");

        if (train_cmd->parsed()) {
            require<ConfigError>(cfg.has_value(), "train requires --config");
            return cmd_train(*cfg, seed, out_dir);
        }
        if (eval_cmd->parsed())
            return cmd_eval(checkpoint, cfg ? &*cfg : nullptr, data_dir, split_name, seed, out_dir,
                            weighted);
        if (sweep_cmd->parsed()) {
            require<ConfigError>(cfg.has_value(), "reduce-sweep requires --config");
            return cmd_reduce_sweep(*cfg, seed, out_dir, fractions, jobs);
        }
        if (gradcam_cmd->parsed()) return cmd_gradcam(checkpoint, image_path, target_class, out_png);
        if (synth_cmd->parsed()) return cmd_synth(synth_classes, synth_per_class, synth_hw, seed, out_dir);
        if (info_cmd->parsed()) return cmd_info(checkpoint, cfg ? &*cfg : nullptr, seed);
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

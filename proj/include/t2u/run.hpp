#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "t2u/checkpoint.hpp"
#include "t2u/config.hpp"
#include "t2u/data.hpp"
#include "t2u/pnm.hpp"
#include "t2u/train.hpp"

namespace t2u {

namespace fs = std::filesystem;

inline std::string format_fixed(double v, int decimals = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

inline std::string format_exact(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct Dataset {
    std::vector<SegmentationSample> samples;
    DatasetSplit split;

    std::vector<SegmentationSample> train() const { return select(samples, split.train); }
    std::vector<SegmentationSample> val() const { return select(samples, split.val); }
    std::vector<SegmentationSample> test() const { return select(samples, split.test); }

    std::vector<SegmentationSample> part(const std::string& name) const {
        if (name == "train") return train();
        if (name == "val") return val();
        if (name == "test") return test();
        if (name == "all") return samples;
        throw ConfigError("unknown split '" + name + "' (expected train, val, test or all)");
    }
};

/// Loads `data.dir` or generates `data.synthetic` samples, then splits them
/// with `data.split` and `run.seed`.
inline Dataset build_dataset(const RunConfig& cfg) {
    const ModelConfig m = cfg.model_config();
    Dataset d;
    const std::string dir = cfg.raw("data.dir");
    const std::size_t synthetic = cfg.get_size("data.synthetic");
    if (!dir.empty()) {
        d.samples = load_dataset(dir, m.input_size, m.in_channels);
    } else if (synthetic > 0) {
        d.samples = generate_synthetic(synthetic, m.input_size, cfg.seed(), m.in_channels);
    } else {
        throw ConfigError("no data source: set data.dir or data.synthetic");
    }
    d.split = split_dataset(d.samples, cfg.split_ratios(), cfg.seed());
    return d;
}

// ---------------------------------------------------------------------------
// Checkpoints with run config and training state
// ---------------------------------------------------------------------------

inline constexpr const char* state_marker = "[state]";

/// Config echo, then the training state as `state.*` lines.
template <class T>
CheckpointFile make_checkpoint(const RunConfig& cfg, const Trans2Unet<T>& model,
                               const std::type_identity_t<TrainState<T>>* state = nullptr) {
    CheckpointFile file;
    file.text = cfg.echo();
    append_model_tensors(model, file);
    if (state) {
        std::ostringstream os;
        os << state_marker << '\n';
        os << "state.epoch = " << state->epoch << '\n';
        os << "state.adam_step = " << state->optimizer.step_count() << '\n';
        os << "state.lr = " << format_exact(state->optimizer.lr()) << '\n';
        os << "state.sched_best = " << format_exact(state->scheduler.best()) << '\n';
        os << "state.sched_seen = " << (state->scheduler.has_best() ? 1 : 0) << '\n';
        os << "state.sched_bad_epochs = " << state->scheduler.bad_epochs() << '\n';
        os << "state.best_val_dsc = " << format_exact(state->best_val_dsc) << '\n';
        os << "state.best_epoch = " << state->best_epoch << '\n';
        file.text += os.str();
        append_optimizer_tensors(state->optimizer, file);
    }
    return file;
}

struct LoadedCheckpoint {
    RunConfig config;
    std::unique_ptr<Trans2Unet<float>> model;
    std::map<std::string, std::string> state;
    CheckpointFile file;
};

inline LoadedCheckpoint load_checkpoint(const fs::path& path) {
    LoadedCheckpoint out;
    out.file = read_checkpoint_file(path);
    std::string config_text = out.file.text;
    if (const auto pos = config_text.find(std::string(state_marker) + "\n"); pos != std::string::npos) {
        std::istringstream in(config_text.substr(pos));
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            const auto eq = line.find(" = ");
            if (eq == std::string::npos) throw CheckpointError("corrupt checkpoint state line: '" + line + "'");
            out.state[line.substr(0, eq)] = line.substr(eq + 3);
        }
        config_text.erase(pos);
    }
    try {
        out.config = RunConfig::parse(config_text);
        out.config.validate();
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
    }
    out.model = std::make_unique<Trans2Unet<float>>(out.config.model_config(), out.config.seed());
    load_model_tensors(out.file, *out.model);
    return out;
}

/// Restores optimizer and scheduler state saved by make_checkpoint.
inline void restore_train_state(const LoadedCheckpoint& ckpt, TrainState<float>& state) {
    auto get = [&](const std::string& key) -> const std::string& {
        auto it = ckpt.state.find(key);
        if (it == ckpt.state.end()) throw CheckpointError("checkpoint has no '" + key + "'");
        return it->second;
    };
    load_optimizer_tensors(ckpt.file, state.optimizer);
    state.epoch = std::stoull(get("state.epoch"));
    state.optimizer.set_step_count(std::stoull(get("state.adam_step")));
    state.optimizer.set_lr(std::stod(get("state.lr")));
    state.scheduler.restore(std::stod(get("state.lr")), std::stod(get("state.sched_best")), get("state.sched_seen") == "1",
                            std::stoull(get("state.sched_bad_epochs")));
    state.best_val_dsc = std::stod(get("state.best_val_dsc"));
    state.best_epoch = std::stoull(get("state.best_epoch"));
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline const char* metrics_header = "epoch,train_loss,val_loss,val_dsc,val_iou,lr";

inline std::string metrics_row(const EpochRecord& r) {
    return std::to_string(r.epoch) + "," + format_fixed(r.train_loss) + "," + format_fixed(r.val_loss) + "," +
           format_fixed(r.val_dsc) + "," + format_fixed(r.val_iou) + "," + format_fixed(r.lr);
}

inline std::string timestamp_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

struct TrainRunResult {
    std::vector<EpochRecord> log;
    std::size_t best_epoch = 0;
    double best_val_dsc = 0;
    EvalResult final_val;
    std::optional<EvalResult> final_test;
};

/// Trains on explicit sets and writes config.echo, metrics.csv, best.ckpt,
/// final.ckpt and summary.txt into `out_dir`. A non-finite loss or gradient
/// leaves best.ckpt from the last good epoch and rethrows NumericError.
inline TrainRunResult run_training(const RunConfig& cfg, const std::vector<SegmentationSample>& train_set,
                                   const std::vector<SegmentationSample>& val_set,
                                   const std::vector<SegmentationSample>& test_set, const fs::path& out_dir,
                                   std::ostream* log = nullptr) {
    cfg.validate();
    if (train_set.empty()) throw DataError("training split is empty");
    if (val_set.empty()) throw DataError("validation split is empty");
    const TrainOptions opt = cfg.train_options();
    Trans2Unet<float> model(cfg.model_config(), cfg.seed());

    fs::create_directories(out_dir);
    write_text_file(out_dir / "config.echo", cfg.echo());
    std::ofstream metrics(out_dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot open " + (out_dir / "metrics.csv").string());
    metrics << metrics_header << '\n' << std::flush;

    const std::string started = timestamp_now();
    auto write_summary = [&](const std::string& status, const std::vector<std::string>& lines) {
        std::ostringstream os;
        os << "status = " << status << '\n';
        os << "started = " << started << '\n';
        os << "finished = " << timestamp_now() << '\n';
        os << "train_samples = " << train_set.size() << '\n';
        os << "val_samples = " << val_set.size() << '\n';
        os << "test_samples = " << test_set.size() << '\n';
        os << "parameters = " << model.parameter_count() << '\n';
        for (const auto& l : lines) os << l << '\n';
        write_text_file(out_dir / "summary.txt", os.str());
    };

    TrainRunResult result;
    std::optional<TrainState<float>> state;
    try {
        state.emplace(train(model, train_set, val_set, opt,
                            [&](const EpochRecord& rec, bool is_best, Trans2Unet<float>& m, TrainState<float>& st) {
                                metrics << metrics_row(rec) << '\n' << std::flush;
                                if (is_best) write_checkpoint_file(out_dir / "best.ckpt", make_checkpoint(cfg, m, &st));
                                if (log) {
                                    *log << "epoch " << rec.epoch << "/" << opt.epochs << " train_loss "
                                         << format_fixed(rec.train_loss) << " val_loss " << format_fixed(rec.val_loss)
                                         << " val_dsc " << format_fixed(rec.val_dsc) << " lr " << rec.lr << '\n';
                                }
                            }));
    } catch (const NumericError& e) {
        write_summary("failed", {std::string("error = ") + e.what()});
        throw;
    }
    write_checkpoint_file(out_dir / "final.ckpt", make_checkpoint(cfg, model, &*state));

    result.log = state->log;
    result.best_epoch = state->best_epoch;
    result.best_val_dsc = state->best_val_dsc;
    result.final_val = evaluate(model, val_set, opt.loss);
    if (!test_set.empty()) result.final_test = evaluate(model, test_set, opt.loss);

    std::vector<std::string> lines{
        "epochs = " + std::to_string(result.log.size()),
        "best_epoch = " + std::to_string(result.best_epoch),
        "best_val_dsc = " + format_fixed(result.best_val_dsc),
        "final_val_loss = " + format_fixed(result.final_val.mean_loss),
        "final_val_dsc = " + format_fixed(result.final_val.mean_dsc),
        "final_val_iou = " + format_fixed(result.final_val.mean_iou),
    };
    if (result.final_test) {
        lines.push_back("final_test_dsc = " + format_fixed(result.final_test->mean_dsc));
        lines.push_back("final_test_iou = " + format_fixed(result.final_test->mean_iou));
    }
    write_summary("ok", lines);
    return result;
}

/// Builds the dataset from the config and trains on its train/val split.
inline TrainRunResult run_train(const RunConfig& cfg, const fs::path& out_dir, std::ostream* log = nullptr) {
    cfg.validate();
    const Dataset d = build_dataset(cfg);
    return run_training(cfg, d.train(), d.val(), d.test(), out_dir, log);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline const char* eval_header = "id,loss,tp,fp,fn,tn,dsc,iou";

/// Per-image rows, then a `mean` row (macro averages) and a `pooled` row
/// (micro scores from summed counts).
inline std::string eval_table(const EvalResult& r) {
    std::ostringstream os;
    os << eval_header << '\n';
    for (const auto& im : r.images) {
        os << im.id << ',' << format_fixed(im.loss, 10) << ',' << im.counts.tp << ',' << im.counts.fp << ','
           << im.counts.fn << ',' << im.counts.tn << ',' << format_fixed(im.dsc, 10) << ',' << format_fixed(im.iou, 10)
           << '\n';
    }
    os << "mean," << format_fixed(r.mean_loss, 10) << ",,,,," << format_fixed(r.mean_dsc, 10) << ','
       << format_fixed(r.mean_iou, 10) << '\n';
    os << "pooled,," << r.pooled.tp << ',' << r.pooled.fp << ',' << r.pooled.fn << ',' << r.pooled.tn << ','
       << format_fixed(r.micro_dsc, 10) << ',' << format_fixed(r.micro_iou, 10) << '\n';
    return os.str();
}

struct DataOverride {
    std::optional<std::string> dir;
    std::optional<std::size_t> synthetic;
};

inline RunConfig apply_data_override(RunConfig cfg, const DataOverride& data) {
    if (data.dir && data.synthetic) throw ConfigError("--data and --synthetic are mutually exclusive");
    if (data.dir) {
        cfg.set("data.dir", *data.dir);
        cfg.set("data.synthetic", "0");
    }
    if (data.synthetic) {
        cfg.set("data.dir", "");
        cfg.set("data.synthetic", std::to_string(*data.synthetic));
    }
    return cfg;
}

inline EvalResult run_eval(const fs::path& checkpoint, const DataOverride& data, const std::string& split,
                           const std::optional<fs::path>& out_csv) {
    if (split != "train" && split != "val" && split != "test" && split != "all") {
        throw ConfigError("unknown split '" + split + "' (expected train, val, test or all)");
    }
    LoadedCheckpoint ckpt = load_checkpoint(checkpoint);
    const RunConfig cfg = apply_data_override(ckpt.config, data);
    cfg.validate();
    const Dataset d = build_dataset(cfg);
    const auto samples = d.part(split);
    if (samples.empty()) throw DataError("split '" + split + "' is empty");
    const EvalResult r = evaluate(*ckpt.model, samples, cfg.train_options().loss);
    if (out_csv) {
        if (out_csv->has_parent_path()) fs::create_directories(out_csv->parent_path());
        write_text_file(*out_csv, eval_table(r));
    }
    return r;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

struct PredictResult {
    fs::path mask_path;
    fs::path prob_path;
    std::size_t foreground = 0;
};

inline fs::path probability_path(const fs::path& mask_path) {
    return mask_path.parent_path() / (mask_path.stem().string() + "_prob.pgm");
}

/// Writes the binary mask (0/255) to `out` and the probability map
/// (round(255 q)) to `<stem>_prob.pgm` next to it.
inline PredictResult run_predict(const fs::path& checkpoint, const fs::path& image_path, const fs::path& out) {
    LoadedCheckpoint ckpt = load_checkpoint(checkpoint);
    const ModelConfig m = ckpt.model->config();
    const Image8 img = read_pnm(image_path);
    if (img.width != m.input_size || img.height != m.input_size) {
        throw DataError(image_path.string() + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                        ", model expects " + std::to_string(m.input_size) + "x" + std::to_string(m.input_size));
    }
    Tensor<float> x({1, m.in_channels, m.input_size, m.input_size}, image_to_planes(img, m.in_channels));
    Tensor<float> q;
    {
        NoGradGuard no_grad;
        q = sigmoid(ckpt.model->forward(x, Mode::eval));
    }
    Image8 mask{img.width, img.height, 1, std::vector<std::uint8_t>(q.numel())};
    Image8 prob = mask;
    PredictResult r;
    for (std::size_t i = 0; i < q.numel(); ++i) {
        const bool fg = q[i] >= 0.5f;
        mask.pixels[i] = fg ? 255 : 0;
        prob.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(q[i], 0.0f, 1.0f) * 255.0f));
        r.foreground += fg;
    }
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    r.mask_path = out;
    r.prob_path = probability_path(out);
    write_pnm(r.mask_path, mask);
    write_pnm(r.prob_path, prob);
    return r;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Writes `images/` and `masks/` in the layout read by load_dataset.
inline void write_dataset(const std::vector<SegmentationSample>& samples, const fs::path& dir) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    for (const auto& s : samples) {
        const std::size_t C = s.channels(), H = s.height(), W = s.width();
        Image8 img{W, H, C, std::vector<std::uint8_t>(C * H * W)};
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < H * W; ++p)
                img.pixels[p * C + c] =
                    static_cast<std::uint8_t>(std::lround(std::clamp(s.image[c * H * W + p], 0.0f, 1.0f) * 255.0f));
        Image8 mask{W, H, 1, std::vector<std::uint8_t>(H * W)};
        for (std::size_t p = 0; p < H * W; ++p) mask.pixels[p] = s.mask[p] > 0.5f ? 255 : 0;
        write_pnm(dir / "images" / (s.id + (C == 1 ? ".pgm" : ".ppm")), img);
        write_pnm(dir / "masks" / (s.id + ".pgm"), mask);
    }
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

struct WaspDelta {
    std::size_t wasp = 0;
    std::size_t wasp_kc = 0;
    std::size_t formula = 0;  // B (2C + 10B)
};

inline WaspDelta wasp_delta(const WaspConfig& base) {
    Rng rng(0);
    WaspConfig plain = base, dense = base;
    plain.dense_skip = false;
    dense.dense_skip = true;
    WaspDelta d;
    d.wasp = count_parameters(Wasp<float>(plain, rng));
    d.wasp_kc = count_parameters(Wasp<float>(dense, rng));
    const std::size_t B = base.branch_channels, C = base.in_channels;
    d.formula = B * (2 * C + 10 * B);
    return d;
}

inline std::string params_report(const RunConfig& cfg) {
    const ModelConfig m = cfg.model_config();
    Trans2Unet<float> model(m, cfg.seed());
    const ParameterBreakdown b = model.breakdown();
    std::ostringstream os;
    os << "module,params\n";
    os << "unet_branch," << b.unet_branch << '\n';
    os << "cnn_encoder," << b.cnn_encoder << '\n';
    os << "wasp," << b.wasp << '\n';
    os << "vit," << b.vit << '\n';
    os << "decoder," << b.decoder << '\n';
    os << "fusion," << b.fusion << '\n';
    os << "total," << b.total() << '\n';
    const WaspDelta d = wasp_delta(m.resolved_wasp());
    os << "wasp_plain," << d.wasp << '\n';
    os << "wasp_kc," << d.wasp_kc << '\n';
    os << "wasp_kc_delta," << (d.wasp_kc - d.wasp) << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// ablation
// ---------------------------------------------------------------------------

struct AblationVariant {
    std::string name;
    bool unet_branch;
    bool wasp;
    bool dense_skip;
};

inline const std::vector<AblationVariant>& ablation_variants() {
    static const std::vector<AblationVariant> v{
        {"transunet", false, false, true},
        {"trans2unet_wasp", true, true, false},
        {"trans2unet_wasp_kc", true, true, true},
    };
    return v;
}

inline RunConfig variant_config(RunConfig cfg, const AblationVariant& v) {
    cfg.set("model.unet_branch", v.unet_branch ? "true" : "false");
    cfg.set("wasp.enabled", v.wasp ? "true" : "false");
    cfg.set("wasp.dense_skip", v.dense_skip ? "true" : "false");
    return cfg;
}

struct AblationRow {
    std::string variant;
    std::size_t params = 0;
    EvalResult test;
    std::uint64_t split_hash = 0;
};

inline const char* ablation_header = "variant,params,test_dsc,test_iou,test_dsc_micro,test_iou_micro,split_hash";

inline std::string ablation_row(const AblationRow& r) {
    return r.variant + "," + std::to_string(r.params) + "," + format_fixed(r.test.mean_dsc) + "," +
           format_fixed(r.test.mean_iou) + "," + format_fixed(r.test.micro_dsc) + "," + format_fixed(r.test.micro_iou) +
           "," + hex64(r.split_hash);
}

/// Trains the three variants on one split into `out_dir/<variant>/`, scores
/// each best checkpoint on the test split and writes ablation.csv.
inline std::vector<AblationRow> run_ablation(const RunConfig& cfg, const fs::path& out_dir, std::ostream* log = nullptr) {
    for (const auto& v : ablation_variants()) variant_config(cfg, v).validate();
    const Dataset d = build_dataset(cfg);
    if (d.split.test.empty()) throw DataError("ablation needs a non-empty test split");
    if (d.split.train.empty() || d.split.val.empty()) throw DataError("ablation needs non-empty train and validation splits");
    const auto train_set = d.train(), val_set = d.val(), test_set = d.test();

    fs::create_directories(out_dir);
    std::vector<AblationRow> rows;
    for (const auto& v : ablation_variants()) {
        const RunConfig vc = variant_config(cfg, v);
        if (log) *log << "== " << v.name << '\n';
        run_training(vc, train_set, val_set, test_set, out_dir / v.name, log);
        LoadedCheckpoint best = load_checkpoint(out_dir / v.name / "best.ckpt");
        AblationRow row;
        row.variant = v.name;
        row.params = best.model->parameter_count();
        row.test = evaluate(*best.model, test_set, vc.train_options().loss);
        row.split_hash = d.split.hash();
        rows.push_back(std::move(row));
    }
    std::ostringstream os;
    os << ablation_header << '\n';
    for (const auto& r : rows) os << ablation_row(r) << '\n';
    write_text_file(out_dir / "ablation.csv", os.str());
    return rows;
}

}  // namespace t2u

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "t2u/t2u.hpp"

namespace {

using namespace t2u;

enum Exit { ok = 0, validation = 1, failure = 2 };

struct ConfigFlags {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> data;
    std::optional<std::size_t> synthetic;

    void add_to(CLI::App* cmd, bool with_data = true) {
        cmd->add_option("--config", config, "config file (key = value); defaults when omitted")->check(CLI::ExistingFile);
        cmd->add_option("--set", overrides, "override a config key, e.g. --set vit.layers=1");
        cmd->add_option("--seed", seed, "run seed (overrides run.seed)");
        if (with_data) {
            auto* d = cmd->add_option("--data", data, "dataset directory with images/ and masks/");
            auto* s = cmd->add_option("--synthetic", synthetic, "generate this many synthetic samples");
            d->excludes(s);
        }
    }

    RunConfig resolve() const {
        RunConfig cfg = config.empty() ? RunConfig::defaults() : RunConfig::parse(read_text_file(config));
        for (const auto& o : overrides) cfg.set_override(o);
        if (seed) cfg.set("run.seed", std::to_string(*seed));
        cfg = apply_data_override(cfg, DataOverride{data, synthetic});
        cfg.validate();
        return cfg;
    }
};

int guarded(const std::function<int()>& fn) {
    try {
        return fn();
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return failure;
    } catch (const ConfigError& e) {
        std::cerr << "invalid config: " << e.what() << '\n';
        return validation;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return validation;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return validation;
    } catch (const ImageError& e) {
        std::cerr << "image error: " << e.what() << '\n';
        return validation;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << '\n';
        return validation;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid argument: " << e.what() << '\n';
        return validation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return failure;
    }
}

void print_eval(const EvalResult& r) {
    std::cout << "images " << r.images.size() << '\n';
    std::cout << "macro  loss " << format_fixed(r.mean_loss) << " dsc " << format_fixed(r.mean_dsc) << " iou "
              << format_fixed(r.mean_iou) << '\n';
    std::cout << "micro  dsc " << format_fixed(r.micro_dsc) << " iou " << format_fixed(r.micro_iou) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Trans2Unet nuclei segmentation: training, evaluation and verification tools"};
    app.require_subcommand(1);

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model and write metrics and checkpoints");
    ConfigFlags train_flags;
    train_flags.add_to(train_cmd);
    std::string train_out;
    bool quiet = false;
    train_cmd->add_option("--out", train_out, "output directory")->required();
    train_cmd->add_flag("--quiet", quiet, "no per-epoch progress");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a data split");
    std::string eval_ckpt, eval_split = "test";
    std::optional<std::string> eval_data, eval_out;
    std::optional<std::size_t> eval_synth;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    auto* ed = eval_cmd->add_option("--data", eval_data, "dataset directory (default: the run's data source)");
    auto* es = eval_cmd->add_option("--synthetic", eval_synth, "synthetic sample count (default: the run's data source)");
    ed->excludes(es);
    eval_cmd->add_option("--split", eval_split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
    eval_cmd->add_option("--out", eval_out, "write per-image and aggregate table as CSV");

    // predict
    auto* predict_cmd = app.add_subcommand("predict", "predict a mask for one PGM/PPM image");
    std::string pred_ckpt, pred_image, pred_out;
    predict_cmd->add_option("--checkpoint", pred_ckpt, "checkpoint file")->required();
    predict_cmd->add_option("--image", pred_image, "input image")->required();
    predict_cmd->add_option("--out", pred_out, "output mask PGM; probabilities go to <stem>_prob.pgm")->required();

    // gradcheck
    auto* grad_cmd = app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
    std::string grad_op = "all";
    std::uint64_t grad_seed = 0;
    bool grad_corrupt = false;
    grad_cmd->add_option("--op", grad_op, "check name or 'all'");
    grad_cmd->add_option("--seed", grad_seed, "input seed");
    grad_cmd->add_flag("--corrupt", grad_corrupt, "perturb the analytic gradient (harness self-test)");
    bool grad_list = false;
    grad_cmd->add_flag("--list", grad_list, "list registered checks");

    // params
    auto* params_cmd = app.add_subcommand("params", "parameter counts per module");
    ConfigFlags params_flags;
    params_flags.add_to(params_cmd, false);

    // ablation
    auto* abl_cmd = app.add_subcommand("ablation", "train and compare TransUnet, +WASP and +WASP-KC variants");
    ConfigFlags abl_flags;
    abl_flags.add_to(abl_cmd);
    std::string abl_out;
    abl_cmd->add_option("--out", abl_out, "output directory")->required();
    bool abl_quiet = false;
    abl_cmd->add_flag("--quiet", abl_quiet, "no per-epoch progress");

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset as PGM/PPM files");
    std::size_t synth_n = 8, synth_size = 32, synth_channels = 1;
    std::uint64_t synth_seed = 0;
    std::string synth_out;
    synth_cmd->add_option("--n", synth_n, "number of samples")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--size", synth_size, "image side, a multiple of 16");
    synth_cmd->add_option("--channels", synth_channels, "1 (PGM) or 3 (PPM)")->check(CLI::IsMember({1, 3}));
    synth_cmd->add_option("--seed", synth_seed, "generator seed");
    synth_cmd->add_option("--out", synth_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : validation;
    }

    if (*train_cmd) {
        return guarded([&] {
            const RunConfig cfg = train_flags.resolve();
            const auto r = run_train(cfg, train_out, quiet ? nullptr : &std::cout);
            std::cout << "best epoch " << r.best_epoch << " val dsc " << format_fixed(r.best_val_dsc) << '\n';
            if (r.final_test) {
                std::cout << "final test dsc " << format_fixed(r.final_test->mean_dsc) << " iou "
                          << format_fixed(r.final_test->mean_iou) << '\n';
            }
            std::cout << "wrote " << train_out << '\n';
            return ok;
        });
    }
    if (*eval_cmd) {
        return guarded([&] {
            const auto r = run_eval(eval_ckpt, DataOverride{eval_data, eval_synth}, eval_split,
                                    eval_out ? std::optional<std::filesystem::path>(*eval_out) : std::nullopt);
            std::cout << eval_table(r);
            print_eval(r);
            return ok;
        });
    }
    if (*predict_cmd) {
        return guarded([&] {
            const auto r = run_predict(pred_ckpt, pred_image, pred_out);
            std::cout << "mask " << r.mask_path.string() << " (" << r.foreground << " foreground pixels)\n";
            std::cout << "probabilities " << r.prob_path.string() << '\n';
            return ok;
        });
    }
    if (*grad_cmd) {
        return guarded([&] {
            const auto& reg = gradcheck_registry();
            if (grad_list) {
                for (const auto& [name, fn] : reg) std::cout << name << '\n';
                return ok;
            }
            std::vector<std::string> names;
            if (grad_op == "all") {
                for (const auto& [name, fn] : reg) names.push_back(name);
            } else if (reg.count(grad_op)) {
                names.push_back(grad_op);
            } else {
                throw ConfigError("unknown gradcheck op '" + grad_op + "' (see --list)");
            }
            GradCheckOptions opt;
            opt.corrupt = grad_corrupt;
            bool all_passed = true;
            for (const auto& name : names) {
                const GradCheckResult r = reg.at(name)(grad_seed, opt);
                char line[256];
                std::snprintf(line, sizeof line, "%s %-20s max_rel_err %.3e  checked %zu  skipped %zu", r.passed ? "PASS" : "FAIL",
                              name.c_str(), r.max_rel_error, r.checked, r.skipped);
                std::cout << line << '\n';
                all_passed = all_passed && r.passed;
            }
            std::cout << (all_passed ? "all checks passed" : "gradient check failed") << " (tolerance "
                      << opt.tolerance << ")\n";
            return all_passed ? ok : failure;
        });
    }
    if (*params_cmd) {
        return guarded([&] {
            std::cout << params_report(params_flags.resolve());
            return ok;
        });
    }
    if (*abl_cmd) {
        return guarded([&] {
            RunConfig cfg = abl_flags.resolve();
            if (cfg.raw("data.dir").empty() && cfg.get_size("data.synthetic") == 0) cfg.set("data.synthetic", "40");
            const auto rows = run_ablation(cfg, abl_out, abl_quiet ? nullptr : &std::cout);
            std::cout << ablation_header << '\n';
            for (const auto& r : rows) std::cout << ablation_row(r) << '\n';
            return ok;
        });
    }
    if (*synth_cmd) {
        return guarded([&] {
            const auto samples = generate_synthetic(synth_n, synth_size, synth_seed, synth_channels);
            write_dataset(samples, synth_out);
            std::cout << "wrote " << samples.size() << " samples to " << synth_out << '\n';
            return ok;
        });
    }
    return validation;
}

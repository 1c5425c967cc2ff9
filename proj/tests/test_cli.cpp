#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <map>

#include "support.hpp"

using namespace t2u;
using test::slurp;
using test::TempDir;
namespace fs = std::filesystem;

namespace {

const std::string cli = T2U_CLI_PATH;
const fs::path config_dir = T2U_CONFIG_DIR;

struct CliResult {
    int code = -1;
    std::string output;
};

CliResult run(const std::string& args) {
    const std::string cmd = "'" + cli + "' " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) throw std::runtime_error("popen failed");
    CliResult r;
    std::array<char, 4096> buf{};
    std::size_t n;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

std::map<std::string, std::string> read_params(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto c = line.find(',');
        if (c != std::string::npos) out[line.substr(0, c)] = line.substr(c + 1);
    }
    return out;
}

const std::string micro = "--config " + q(config_dir / "micro.cfg");

// One trained micro run shared by the eval and predict tests.
class TrainedRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir("cli_trained");
        const CliResult r = run("train " + micro + " --synthetic 8 --seed 7 --quiet --out " + q(dir_->path / "run"));
        ASSERT_EQ(r.code, 0) << r.output;
    }
    static void TearDownTestSuite() {
        delete dir_;
        dir_ = nullptr;
    }
    static fs::path run_dir() { return dir_->path / "run"; }
    static fs::path scratch() { return dir_->path; }

    static TempDir* dir_;
};

TempDir* TrainedRun::dir_ = nullptr;

}  // namespace

TEST_F(TrainedRun, WritesAllArtifacts) {
    for (const char* f : {"config.echo", "metrics.csv", "best.ckpt", "final.ckpt", "summary.txt"}) {
        EXPECT_TRUE(fs::exists(run_dir() / f)) << f;
    }
    const auto rows = read_csv(run_dir() / "metrics.csv");
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[0], (std::vector<std::string>{"epoch", "train_loss", "val_loss", "val_dsc", "val_iou", "lr"}));
    for (std::size_t e = 1; e <= 3; ++e) EXPECT_EQ(rows[e][0], std::to_string(e));

    RunConfig expected = test::micro_run_config();
    expected.set("data.synthetic", "8");
    expected.set("run.seed", "7");
    EXPECT_EQ(RunConfig::parse(slurp(run_dir() / "config.echo")), expected);

    const std::string summary = slurp(run_dir() / "summary.txt");
    EXPECT_NE(summary.find("status = ok"), std::string::npos) << summary;
    EXPECT_NE(summary.find("train_samples = 6"), std::string::npos) << summary;
    EXPECT_NE(summary.find("parameters = " + std::to_string(test::model_count(expected.model_config()))),
              std::string::npos);
}

TEST_F(TrainedRun, RerunIsByteIdentical) {
    const fs::path again = scratch() / "again";
    const CliResult r = run("train " + micro + " --synthetic 8 --seed 7 --quiet --out " + q(again));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(slurp(again / "metrics.csv"), slurp(run_dir() / "metrics.csv"));
    EXPECT_EQ(slurp(again / "best.ckpt"), slurp(run_dir() / "best.ckpt"));
    EXPECT_EQ(slurp(again / "final.ckpt"), slurp(run_dir() / "final.ckpt"));
}

TEST_F(TrainedRun, EvalAggregatesMatchPerImageRows) {
    const fs::path csv = scratch() / "eval.csv";
    const CliResult r = run("eval --checkpoint " + q(run_dir() / "best.ckpt") + " --split all --out " + q(csv));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto rows = read_csv(csv);
    ASSERT_EQ(rows.size(), 1u + 8u + 2u);
    double sum_loss = 0, sum_dsc = 0, sum_iou = 0;
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 1; i <= 8; ++i) {
        const auto& row = rows[i];
        EXPECT_EQ(row[0].rfind("synth_", 0), 0u);
        const std::uint64_t a = std::stoull(row[2]), b = std::stoull(row[3]), c = std::stoull(row[4]),
                            d = std::stoull(row[5]);
        EXPECT_EQ(a + b + c + d, 16u * 16u);
        const double expect_dsc = (a + b + c) == 0 ? 1.0 : 2.0 * a / (2.0 * a + b + c);
        EXPECT_NEAR(std::stod(row[6]), expect_dsc, 1e-9);
        sum_loss += std::stod(row[1]);
        sum_dsc += std::stod(row[6]);
        sum_iou += std::stod(row[7]);
        tp += a;
        fp += b;
        fn += c;
    }
    const auto& mean = rows[9];
    EXPECT_EQ(mean[0], "mean");
    EXPECT_NEAR(std::stod(mean[1]), sum_loss / 8, 1e-8);
    EXPECT_NEAR(std::stod(mean[6]), sum_dsc / 8, 1e-8);
    EXPECT_NEAR(std::stod(mean[7]), sum_iou / 8, 1e-8);
    const auto& pooled = rows[10];
    EXPECT_EQ(pooled[0], "pooled");
    EXPECT_EQ(std::stoull(pooled[2]), tp);
    EXPECT_NEAR(std::stod(pooled[6]), 2.0 * tp / (2.0 * tp + fp + fn), 1e-9);
    EXPECT_NE(r.output.find("images 8"), std::string::npos);
}

TEST_F(TrainedRun, EvalRejectsBadMagic) {
    const fs::path bad = scratch() / "bad.ckpt";
    std::string bytes = slurp(run_dir() / "best.ckpt");
    bytes[0] = 'X';
    std::ofstream(bad, std::ios::binary) << bytes;
    const CliResult r = run("eval --checkpoint " + q(bad) + " --split all");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("bad magic"), std::string::npos) << r.output;
}

TEST_F(TrainedRun, EvalRejectsUnknownSplit) {
    EXPECT_EQ(run("eval --checkpoint " + q(run_dir() / "best.ckpt") + " --split holdout").code, 1);
}

TEST_F(TrainedRun, PredictWritesMaskAndProbabilities) {
    const fs::path data = scratch() / "pred_data";
    ASSERT_EQ(run("synth --n 1 --size 16 --seed 3 --out " + q(data)).code, 0);
    const fs::path out = scratch() / "pred" / "mask.pgm";
    const CliResult r = run("predict --checkpoint " + q(run_dir() / "best.ckpt") + " --image " +
                      q(data / "images" / "synth_0000.pgm") + " --out " + q(out));
    ASSERT_EQ(r.code, 0) << r.output;
    const Image8 mask = read_pnm(out);
    EXPECT_EQ(mask.width, 16u);
    EXPECT_EQ(mask.height, 16u);
    EXPECT_EQ(mask.channels, 1u);
    for (auto v : mask.pixels) EXPECT_TRUE(v == 0 || v == 255);
    const Image8 prob = read_pnm(scratch() / "pred" / "mask_prob.pgm");
    ASSERT_EQ(prob.pixels.size(), mask.pixels.size());
    for (std::size_t i = 0; i < prob.pixels.size(); ++i) EXPECT_EQ(mask.pixels[i] == 255, prob.pixels[i] >= 128) << i;
}

TEST_F(TrainedRun, PredictRejectsWrongSize) {
    const fs::path data = scratch() / "big_data";
    ASSERT_EQ(run("synth --n 1 --size 32 --out " + q(data)).code, 0);
    const CliResult r = run("predict --checkpoint " + q(run_dir() / "best.ckpt") + " --image " +
                      q(data / "images" / "synth_0000.pgm") + " --out " + q(scratch() / "x.pgm"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("model expects 16x16"), std::string::npos) << r.output;
}

TEST(CliTrain, MissingKeyFailsBeforeWriting) {
    TempDir dir("cli_missing");
    std::string text;
    std::istringstream in(slurp(config_dir / "micro.cfg"));
    for (std::string line; std::getline(in, line);)
        if (line.rfind("vit.layers", 0) != 0) text += line + '\n';
    std::ofstream(dir.path / "partial.cfg") << text;
    const CliResult r = run("train --config " + q(dir.path / "partial.cfg") + " --synthetic 8 --out " + q(dir.path / "out"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("vit.layers"), std::string::npos) << r.output;
    EXPECT_FALSE(fs::exists(dir.path / "out"));
}

TEST(CliTrain, DataAndSyntheticAreExclusive) {
    TempDir dir("cli_excl");
    EXPECT_EQ(run("train " + micro + " --synthetic 8 --data /nonexistent --out " + q(dir.path / "o")).code, 1);
    EXPECT_FALSE(fs::exists(dir.path / "o"));
}

TEST(CliTrain, TrainsFromSynthesizedDirectory) {
    TempDir dir("cli_dir");
    ASSERT_EQ(run("synth --n 10 --size 16 --seed 2 --out " + q(dir.path / "data")).code, 0);
    EXPECT_TRUE(fs::exists(dir.path / "data" / "masks" / "synth_0009.pgm"));
    const CliResult r = run("train " + micro + " --data " + q(dir.path / "data") + " --set train.epochs=1 --quiet --out " +
                      q(dir.path / "run"));
    ASSERT_EQ(r.code, 0) << r.output;
    const std::string summary = slurp(dir.path / "run" / "summary.txt");
    EXPECT_NE(summary.find("train_samples = 8"), std::string::npos) << summary;
    EXPECT_NE(summary.find("test_samples = 1"), std::string::npos) << summary;
}

TEST(CliTrain, DivergentRunExitsWithNumericFailure) {
    TempDir dir("cli_nan");
    const CliResult r = run("train " + micro + " --synthetic 8 --set optim.lr=1e30 --quiet --out " + q(dir.path / "o"));
    EXPECT_EQ(r.code, 2) << r.output;
    EXPECT_NE(slurp(dir.path / "o" / "summary.txt").find("status = failed"), std::string::npos);
}

TEST(CliTrain, UnknownOverrideRejected) {
    TempDir dir("cli_set");
    EXPECT_EQ(run("train " + micro + " --synthetic 8 --set vit.depth=2 --out " + q(dir.path / "o")).code, 1);
}

TEST(CliGradcheck, SingleOpPasses) {
    const CliResult r = run("gradcheck --op conv2d");
    EXPECT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("PASS conv2d"), std::string::npos) << r.output;
}

TEST(CliGradcheck, CorruptedGradientFails) {
    const CliResult r = run("gradcheck --op matmul --corrupt");
    EXPECT_EQ(r.code, 2) << r.output;
    EXPECT_NE(r.output.find("FAIL matmul"), std::string::npos) << r.output;
}

TEST(CliGradcheck, UnknownOpAndList) {
    EXPECT_EQ(run("gradcheck --op nosuchop").code, 1);
    const CliResult r = run("gradcheck --list");
    EXPECT_EQ(r.code, 0);
    for (const auto& [name, fn] : gradcheck_registry()) EXPECT_NE(r.output.find(name), std::string::npos) << name;
}

TEST(CliParams, MicroCountsMatchClosedForm) {
    const CliResult r = run("params " + micro);
    ASSERT_EQ(r.code, 0) << r.output;
    const auto p = read_params(r.output);
    const ModelConfig m = test::micro_run_config().model_config();
    EXPECT_EQ(p.at("total"), std::to_string(test::model_count(m)));
    const std::size_t C = m.cnn_widths[2], B = m.wasp.branch_channels;
    EXPECT_EQ(p.at("wasp_plain"), std::to_string(test::wasp_count(C, B, false)));
    EXPECT_EQ(p.at("wasp_kc"), std::to_string(test::wasp_count(C, B, true)));
    EXPECT_EQ(p.at("wasp_kc_delta"), std::to_string(B * (2 * C + 10 * B)));
}

TEST(CliAblation, TinyRunHasThreeRowsOnOneSplit) {
    TempDir dir("cli_ablation");
    const CliResult r = run("ablation " + micro + " --synthetic 10 --set train.epochs=1 --quiet --out " + q(dir.path / "abl"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto rows = read_csv(dir.path / "abl" / "ablation.csv");
    ASSERT_EQ(rows.size(), 4u);
    const std::vector<std::string> names{"transunet", "trans2unet_wasp", "trans2unet_wasp_kc"};
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(rows[i + 1][0], names[i]);
        EXPECT_EQ(rows[i + 1][6], rows[1][6]);
        const RunConfig v = variant_config(test::micro_run_config(), ablation_variants()[i]);
        EXPECT_EQ(rows[i + 1][1], std::to_string(test::model_count(v.model_config())));
        EXPECT_TRUE(fs::exists(dir.path / "abl" / names[i] / "best.ckpt"));
    }
    EXPECT_GT(std::stoull(rows[3][1]), std::stoull(rows[2][1]));
}

TEST(CliMisc, HelpAndUsageErrors) {
    EXPECT_EQ(run("--help").code, 0);
    EXPECT_EQ(run("train --help").code, 0);
    EXPECT_EQ(run("").code, 1);
    EXPECT_EQ(run("frobnicate").code, 1);
    EXPECT_EQ(run("train --synthetic 8").code, 1);
}

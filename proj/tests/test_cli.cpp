#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "mixedray/experiment.hpp"

using namespace mixedray;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    json out;
};

std::string bin() {
    const char* b = std::getenv("MIXEDRAY_BIN");
    return b ? b : "";
}

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("mixedray_cli_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

fs::path write_config(const fs::path& dir, const json& j) {
    fs::path p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

Run run(const std::string& args) {
    Run r;
    const std::string cmd = bin() + " " + args + " 2>/dev/null";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::string text;
    std::array<char, 4096> buf;
    while (std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) text.append(buf.data(), n);
    const int st = pclose(pipe);
    r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    try {
        r.out = json::parse(text);
    } catch (const json::parse_error&) {
        r.out = text;
    }
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

json tiny(const std::string& valence = "2,0") {
    return {{"grid", 5},
            {"valence", valence},
            {"fan", {{"omega", 2}, {"lambda", 1}}},
            {"model", {{"h_step", 0.05}}},
            {"data", {{"h_step", 0.05}}},
            {"solver", {{"max_iters", 30}}}};
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        if (bin().empty()) GTEST_SKIP() << "MIXEDRAY_BIN not set";
    }
};

}  // namespace

TEST(Config, RoundTripAndDefaults) {
    ExperimentConfig c;
    c.valence = 2;
    c.F = 4;
    c.fan = {3, 5};
    c.beta = 0.25;
    const json j = to_json(c);
    EXPECT_EQ(to_json(parse_config(j)), j);
    EXPECT_EQ(to_json(parse_config(json::object())), to_json(ExperimentConfig{}));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(parse_config({{"solver", {{"tol", 1e-3}}}}), ConfigError);
    EXPECT_THROW(parse_config({{"grid", "big"}}), ConfigError);
    EXPECT_THROW(parse_config({{"grid", {4, 4}}}), ConfigError);
    EXPECT_THROW(parse_config({{"valence", "2,1"}}), ConfigError);
    EXPECT_THROW(parse_config({{"metric", "hyperbolic"}}), ConfigError);
    EXPECT_THROW(parse_config({{"solver", {{"tol_rel", 1.5}}}}), ConfigError);
    EXPECT_THROW(parse_config({{"solver", {{"beta", 0.1}}}}), ConfigError);  // (2,0) takes no penalty
    EXPECT_THROW(parse_config({{"fan", {{"omega", -1}}}}), ConfigError);
    EXPECT_THROW(parse_config({{"symbols", {{"samples", 0}}}}), ConfigError);
    EXPECT_THROW(parse_config({{"phantom", {{"gauge", 0.5}}}}), ConfigError);
    EXPECT_NO_THROW(parse_config({{"valence", "2,2"}, {"phantom", {{"gauge", 0.5}}}}));
}

TEST(Config, GaugePhantomDiffersOnlyByPotential) {
    auto c = parse_config({{"valence", "2,2"}, {"grid", 6}});
    auto g = experiment_grid(c);
    auto m = experiment_metric(c);
    auto f = make_phantom(c, m, g);
    c.phantom_gauge = 1.0;
    auto fg = make_phantom(c, m, g);
    const auto a = sample_on_grid(f, g), b = sample_on_grid(fg, g);
    EXPECT_NEAR((b - a).norm() / a.norm(), 1.0, 1e-12);
}

TEST(Config, ShippedExamplesParse) {
    int n = 0;
    for (const auto& e : fs::directory_iterator(MIXEDRAY_CONFIG_DIR)) {
        EXPECT_NO_THROW(load_config(e.path().string())) << e.path();
        ++n;
    }
    EXPECT_GT(n, 0);
}

TEST(Symbols, MutatedBuilderFailsTheCertificate) {
    auto c = parse_config({{"symbols", {{"samples", 8}, {"n_quad", 16}, {"decomposition_samples", 3}}}});
    SymbolBuilders b;
    b.fiber20 = [](double S, const Vec2& Y, double alpha) { return CMat(-kernel_matrix_20(S, Y, alpha, 0.0)); };
    const auto dir = scratch("mutant");
    EXPECT_THROW(run_verify_symbols(c, dir.string(), b), CertificateFailure);
    EXPECT_TRUE(fs::exists(dir / "certificate.json"));
    EXPECT_NO_THROW(run_verify_symbols(c, dir.string()));
}

TEST_F(Cli, ForwardZeroPhantomWritesZeros) {
    auto dir = scratch("zero");
    json j = tiny();
    j["phantom"] = {{"kind", "zero"}};
    auto cfg = write_config(dir, j);
    auto r = run("forward --config " + cfg.string() + " --out " + dir.string());
    ASSERT_EQ(r.code, 0) << r.out.dump();
    auto ds = read_dataset((dir / "data.csv").string());
    ASSERT_EQ(ds.records.size(), r.out["rays"].get<std::size_t>());
    for (const auto& rec : ds.records)
        for (double v : rec.value) EXPECT_EQ(v, 0.0);

    auto inv = run("invert --config " + cfg.string() + " --out " + dir.string());
    ASSERT_EQ(inv.code, 0) << inv.out.dump();
    EXPECT_EQ(read_field((dir / "field.bin").string()).max_abs(), 0.0);
}

TEST_F(Cli, ForwardIsDeterministicAndSidecarCountsRows) {
    auto a = scratch("det_a"), b = scratch("det_b");
    auto ca = write_config(a, tiny("2,2")), cb = write_config(b, tiny("2,2"));
    ASSERT_EQ(run("forward --config " + ca.string() + " --out " + a.string() + " --seed 9").code, 0);
    ASSERT_EQ(run("forward --config " + cb.string() + " --out " + b.string() + " --seed 9 --threads 1").code, 0);
    const std::string csv = slurp(a / "data.csv");
    EXPECT_EQ(csv, slurp(b / "data.csv"));
    const auto meta = json::parse(slurp(a / "data.csv.json"));
    const auto rows = std::count(csv.begin(), csv.end(), '\n') - 1;
    EXPECT_EQ(meta["rays"].get<long>(), rows);

    auto c = scratch("det_c");
    auto cc = write_config(c, tiny("2,2"));
    ASSERT_EQ(run("forward --config " + cc.string() + " --out " + c.string() + " --seed 10").code, 0);
    EXPECT_NE(csv, slurp(c / "data.csv"));
}

TEST_F(Cli, InvertReportIsMonotoneAndReproducible) {
    auto dir = scratch("inv");
    auto cfg = write_config(dir, tiny());
    ASSERT_EQ(run("forward --config " + cfg.string() + " --out " + dir.string()).code, 0);
    auto r1 = run("invert --config " + cfg.string() + " --out " + dir.string());
    auto r2 = run("invert --config " + cfg.string() + " --out " + dir.string() + " --threads 1");
    ASSERT_EQ(r1.code, 0) << r1.out.dump();
    ASSERT_EQ(r2.code, 0);
    const auto res = r1.out["solve"]["residual"].get<std::vector<double>>();
    ASSERT_GT(res.size(), 1u);
    for (std::size_t k = 1; k < res.size(); ++k) EXPECT_LE(res[k], res[k - 1] * (1 + 1e-12));
    EXPECT_TRUE(r1.out["solve"]["monotone"].get<bool>());
    EXPECT_TRUE(r1.out.contains("error_vs_phantom"));
    r1.out.erase("timings");
    r2.out.erase("timings");
    EXPECT_EQ(r1.out, r2.out);
    const auto f = read_field((dir / "field.bin").string());
    write_field(f, (dir / "copy.bin").string());
    EXPECT_EQ(slurp(dir / "field.bin"), slurp(dir / "copy.bin"));
}

TEST_F(Cli, InvertRefusesMismatchedDatasetWithDiff) {
    auto dir = scratch("mismatch");
    auto cfg = write_config(dir, tiny());
    ASSERT_EQ(run("forward --config " + cfg.string() + " --out " + dir.string()).code, 0);
    json other = tiny();
    other["F"] = 4.0;
    auto od = scratch("mismatch_cfg");
    auto ocfg = write_config(od, other);
    auto r = run("invert --config " + ocfg.string() + " --out " + od.string() + " --data " + (dir / "data.csv").string());
    EXPECT_EQ(r.code, 2);
    ASSERT_TRUE(r.out.is_object());
    EXPECT_EQ(r.out["error"]["kind"], "config");
    const auto& diff = r.out["error"]["detail"]["diff"];
    ASSERT_EQ(diff.size(), 1u);
    EXPECT_EQ(diff[0]["key"], "F");
    EXPECT_EQ(diff[0]["dataset"], 8.0);
    EXPECT_EQ(diff[0]["config"], 4.0);
}

TEST_F(Cli, ConfigErrorsExitTwoWithJson) {
    auto dir = scratch("cfgerr");
    json j = tiny();
    j["solver"]["tolerance"] = 1e-3;
    auto cfg = write_config(dir, j);
    auto r = run("forward --config " + cfg.string() + " --out " + dir.string());
    EXPECT_EQ(r.code, 2);
    ASSERT_TRUE(r.out.is_object());
    EXPECT_EQ(r.out["status"], "error");
    EXPECT_NE(r.out["error"]["message"].get<std::string>().find("solver.tolerance"), std::string::npos);

    std::ofstream(dir / "broken.json") << "{ grid = 4 }";
    EXPECT_EQ(run("forward --config " + (dir / "broken.json").string()).code, 2);
    EXPECT_EQ(run("forward --config " + (dir / "missing.json").string()).code, 2);
    EXPECT_EQ(run("forward").code, 2);
    EXPECT_EQ(run("transmogrify --config " + cfg.string()).code, 2);
    EXPECT_EQ(run("invert --config " + write_config(dir, tiny()).string() + " --out " + dir.string() +
                  " --data " + (dir / "nope.csv").string())
                  .code,
              2);
}

TEST_F(Cli, GaugeTestZeroPotentialAndValenceCheck) {
    auto dir = scratch("gauge");
    json j = {{"valence", "2,2"}, {"grid", 6}, {"gauge", {{"potentials", 2}, {"zero", true}, {"rays", {{"base", 4}}}}}};
    auto r = run("gauge-test --config " + write_config(dir, j).string() + " --out " + dir.string());
    ASSERT_EQ(r.code, 0) << r.out.dump();
    EXPECT_EQ(r.out["residual"]["max"].get<double>(), 0.0);
    j["valence"] = "2,0";
    EXPECT_EQ(run("gauge-test --config " + write_config(dir, j).string() + " --out " + dir.string()).code, 2);
}

TEST_F(Cli, VerifySymbolsWritesCertificateAndPlotData) {
    auto dir = scratch("sym");
    json j = {{"symbols", {{"samples", 8}, {"n_quad", 16}, {"decomposition_samples", 5}}}};
    auto r = run("verify-symbols --config " + write_config(dir, j).string() + " --out " + dir.string());
    ASSERT_EQ(r.code, 0) << r.out.dump();
    EXPECT_TRUE(r.out["certificate"]["pass"].get<bool>());
    EXPECT_EQ(r.out["certificate"]["certificates"].size(), 4u);
    const std::string csv = slurp(dir / "eigenvalues.csv");
    // 8·5 fiber20 rows (α sweep) + 3·8 others + header
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8 * 5 + 3 * 8 + 1);
    j["symbols"]["samples"] = 0;
    EXPECT_EQ(run("verify-symbols --config " + write_config(dir, j).string() + " --out " + dir.string()).code, 2);
}

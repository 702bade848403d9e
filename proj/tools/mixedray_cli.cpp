// mixedray: batch front end. stdout carries exactly one JSON document (the report, or the error);
// logs go to stderr at the level named by MIXEDRAY_LOG.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "mixedray/experiment.hpp"
#include "mixedray/parallel.hpp"

using namespace mixedray;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kConfig = 2, kNumerical = 3, kCertificate = 4 };

int fail(int code, const std::string& kind, const std::string& message, const json& detail = nullptr) {
    json e = {{"status", "error"}, {"exit_code", code}, {"error", {{"kind", kind}, {"message", message}}}};
    if (!detail.is_null()) e["error"]["detail"] = detail;
    std::cout << e.dump() << std::endl;
    spdlog::error("{}: {}", kind, message);
    return code;
}

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("mixedray");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::warn);
    if (const char* lv = std::getenv("MIXEDRAY_LOG")) {
        auto level = spdlog::level::from_str(lv);
        // from_str maps unknown names to off; only accept real names
        if (level != spdlog::level::off || std::string(lv) == "off")
            spdlog::set_level(level);
        else
            spdlog::warn("MIXEDRAY_LOG='{}' is not a level name; keeping warn", lv);
    }
}

}  // namespace

int main(int argc, char** argv) {
    setup_logging();

    CLI::App app{"mixedray: ray transforms of tensor fields near a convex boundary"};
    app.require_subcommand(1);
    std::string config_path, out_dir = ".", data_path;
    int threads = 0;
    std::uint64_t seed = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--threads", threads, "worker cap (default: hardware)")->check(CLI::PositiveNumber);
        sub->add_option("--seed", seed, "override the config seed");
    };
    auto* fwd = app.add_subcommand("forward", "ray data of the configured phantom");
    auto* inv = app.add_subcommand("invert", "regularized reconstruction from a dataset");
    auto* gauge = app.add_subcommand("gauge-test", "mixed transform of potential tensors");
    auto* sym = app.add_subcommand("verify-symbols", "symbol certificates");
    for (auto* s : {fwd, inv, gauge, sym}) add_common(s);
    inv->add_option("--data", data_path, "dataset CSV (default: <out>/data.csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(kConfig, "usage", e.what());
    }

    try {
        ExperimentConfig cfg = load_config(config_path);
        if (seed != 0) cfg.seed = seed;
        if (threads > 0) set_num_threads(threads);
        spdlog::info("config {} resolved: {}", config_path, to_json(cfg).dump());

        json report;
        if (fwd->parsed()) {
            report = run_forward(cfg, out_dir);
        } else if (inv->parsed()) {
            if (data_path.empty()) data_path = (std::filesystem::path(out_dir) / "data.csv").string();
            report = run_invert(cfg, data_path, out_dir, [](int k, double r) {
                if (k % 25 == 0) spdlog::info("iteration {} residual {:.6e}", k, r);
            });
        } else if (gauge->parsed()) {
            report = run_gauge_test(cfg, out_dir);
        } else {
            report = run_verify_symbols(cfg, out_dir);
        }
        report["status"] = "ok";
        std::cout << report.dump() << std::endl;
        return kOk;
    } catch (const CertificateFailure& e) {
        return fail(kCertificate, "certificate", e.what(), e.certificate);
    } catch (const ConfigDiffError& e) {
        return fail(kConfig, "config", e.what(), e.detail);
    } catch (const ConfigError& e) {
        return fail(kConfig, "config", e.what());
    } catch (const ValenceError& e) {
        return fail(kConfig, "config", e.what());
    } catch (const FormatError& e) {
        return fail(kConfig, "format", e.what());
    } catch (const ShapeError& e) {
        return fail(kConfig, "shape", e.what());
    } catch (const DomainError& e) {
        return fail(kConfig, "domain", e.what());
    } catch (const Error& e) {
        return fail(kNumerical, "numerical", e.what());
    } catch (const std::exception& e) {
        return fail(kNumerical, "internal", e.what());
    }
}

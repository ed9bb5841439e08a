// starvc: corpus synthesis, codec fitting, encoder pretraining, three-stage
// training, conversion, evaluation and grid inspection over one run directory.

#include <chrono>
#include <functional>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "starvc/cli.hpp"

using namespace starvc;

namespace {

struct Options {
    std::string config_path;
    std::string run_dir;
    std::string out;
    bool force = false;
    std::string stage = "all";
    bool allow_drift = false;
    std::string source, target_ref, checkpoint, manifest, report, in;
};

int fail(const std::string& code, const std::string& message, int exit_code) {
    std::cerr << "error[" << code << "]: " << message << '\n';
    return exit_code;
}

/// Runs `body` under the run-directory lock, echoing the config and logging
/// the outcome; errors become `error[E_CODE]: message` and the mapped exit code.
int run_command(const std::string& name, const Options& opt, bool needs_lock, bool needs_run_dir,
                const std::function<std::uint64_t(const cli::Context&)>& body) {
    std::optional<cli::Context> ctx;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        const auto config = opt.config_path.empty() ? [] {
            std::istringstream empty;
            return cfg::parse(empty);
        }()
                                                    : cfg::load(opt.config_path);
        ctx = cli::make_context(config, opt.run_dir);
        std::optional<cli::RunLock> lock;
        if (needs_lock) {
            lock.emplace(ctx->rd.root);
            cli::echo_config(ctx->rd, ctx->config);
        }
        const auto seed = body(*ctx);
        if (needs_run_dir) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            cli::log_run(ctx->rd, name, cfg::hash(ctx->config), seed, secs, "ok");
        }
        return 0;
    } catch (const Error& e) {
        if (ctx && needs_run_dir && e.code() != "E_STATE") {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            try {
                cli::log_run(ctx->rd, name, cfg::hash(ctx->config), 0, secs, "error[" + e.code() + "]");
            } catch (...) {
            }
        }
        return fail(e.code(), e.what(), e.exit_code());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail("E_IO", e.what(), static_cast<int>(ErrorKind::data));
    } catch (const std::exception& e) {
        return fail("E_INTERNAL", e.what(), static_cast<int>(ErrorKind::data));
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Text-guided voice conversion over a synthetic speech world"};
    app.require_subcommand(1);
    app.fallthrough();
    Options opt;
    app.add_option("--config", opt.config_path, "key = value run configuration (defaults if omitted)");
    app.add_option("--run-dir", opt.run_dir, "run directory (overrides run_dir in the config)");

    auto* synth = app.add_subcommand("synth-data", "render the synthetic corpus and the held-out test manifest");
    synth->add_option("--out", opt.run_dir, "run directory to write the corpus into");
    synth->add_flag("--force", opt.force, "overwrite an existing corpus");

    auto* fit = app.add_subcommand("fit-codec", "fit the residual vector quantizer on training frames");
    auto* pre = app.add_subcommand("pretrain-encoders", "pretrain and freeze the encoders; train the evaluation oracles");

    auto* train_cmd = app.add_subcommand("train", "run a training stage (asr, vc, joint) or all three in order");
    train_cmd->add_option("--stage", opt.stage, "asr | vc | joint | all")->check(CLI::IsMember({"asr", "vc", "joint", "all"}));
    train_cmd->add_flag("--allow-config-drift", opt.allow_drift, "continue although the config changed since the previous stage");

    auto* conv = app.add_subcommand("convert", "convert one utterance toward a target speaker reference");
    conv->add_option("--source", opt.source, "source utterance id")->required();
    conv->add_option("--target-ref", opt.target_ref, "target reference utterance id")->required();
    conv->add_option("--out", opt.out, "output prefix for .frames.svck, .txt and .grid")->required();
    conv->add_option("--checkpoint", opt.checkpoint, "stage name or checkpoint path (default: latest stage)");

    auto* ev = app.add_subcommand("evaluate", "score conversions on a test manifest");
    ev->add_option("--manifest", opt.manifest, "pair manifest (default: the run's test manifest)");
    ev->add_option("--checkpoint", opt.checkpoint, "stage name or checkpoint path (default: latest stage)");
    ev->add_option("--report", opt.report, "report path (default: reports/evaluate.json)");

    auto* inspect = app.add_subcommand("inspect-grid", "validate and summarize a grid dump");
    inspect->add_option("--in", opt.in, "grid dump file")->required();

    auto* show = app.add_subcommand("print-config", "print the resolved, documented configuration");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("E_USAGE", e.what(), static_cast<int>(ErrorKind::usage));
    }

    if (*synth)
        return run_command("synth-data", opt, true, true, [&](const cli::Context& c) {
            cli::synth_data(c, opt.force);
            return c.config.corpus.seed;
        });
    if (*fit)
        return run_command("fit-codec", opt, true, true, [&](const cli::Context& c) {
            cli::fit_codec(c);
            return c.config.codec.seed;
        });
    if (*pre)
        return run_command("pretrain-encoders", opt, true, true, [&](const cli::Context& c) {
            cli::pretrain_encoders(c);
            return c.config.semantic.seed;
        });
    if (*train_cmd)
        return run_command("train --stage " + opt.stage, opt, true, true, [&](const cli::Context& c) {
            if (opt.stage == "all")
                cli::train_all(c, opt.allow_drift);
            else
                cli::train_stage(c, train::parse_stage(opt.stage), opt.allow_drift);
            return c.config.model_seed;
        });
    if (*conv)
        return run_command("convert", opt, true, true, [&](const cli::Context& c) {
            cli::convert(c, opt.source, opt.target_ref, opt.out, opt.checkpoint);
            return c.config.model_seed;
        });
    if (*ev)
        return run_command("evaluate", opt, true, true, [&](const cli::Context& c) {
            cli::evaluate(c, opt.manifest.empty() ? c.rd.test_manifest() : std::filesystem::path(opt.manifest), opt.checkpoint,
                          opt.report);
            return c.config.manifest_seed;
        });
    if (*inspect)
        return run_command("inspect-grid", opt, false, false, [&](const cli::Context& c) {
            cli::inspect_grid(c, opt.in);
            return std::uint64_t{0};
        });
    if (*show)
        return run_command("print-config", opt, false, false, [&](const cli::Context& c) {
            std::cout << cfg::render(c.config);
            return std::uint64_t{0};
        });
    return 0;
}

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dipt/commands.hpp"
#include "dipt/config.hpp"
#include "dipt/runtime.hpp"

namespace {

dipt::ExperimentConfig config_or_default(const std::string& path) {
    if (path.empty()) {
        dipt::ExperimentConfig c;
        c.validate();
        return c;
    }
    return dipt::load_config(path);
}

}  // namespace

int main(int argc, char** argv) {
    dipt::tune_allocator();
    CLI::App app{"Decoupled prompt tuning for domain-incremental learning"};
    app.require_subcommand(1);

    std::string config_path, out_dir, method = "ours";
    std::vector<std::uint64_t> seeds;
    bool heldout_ftu = false, quiet = false;
    app.add_flag("-q,--quiet", quiet, "Suppress progress output on stderr");

    auto* pretrain = app.add_subcommand("pretrain", "Pretrain the backbone on the source domain and save a checkpoint");
    pretrain->add_option("--config", config_path, "Experiment config (JSON)");
    pretrain->add_option("--out", out_dir, "Output directory (overrides config.out)");

    auto* run = app.add_subcommand("run", "Run the domain-incremental stream for each seed");
    run->add_option("--config", config_path, "Experiment config (JSON)");
    run->add_option("--method", method, "ours or seqft")->check(CLI::IsMember({"ours", "seqft"}));
    run->add_option("--seed", seeds, "Seed(s); defaults to config.seeds");
    run->add_option("--out", out_dir, "Output directory (overrides config.out)");
    run->add_flag("--include-heldout-ftu", heldout_ftu, "Headline FTU includes held-out domains");

    auto* eval = app.add_subcommand("eval", "Evaluate a stored bank on every test split");
    eval->add_option("--config", config_path, "Experiment config (JSON)");
    eval->add_option("--seed", seeds, "Seed of the stored bank");
    eval->add_option("--out", out_dir, "Output directory (overrides config.out)");

    std::string report_dir;
    auto* report = app.add_subcommand("report", "Aggregate per-seed reports into mean/std tables");
    report->add_option("dir", report_dir, "Directory holding report_seed*.json files");
    report->add_option("--out", out_dir, "Same as dir");
    report->add_flag("--include-heldout-ftu", heldout_ftu, "FTU includes held-out domains");

    std::string input_dir;
    std::vector<std::string> key_sources;
    std::uint64_t augment_seed = 0;
    auto* augment = app.add_subcommand("augment", "Style-augment a directory of PNG images");
    augment->add_option("input", input_dir, "Directory of PNG images")->required();
    augment->add_option("--keys", key_sources, "Key sources: PNG directories or bank .bin files")->required();
    augment->add_option("--out", out_dir, "Output directory")->required();
    augment->add_option("--seed", augment_seed, "Seed for the mixing weights");

    std::string bank_path;
    auto* inspect = app.add_subcommand("inspect-bank", "Dump bank shapes and keys as JSON");
    inspect->add_option("bank", bank_path, "Bank path without extension");
    inspect->add_option("--config", config_path, "Experiment config (JSON)");
    inspect->add_option("--seed", seeds, "Seed of the stored bank");
    inspect->add_option("--out", out_dir, "Output directory (overrides config.out)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : dipt::cli::kConfig;
    }

    dipt::cli::Context ctx{std::cout, std::cerr, dipt::eval_threads_from_env(), !quiet};
    try {
        if (report->parsed()) {
            const std::string dir = !report_dir.empty() ? report_dir : out_dir;
            if (dir.empty()) throw dipt::cli::CommandError(dipt::cli::kConfig, "report: a directory is required");
            return dipt::cli::cmd_report(dir, heldout_ftu, ctx);
        }
        if (augment->parsed()) {
            std::vector<std::filesystem::path> keys(key_sources.begin(), key_sources.end());
            return dipt::cli::cmd_augment(input_dir, keys, out_dir, augment_seed, ctx);
        }
        const auto cfg = config_or_default(config_path);
        const std::filesystem::path dir = out_dir.empty() ? cfg.out : out_dir;
        if (pretrain->parsed()) return dipt::cli::cmd_pretrain(cfg, dir, ctx);
        if (run->parsed()) return dipt::cli::cmd_run(cfg, method, seeds.empty() ? cfg.seeds : seeds, dir, heldout_ftu, ctx);
        const auto seed = seeds.empty() ? cfg.seeds.front() : seeds.front();
        if (eval->parsed()) return dipt::cli::cmd_eval(cfg, seed, dir, ctx);
        if (inspect->parsed()) {
            const std::filesystem::path stem = bank_path.empty() ? dipt::cli::bank_stem(dir, seed) : std::filesystem::path(bank_path);
            return dipt::cli::cmd_inspect_bank(stem, ctx);
        }
    } catch (const dipt::cli::CommandError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.code();
    } catch (const dipt::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return dipt::cli::kConfig;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return dipt::cli::kInternal;
    }
    return dipt::cli::kInternal;
}

#include <cstdio>
#include <exception>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "isp/harness.hpp"

namespace {

struct CommonArgs {
    std::string config;
    std::optional<uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::string> method;
};

void add_common(CLI::App* sub, CommonArgs& args, bool with_method) {
    sub->add_option("--config", args.config, "key = value experiment config file")->required();
    sub->add_option("--seed", args.seed, "override run.seed");
    sub->add_option("--out", args.out_dir, "override the output root directory");
    if (with_method) {
        sub->add_option("--method", args.method,
                        "override prune.method (isp|imp|imp-rewind|oneshot|random|snip|progressive)");
    }
}

isp::ExperimentConfig load_config(const CommonArgs& args) {
    isp::CliOverrides over;
    over.seed = args.seed;
    over.out_dir = args.out_dir;
    over.method = args.method;
    return isp::ExperimentConfig::load(args.config, over);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse training experiment harness"};
    app.require_subcommand(1);

    CommonArgs pretrain_args, prune_args, ims_args, compare_args, sweep_args;
    std::vector<std::string> report_dirs;
    std::string report_out;

    CLI::App* pretrain = app.add_subcommand("pretrain", "train a dense model and save it");
    add_common(pretrain, pretrain_args, false);

    CLI::App* prune = app.add_subcommand("prune", "run a pruning method end to end");
    add_common(prune, prune_args, true);

    CLI::App* ims = app.add_subcommand("ims", "build an instant model soup from a dense model");
    add_common(ims, ims_args, false);

    CLI::App* compare = app.add_subcommand("mask-compare",
                                           "compare masks across criteria at fixed sparsities");
    add_common(compare, compare_args, false);

    CLI::App* sweep = app.add_subcommand("sweep", "sweep one knob across a list of values");
    add_common(sweep, sweep_args, false);

    CLI::App* report = app.add_subcommand("report", "aggregate finished runs into a CSV");
    report->add_option("dirs", report_dirs, "run directories holding run.json")->required();
    report->add_option("--out", report_out, "output CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (pretrain->parsed()) return isp::cmd_pretrain(load_config(pretrain_args));
        if (prune->parsed()) return isp::cmd_prune(load_config(prune_args));
        if (ims->parsed()) return isp::cmd_ims(load_config(ims_args));
        if (compare->parsed()) return isp::cmd_mask_compare(load_config(compare_args));
        if (sweep->parsed()) return isp::cmd_sweep(load_config(sweep_args));
        if (report->parsed()) return isp::cmd_report(report_dirs, report_out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return isp::exit_code_for_current_exception();
    }
    return 0;
}

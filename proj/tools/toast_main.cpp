#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"

int main(int argc, char** argv) {
    using namespace toast::cli;

    CLI::App app{"toast: structured attention pruning and token channel selection for ViTs"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs global;
    auto* seed_opt = app.add_option("--seed", global.seed, "Seed for every random choice");
    app.add_flag("--verbose", global.verbose, "Extra progress output on stderr");
    app.add_option("--manifest", global.manifest, "Run manifest path (default: <primary output>.manifest.json)");

    AnalyzeArgs analyze;
    auto* analyze_cmd = app.add_subcommand("analyze", "FFN redundancy report from calibration tokens");
    analyze_cmd->add_option("model", analyze.model, "Model config JSON")->required();
    analyze_cmd->add_option("weights", analyze.weights, "Weights archive")->required();
    analyze_cmd->add_option("calib", analyze.calib, "Calibration token archive")->required();
    analyze_cmd->add_option("out", analyze.out, "Report JSON output")->required();
    analyze_cmd->add_option("--csv", analyze.csv, "Also write layer,sparsity,mean_r2,eff_rank CSV");
    analyze_cmd->add_option("--eps", analyze.eps, "Near-zero threshold for sparsity");

    PruneArgs prune;
    auto* prune_cmd = app.add_subcommand("prune", "Coupled attention-width pruning");
    prune_cmd->add_option("model", prune.model, "Model config JSON")->required();
    prune_cmd->add_option("weights", prune.weights, "Weights archive")->required();
    prune_cmd->add_option("out", prune.out, "Pruned weights archive")->required();
    prune_cmd->add_option("plan", prune.plan, "Pruning plan JSON output")->required();
    prune_cmd->add_option("--ratio", prune.ratio, "Fraction of each head's dimensions to remove")->required();
    prune_cmd->add_flag("--skip-first", prune.skip_first, "Leave layer 0 unpruned");
    prune_cmd->add_option("--config-out", prune.config_out, "Pruned model config (default: <out>.model.json)");

    FlopsArgs flops;
    auto* flops_cmd = app.add_subcommand("flops", "Analytic FLOPs report (JSON on stdout)");
    flops_cmd->add_option("model", flops.model, "Model config JSON")->required();
    flops_cmd->add_option("--plan", flops.plan, "Pruning plan JSON");
    flops_cmd->add_option("--policy", flops.policy, "TCS policy JSON");

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "Forward pass over token batches");
    eval_cmd->add_option("model", eval.model, "Model config JSON")->required();
    eval_cmd->add_option("weights", eval.weights, "Weights archive")->required();
    eval_cmd->add_option("inputs", eval.inputs, "Input token archive")->required();
    eval_cmd->add_option("out", eval.out, "Output archive")->required();
    eval_cmd->add_option("--policy", eval.policy, "TCS policy JSON");
    eval_cmd->add_option("--calib", eval.calib, "Calibration tokens for a static policy");
    eval_cmd->add_option("--stats", eval.stats, "Operation-count stats JSON");
    eval_cmd->add_flag("--scale-original", eval.scale_original, "Score attention with the unpruned head width");

    ReportArgs report;
    auto* report_cmd = app.add_subcommand("report", "Render a redundancy report as CSV");
    report_cmd->add_option("report", report.report, "Report JSON from analyze")->required();
    report_cmd->add_option("--csv", report.csv, "CSV output path (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kInput;
    }
    global.seed_set = seed_opt->count() > 0;

    if (*analyze_cmd) return run_analyze(global, analyze, std::cerr);
    if (*prune_cmd) return run_prune(global, prune, std::cerr);
    if (*flops_cmd) return run_flops(global, flops, std::cout, std::cerr);
    if (*eval_cmd) return run_eval(global, eval, std::cerr);
    if (*report_cmd) return run_report(global, report, std::cout, std::cerr);
    return kInput;
}

// SPDX-License-Identifier: Apache-2.0
//
// r2f: command-line driver for the unlearning pipeline.
//
//   r2f pretrain       --config run.cfg
//   r2f collect        --config run.cfg
//   r2f train-decoder  --config run.cfg
//   r2f unlearn        --config run.cfg --method r2f
//   r2f eval           --config run.cfg --method r2f
//   r2f sweep          --config run.cfg --axis views --grid 1,2,4,8
//   r2f audit-prop1    --config run.cfg
//
// Every stage reads and writes files in the run directory (run.out_dir, or
// --out). Failures exit with a code per error kind; see `r2f --help`.

#include <CLI11.hpp>
#include <charconv>
#include <iostream>
#include <optional>

#include "r2f/config.hpp"
#include "r2f/error.hpp"
#include "r2f/pipeline.hpp"

namespace {

using namespace r2f;

struct Common {
    std::string config;
    std::int64_t seed_offset = 0;
    std::string out;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "Config file (key = value lines); defaults apply when omitted");
    sub->add_option("--seed-offset", c.seed_offset, "Shift every post-pretraining seed by this amount");
    sub->add_option("--out", c.out, "Run directory, overrides run.out_dir");
}

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
    cfg = with_seed_offset(cfg, c.seed_offset);
    if (!c.out.empty()) cfg.out_dir = c.out;
    return cfg;
}

std::vector<double> parse_grid(const std::string& text) {
    std::vector<double> out;
    std::size_t i = 0;
    while (i <= text.size() && !text.empty()) {
        const std::size_t j = std::min(text.find(',', i), text.size());
        double v = 0.0;
        const auto [p, ec] = std::from_chars(text.data() + i, text.data() + j, v);
        if (ec != std::errc{} || p != text.data() + j) fail(ErrorKind::usage, "--grid: cannot parse '" + text.substr(i, j - i) + "'");
        out.push_back(v);
        i = j + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unlearning through decoded LoRA gradients, at toy scale"};
    app.require_subcommand(1);
    app.footer("Exit codes: 0 ok, 2 usage, 3 config, 4 convergence, 5 incompatible inputs, 6 numerical, 7 shape, 8 io.");

    Common common;
    std::string method;
    std::string axis;
    std::optional<std::string> grid;

    auto* pretrain = app.add_subcommand("pretrain", "Train the proxy and target models to the accuracy gate");
    auto* collect = app.add_subcommand("collect", "Collect (LoRA gradient, full gradient) pairs on the proxy");
    auto* train_dec = app.add_subcommand("train-decoder", "Fit the gradient decoder on the collected pairs");
    auto* unlearn = app.add_subcommand("unlearn", "Unlearn the target facts on the target model");
    auto* eval = app.add_subcommand("eval", "Score an unlearned checkpoint against the target model");
    auto* sweep = app.add_subcommand("sweep", "Repeat unlearn + eval over a grid and the sweep seeds");
    auto* audit = app.add_subcommand("audit-prop1", "Check the proxy-to-target reconstruction error bound");

    for (auto* sub : {pretrain, collect, train_dec, unlearn, eval, sweep, audit}) add_common(sub, common);
    for (auto* sub : {unlearn, eval, sweep}) sub->add_option("--method", method, "r2f, lora_single, lora_multi, full_grad or grad_ascent (default: unlearn.method)");
    sweep->add_option("--axis", axis, "rank, views or eta")->required();
    sweep->add_option("--grid", grid, "Comma-separated values (default: the config's grid)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : exit_code_for(ErrorKind::usage);
    }

    try {
        const RunConfig cfg = resolve(common);
        const std::string m = method.empty() ? cfg.method : method;
        if (*pretrain) run_pretrain(cfg, std::cerr);
        if (*collect) run_collect(cfg, std::cerr);
        if (*train_dec) run_train_decoder(cfg, std::cerr);
        if (*unlearn) run_unlearn(cfg, parse_method(m), std::cerr);
        if (*eval) run_eval(cfg, method_name(parse_method(m)), std::cerr);
        if (*sweep) {
            std::vector<double> values;
            if (grid) {
                values = parse_grid(*grid);
                if (values.empty()) fail(ErrorKind::usage, "--grid is empty");
            }
            run_sweep(cfg, parse_axis(axis), values, parse_method(m), std::cerr);
        }
        if (*audit) run_audit(cfg, std::cerr);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

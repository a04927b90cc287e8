#include <CLI11.hpp>

#include <iostream>

#include "hwnas/pipeline.hpp"

using namespace hwnas;

namespace {

void apply_threads(RunConfig& cfg, std::size_t threads)
{
    if (threads > 0) {
        cfg.threads = threads;
        cfg.search.threads = threads;
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Hardware-aware multi-objective architecture search with fault-injection analysis"};
    app.require_subcommand(1);
    bool quiet = false;
    std::size_t threads = 0;
    app.add_flag("-q,--quiet", quiet, "Suppress progress messages");
    app.add_option("-j,--threads", threads, "Worker threads (0: hardware concurrency); results do not depend on it");

    std::string config_path;
    bool pipeline = false;
    auto* search = app.add_subcommand("search", "Generate data and run the evolutionary search");
    search->add_option("-c,--config", config_path, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
    search->add_flag("--pipeline", pipeline, "Continue through select, retrain, quantize, inject, sweep and report");

    std::string graph_path;
    auto* objectives = app.add_subcommand("objectives", "Print the hardware objectives of a graph file");
    objectives->add_option("graph", graph_path, "Architecture graph (JSON)")->required()->check(CLI::ExistingFile);

    std::string run_dir;
    auto stage_cmd = [&](const char* name, const char* help) {
        auto* c = app.add_subcommand(name, help);
        c->add_option("-r,--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
        return c;
    };
    auto* train_cmd = stage_cmd("train", "Select the final models and retrain them from scratch");
    auto* quantize_cmd = stage_cmd("quantize", "Quantize the retrained models with MinPQE and MaxRange");
    auto* inject_cmd = stage_cmd("inject", "Measure CCR of every quantized model at the configured bit error rates");
    auto* sweep_cmd = stage_cmd("sweep", "Sweep bit error rates for the named summary models");
    auto* report_cmd = stage_cmd("report", "Write the summary table, pairwise and regression data, and plots");

    CLI11_PARSE(app, argc, argv);

    const LogFn log = [quiet](const std::string& msg) {
        if (!quiet)
            std::cerr << msg << std::endl;
    };
    try {
        if (search->parsed()) {
            const auto text = detail::read_file(config_path);
            auto cfg = parse_run_config(text);
            apply_threads(cfg, threads);
            const auto run = open_run(text, cfg);
            log("run directory: " + run.root().string());
            if (pipeline) {
                run_pipeline(run, cfg, log);
            } else {
                stage_data(run, cfg, log);
                stage_search(run, cfg, log);
            }
        } else if (objectives->parsed()) {
            const auto g = deserialize(detail::read_file(graph_path));
            const auto c = cheap_objectives(g);
            nlohmann::ordered_json j;
            j["asi"] = c.asi;
            j["latency_ops"] = c.latency_ops;
            j["energy_transfers"] = c.energy_transfers;
            j["adcr"] = c.adcr;
            j["parameters"] = parameter_count(g);
            std::cout << j.dump(2) << '\n';
        } else {
            auto [run, cfg] = load_run(run_dir);
            apply_threads(cfg, threads);
            if (train_cmd->parsed()) {
                stage_select(run, cfg, log);
                stage_retrain(run, cfg, log);
            } else if (quantize_cmd->parsed()) {
                stage_quantize(run, cfg, log);
            } else if (inject_cmd->parsed()) {
                stage_inject(run, cfg, log);
            } else if (sweep_cmd->parsed()) {
                stage_sweep(run, cfg, log);
            } else if (report_cmd->parsed()) {
                stage_report(run, cfg, log);
            }
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.code() == Errc::ConfigError ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

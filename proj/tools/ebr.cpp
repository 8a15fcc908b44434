// Pipeline driver: ebr <stage>|all --config FILE [--stage-override k=v]... [--seed N] [--strict]
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ebr/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Divide-and-conquer embedding-based retrieval pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    bool strict = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "Pipeline config file (key = value)")->required();
        sub->add_option("--stage-override", overrides, "Override a config key, key=value (repeatable)");
        sub->add_option("--seed", seed, "Seed for every stochastic component");
        sub->add_flag("--strict", strict, "Fail on stale cached artifacts instead of recomputing");
    };

    std::vector<std::string> commands = ebr::kStages;
    commands.push_back("all");
    for (const auto& name : commands) {
        auto* sub = app.add_subcommand(name, name == "all" ? "Run every stage in order" : "Run the " + name + " stage");
        add_common(sub);
    }

    ebr::SyntheticConfig synth;
    std::string synth_out;
    auto* s = app.add_subcommand("synth", "Write a synthetic ratings file");
    s->group(""); // hidden
    s->add_option("--out", synth_out)->required();
    s->add_option("--users", synth.users);
    s->add_option("--items", synth.items);
    s->add_option("--clusters", synth.clusters);
    s->add_option("--min-len", synth.min_len);
    s->add_option("--max-len", synth.max_len);
    s->add_option("--stay-prob", synth.stay_prob);
    s->add_option("--home-weight", synth.home_weight);
    s->add_option("--seed", synth.seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (s->parsed()) {
            ebr::write_synthetic_ratings(synth, synth_out);
            return 0;
        }
        auto cfg = ebr::PipelineConfig::from_file(config_path);
        for (const auto& o : overrides) cfg.apply_override(o);
        if (seed) cfg.set_seed(*seed);
        cfg.validate(false);
        ebr::Pipeline pipe(cfg, strict, std::cerr);
        for (auto* sub : app.get_subcommands()) {
            if (sub->get_name() == "all") {
                pipe.run_all();
            } else {
                for (const auto& p : pipe.run_stage(sub->get_name())) std::cout << p.string() << "\n";
            }
        }
    } catch (const ebr::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ebr::StaleArtifactError& e) {
        std::cerr << "stale artifact: " << e.what() << "\n";
        return 4;
    } catch (const ebr::PipelineError& e) {
        std::cerr << "pipeline error: " << e.what() << "\n";
        return 3;
    } catch (const ebr::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

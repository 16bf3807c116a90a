// Command-line entry point: train / eval / verify / compare.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 runtime error,
// 4 verification failure.

#include <CLI11.hpp>

#include "qtypemix/harness.hpp"
#include "qtypemix/version.hpp"

int main(int argc, char** argv) {
    CLI::App app{"QTypeMix lab: dual-stage value decomposition on a grid-combat Dec-POMDP"};
    app.set_version_flag("--version", qtm::kVersion);
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "run a training experiment from a config file");
    std::string t_config;
    std::vector<std::string> t_sets;
    std::int64_t t_seed = -1;
    std::string t_out;
    train->add_option("--config", t_config, "experiment config (JSON)")->required();
    train->add_option("--set", t_sets, "override: dotted.key=value (repeatable)");
    train->add_option("--seed", t_seed, "master seed (shorthand for --set seed=N)");
    train->add_option("--out", t_out, "output directory (shorthand for --set out_dir=...)");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint greedily");
    std::string e_ckpt, e_scenario;
    int e_episodes = 32;
    std::uint64_t e_seed = 1;
    eval->add_option("--checkpoint", e_ckpt,
                     "checkpoint path prefix (without .bin/.json)")->required();
    eval->add_option("--scenario", e_scenario, "bundled scenario name (default: trained one)");
    eval->add_option("--episodes", e_episodes, "evaluation episodes");
    eval->add_option("--seed", e_seed, "evaluation seed");

    // verify
    auto* verify = app.add_subcommand("verify", "run a property-verification suite");
    std::string v_suite;
    std::uint64_t v_seed = 1;
    int v_trials = 0;
    verify->add_option("--suite", v_suite, "grad | mono | igm | pipe | teloss")->required();
    verify->add_option("--seed", v_seed, "suite seed");
    verify->add_option("--trials", v_trials, "trial count (0 = suite default)");

    // compare
    auto* compare = app.add_subcommand("compare", "run a variants x seeds comparison");
    std::string c_config;
    std::vector<std::string> c_variants;
    std::vector<std::uint64_t> c_seeds;
    std::vector<std::string> c_sets;
    compare->add_option("--config", c_config, "experiment config (JSON)")->required();
    compare->add_option("--variants", c_variants, "mixer variants")
        ->required()
        ->delimiter(',');
    compare->add_option("--seeds", c_seeds, "master seeds")->required()->delimiter(',');
    compare->add_option("--set", c_sets, "override: dotted.key=value (repeatable)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return qtm::harness::kConfigError;
    }

    if (*train) {
        if (t_seed >= 0) t_sets.push_back("seed=" + std::to_string(t_seed));
        if (!t_out.empty()) t_sets.push_back("out_dir=" + t_out);
        return qtm::harness::cmd_train(t_config, t_sets);
    }
    if (*eval) return qtm::harness::cmd_eval(e_ckpt, e_scenario, e_episodes, e_seed);
    if (*verify) return qtm::harness::cmd_verify(v_suite, v_seed, v_trials);
    if (*compare) return qtm::harness::cmd_compare(c_config, c_variants, c_seeds, c_sets);
    return qtm::harness::kConfigError;
}

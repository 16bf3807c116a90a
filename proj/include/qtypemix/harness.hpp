#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "qtypemix/config.hpp"
#include "qtypemix/verify.hpp"
#include "qtypemix/version.hpp"

namespace qtm::harness {

// CLI exit code classes
inline constexpr int kOk = 0;
inline constexpr int kConfigError = 2;
inline constexpr int kRuntimeError = 3;
inline constexpr int kVerifyFailure = 4;

namespace detail {

inline std::string iso_now() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline json scenario_to_json(const ScenarioConfig& c) {
    json stats = json::array();
    for (const auto& s : c.unit_stats)
        stats.push_back({{"max_health", s.max_health},
                         {"attack_damage", s.attack_damage},
                         {"attack_range", s.attack_range},
                         {"move_step", s.move_step},
                         {"sight_range", s.sight_range}});
    json j{{"name", c.name},
           {"grid_width", c.grid_width},
           {"grid_height", c.grid_height},
           {"max_steps", c.max_steps},
           {"unit_stats", stats},
           {"include_last_action", c.include_last_action},
           {"enemy_damage_scale", c.enemy_damage_scale},
           {"reward_weights",
            {{"damage_scale", c.reward_weights.damage_scale},
             {"kill_bonus", c.reward_weights.kill_bonus},
             {"win_bonus", c.reward_weights.win_bonus}}}};
    if (c.random_rosters) {
        j["random_rosters"] = true;
        j["roster_type_probs"] = c.roster_type_probs;
        j["n_random_allies"] = c.n_random_allies;
        j["n_random_enemies"] = c.n_random_enemies;
    } else {
        j["ally_roster"] = c.ally_roster;
        j["enemy_roster"] = c.enemy_roster;
    }
    return j;
}

inline void write_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        require<IoError>(out.good(), "cannot write ", tmp);
        out << content;
    }
    std::filesystem::rename(tmp, path);
}

template <class Fn>
int guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
}

struct CellResult {
    std::string variant;
    std::uint64_t seed = 0;
    bool ok = false;
    double final_win = 0, best_win = 0, auc = 0, final_return = 0;
    std::int64_t env_steps = 0;
};

// time-normalized area under the win-rate curve (mean win rate by trapezoid)
inline double curve_auc(const std::vector<std::array<double, 3>>& curve) {
    if (curve.size() < 2) return curve.empty() ? 0.0 : curve.front()[1];
    double area = 0;
    for (std::size_t i = 1; i < curve.size(); ++i)
        area += 0.5 * (curve[i][1] + curve[i - 1][1]) * (curve[i][0] - curve[i - 1][0]);
    const double span = curve.back()[0] - curve.front()[0];
    return span > 0 ? area / span : curve.back()[1];
}

inline CellResult run_cell(const ExperimentConfig& base, const std::string& variant,
                           std::uint64_t seed, const std::string& out_dir) {
    ExperimentConfig cfg = base;
    cfg.tree()["mixer"]["variant"] = variant;
    cfg.tree()["seed"] = seed;
    cfg.tree()["out_dir"] = out_dir;
    cfg.tree()["run_label"] = cat(variant, "_s", seed);
    cfg.validate();
    Trainer<float> tr(cfg.to_setup());
    tr.set_checkpoint_extra({{"experiment", cfg.tree()}});
    auto sum = tr.run();
    CellResult r;
    r.variant = variant;
    r.seed = seed;
    r.ok = true;
    r.final_win = sum.final_win_rate;
    r.best_win = sum.best_win_rate;
    r.final_return = sum.final_mean_return;
    r.auc = curve_auc(sum.eval_curve);
    r.env_steps = sum.env_steps;
    return r;
}

}  // namespace detail

// train: run one experiment from a config file, emit metrics/checkpoints and
// an atomically-written manifest.
inline int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides) {
    return detail::guarded([&] {
        const std::string started = detail::iso_now();
        ExperimentConfig cfg = ExperimentConfig::load(config_path, overrides);
        ExperimentSetup setup = cfg.to_setup();
        Trainer<float> tr(setup);
        tr.set_checkpoint_extra({{"experiment", cfg.tree()}});
        auto sum = tr.run();

        json manifest{{"config", cfg.tree()},
                      {"resolved_scenario", detail::scenario_to_json(setup.scenario)},
                      {"code_version", kVersion},
                      {"parameter_provenance", ExperimentConfig::provenance()},
                      {"started_at", started},
                      {"finished_at", detail::iso_now()},
                      {"summary",
                       {{"env_steps", sum.env_steps},
                        {"episodes", sum.episodes},
                        {"learner_steps", sum.learner_steps},
                        {"final_win_rate", sum.final_win_rate},
                        {"best_win_rate", sum.best_win_rate},
                        {"final_mean_return", sum.final_mean_return},
                        {"final_checkpoint", sum.final_checkpoint}}}};
        if (!setup.out_dir.empty())
            detail::write_atomic(setup.out_dir + "/manifest.json", manifest.dump(2) + "\n");
        std::cout << "train done: steps=" << sum.env_steps << " episodes=" << sum.episodes
                  << " learner_steps=" << sum.learner_steps
                  << " final_win_rate=" << sum.final_win_rate
                  << " best_win_rate=" << sum.best_win_rate << "\n";
        return kOk;
    });
}

// eval: load a checkpoint (its manifest embeds the experiment config),
// rebuild the networks, run greedy evaluation.
inline int cmd_eval(const std::string& ckpt_prefix, const std::string& scenario_name,
                    int n_episodes, std::uint64_t seed) {
    return detail::guarded([&] {
        require<ConfigError>(n_episodes >= 1, "eval: --episodes must be >= 1");
        json manifest = read_checkpoint_manifest(ckpt_prefix);
        require<IoError>(manifest.contains("extra") && manifest["extra"].contains("experiment"),
                         ckpt_prefix, ": checkpoint carries no experiment config");
        ExperimentConfig cfg = ExperimentConfig::from_json(manifest["extra"]["experiment"]);
        ExperimentSetup setup = cfg.to_setup();
        if (!scenario_name.empty()) setup.scenario = make_scenario(scenario_name);

        ParamSet<float> ps;
        GridSkirmishEnv probe(setup.scenario);
        auto models = Models<float>::build(ps, probe, setup.agent, setup.te, setup.mixer,
                                           setup.seed);
        load_checkpoint(ps, ckpt_prefix);  // shape mismatches surface here
        auto res = evaluate(setup.scenario, ps, models, n_episodes, seed);
        std::cout << "eval: scenario=" << setup.scenario.name << " episodes=" << n_episodes
                  << " seed=" << seed << " win_rate=" << format_number(res.win_rate)
                  << " mean_return=" << format_number(res.mean_return) << "\n";

        // result row next to the checkpoint
        namespace fs = std::filesystem;
        fs::path dir = fs::path(ckpt_prefix).parent_path();
        if (dir.empty()) dir = ".";
        const fs::path out = dir / "eval_results.csv";
        const bool fresh = !fs::exists(out);
        std::ofstream r(out, std::ios::app);
        require<IoError>(r.good(), "cannot append to ", out.string());
        if (fresh) r << "checkpoint,scenario,episodes,seed,win_rate,mean_return\n";
        r << fs::path(ckpt_prefix).filename().string() << "," << setup.scenario.name << ","
          << n_episodes << "," << seed << "," << format_number(res.win_rate) << ","
          << format_number(res.mean_return) << "\n";
        return kOk;
    });
}

// verify: run one property suite; nonzero exit on any failed property.
inline int cmd_verify(const std::string& suite, std::uint64_t seed, int trials) {
    return detail::guarded([&] {
        auto rep = run_verify_suite(suite, seed, trials);
        std::cout << "suite " << rep.suite << " (seed " << seed << ")\n";
        for (const auto& l : rep.lines) std::cout << "  " << l << "\n";
        std::cout << (rep.pass ? "PASS" : "FAIL") << ": " << rep.suite << "\n";
        return rep.pass ? kOk : kVerifyFailure;
    });
}

// compare: variants x seeds cross-product, one summary table.
inline int cmd_compare(const std::string& config_path, const std::vector<std::string>& variants,
                       const std::vector<std::uint64_t>& seeds,
                       const std::vector<std::string>& overrides) {
    return detail::guarded([&] {
        require<ConfigError>(!variants.empty(), "compare: need at least one variant");
        require<ConfigError>(!seeds.empty(), "compare: need at least one seed");
        ExperimentConfig base = ExperimentConfig::load(config_path, overrides);
        for (const auto& v : variants) parse_variant(v);  // validate early
        const std::string out_root = base.tree().at("out_dir").get<std::string>();
        std::filesystem::create_directories(out_root);
        const std::string table = out_root + "/compare_summary.csv";
        std::ofstream csv(table, std::ios::trunc);
        require<IoError>(csv.good(), "cannot write ", table);
        csv << "variant,seed,status,final_win_rate,best_win_rate,auc,final_mean_return,env_steps\n";
        csv.flush();

        bool any_failed = false;
        std::vector<detail::CellResult> cells;
        for (const auto& v : variants) {
            for (auto s : seeds) {
                detail::CellResult r;
                try {
                    r = detail::run_cell(base, v, s, cat(out_root, "/", v, "_s", s));
                } catch (const std::exception& e) {
                    std::cerr << "compare cell " << v << " seed " << s << " failed: " << e.what()
                              << "\n";
                    r.variant = v;
                    r.seed = s;
                    r.ok = false;
                    any_failed = true;
                }
                cells.push_back(r);
                csv << r.variant << "," << r.seed << "," << (r.ok ? "ok" : "failed") << ","
                    << format_number(r.final_win) << "," << format_number(r.best_win) << ","
                    << format_number(r.auc) << "," << format_number(r.final_return) << ","
                    << r.env_steps << "\n";
                csv.flush();
                std::cout << "compare: " << r.variant << " seed " << r.seed
                          << (r.ok ? cat(" final_win_rate=", format_number(r.final_win),
                                         " auc=", format_number(r.auc))
                                   : std::string(" FAILED"))
                          << "\n";
            }
        }
        // per-variant mean and sample std over successful seeds
        for (const auto& v : variants) {
            std::vector<double> fw, bw, au;
            for (const auto& c : cells)
                if (c.variant == v && c.ok) {
                    fw.push_back(c.final_win);
                    bw.push_back(c.best_win);
                    au.push_back(c.auc);
                }
            if (fw.empty()) continue;
            auto mean = [](const std::vector<double>& x) {
                double s = 0;
                for (double v2 : x) s += v2;
                return s / static_cast<double>(x.size());
            };
            auto stdev = [&](const std::vector<double>& x) {
                if (x.size() < 2) return 0.0;
                double m = mean(x), s = 0;
                for (double v2 : x) s += (v2 - m) * (v2 - m);
                return std::sqrt(s / static_cast<double>(x.size() - 1));
            };
            csv << v << ",mean,ok," << format_number(mean(fw)) << "," << format_number(mean(bw))
                << "," << format_number(mean(au)) << ",,\n";
            csv << v << ",std,ok," << format_number(stdev(fw)) << "," << format_number(stdev(bw))
                << "," << format_number(stdev(au)) << ",,\n";
            csv.flush();
        }
        std::cout << "compare table: " << table << "\n";
        return any_failed ? kRuntimeError : kOk;
    });
}

}  // namespace qtm::harness

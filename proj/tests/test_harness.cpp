#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "qtypemix/harness.hpp"

using namespace qtm;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() / ("qtm_harness_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string write_config(const fs::path& dir, const json& extra_train = {}) {
    json cfg{{"run_label", "t"},
             {"seed", 3},
             {"out_dir", (dir / "run").string()},
             {"scenario", "focus2v1"},
             {"agent", {{"rnn_hidden_dim", 8}, {"hpn_hyper_dim", 6}}},
             {"type_embed", {{"embed_dim", 4}, {"hidden_dim", 6}, {"hyper_hidden", 5}}},
             {"mixer",
              {{"n_heads", 2},
               {"attn_key_dim", 2},
               {"attn_val_dim", 2},
               {"mixing_embed_dim", 4},
               {"hypernet_embed_dim", 5}}},
             {"train",
              {{"max_step", 300},
               {"test_interval", 150},
               {"test_nepisode", 2},
               {"batch_size", 4},
               {"n_parallel_envs", 2},
               {"buffer_size", 32}}}};
    for (auto it = extra_train.begin(); it != extra_train.end(); ++it)
        cfg["train"][it.key()] = it.value();
    const std::string path = (dir / "config.json").string();
    std::ofstream out(path);
    out << cfg.dump(2);
    return path;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("experiment config: defaults, merging, overrides, canonical form") {
    SECTION("missing scenario is a config error") {
        REQUIRE_THROWS_AS(ExperimentConfig::from_json(json{{"seed", 1}}), ConfigError);
    }
    SECTION("unknown keys are errors with the field path") {
        REQUIRE_THROWS_WITH(
            ExperimentConfig::from_json(json{{"scenario", "focus2v1"},
                                             {"train", {{"learning_rate", 1.0}}}}),
            Catch::Matchers::ContainsSubstring("train.learning_rate"));
    }
    SECTION("type mismatches are errors") {
        REQUIRE_THROWS_WITH(ExperimentConfig::from_json(json{{"scenario", "focus2v1"},
                                                             {"seed", "one"}}),
                            Catch::Matchers::ContainsSubstring("seed"));
    }
    SECTION("table defaults are pre-filled") {
        auto c = ExperimentConfig::from_json(json{{"scenario", "focus2v1"}});
        REQUIRE(c.tree()["train"]["lr"].get<double>() == 1e-3);
        REQUIRE(c.tree()["train"]["gamma"].get<double>() == 0.99);
        REQUIRE(c.tree()["train"]["buffer_size"].get<int>() == 5000);
        REQUIRE(c.tree()["train"]["target_update_interval"].get<int>() == 200);
        REQUIRE(c.tree()["train"]["epsilon_anneal_time"].get<int>() == 100000);
        REQUIRE(c.tree()["train"]["adam_alpha"].get<double>() == 0.99);
        REQUIRE(c.tree()["agent"]["rnn_hidden_dim"].get<int>() == 64);
        REQUIRE(c.tree()["mixer"]["mixing_embed_dim"].get<int>() == 32);
        REQUIRE(c.tree()["mixer"]["hypernet_embed_dim"].get<int>() == 64);
    }
    SECTION("overrides take precedence over file values") {
        auto c = ExperimentConfig::from_json(
            json{{"scenario", "focus2v1"}, {"train", {{"max_step", 5}}}},
            {"train.max_step=1000", "mixer.variant=VDN", "train.double_q=true"});
        REQUIRE(c.tree()["train"]["max_step"].get<int>() == 1000);
        REQUIRE(c.tree()["mixer"]["variant"].get<std::string>() == "VDN");
        REQUIRE(c.tree()["train"]["double_q"].get<bool>() == true);
        REQUIRE_THROWS_WITH(c.apply_override("train.nope=1"),
                            Catch::Matchers::ContainsSubstring("train.nope"));
        REQUIRE_THROWS_AS(c.apply_override("no_equals"), ConfigError);
    }
    SECTION("canonical serialization is stable and sorted") {
        auto a = ExperimentConfig::from_json(json{{"scenario", "focus2v1"}, {"seed", 9}});
        auto b = ExperimentConfig::from_json(json{{"seed", 9}, {"scenario", "focus2v1"}});
        REQUIRE(a.canonical() == b.canonical());
        REQUIRE(a.canonical().find("\"agent\"") < a.canonical().find("\"train\""));
    }
    SECTION("inline scenario objects resolve with a bundled base") {
        auto c = ExperimentConfig::from_json(
            json{{"scenario", {{"base", "focus2v1"}, {"max_steps", 7}}}});
        auto sc = c.resolve_scenario();
        REQUIRE(sc.max_steps == 7);
        REQUIRE(sc.grid_width == 5);
    }
}

TEST_CASE("cmd_train: artifacts, manifest, determinism") {
    auto dir = fresh_dir("train");
    auto cfg_path = write_config(dir);

    REQUIRE(harness::cmd_train(cfg_path, {}) == harness::kOk);
    const fs::path run = dir / "run";
    REQUIRE(fs::exists(run / "metrics.csv"));
    REQUIRE(fs::exists(run / "events.jsonl"));
    REQUIRE(fs::exists(run / "manifest.json"));
    REQUIRE(fs::exists(run / "checkpoints/ckpt_final.bin"));
    REQUIRE(fs::exists(run / "checkpoints/ckpt_final.json"));

    json manifest = json::parse(slurp(run / "manifest.json"));
    REQUIRE(manifest["config"]["scenario"] == "focus2v1");
    REQUIRE(manifest["summary"]["env_steps"].get<std::int64_t>() >= 300);
    REQUIRE(manifest.contains("parameter_provenance"));
    REQUIRE(manifest["code_version"] == kVersion);

    SECTION("metrics.csv parses at every prefix and is byte-identical across reruns") {
        const std::string first = slurp(run / "metrics.csv");
        // every prefix that ends at a newline parses as CSV with the header
        REQUIRE(first.rfind("step,episode,win_rate,mean_return,td_loss,te_loss,epsilon,"
                            "grad_norm\n",
                            0) == 0);
        REQUIRE(harness::cmd_train(cfg_path, {}) == harness::kOk);
        REQUIRE(slurp(run / "metrics.csv") == first);
    }
    SECTION("missing scenario exits with the config class") {
        json bad{{"out_dir", (dir / "bad").string()}};
        std::ofstream out(dir / "bad.json");
        out << bad.dump();
        out.close();
        REQUIRE(harness::cmd_train((dir / "bad.json").string(), {}) == harness::kConfigError);
    }
    SECTION("override changes the run") {
        REQUIRE(harness::cmd_train(cfg_path,
                                   {"train.max_step=40", "out_dir=" + (dir / "r2").string()}) ==
                harness::kOk);
        json m2 = json::parse(slurp(dir / "r2" / "manifest.json"));
        REQUIRE(m2["summary"]["env_steps"].get<std::int64_t>() < 300);
    }
}

TEST_CASE("cmd_eval: checkpoint round trip, result rows, error classes") {
    auto dir = fresh_dir("eval");
    auto cfg_path = write_config(dir);
    REQUIRE(harness::cmd_train(cfg_path, {}) == harness::kOk);
    const std::string ckpt = (dir / "run" / "checkpoints" / "ckpt_final").string();

    REQUIRE(harness::cmd_eval(ckpt, "", 3, 7) == harness::kOk);
    REQUIRE(fs::exists(dir / "run" / "checkpoints" / "eval_results.csv"));
    auto rows = slurp(dir / "run" / "checkpoints" / "eval_results.csv");
    REQUIRE(rows.find("ckpt_final,focus2v1,3,7,") != std::string::npos);

    SECTION("zero episodes is an argument error") {
        REQUIRE(harness::cmd_eval(ckpt, "", 0, 7) == harness::kConfigError);
    }
    SECTION("scenario of a different shape is a descriptive load error") {
        REQUIRE(harness::cmd_eval(ckpt, "mixed4v4", 2, 7) == harness::kRuntimeError);
    }
    SECTION("corrupted checkpoints are load errors with manifest detail") {
        fs::resize_file(dir / "run" / "checkpoints" / "ckpt_final.bin", 4);
        REQUIRE(harness::cmd_eval(ckpt, "", 2, 7) == harness::kRuntimeError);
    }
}

TEST_CASE("cmd_verify: reports and exit classes") {
    SECTION("unknown suite name is an argument error") {
        REQUIRE(harness::cmd_verify("nope", 1, 10) == harness::kConfigError);
    }
    SECTION("teloss suite passes at its default trial count") {
        REQUIRE(harness::cmd_verify("teloss", 1, 0) == harness::kOk);
    }
    SECTION("igm suite passes on a reduced trial count") {
        REQUIRE(harness::cmd_verify("igm", 1, 10) == harness::kOk);
    }
}

TEST_CASE("cmd_compare: cross product rows, determinism, recomputable summary") {
    auto dir = fresh_dir("compare");
    auto cfg_path = write_config(dir, {{"max_step", 150}, {"test_interval", 100}});
    REQUIRE(harness::cmd_compare(cfg_path, {"VDN", "QMIX"}, {1, 2}, {}) == harness::kOk);
    auto table = slurp(dir / "run" / "compare_summary.csv");
    // 4 result rows + per-variant mean/std rows
    REQUIRE(table.find("VDN,1,ok,") != std::string::npos);
    REQUIRE(table.find("VDN,2,ok,") != std::string::npos);
    REQUIRE(table.find("QMIX,1,ok,") != std::string::npos);
    REQUIRE(table.find("QMIX,2,ok,") != std::string::npos);
    REQUIRE(table.find("VDN,mean,ok,") != std::string::npos);
    REQUIRE(table.find("QMIX,std,ok,") != std::string::npos);

    SECTION("identical variant and seed give identical rows") {
        auto dir2 = fresh_dir("compare2");
        auto cfg2 = write_config(dir2, {{"max_step", 150}, {"test_interval", 100}});
        REQUIRE(harness::cmd_compare(cfg2, {"VDN", "VDN"}, {5}, {}) == harness::kOk);
        auto t2 = slurp(dir2 / "run" / "compare_summary.csv");
        auto first = t2.find("VDN,5,ok,");
        auto second = t2.find("VDN,5,ok,", first + 1);
        REQUIRE(first != std::string::npos);
        REQUIRE(second != std::string::npos);
        auto line_end1 = t2.find('\n', first);
        auto line_end2 = t2.find('\n', second);
        REQUIRE(t2.substr(first, line_end1 - first) == t2.substr(second, line_end2 - second));
    }
    SECTION("mean and std are recomputable from the per-seed rows") {
        // parse the VDN rows back out
        std::vector<double> finals;
        std::istringstream in(table);
        std::string line;
        double mean_row = -1, std_row = -1;
        while (std::getline(in, line)) {
            if (line.rfind("VDN,", 0) != 0) continue;
            std::vector<std::string> f;
            std::istringstream ls(line);
            std::string tok;
            while (std::getline(ls, tok, ',')) f.push_back(tok);
            if (f[1] == "mean") mean_row = std::stod(f[3]);
            else if (f[1] == "std") std_row = std::stod(f[3]);
            else finals.push_back(std::stod(f[3]));
        }
        REQUIRE(finals.size() == 2);
        const double m = (finals[0] + finals[1]) / 2;
        const double sd = std::sqrt(((finals[0] - m) * (finals[0] - m) +
                                     (finals[1] - m) * (finals[1] - m)) /
                                    1.0);
        REQUIRE(mean_row == Catch::Approx(m).margin(1e-9));
        REQUIRE(std_row == Catch::Approx(sd).margin(1e-9));
    }
}

TEST_CASE("cli binary: usage and exit classes") {
    const char* cli = std::getenv("QTM_CLI");
    if (cli == nullptr) {
        WARN("QTM_CLI not set; skipping binary-level checks");
        return;
    }
    auto run = [&](const std::string& args) {
        int rc = std::system(cat(cli, " ", args, " >/dev/null 2>&1").c_str());
        return WEXITSTATUS(rc);
    };
    REQUIRE(run("--help") == 0);
    REQUIRE(run("--version") == 0);
    REQUIRE(run("") == harness::kConfigError);                      // missing subcommand
    REQUIRE(run("train") == harness::kConfigError);                 // missing --config
    REQUIRE(run("train --config /nonexistent.json") == harness::kConfigError);
    REQUIRE(run("verify --suite bogus") == harness::kVerifyFailure * 0 +
                                               harness::kConfigError);
    auto dir = fresh_dir("cli");
    auto cfg_path = write_config(dir, {{"max_step", 60}, {"test_interval", 50}});
    REQUIRE(run("train --config " + cfg_path + " --set train.max_step=60") == 0);
    REQUIRE(fs::exists(dir / "run" / "manifest.json"));
}

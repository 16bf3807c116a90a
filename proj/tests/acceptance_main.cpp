// Acceptance suite: one pass/fail line per criterion.
//
//   acceptance --criteria 1,2,3    run a subset
//   acceptance --all               run everything (the learning criteria are long)
//
// Exits nonzero if any selected criterion fails.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <sstream>

#include "qtypemix/config.hpp"
#include "qtypemix/harness.hpp"
#include "qtypemix/verify.hpp"

#include "flat_qmix_reference.hpp"

using namespace qtm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double now_s() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string join_lines(const VerifyReport& rep) {
    std::ostringstream os;
    for (const auto& l : rep.lines) os << "\n      " << l;
    return os.str();
}

Outcome from_report(const VerifyReport& rep, double seconds, double limit_s) {
    Outcome o;
    o.pass = rep.pass && seconds < limit_s;
    o.detail = cat("runtime ", seconds, "s (limit ", limit_s, "s)", join_lines(rep));
    return o;
}

ExperimentConfig base_config(const std::string& scenario) {
    return ExperimentConfig::from_json(json{{"scenario", scenario}});
}

fs::path work_dir() {
    fs::path p = fs::temp_directory_path() / "qtm_acceptance";
    fs::create_directories(p);
    return p;
}

// ---- criterion 6: flat-QMIX oracle equivalence -----------------------------

Outcome criterion_equivalence() {
    Outcome o;
    std::ostringstream detail;

    auto make_cfg = [](int rnn, int hyper, int embed, int hyperembed) {
        ExperimentConfig cfg = base_config("focus2v1");
        cfg.tree()["mixer"]["variant"] = "QMIX";
        cfg.tree()["train"]["alpha_te"] = 0.0;
        cfg.tree()["agent"]["rnn_hidden_dim"] = rnn;
        cfg.tree()["agent"]["hpn_hyper_dim"] = hyper;
        cfg.tree()["mixer"]["mixing_embed_dim"] = embed;
        cfg.tree()["mixer"]["hypernet_embed_dim"] = hyperembed;
        cfg.tree()["train"]["batch_size"] = 4;
        cfg.tree()["train"]["n_parallel_envs"] = 4;
        cfg.tree()["out_dir"] = "";
        cfg.validate();
        return cfg;
    };

    auto ref_dims = [](const Models<double>& M) {
        flatref::Dims d;
        d.lay = M.lay;
        d.rnn = M.agent_cfg.rnn_hidden_dim;
        d.hyper = M.agent_cfg.hpn_hyper_dim;
        d.heads = M.agent_cfg.hpn_head_num;
        d.n_actions = M.n_actions;
        d.mix_embed = M.mixer_cfg.mixing_embed_dim;
        d.hyper_embed = M.mixer_cfg.hypernet_embed_dim;
        d.state_dim = M.state_dim;
        d.n_agents = M.n_agents;
        return d;
    };

    // phase A: per-step losses on fixed batches
    {
        auto cfg = make_cfg(16, 8, 8, 16);
        cfg.tree()["seed"] = 21;
        Trainer<double> tr(cfg.to_setup());
        auto setup = tr.setup();
        EpisodeCollector<double> col(setup.scenario, 4, RngStream(21).derive(0xC0117EC7));
        // drift live params away from the targets first
        AdamState<double> adam;
        adam.beta1 = setup.train.adam_beta1();
        adam.beta2 = setup.train.adam_beta2();
        auto warm = col.collect_round(tr.params(), tr.models(), 1.0);
        std::vector<const EpisodeRecord<double>*> wptr;
        for (auto& e : warm) wptr.push_back(&e);
        auto wbatch = EpisodeBatch<double>::build(wptr, tr.models().n_types);
        for (int i = 0; i < 2; ++i)
            train_step(tr.models(), tr.params(), tr.target_params(), adam, setup.train, wbatch);

        flatref::Dims d = ref_dims(tr.models());
        double worst = 0;
        for (int bi = 0; bi < 4; ++bi) {
            auto eps = col.collect_round(tr.params(), tr.models(), 0.7);
            std::vector<const EpisodeRecord<double>*> ptrs;
            for (auto& e : eps) ptrs.push_back(&e);
            auto batch = EpisodeBatch<double>::build(ptrs, tr.models().n_types);

            Tensor<double> y = compute_targets(tr.models(), tr.target_params(), batch,
                                               setup.train.gamma, setup.train.td_lambda);
            Tape<double> tp(false);
            auto pass = run_batch<double>(tp, tr.params(), tr.models(), batch,
                                          [&](int t, const Tensor<double>&) {
                                              return batch.actions_t[static_cast<std::size_t>(t)];
                                          },
                                          false);
            const double pipeline_loss =
                tp.val(masked_mse(tp, pass.qtot, y, batch.mask)).data[0];
            const double ref_loss = flatref::td_loss(tr.params(), tr.target_params(), d, batch,
                                                     setup.train.gamma, setup.train.td_lambda);
            worst = std::max(worst, std::abs(pipeline_loss - ref_loss));
        }
        detail << "\n      loss equality: worst |pipeline - reference| = " << worst
               << " over 4 batches (tol 1e-6)";
        if (worst >= 1e-6) {
            o.detail = detail.str();
            return o;
        }
    }

    // phase B: full update trace on a tiny instance
    {
        auto cfg = make_cfg(6, 4, 4, 5);
        cfg.tree()["seed"] = 22;
        cfg.tree()["train"]["batch_size"] = 2;
        cfg.tree()["train"]["n_parallel_envs"] = 2;
        cfg.tree()["train"]["td_lambda"] = 0.4;
        cfg.validate();
        Trainer<double> tr(cfg.to_setup());
        auto setup = tr.setup();
        EpisodeCollector<double> col(setup.scenario, 2, RngStream(22).derive(0xC0117EC7));
        auto eps = col.collect_round(tr.params(), tr.models(), 1.0);
        std::vector<const EpisodeRecord<double>*> ptrs{&eps[0], &eps[1]};
        auto batch = EpisodeBatch<double>::build(ptrs, tr.models().n_types);

        ParamSet<double> ref_params = tr.params();
        flatref::Dims d = ref_dims(tr.models());
        AdamState<double> adam;
        adam.beta1 = setup.train.adam_beta1();
        adam.beta2 = setup.train.adam_beta2();
        flatref::RefAdam ref_adam;
        ref_adam.beta1 = adam.beta1;
        ref_adam.beta2 = adam.beta2;

        double worst = 0;
        for (int step = 0; step < 3; ++step) {
            train_step(tr.models(), tr.params(), tr.target_params(), adam, setup.train, batch);
            flatref::ref_train_step(ref_params, tr.target_params(), d, batch, setup.train.gamma,
                                    setup.train.td_lambda, setup.train.lr,
                                    setup.train.grad_clip_norm, ref_adam, 1e-6);
            for (std::size_t i = 0; i < ref_params.size(); ++i)
                for (std::size_t k = 0; k < ref_params.entry(i).value.data.size(); ++k)
                    worst = std::max(worst,
                                     std::abs(ref_params.entry(i).value.data[k] -
                                              tr.params().entry(i).value.data[k]));
        }
        detail << "\n      update trace: worst |param diff| = " << worst
               << " over 3 optimizer steps (tol 1e-6)";
        o.pass = worst < 1e-6;
    }
    o.detail = detail.str();
    return o;
}

// ---- criterion 7/8 helpers --------------------------------------------------

RunSummary run_learning(const std::string& scenario, const std::string& variant,
                        std::uint64_t seed, std::int64_t max_step, double stop_at,
                        const std::string& out_dir) {
    ExperimentConfig cfg = base_config(scenario);
    cfg.tree()["mixer"]["variant"] = variant;
    cfg.tree()["seed"] = seed;
    cfg.tree()["train"]["max_step"] = max_step;
    cfg.tree()["train"]["stop_at_win_rate"] = stop_at;
    cfg.tree()["out_dir"] = out_dir;
    cfg.tree()["run_label"] = cat(scenario, "_", variant, "_s", seed);
    cfg.validate();
    Trainer<float> tr(cfg.to_setup());
    tr.set_checkpoint_extra({{"experiment", cfg.tree()}});
    return tr.run();
}

Outcome criterion_learning_easy() {
    Outcome o;
    std::ostringstream detail;
    bool all = true;
    for (const char* variant : {"QTYPEMIX", "QTYPEMIX_B", "QMIX", "VDN"}) {
        for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
            const double t0 = now_s();
            auto sum = run_learning("focus2v1", variant, seed, 200000, 0.95,
                                    (work_dir() / cat("easy_", variant, "_s", seed)).string());
            const bool reached = sum.best_win_rate >= 0.95;
            all = all && reached;
            detail << "\n      " << variant << " seed " << seed << ": best win rate "
                   << sum.best_win_rate << " at <= " << sum.env_steps << " steps ("
                   << (now_s() - t0) << "s)" << (reached ? "" : "  <-- below 0.95");
        }
    }
    o.pass = all;
    o.detail = cat("all variants must reach win_rate >= 0.95 within 200k steps, 3/3 seeds",
                   detail.str());
    return o;
}

Outcome criterion_learning_hetero() {
    Outcome o;
    std::ostringstream detail;
    int reached = 0;
    double auc_qtm = 0, auc_qmix = 0, auc_b = 0;
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        const double t0 = now_s();
        auto qtm_run = run_learning("mixed6v6", "QTYPEMIX", seed, 2000000, 0.8,
                                    (work_dir() / cat("hetero_qtm_s", seed)).string());
        const bool hit = qtm_run.best_win_rate >= 0.8;
        reached += hit ? 1 : 0;
        // the baselines run to the same horizon so the curves are comparable
        const std::int64_t horizon = qtm_run.env_steps;
        auto qmix_run = run_learning("mixed6v6", "QMIX", seed, horizon, 0.0,
                                     (work_dir() / cat("hetero_qmix_s", seed)).string());
        auto b_run = run_learning("mixed6v6", "QTYPEMIX_B", seed, horizon, 0.0,
                                  (work_dir() / cat("hetero_b_s", seed)).string());
        const double a_qtm = harness::detail::curve_auc(qtm_run.eval_curve);
        const double a_qmix = harness::detail::curve_auc(qmix_run.eval_curve);
        const double a_b = harness::detail::curve_auc(b_run.eval_curve);
        auc_qtm += a_qtm;
        auc_qmix += a_qmix;
        auc_b += a_b;
        detail << "\n      seed " << seed << ": QTYPEMIX best " << qtm_run.best_win_rate
               << (hit ? " (reached 0.8)" : " (did not reach 0.8)") << " at " << qtm_run.env_steps
               << " steps; AUC qtm " << a_qtm << " vs qmix " << a_qmix << " vs qtypemix_b "
               << a_b << " (" << (now_s() - t0) << "s)";
    }
    auc_qtm /= 3;
    auc_qmix /= 3;
    auc_b /= 3;
    const bool auc_ok = auc_qtm >= auc_qmix;
    o.pass = reached >= 2 && auc_ok;
    detail << "\n      reached 0.8 on " << reached << "/3 seeds (need >= 2); mean AUC qtm "
           << auc_qtm << (auc_ok ? " >= " : " < ") << "qmix " << auc_qmix;
    detail << "\n      soft ordering report (not gated): QTYPEMIX " << auc_qtm
           << (auc_qtm >= auc_b ? " >= " : " < ") << "QTYPEMIX_B " << auc_b
           << (auc_b >= auc_qmix ? " >= " : " < ") << "QMIX " << auc_qmix;
    o.detail = detail.str();
    return o;
}

Outcome criterion_determinism() {
    Outcome o;
    const fs::path a = work_dir() / "det_a";
    const fs::path b = work_dir() / "det_b";
    fs::remove_all(a);
    fs::remove_all(b);
    json user{{"scenario", "focus2v1"},
              {"seed", 11},
              {"train", {{"max_step", 50000}}}};
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    };
    const fs::path cfg_path = work_dir() / "det_config.json";
    {
        std::ofstream out(cfg_path);
        out << user.dump(2);
    }
    int rc1 = harness::cmd_train(cfg_path.string(), {"out_dir=" + a.string()});
    int rc2 = harness::cmd_train(cfg_path.string(), {"out_dir=" + b.string()});
    if (rc1 != 0 || rc2 != 0) {
        o.detail = "training runs failed";
        return o;
    }
    const std::string ma = slurp(a / "metrics.csv");
    const std::string mb = slurp(b / "metrics.csv");
    o.pass = !ma.empty() && ma == mb;
    o.detail = cat("two 50k-step runs, metrics.csv ", ma.size(), " bytes vs ", mb.size(),
                   " bytes, byte-identical: ", o.pass ? "yes" : "NO");
    return o;
}

Outcome criterion_td_lambda() {
    Outcome o;
    std::ostringstream detail;
    ExperimentConfig cfg = base_config("focus2v1");
    cfg.tree()["mixer"]["variant"] = "QMIX";
    cfg.tree()["agent"]["rnn_hidden_dim"] = 8;
    cfg.tree()["agent"]["hpn_hyper_dim"] = 6;
    cfg.tree()["mixer"]["mixing_embed_dim"] = 4;
    cfg.tree()["mixer"]["hypernet_embed_dim"] = 5;
    cfg.tree()["out_dir"] = "";
    cfg.validate();
    Trainer<double> tr(cfg.to_setup());
    const auto& M = tr.models();

    EpisodeRecord<double> e;
    e.n_agents = M.n_agents;
    e.n_actions = M.n_actions;
    e.obs_dim = M.obs_dim;
    e.state_dim = M.state_dim;
    e.length = 3;
    e.agent_types = {0, 0};
    e.states.assign(3 * static_cast<std::size_t>(M.state_dim), 0.1);
    e.obs.assign(3 * static_cast<std::size_t>(M.n_agents) * M.obs_dim, 0.2);
    e.avail.assign(3 * static_cast<std::size_t>(M.n_agents) * M.n_actions, 1);
    e.actions.assign(3 * static_cast<std::size_t>(M.n_agents), 1);
    e.rewards = {1, 0, 2};
    e.terminated = {0, 0, 1};
    std::vector<const EpisodeRecord<double>*> eps{&e};
    auto batch = EpisodeBatch<double>::build(eps, M.n_types);

    auto y1 = compute_targets(M, tr.target_params(), batch, 0.9, 1.0);
    const double mc_err = std::max({std::abs(y1.at(0, 0) - 2.62), std::abs(y1.at(1, 0) - 1.8),
                                    std::abs(y1.at(2, 0) - 2.0)});
    detail << "\n      lambda=1 vs Monte-Carlo returns (1,0,2 / gamma .9): worst |err| "
           << mc_err << " (tol 1e-9)";

    // lambda=0 against the independent reference bootstrap
    flatref::Dims d;
    d.lay = M.lay;
    d.rnn = M.agent_cfg.rnn_hidden_dim;
    d.hyper = M.agent_cfg.hpn_hyper_dim;
    d.heads = M.agent_cfg.hpn_head_num;
    d.n_actions = M.n_actions;
    d.mix_embed = M.mixer_cfg.mixing_embed_dim;
    d.hyper_embed = M.mixer_cfg.hypernet_embed_dim;
    d.state_dim = M.state_dim;
    d.n_agents = M.n_agents;
    auto q_ref = flatref::qtot_all(tr.target_params(), d, batch, true);
    auto y0 = compute_targets(M, tr.target_params(), batch, 0.9, 0.0);
    const double one_step_err =
        std::max({std::abs(y0.at(0, 0) - (1.0 + 0.9 * q_ref[1][0])),
                  std::abs(y0.at(1, 0) - (0.0 + 0.9 * q_ref[2][0])),
                  std::abs(y0.at(2, 0) - 2.0)});
    detail << "\n      lambda=0 vs independent one-step bootstrap: worst |err| " << one_step_err
           << " (tol 1e-9)";
    o.pass = mc_err < 1e-9 && one_step_err < 1e-9;
    o.detail = detail.str();
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<int> wanted;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--all") == 0) {
            for (int c = 1; c <= 10; ++c) wanted.push_back(c);
        } else if (std::strcmp(argv[i], "--criteria") == 0 && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            std::string tok;
            while (std::getline(ss, tok, ',')) wanted.push_back(std::stoi(tok));
        }
    }
    if (wanted.empty())
        for (int c = 1; c <= 10; ++c) wanted.push_back(c);

    struct Entry {
        int id;
        const char* name;
        std::function<Outcome()> run;
    };
    const std::vector<Entry> entries = {
        {1, "gradient oracle (finite differences, rel err < 1e-4)",
         [] { const double t0 = now_s(); auto r = verify_grad(1, 20);
              return from_report(r, now_s() - t0, 120); }},
        {2, "monotonicity (min dQtot/dQi >= -1e-8, perturbation sweeps)",
         [] { const double t0 = now_s(); auto r = verify_mono(1, 1000);
              return from_report(r, now_s() - t0, 120); }},
        {3, "IGM (brute-force joint argmax, 100/100)",
         [] { const double t0 = now_s(); auto r = verify_igm(1, 100);
              return from_report(r, now_s() - t0, 60); }},
        {4, "PI/PE (500 permutation tests at 1e-6)",
         [] { const double t0 = now_s(); auto r = verify_pipe(1, 500);
              return from_report(r, now_s() - t0, 60); }},
        {5, "TE loss values and descent (intra >= 0.9, inter <= 0.1)",
         [] { const double t0 = now_s(); auto r = verify_teloss(1, 500);
              return from_report(r, now_s() - t0, 60); }},
        {6, "flat-QMIX oracle equivalence (losses and update trace, 1e-6)",
         [] { return criterion_equivalence(); }},
        {7, "learning, easy: all variants >= 0.95 on focus2v1 within 200k steps",
         [] { return criterion_learning_easy(); }},
        {8, "learning, heterogeneous: QTypeMix >= 0.8 on mixed6v6, AUC >= flat QMIX",
         [] { return criterion_learning_hetero(); }},
        {9, "determinism: byte-identical metrics.csv at 50k steps",
         [] { return criterion_determinism(); }},
        {10, "TD(lambda): lambda=1 Monte-Carlo and lambda=0 one-step targets",
         [] { return criterion_td_lambda(); }},
    };

    bool all_pass = true;
    for (int id : wanted) {
        const Entry* e = nullptr;
        for (const auto& c : entries)
            if (c.id == id) e = &c;
        if (!e) {
            std::printf("[FAIL] criterion %d: unknown id\n", id);
            all_pass = false;
            continue;
        }
        const double t0 = now_s();
        Outcome out;
        try {
            out = e->run();
        } catch (const std::exception& ex) {
            out.pass = false;
            out.detail = cat("exception: ", ex.what());
        }
        std::printf("[%s] criterion %d: %s (%.1fs)%s\n", out.pass ? "PASS" : "FAIL", e->id,
                    e->name, now_s() - t0, out.detail.c_str());
        std::fflush(stdout);
        all_pass = all_pass && out.pass;
    }
    return all_pass ? 0 : 1;
}

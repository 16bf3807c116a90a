#include <catch2/catch_amalgamated.hpp>

#include "qtypemix/grad_check.hpp"
#include "qtypemix/trainer.hpp"

using namespace qtm;
using D = double;

namespace {

// small-width experiment for fast tests
ExperimentSetup tiny_setup(const std::string& scenario, MixerVariant variant,
                           std::uint64_t seed = 1) {
    ExperimentSetup s;
    s.scenario = make_scenario(scenario);
    s.agent.rnn_hidden_dim = 8;
    s.agent.hpn_hyper_dim = 6;
    s.te.embed_dim = 4;
    s.te.hidden_dim = 6;
    s.te.hyper_hidden = 5;
    s.mixer.variant = variant;
    s.mixer.n_heads = 2;
    s.mixer.attn_key_dim = 2;
    s.mixer.attn_val_dim = 2;
    s.mixer.mixing_embed_dim = 4;
    s.mixer.hypernet_embed_dim = 5;
    s.train.n_parallel_envs = 2;
    s.train.batch_size = 2;
    s.train.buffer_size = 16;
    s.seed = seed;
    return s;
}

// zero every parameter, then bias the generated attack heads positive so the
// greedy policy always attacks when it can
template <class T>
void make_attack_policy(Models<T>& M, ParamSet<T>& ps) {
    for (std::size_t i = 0; i < ps.size(); ++i) ps.entry(i).value.zero();
    auto& b = ps.value("agent.hout2.b");
    const int H = M.agent_cfg.rnn_hidden_dim;
    for (int head = 0; head < M.agent_cfg.hpn_head_num; ++head)
        b.at(0, head * (H + 1) + H) = T(1);
}

template <class T>
std::vector<EpisodeRecord<T>> collect_n(Trainer<T>& tr, int rounds, double epsilon) {
    EpisodeCollector<T> col(tr.setup().scenario, tr.setup().train.n_parallel_envs,
                            RngStream(tr.setup().seed).derive(0xC0117EC7));
    std::vector<EpisodeRecord<T>> eps;
    for (int r = 0; r < rounds; ++r) {
        auto got = col.collect_round(tr.params(), tr.models(), epsilon);
        for (auto& e : got) eps.push_back(std::move(e));
    }
    return eps;
}

template <class T>
EpisodeBatch<T> extend_padding(const EpisodeBatch<T>& b, int extra) {
    EpisodeBatch<T> out = b;
    out.L = b.L + extra;
    out.obs_all = Tensor<T>(static_cast<std::int64_t>(out.L) * b.B * b.n, b.obs_dim);
    std::copy(b.obs_all.data.begin(), b.obs_all.data.end(), out.obs_all.data.begin());
    out.state_all = Tensor<T>(static_cast<std::int64_t>(out.L) * b.B, b.state_dim);
    std::copy(b.state_all.data.begin(), b.state_all.data.end(), out.state_all.data.begin());
    auto grow = [&](Tensor<T>& dst, const Tensor<T>& src) {
        dst = Tensor<T>(out.L, b.B);
        std::copy(src.data.begin(), src.data.end(), dst.data.begin());
    };
    grow(out.reward, b.reward);
    grow(out.term, b.term);
    grow(out.mask, b.mask);
    for (int t = b.L; t < out.L; ++t) {
        out.actions_t.push_back(std::vector<std::int64_t>(static_cast<std::size_t>(b.B) * b.n, 0));
        std::vector<std::uint8_t> av(static_cast<std::size_t>(b.B) * b.n * b.n_actions, 0);
        for (std::size_t r = 0; r < static_cast<std::size_t>(b.B) * b.n; ++r)
            av[r * static_cast<std::size_t>(b.n_actions)] = 1;
        out.avail_t.push_back(std::move(av));
        for (int bb = 0; bb < b.B; ++bb)
            out.sample_parts.push_back(out.episode_parts[static_cast<std::size_t>(bb)]);
    }
    return out;
}

}  // namespace

TEST_CASE("epsilon schedule: endpoints, midpoint, monotone clamp") {
    TrainConfig c;
    REQUIRE(epsilon_schedule(0, c) == 1.0);
    REQUIRE(epsilon_schedule(100000, c) == 0.05);
    REQUIRE(epsilon_schedule(1000000, c) == 0.05);
    REQUIRE(epsilon_schedule(50000, c) == Catch::Approx(0.525).margin(1e-12));
    double prev = 2.0;
    for (std::int64_t s = 0; s <= 120000; s += 3000) {
        double e = epsilon_schedule(s, c);
        REQUIRE(e <= prev);
        REQUIRE(e >= c.epsilon_finish);
        REQUIRE(e <= c.epsilon_start);
        prev = e;
    }
}

TEST_CASE("replay buffer: fifo eviction and distinct sampling") {
    ReplayBuffer<D> buf(4);
    for (int i = 0; i < 6; ++i) {
        EpisodeRecord<D> e;
        e.length = i;  // tag
        buf.add(std::move(e));
    }
    REQUIRE(buf.size() == 4);
    REQUIRE(buf.at(0).length == 2);  // 0 and 1 evicted in insertion order
    REQUIRE(buf.at(3).length == 5);

    RngStream rng(3);
    auto s = buf.sample(3, rng);
    std::vector<const void*> ptrs(s.begin(), s.end());
    std::sort(ptrs.begin(), ptrs.end());
    REQUIRE(std::unique(ptrs.begin(), ptrs.end()) == ptrs.end());
}

TEST_CASE("episode collection: determinism and availability contract") {
    auto setup = tiny_setup("mixed4v4", MixerVariant::kQTypeMix, 7);
    Trainer<D> tr(setup);

    auto a = collect_n(tr, 2, 0.3);
    auto b = collect_n(tr, 2, 0.3);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].length == b[i].length);
        REQUIRE(a[i].actions == b[i].actions);
        REQUIRE(a[i].rewards == b[i].rewards);
        REQUIRE(a[i].obs == b[i].obs);
        REQUIRE(a[i].won == b[i].won);
    }
    for (const auto& e : a) {
        REQUIRE(e.length >= 1);
        // exactly one terminal flag, at the end
        for (int t = 0; t < e.length; ++t)
            REQUIRE(e.terminated[static_cast<std::size_t>(t)] == (t == e.length - 1 ? 1 : 0));
        // every recorded action was available
        for (int t = 0; t < e.length; ++t)
            for (int i = 0; i < e.n_agents; ++i) {
                auto act = e.actions[static_cast<std::size_t>(t * e.n_agents + i)];
                REQUIRE(e.avail[static_cast<std::size_t>((t * e.n_agents + i) * e.n_actions +
                                                         act)] == 1);
            }
    }
}

TEST_CASE("hand-built attack policy wins focus2v1 in two steps") {
    auto setup = tiny_setup("focus2v1", MixerVariant::kQTypeMix, 5);
    Trainer<D> tr(setup);
    make_attack_policy(const_cast<Models<D>&>(tr.models()), tr.params());

    auto eps = collect_n(tr, 1, 0.0);
    for (const auto& e : eps) {
        REQUIRE(e.won);
        REQUIRE(e.length == 2);
    }

    SECTION("evaluate: always-win policy gives win_rate 1, same seed identical results") {
        auto r1 = evaluate(setup.scenario, tr.params(), tr.models(), 8, 99);
        auto r2 = evaluate(setup.scenario, tr.params(), tr.models(), 8, 99);
        REQUIRE(r1.win_rate == 1.0);
        REQUIRE(r1.win_rate == r2.win_rate);
        REQUIRE(r1.mean_return == r2.mean_return);
        // perfect 2-step wins with no ally deaths score the normalized cap
        REQUIRE(r1.mean_return == Catch::Approx(20.0).margin(1e-6));
    }
}

TEST_CASE("compute_targets: terminal, one-step, and lambda=1 hand case") {
    auto setup = tiny_setup("focus2v1", MixerVariant::kQTypeMix, 11);
    Trainer<D> tr(setup);
    auto& M = tr.models();

    // fabricated 3-step episode with rewards 1, 0, 2
    EpisodeRecord<D> e;
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

    std::vector<const EpisodeRecord<D>*> eps{&e};
    auto batch = EpisodeBatch<D>::build(eps, M.n_types);

    SECTION("lambda=1 equals the discounted Monte-Carlo return: 2.62") {
        auto y = compute_targets(M, tr.target_params(), batch, 0.9, 1.0);
        REQUIRE(y.at(2, 0) == Catch::Approx(2.0).margin(1e-9));
        REQUIRE(y.at(1, 0) == Catch::Approx(1.8).margin(1e-9));
        REQUIRE(y.at(0, 0) == Catch::Approx(2.62).margin(1e-9));
    }
    SECTION("terminal step bootstraps to the raw reward") {
        for (double lam : {0.0, 0.3, 1.0}) {
            auto y = compute_targets(M, tr.target_params(), batch, 0.9, lam);
            REQUIRE(y.at(2, 0) == Catch::Approx(2.0).margin(1e-12));
        }
    }
    SECTION("lambda=0 is the literal one-step target") {
        auto y = compute_targets(M, tr.target_params(), batch, 0.9, 0.0);
        // independent bootstrap evaluation under the target parameters
        Tape<D> tp(false);
        auto pass = run_batch<D>(tp, tr.target_params(), M, batch,
                                 [&](int t, const Tensor<D>& q) {
                                     return greedy_actions_row(
                                         q, batch.avail_t[static_cast<std::size_t>(t)],
                                         batch.n_actions);
                                 },
                                 false);
        const auto& qt = tp.val(pass.qtot);
        REQUIRE(y.at(0, 0) == Catch::Approx(1.0 + 0.9 * qt.at(1 * batch.B + 0, 0)).margin(1e-9));
        REQUIRE(y.at(1, 0) == Catch::Approx(0.0 + 0.9 * qt.at(2 * batch.B + 0, 0)).margin(1e-9));
    }
}

TEST_CASE("targets: per-agent greedy equals brute-force joint max on toy sizes") {
    // strict-monotonic mixing satisfies IGM, so the bootstrap computed from
    // per-agent argmaxes must equal the exhaustive joint maximum
    auto setup = tiny_setup("focus2v1", MixerVariant::kQTypeMix, 37);
    Trainer<D> tr(setup);
    auto& M = tr.models();
    auto eps = collect_n(tr, 1, 1.0);
    std::vector<const EpisodeRecord<D>*> ptrs{&eps[0]};
    auto batch = EpisodeBatch<D>::build(ptrs, M.n_types);

    auto greedy_pass = [&] {
        Tape<D> tp(false);
        auto pass = run_batch<D>(tp, tr.target_params(), M, batch,
                                 [&](int t, const Tensor<D>& q) {
                                     return greedy_actions_row(
                                         q, batch.avail_t[static_cast<std::size_t>(t)],
                                         batch.n_actions);
                                 },
                                 false);
        return tp.val(pass.qtot);
    }();

    // enumerate all joint tuples; each pass pins one tuple at every timestep,
    // which is valid because Q_tot at step t depends only on step-t actions
    const int A = M.n_actions;
    Tensor<D> best(batch.L, 1);
    best.fill(-1e30);
    for (int a0 = 0; a0 < A; ++a0)
        for (int a1 = 0; a1 < A; ++a1) {
            Tape<D> tp(false);
            bool valid_everywhere = true;
            auto pass = run_batch<D>(tp, tr.target_params(), M, batch,
                                     [&](int t, const Tensor<D>&) {
                                         std::vector<std::int64_t> acts;
                                         for (int b = 0; b < batch.B; ++b) {
                                             acts.push_back(a0);
                                             acts.push_back(a1);
                                         }
                                         (void)t;
                                         return acts;
                                     },
                                     false);
            for (int t = 0; t < batch.L; ++t) {
                const auto& avail = batch.avail_t[static_cast<std::size_t>(t)];
                const bool ok0 = avail[static_cast<std::size_t>(0 * batch.n_actions + a0)];
                const bool ok1 = avail[static_cast<std::size_t>(1 * batch.n_actions + a1)];
                if (!(ok0 && ok1)) continue;
                best.at(t, 0) = std::max(best.at(t, 0), tp.val(pass.qtot).at(t, 0));
            }
            (void)valid_everywhere;
        }
    for (int t = 0; t < batch.L; ++t)
        REQUIRE(greedy_pass.at(t, 0) == Catch::Approx(best.at(t, 0)).margin(1e-9));
}

TEST_CASE("masked mse: spec values") {
    Tape<D> tp;
    auto pred = tp.leaf(Tensor<D>::row({1.0, 5.0}), true);
    Tensor<D> target = Tensor<D>::row({3.0, 7.0});
    Tensor<D> mask_one = Tensor<D>::row({1.0, 0.0});
    REQUIRE(tp.val(masked_mse(tp, pred, target, mask_one)).data[0] ==
            Catch::Approx(4.0).margin(1e-12));
    Tensor<D> mask_all = Tensor<D>::row({1.0, 1.0});
    auto equal = tp.leaf(target, true);
    REQUIRE(tp.val(masked_mse(tp, equal, target, mask_all)).data[0] == 0.0);
}

TEST_CASE("td loss gradients match finite differences through the whole pipeline") {
    auto setup = tiny_setup("focus2v1", MixerVariant::kQTypeMix, 13);
    Trainer<D> tr(setup);
    auto& M = tr.models();
    auto eps = collect_n(tr, 1, 1.0);
    std::vector<const EpisodeRecord<D>*> ptrs{&eps[0], &eps[1]};
    auto batch = EpisodeBatch<D>::build(ptrs, M.n_types);
    Tensor<D> y = compute_targets(M, tr.target_params(), batch, 0.99, 0.6);

    auto build = [&](Tape<D>& tp, ParamSet<D>& p) {
        auto pass = run_batch<D>(tp, p, M, batch,
                                 [&](int t, const Tensor<D>&) {
                                     return batch.actions_t[static_cast<std::size_t>(t)];
                                 },
                                 false);
        Var<D> loss = masked_mse(tp, pass.qtot, y, batch.mask);
        Var<D> lte = te_loss<D>(tp, tp.select_rows(pass.embeddings, batch.final_step_rows),
                                batch.episode_parts, M.te_cfg.reduction);
        return tp.add(loss, tp.scale(lte, 0.1));
    };
    auto fwd = [&](ParamSet<D>& p) {
        Tape<D> tp(false);
        return tp.val(build(tp, p)).data[0];
    };
    auto bwd = [&](ParamSet<D>& p) {
        Tape<D> tp;
        tp.backward(build(tp, p));
    };
    auto rep = check_grads<D>(fwd, bwd, tr.params(), 1e-6);
    INFO("worst " << rep.worst_param << " err " << rep.max_rel_err << " over " << rep.checked);
    REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("padding steps contribute exactly zero to both losses") {
    auto setup = tiny_setup("mixed4v4", MixerVariant::kQTypeMix, 17);
    Trainer<D> tr(setup);
    auto& M = tr.models();
    auto eps = collect_n(tr, 1, 1.0);
    std::vector<const EpisodeRecord<D>*> ptrs{&eps[0], &eps[1]};
    auto batch = EpisodeBatch<D>::build(ptrs, M.n_types);
    auto padded = extend_padding(batch, 3);

    auto losses = [&](const EpisodeBatch<D>& b) {
        Tensor<D> y = compute_targets(M, tr.target_params(), b, 0.99, 0.6);
        Tape<D> tp(false);
        auto pass = run_batch<D>(tp, tr.params(), M, b,
                                 [&](int t, const Tensor<D>&) {
                                     return b.actions_t[static_cast<std::size_t>(t)];
                                 },
                                 false);
        Tape<D> tg;
        auto pass2 = run_batch<D>(tg, tr.params(), M, b,
                                  [&](int t, const Tensor<D>&) {
                                      return b.actions_t[static_cast<std::size_t>(t)];
                                  },
                                  false);
        double td = tg.val(masked_mse(tg, pass2.qtot, y, b.mask)).data[0];
        double te = tg.val(te_loss<D>(tg, tg.select_rows(pass2.embeddings, b.final_step_rows),
                                      b.episode_parts, M.te_cfg.reduction))
                        .data[0];
        return std::make_pair(td, te);
    };
    auto [td0, te0] = losses(batch);
    auto [td1, te1] = losses(padded);
    REQUIRE(td0 == Catch::Approx(td1).margin(1e-12));
    REQUIRE(te0 == Catch::Approx(te1).margin(1e-12));
}

TEST_CASE("update_target: hard copies only at the interval") {
    auto setup = tiny_setup("focus2v1", MixerVariant::kQmix, 19);
    Trainer<D> tr(setup);
    auto& ps = tr.params();
    auto& tgt = tr.target_params();

    // drift the live params
    ps.value("agent.move.w").data[0] += 1.0;
    auto before = tgt.value("agent.move.w").data[0];
    update_target(ps, tgt, 5, 10);
    REQUIRE(tgt.value("agent.move.w").data[0] == before);  // bit-identical between syncs
    update_target(ps, tgt, 10, 10);
    REQUIRE(tgt.value("agent.move.w").data[0] == ps.value("agent.move.w").data[0]);
}

TEST_CASE("train_step: loss shrinks on a frozen batch (overfit sanity)") {
    for (auto variant : {MixerVariant::kQTypeMix, MixerVariant::kQmix, MixerVariant::kVdn}) {
        auto setup = tiny_setup("focus2v1", variant, 23);
        setup.train.lr = 2e-2;
        setup.train.td_lambda = 0.0;
        setup.train.alpha_te = variant == MixerVariant::kQTypeMix ? 0.05 : 0.0;
        setup.train.target_update_interval = 1000000;  // frozen targets
        Trainer<D> tr(setup);
        auto eps = collect_n(tr, 2, 1.0);
        std::vector<const EpisodeRecord<D>*> ptrs;
        for (auto& e : eps) ptrs.push_back(&e);
        auto batch = EpisodeBatch<D>::build(ptrs, tr.models().n_types);

        AdamState<D> adam;
        adam.beta1 = setup.train.adam_beta1();
        adam.beta2 = setup.train.adam_beta2();
        double first = 0, last = 0;
        for (int it = 0; it < 50; ++it) {
            auto met = train_step(tr.models(), tr.params(), tr.target_params(), adam,
                                  setup.train, batch);
            if (it == 0) first = met.td_loss;
            last = met.td_loss;
        }
        INFO(to_string(variant) << " first " << first << " last " << last);
        REQUIRE(last < 0.1 * first);
    }
}

TEST_CASE("run loop: bounds, determinism, clean exit without training") {
    SECTION("max_step smaller than one episode: zero train steps, clean exit") {
        auto setup = tiny_setup("focus2v1", MixerVariant::kVdn, 29);
        setup.train.max_step = 1;
        setup.train.test_nepisode = 1;
        setup.train.batch_size = 8;  // one round cannot fill a batch
        Trainer<D> tr(setup);
        auto sum = tr.run();
        REQUIRE(sum.learner_steps == 0);
        REQUIRE(sum.env_steps >= 1);
    }
    SECTION("fixed seed and worker count give identical runs") {
        auto go = [] {
            auto setup = tiny_setup("focus2v1", MixerVariant::kQTypeMix, 31);
            setup.train.max_step = 400;
            setup.train.test_interval = 200;
            setup.train.test_nepisode = 2;
            Trainer<D> tr(setup);
            auto sum = tr.run();
            std::vector<double> sig;
            for (auto& row : sum.eval_curve)
                for (double v : row) sig.push_back(v);
            for (std::size_t i = 0; i < tr.params().size(); ++i)
                for (double v : tr.params().entry(i).value.data) sig.push_back(v);
            return sig;
        };
        REQUIRE(go() == go());
    }
}

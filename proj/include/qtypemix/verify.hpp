#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qtypemix/grad_check.hpp"
#include "qtypemix/trainer.hpp"

namespace qtm {

struct VerifyReport {
    std::string suite;
    bool pass = true;
    std::vector<std::string> lines;

    void add(bool ok, const std::string& line) {
        pass = pass && ok;
        lines.push_back(cat(ok ? "[ ok ] " : "[FAIL] ", line));
    }
};

namespace verify_detail {

using TapeD = Tape<double>;
using VarD = Var<double>;

inline Tensor<double> rand_tensor(std::int64_t r, std::int64_t c, RngStream& rng,
                                  double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(r, c);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

inline VarD wsum(TapeD& tp, VarD x, std::uint64_t seed) {
    RngStream rng(seed);
    Tensor<double> w(x.val().shape);
    for (auto& v : w.data) v = rng.uniform(0.25, 1.0);
    return tp.sum_all(tp.mul(x, tp.constant(w)));
}

inline ExperimentSetup tiny_pipeline_setup(std::uint64_t seed) {
    ExperimentSetup s;
    s.scenario = make_scenario("focus2v1");
    s.agent.rnn_hidden_dim = 6;
    s.agent.hpn_hyper_dim = 4;
    s.agent.hpn_head_num = 2;
    s.te.embed_dim = 3;
    s.te.hidden_dim = 4;
    s.te.hyper_hidden = 4;
    s.mixer.variant = MixerVariant::kQTypeMix;
    s.mixer.n_heads = 2;
    s.mixer.attn_key_dim = 2;
    s.mixer.attn_val_dim = 2;
    s.mixer.mixing_embed_dim = 3;
    s.mixer.hypernet_embed_dim = 4;
    s.train.n_parallel_envs = 2;
    s.train.batch_size = 2;
    s.seed = seed;
    return s;
}

}  // namespace verify_detail

// Criterion: every layer and composite matches central finite differences
// with relative error < 1e-4 at double precision, over `seeds` seeds each.
inline VerifyReport verify_grad(std::uint64_t seed, int seeds_per_structure = 20) {
    using namespace verify_detail;
    VerifyReport rep;
    rep.suite = "grad";

    struct Structure {
        std::string name;
        // returns max relative error for one seed
        std::function<double(std::uint64_t)> run;
    };
    std::vector<Structure> structures;

    auto simple_fd = [](ParamSet<double>& ps,
                        const std::function<VarD(TapeD&, ParamSet<double>&)>& build) {
        auto fwd = [&](ParamSet<double>& p) {
            TapeD tp(false);
            return tp.val(build(tp, p)).data[0];
        };
        auto bwd = [&](ParamSet<double>& p) {
            TapeD tp;
            tp.backward(build(tp, p));
        };
        return check_grads<double>(fwd, bwd, ps, 1e-6).max_rel_err;
    };

    structures.push_back({"linear", [&](std::uint64_t s) {
                              RngStream rng(s);
                              ParamSet<double> ps;
                              ps.add("w", {5, 4}).init_uniform(rng, 0.7);
                              ps.add("b", {1, 4}).init_uniform(rng, 0.7);
                              Tensor<double> x = rand_tensor(3, 5, rng);
                              return simple_fd(ps, [&](TapeD& tp, ParamSet<double>& p) {
                                  return wsum(tp,
                                              linear(tp, tp.constant(x), tp.param(p, "w"),
                                                     tp.param(p, "b")),
                                              s + 1);
                              });
                          }});
    structures.push_back({"gru_step", [&](std::uint64_t s) {
                              RngStream rng(s);
                              ParamSet<double> ps;
                              auto gru = GruCell<double>::init(ps, "g", 4, 5, rng);
                              Tensor<double> x = rand_tensor(3, 4, rng);
                              Tensor<double> h = rand_tensor(3, 5, rng);
                              return simple_fd(ps, [&](TapeD& tp, ParamSet<double>& p) {
                                  auto h1 = gru.step(tp, p, tp.constant(x), tp.constant(h));
                                  auto h2 = gru.step(tp, p, tp.constant(x), h1);
                                  return wsum(tp, h2, s + 1);
                              });
                          }});
    structures.push_back({"scaled_dot_attention", [&](std::uint64_t s) {
                              RngStream rng(s);
                              ParamSet<double> ps;
                              ps.add("q", {3, 4}).init_uniform(rng, 1.0);
                              ps.add("k", {5, 4}).init_uniform(rng, 1.0);
                              ps.add("v", {5, 3}).init_uniform(rng, 1.0);
                              return simple_fd(ps, [&](TapeD& tp, ParamSet<double>& p) {
                                  return wsum(tp,
                                              scaled_dot_attention(tp, tp.param(p, "q"),
                                                                   tp.param(p, "k"),
                                                                   tp.param(p, "v")),
                                              s + 1);
                              });
                          }});
    structures.push_back({"multi_head_attention", [&](std::uint64_t s) {
                              RngStream rng(s);
                              ParamSet<double> ps;
                              AttentionSpec spec;
                              spec.n_heads = 2;
                              spec.d_k = 3;
                              spec.d_v = 2;
                              spec.q_dim = spec.k_dim = spec.v_dim = 4;
                              spec.out_dim = 3;
                              auto mha = MultiHeadAttention<double>::init(ps, "m", spec, rng);
                              ps.add("q", {3, 4}).init_uniform(rng, 1.0);
                              ps.add("kv", {4, 4}).init_uniform(rng, 1.0);
                              return simple_fd(ps, [&](TapeD& tp, ParamSet<double>& p) {
                                  return wsum(tp,
                                              mha.apply(tp, p, tp.param(p, "q"),
                                                        tp.param(p, "kv"), tp.param(p, "kv")),
                                              s + 1);
                              });
                          }});
    structures.push_back({"activations", [&](std::uint64_t s) {
                              RngStream rng(s);
                              ParamSet<double> ps;
                              ps.add("a", {4, 6}).init_uniform(rng, 1.0);
                              return simple_fd(ps, [&](TapeD& tp, ParamSet<double>& p) {
                                  auto a = tp.param(p, "a");
                                  auto y = tp.add(tp.elu(a), tp.tanh_act(a));
                                  y = tp.add(y, tp.sigmoid(a));
                                  y = tp.add(y, tp.relu(a));
                                  y = tp.add(y, tp.absval(a));
                                  y = tp.add(y, tp.softmax_rows(a));
                                  return wsum(tp, y, s + 1);
                              });
                          }});
    structures.push_back({"cosine_similarity", [&](std::uint64_t s) {
                              RngStream rng(s);
                              ParamSet<double> ps;
                              ps.add("a", {1, 6}).init_uniform(rng, 1.0);
                              ps.add("b", {1, 6}).init_uniform(rng, 1.0);
                              return simple_fd(ps, [&](TapeD& tp, ParamSet<double>& p) {
                                  return cosine_similarity(tp, tp.param(p, "a"),
                                                           tp.param(p, "b"));
                              });
                          }});
    structures.push_back({"hypernet_embedding", [&](std::uint64_t s) {
                              RngStream rng(s);
                              ParamSet<double> ps;
                              ps.add("w1", {4, 5}).init_uniform(rng, 0.6);
                              ps.add("b1", {1, 5}).init_uniform(rng, 0.6);
                              ps.add("w2", {5, 12}).init_uniform(rng, 0.6);
                              ps.add("b2", {1, 12}).init_uniform(rng, 0.6);
                              Tensor<double> x = rand_tensor(6, 4, rng);
                              return simple_fd(ps, [&](TapeD& tp, ParamSet<double>& p) {
                                  auto y = tp.hyper_embed_sum(x, tp.param(p, "w1"),
                                                              tp.param(p, "b1"),
                                                              tp.param(p, "w2"),
                                                              tp.param(p, "b2"), 2, 3);
                                  return wsum(tp, y, s + 1);
                              });
                          }});
    structures.push_back({"type_embed_extractor", [&](std::uint64_t s) {
                              RngStream rng(s);
                              ParamSet<double> ps;
                              TypeEmbedConfig cfg;
                              cfg.embed_dim = 3;
                              cfg.hidden_dim = 4;
                              cfg.hyper_hidden = 4;
                              auto te = TypeEmbedExtractor<double>::init(ps, cfg, 5, 4, rng);
                              Tensor<double> obs = rand_tensor(4, 5, rng);
                              Tensor<double> st = rand_tensor(2, 4, rng);
                              return simple_fd(ps, [&](TapeD& tp, ParamSet<double>& p) {
                                  auto o1 = te.forward(tp, p, obs,
                                                       tp.constant(te.initial_hidden(4)), st, 2);
                                  auto o2 = te.forward(tp, p, obs, o1.hidden, st, 2);
                                  return wsum(tp, o2.embedding, s + 1);
                              });
                          }});
    structures.push_back({"hpn_agent", [&](std::uint64_t s) {
                              RngStream rng(s);
                              ParamSet<double> ps;
                              ObsLayout lay;
                              lay.own_dim = 3;
                              lay.ally_feat = 4;
                              lay.n_ally_slots = 2;
                              lay.enemy_feat = 5;
                              lay.n_enemy_slots = 2;
                              AgentConfig cfg;
                              cfg.rnn_hidden_dim = 6;
                              cfg.hpn_hyper_dim = 4;
                              cfg.hpn_head_num = 2;
                              auto agent = HpnAgent<double>::init(ps, cfg, lay, 8, rng);
                              Tensor<double> obs = rand_tensor(3, lay.flat_dim(), rng, 0, 1);
                              return simple_fd(ps, [&](TapeD& tp, ParamSet<double>& p) {
                                  auto st = agent.forward(tp, p, obs,
                                                          tp.constant(agent.initial_hidden(3)));
                                  auto st2 = agent.forward(tp, p, obs, st.hidden);
                                  return tp.sum_all(st2.q);
                              });
                          }});
    for (auto mode : {MixerMode::kStrictMonotonic, MixerMode::kPaperFaithful}) {
        structures.push_back(
            {cat("qtypemix_joint_", to_string(mode)), [mode, &simple_fd](std::uint64_t s) {
                 RngStream rng(s);
                 ParamSet<double> ps;
                 MixerConfig cfg;
                 cfg.variant = MixerVariant::kQTypeMix;
                 cfg.mode = mode;
                 cfg.n_heads = 2;
                 cfg.attn_key_dim = 2;
                 cfg.attn_val_dim = 2;
                 cfg.mixing_embed_dim = 3;
                 cfg.hypernet_embed_dim = 4;
                 auto net = MixerNet<double>::init(ps, cfg, 3, 2, 5, 4, rng);
                 auto parts = std::vector<TypePartition>{
                     TypePartition::from_types({0, 1, 0}, 2)};
                 auto masks = TypeMasks<double>::build(parts, 2, 3);
                 Tensor<double> U = rand_tensor(1, 3, rng);
                 Tensor<double> keys = rand_tensor(3, 4, rng);
                 Tensor<double> st = rand_tensor(1, 5, rng);
                 return simple_fd(ps, [&](TapeD& tp, ParamSet<double>& p) {
                     auto q = net.joint(tp, p, tp.constant(U), tp.constant(keys),
                                        tp.constant(st), masks);
                     return tp.sum_all(tp.mul(q, q));
                 });
             }});
    }
    structures.push_back({"qmix_mixer", [&](std::uint64_t s) {
                              RngStream rng(s);
                              ParamSet<double> ps;
                              MixerConfig cfg;
                              cfg.variant = MixerVariant::kQmix;
                              cfg.mixing_embed_dim = 3;
                              cfg.hypernet_embed_dim = 4;
                              auto net = MixerNet<double>::init(ps, cfg, 3, 1, 5, 0, rng);
                              TypeMasks<double> none;
                              Tensor<double> U = rand_tensor(2, 3, rng);
                              Tensor<double> st = rand_tensor(2, 5, rng);
                              return simple_fd(ps, [&](TapeD& tp, ParamSet<double>& p) {
                                  auto q = net.joint(tp, p, tp.constant(U), tp.constant(U),
                                                     tp.constant(st), none);
                                  return tp.sum_all(tp.mul(q, q));
                              });
                          }});
    structures.push_back({"td_pipeline", [&](std::uint64_t s) {
                              auto setup = verify_detail::tiny_pipeline_setup(s);
                              Trainer<double> tr(setup);
                              EpisodeCollector<double> col(
                                  setup.scenario, 2, RngStream(s).derive(0xC0117EC7));
                              auto eps = col.collect_round(tr.params(), tr.models(), 1.0);
                              std::vector<const EpisodeRecord<double>*> ptrs{&eps[0], &eps[1]};
                              auto batch =
                                  EpisodeBatch<double>::build(ptrs, tr.models().n_types);
                              Tensor<double> y = compute_targets(
                                  tr.models(), tr.target_params(), batch, 0.99, 0.6);
                              auto build = [&](TapeD& tp, ParamSet<double>& p) {
                                  auto pass = run_batch<double>(
                                      tp, p, tr.models(), batch,
                                      [&](int t, const Tensor<double>&) {
                                          return batch.actions_t[static_cast<std::size_t>(t)];
                                      },
                                      false);
                                  auto loss = masked_mse(tp, pass.qtot, y, batch.mask);
                                  auto lte = te_loss<double>(
                                      tp, tp.select_rows(pass.embeddings, batch.final_step_rows),
                                      batch.episode_parts, tr.models().te_cfg.reduction);
                                  return tp.add(loss, tp.scale(lte, 0.1));
                              };
                              auto fwd = [&](ParamSet<double>& p) {
                                  TapeD tp(false);
                                  return tp.val(build(tp, p)).data[0];
                              };
                              auto bwd = [&](ParamSet<double>& p) {
                                  TapeD tp;
                                  tp.backward(build(tp, p));
                              };
                              return check_grads<double>(fwd, bwd, tr.params(), 1e-6)
                                  .max_rel_err;
                          }});

    for (auto& st : structures) {
        double worst = 0;
        for (int k = 0; k < seeds_per_structure; ++k)
            worst = std::max(worst, st.run(seed + 1000 * static_cast<std::uint64_t>(k) + 17));
        rep.add(worst < 1e-4, cat(st.name, ": ", seeds_per_structure,
                                  " seeds, max rel err ", worst));
    }
    return rep;
}

// Criterion: in STRICT_MONOTONIC mode, min autodiff dQ_tot/dQ_i >= -1e-8 and
// finite upward perturbations never decrease Q_tot.
inline VerifyReport verify_mono(std::uint64_t seed, int trials = 1000) {
    using namespace verify_detail;
    VerifyReport rep;
    rep.suite = "mono";
    const int n = 4, m = 2, sd = 6, kd = 5;
    for (auto variant : {MixerVariant::kQTypeMix, MixerVariant::kQTypeMixB, MixerVariant::kQmix,
                         MixerVariant::kVdn}) {
        double min_grad = 1e300;
        double worst_drop = 0;  // most negative (Q_perturbed - Q_base)
        RngStream rng(seed ^ 0xB0B0);
        for (int trial = 0; trial < trials; ++trial) {
            ParamSet<double> ps;
            MixerConfig cfg;
            cfg.variant = variant;
            cfg.mode = MixerMode::kStrictMonotonic;
            cfg.n_heads = 2;
            cfg.attn_key_dim = 2;
            cfg.attn_val_dim = 2;
            cfg.mixing_embed_dim = 4;
            cfg.hypernet_embed_dim = 5;
            RngStream init = rng.derive(static_cast<std::uint64_t>(trial));
            auto net = MixerNet<double>::init(ps, cfg, n, m, sd, kd, init);
            auto parts = std::vector<TypePartition>{TypePartition::from_types({0, 1, 0, 1}, m)};
            auto masks = TypeMasks<double>::build(parts, m, n);
            Tensor<double> U = rand_tensor(1, n, init, -2, 2);
            Tensor<double> keys = rand_tensor(n, kd, init);
            Tensor<double> st = rand_tensor(1, sd, init);

            TapeD tp;
            auto uvar = tp.leaf(U, true);
            auto q = net.joint(tp, ps, uvar, tp.constant(keys), tp.constant(st), masks);
            tp.backward(tp.reshape(q, {1}));
            for (double g : tp.grad_of(uvar).data) min_grad = std::min(min_grad, g);
            const double base = tp.val(q).data[0];
            for (double eps_up : {1e-3, 0.1}) {
                for (int i = 0; i < n; ++i) {
                    Tensor<double> U2 = U;
                    U2.at(0, i) += eps_up;
                    TapeD t2(false);
                    double up = t2.val(net.joint(t2, ps, t2.constant(U2), t2.constant(keys),
                                                 t2.constant(st), masks))
                                    .data[0];
                    worst_drop = std::min(worst_drop, up - base);
                }
            }
        }
        bool ok = min_grad >= -1e-8 && worst_drop >= -1e-12;
        rep.add(ok, cat(to_string(variant), ": ", trials, " trials, min dQtot/dQi ", min_grad,
                        ", worst perturbation delta ", worst_drop));
    }
    return rep;
}

// Criterion: brute-force joint argmax equals the per-agent argmax tuple on
// random 3-agent / 4-action instances in STRICT_MONOTONIC mode.
inline VerifyReport verify_igm(std::uint64_t seed, int trials = 100) {
    using namespace verify_detail;
    VerifyReport rep;
    rep.suite = "igm";
    const int n = 3, actions = 4, m = 2, sd = 5, kd = 4;
    for (auto variant : {MixerVariant::kQTypeMix, MixerVariant::kQmix}) {
        int matches = 0;
        RngStream rng(seed ^ 0x16A);
        for (int trial = 0; trial < trials; ++trial) {
            ParamSet<double> ps;
            MixerConfig cfg;
            cfg.variant = variant;
            cfg.mode = MixerMode::kStrictMonotonic;
            cfg.n_heads = 2;
            cfg.attn_key_dim = 2;
            cfg.attn_val_dim = 2;
            cfg.mixing_embed_dim = 4;
            cfg.hypernet_embed_dim = 5;
            RngStream init = rng.derive(static_cast<std::uint64_t>(trial));
            auto net = MixerNet<double>::init(ps, cfg, n, m, sd, kd, init);
            auto parts = std::vector<TypePartition>{TypePartition::from_types({0, 1, 0}, m)};
            auto masks = TypeMasks<double>::build(parts, m, n);
            Tensor<double> keys = rand_tensor(n, kd, init);
            Tensor<double> st = rand_tensor(1, sd, init);
            Tensor<double> qtable = rand_tensor(n, actions, init);

            std::vector<int> greedy(n);
            for (int i = 0; i < n; ++i) {
                int best = 0;
                for (int a = 1; a < actions; ++a)
                    if (qtable.at(i, a) > qtable.at(i, best)) best = a;
                greedy[static_cast<std::size_t>(i)] = best;
            }
            double best_q = -1e300;
            std::vector<int> best_joint(n);
            for (int a0 = 0; a0 < actions; ++a0)
                for (int a1 = 0; a1 < actions; ++a1)
                    for (int a2 = 0; a2 < actions; ++a2) {
                        Tensor<double> U(1, n);
                        U.at(0, 0) = qtable.at(0, a0);
                        U.at(0, 1) = qtable.at(1, a1);
                        U.at(0, 2) = qtable.at(2, a2);
                        TapeD tp(false);
                        double q = tp.val(net.joint(tp, ps, tp.constant(U), tp.constant(keys),
                                                    tp.constant(st), masks))
                                       .data[0];
                        if (q > best_q) {
                            best_q = q;
                            best_joint = {a0, a1, a2};
                        }
                    }
            if (best_joint == greedy) ++matches;
        }
        rep.add(matches == trials,
                cat(to_string(variant), ": ", matches, "/", trials, " joint argmax matches"));
    }
    return rep;
}

// Criterion: move q-values invariant under ally-entity permutations and
// attack q-values co-permuting with enemy entities, at single precision.
inline VerifyReport verify_pipe(std::uint64_t seed, int trials = 500) {
    VerifyReport rep;
    rep.suite = "pipe";
    using F = float;
    ObsLayout lay;
    lay.own_dim = 6;
    lay.ally_feat = 8;
    lay.n_ally_slots = 5;
    lay.enemy_feat = 9;
    lay.n_enemy_slots = 6;
    AgentConfig cfg;  // published widths
    RngStream init(seed ^ 0x41F);
    ParamSet<F> ps;
    auto agent = HpnAgent<F>::init(ps, cfg, lay, 6 + lay.n_enemy_slots, init);

    double worst_pi = 0, worst_pe = 0;
    RngStream rng(seed ^ 0x9A41);
    for (int trial = 0; trial < trials; ++trial) {
        Tensor<F> obs(2, lay.flat_dim());
        for (auto& v : obs.data) v = static_cast<F>(rng.uniform(0, 1));
        // random permutations
        std::vector<int> pa(lay.n_ally_slots), pe(lay.n_enemy_slots);
        for (int i = 0; i < lay.n_ally_slots; ++i) pa[static_cast<std::size_t>(i)] = i;
        for (int i = 0; i < lay.n_enemy_slots; ++i) pe[static_cast<std::size_t>(i)] = i;
        for (int i = lay.n_ally_slots - 1; i > 0; --i)
            std::swap(pa[static_cast<std::size_t>(i)],
                      pa[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
        for (int i = lay.n_enemy_slots - 1; i > 0; --i)
            std::swap(pe[static_cast<std::size_t>(i)],
                      pe[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);

        Tensor<F> obs_pa = obs, obs_pe = obs;
        for (std::int64_t r = 0; r < 2; ++r) {
            for (int s = 0; s < lay.n_ally_slots; ++s)
                for (int k = 0; k < lay.ally_feat; ++k)
                    obs_pa.at(r, lay.ally_offset() + s * lay.ally_feat + k) =
                        obs.at(r, lay.ally_offset() +
                                      pa[static_cast<std::size_t>(s)] * lay.ally_feat + k);
            for (int s = 0; s < lay.n_enemy_slots; ++s)
                for (int k = 0; k < lay.enemy_feat; ++k)
                    obs_pe.at(r, lay.enemy_offset() + s * lay.enemy_feat + k) =
                        obs.at(r, lay.enemy_offset() +
                                      pe[static_cast<std::size_t>(s)] * lay.enemy_feat + k);
        }
        auto q_of = [&](const Tensor<F>& o) {
            Tape<F> tp(false);
            return tp.val(agent.forward(tp, ps, o, tp.constant(agent.initial_hidden(2))).q);
        };
        Tensor<F> q0 = q_of(obs), q1 = q_of(obs_pa), q2 = q_of(obs_pe);
        for (std::int64_t r = 0; r < 2; ++r) {
            for (int a = 0; a < 6 + lay.n_enemy_slots; ++a)
                worst_pi = std::max(worst_pi,
                                    std::abs(double(q1.at(r, a)) - double(q0.at(r, a))));
            for (int a = 0; a < 6; ++a)
                worst_pe = std::max(worst_pe,
                                    std::abs(double(q2.at(r, a)) - double(q0.at(r, a))));
            for (int s = 0; s < lay.n_enemy_slots; ++s)
                worst_pe = std::max(
                    worst_pe,
                    std::abs(double(q2.at(r, 6 + s)) -
                             double(q0.at(r, 6 + pe[static_cast<std::size_t>(s)]))));
        }
    }
    rep.add(worst_pi < 1e-6, cat("permutation invariance: ", trials,
                                 " trials, worst |dq| ", worst_pi));
    rep.add(worst_pe < 1e-6, cat("permutation equivariance: ", trials,
                                 " trials, worst |dq| ", worst_pe));
    return rep;
}

// Criterion: hand-derived TE loss values plus descent to clustered embeddings
// (intra-type cosine >= 0.9, inter-type <= 0.1 after `steps` optimizer steps).
inline VerifyReport verify_teloss(std::uint64_t seed, int steps = 500) {
    using namespace verify_detail;
    VerifyReport rep;
    rep.suite = "teloss";

    {
        TapeD tp;
        auto p_same = TypePartition::from_types({0, 0}, 1);
        auto e1 = tp.leaf(Tensor<double>::from_rows(2, 2, {1, 0, 1, 0}), true);
        double v1 = tp.val(te_loss<double>(tp, e1, {p_same},
                                           TypeEmbedConfig::Reduction::kSum))
                        .data[0];
        rep.add(std::abs(v1 + 4.0) < 1e-9, cat("same-type identical pair: ", v1, " vs -4"));

        auto p_diff = TypePartition::from_types({0, 1}, 2, true);
        auto e2 = tp.leaf(Tensor<double>::from_rows(2, 2, {1, 0, 0, 1}), true);
        double v2 = tp.val(te_loss<double>(tp, e2, {p_diff},
                                           TypeEmbedConfig::Reduction::kSum))
                        .data[0];
        rep.add(std::abs(v2 + 2.0) < 1e-9, cat("orthogonal cross-type pair: ", v2, " vs -2"));

        const double r = std::sqrt(2.0) / 2.0;
        auto e3 = tp.leaf(Tensor<double>::from_rows(2, 2, {1, 0, r, r}), true);
        double v3 = tp.val(te_loss<double>(tp, e3, {p_diff},
                                           TypeEmbedConfig::Reduction::kSum))
                        .data[0];
        rep.add(std::abs(v3 + 0.5858) < 1e-3, cat("45-degree cross-type pair: ", v3,
                                                  " vs -0.5858"));
    }

    // descent on a frozen two-type observation set
    const int n = 6, obs_dim = 10, state_dim = 8, hist = 4;
    RngStream rng(seed ^ 0x7E10);
    ParamSet<double> ps;
    TypeEmbedConfig cfg;
    cfg.embed_dim = 16;
    cfg.hidden_dim = 32;
    cfg.hyper_hidden = 32;
    auto te = TypeEmbedExtractor<double>::init(ps, cfg, obs_dim, state_dim, rng);
    std::vector<Tensor<double>> obs_hist;
    for (int t = 0; t < hist; ++t) obs_hist.push_back(rand_tensor(n, obs_dim, rng, 0, 1));
    Tensor<double> state = rand_tensor(1, state_dim, rng, 0, 1);
    auto part = TypePartition::from_types({0, 0, 0, 1, 1, 1}, 2);

    auto embeddings = [&](TapeD& tp, ParamSet<double>& p) {
        auto h = tp.constant(te.initial_hidden(n));
        Var<double> e{};
        for (int t = 0; t < hist; ++t) {
            auto out = te.forward(tp, p, obs_hist[static_cast<std::size_t>(t)], h, state, n);
            h = out.hidden;
            e = out.embedding;
        }
        return e;
    };
    AdamState<double> adam;
    adam.beta2 = 0.99;
    for (int it = 0; it < steps; ++it) {
        TapeD tp;
        auto loss = te_loss<double>(tp, embeddings(tp, ps), {part},
                                    TypeEmbedConfig::Reduction::kMean);
        ps.clear_grads();
        tp.backward(loss);
        adam_step(ps, adam, 3e-3);
    }
    TapeD tp(false);
    const Tensor<double>& E = tp.val(embeddings(tp, ps));
    auto cos_of = [&](int i, int j) {
        double d = 0, ni = 0, nj = 0;
        for (int c = 0; c < cfg.embed_dim; ++c) {
            d += E.at(i, c) * E.at(j, c);
            ni += E.at(i, c) * E.at(i, c);
            nj += E.at(j, c) * E.at(j, c);
        }
        return d / std::max(std::sqrt(ni) * std::sqrt(nj), 1e-8);
    };
    double intra = 0, inter = 0;
    int n_intra = 0, n_inter = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            if (indicator(i, j, part) < 0) {
                intra += cos_of(i, j);
                ++n_intra;
            } else {
                inter += cos_of(i, j);
                ++n_inter;
            }
        }
    intra /= n_intra;
    inter /= n_inter;
    rep.add(intra >= 0.9, cat("descent: mean intra-type cosine ", intra, " (want >= 0.9) after ",
                              steps, " steps"));
    rep.add(inter <= 0.1, cat("descent: mean inter-type cosine ", inter, " (want <= 0.1) after ",
                              steps, " steps"));
    return rep;
}

inline VerifyReport run_verify_suite(const std::string& suite, std::uint64_t seed, int trials) {
    if (suite == "grad") return verify_grad(seed, trials > 0 ? trials : 20);
    if (suite == "mono") return verify_mono(seed, trials > 0 ? trials : 1000);
    if (suite == "igm") return verify_igm(seed, trials > 0 ? trials : 100);
    if (suite == "pipe") return verify_pipe(seed, trials > 0 ? trials : 500);
    if (suite == "teloss") return verify_teloss(seed, trials > 0 ? trials : 500);
    throw ConfigError(cat("unknown verify suite '", suite,
                          "' (grad, mono, igm, pipe, teloss)"));
}

}  // namespace qtm

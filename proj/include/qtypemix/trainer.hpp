#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qtypemix/agent.hpp"
#include "qtypemix/checkpoint.hpp"
#include "qtypemix/env.hpp"
#include "qtypemix/episode.hpp"
#include "qtypemix/metrics.hpp"
#include "qtypemix/mixers.hpp"
#include "qtypemix/type_embed.hpp"

namespace qtm {

struct TrainConfig {
    double lr = 1e-3;
    double gamma = 0.99;
    double epsilon_start = 1.0;
    double epsilon_finish = 0.05;
    std::int64_t epsilon_anneal_time = 100000;  // environment steps
    std::int64_t target_update_interval = 200;  // learner steps
    std::int64_t test_interval = 10000;         // environment steps
    int test_nepisode = 32;
    std::int64_t max_step = 200000;
    int batch_size = 32;       // episodes per train step
    std::int64_t buffer_size = 5000;
    double td_lambda = 0.6;
    double alpha_te = 0.1;
    int n_parallel_envs = 8;
    double grad_clip_norm = 10.0;
    bool double_q = false;
    std::int64_t checkpoint_interval = 0;  // env steps; 0 = final only
    bool te_loss_per_step = false;         // default: final-step embeddings
    double stop_at_win_rate = 0.0;         // early stop threshold; 0 disables

    // Table-style published decay coefficient and which Adam moment it names.
    double adam_alpha = 0.99;
    std::string adam_alpha_is = "beta2";  // or "beta1"
    double adam_eps = 1e-8;

    double adam_beta1() const { return adam_alpha_is == "beta1" ? adam_alpha : 0.9; }
    double adam_beta2() const { return adam_alpha_is == "beta2" ? adam_alpha : 0.999; }

    void validate() const {
        require<ConfigError>(gamma >= 0 && gamma < 1, "train.gamma: must be in [0, 1)");
        require<ConfigError>(td_lambda >= 0 && td_lambda <= 1,
                             "train.td_lambda: must be in [0, 1]");
        require<ConfigError>(alpha_te >= 0, "train.alpha_te: must be >= 0");
        require<ConfigError>(batch_size >= 1, "train.batch_size: must be >= 1");
        require<ConfigError>(buffer_size >= batch_size,
                             "train.buffer_size: must be >= batch_size");
        require<ConfigError>(n_parallel_envs >= 1, "train.n_parallel_envs: must be >= 1");
        require<ConfigError>(test_nepisode >= 1, "train.test_nepisode: must be >= 1");
        require<ConfigError>(adam_alpha_is == "beta1" || adam_alpha_is == "beta2",
                             "train.adam_alpha_is: must be beta1 or beta2");
        require<ConfigError>(epsilon_anneal_time >= 1,
                             "train.epsilon_anneal_time: must be >= 1");
    }
};

// linear from epsilon_start to epsilon_finish over epsilon_anneal_time steps
inline double epsilon_schedule(std::int64_t step, const TrainConfig& c) {
    require(step >= 0, "epsilon_schedule: negative step");
    if (step >= c.epsilon_anneal_time) return c.epsilon_finish;
    const double frac = static_cast<double>(step) / static_cast<double>(c.epsilon_anneal_time);
    return c.epsilon_start + (c.epsilon_finish - c.epsilon_start) * frac;
}

// All network pieces for one experiment, registered in one ParamSet in a
// fixed deterministic order.
template <class T>
struct Models {
    AgentConfig agent_cfg;
    TypeEmbedConfig te_cfg;
    MixerConfig mixer_cfg;
    ObsLayout lay;
    int n_agents = 0, n_actions = 0, obs_dim = 0, state_dim = 0, n_types = 0, key_dim = 0;
    HpnAgent<T> agent;
    TypeEmbedExtractor<T> te;
    MixerNet<T> mixer;

    bool has_te() const { return mixer_cfg.variant == MixerVariant::kQTypeMix; }

    static Models build(ParamSet<T>& ps, const GridSkirmishEnv& env, const AgentConfig& ac,
                        const TypeEmbedConfig& tc, const MixerConfig& mc,
                        std::uint64_t init_seed) {
        Models m;
        m.agent_cfg = ac;
        m.te_cfg = tc;
        m.mixer_cfg = mc;
        m.lay = env.obs_layout();
        m.n_agents = env.n_agents();
        m.n_actions = env.n_actions();
        m.obs_dim = m.lay.flat_dim();
        m.state_dim = env.state_dim();
        m.n_types = env.config().n_types();
        m.key_dim = m.obs_dim + (mc.variant == MixerVariant::kQTypeMix ? tc.embed_dim : 0);
        RngStream rng = RngStream(init_seed).derive(0x10DE15);
        m.agent = HpnAgent<T>::init(ps, ac, m.lay, m.n_actions, rng);
        if (m.has_te()) m.te = TypeEmbedExtractor<T>::init(ps, tc, m.obs_dim, m.state_dim, rng);
        m.mixer = MixerNet<T>::init(ps, mc, m.n_agents, m.n_types, m.state_dim, m.key_dim, rng);
        return m;
    }
};

namespace detail {
template <class T>
Tensor<T> tensor_rows(const Tensor<T>& t, std::int64_t r0, std::int64_t len) {
    Tensor<T> out(len, t.cols());
    std::copy(t.data.begin() + r0 * t.cols(), t.data.begin() + (r0 + len) * t.cols(),
              out.data.begin());
    return out;
}
}  // namespace detail

// One full recurrent pass of every network over a padded batch; the action
// picker decides whose actions gate the utilities (recorded vs greedy).
template <class T>
struct BatchPass {
    Var<T> qtot;                  // [L*B x 1], time-major samples
    std::vector<Tensor<T>> q_t;   // agent q values per step (copies)
    Var<T> embeddings;            // [L*B*n x d_e] when the variant extracts them
};

template <class T>
BatchPass<T> run_batch(Tape<T>& tp, ParamSet<T>& ps, const Models<T>& M,
                       const EpisodeBatch<T>& batch,
                       const std::function<std::vector<std::int64_t>(int, const Tensor<T>&)>&
                           pick_actions,
                       bool detach_embeddings_in_keys) {
    const int L = batch.L, B = batch.B, n = batch.n;
    const std::int64_t Bn = static_cast<std::int64_t>(B) * n;
    const std::int64_t nE = M.lay.n_enemy_slots;

    auto premix = M.agent.premix(tp, ps, batch.obs_all);
    Var<T> te_gen{};
    if (M.has_te()) te_gen = M.te.generator(tp, ps, tp.constant(batch.state_all));

    Var<T> h_agent = tp.constant(M.agent.initial_hidden(Bn));
    Var<T> h_te{};
    if (M.has_te()) h_te = tp.constant(M.te.initial_hidden(Bn));

    BatchPass<T> out;
    std::vector<Var<T>> utils;
    std::vector<Var<T>> embeds;
    for (int t = 0; t < L; ++t) {
        Var<T> pre_t = tp.slice_rows(premix.pre, t * Bn, Bn);
        Var<T> gen_t = tp.slice_rows(premix.out_gen, t * Bn * nE, Bn * nE);
        auto st = M.agent.forward_step(tp, ps, pre_t, gen_t, h_agent);
        h_agent = st.hidden;
        out.q_t.push_back(tp.val(st.q));
        utils.push_back(tp.reshape(tp.gather_cols(st.q, pick_actions(t, out.q_t.back())),
                                   {B, n}));
        if (M.has_te()) {
            Tensor<T> obs_t = detail::tensor_rows(batch.obs_all, t * Bn, Bn);
            auto teo = M.te.forward_from(tp, ps, tp.constant(obs_t), h_te,
                                         tp.slice_rows(te_gen, static_cast<std::int64_t>(t) * B,
                                                       B),
                                         n);
            h_te = teo.hidden;
            embeds.push_back(teo.embedding);
        }
    }
    Var<T> utilities = tp.concat_rows(utils);  // [L*B x n]
    Var<T> state_var = tp.constant(batch.state_all);
    Var<T> keys{};
    if (M.mixer.uses_keys()) {
        Var<T> obs_const = tp.constant(batch.obs_all);
        if (M.has_te()) {
            out.embeddings = tp.concat_rows(embeds);
            Var<T> e = detach_embeddings_in_keys ? tp.detach(out.embeddings) : out.embeddings;
            keys = tp.concat_cols(obs_const, e);
        } else {
            keys = obs_const;
        }
        auto masks = TypeMasks<T>::build(batch.sample_parts, M.n_types, n);
        out.qtot = M.mixer.joint(tp, ps, utilities, keys, state_var, masks);
    } else {
        TypeMasks<T> none;
        out.qtot = M.mixer.joint(tp, ps, utilities, utilities, state_var, none);
    }
    return out;
}

// Greedy joint action ids under the given q values and availability masks.
template <class T>
std::vector<std::int64_t> greedy_actions_row(const Tensor<T>& q,
                                             const std::vector<std::uint8_t>& avail_flat,
                                             int n_actions) {
    std::vector<std::int64_t> acts(static_cast<std::size_t>(q.rows()));
    for (std::int64_t r = 0; r < q.rows(); ++r) {
        std::vector<std::uint8_t> mask(
            avail_flat.begin() + r * n_actions,
            avail_flat.begin() + (r + 1) * n_actions);
        acts[static_cast<std::size_t>(r)] = greedy_action(q, r, mask);
    }
    return acts;
}

// Per-step targets y under the target parameters: per-agent greedy
// (available-argmax) bootstrap mixed by the target mixer, blended by the
// TD(lambda) recursion G_t = r_t + gamma[(1-l) boot_{t+1} + l G_{t+1}].
// Terminal steps bootstrap to zero. With double_q the greedy actions come
// from the live network instead.
template <class T>
Tensor<T> compute_targets(const Models<T>& M, ParamSet<T>& target_ps,
                          const EpisodeBatch<T>& batch, double gamma, double td_lambda,
                          bool double_q = false, ParamSet<T>* live_ps = nullptr) {
    require(batch.B >= 1, "compute_targets: empty batch");
    std::vector<Tensor<T>> live_q;
    if (double_q) {
        require(live_ps != nullptr, "compute_targets: double_q needs live params");
        Tape<T> tl(false);
        auto live = run_batch<T>(tl, *live_ps, M, batch,
                                 [&](int t, const Tensor<T>& q) {
                                     return greedy_actions_row(
                                         q, batch.avail_t[static_cast<std::size_t>(t)],
                                         batch.n_actions);
                                 },
                                 false);
        live_q = std::move(live.q_t);
    }
    Tape<T> tp(false);
    auto pass = run_batch<T>(tp, target_ps, M, batch,
                             [&](int t, const Tensor<T>& q) {
                                 const Tensor<T>& src =
                                     double_q ? live_q[static_cast<std::size_t>(t)] : q;
                                 return greedy_actions_row(
                                     src, batch.avail_t[static_cast<std::size_t>(t)],
                                     batch.n_actions);
                             },
                             false);
    const Tensor<T>& qt = tp.val(pass.qtot);  // [L*B x 1]

    const int L = batch.L, B = batch.B;
    Tensor<T> y(L, B);
    for (int b = 0; b < B; ++b) {
        double g_next = 0.0;
        for (int t = L - 1; t >= 0; --t) {
            if (batch.mask.at(t, b) <= T(0)) continue;  // padding
            const bool terminal = batch.term.at(t, b) > T(0);
            double boot = 0.0;
            if (!terminal && t + 1 < L && batch.mask.at(t + 1, b) > T(0))
                boot = static_cast<double>(
                    qt.at(static_cast<std::int64_t>(t + 1) * B + b, 0));
            const double blend = terminal ? 0.0
                                          : (1.0 - td_lambda) * boot + td_lambda * g_next;
            const double g = static_cast<double>(batch.reward.at(t, b)) + gamma * blend;
            y.at(t, b) = static_cast<T>(g);
            g_next = g;
        }
    }
    return y;
}

// Mean squared error over the valid (mask > 0) entries; targets are
// constants, so no gradient reaches whatever produced them.
template <class T>
Var<T> masked_mse(Tape<T>& tp, Var<T> pred, const Tensor<T>& target, const Tensor<T>& mask) {
    require<ShapeError>(pred.val().numel() == target.numel() &&
                            target.numel() == mask.numel(),
                        "masked_mse: size mismatch");
    Tensor<T> t_col = target;
    t_col.shape = {target.numel(), 1};
    Tensor<T> m_col = mask;
    m_col.shape = {mask.numel(), 1};
    double valid = 0;
    for (T v : mask.data) valid += v > T(0) ? 1.0 : 0.0;
    require(valid > 0, "masked_mse: no valid entries");
    Var<T> pred_col = tp.reshape(pred, {target.numel(), 1});
    Var<T> diff = tp.sub(pred_col, tp.constant(t_col));
    Var<T> sq = tp.mul(diff, diff);
    return tp.scale(tp.sum_all(tp.mul(sq, tp.constant(m_col))), static_cast<T>(1.0 / valid));
}

struct TrainStepMetrics {
    double td_loss = 0;
    double te_loss = 0;
    double grad_norm = 0;
    double mean_qtot = 0;
};

// One optimizer step on L = L_TD + alpha * L_TE over a sampled batch.
template <class T>
TrainStepMetrics train_step(const Models<T>& M, ParamSet<T>& ps, ParamSet<T>& target_ps,
                            AdamState<T>& adam, const TrainConfig& cfg,
                            const EpisodeBatch<T>& batch) {
    Tensor<T> y = compute_targets(M, target_ps, batch, cfg.gamma, cfg.td_lambda, cfg.double_q,
                                  &ps);
    const bool detach = M.has_te() &&
                        M.te_cfg.update_mode == TypeEmbedConfig::UpdateMode::kSeparate;
    Tape<T> tp;
    auto pass = run_batch<T>(tp, ps, M, batch,
                             [&](int t, const Tensor<T>&) {
                                 return batch.actions_t[static_cast<std::size_t>(t)];
                             },
                             detach);

    const std::int64_t LB = static_cast<std::int64_t>(batch.L) * batch.B;
    const double valid = static_cast<double>(batch.valid_steps());
    Var<T> td = masked_mse(tp, pass.qtot, y, batch.mask);
    Var<T> loss = td;

    TrainStepMetrics met;
    if (M.has_te() && cfg.alpha_te > 0) {
        Var<T> lte{};
        if (cfg.te_loss_per_step) {
            // every valid (t, b) sample is a batch element
            std::vector<std::int64_t> rows;
            std::vector<TypePartition> parts;
            for (int t = 0; t < batch.L; ++t)
                for (int b = 0; b < batch.B; ++b) {
                    if (batch.mask.at(t, b) <= T(0)) continue;
                    const std::int64_t s = static_cast<std::int64_t>(t) * batch.B + b;
                    for (int i = 0; i < batch.n; ++i) rows.push_back(s * batch.n + i);
                    parts.push_back(batch.episode_parts[static_cast<std::size_t>(b)]);
                }
            lte = te_loss<T>(tp, tp.select_rows(pass.embeddings, rows), parts,
                             M.te_cfg.reduction);
        } else {
            lte = te_loss<T>(tp, tp.select_rows(pass.embeddings, batch.final_step_rows),
                             batch.episode_parts, M.te_cfg.reduction);
        }
        met.te_loss = static_cast<double>(tp.val(lte).data[0]);
        loss = tp.add(loss, tp.scale(lte, static_cast<T>(cfg.alpha_te)));
    }

    met.td_loss = static_cast<double>(tp.val(td).data[0]);
    double qsum = 0;
    for (std::int64_t s = 0; s < LB; ++s)
        qsum += static_cast<double>(tp.val(pass.qtot).at(s, 0)) *
                static_cast<double>(batch.mask.data[static_cast<std::size_t>(s)]);
    met.mean_qtot = qsum / valid;

    const double total = static_cast<double>(tp.val(loss).data[0]);
    if (!std::isfinite(total))
        throw ContractError(cat("train_step: non-finite loss (td=", met.td_loss,
                                ", te=", met.te_loss, ", batch L=", batch.L, " B=", batch.B,
                                ")"));

    ps.clear_grads();
    tp.backward(loss);
    met.grad_norm = ps.clip_grad_norm(cfg.grad_clip_norm);
    adam_step(ps, adam, cfg.lr);
    return met;
}

// Hard target sync every `interval` learner steps.
template <class T>
void update_target(const ParamSet<T>& params, ParamSet<T>& target_params,
                   std::int64_t learner_step, std::int64_t interval) {
    if (interval <= 0) return;
    if (learner_step % interval == 0) target_params.copy_values_from(params);
}

// ---------------------------------------------------------------------------
// rollouts
// ---------------------------------------------------------------------------

// Round-synchronized episode collection over n parallel environments. Every
// environment owns its seed and action streams, so results are identical
// whether rounds run on threads or inline.
template <class T>
class EpisodeCollector {
  public:
    EpisodeCollector(const ScenarioConfig& scenario, int n_envs, RngStream master)
        : scenario_(scenario) {
        for (int w = 0; w < n_envs; ++w) {
            envs_.emplace_back(scenario);
            env_seeds_.push_back(master.derive(0xE5EED, static_cast<std::uint64_t>(w)));
            action_rngs_.push_back(master.derive(0xAC710, static_cast<std::uint64_t>(w)));
        }
    }

    int n_envs() const { return static_cast<int>(envs_.size()); }

    std::vector<EpisodeRecord<T>> collect_round(ParamSet<T>& ps, const Models<T>& M,
                                                double epsilon) {
        const int W = n_envs();
        const int n = M.n_agents;
        std::vector<EpisodeRecord<T>> recs(static_cast<std::size_t>(W));
        std::vector<bool> active(static_cast<std::size_t>(W), true);
        std::vector<Tensor<T>> hidden;
        for (int w = 0; w < W; ++w) {
            envs_[static_cast<std::size_t>(w)].reset(env_seeds_[static_cast<std::size_t>(w)]
                                                         .next_u64());
            auto& r = recs[static_cast<std::size_t>(w)];
            r.n_agents = n;
            r.n_actions = M.n_actions;
            r.obs_dim = M.obs_dim;
            r.state_dim = M.state_dim;
            r.agent_types = envs_[static_cast<std::size_t>(w)].ally_types();
            hidden.push_back(M.agent.initial_hidden(n));
        }
        int n_active = W;
        while (n_active > 0) {
            // stack observations of the active environments
            std::vector<int> act_ids;
            for (int w = 0; w < W; ++w)
                if (active[static_cast<std::size_t>(w)]) act_ids.push_back(w);
            Tensor<T> obs(static_cast<std::int64_t>(act_ids.size()) * n, M.obs_dim);
            Tensor<T> hcat(static_cast<std::int64_t>(act_ids.size()) * n,
                           M.agent_cfg.rnn_hidden_dim);
            for (std::size_t k = 0; k < act_ids.size(); ++k) {
                auto& env = envs_[static_cast<std::size_t>(act_ids[k])];
                for (int i = 0; i < n; ++i) {
                    auto flat = env.observe(env.state(), i).flat();
                    for (int c = 0; c < M.obs_dim; ++c)
                        obs.at(static_cast<std::int64_t>(k) * n + i, c) =
                            static_cast<T>(flat[static_cast<std::size_t>(c)]);
                }
                std::copy(hidden[static_cast<std::size_t>(act_ids[k])].data.begin(),
                          hidden[static_cast<std::size_t>(act_ids[k])].data.end(),
                          hcat.data.begin() +
                              static_cast<std::int64_t>(k) * n * M.agent_cfg.rnn_hidden_dim);
            }
            Tape<T> tp(false);
            auto stepped = M.agent.forward(tp, ps, obs, tp.leaf(hcat));
            const Tensor<T>& q = tp.val(stepped.q);
            const Tensor<T>& h2 = tp.val(stepped.hidden);

            for (std::size_t k = 0; k < act_ids.size(); ++k) {
                const int w = act_ids[k];
                auto& env = envs_[static_cast<std::size_t>(w)];
                auto& rec = recs[static_cast<std::size_t>(w)];
                // record pre-step state/obs/avail
                auto gs = env.global_state(env.state());
                for (double v : gs) rec.states.push_back(static_cast<T>(v));
                JointAction acts;
                for (int i = 0; i < n; ++i) {
                    for (int c = 0; c < M.obs_dim; ++c)
                        rec.obs.push_back(obs.at(static_cast<std::int64_t>(k) * n + i, c));
                    auto avail = env.available_actions(env.state(), i);
                    rec.avail.insert(rec.avail.end(), avail.begin(), avail.end());
                    const int a = select_action(q, static_cast<std::int64_t>(k) * n + i, avail,
                                                epsilon,
                                                action_rngs_[static_cast<std::size_t>(w)]);
                    acts.push_back(a);
                    rec.actions.push_back(a);
                }
                auto res = env.step(acts);
                rec.rewards.push_back(static_cast<T>(res.reward));
                rec.terminated.push_back(res.terminated ? 1 : 0);
                rec.length += 1;
                std::copy(h2.data.begin() + static_cast<std::int64_t>(k) * n *
                                                M.agent_cfg.rnn_hidden_dim,
                          h2.data.begin() + static_cast<std::int64_t>(k + 1) * n *
                                                M.agent_cfg.rnn_hidden_dim,
                          hidden[static_cast<std::size_t>(w)].data.begin());
                if (res.terminated) {
                    rec.won = res.won;
                    active[static_cast<std::size_t>(w)] = false;
                    --n_active;
                }
            }
        }
        return recs;
    }

  private:
    ScenarioConfig scenario_;
    std::vector<GridSkirmishEnv> envs_;
    std::vector<RngStream> env_seeds_;
    std::vector<RngStream> action_rngs_;
};

struct EvalResult {
    double win_rate = 0;
    double mean_return = 0;
};

// Greedy-policy evaluation over fresh seeded environments.
template <class T>
EvalResult evaluate(const ScenarioConfig& scenario, ParamSet<T>& ps, const Models<T>& M,
                    int n_episodes, std::uint64_t seed) {
    require(n_episodes >= 1, "evaluate: n_episodes must be >= 1");
    GridSkirmishEnv env(scenario);
    RngStream seeder = RngStream(seed).derive(0xEA11);
    int wins = 0;
    double total_return = 0;
    const int n = M.n_agents;
    for (int ep = 0; ep < n_episodes; ++ep) {
        env.reset(seeder.next_u64());
        Tensor<T> hidden = M.agent.initial_hidden(n);
        bool done = false;
        while (!done) {
            Tensor<T> obs(n, M.obs_dim);
            for (int i = 0; i < n; ++i) {
                auto flat = env.observe(env.state(), i).flat();
                for (int c = 0; c < M.obs_dim; ++c)
                    obs.at(i, c) = static_cast<T>(flat[static_cast<std::size_t>(c)]);
            }
            Tape<T> tp(false);
            auto st = M.agent.forward(tp, ps, obs, tp.leaf(hidden));
            JointAction acts;
            for (int i = 0; i < n; ++i)
                acts.push_back(greedy_action(tp.val(st.q), i,
                                             env.available_actions(env.state(), i)));
            auto res = env.step(acts);
            hidden = tp.val(st.hidden);
            total_return += res.reward;
            if (res.terminated) {
                done = true;
                if (res.won) ++wins;
            }
        }
    }
    return {static_cast<double>(wins) / n_episodes, total_return / n_episodes};
}

// ---------------------------------------------------------------------------
// the full run loop
// ---------------------------------------------------------------------------

struct ExperimentSetup {
    ScenarioConfig scenario;
    AgentConfig agent;
    TypeEmbedConfig te;
    MixerConfig mixer;
    TrainConfig train;
    std::uint64_t seed = 1;
    std::string out_dir;     // empty: no artifacts
    std::string run_label = "run";
};

struct RunSummary {
    std::int64_t env_steps = 0;
    std::int64_t episodes = 0;
    std::int64_t learner_steps = 0;
    double final_win_rate = 0;
    double final_mean_return = 0;
    double best_win_rate = 0;
    std::string final_checkpoint;
    // full evaluation curve: (env_step, win_rate, mean_return)
    std::vector<std::array<double, 3>> eval_curve;
};

template <class T>
class Trainer {
  public:
    explicit Trainer(ExperimentSetup setup) : setup_(std::move(setup)) {
        setup_.train.validate();
        setup_.scenario.validate();
        GridSkirmishEnv probe(setup_.scenario);
        models_ = Models<T>::build(params_, probe, setup_.agent, setup_.te, setup_.mixer,
                                   setup_.seed);
        target_ = params_;  // same layout, then hard-synced
        target_.copy_values_from(params_);
        adam_.beta1 = setup_.train.adam_beta1();
        adam_.beta2 = setup_.train.adam_beta2();
        adam_.eps = setup_.train.adam_eps;
    }

    const Models<T>& models() const { return models_; }
    ParamSet<T>& params() { return params_; }
    ParamSet<T>& target_params() { return target_; }
    const ExperimentSetup& setup() const { return setup_; }

    RunSummary run() {
        namespace fs = std::filesystem;
        const TrainConfig& tc = setup_.train;
        const bool artifacts = !setup_.out_dir.empty();
        CsvWriter csv;
        JsonlWriter events;
        if (artifacts) {
            fs::create_directories(setup_.out_dir);
            fs::create_directories(fs::path(setup_.out_dir) / "checkpoints");
            csv = CsvWriter(setup_.out_dir + "/metrics.csv",
                            {"step", "episode", "win_rate", "mean_return", "td_loss", "te_loss",
                             "epsilon", "grad_norm"});
            events = JsonlWriter(setup_.out_dir + "/events.jsonl");
            events.event("run_start", {{"label", setup_.run_label},
                                       {"seed", setup_.seed},
                                       {"scenario", setup_.scenario.name},
                                       {"variant", to_string(setup_.mixer.variant)},
                                       {"mode", to_string(setup_.mixer.mode)}});
        }

        RngStream master(setup_.seed);
        EpisodeCollector<T> collector(setup_.scenario, tc.n_parallel_envs,
                                      master.derive(0xC0117EC7));
        ReplayBuffer<T> buffer(static_cast<std::size_t>(tc.buffer_size));
        RngStream sample_rng = master.derive(0x5A3B1E);
        RngStream eval_rng = master.derive(0xE7A1);

        RunSummary sum;
        std::int64_t next_eval = 0;
        std::int64_t next_ckpt = tc.checkpoint_interval > 0 ? tc.checkpoint_interval : -1;
        double td_acc = 0, te_acc = 0, gn_acc = 0;
        std::int64_t acc_n = 0;
        bool stop = false;

        auto do_eval = [&](std::int64_t at_step) {
            EvalResult ev = evaluate(setup_.scenario, params_, models_, tc.test_nepisode,
                                     eval_rng.next_u64());
            sum.final_win_rate = ev.win_rate;
            sum.final_mean_return = ev.mean_return;
            sum.best_win_rate = std::max(sum.best_win_rate, ev.win_rate);
            sum.eval_curve.push_back(
                {static_cast<double>(at_step), ev.win_rate, ev.mean_return});
            const double td = acc_n ? td_acc / acc_n : 0;
            const double te = acc_n ? te_acc / acc_n : 0;
            const double gn = acc_n ? gn_acc / acc_n : 0;
            td_acc = te_acc = gn_acc = 0;
            acc_n = 0;
            if (artifacts) {
                csv.row({static_cast<double>(at_step), static_cast<double>(sum.episodes),
                         ev.win_rate, ev.mean_return, td, te,
                         epsilon_schedule(at_step, tc), gn});
                events.event("eval", {{"step", at_step},
                                      {"win_rate", ev.win_rate},
                                      {"mean_return", ev.mean_return}});
            }
            if (tc.stop_at_win_rate > 0 && ev.win_rate >= tc.stop_at_win_rate) stop = true;
        };

        while (sum.env_steps < tc.max_step && !stop) {
            if (sum.env_steps >= next_eval) {
                do_eval(sum.env_steps);
                next_eval += tc.test_interval;
                if (stop) break;
            }
            const double eps = epsilon_schedule(sum.env_steps, tc);
            auto episodes = collector.collect_round(params_, models_, eps);
            for (auto& e : episodes) {
                sum.env_steps += e.length;
                sum.episodes += 1;
                buffer.add(std::move(e));
            }
            if (buffer.size() >= static_cast<std::size_t>(tc.batch_size)) {
                auto sampled = buffer.sample(static_cast<std::size_t>(tc.batch_size), sample_rng);
                auto batch = EpisodeBatch<T>::build(sampled, models_.n_types);
                auto met = train_step(models_, params_, target_, adam_, tc, batch);
                sum.learner_steps += 1;
                td_acc += met.td_loss;
                te_acc += met.te_loss;
                gn_acc += met.grad_norm;
                acc_n += 1;
                update_target(params_, target_, sum.learner_steps, tc.target_update_interval);
                if (artifacts && sum.learner_steps % 64 == 0)
                    events.event("train", {{"step", sum.env_steps},
                                           {"learner_step", sum.learner_steps},
                                           {"td_loss", met.td_loss},
                                           {"te_loss", met.te_loss},
                                           {"grad_norm", met.grad_norm},
                                           {"mean_qtot", met.mean_qtot}});
            }
            if (artifacts && next_ckpt > 0 && sum.env_steps >= next_ckpt) {
                save_ckpt(cat(setup_.out_dir, "/checkpoints/ckpt_", sum.env_steps));
                events.event("checkpoint", {{"step", sum.env_steps}});
                next_ckpt += tc.checkpoint_interval;
            }
        }
        if (!stop) do_eval(sum.env_steps);
        if (artifacts) {
            sum.final_checkpoint = cat(setup_.out_dir, "/checkpoints/ckpt_final");
            save_ckpt(sum.final_checkpoint);
            events.event("run_end", {{"step", sum.env_steps},
                                     {"episodes", sum.episodes},
                                     {"learner_steps", sum.learner_steps},
                                     {"final_win_rate", sum.final_win_rate},
                                     {"best_win_rate", sum.best_win_rate}});
        }
        return sum;
    }

    void save_ckpt(const std::string& prefix) const {
        save_checkpoint(params_, prefix, checkpoint_extra_);
    }

    // opaque experiment description embedded in checkpoint manifests
    void set_checkpoint_extra(nlohmann::json j) { checkpoint_extra_ = std::move(j); }

  private:
    ExperimentSetup setup_;
    ParamSet<T> params_;
    ParamSet<T> target_;
    AdamState<T> adam_;
    Models<T> models_;
    nlohmann::json checkpoint_extra_;
};

}  // namespace qtm

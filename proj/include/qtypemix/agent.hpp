#pragma once

#include <vector>

#include "qtypemix/env.hpp"
#include "qtypemix/nn.hpp"

namespace qtm {

struct AgentConfig {
    int rnn_hidden_dim = 64;
    int hpn_hyper_dim = 64;
    int hpn_head_num = 1;  // generated attack heads, merged by elementwise max
};

// Per-agent utility network, shared parameters across agents.
//
// Entity blocks go through hypernetwork-generated linear maps and are summed
// (permutation invariant), combined with own features, then a GRU tracks the
// action-observation history. Move/stop actions come from a plain linear head
// (PI); each enemy's attack value comes from weights generated from that
// enemy's entity block (permutation equivariant).
template <class T>
struct HpnAgent {
    AgentConfig cfg;
    ObsLayout lay;
    int n_actions = 0;

    static HpnAgent init(ParamSet<T>& ps, const AgentConfig& cfg, const ObsLayout& lay,
                         int n_actions, RngStream& rng) {
        HpnAgent a{cfg, lay, n_actions};
        const int H = cfg.rnn_hidden_dim;
        const int HY = cfg.hpn_hyper_dim;
        if (lay.n_ally_slots > 0) {
            ps.add_linear_init("agent.hyp_ally.w1", {lay.ally_feat, HY}, lay.ally_feat, rng);
            ps.add_linear_init("agent.hyp_ally.b1", {1, HY}, lay.ally_feat, rng);
            ps.add_linear_init("agent.hyp_ally.w2", {HY, lay.ally_feat * H}, HY, rng);
            ps.add_linear_init("agent.hyp_ally.b2", {1, lay.ally_feat * H}, HY, rng);
        }
        ps.add_linear_init("agent.hyp_enemy.w1", {lay.enemy_feat, HY}, lay.enemy_feat, rng);
        ps.add_linear_init("agent.hyp_enemy.b1", {1, HY}, lay.enemy_feat, rng);
        ps.add_linear_init("agent.hyp_enemy.w2", {HY, lay.enemy_feat * H}, HY, rng);
        ps.add_linear_init("agent.hyp_enemy.b2", {1, lay.enemy_feat * H}, HY, rng);
        Dense<T>::init(ps, "agent.own", lay.own_dim, H, rng);
        GruCell<T>::init(ps, "agent.gru", H, H, rng);
        Dense<T>::init(ps, "agent.move", H, 6, rng);
        // hyper_out: enemy block -> per-head attack weight vector + bias
        Dense<T>::init(ps, "agent.hout1", lay.enemy_feat, HY, rng);
        Dense<T>::init(ps, "agent.hout2", HY, cfg.hpn_head_num * (H + 1), rng);
        return a;
    }

    Tensor<T> initial_hidden(std::int64_t rows) const {
        return Tensor<T>(rows, cfg.rnn_hidden_dim);
    }

    // Splits a flat observation batch [R x obs_dim] into the constant entity
    // tensors the forward pass consumes.
    struct ObsSplit {
        Tensor<T> own;          // [R x own_dim]
        Tensor<T> ally_ents;    // [R*n_ally_slots x ally_feat]
        Tensor<T> enemy_ents;   // [R*n_enemy_slots x enemy_feat]
    };

    ObsSplit split_obs(const Tensor<T>& obs) const {
        require<ShapeError>(obs.cols() == lay.flat_dim(), "agent: obs width ", obs.cols(),
                            " does not match layout width ", lay.flat_dim());
        const std::int64_t R = obs.rows();
        ObsSplit s;
        s.own = Tensor<T>(R, lay.own_dim);
        s.ally_ents = Tensor<T>(R * lay.n_ally_slots, lay.ally_feat);
        s.enemy_ents = Tensor<T>(R * lay.n_enemy_slots, lay.enemy_feat);
        for (std::int64_t r = 0; r < R; ++r) {
            const T* src = obs.data.data() + r * obs.cols();
            std::copy(src, src + lay.own_dim, s.own.data.data() + r * lay.own_dim);
            const T* pa = src + lay.ally_offset();
            std::copy(pa, pa + lay.n_ally_slots * lay.ally_feat,
                      s.ally_ents.data.data() + r * lay.n_ally_slots * lay.ally_feat);
            const T* pe = src + lay.enemy_offset();
            std::copy(pe, pe + lay.n_enemy_slots * lay.enemy_feat,
                      s.enemy_ents.data.data() + r * lay.n_enemy_slots * lay.enemy_feat);
        }
        return s;
    }

    // Time-independent part of the forward pass, computable for a whole
    // [R x obs_dim] batch at once: the PI input embedding and the generated
    // attack-head parameters.
    struct Premix {
        Var<T> pre;      // [R x H] GRU input
        Var<T> out_gen;  // [R*n_enemy x hpn_head_num*(H+1)] generated attack heads
    };

    Premix premix(Tape<T>& tp, ParamSet<T>& ps, const Tensor<T>& obs) const {
        ObsSplit s = split_obs(obs);
        const int H = cfg.rnn_hidden_dim;
        Var<T> own = Dense<T>::bind(ps, "agent.own").apply(tp, ps, tp.constant(s.own));
        Var<T> acc = own;
        if (lay.n_ally_slots > 0) {
            Var<T> ae = tp.hyper_embed_sum(s.ally_ents, tp.param(ps, "agent.hyp_ally.w1"),
                                           tp.param(ps, "agent.hyp_ally.b1"),
                                           tp.param(ps, "agent.hyp_ally.w2"),
                                           tp.param(ps, "agent.hyp_ally.b2"), lay.n_ally_slots, H);
            acc = tp.add(acc, ae);
        }
        Var<T> ee = tp.hyper_embed_sum(s.enemy_ents, tp.param(ps, "agent.hyp_enemy.w1"),
                                       tp.param(ps, "agent.hyp_enemy.b1"),
                                       tp.param(ps, "agent.hyp_enemy.w2"),
                                       tp.param(ps, "agent.hyp_enemy.b2"), lay.n_enemy_slots, H);
        Premix p;
        p.pre = tp.elu(tp.add(acc, ee));
        Var<T> eh = tp.relu(Dense<T>::bind(ps, "agent.hout1").apply(tp, ps,
                                                                    tp.constant(s.enemy_ents)));
        p.out_gen = Dense<T>::bind(ps, "agent.hout2").apply(tp, ps, eh);
        return p;
    }

    // One recurrent step over a premixed row range.
    // pre: [R x H], hidden: [R x H], out_gen: [R*n_enemy x heads*(H+1)]
    struct StepOut {
        Var<T> q;       // [R x n_actions]
        Var<T> hidden;  // [R x H]
    };

    StepOut forward_step(Tape<T>& tp, ParamSet<T>& ps, Var<T> pre, Var<T> out_gen,
                         Var<T> hidden) const {
        const int H = cfg.rnn_hidden_dim;
        const std::int64_t nE = lay.n_enemy_slots;
        StepOut o;
        o.hidden = GruCell<T>::bind(ps, "agent.gru").step(tp, ps, pre, hidden);
        Var<T> q_move = Dense<T>::bind(ps, "agent.move").apply(tp, ps, o.hidden);
        Var<T> h_rep = tp.repeat_rows(o.hidden, nE);
        Var<T> q_att{};
        for (int head = 0; head < cfg.hpn_head_num; ++head) {
            Var<T> w = tp.slice_cols(out_gen, head * (H + 1), H);
            Var<T> b = tp.slice_cols(out_gen, head * (H + 1) + H, 1);
            Var<T> qh = tp.add(tp.rowwise_matvec(w, h_rep, H, 1), b);
            q_att = head == 0 ? qh : tp.vmax(q_att, qh);
        }
        q_att = tp.reshape(q_att, {pre.rows(), nE});
        o.q = tp.concat_cols(q_move, q_att);
        return o;
    }

    // Convenience single-shot forward for one observation batch.
    StepOut forward(Tape<T>& tp, ParamSet<T>& ps, const Tensor<T>& obs, Var<T> hidden) const {
        Premix p = premix(tp, ps, obs);
        return forward_step(tp, ps, p.pre, p.out_gen, hidden);
    }
};

// Greedy available-argmax; unavailable entries count as -inf, ties take the
// lowest action id.
template <class T>
int greedy_action(const Tensor<T>& q, std::int64_t row, const std::vector<std::uint8_t>& avail) {
    int best = -1;
    T best_q = T(0);
    for (int a = 0; a < static_cast<int>(avail.size()); ++a) {
        if (!avail[static_cast<std::size_t>(a)]) continue;
        const T qa = q.at(row, a);
        if (best < 0 || qa > best_q) {
            best = a;
            best_q = qa;
        }
    }
    require(best >= 0, "greedy_action: no available action");
    return best;
}

// Epsilon-greedy over the availability mask. Draw order is fixed: one
// uniform for the explore/exploit choice, then (when exploring) one bounded
// draw over the available actions.
template <class T>
int select_action(const Tensor<T>& q, std::int64_t row, const std::vector<std::uint8_t>& avail,
                  double epsilon, RngStream& rng) {
    int n_avail = 0;
    for (auto b : avail) n_avail += b ? 1 : 0;
    require(n_avail > 0, "select_action: empty availability mask");
    if (rng.uniform() < epsilon) {
        auto k = rng.below(static_cast<std::uint64_t>(n_avail));
        for (int a = 0; a < static_cast<int>(avail.size()); ++a) {
            if (!avail[static_cast<std::size_t>(a)]) continue;
            if (k == 0) return a;
            --k;
        }
    }
    return greedy_action(q, row, avail);
}

}  // namespace qtm

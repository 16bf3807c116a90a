#pragma once

#include <string>
#include <vector>

#include "qtypemix/nn.hpp"
#include "qtypemix/partition.hpp"

namespace qtm {

enum class MixerVariant { kQTypeMix, kQTypeMixB, kQmix, kVdn };
enum class MixerMode { kStrictMonotonic, kPaperFaithful };

inline const char* to_string(MixerVariant v) {
    switch (v) {
        case MixerVariant::kQTypeMix: return "QTYPEMIX";
        case MixerVariant::kQTypeMixB: return "QTYPEMIX_B";
        case MixerVariant::kQmix: return "QMIX";
        default: return "VDN";
    }
}
inline const char* to_string(MixerMode m) {
    return m == MixerMode::kStrictMonotonic ? "STRICT_MONOTONIC" : "PAPER_FAITHFUL";
}
inline MixerVariant parse_variant(const std::string& s) {
    if (s == "QTYPEMIX") return MixerVariant::kQTypeMix;
    if (s == "QTYPEMIX_B") return MixerVariant::kQTypeMixB;
    if (s == "QMIX") return MixerVariant::kQmix;
    if (s == "VDN") return MixerVariant::kVdn;
    throw ConfigError(cat("mixer.variant: unknown '", s,
                          "' (QTYPEMIX, QTYPEMIX_B, QMIX, VDN)"));
}
inline MixerMode parse_mode(const std::string& s) {
    if (s == "STRICT_MONOTONIC") return MixerMode::kStrictMonotonic;
    if (s == "PAPER_FAITHFUL") return MixerMode::kPaperFaithful;
    throw ConfigError(cat("mixer.mode: unknown '", s,
                          "' (STRICT_MONOTONIC, PAPER_FAITHFUL)"));
}

struct MixerConfig {
    MixerVariant variant = MixerVariant::kQTypeMix;
    MixerMode mode = MixerMode::kStrictMonotonic;
    int n_heads = 2;
    int attn_key_dim = 4;        // d_k
    int attn_val_dim = 4;        // d_v
    int mixing_embed_dim = 32;
    int hypernet_embed_dim = 64;

    void validate() const {
        require<ConfigError>(n_heads >= 1, "mixer.n_heads: must be >= 1");
        require<ConfigError>(attn_key_dim >= 1, "mixer.attn_key_dim: must be >= 1");
        require<ConfigError>(attn_val_dim >= 1, "mixer.attn_val_dim: must be >= 1");
        require<ConfigError>(mixing_embed_dim >= 1, "mixer.mixing_embed_dim: must be >= 1");
        require<ConfigError>(hypernet_embed_dim >= 1, "mixer.hypernet_embed_dim: must be >= 1");
    }
};

// Per-episode (and per-timestep-batch) group routing data for the mixers:
// one membership mask per type over [samples x agents].
template <class T>
struct TypeMasks {
    std::vector<Tensor<T>> member;  // m tensors of [S x n], entries 0/1

    static TypeMasks build(const std::vector<TypePartition>& per_sample, int m, int n) {
        TypeMasks tm;
        const std::int64_t S = static_cast<std::int64_t>(per_sample.size());
        for (int k = 0; k < m; ++k) tm.member.emplace_back(S, n);
        for (std::int64_t s = 0; s < S; ++s) {
            const auto& part = per_sample[static_cast<std::size_t>(s)];
            require<ShapeError>(part.n == n && part.m == m,
                                "TypeMasks: partition shape mismatch");
            for (int i = 0; i < n; ++i)
                tm.member[static_cast<std::size_t>(part.type_of(i))].at(s, i) = T(1);
        }
        return tm;
    }
};

// Two-stage value decomposition network plus the flat baselines.
//
// Type Mixer (homogeneous stage): multi-head attention over the agents of one
// type, with every projection generated from the global state; queries come
// from the keys in STRICT_MONOTONIC mode and from the utilities in
// PAPER_FAITHFUL mode. The pooled attention context plus pooled keys and the
// state drive generators for the nonnegative utility-mixing weights.
//
// Total Mixer (heterogeneous stage): QMIX-shaped two-layer hypernetwork over
// the per-type values. The QMIX baseline reuses that structure directly over
// all agent utilities.
template <class T>
class MixerNet {
  public:
    MixerConfig cfg;
    int n_agents = 0;
    int n_types = 0;
    int state_dim = 0;
    int key_dim = 0;

    static MixerNet init(ParamSet<T>& ps, const MixerConfig& cfg, int n_agents, int n_types,
                         int state_dim, int key_dim, RngStream& rng) {
        cfg.validate();
        MixerNet m;
        m.cfg = cfg;
        m.n_agents = n_agents;
        m.n_types = n_types;
        m.state_dim = state_dim;
        m.key_dim = key_dim;
        switch (cfg.variant) {
            case MixerVariant::kVdn: break;
            case MixerVariant::kQmix:
                init_total_stage(ps, "mixer.flat", cfg, n_agents, state_dim, rng);
                break;
            case MixerVariant::kQTypeMix:
            case MixerVariant::kQTypeMixB:
                for (int k = 0; k < n_types; ++k) m.init_type_stage(ps, k, rng);
                init_total_stage(ps, "mixer.total", cfg, n_types, state_dim, rng);
                break;
        }
        return m;
    }

    // ---- heterogeneous stage ------------------------------------------

    static void init_total_stage(ParamSet<T>& ps, const std::string& prefix,
                                 const MixerConfig& cfg, int in_width, int state_dim,
                                 RngStream& rng) {
        Mlp2<T>::init(ps, prefix + ".w1gen", state_dim, cfg.hypernet_embed_dim,
                      in_width * cfg.mixing_embed_dim, rng);
        Dense<T>::init(ps, prefix + ".b1gen", state_dim, cfg.mixing_embed_dim, rng);
        Mlp2<T>::init(ps, prefix + ".w2gen", state_dim, cfg.hypernet_embed_dim,
                      cfg.mixing_embed_dim, rng);
        Mlp2<T>::init(ps, prefix + ".b2gen", state_dim, cfg.hypernet_embed_dim, 1, rng);
    }

    // inputs: [S x in_width], state: [S x state_dim] -> [S x 1]
    static Var<T> total_stage(Tape<T>& tp, ParamSet<T>& ps, const std::string& prefix,
                              const MixerConfig& cfg, Var<T> inputs, Var<T> state) {
        const std::int64_t in_width = inputs.cols();
        const std::int64_t embed = cfg.mixing_embed_dim;
        Var<T> w1 = tp.absval(Mlp2<T>::bind(ps, prefix + ".w1gen").apply(tp, ps, state));
        require<ShapeError>(w1.cols() == in_width * embed, "total mixer: input width ",
                            in_width, " does not match generated weights");
        Var<T> b1 = Dense<T>::bind(ps, prefix + ".b1gen").apply(tp, ps, state);
        Var<T> hidden = tp.elu(tp.add(tp.rowwise_matvec(w1, inputs, in_width, embed), b1));
        Var<T> w2 = tp.absval(Mlp2<T>::bind(ps, prefix + ".w2gen").apply(tp, ps, state));
        Var<T> b2 = Mlp2<T>::bind(ps, prefix + ".b2gen").apply(tp, ps, state);
        return tp.add(tp.rowwise_matvec(w2, hidden, embed, 1), b2);
    }

    Var<T> total_mix(Tape<T>& tp, ParamSet<T>& ps, Var<T> type_values, Var<T> state) const {
        require(type_values.cols() >= 1, "total_mixer_forward: need at least one type value");
        return total_stage(tp, ps, "mixer.total", cfg, type_values, state);
    }

    // ---- homogeneous stage --------------------------------------------

    void init_type_stage(ParamSet<T>& ps, int k, RngStream& rng) {
        const std::string p = cat("mixer.type", k);
        const int H = cfg.n_heads, dk = cfg.attn_key_dim, dv = cfg.attn_val_dim;
        const int hy = cfg.hypernet_embed_dim;
        Mlp2<T>::init(ps, p + ".kgen", state_dim, hy, key_dim * dk * H, rng);
        if (cfg.mode == MixerMode::kStrictMonotonic)
            Mlp2<T>::init(ps, p + ".qgen", state_dim, hy, key_dim * dk * H, rng);
        else
            Mlp2<T>::init(ps, p + ".ugen", state_dim, hy, 2 * dk * H, rng);
        Mlp2<T>::init(ps, p + ".vgen", state_dim, hy, n_agents * dv * H, rng);
        Mlp2<T>::init(ps, p + ".hcomb", state_dim, hy, H, rng);
        const int ctx = dv + key_dim + state_dim;
        Mlp2<T>::init(ps, p + ".wgen", ctx, hy, n_agents, rng);
        Dense<T>::init(ps, p + ".bgen", ctx, 1, rng);
    }

    // utilities: [S x n], keys: [S*n x key_dim], state: [S x state_dim],
    // member mask: [S x n] -> per-type value [S x 1].
    Var<T> type_mix(Tape<T>& tp, ParamSet<T>& ps, int k, Var<T> utilities, Var<T> keys,
                    Var<T> state, const Tensor<T>& member) const {
        const std::string p = cat("mixer.type", k);
        const std::int64_t S = utilities.rows();
        const std::int64_t n = utilities.cols();
        require<ShapeError>(n == n_agents, "type_mix: utilities width ", n, " != n_agents ",
                            n_agents);
        require<ShapeError>(keys.rows() == S * n && keys.cols() == key_dim,
                            "type_mix: keys shaped ", keys.val().shape_str(), ", want [", S * n,
                            "x", key_dim, "]");
        require<ShapeError>(member.rows() == S && member.cols() == n,
                            "type_mix: member mask shape mismatch");
        const int H = cfg.n_heads, dk = cfg.attn_key_dim, dv = cfg.attn_val_dim;

        // constants derived from the membership mask
        Tensor<T> mask_col(S * n, 1);
        Tensor<T> score_bias(S * n, n);
        Tensor<T> inv_cnt(S, 1);
        Tensor<T> has(S, 1);
        for (std::int64_t s = 0; s < S; ++s) {
            int cnt = 0;
            for (std::int64_t j = 0; j < n; ++j) cnt += member.at(s, j) > T(0) ? 1 : 0;
            inv_cnt.at(s, 0) = cnt > 0 ? static_cast<T>(1.0 / cnt) : T(0);
            has.at(s, 0) = cnt > 0 ? T(1) : T(0);
            for (std::int64_t i = 0; i < n; ++i) {
                mask_col.at(s * n + i, 0) = member.at(s, i);
                for (std::int64_t j = 0; j < n; ++j)
                    score_bias.at(s * n + i, j) =
                        member.at(s, j) > T(0) ? T(0) : static_cast<T>(-1e9);
            }
        }
        Var<T> mask_col_v = tp.constant(mask_col);

        Var<T> kw = Mlp2<T>::bind(ps, p + ".kgen").apply(tp, ps, state);
        Var<T> qw{};
        if (cfg.mode == MixerMode::kStrictMonotonic)
            qw = Mlp2<T>::bind(ps, p + ".qgen").apply(tp, ps, state);
        else
            qw = Mlp2<T>::bind(ps, p + ".ugen").apply(tp, ps, state);
        Var<T> vw = Mlp2<T>::bind(ps, p + ".vgen").apply(tp, ps, state);
        Var<T> lam = Mlp2<T>::bind(ps, p + ".hcomb").apply(tp, ps, state);
        Var<T> score_bias_v = tp.constant(score_bias);
        Var<T> u_col = tp.reshape(utilities, {S * n, 1});

        Var<T> comb{};
        for (int h = 0; h < H; ++h) {
            Var<T> k_h = tp.rowwise_matvec(tp.slice_cols(kw, h * key_dim * dk, key_dim * dk),
                                           keys, key_dim, dk, n);
            Var<T> q_h{};
            if (cfg.mode == MixerMode::kStrictMonotonic) {
                q_h = tp.rowwise_matvec(tp.slice_cols(qw, h * key_dim * dk, key_dim * dk), keys,
                                        key_dim, dk, n);
            } else {
                // q_i = u_i * w(s) + b(s): the utilities are the queries
                Var<T> w_u = tp.repeat_rows(tp.slice_cols(qw, h * 2 * dk, dk), n);
                Var<T> b_u = tp.repeat_rows(tp.slice_cols(qw, h * 2 * dk + dk, dk), n);
                q_h = tp.add(tp.mul_colvec(w_u, u_col), b_u);
            }
            Var<T> v_h = tp.reshape(tp.slice_cols(vw, h * n * dv, n * dv), {S * n, dv});
            Var<T> scores = tp.scale(tp.group_matmul_nt(q_h, k_h, n),
                                     static_cast<T>(1.0 / std::sqrt(double(dk))));
            Var<T> attn = tp.softmax_rows(tp.add(scores, score_bias_v));
            Var<T> out_h = tp.group_matmul_nn(attn, v_h, n);
            Var<T> lam_h = tp.repeat_rows(tp.slice_cols(lam, h, 1), n);
            Var<T> scaled = tp.mul_colvec(out_h, lam_h);
            comb = h == 0 ? scaled : tp.add(comb, scaled);
        }

        Var<T> inv_cnt_v = tp.constant(inv_cnt);
        Var<T> pooled_att = tp.mul_colvec(
            tp.group_sum_rows(tp.mul_colvec(comb, mask_col_v), n), inv_cnt_v);
        Var<T> pooled_key = tp.mul_colvec(
            tp.group_sum_rows(tp.mul_colvec(keys, mask_col_v), n), inv_cnt_v);
        Var<T> ctx = tp.concat_cols(tp.concat_cols(pooled_att, pooled_key), state);

        Var<T> w = tp.absval(Mlp2<T>::bind(ps, p + ".wgen").apply(tp, ps, ctx));
        Var<T> wm = tp.mul(w, tp.constant(member));
        Var<T> wu = tp.mul(wm, utilities);
        Tensor<T> ones(n, 1);
        ones.fill(T(1));
        Var<T> qsum = tp.matmul(wu, tp.constant(ones));
        Var<T> bias = Dense<T>::bind(ps, p + ".bgen").apply(tp, ps, ctx);
        return tp.mul_colvec(tp.add(qsum, bias), tp.constant(has));
    }

    // ---- dispatch -------------------------------------------------------

    // utilities: [S x n]; keys: [S*n x key_dim] (QTypeMix: obs ++ embedding,
    // QTypeMix-B: obs only; ignored by QMIX/VDN); state: [S x state_dim];
    // masks: per-type membership.
    Var<T> joint(Tape<T>& tp, ParamSet<T>& ps, Var<T> utilities, Var<T> keys, Var<T> state,
                 const TypeMasks<T>& masks) const {
        require<ShapeError>(utilities.cols() == n_agents, "joint_forward: utilities for ",
                            utilities.cols(), " agents, expected ", n_agents);
        switch (cfg.variant) {
            case MixerVariant::kVdn: {
                Tensor<T> ones(n_agents, 1);
                ones.fill(T(1));
                return tp.matmul(utilities, tp.constant(ones));
            }
            case MixerVariant::kQmix:
                return total_stage(tp, ps, "mixer.flat", cfg, utilities, state);
            default: {
                require<ShapeError>(static_cast<int>(masks.member.size()) == n_types,
                                    "joint_forward: partition inconsistent: ",
                                    masks.member.size(), " masks for ", n_types, " types");
                Var<T> tv{};
                for (int k = 0; k < n_types; ++k) {
                    Var<T> qk = type_mix(tp, ps, k, utilities, keys, state,
                                         masks.member[static_cast<std::size_t>(k)]);
                    tv = k == 0 ? qk : tp.concat_cols(tv, qk);
                }
                return total_mix(tp, ps, tv, state);
            }
        }
    }

    bool uses_embeddings() const { return cfg.variant == MixerVariant::kQTypeMix; }
    bool uses_keys() const {
        return cfg.variant == MixerVariant::kQTypeMix || cfg.variant == MixerVariant::kQTypeMixB;
    }
};

// Exact sum of utilities; the linear-decomposition baseline.
template <class T>
Var<T> vdn_mix(Tape<T>& tp, Var<T> utilities) {
    require(utilities.val().numel() >= 1, "vdn_mix: empty utility vector");
    return tp.sum_all(utilities);
}

// Spec-shaped single-group wrapper: utilities and keys for the agents of one
// type, scattered into their agent slots before the batched path runs.
template <class T>
Var<T> type_mixer_forward(Tape<T>& tp, ParamSet<T>& ps, const MixerNet<T>& net, int k,
                          const TypePartition& part, Var<T> utilities /*[1 x g]*/,
                          Var<T> keys /*[g x key_dim]*/, Var<T> state /*[1 x state_dim]*/) {
    require(k >= 0 && k < part.m, "type_mixer_forward: type index out of range");
    const auto& group = part.groups[static_cast<std::size_t>(k)];
    const std::int64_t g = static_cast<std::int64_t>(group.size());
    require(g >= 1, "type_mixer_forward: empty type group");
    require<ShapeError>(utilities.val().numel() == g, "type_mixer_forward: got ",
                        utilities.val().numel(), " utilities for a group of ", g);
    require<ShapeError>(keys.rows() == g, "type_mixer_forward: got ", keys.rows(),
                        " key rows for a group of ", g);

    const std::int64_t n = net.n_agents;
    Tensor<T> member(1, n);
    std::vector<std::int64_t> slot_of_col(static_cast<std::size_t>(n), 0);
    std::vector<std::int64_t> key_row_of(static_cast<std::size_t>(n), g);  // g = zero row
    for (std::int64_t idx = 0; idx < g; ++idx) {
        const auto slot = static_cast<std::int64_t>(group[static_cast<std::size_t>(idx)]);
        member.at(0, slot) = T(1);
        slot_of_col[static_cast<std::size_t>(slot)] = idx;
        key_row_of[static_cast<std::size_t>(slot)] = idx;
    }
    // scatter utilities into [1 x n]: non-members read entry 0 and are masked
    Var<T> u_row = tp.reshape(utilities, {1, g});
    Var<T> u_full{};
    {
        std::vector<std::int64_t> cols(slot_of_col.begin(), slot_of_col.end());
        Var<T> u_cols = tp.gather_cols(tp.repeat_rows(u_row, n), cols);  // [n x 1]
        u_full = tp.mul(tp.reshape(u_cols, {1, n}), tp.constant(member));
    }
    // scatter keys into [n x key_dim]; an appended zero row feeds non-members
    Tensor<T> zero_row(1, net.key_dim);
    Var<T> keys_ext = tp.concat_rows({keys, tp.constant(zero_row)});
    Var<T> keys_full = tp.select_rows(keys_ext, key_row_of);
    return net.type_mix(tp, ps, k, u_full, keys_full, state, member);
}

}  // namespace qtm

#pragma once

#include <cmath>
#include <string>

#include "qtypemix/tape.hpp"

namespace qtm {

// y = x W + b
template <class T>
Var<T> linear(Tape<T>& tp, Var<T> x, Var<T> w, Var<T> b) {
    return tp.add_rowvec(tp.matmul(x, w), b);
}

// Plain dense layer bound to named parameters.
template <class T>
struct Dense {
    std::string w_name, b_name;
    std::int64_t in = 0, out = 0;

    static Dense init(ParamSet<T>& ps, const std::string& prefix, std::int64_t in,
                      std::int64_t out, RngStream& rng) {
        Dense d{prefix + ".w", prefix + ".b", in, out};
        ps.add_linear_init(d.w_name, {in, out}, in, rng);
        ps.add_linear_init(d.b_name, {1, out}, in, rng);
        return d;
    }
    static Dense bind(const ParamSet<T>& ps, const std::string& prefix) {
        Dense d{prefix + ".w", prefix + ".b", 0, 0};
        d.in = ps.value(d.w_name).rows();
        d.out = ps.value(d.w_name).cols();
        return d;
    }
    Var<T> apply(Tape<T>& tp, ParamSet<T>& ps, Var<T> x) const {
        return linear(tp, x, tp.param(ps, w_name), tp.param(ps, b_name));
    }
};

// Two-layer generator used by every hypernetwork: linear -> relu -> linear.
template <class T>
struct Mlp2 {
    Dense<T> l1, l2;

    static Mlp2 init(ParamSet<T>& ps, const std::string& prefix, std::int64_t in,
                     std::int64_t hidden, std::int64_t out, RngStream& rng) {
        return {Dense<T>::init(ps, prefix + ".h", in, hidden, rng),
                Dense<T>::init(ps, prefix + ".o", hidden, out, rng)};
    }
    static Mlp2 bind(const ParamSet<T>& ps, const std::string& prefix) {
        return {Dense<T>::bind(ps, prefix + ".h"), Dense<T>::bind(ps, prefix + ".o")};
    }
    Var<T> apply(Tape<T>& tp, ParamSet<T>& ps, Var<T> x) const {
        return l2.apply(tp, ps, tp.relu(l1.apply(tp, ps, x)));
    }
};

// Gated recurrent unit, torch gate conventions:
//   r = sigm(x Wir + h Whr + br), z = sigm(x Wiz + h Whz + bz)
//   n = tanh(x Win + bin + r * (h Whn + bhn)),  h' = (1-z)*n + z*h
// so a saturated update gate (z=1) passes the old state through unchanged.
template <class T>
struct GruCell {
    std::string prefix;
    std::int64_t in = 0, hidden = 0;

    static GruCell init(ParamSet<T>& ps, const std::string& prefix, std::int64_t in,
                        std::int64_t hidden, RngStream& rng) {
        GruCell g{prefix, in, hidden};
        ps.add_linear_init(prefix + ".wi", {in, 3 * hidden}, in, rng);
        ps.add_linear_init(prefix + ".wh", {hidden, 3 * hidden}, hidden, rng);
        ps.add_linear_init(prefix + ".bi", {1, 3 * hidden}, in, rng);
        ps.add_linear_init(prefix + ".bh", {1, 3 * hidden}, hidden, rng);
        return g;
    }
    static GruCell bind(const ParamSet<T>& ps, const std::string& prefix) {
        GruCell g{prefix, 0, 0};
        g.in = ps.value(prefix + ".wi").rows();
        g.hidden = ps.value(prefix + ".wh").rows();
        return g;
    }

    Var<T> step(Tape<T>& tp, ParamSet<T>& ps, Var<T> x, Var<T> h) const {
        require<ShapeError>(x.cols() == in, "gru_step: input width ", x.cols(), " expected ", in);
        require<ShapeError>(h.cols() == hidden, "gru_step: hidden width ", h.cols(), " expected ",
                            hidden);
        Var<T> gi = tp.add_rowvec(tp.matmul(x, tp.param(ps, prefix + ".wi")),
                                  tp.param(ps, prefix + ".bi"));
        Var<T> gh = tp.add_rowvec(tp.matmul(h, tp.param(ps, prefix + ".wh")),
                                  tp.param(ps, prefix + ".bh"));
        Var<T> r = tp.sigmoid(tp.add(tp.slice_cols(gi, 0, hidden), tp.slice_cols(gh, 0, hidden)));
        Var<T> z = tp.sigmoid(
            tp.add(tp.slice_cols(gi, hidden, hidden), tp.slice_cols(gh, hidden, hidden)));
        Var<T> n = tp.tanh_act(tp.add(tp.slice_cols(gi, 2 * hidden, hidden),
                                      tp.mul(r, tp.slice_cols(gh, 2 * hidden, hidden))));
        return tp.add(tp.mul(tp.sub_from_scalar(T(1), z), n), tp.mul(z, h));
    }
};

// softmax(Q K^T / sqrt(d_k)) V, softmax row-wise. d_k is the shared Q/K width.
template <class T>
Var<T> scaled_dot_attention(Tape<T>& tp, Var<T> q, Var<T> k, Var<T> v) {
    require<ShapeError>(k.rows() == v.rows(), "attention: K rows ", k.rows(), " != V rows ",
                        v.rows());
    require<ShapeError>(q.cols() == k.cols(), "attention: Q cols ", q.cols(), " != K cols ",
                        k.cols());
    const T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.cols())));
    Var<T> scores = tp.scale(tp.matmul_nt(q, k), inv_sqrt_dk);
    return tp.matmul(tp.softmax_rows(scores), v);
}

struct AttentionSpec {
    std::int64_t n_heads = 1;
    std::int64_t d_k = 8;   // per-head key/query width
    std::int64_t d_v = 8;   // per-head value width
    std::int64_t q_dim = 0, k_dim = 0, v_dim = 0;
    std::int64_t out_dim = 0;

    void validate() const {
        require<ConfigError>(n_heads >= 1, "AttentionSpec: n_heads must be >= 1");
        require<ConfigError>(d_k >= 1, "AttentionSpec: d_k must be >= 1");
        require<ConfigError>(d_v >= 1, "AttentionSpec: d_v must be >= 1");
    }
};

template <class T>
struct MultiHeadAttention {
    AttentionSpec spec;
    std::string prefix;

    static MultiHeadAttention init(ParamSet<T>& ps, const std::string& prefix,
                                   const AttentionSpec& spec, RngStream& rng) {
        spec.validate();
        ps.add_linear_init(prefix + ".wq", {spec.q_dim, spec.n_heads * spec.d_k}, spec.q_dim, rng);
        ps.add_linear_init(prefix + ".wk", {spec.k_dim, spec.n_heads * spec.d_k}, spec.k_dim, rng);
        ps.add_linear_init(prefix + ".wv", {spec.v_dim, spec.n_heads * spec.d_v}, spec.v_dim, rng);
        ps.add_linear_init(prefix + ".wo", {spec.n_heads * spec.d_v, spec.out_dim},
                           spec.n_heads * spec.d_v, rng);
        ps.add_linear_init(prefix + ".bo", {1, spec.out_dim}, spec.n_heads * spec.d_v, rng);
        return {spec, prefix};
    }

    Var<T> apply(Tape<T>& tp, ParamSet<T>& ps, Var<T> q, Var<T> k, Var<T> v) const {
        require<ShapeError>(q.cols() == spec.q_dim && k.cols() == spec.k_dim &&
                                v.cols() == spec.v_dim,
                            "multi_head_attention: input widths do not match spec");
        Var<T> qp = tp.matmul(q, tp.param(ps, prefix + ".wq"));
        Var<T> kp = tp.matmul(k, tp.param(ps, prefix + ".wk"));
        Var<T> vp = tp.matmul(v, tp.param(ps, prefix + ".wv"));
        Var<T> heads{};
        for (std::int64_t h = 0; h < spec.n_heads; ++h) {
            Var<T> oh = scaled_dot_attention(tp, tp.slice_cols(qp, h * spec.d_k, spec.d_k),
                                             tp.slice_cols(kp, h * spec.d_k, spec.d_k),
                                             tp.slice_cols(vp, h * spec.d_v, spec.d_v));
            heads = h == 0 ? oh : tp.concat_cols(heads, oh);
        }
        return linear(tp, heads, tp.param(ps, prefix + ".wo"), tp.param(ps, prefix + ".bo"));
    }
};

// a.b / max(|a||b|, eps), well defined for zero vectors.
template <class T>
Var<T> cosine_similarity(Tape<T>& tp, Var<T> a, Var<T> b, T eps = static_cast<T>(1e-8)) {
    require<ShapeError>(a.val().numel() == b.val().numel(),
                        "cosine_similarity: length mismatch ", a.val().shape_str(), " vs ",
                        b.val().shape_str());
    Var<T> ar = tp.reshape(a, {1, a.val().numel()});
    Var<T> br = tp.reshape(b, {1, b.val().numel()});
    return tp.reshape(tp.rowwise_cosine(ar, br, eps), {1});
}

}  // namespace qtm

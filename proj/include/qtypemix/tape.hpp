#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <utility>
#include <vector>

#include "qtypemix/params.hpp"
#include "qtypemix/tensor.hpp"

namespace qtm {

// Reverse-mode autodiff over a per-forward-pass tape. Ops append nodes whose
// closures accumulate gradients into parent nodes; backward() walks the tape
// in reverse creation order and then flushes gradients of bound parameters
// into their ParamSet buffers (accumulating across calls until clear_grads).
//
// Dense matmuls delegate to Eigen; everything else is plain loops.
template <class T>
class Tape;

template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::int32_t idx = -1;

    bool valid() const { return tape != nullptr && idx >= 0; }
    const Tensor<T>& val() const;
    std::int64_t rows() const { return val().rows(); }
    std::int64_t cols() const { return val().cols(); }
};

template <class T>
class Tape {
  public:
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapM = Eigen::Map<Mat>;
    using CMapM = Eigen::Map<const Mat>;

    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    const Tensor<T>& val(Var<T> v) const { return nodes_[static_cast<std::size_t>(v.idx)].val; }

    // Gradient of the last backward() target w.r.t. this node.
    const Tensor<T>& grad_of(Var<T> v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.idx)];
        require(n.needs_grad, "grad_of: node does not track gradients");
        return n.grad;
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    // ---- leaves ------------------------------------------------------

    Var<T> leaf(Tensor<T> value, bool needs_grad = false) {
        return push_leaf(std::move(value), recording_ && needs_grad);
    }

    Var<T> constant(const Tensor<T>& value) { return leaf(value, false); }

    Var<T> scalar_const(T v) { return leaf(Tensor<T>::scalar(v), false); }

    // Binds a named parameter once per tape; repeated requests return the
    // same node so gradient contributions from all uses accumulate.
    Var<T> param(ParamSet<T>& ps, const std::string& name) {
        auto key = std::make_pair(static_cast<const void*>(&ps), name);
        auto it = bound_.find(key);
        if (it != bound_.end()) return Var<T>{this, it->second};
        Var<T> v = leaf(ps.value(name), recording_);
        if (recording_) param_sinks_.push_back({v.idx, &ps.grad(name)});
        bound_[key] = v.idx;
        return v;
    }

    // ---- elementwise -------------------------------------------------

    Var<T> add(Var<T> a, Var<T> b) {
        require_same_shape(a, b, "add");
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
        return push(std::move(out), wants(a, b), [ai = a.idx, bi = b.idx](Tape& t, const Node& n) {
            t.accum(ai, n.grad);
            t.accum(bi, n.grad);
        });
    }

    Var<T> sub(Var<T> a, Var<T> b) {
        require_same_shape(a, b, "sub");
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= vb.data[i];
        return push(std::move(out), wants(a, b), [ai = a.idx, bi = b.idx](Tape& t, const Node& n) {
            t.accum(ai, n.grad);
            t.accum_scaled(bi, n.grad, T(-1));
        });
    }

    Var<T> mul(Var<T> a, Var<T> b) {
        require_same_shape(a, b, "mul");
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb.data[i];
        return push(std::move(out), wants(a, b), [ai = a.idx, bi = b.idx](Tape& t, const Node& n) {
            t.accum_mul(ai, n.grad, t.nodes_[bi].val);
            t.accum_mul(bi, n.grad, t.nodes_[ai].val);
        });
    }

    Var<T> scale(Var<T> a, T k) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v *= k;
        return push(std::move(out), wants(a), [ai = a.idx, k](Tape& t, const Node& n) {
            t.accum_scaled(ai, n.grad, k);
        });
    }

    Var<T> add_scalar(Var<T> a, T k) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v += k;
        return push(std::move(out), wants(a), [ai = a.idx](Tape& t, const Node& n) {
            t.accum(ai, n.grad);
        });
    }

    // k - a
    Var<T> sub_from_scalar(T k, Var<T> a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = k - v;
        return push(std::move(out), wants(a), [ai = a.idx](Tape& t, const Node& n) {
            t.accum_scaled(ai, n.grad, T(-1));
        });
    }

    Var<T> vmax(Var<T> a, Var<T> b) {
        require_same_shape(a, b, "vmax");
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (std::size_t i = 0; i < out.data.size(); ++i)
            out.data[i] = out.data[i] >= vb.data[i] ? out.data[i] : vb.data[i];
        return push(std::move(out), wants(a, b), [ai = a.idx, bi = b.idx](Tape& t, const Node& n) {
            const Tensor<T>& va = t.nodes_[ai].val;
            const Tensor<T>& vb2 = t.nodes_[bi].val;
            Tensor<T>& ga = t.nodes_[ai].grad;
            Tensor<T>& gb = t.nodes_[bi].grad;
            for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
                if (va.data[i] >= vb2.data[i])
                    ga.data[i] += n.grad.data[i];
                else
                    gb.data[i] += n.grad.data[i];
            }
        });
    }

    Var<T> detach(Var<T> a) { return leaf(val(a), false); }

    // ---- activations -------------------------------------------------

    Var<T> relu(Var<T> a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = v > T(0) ? v : T(0);
        return push(std::move(out), wants(a), [ai = a.idx](Tape& t, const Node& n) {
            const Tensor<T>& x = t.nodes_[ai].val;
            Tensor<T>& g = t.nodes_[ai].grad;
            for (std::size_t i = 0; i < x.data.size(); ++i)
                if (x.data[i] > T(0)) g.data[i] += n.grad.data[i];
        });
    }

    Var<T> elu(Var<T> a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data)
            v = v > T(0) ? v : static_cast<T>(std::exp(static_cast<double>(v)) - 1.0);
        return push(std::move(out), wants(a), [ai = a.idx](Tape& t, const Node& n) {
            const Tensor<T>& x = t.nodes_[ai].val;
            const Tensor<T>& y = n.val;
            Tensor<T>& g = t.nodes_[ai].grad;
            for (std::size_t i = 0; i < x.data.size(); ++i)
                g.data[i] += n.grad.data[i] * (x.data[i] > T(0) ? T(1) : y.data[i] + T(1));
        });
    }

    Var<T> tanh_act(Var<T> a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(std::tanh(static_cast<double>(v)));
        return push(std::move(out), wants(a), [ai = a.idx](Tape& t, const Node& n) {
            const Tensor<T>& y = n.val;
            Tensor<T>& g = t.nodes_[ai].grad;
            for (std::size_t i = 0; i < y.data.size(); ++i)
                g.data[i] += n.grad.data[i] * (T(1) - y.data[i] * y.data[i]);
        });
    }

    Var<T> sigmoid(Var<T> a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data)
            v = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
        return push(std::move(out), wants(a), [ai = a.idx](Tape& t, const Node& n) {
            const Tensor<T>& y = n.val;
            Tensor<T>& g = t.nodes_[ai].grad;
            for (std::size_t i = 0; i < y.data.size(); ++i)
                g.data[i] += n.grad.data[i] * y.data[i] * (T(1) - y.data[i]);
        });
    }

    Var<T> absval(Var<T> a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = v < T(0) ? -v : v;
        return push(std::move(out), wants(a), [ai = a.idx](Tape& t, const Node& n) {
            const Tensor<T>& x = t.nodes_[ai].val;
            Tensor<T>& g = t.nodes_[ai].grad;
            for (std::size_t i = 0; i < x.data.size(); ++i)
                g.data[i] += n.grad.data[i] * (x.data[i] < T(0) ? T(-1) : T(1));
        });
    }

    // row-wise softmax over the trailing dimension
    Var<T> softmax_rows(Var<T> a) {
        Tensor<T> out = val(a);
        const std::int64_t R = out.rows(), C = out.cols();
        for (std::int64_t r = 0; r < R; ++r) {
            T m = out.at(r, 0);
            for (std::int64_t c = 1; c < C; ++c) m = std::max(m, out.at(r, c));
            double s = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                double e = std::exp(static_cast<double>(out.at(r, c) - m));
                out.at(r, c) = static_cast<T>(e);
                s += e;
            }
            for (std::int64_t c = 0; c < C; ++c)
                out.at(r, c) = static_cast<T>(static_cast<double>(out.at(r, c)) / s);
        }
        return push(std::move(out), wants(a), [ai = a.idx](Tape& t, const Node& n) {
            const Tensor<T>& y = n.val;
            Tensor<T>& g = t.nodes_[ai].grad;
            const std::int64_t R = y.rows(), C = y.cols();
            for (std::int64_t r = 0; r < R; ++r) {
                double dot = 0;
                for (std::int64_t c = 0; c < C; ++c)
                    dot += static_cast<double>(n.grad.at(r, c)) * static_cast<double>(y.at(r, c));
                for (std::int64_t c = 0; c < C; ++c)
                    g.at(r, c) += y.at(r, c) * (n.grad.at(r, c) - static_cast<T>(dot));
            }
        });
    }

    // ---- matrix products --------------------------------------------

    Var<T> matmul(Var<T> a, Var<T> b) {
        const Tensor<T>& va = val(a);
        const Tensor<T>& vb = val(b);
        require<ShapeError>(va.cols() == vb.rows(), "matmul: inner dims disagree: ",
                            va.shape_str(), " vs ", vb.shape_str());
        Tensor<T> out(va.rows(), vb.cols());
        mat(out).noalias() = cmat(va) * cmat(vb);
        return push(std::move(out), wants(a, b), [ai = a.idx, bi = b.idx](Tape& t, const Node& n) {
            const Tensor<T>& va2 = t.nodes_[ai].val;
            const Tensor<T>& vb2 = t.nodes_[bi].val;
            if (t.nodes_[ai].needs_grad)
                t.mat(t.nodes_[ai].grad).noalias() += cmat(n.grad) * cmat(vb2).transpose();
            if (t.nodes_[bi].needs_grad)
                t.mat(t.nodes_[bi].grad).noalias() += cmat(va2).transpose() * cmat(n.grad);
        });
    }

    // A [M x K] times B^T where B is [N x K]
    Var<T> matmul_nt(Var<T> a, Var<T> b) {
        const Tensor<T>& va = val(a);
        const Tensor<T>& vb = val(b);
        require<ShapeError>(va.cols() == vb.cols(), "matmul_nt: shared dim disagrees: ",
                            va.shape_str(), " vs ", vb.shape_str());
        Tensor<T> out(va.rows(), vb.rows());
        mat(out).noalias() = cmat(va) * cmat(vb).transpose();
        return push(std::move(out), wants(a, b), [ai = a.idx, bi = b.idx](Tape& t, const Node& n) {
            const Tensor<T>& va2 = t.nodes_[ai].val;
            const Tensor<T>& vb2 = t.nodes_[bi].val;
            if (t.nodes_[ai].needs_grad)
                t.mat(t.nodes_[ai].grad).noalias() += cmat(n.grad) * cmat(vb2);
            if (t.nodes_[bi].needs_grad)
                t.mat(t.nodes_[bi].grad).noalias() += cmat(n.grad).transpose() * cmat(va2);
        });
    }

    // Per consecutive row-group of size gs: S_g = A_g * B_g^T.
    // A, B are [N*gs x d]; result is [N*gs x gs].
    Var<T> group_matmul_nt(Var<T> a, Var<T> b, std::int64_t gs) {
        const Tensor<T>& va = val(a);
        const Tensor<T>& vb = val(b);
        require<ShapeError>(va.cols() == vb.cols() && va.rows() == vb.rows() &&
                                gs > 0 && va.rows() % gs == 0,
                            "group_matmul_nt: bad shapes ", va.shape_str(), " ", vb.shape_str(),
                            " gs=", gs);
        const std::int64_t G = va.rows() / gs;
        Tensor<T> out(va.rows(), gs);
        for (std::int64_t g = 0; g < G; ++g)
            mat(out).middleRows(g * gs, gs).noalias() =
                cmat(va).middleRows(g * gs, gs) * cmat(vb).middleRows(g * gs, gs).transpose();
        return push(std::move(out), wants(a, b),
                    [ai = a.idx, bi = b.idx, gs, G](Tape& t, const Node& n) {
                        const Tensor<T>& va2 = t.nodes_[ai].val;
                        const Tensor<T>& vb2 = t.nodes_[bi].val;
                        for (std::int64_t g = 0; g < G; ++g) {
                            auto dS = cmat(n.grad).middleRows(g * gs, gs);
                            if (t.nodes_[ai].needs_grad)
                                t.mat(t.nodes_[ai].grad).middleRows(g * gs, gs).noalias() +=
                                    dS * cmat(vb2).middleRows(g * gs, gs);
                            if (t.nodes_[bi].needs_grad)
                                t.mat(t.nodes_[bi].grad).middleRows(g * gs, gs).noalias() +=
                                    dS.transpose() * cmat(va2).middleRows(g * gs, gs);
                        }
                    });
    }

    // Per group: O_g = S_g * V_g, S is [N*gs x gs], V is [N*gs x d].
    Var<T> group_matmul_nn(Var<T> s, Var<T> v, std::int64_t gs) {
        const Tensor<T>& vs = val(s);
        const Tensor<T>& vv = val(v);
        require<ShapeError>(vs.cols() == gs && vs.rows() == vv.rows() && gs > 0 &&
                                vs.rows() % gs == 0,
                            "group_matmul_nn: bad shapes ", vs.shape_str(), " ", vv.shape_str(),
                            " gs=", gs);
        const std::int64_t G = vs.rows() / gs;
        Tensor<T> out(vv.rows(), vv.cols());
        for (std::int64_t g = 0; g < G; ++g)
            mat(out).middleRows(g * gs, gs).noalias() =
                cmat(vs).middleRows(g * gs, gs) * cmat(vv).middleRows(g * gs, gs);
        return push(std::move(out), wants(s, v),
                    [si = s.idx, vi = v.idx, gs, G](Tape& t, const Node& n) {
                        const Tensor<T>& vs2 = t.nodes_[si].val;
                        const Tensor<T>& vv2 = t.nodes_[vi].val;
                        for (std::int64_t g = 0; g < G; ++g) {
                            auto dO = cmat(n.grad).middleRows(g * gs, gs);
                            if (t.nodes_[si].needs_grad)
                                t.mat(t.nodes_[si].grad).middleRows(g * gs, gs).noalias() +=
                                    dO * cmat(vv2).middleRows(g * gs, gs).transpose();
                            if (t.nodes_[vi].needs_grad)
                                t.mat(t.nodes_[vi].grad).middleRows(g * gs, gs).noalias() +=
                                    cmat(vs2).middleRows(g * gs, gs).transpose() * dO;
                        }
                    });
    }

    // Row m of the output is x_m^T W_g with W_g = reshape(G_g, in x out) and
    // g = m / x_rows_per_gen_row, so one generated weight row can serve a
    // whole group of input rows without materializing a repeat.
    Var<T> rowwise_matvec(Var<T> gen, Var<T> x, std::int64_t in_dim, std::int64_t out_dim,
                          std::int64_t x_rows_per_gen_row = 1) {
        const Tensor<T>& vg = val(gen);
        const Tensor<T>& vx = val(x);
        const std::int64_t gg = x_rows_per_gen_row;
        require<ShapeError>(vx.cols() == in_dim && vg.cols() == in_dim * out_dim && gg > 0 &&
                                vg.rows() * gg == vx.rows(),
                            "rowwise_matvec: bad shapes gen=", vg.shape_str(), " x=",
                            vx.shape_str(), " in=", in_dim, " out=", out_dim, " group=", gg);
        const std::int64_t M = vx.rows();
        Tensor<T> out(M, out_dim);
        for (std::int64_t m = 0; m < M; ++m) {
            CMapM W(vg.data.data() + (m / gg) * in_dim * out_dim, in_dim, out_dim);
            Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> xr(vx.data.data() + m * in_dim,
                                                                     in_dim);
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> yr(out.data.data() + m * out_dim,
                                                               out_dim);
            yr.noalias() = xr * W;
        }
        return push(std::move(out), wants(gen, x),
                    [gi = gen.idx, xi = x.idx, in_dim, out_dim, M, gg](Tape& t, const Node& n) {
                        const Tensor<T>& vg2 = t.nodes_[gi].val;
                        const Tensor<T>& vx2 = t.nodes_[xi].val;
                        for (std::int64_t m = 0; m < M; ++m) {
                            Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> dy(
                                n.grad.data.data() + m * out_dim, out_dim);
                            if (t.nodes_[gi].needs_grad) {
                                MapM dW(t.nodes_[gi].grad.data.data() +
                                            (m / gg) * in_dim * out_dim,
                                        in_dim, out_dim);
                                Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> xr(
                                    vx2.data.data() + m * in_dim, in_dim);
                                dW.noalias() += xr.transpose() * dy;
                            }
                            if (t.nodes_[xi].needs_grad) {
                                CMapM W(vg2.data.data() + (m / gg) * in_dim * out_dim, in_dim,
                                        out_dim);
                                Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> dx(
                                    t.nodes_[xi].grad.data.data() + m * in_dim, in_dim);
                                dx.noalias() += dy * W.transpose();
                            }
                        }
                    });
    }

    Var<T> slice_rows(Var<T> a, std::int64_t r0, std::int64_t len) {
        const Tensor<T>& va = val(a);
        require<ShapeError>(r0 >= 0 && len >= 0 && r0 + len <= va.rows(), "slice_rows: [", r0,
                            ", ", r0 + len, ") out of ", va.shape_str());
        const std::int64_t C = va.cols();
        Tensor<T> out(len, C);
        std::copy(va.data.begin() + r0 * C, va.data.begin() + (r0 + len) * C, out.data.begin());
        return push(std::move(out), wants(a), [ai = a.idx, r0, C](Tape& t, const Node& n) {
            Tensor<T>& g = t.nodes_[ai].grad;
            for (std::size_t i = 0; i < n.grad.data.size(); ++i)
                g.data[static_cast<std::size_t>(r0 * C) + i] += n.grad.data[i];
        });
    }

    Var<T> concat_rows(const std::vector<Var<T>>& parts) {
        require<ShapeError>(!parts.empty(), "concat_rows: no inputs");
        const std::int64_t C = val(parts[0]).cols();
        std::int64_t R = 0;
        bool any_grad = false;
        for (const auto& p : parts) {
            require<ShapeError>(val(p).cols() == C, "concat_rows: column mismatch");
            R += val(p).rows();
            any_grad = any_grad || node(p).needs_grad;
        }
        Tensor<T> out(R, C);
        std::int64_t r = 0;
        std::vector<std::int32_t> idxs;
        std::vector<std::int64_t> offsets;
        for (const auto& p : parts) {
            const Tensor<T>& v = val(p);
            std::copy(v.data.begin(), v.data.end(), out.data.begin() + r * C);
            idxs.push_back(p.idx);
            offsets.push_back(r * C);
            r += v.rows();
        }
        return push(std::move(out), recording_ && any_grad,
                    [idxs = std::move(idxs), offsets = std::move(offsets)](Tape& t,
                                                                           const Node& n) {
                        for (std::size_t k = 0; k < idxs.size(); ++k) {
                            Node& p = t.nodes_[static_cast<std::size_t>(idxs[k])];
                            if (!p.needs_grad) continue;
                            for (std::size_t i = 0; i < p.grad.data.size(); ++i)
                                p.grad.data[i] +=
                                    n.grad.data[static_cast<std::size_t>(offsets[k]) + i];
                        }
                    });
    }

    // ---- shape & indexing ops ----------------------------------------

    Var<T> reshape(Var<T> a, std::vector<std::int64_t> new_shape) {
        const Tensor<T>& va = val(a);
        require<ShapeError>(Tensor<T>::numel_of(new_shape) == va.numel(), "reshape: ",
                            va.shape_str(), " has wrong element count");
        Tensor<T> out = va;
        out.shape = new_shape;
        return push(std::move(out), wants(a), [ai = a.idx](Tape& t, const Node& n) {
            Tensor<T>& g = t.nodes_[ai].grad;
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        });
    }

    Var<T> concat_cols(Var<T> a, Var<T> b) {
        const Tensor<T>& va = val(a);
        const Tensor<T>& vb = val(b);
        require<ShapeError>(va.rows() == vb.rows(), "concat_cols: row counts differ: ",
                            va.shape_str(), " vs ", vb.shape_str());
        const std::int64_t R = va.rows(), Ca = va.cols(), Cb = vb.cols();
        Tensor<T> out(R, Ca + Cb);
        for (std::int64_t r = 0; r < R; ++r) {
            for (std::int64_t c = 0; c < Ca; ++c) out.at(r, c) = va.at(r, c);
            for (std::int64_t c = 0; c < Cb; ++c) out.at(r, Ca + c) = vb.at(r, c);
        }
        return push(std::move(out), wants(a, b),
                    [ai = a.idx, bi = b.idx, R, Ca, Cb](Tape& t, const Node& n) {
                        Tensor<T>& ga = t.nodes_[ai].grad;
                        Tensor<T>& gb = t.nodes_[bi].grad;
                        for (std::int64_t r = 0; r < R; ++r) {
                            if (t.nodes_[ai].needs_grad)
                                for (std::int64_t c = 0; c < Ca; ++c)
                                    ga.at(r, c) += n.grad.at(r, c);
                            if (t.nodes_[bi].needs_grad)
                                for (std::int64_t c = 0; c < Cb; ++c)
                                    gb.at(r, c) += n.grad.at(r, Ca + c);
                        }
                    });
    }

    Var<T> slice_cols(Var<T> a, std::int64_t c0, std::int64_t len) {
        const Tensor<T>& va = val(a);
        require<ShapeError>(c0 >= 0 && len >= 0 && c0 + len <= va.cols(), "slice_cols: [", c0,
                            ", ", c0 + len, ") out of ", va.shape_str());
        const std::int64_t R = va.rows();
        Tensor<T> out(R, len);
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < len; ++c) out.at(r, c) = va.at(r, c0 + c);
        return push(std::move(out), wants(a), [ai = a.idx, c0, len, R](Tape& t, const Node& n) {
            Tensor<T>& g = t.nodes_[ai].grad;
            for (std::int64_t r = 0; r < R; ++r)
                for (std::int64_t c = 0; c < len; ++c) g.at(r, c0 + c) += n.grad.at(r, c);
        });
    }

    Var<T> select_rows(Var<T> a, std::vector<std::int64_t> rows_idx) {
        const Tensor<T>& va = val(a);
        const std::int64_t C = va.cols();
        Tensor<T> out(static_cast<std::int64_t>(rows_idx.size()), C);
        for (std::size_t r = 0; r < rows_idx.size(); ++r) {
            require<ShapeError>(rows_idx[r] >= 0 && rows_idx[r] < va.rows(),
                                "select_rows: index out of range");
            for (std::int64_t c = 0; c < C; ++c)
                out.at(static_cast<std::int64_t>(r), c) = va.at(rows_idx[r], c);
        }
        return push(std::move(out), wants(a),
                    [ai = a.idx, idx = std::move(rows_idx), C](Tape& t, const Node& n) {
                        Tensor<T>& g = t.nodes_[ai].grad;
                        for (std::size_t r = 0; r < idx.size(); ++r)
                            for (std::int64_t c = 0; c < C; ++c)
                                g.at(idx[r], c) += n.grad.at(static_cast<std::int64_t>(r), c);
                    });
    }

    // y[r] = a(r, idx[r]); one column picked per row
    Var<T> gather_cols(Var<T> a, std::vector<std::int64_t> col_idx) {
        const Tensor<T>& va = val(a);
        require<ShapeError>(static_cast<std::int64_t>(col_idx.size()) == va.rows(),
                            "gather_cols: need one index per row");
        Tensor<T> out(va.rows(), 1);
        for (std::int64_t r = 0; r < va.rows(); ++r) {
            require<ShapeError>(col_idx[static_cast<std::size_t>(r)] >= 0 &&
                                    col_idx[static_cast<std::size_t>(r)] < va.cols(),
                                "gather_cols: index out of range at row ", r);
            out.at(r, 0) = va.at(r, col_idx[static_cast<std::size_t>(r)]);
        }
        return push(std::move(out), wants(a),
                    [ai = a.idx, idx = std::move(col_idx)](Tape& t, const Node& n) {
                        Tensor<T>& g = t.nodes_[ai].grad;
                        for (std::int64_t r = 0; r < n.grad.rows(); ++r)
                            g.at(r, idx[static_cast<std::size_t>(r)]) += n.grad.at(r, 0);
                    });
    }

    Var<T> repeat_rows(Var<T> a, std::int64_t times) {
        const Tensor<T>& va = val(a);
        require<ShapeError>(times > 0, "repeat_rows: times must be positive");
        const std::int64_t R = va.rows(), C = va.cols();
        Tensor<T> out(R * times, C);
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t k = 0; k < times; ++k)
                for (std::int64_t c = 0; c < C; ++c) out.at(r * times + k, c) = va.at(r, c);
        return push(std::move(out), wants(a), [ai = a.idx, times, R, C](Tape& t, const Node& n) {
            Tensor<T>& g = t.nodes_[ai].grad;
            for (std::int64_t r = 0; r < R; ++r)
                for (std::int64_t k = 0; k < times; ++k)
                    for (std::int64_t c = 0; c < C; ++c)
                        g.at(r, c) += n.grad.at(r * times + k, c);
        });
    }

    Var<T> group_sum_rows(Var<T> a, std::int64_t gs) {
        const Tensor<T>& va = val(a);
        require<ShapeError>(gs > 0 && va.rows() % gs == 0, "group_sum_rows: ", va.shape_str(),
                            " not divisible into groups of ", gs);
        const std::int64_t G = va.rows() / gs, C = va.cols();
        Tensor<T> out(G, C);
        for (std::int64_t g = 0; g < G; ++g)
            for (std::int64_t k = 0; k < gs; ++k)
                for (std::int64_t c = 0; c < C; ++c) out.at(g, c) += va.at(g * gs + k, c);
        return push(std::move(out), wants(a), [ai = a.idx, gs, C](Tape& t, const Node& n) {
            Tensor<T>& g = t.nodes_[ai].grad;
            for (std::int64_t r = 0; r < n.grad.rows(); ++r)
                for (std::int64_t k = 0; k < gs; ++k)
                    for (std::int64_t c = 0; c < C; ++c)
                        g.at(r * gs + k, c) += n.grad.at(r, c);
        });
    }

    // ---- broadcasts ---------------------------------------------------

    // bias add: b broadcast over rows
    Var<T> add_rowvec(Var<T> a, Var<T> b) {
        const Tensor<T>& va = val(a);
        const Tensor<T>& vb = val(b);
        require<ShapeError>(vb.numel() == va.cols(), "add_rowvec: bias ", vb.shape_str(),
                            " does not match cols of ", va.shape_str());
        Tensor<T> out = va;
        const std::int64_t R = va.rows(), C = va.cols();
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < C; ++c) out.at(r, c) += vb.data[static_cast<std::size_t>(c)];
        return push(std::move(out), wants(a, b), [ai = a.idx, bi = b.idx, R, C](Tape& t, const Node& n) {
            t.accum(ai, n.grad);
            if (t.nodes_[bi].needs_grad) {
                Tensor<T>& gb = t.nodes_[bi].grad;
                for (std::int64_t r = 0; r < R; ++r)
                    for (std::int64_t c = 0; c < C; ++c)
                        gb.data[static_cast<std::size_t>(c)] += n.grad.at(r, c);
            }
        });
    }

    // y(r,c) = a(r,c) * k(r,0)
    Var<T> mul_colvec(Var<T> a, Var<T> k) {
        const Tensor<T>& va = val(a);
        const Tensor<T>& vk = val(k);
        require<ShapeError>(vk.rows() == va.rows() && vk.cols() == 1, "mul_colvec: ",
                            vk.shape_str(), " must be [", va.rows(), "x1]");
        Tensor<T> out = va;
        const std::int64_t R = va.rows(), C = va.cols();
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < C; ++c) out.at(r, c) *= vk.at(r, 0);
        return push(std::move(out), wants(a, k), [ai = a.idx, ki = k.idx, R, C](Tape& t, const Node& n) {
            const Tensor<T>& va2 = t.nodes_[ai].val;
            const Tensor<T>& vk2 = t.nodes_[ki].val;
            for (std::int64_t r = 0; r < R; ++r) {
                if (t.nodes_[ai].needs_grad)
                    for (std::int64_t c = 0; c < C; ++c)
                        t.nodes_[ai].grad.at(r, c) += n.grad.at(r, c) * vk2.at(r, 0);
                if (t.nodes_[ki].needs_grad) {
                    T s = T(0);
                    for (std::int64_t c = 0; c < C; ++c) s += n.grad.at(r, c) * va2.at(r, c);
                    t.nodes_[ki].grad.at(r, 0) += s;
                }
            }
        });
    }

    // ---- reductions ----------------------------------------------------

    Var<T> sum_all(Var<T> a) {
        const Tensor<T>& va = val(a);
        double s = 0;
        for (T v : va.data) s += static_cast<double>(v);
        return push(Tensor<T>::scalar(static_cast<T>(s)), wants(a),
                    [ai = a.idx](Tape& t, const Node& n) {
                        Tensor<T>& g = t.nodes_[ai].grad;
                        const T dy = n.grad.data[0];
                        for (auto& v : g.data) v += dy;
                    });
    }

    Var<T> mean_all(Var<T> a) {
        return scale(sum_all(a), static_cast<T>(1.0 / static_cast<double>(val(a).numel())));
    }

    // per-row cosine similarity with an epsilon floor on the norm product
    Var<T> rowwise_cosine(Var<T> a, Var<T> b, T eps) {
        require_same_shape(a, b, "rowwise_cosine");
        const Tensor<T>& va = val(a);
        const Tensor<T>& vb = val(b);
        const std::int64_t R = va.rows(), C = va.cols();
        Tensor<T> out(R, 1);
        for (std::int64_t r = 0; r < R; ++r) {
            double dot = 0, na = 0, nb = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                const double x = va.at(r, c), y = vb.at(r, c);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            const double denom = std::max(std::sqrt(na) * std::sqrt(nb),
                                          static_cast<double>(eps));
            out.at(r, 0) = static_cast<T>(dot / denom);
        }
        return push(std::move(out), wants(a, b),
                    [ai = a.idx, bi = b.idx, eps, R, C](Tape& t, const Node& n) {
                        const Tensor<T>& va2 = t.nodes_[ai].val;
                        const Tensor<T>& vb2 = t.nodes_[bi].val;
                        for (std::int64_t r = 0; r < R; ++r) {
                            double dot = 0, na2 = 0, nb2 = 0;
                            for (std::int64_t c = 0; c < C; ++c) {
                                const double x = va2.at(r, c), y = vb2.at(r, c);
                                dot += x * y;
                                na2 += x * x;
                                nb2 += y * y;
                            }
                            const double na = std::sqrt(na2), nb = std::sqrt(nb2);
                            const double prod = na * nb;
                            const double dy = static_cast<double>(n.grad.at(r, 0));
                            if (prod > static_cast<double>(eps)) {
                                const double cosv = dot / prod;
                                for (std::int64_t c = 0; c < C; ++c) {
                                    const double x = va2.at(r, c), y = vb2.at(r, c);
                                    if (t.nodes_[ai].needs_grad)
                                        t.nodes_[ai].grad.at(r, c) += static_cast<T>(
                                            dy * (y / prod - cosv * x / na2));
                                    if (t.nodes_[bi].needs_grad)
                                        t.nodes_[bi].grad.at(r, c) += static_cast<T>(
                                            dy * (x / prod - cosv * y / nb2));
                                }
                            } else {
                                // denominator pinned at eps: d(dot/eps)
                                for (std::int64_t c = 0; c < C; ++c) {
                                    if (t.nodes_[ai].needs_grad)
                                        t.nodes_[ai].grad.at(r, c) += static_cast<T>(
                                            dy * vb2.at(r, c) / static_cast<double>(eps));
                                    if (t.nodes_[bi].needs_grad)
                                        t.nodes_[bi].grad.at(r, c) += static_cast<T>(
                                            dy * va2.at(r, c) / static_cast<double>(eps));
                                }
                            }
                        }
                    });
    }

    // Fused permutation-invariant hypernetwork embedding. For each input row
    // (one entity), a weight matrix W = reshape(relu(x W1 + b1) W2 + b2) maps
    // the row to embed_dim; rows are summed per consecutive group. The large
    // generated-weight tensor is never materialized across the whole batch:
    // forward keeps only the hidden activations and backward recomputes the
    // generated weights chunk by chunk.
    Var<T> hyper_embed_sum(const Tensor<T>& x, Var<T> w1, Var<T> b1, Var<T> w2, Var<T> b2,
                           std::int64_t group, std::int64_t embed_dim) {
        const std::int64_t M = x.rows(), F = x.cols();
        const std::int64_t H = val(w1).cols();
        require<ShapeError>(val(w1).rows() == F, "hyper_embed_sum: w1 ", val(w1).shape_str(),
                            " vs input cols ", F);
        require<ShapeError>(val(w2).rows() == H && val(w2).cols() == F * embed_dim,
                            "hyper_embed_sum: w2 ", val(w2).shape_str(), " want [", H, "x",
                            F * embed_dim, "]");
        require<ShapeError>(M % group == 0, "hyper_embed_sum: rows not divisible by group");

        // hidden = relu(x W1 + b1), kept for backward
        auto hidden = std::make_shared<Tensor<T>>(M, H);
        mat(*hidden).noalias() = cmat(x) * cmat(val(w1));
        for (std::int64_t r = 0; r < M; ++r)
            for (std::int64_t c = 0; c < H; ++c) {
                T v = hidden->at(r, c) + val(b1).data[static_cast<std::size_t>(c)];
                hidden->at(r, c) = v > T(0) ? v : T(0);
            }

        const std::int64_t GW = F * embed_dim;
        const std::int64_t chunk = std::max<std::int64_t>(1, (1 << 21) / std::max<std::int64_t>(GW, 1));
        Tensor<T> out(M / group, embed_dim);
        Tensor<T> gen(std::min(chunk, M), GW);
        for (std::int64_t r0 = 0; r0 < M; r0 += chunk) {
            const std::int64_t rn = std::min(chunk, M - r0);
            mat(gen).topRows(rn).noalias() = cmat(*hidden).middleRows(r0, rn) * cmat(val(w2));
            for (std::int64_t i = 0; i < rn; ++i) {
                const std::int64_t m = r0 + i;
                Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> yr(
                    out.data.data() + (m / group) * embed_dim, embed_dim);
                CMapM W(gen.data.data() + i * GW, F, embed_dim);
                Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> xr(x.data.data() + m * F, F);
                CMapM B2(val(b2).data.data(), F, embed_dim);
                yr.noalias() += xr * W + xr * B2;
            }
        }

        auto xc = std::make_shared<Tensor<T>>(x);
        return push(std::move(out), wants(w1, b1, w2, b2),
                    [w1i = w1.idx, b1i = b1.idx, w2i = w2.idx, b2i = b2.idx, hidden, xc, group,
                     embed_dim, F, H, M, GW, chunk](Tape& t, const Node& n) {
                        // The op is bilinear in (generated weights, const input), so the
                        // generated weights' values are not needed here: dG_m = x_m^T dy_m.
                        Tensor<T> dgen(std::min(chunk, M), GW);
                        Tensor<T> dhid(std::min(chunk, M), H);
                        for (std::int64_t r0 = 0; r0 < M; r0 += chunk) {
                            const std::int64_t rn = std::min(chunk, M - r0);
                            for (std::int64_t i = 0; i < rn; ++i) {
                                const std::int64_t m = r0 + i;
                                Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> dy(
                                    n.grad.data.data() + (m / group) * embed_dim, embed_dim);
                                Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> xr(
                                    xc->data.data() + m * F, F);
                                MapM dW(dgen.data.data() + i * GW, F, embed_dim);
                                dW.noalias() = xr.transpose() * dy;
                            }
                            // b2 gradient: column sums of dgen (b2 also right-multiplied by x)
                            if (t.nodes_[b2i].needs_grad) {
                                Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db2(
                                    t.nodes_[b2i].grad.data.data(), GW);
                                db2.noalias() += Eigen::Matrix<T, 1, Eigen::Dynamic>::Ones(rn) *
                                                 cmat(dgen).topRows(rn);
                            }
                            if (t.nodes_[w2i].needs_grad)
                                t.mat(t.nodes_[w2i].grad).noalias() +=
                                    cmat(*hidden).middleRows(r0, rn).transpose() *
                                    cmat(dgen).topRows(rn);
                            // back through relu into W1, b1
                            mat(dhid).topRows(rn).noalias() =
                                cmat(dgen).topRows(rn) * cmat(t.nodes_[w2i].val).transpose();
                            for (std::int64_t i = 0; i < rn; ++i)
                                for (std::int64_t c = 0; c < H; ++c)
                                    if (hidden->at(r0 + i, c) <= T(0)) dhid.at(i, c) = T(0);
                            if (t.nodes_[w1i].needs_grad)
                                t.mat(t.nodes_[w1i].grad).noalias() +=
                                    cmat(*xc).middleRows(r0, rn).transpose() * cmat(dhid).topRows(rn);
                            if (t.nodes_[b1i].needs_grad) {
                                Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db1(
                                    t.nodes_[b1i].grad.data.data(), H);
                                db1.noalias() += Eigen::Matrix<T, 1, Eigen::Dynamic>::Ones(rn) *
                                                 cmat(dhid).topRows(rn);
                            }
                        }
                    });
    }

    // ---- backward ------------------------------------------------------

    void backward(Var<T> loss) {
        require(recording_, "backward: tape was created in no-grad mode");
        const Node& ln = nodes_[static_cast<std::size_t>(loss.idx)];
        require(ln.val.numel() == 1, "backward: loss must be scalar, got ", ln.val.shape_str());
        for (auto& n : nodes_) {
            if (n.needs_grad) {
                if (n.grad.data.empty()) n.grad = Tensor<T>(n.val.shape);
                else n.grad.zero();
            }
        }
        require(ln.needs_grad, "backward: loss does not depend on any differentiable input");
        nodes_[static_cast<std::size_t>(loss.idx)].grad.data[0] = T(1);
        for (std::int64_t i = loss.idx; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.needs_grad && n.back) n.back(*this, n);
        }
        for (auto& [idx, sink] : param_sinks_) {
            const Tensor<T>& g = nodes_[static_cast<std::size_t>(idx)].grad;
            if (g.data.empty()) continue;
            for (std::size_t k = 0; k < sink->data.size(); ++k) sink->data[k] += g.data[k];
        }
    }

  private:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;
        std::function<void(Tape&, const Node&)> back;
        bool needs_grad = false;
    };

    friend struct Var<T>;

    static MapM mat(Tensor<T>& t) { return MapM(t.data.data(), t.rows(), t.cols()); }
    static CMapM cmat(const Tensor<T>& t) { return CMapM(t.data.data(), t.rows(), t.cols()); }

    bool wants(Var<T> a) const { return recording_ && node(a).needs_grad; }
    bool wants(Var<T> a, Var<T> b) const { return recording_ && (node(a).needs_grad || node(b).needs_grad); }
    bool wants(Var<T> a, Var<T> b, Var<T> c, Var<T> d) const {
        return recording_ && (node(a).needs_grad || node(b).needs_grad || node(c).needs_grad ||
                              node(d).needs_grad);
    }

    const Node& node(Var<T> v) const { return nodes_[static_cast<std::size_t>(v.idx)]; }

    void accum(std::int32_t i, const Tensor<T>& g) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.needs_grad) return;
        for (std::size_t k = 0; k < g.data.size(); ++k) n.grad.data[k] += g.data[k];
    }
    void accum_scaled(std::int32_t i, const Tensor<T>& g, T s) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.needs_grad) return;
        for (std::size_t k = 0; k < g.data.size(); ++k) n.grad.data[k] += g.data[k] * s;
    }
    void accum_mul(std::int32_t i, const Tensor<T>& g, const Tensor<T>& other) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.needs_grad) return;
        for (std::size_t k = 0; k < g.data.size(); ++k) n.grad.data[k] += g.data[k] * other.data[k];
    }

    template <class Fn>
    Var<T> push(Tensor<T> val, bool needs_grad, Fn&& fn) {
        Node n;
        n.val = std::move(val);
        n.needs_grad = needs_grad;
        if (needs_grad) {
            n.grad = Tensor<T>(n.val.shape);
            n.back = std::forward<Fn>(fn);
        }
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    Var<T> push_leaf(Tensor<T> val, bool needs_grad) {
        Node n;
        n.val = std::move(val);
        n.needs_grad = needs_grad;
        if (needs_grad) n.grad = Tensor<T>(n.val.shape);
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    void require_same_shape(Var<T> a, Var<T> b, const char* op) const {
        require<ShapeError>(val(a).same_shape(val(b)), op, ": shape mismatch ",
                            val(a).shape_str(), " vs ", val(b).shape_str());
    }

    bool recording_;
    std::vector<Node> nodes_;
    std::vector<std::pair<std::int32_t, Tensor<T>*>> param_sinks_;
    std::map<std::pair<const void*, std::string>, std::int32_t> bound_;
};

template <class T>
const Tensor<T>& Var<T>::val() const {
    return tape->val(*this);
}

}  // namespace qtm

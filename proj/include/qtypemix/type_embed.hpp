#pragma once

#include <vector>

#include "qtypemix/nn.hpp"
#include "qtypemix/partition.hpp"

namespace qtm {

struct TypeEmbedConfig {
    int embed_dim = 32;    // d_e; cosine similarity degenerates at width 1
    int hidden_dim = 64;   // GRU width over observations
    int hyper_hidden = 64; // hidden width of the state-conditioned generator

    // combined objective (TD gradients flow through the extractor) vs fully
    // independent updates (embeddings detached inside mixer keys).
    enum class UpdateMode { kCombined, kSeparate };
    UpdateMode update_mode = UpdateMode::kCombined;

    // Batch reduction for the TE loss: mean decouples the loss weight from
    // the batch size; sum is the literal formula.
    enum class Reduction { kMean, kSum };
    Reduction reduction = Reduction::kMean;

    void validate() const {
        require<ConfigError>(embed_dim >= 2, "TypeEmbedConfig.embed_dim: must be >= 2");
        require<ConfigError>(hidden_dim >= 1, "TypeEmbedConfig.hidden_dim: must be >= 1");
    }
};

// Recurrent per-agent type-embedding extractor. Observations feed a GRU; the
// output linear layer's weights and bias are generated from the global state
// by a hypernetwork, so the embedding is a function of (history, state).
template <class T>
struct TypeEmbedExtractor {
    TypeEmbedConfig cfg;
    int obs_dim = 0;
    int state_dim = 0;

    static TypeEmbedExtractor init(ParamSet<T>& ps, const TypeEmbedConfig& cfg, int obs_dim,
                                   int state_dim, RngStream& rng) {
        cfg.validate();
        TypeEmbedExtractor e{cfg, obs_dim, state_dim};
        GruCell<T>::init(ps, "te.gru", obs_dim, cfg.hidden_dim, rng);
        Mlp2<T>::init(ps, "te.gen", state_dim, cfg.hyper_hidden,
                      cfg.hidden_dim * cfg.embed_dim + cfg.embed_dim, rng);
        return e;
    }

    Tensor<T> initial_hidden(std::int64_t rows) const { return Tensor<T>(rows, cfg.hidden_dim); }

    struct Out {
        Var<T> embedding;  // [R x embed_dim]
        Var<T> hidden;     // [R x hidden_dim]
    };

    // obs: [R x obs_dim] with R = S * agents_per_sample; state: [S x state_dim].
    Out forward(Tape<T>& tp, ParamSet<T>& ps, const Tensor<T>& obs, Var<T> hidden,
                const Tensor<T>& state, std::int64_t agents_per_sample) const {
        return forward_from(tp, ps, tp.constant(obs), hidden,
                            Mlp2<T>::bind(ps, "te.gen").apply(tp, ps, tp.constant(state)),
                            agents_per_sample);
    }

    // Variant that reuses an already-computed generator output (one big
    // matmul for a whole batch of timesteps).
    Out forward_from(Tape<T>& tp, ParamSet<T>& ps, Var<T> obs, Var<T> hidden, Var<T> gen,
                     std::int64_t agents_per_sample) const {
        const int Hd = cfg.hidden_dim, E = cfg.embed_dim;
        Out o;
        o.hidden = GruCell<T>::bind(ps, "te.gru").step(tp, ps, obs, hidden);
        Var<T> w = tp.slice_cols(gen, 0, Hd * E);
        Var<T> b = tp.slice_cols(gen, static_cast<std::int64_t>(Hd) * E, E);
        Var<T> e = tp.rowwise_matvec(w, o.hidden, Hd, E, agents_per_sample);
        // generated bias is per sample; expand across that sample's agents
        o.embedding = tp.add(e, tp.repeat_rows(b, agents_per_sample));
        return o;
    }

    Var<T> generator(Tape<T>& tp, ParamSet<T>& ps, Var<T> state) const {
        return Mlp2<T>::bind(ps, "te.gen").apply(tp, ps, state);
    }
};

// Type-contrast loss: sum over ordered agent pairs (including i = j) of
// I(i,j) * cos(E_i, E_j), summed (or averaged) over batch elements.
// embeddings: [B*n x d_e], one partition per batch element.
template <class T>
Var<T> te_loss(Tape<T>& tp, Var<T> embeddings, const std::vector<TypePartition>& partitions,
               TypeEmbedConfig::Reduction reduction, T eps = static_cast<T>(1e-8)) {
    const std::int64_t B = static_cast<std::int64_t>(partitions.size());
    require<ShapeError>(B >= 1, "te_loss: need at least one batch element");
    const std::int64_t n = partitions.front().n;
    require<ShapeError>(embeddings.rows() == B * n, "te_loss: embeddings rows ",
                        embeddings.rows(), " != batch ", B, " * agents ", n);
    std::vector<std::int64_t> idx_a, idx_b;
    Tensor<T> signs(B * n * n, 1);
    std::int64_t p = 0;
    for (std::int64_t b = 0; b < B; ++b) {
        require<ShapeError>(partitions[static_cast<std::size_t>(b)].n == n,
                            "te_loss: partitions disagree on agent count");
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < n; ++j) {
                idx_a.push_back(b * n + i);
                idx_b.push_back(b * n + j);
                signs.data[static_cast<std::size_t>(p++)] = static_cast<T>(
                    indicator(static_cast<int>(i), static_cast<int>(j),
                              partitions[static_cast<std::size_t>(b)]));
            }
    }
    Var<T> ea = tp.select_rows(embeddings, std::move(idx_a));
    Var<T> eb = tp.select_rows(embeddings, std::move(idx_b));
    Var<T> cos = tp.rowwise_cosine(ea, eb, eps);
    Var<T> loss = tp.sum_all(tp.mul(cos, tp.constant(signs)));
    if (reduction == TypeEmbedConfig::Reduction::kMean)
        loss = tp.scale(loss, static_cast<T>(1.0 / static_cast<double>(B)));
    return loss;
}

}  // namespace qtm

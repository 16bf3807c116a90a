#pragma once

#include <cstdint>
#include <deque>
#include <vector>

#include "qtypemix/partition.hpp"
#include "qtypemix/rng.hpp"
#include "qtypemix/tensor.hpp"

namespace qtm {

// One complete episode. Recurrent agents need whole histories, so the buffer
// stores episodes rather than transitions; the step after the terminal one is
// never stored (targets bootstrap to zero at terminals).
template <class T>
struct EpisodeRecord {
    int n_agents = 0;
    int n_actions = 0;
    int obs_dim = 0;
    int state_dim = 0;
    int length = 0;  // real steps; exactly one terminal step at the end
    bool won = false;
    std::vector<int> agent_types;  // this episode's partition source

    // flat per-step storage
    std::vector<T> states;                 // length x state_dim
    std::vector<T> obs;                    // length x n_agents x obs_dim
    std::vector<std::uint8_t> avail;       // length x n_agents x n_actions
    std::vector<std::int64_t> actions;     // length x n_agents
    std::vector<T> rewards;                // length
    std::vector<std::uint8_t> terminated;  // length; 1 only on the last step

    double total_reward() const {
        double s = 0;
        for (T r : rewards) s += static_cast<double>(r);
        return s;
    }
};

// Ring buffer of episodes with FIFO eviction and uniform sampling without
// replacement within a batch.
template <class T>
class ReplayBuffer {
  public:
    explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
        require<ConfigError>(capacity >= 1, "ReplayBuffer: capacity must be >= 1");
    }

    void add(EpisodeRecord<T> ep) {
        if (episodes_.size() == capacity_) episodes_.pop_front();
        episodes_.push_back(std::move(ep));
    }

    std::size_t size() const { return episodes_.size(); }
    std::size_t capacity() const { return capacity_; }
    const EpisodeRecord<T>& at(std::size_t i) const { return episodes_[i]; }

    std::vector<const EpisodeRecord<T>*> sample(std::size_t batch, RngStream& rng) const {
        require(batch >= 1 && batch <= episodes_.size(), "ReplayBuffer::sample: batch ", batch,
                " from ", episodes_.size(), " episodes");
        // partial Fisher-Yates over the index range
        std::vector<std::size_t> idx(episodes_.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::vector<const EpisodeRecord<T>*> out;
        out.reserve(batch);
        for (std::size_t k = 0; k < batch; ++k) {
            std::size_t j = k + static_cast<std::size_t>(rng.below(idx.size() - k));
            std::swap(idx[k], idx[j]);
            out.push_back(&episodes_[idx[k]]);
        }
        return out;
    }

  private:
    std::size_t capacity_;
    std::deque<EpisodeRecord<T>> episodes_;
};

// Time-major padded batch tensors. Sample s = t*B + b; padding steps carry
// zero observations, no-op-only availability, action 0 and zero loss mask.
template <class T>
struct EpisodeBatch {
    int B = 0, L = 0, n = 0, n_actions = 0, obs_dim = 0, state_dim = 0;

    Tensor<T> obs_all;    // [L*B*n x obs_dim]
    Tensor<T> state_all;  // [L*B x state_dim]
    std::vector<std::vector<std::int64_t>> actions_t;       // per t: B*n entries
    std::vector<std::vector<std::uint8_t>> avail_t;         // per t: B*n*n_actions
    Tensor<T> reward;      // [L x B]
    Tensor<T> term;        // [L x B], 1 at terminal steps
    Tensor<T> mask;        // [L x B], 1 for real steps
    std::vector<TypePartition> episode_parts;               // per episode
    std::vector<TypePartition> sample_parts;                // per sample, time-major
    std::vector<std::int64_t> final_step_rows;              // B*n rows into [L*B*n]

    static EpisodeBatch build(const std::vector<const EpisodeRecord<T>*>& eps, int n_types) {
        require(!eps.empty(), "EpisodeBatch: empty episode list");
        EpisodeBatch out;
        out.B = static_cast<int>(eps.size());
        out.n = eps.front()->n_agents;
        out.n_actions = eps.front()->n_actions;
        out.obs_dim = eps.front()->obs_dim;
        out.state_dim = eps.front()->state_dim;
        for (const auto* e : eps) {
            require<ShapeError>(e->n_agents == out.n && e->n_actions == out.n_actions &&
                                    e->obs_dim == out.obs_dim && e->state_dim == out.state_dim,
                                "EpisodeBatch: episodes have mismatched shapes");
            out.L = std::max(out.L, e->length);
        }
        const int B = out.B, L = out.L, n = out.n;
        out.obs_all = Tensor<T>(static_cast<std::int64_t>(L) * B * n, out.obs_dim);
        out.state_all = Tensor<T>(static_cast<std::int64_t>(L) * B, out.state_dim);
        out.reward = Tensor<T>(L, B);
        out.term = Tensor<T>(L, B);
        out.mask = Tensor<T>(L, B);
        out.actions_t.assign(static_cast<std::size_t>(L), {});
        out.avail_t.assign(static_cast<std::size_t>(L), {});
        for (int t = 0; t < L; ++t) {
            out.actions_t[static_cast<std::size_t>(t)].assign(static_cast<std::size_t>(B) * n, 0);
            out.avail_t[static_cast<std::size_t>(t)]
                .assign(static_cast<std::size_t>(B) * n * out.n_actions, 0);
            // padding default: only no-op available
            for (int b = 0; b < B; ++b)
                for (int i = 0; i < n; ++i)
                    out.avail_t[static_cast<std::size_t>(t)]
                               [(static_cast<std::size_t>(b) * n + static_cast<std::size_t>(i)) *
                                    out.n_actions] = 1;
        }
        for (int b = 0; b < B; ++b) {
            const auto& e = *eps[static_cast<std::size_t>(b)];
            out.episode_parts.push_back(TypePartition::from_types(e.agent_types, n_types, true));
            for (int t = 0; t < e.length; ++t) {
                const std::int64_t s = static_cast<std::int64_t>(t) * B + b;
                std::copy(e.states.begin() + static_cast<std::ptrdiff_t>(t) * out.state_dim,
                          e.states.begin() + static_cast<std::ptrdiff_t>(t + 1) * out.state_dim,
                          out.state_all.data.begin() + s * out.state_dim);
                std::copy(
                    e.obs.begin() + static_cast<std::ptrdiff_t>(t) * n * out.obs_dim,
                    e.obs.begin() + static_cast<std::ptrdiff_t>(t + 1) * n * out.obs_dim,
                    out.obs_all.data.begin() + s * n * out.obs_dim);
                for (int i = 0; i < n; ++i) {
                    out.actions_t[static_cast<std::size_t>(t)]
                                 [static_cast<std::size_t>(b) * n + static_cast<std::size_t>(i)] =
                        e.actions[static_cast<std::size_t>(t) * n + static_cast<std::size_t>(i)];
                    std::copy(e.avail.begin() + (static_cast<std::ptrdiff_t>(t) * n + i) *
                                                    out.n_actions,
                              e.avail.begin() + (static_cast<std::ptrdiff_t>(t) * n + i + 1) *
                                                    out.n_actions,
                              out.avail_t[static_cast<std::size_t>(t)].begin() +
                                  (static_cast<std::ptrdiff_t>(b) * n + i) * out.n_actions);
                }
                out.reward.at(t, b) = e.rewards[static_cast<std::size_t>(t)];
                out.term.at(t, b) = e.terminated[static_cast<std::size_t>(t)] ? T(1) : T(0);
                out.mask.at(t, b) = T(1);
            }
        }
        // per-sample partitions (time-major) and final-step embedding rows
        for (int t = 0; t < L; ++t)
            for (int b = 0; b < B; ++b)
                out.sample_parts.push_back(out.episode_parts[static_cast<std::size_t>(b)]);
        for (int b = 0; b < B; ++b) {
            const int tf = eps[static_cast<std::size_t>(b)]->length - 1;
            const std::int64_t s = static_cast<std::int64_t>(tf) * B + b;
            for (int i = 0; i < n; ++i) out.final_step_rows.push_back(s * n + i);
        }
        return out;
    }

    std::int64_t valid_steps() const {
        std::int64_t c = 0;
        for (T v : mask.data) c += v > T(0) ? 1 : 0;
        return c;
    }
};

}  // namespace qtm

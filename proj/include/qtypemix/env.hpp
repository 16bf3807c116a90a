#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "qtypemix/common.hpp"
#include "qtypemix/rng.hpp"

namespace qtm {

// Deterministic, seedable heterogeneous grid-combat Dec-POMDP with
// SMAC-shaped discrete actions and scripted enemies.
//
// Action ids: 0 no-op, 1 stop, 2..5 move N/S/E/W, 6+j attack enemy j.
// All ranges and distances are Chebyshev; the field of view is
// omnidirectional (a full Chebyshev ball, not a cone).

struct UnitTypeStats {
    double max_health = 1;
    double attack_damage = 1;
    int attack_range = 1;
    int move_step = 1;
    int sight_range = 1;
};

struct RewardWeights {
    double damage_scale = 1.0;
    double kill_bonus = 10.0;
    double win_bonus = 200.0;
};

struct ScenarioConfig {
    std::string name = "custom";
    int grid_width = 0;
    int grid_height = 0;
    // (unit_type_id, count) in placement order; ignored when random_rosters
    std::vector<std::pair<int, int>> ally_roster;
    std::vector<std::pair<int, int>> enemy_roster;
    std::vector<UnitTypeStats> unit_stats;  // index = unit_type_id
    int max_steps = 1;
    RewardWeights reward_weights;
    std::uint64_t seed = 0;

    // Per-reset roster draws: each of the n_random_* slots draws its type
    // from roster_type_probs.
    bool random_rosters = false;
    std::vector<double> roster_type_probs;
    int n_random_allies = 0;
    int n_random_enemies = 0;

    bool include_last_action = false;  // append own last-action one-hot

    // Difficulty knob: scripted enemies deal this fraction of their type's
    // attack damage (the analogue of a built-in AI difficulty setting).
    double enemy_damage_scale = 1.0;

    int n_types() const { return static_cast<int>(unit_stats.size()); }
    int n_allies() const {
        if (random_rosters) return n_random_allies;
        int n = 0;
        for (auto& [t, c] : ally_roster) n += c;
        return n;
    }
    int n_enemies() const {
        if (random_rosters) return n_random_enemies;
        int n = 0;
        for (auto& [t, c] : enemy_roster) n += c;
        return n;
    }

    void validate() const {
        require<ConfigError>(grid_width >= 1, "ScenarioConfig.grid_width: must be >= 1");
        require<ConfigError>(grid_height >= 1, "ScenarioConfig.grid_height: must be >= 1");
        require<ConfigError>(max_steps >= 1, "ScenarioConfig.max_steps: must be >= 1");
        require<ConfigError>(!unit_stats.empty(), "ScenarioConfig.unit_stats: must be nonempty");
        require<ConfigError>(enemy_damage_scale >= 0,
                             "ScenarioConfig.enemy_damage_scale: must be >= 0");
        for (std::size_t i = 0; i < unit_stats.size(); ++i) {
            const auto& s = unit_stats[i];
            require<ConfigError>(s.max_health > 0, "ScenarioConfig.unit_stats[", i,
                                 "].max_health: must be positive");
            require<ConfigError>(s.attack_damage >= 0, "ScenarioConfig.unit_stats[", i,
                                 "].attack_damage: must be nonnegative");
            require<ConfigError>(s.move_step >= 1, "ScenarioConfig.unit_stats[", i,
                                 "].move_step: must be >= 1");
            require<ConfigError>(s.sight_range >= 1, "ScenarioConfig.unit_stats[", i,
                                 "].sight_range: must be >= 1");
            require<ConfigError>(s.attack_range >= 1 && s.attack_range <= s.sight_range,
                                 "ScenarioConfig.unit_stats[", i,
                                 "].attack_range: must be in [1, sight_range]");
        }
        auto check_roster = [&](const char* field, const std::vector<std::pair<int, int>>& r) {
            require<ConfigError>(!r.empty(), "ScenarioConfig.", field, ": must be nonempty");
            for (auto& [t, c] : r) {
                require<ConfigError>(t >= 0 && t < n_types(), "ScenarioConfig.", field,
                                     ": unit_type_id ", t, " out of range");
                require<ConfigError>(c >= 1, "ScenarioConfig.", field, ": count must be >= 1");
            }
        };
        if (random_rosters) {
            require<ConfigError>(n_random_allies >= 1,
                                 "ScenarioConfig.n_random_allies: must be >= 1");
            require<ConfigError>(n_random_enemies >= 1,
                                 "ScenarioConfig.n_random_enemies: must be >= 1");
            require<ConfigError>(roster_type_probs.size() == unit_stats.size(),
                                 "ScenarioConfig.roster_type_probs: needs one entry per type");
            double s = 0;
            for (double p : roster_type_probs) {
                require<ConfigError>(p >= 0, "ScenarioConfig.roster_type_probs: negative entry");
                s += p;
            }
            require<ConfigError>(std::abs(s - 1.0) < 1e-9,
                                 "ScenarioConfig.roster_type_probs: must sum to 1");
        } else {
            check_roster("ally_roster", ally_roster);
            check_roster("enemy_roster", enemy_roster);
        }
        // placement halves must be large enough for distinct cells
        const int half = grid_width / 2;
        require<ConfigError>(half >= 1, "ScenarioConfig.grid_width: too narrow for two halves");
        require<ConfigError>(n_allies() <= half * grid_height,
                             "ScenarioConfig.ally_roster: does not fit the left half");
        require<ConfigError>(n_enemies() <= half * grid_height,
                             "ScenarioConfig.enemy_roster: does not fit the right half");
    }
};

struct UnitState {
    int x = 0, y = 0;
    double health = 0;
    int unit_type_id = 0;
    bool alive = false;
};

struct WorldState {
    std::vector<UnitState> allies;   // index = agent id; dead units stay as entries
    std::vector<UnitState> enemies;
    int t = 0;
    std::vector<int> last_actions;   // used only when include_last_action
};

// Per-agent partial view. Entity blocks are fixed width; hidden living
// entities are all-zero, dead entities are zero except the type one-hot.
struct Observation {
    std::vector<double> own_features;
    std::vector<std::vector<double>> ally_entities;
    std::vector<std::vector<double>> enemy_entities;

    std::vector<double> flat() const {
        std::vector<double> out = own_features;
        for (const auto& e : ally_entities) out.insert(out.end(), e.begin(), e.end());
        for (const auto& e : enemy_entities) out.insert(out.end(), e.begin(), e.end());
        return out;
    }
};

struct ObsLayout {
    int own_dim = 0;
    int ally_feat = 0;
    int n_ally_slots = 0;
    int enemy_feat = 0;
    int n_enemy_slots = 0;

    int flat_dim() const { return own_dim + ally_feat * n_ally_slots + enemy_feat * n_enemy_slots; }
    int ally_offset() const { return own_dim; }
    int enemy_offset() const { return own_dim + ally_feat * n_ally_slots; }
};

using JointAction = std::vector<int>;

class GridSkirmishEnv {
  public:
    explicit GridSkirmishEnv(ScenarioConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    const ScenarioConfig& config() const { return cfg_; }
    int n_agents() const { return cfg_.n_allies(); }
    int n_enemies() const { return cfg_.n_enemies(); }
    int n_actions() const { return 6 + cfg_.n_enemies(); }

    ObsLayout obs_layout() const {
        const int T = cfg_.n_types();
        ObsLayout l;
        l.own_dim = 3 + T + (cfg_.include_last_action ? n_actions() : 0);
        l.ally_feat = 5 + T;
        l.n_ally_slots = n_agents() - 1;
        l.enemy_feat = 6 + T;
        l.n_enemy_slots = n_enemies();
        return l;
    }
    int state_dim() const { return (4 + cfg_.n_types()) * (n_agents() + n_enemies()); }

    std::vector<Observation> reset(std::uint64_t seed) {
        rng_ = RngStream(seed).derive(0x6772696453u);  // env-local stream
        state_ = WorldState{};
        state_.t = 0;
        state_.last_actions.assign(static_cast<std::size_t>(n_agents()), 0);
        done_ = false;

        auto expand = [&](const std::vector<std::pair<int, int>>& roster, int n_random) {
            std::vector<int> types;
            if (cfg_.random_rosters) {
                for (int i = 0; i < n_random; ++i) types.push_back(draw_type());
            } else {
                for (auto& [t, c] : roster)
                    for (int i = 0; i < c; ++i) types.push_back(t);
            }
            return types;
        };
        std::vector<int> ally_types = expand(cfg_.ally_roster, cfg_.n_random_allies);
        std::vector<int> enemy_types = expand(cfg_.enemy_roster, cfg_.n_random_enemies);

        const int half = cfg_.grid_width / 2;
        place_units(state_.allies, ally_types, 0, half);
        place_units(state_.enemies, enemy_types, cfg_.grid_width - half, half);

        double max_raw = cfg_.reward_weights.win_bonus;
        for (const auto& u : state_.enemies) {
            max_raw += cfg_.reward_weights.damage_scale * cfg_.unit_stats[u.unit_type_id].max_health;
            max_raw += cfg_.reward_weights.kill_bonus;
        }
        normalizer_ = max_raw > 0 ? 20.0 / max_raw : 0.0;

        std::vector<Observation> obs;
        obs.reserve(static_cast<std::size_t>(n_agents()));
        for (int i = 0; i < n_agents(); ++i) obs.push_back(observe(state_, i));
        return obs;
    }

    const WorldState& state() const { return state_; }
    bool done() const { return done_; }
    double reward_normalizer() const { return normalizer_; }

    std::vector<int> ally_types() const {
        std::vector<int> t;
        for (const auto& u : state_.allies) t.push_back(u.unit_type_id);
        return t;
    }

    Observation observe(const WorldState& s, int agent_id) const {
        require<ShapeError>(agent_id >= 0 && agent_id < static_cast<int>(s.allies.size()),
                            "observe: agent_id ", agent_id, " out of range");
        const ObsLayout lay = obs_layout();
        const UnitState& me = s.allies[static_cast<std::size_t>(agent_id)];
        const auto& my_stats = cfg_.unit_stats[me.unit_type_id];
        const int T = cfg_.n_types();

        Observation o;
        o.own_features.assign(static_cast<std::size_t>(lay.own_dim), 0.0);
        if (me.alive) {
            o.own_features[0] = me.health / my_stats.max_health;
            o.own_features[1] = norm_x(me.x);
            o.own_features[2] = norm_y(me.y);
        }
        o.own_features[static_cast<std::size_t>(3 + me.unit_type_id)] = 1.0;
        if (cfg_.include_last_action && me.alive) {
            int la = s.last_actions.empty() ? 0 : s.last_actions[static_cast<std::size_t>(agent_id)];
            o.own_features[static_cast<std::size_t>(3 + T + la)] = 1.0;
        }

        auto entity_block = [&](const UnitState& u, bool enemy) {
            const int width = enemy ? lay.enemy_feat : lay.ally_feat;
            std::vector<double> f(static_cast<std::size_t>(width), 0.0);
            if (!me.alive) return f;  // dead observers see nothing
            if (!u.alive) {
                // dead units keep their type one-hot; everything else zeroed
                f[static_cast<std::size_t>(5 + u.unit_type_id)] = 1.0;
                return f;
            }
            const int d = cheb(me, u);
            if (d > my_stats.sight_range)
                return std::vector<double>(static_cast<std::size_t>(width), 0.0);
            const double sr = my_stats.sight_range;
            f[0] = 1.0;  // visible
            f[1] = d / sr;
            f[2] = (u.x - me.x) / sr;
            f[3] = (u.y - me.y) / sr;
            f[4] = u.health / cfg_.unit_stats[u.unit_type_id].max_health;
            f[static_cast<std::size_t>(5 + u.unit_type_id)] = 1.0;
            if (enemy) f[static_cast<std::size_t>(5 + T)] = d <= my_stats.attack_range ? 1.0 : 0.0;
            return f;
        };

        for (int j = 0; j < static_cast<int>(s.allies.size()); ++j) {
            if (j == agent_id) continue;
            o.ally_entities.push_back(entity_block(s.allies[static_cast<std::size_t>(j)], false));
        }
        for (const auto& e : s.enemies) o.enemy_entities.push_back(entity_block(e, true));
        return o;
    }

    // mask over 6 + n_enemies actions
    std::vector<std::uint8_t> available_actions(const WorldState& s, int agent_id) const {
        require<ShapeError>(agent_id >= 0 && agent_id < static_cast<int>(s.allies.size()),
                            "available_actions: agent_id ", agent_id, " out of range");
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(n_actions()), 0);
        const UnitState& me = s.allies[static_cast<std::size_t>(agent_id)];
        if (!me.alive) {
            mask[0] = 1;  // no-op only
            return mask;
        }
        mask[1] = 1;  // stop
        for (int a = 2; a <= 5; ++a) {
            auto [dx, dy] = dir_of(a);
            if (in_bounds(me.x + dx, me.y + dy)) mask[static_cast<std::size_t>(a)] = 1;
        }
        const auto& st = cfg_.unit_stats[me.unit_type_id];
        for (int j = 0; j < static_cast<int>(s.enemies.size()); ++j) {
            const UnitState& e = s.enemies[static_cast<std::size_t>(j)];
            if (e.alive && cheb(me, e) <= st.attack_range) mask[static_cast<std::size_t>(6 + j)] = 1;
        }
        return mask;
    }

    struct StepResult {
        double reward = 0;
        bool terminated = false;
        bool won = false;
    };

    StepResult step(const JointAction& actions) {
        require(!done_, "step: episode already terminated; call reset first");
        require<ShapeError>(static_cast<int>(actions.size()) == n_agents(), "step: got ",
                            actions.size(), " actions for ", n_agents(), " agents");
        for (int i = 0; i < n_agents(); ++i) {
            auto mask = available_actions(state_, i);
            const int a = actions[static_cast<std::size_t>(i)];
            require(a >= 0 && a < n_actions() && mask[static_cast<std::size_t>(a)],
                    "step: action ", a, " unavailable for agent ", i,
                    " (training code must mask first)");
        }

        // phase 1: ally moves in agent-index order; blocked cells leave the
        // mover in place, so the lower index wins conflicts
        for (int i = 0; i < n_agents(); ++i) {
            const int a = actions[static_cast<std::size_t>(i)];
            if (a < 2 || a > 5) continue;
            UnitState& me = state_.allies[static_cast<std::size_t>(i)];
            auto [dx, dy] = dir_of(a);
            const int steps = cfg_.unit_stats[me.unit_type_id].move_step;
            move_greedy(me, dx, dy, steps);
        }

        // phase 2: scripted enemy decisions on the post-move state
        std::vector<int> enemy_attack(state_.enemies.size(), -1);
        for (int e = 0; e < static_cast<int>(state_.enemies.size()); ++e) {
            UnitState& en = state_.enemies[static_cast<std::size_t>(e)];
            if (!en.alive) continue;
            const auto& st = cfg_.unit_stats[en.unit_type_id];
            int best = -1, best_d = 1 << 30;
            for (int i = 0; i < n_agents(); ++i) {
                const UnitState& al = state_.allies[static_cast<std::size_t>(i)];
                if (!al.alive) continue;
                const int d = cheb(en, al);
                if (d <= st.attack_range && d < best_d) {
                    best = i;
                    best_d = d;
                }
            }
            if (best >= 0) {
                enemy_attack[static_cast<std::size_t>(e)] = best;
                continue;
            }
            // nothing attackable: close on the nearest visible ally
            best = -1;
            best_d = 1 << 30;
            for (int i = 0; i < n_agents(); ++i) {
                const UnitState& al = state_.allies[static_cast<std::size_t>(i)];
                if (!al.alive) continue;
                const int d = cheb(en, al);
                if (d <= st.sight_range && d < best_d) {
                    best = i;
                    best_d = d;
                }
            }
            if (best >= 0) {
                const UnitState& al = state_.allies[static_cast<std::size_t>(best)];
                step_toward(en, al.x - en.x, al.y - en.y);
            }
        }

        // phase 3: all attacks land simultaneously against pre-attack healths
        std::vector<double> dmg_enemy(state_.enemies.size(), 0.0);
        std::vector<double> dmg_ally(state_.allies.size(), 0.0);
        for (int i = 0; i < n_agents(); ++i) {
            const int a = actions[static_cast<std::size_t>(i)];
            if (a < 6) continue;
            const UnitState& me = state_.allies[static_cast<std::size_t>(i)];
            dmg_enemy[static_cast<std::size_t>(a - 6)] +=
                cfg_.unit_stats[me.unit_type_id].attack_damage;
        }
        for (int e = 0; e < static_cast<int>(state_.enemies.size()); ++e) {
            if (enemy_attack[static_cast<std::size_t>(e)] < 0) continue;
            const UnitState& en = state_.enemies[static_cast<std::size_t>(e)];
            dmg_ally[static_cast<std::size_t>(enemy_attack[static_cast<std::size_t>(e)])] +=
                cfg_.unit_stats[en.unit_type_id].attack_damage * cfg_.enemy_damage_scale;
        }

        double dealt = 0;
        int kills = 0;
        for (std::size_t j = 0; j < state_.enemies.size(); ++j) {
            UnitState& e = state_.enemies[j];
            if (!e.alive || dmg_enemy[j] <= 0) continue;
            const double eff = std::min(dmg_enemy[j], e.health);
            dealt += eff;
            e.health -= eff;
            if (e.health <= 0) {
                e.health = 0;
                e.alive = false;
                ++kills;
            }
        }
        for (std::size_t i = 0; i < state_.allies.size(); ++i) {
            UnitState& a = state_.allies[i];
            if (!a.alive || dmg_ally[i] <= 0) continue;
            a.health = std::max(0.0, a.health - dmg_ally[i]);
            if (a.health <= 0) a.alive = false;
        }

        state_.t += 1;
        state_.last_actions = actions;

        const bool enemies_dead = none_alive(state_.enemies);
        const bool allies_dead = none_alive(state_.allies);
        StepResult r;
        r.won = enemies_dead;
        r.terminated = enemies_dead || allies_dead || state_.t >= cfg_.max_steps;
        double raw = cfg_.reward_weights.damage_scale * dealt +
                     cfg_.reward_weights.kill_bonus * kills +
                     (enemies_dead ? cfg_.reward_weights.win_bonus : 0.0);
        r.reward = raw * normalizer_;
        done_ = r.terminated;
        return r;
    }

    std::vector<double> global_state(const WorldState& s) const {
        const int T = cfg_.n_types();
        std::vector<double> out;
        out.reserve(static_cast<std::size_t>(state_dim()));
        auto emit = [&](const UnitState& u) {
            if (u.alive) {
                out.push_back(u.health / cfg_.unit_stats[u.unit_type_id].max_health);
                out.push_back(norm_x(u.x));
                out.push_back(norm_y(u.y));
            } else {
                out.push_back(0);
                out.push_back(0);
                out.push_back(0);
            }
            for (int t = 0; t < T; ++t) out.push_back(t == u.unit_type_id ? 1.0 : 0.0);
            out.push_back(u.alive ? 1.0 : 0.0);
        };
        for (const auto& u : s.allies) emit(u);
        for (const auto& u : s.enemies) emit(u);
        return out;
    }

  private:
    static int cheb(const UnitState& a, const UnitState& b) {
        return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y));
    }
    static std::pair<int, int> dir_of(int action) {
        switch (action) {
            case 2: return {0, -1};  // N
            case 3: return {0, 1};   // S
            case 4: return {1, 0};   // E
            default: return {-1, 0}; // W
        }
    }
    bool in_bounds(int x, int y) const {
        return x >= 0 && x < cfg_.grid_width && y >= 0 && y < cfg_.grid_height;
    }
    bool occupied(int x, int y) const {
        for (const auto& u : state_.allies)
            if (u.alive && u.x == x && u.y == y) return true;
        for (const auto& u : state_.enemies)
            if (u.alive && u.x == x && u.y == y) return true;
        return false;
    }
    static bool none_alive(const std::vector<UnitState>& us) {
        for (const auto& u : us)
            if (u.alive) return false;
        return true;
    }
    double norm_x(int x) const { return cfg_.grid_width > 1 ? double(x) / (cfg_.grid_width - 1) : 0; }
    double norm_y(int y) const { return cfg_.grid_height > 1 ? double(y) / (cfg_.grid_height - 1) : 0; }

    int draw_type() {
        double u = rng_.uniform();
        double acc = 0;
        for (std::size_t t = 0; t < cfg_.roster_type_probs.size(); ++t) {
            acc += cfg_.roster_type_probs[t];
            if (u < acc) return static_cast<int>(t);
        }
        return cfg_.n_types() - 1;
    }

    void place_units(std::vector<UnitState>& units, const std::vector<int>& types, int x0,
                     int width) {
        for (int type : types) {
            UnitState u;
            u.unit_type_id = type;
            u.health = cfg_.unit_stats[type].max_health;
            u.alive = true;
            // rejection-sample a free cell in the half; the half is validated
            // to have enough room
            while (true) {
                u.x = x0 + static_cast<int>(rng_.below(static_cast<std::uint64_t>(width)));
                u.y = static_cast<int>(rng_.below(static_cast<std::uint64_t>(cfg_.grid_height)));
                bool taken = false;
                for (const auto& v : units)
                    if (v.x == u.x && v.y == u.y) taken = true;
                if (!taken) break;
            }
            units.push_back(u);
        }
    }

    // Walk up to `steps` cells in (dx,dy); stop early at the edge or at the
    // first occupied cell.
    void move_greedy(UnitState& me, int dx, int dy, int steps) {
        for (int s = 0; s < steps; ++s) {
            const int nx = me.x + dx, ny = me.y + dy;
            if (!in_bounds(nx, ny) || occupied(nx, ny)) break;
            me.x = nx;
            me.y = ny;
        }
    }

    // One scripted chase step: prefer the axis with the larger gap (x wins
    // ties), fall back to the other axis if the cell is blocked.
    void step_toward(UnitState& me, int dx, int dy) {
        const int sx = dx > 0 ? 1 : dx < 0 ? -1 : 0;
        const int sy = dy > 0 ? 1 : dy < 0 ? -1 : 0;
        std::pair<int, int> first{sx, 0}, second{0, sy};
        if (std::abs(dy) > std::abs(dx)) std::swap(first, second);
        for (auto [mx, my] : {first, second}) {
            if (mx == 0 && my == 0) continue;
            const int nx = me.x + mx, ny = me.y + my;
            if (in_bounds(nx, ny) && !occupied(nx, ny)) {
                me.x = nx;
                me.y = ny;
                return;
            }
        }
    }

    ScenarioConfig cfg_;
    WorldState state_;
    RngStream rng_{0};
    double normalizer_ = 0;
    bool done_ = true;  // must reset before stepping
};

// Bundled scenarios. "focus2v1" is sized so every ally can attack from any
// starting cell; "mixed6v6" mirrors per-slot type draws with probabilities
// 0.45/0.45/0.1 over three unit types.
inline ScenarioConfig make_scenario(const std::string& name) {
    ScenarioConfig c;
    c.name = name;
    if (name == "focus2v1") {
        c.grid_width = 5;
        c.grid_height = 3;
        c.unit_stats = {{4, 1, 4, 1, 5}};
        c.ally_roster = {{0, 2}};
        c.enemy_roster = {{0, 1}};
        c.max_steps = 20;
        return c;
    }
    if (name == "mixed4v4") {
        c.grid_width = 8;
        c.grid_height = 6;
        c.unit_stats = {{3, 1, 3, 1, 7}, {5, 2, 1, 1, 6}};
        c.ally_roster = {{0, 2}, {1, 2}};
        c.enemy_roster = {{0, 2}, {1, 2}};
        c.max_steps = 40;
        c.enemy_damage_scale = 0.6;
        return c;
    }
    if (name == "mixed6v6") {
        c.grid_width = 10;
        c.grid_height = 8;
        c.unit_stats = {{3, 1, 3, 1, 7}, {5, 2, 1, 1, 6}, {8, 3, 1, 1, 6}};
        c.random_rosters = true;
        c.roster_type_probs = {0.45, 0.45, 0.1};
        c.n_random_allies = 6;
        c.n_random_enemies = 6;
        c.max_steps = 50;
        c.enemy_damage_scale = 0.6;
        return c;
    }
    throw ConfigError(cat("unknown scenario '", name,
                          "' (bundled: focus2v1, mixed4v4, mixed6v6)"));
}

}  // namespace qtm

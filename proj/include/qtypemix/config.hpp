#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qtypemix/trainer.hpp"

namespace qtm {

using json = nlohmann::json;

// Experiment configuration: a JSON key tree with typed scalars. Canonical
// serialization is the sorted-key two-space dump, so config snapshots and
// override semantics are unambiguous. Unknown keys are errors with the full
// field path.
class ExperimentConfig {
  public:
    static json defaults() {
        return json{
            {"run_label", "run"},
            {"seed", 1},
            {"out_dir", "runs/out"},
            {"scenario", nullptr},  // required: bundled name or inline object
            {"agent",
             {{"rnn_hidden_dim", 64}, {"hpn_hyper_dim", 64}, {"hpn_head_num", 1}}},
            {"type_embed",
             {{"embed_dim", 32},
              {"hidden_dim", 64},
              {"hyper_hidden", 64},
              {"update_mode", "combined"},
              {"reduction", "mean"}}},
            {"mixer",
             {{"variant", "QTYPEMIX"},
              {"mode", "STRICT_MONOTONIC"},
              {"n_heads", 2},
              {"attn_key_dim", 4},
              {"attn_val_dim", 4},
              {"mixing_embed_dim", 32},
              {"hypernet_embed_dim", 64}}},
            {"train",
             {{"lr", 1e-3},
              {"gamma", 0.99},
              {"epsilon_start", 1.0},
              {"epsilon_finish", 0.05},
              {"epsilon_anneal_time", 100000},
              {"target_update_interval", 200},
              {"test_interval", 10000},
              {"test_nepisode", 32},
              {"max_step", 200000},
              {"batch_size", 32},
              {"buffer_size", 5000},
              {"td_lambda", 0.6},
              {"alpha_te", 0.1},
              {"n_parallel_envs", 8},
              {"grad_clip_norm", 10.0},
              {"double_q", false},
              {"checkpoint_interval", 0},
              {"te_loss_per_step", false},
              {"stop_at_win_rate", 0.0},
              {"adam_alpha", 0.99},
              {"adam_alpha_is", "beta2"},
              {"adam_eps", 1e-8}}},
        };
    }

    // which defaults restate published table values vs repository decisions
    static json provenance() {
        return json{
            {"paper",
             {"train.lr", "train.gamma", "train.buffer_size", "train.test_interval",
              "train.test_nepisode", "train.target_update_interval", "train.epsilon_start",
              "train.epsilon_finish", "train.epsilon_anneal_time", "train.adam_alpha",
              "train.td_lambda", "train.n_parallel_envs", "agent.rnn_hidden_dim",
              "agent.hpn_hyper_dim", "agent.hpn_head_num", "mixer.mixing_embed_dim",
              "mixer.hypernet_embed_dim"}},
            {"repo",
             {"train.alpha_te", "train.batch_size", "train.grad_clip_norm", "train.max_step",
              "train.adam_eps", "train.adam_alpha_is", "train.double_q",
              "train.te_loss_per_step", "train.stop_at_win_rate", "train.checkpoint_interval",
              "type_embed.embed_dim", "type_embed.hidden_dim", "type_embed.hyper_hidden",
              "type_embed.update_mode", "type_embed.reduction", "mixer.variant", "mixer.mode",
              "mixer.n_heads", "mixer.attn_key_dim", "mixer.attn_val_dim", "scenario"}},
        };
    }

    static ExperimentConfig from_json(const json& user,
                                      const std::vector<std::string>& overrides = {}) {
        ExperimentConfig c;
        c.tree_ = defaults();
        merge(c.tree_, user, "");
        for (const auto& kv : overrides) c.apply_override(kv);
        c.validate();
        return c;
    }

    static ExperimentConfig load(const std::string& path,
                                 const std::vector<std::string>& overrides = {}) {
        std::ifstream in(path);
        require<ConfigError>(in.good(), "cannot open config file: ", path);
        json user;
        try {
            in >> user;
        } catch (const json::exception& e) {
            throw ConfigError(cat("config ", path, ": ", e.what()));
        }
        return from_json(user, overrides);
    }

    // key=value with dotted paths; the value is coerced to the type of the
    // entry it replaces
    void apply_override(const std::string& kv) {
        auto eq = kv.find('=');
        require<ConfigError>(eq != std::string::npos, "override '", kv,
                             "' is not of the form key=value");
        const std::string path = kv.substr(0, eq);
        const std::string raw = kv.substr(eq + 1);
        json* node = &tree_;
        std::size_t start = 0;
        std::string walked;
        while (true) {
            auto dot = path.find('.', start);
            const std::string key = path.substr(start, dot - start);
            walked = walked.empty() ? key : walked + "." + key;
            require<ConfigError>(node->is_object() && node->contains(key),
                                 "override: unknown config key '", walked, "'");
            node = &(*node)[key];
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        *node = coerce(*node, raw, walked);
    }

    void validate() const {
        require<ConfigError>(!tree_.at("scenario").is_null(),
                             "scenario: required (bundled name or inline object)");
        require<ConfigError>(tree_.at("scenario").is_string() || tree_.at("scenario").is_object(),
                             "scenario: must be a string or an object");
        resolve_scenario();  // throws on bad scenario content
        to_setup();          // throws on bad component configs
    }

    ScenarioConfig resolve_scenario() const {
        const json& s = tree_.at("scenario");
        if (s.is_string()) return make_scenario(s.get<std::string>());
        ScenarioConfig c;
        if (s.contains("base")) c = make_scenario(s.at("base").get<std::string>());
        try {
            if (s.contains("name")) c.name = s.at("name").get<std::string>();
            if (s.contains("grid_width")) c.grid_width = s.at("grid_width").get<int>();
            if (s.contains("grid_height")) c.grid_height = s.at("grid_height").get<int>();
            if (s.contains("max_steps")) c.max_steps = s.at("max_steps").get<int>();
            if (s.contains("include_last_action"))
                c.include_last_action = s.at("include_last_action").get<bool>();
            if (s.contains("enemy_damage_scale"))
                c.enemy_damage_scale = s.at("enemy_damage_scale").get<double>();
            if (s.contains("unit_stats")) {
                c.unit_stats.clear();
                for (const auto& u : s.at("unit_stats")) {
                    UnitTypeStats st;
                    st.max_health = u.at("max_health").get<double>();
                    st.attack_damage = u.at("attack_damage").get<double>();
                    st.attack_range = u.at("attack_range").get<int>();
                    st.move_step = u.value("move_step", 1);
                    st.sight_range = u.at("sight_range").get<int>();
                    c.unit_stats.push_back(st);
                }
            }
            auto roster = [](const json& r) {
                std::vector<std::pair<int, int>> out;
                for (const auto& e : r) out.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
                return out;
            };
            if (s.contains("ally_roster")) c.ally_roster = roster(s.at("ally_roster"));
            if (s.contains("enemy_roster")) c.enemy_roster = roster(s.at("enemy_roster"));
            if (s.contains("random_rosters")) c.random_rosters = s.at("random_rosters").get<bool>();
            if (s.contains("roster_type_probs"))
                c.roster_type_probs = s.at("roster_type_probs").get<std::vector<double>>();
            if (s.contains("n_random_allies"))
                c.n_random_allies = s.at("n_random_allies").get<int>();
            if (s.contains("n_random_enemies"))
                c.n_random_enemies = s.at("n_random_enemies").get<int>();
            if (s.contains("reward_weights")) {
                const auto& w = s.at("reward_weights");
                c.reward_weights.damage_scale = w.value("damage_scale", 1.0);
                c.reward_weights.kill_bonus = w.value("kill_bonus", 10.0);
                c.reward_weights.win_bonus = w.value("win_bonus", 200.0);
            }
        } catch (const json::exception& e) {
            throw ConfigError(cat("scenario: ", e.what()));
        }
        c.validate();
        return c;
    }

    ExperimentSetup to_setup() const {
        ExperimentSetup s;
        s.scenario = resolve_scenario();
        const json& a = tree_.at("agent");
        s.agent.rnn_hidden_dim = a.at("rnn_hidden_dim").get<int>();
        s.agent.hpn_hyper_dim = a.at("hpn_hyper_dim").get<int>();
        s.agent.hpn_head_num = a.at("hpn_head_num").get<int>();
        const json& t = tree_.at("type_embed");
        s.te.embed_dim = t.at("embed_dim").get<int>();
        s.te.hidden_dim = t.at("hidden_dim").get<int>();
        s.te.hyper_hidden = t.at("hyper_hidden").get<int>();
        const std::string um = t.at("update_mode").get<std::string>();
        require<ConfigError>(um == "combined" || um == "separate",
                             "type_embed.update_mode: must be combined or separate");
        s.te.update_mode = um == "combined" ? TypeEmbedConfig::UpdateMode::kCombined
                                            : TypeEmbedConfig::UpdateMode::kSeparate;
        const std::string red = t.at("reduction").get<std::string>();
        require<ConfigError>(red == "mean" || red == "sum",
                             "type_embed.reduction: must be mean or sum");
        s.te.reduction = red == "mean" ? TypeEmbedConfig::Reduction::kMean
                                       : TypeEmbedConfig::Reduction::kSum;
        const json& m = tree_.at("mixer");
        s.mixer.variant = parse_variant(m.at("variant").get<std::string>());
        s.mixer.mode = parse_mode(m.at("mode").get<std::string>());
        s.mixer.n_heads = m.at("n_heads").get<int>();
        s.mixer.attn_key_dim = m.at("attn_key_dim").get<int>();
        s.mixer.attn_val_dim = m.at("attn_val_dim").get<int>();
        s.mixer.mixing_embed_dim = m.at("mixing_embed_dim").get<int>();
        s.mixer.hypernet_embed_dim = m.at("hypernet_embed_dim").get<int>();
        const json& tr = tree_.at("train");
        s.train.lr = tr.at("lr").get<double>();
        s.train.gamma = tr.at("gamma").get<double>();
        s.train.epsilon_start = tr.at("epsilon_start").get<double>();
        s.train.epsilon_finish = tr.at("epsilon_finish").get<double>();
        s.train.epsilon_anneal_time = tr.at("epsilon_anneal_time").get<std::int64_t>();
        s.train.target_update_interval = tr.at("target_update_interval").get<std::int64_t>();
        s.train.test_interval = tr.at("test_interval").get<std::int64_t>();
        s.train.test_nepisode = tr.at("test_nepisode").get<int>();
        s.train.max_step = tr.at("max_step").get<std::int64_t>();
        s.train.batch_size = tr.at("batch_size").get<int>();
        s.train.buffer_size = tr.at("buffer_size").get<std::int64_t>();
        s.train.td_lambda = tr.at("td_lambda").get<double>();
        s.train.alpha_te = tr.at("alpha_te").get<double>();
        s.train.n_parallel_envs = tr.at("n_parallel_envs").get<int>();
        s.train.grad_clip_norm = tr.at("grad_clip_norm").get<double>();
        s.train.double_q = tr.at("double_q").get<bool>();
        s.train.checkpoint_interval = tr.at("checkpoint_interval").get<std::int64_t>();
        s.train.te_loss_per_step = tr.at("te_loss_per_step").get<bool>();
        s.train.stop_at_win_rate = tr.at("stop_at_win_rate").get<double>();
        s.train.adam_alpha = tr.at("adam_alpha").get<double>();
        s.train.adam_alpha_is = tr.at("adam_alpha_is").get<std::string>();
        s.train.adam_eps = tr.at("adam_eps").get<double>();
        s.train.validate();
        s.seed = tree_.at("seed").get<std::uint64_t>();
        s.out_dir = tree_.at("out_dir").get<std::string>();
        s.run_label = tree_.at("run_label").get<std::string>();
        return s;
    }

    const json& tree() const { return tree_; }
    json& tree() { return tree_; }
    std::string canonical() const { return tree_.dump(2); }

  private:
    static void merge(json& base, const json& user, const std::string& path) {
        require<ConfigError>(user.is_object(), "config", path.empty() ? "" : " at " + path,
                             ": expected an object");
        for (auto it = user.begin(); it != user.end(); ++it) {
            const std::string p = path.empty() ? it.key() : path + "." + it.key();
            require<ConfigError>(base.is_object() && base.contains(it.key()),
                                 "unknown config key '", p, "'");
            json& slot = base[it.key()];
            if (slot.is_object() && it.value().is_object() && it.key() != "scenario") {
                merge(slot, it.value(), p);
            } else if (slot.is_null() || it.key() == "scenario") {
                slot = it.value();  // scenario accepts string or object wholesale
            } else {
                require<ConfigError>(
                    (slot.is_number() && it.value().is_number()) ||
                        (slot.is_string() && it.value().is_string()) ||
                        (slot.is_boolean() && it.value().is_boolean()),
                    "config key '", p, "': type mismatch");
                slot = it.value();
            }
        }
    }

    static json coerce(const json& current, const std::string& raw, const std::string& path) {
        try {
            if (current.is_boolean()) {
                if (raw == "true" || raw == "1") return true;
                if (raw == "false" || raw == "0") return false;
                throw ConfigError(cat("override '", path, "': expected a boolean"));
            }
            if (current.is_number_integer() || current.is_number_unsigned())
                return std::stoll(raw);
            if (current.is_number_float()) return std::stod(raw);
            if (current.is_string() || current.is_null()) return raw;
        } catch (const std::invalid_argument&) {
            throw ConfigError(cat("override '", path, "': cannot parse '", raw, "'"));
        } catch (const std::out_of_range&) {
            throw ConfigError(cat("override '", path, "': value out of range"));
        }
        throw ConfigError(cat("override '", path, "': unsupported target type"));
    }

    json tree_;
};

}  // namespace qtm

#pragma once

// Learning loop, evaluation and the mask ablation runner.
//
// Each update collects a batch of episodes (grouped per instance for the
// group-baseline estimators), computes advantages, then runs a few epochs of
// minibatch descent on the masked actor loss (plus the critic loss for PPO).
// Every random draw is derived from the configured seeds, so a run is a pure
// function of its config.

#include "turnrl/errors.hpp"
#include "turnrl/hopqa.hpp"
#include "turnrl/parallel.hpp"
#include "turnrl/policy.hpp"
#include "turnrl/random.hpp"
#include "turnrl/rl_core.hpp"
#include "turnrl/rollout.hpp"
#include "turnrl/token_mdp.hpp"
#include "turnrl/tool_env.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace turnrl {

struct TaskConfig {
    hopqa::HopConfig hop;
    std::size_t search_k = 5;
};

struct OptimizerConfig {
    double learning_rate = 0.5;
    double grad_clip = 1.0;
    int epochs = 4;
    int minibatch_size = 16;  // trajectories
};

struct ScheduleConfig {
    int updates = 200;
    int episodes_per_update = 64;
    int eval_interval = 20;
    int eval_size = 200;
};

// Supervised pretraining on format demonstrations before RL: the policy
// learns the call/answer syntax and to copy the question into its first
// search, but not to read observations.
struct WarmStartConfig {
    bool enabled = true;
    int episodes = 4096;
    int epochs = 12;
    int minibatch_size = 16;
    double learning_rate = 2.0;
};

struct SeedConfig {
    std::uint64_t train = 1;
    std::uint64_t eval = 1000003;
    std::vector<std::uint64_t> ablation = {1, 2, 3, 4, 5};
};

struct RunConfig {
    TaskConfig task;
    EnvConfig env;
    RLConfig rl;
    PolicyDims policy;
    double temperature = 1.0;
    OptimizerConfig optimizer;
    ScheduleConfig schedule;
    WarmStartConfig warm_start;
    SeedConfig seeds;
    int threads = 1;

    Vocabulary vocabulary() const {
        return Vocabulary::standard(static_cast<std::size_t>(task.hop.n_entities),
                                    static_cast<std::size_t>(task.hop.n_relations));
    }

    PolicyDims dims() const {
        PolicyDims d = policy;
        d.vocab = static_cast<int>(vocabulary().size());
        return d;
    }

    void validate() const {
        rl.validate();
        env.limits.validate();
        dims().validate();
        if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
        if (optimizer.learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
        if (optimizer.epochs <= 0 || optimizer.minibatch_size <= 0)
            throw ConfigError("epochs and minibatch_size must be positive");
        if (schedule.updates <= 0 || schedule.episodes_per_update <= 0 ||
            schedule.eval_interval <= 0 || schedule.eval_size <= 0)
            throw ConfigError("schedule counts must be positive");
        if (rl.uses_groups() && schedule.episodes_per_update % rl.group_size != 0)
            throw ConfigError("episodes_per_update must be a multiple of group_size");
        if (warm_start.enabled &&
            (warm_start.episodes <= 0 || warm_start.epochs <= 0 || warm_start.minibatch_size <= 0))
            throw ConfigError("warm start counts must be positive");
        if (seeds.train == seeds.eval) throw ConfigError("train and eval seeds must differ");
        if (task.search_k < 1) throw ConfigError("search_k must be at least 1");
    }
};

// ---------------------------------------------------------------------------
// Config file (JSON mirroring the field names above). Missing keys keep
// their defaults.

namespace detail {

template <class T, class Json>
void read_opt(const Json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).template get<T>();
}

} // namespace detail

inline nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["task"] = {{"hops", c.task.hop.hops},
                 {"n_entities", c.task.hop.n_entities},
                 {"n_relations", c.task.hop.n_relations},
                 {"n_distractors", c.task.hop.n_distractors},
                 {"share_subject_prob", c.task.hop.share_subject_prob},
                 {"search_k", c.task.search_k}};
    j["env"] = {{"max_turns", c.env.limits.max_turns},
                {"max_tokens_per_turn", c.env.limits.max_tokens_per_turn},
                {"max_total_tokens", c.env.limits.max_total_tokens},
                {"process_reward_enabled", c.env.process_reward_enabled},
                {"process_reward_value", c.env.process_reward_value}};
    j["rl"] = {{"algorithm", to_string(c.rl.algorithm)},
               {"gamma", c.rl.gamma},
               {"lambda", c.rl.lambda},
               {"clip_eps", c.rl.clip_eps},
               {"group_size", c.rl.group_size},
               {"norm_eps", c.rl.norm_eps},
               {"loss_mask_enabled", c.rl.loss_mask_enabled},
               {"advantage_mask_enabled", c.rl.advantage_mask_enabled},
               {"whiten_advantages", c.rl.whiten_advantages},
               {"kl_coef", c.rl.kl_coef},
               {"value_coef", c.rl.value_coef}};
    j["policy"] = {{"window", c.policy.window},
                   {"embed", c.policy.embed},
                   {"hidden", c.policy.hidden},
                   {"separate_critic", c.policy.separate_critic}};
    j["temperature"] = c.temperature;
    j["optimizer"] = {{"learning_rate", c.optimizer.learning_rate},
                      {"grad_clip", c.optimizer.grad_clip},
                      {"epochs", c.optimizer.epochs},
                      {"minibatch_size", c.optimizer.minibatch_size}};
    j["schedule"] = {{"updates", c.schedule.updates},
                     {"episodes_per_update", c.schedule.episodes_per_update},
                     {"eval_interval", c.schedule.eval_interval},
                     {"eval_size", c.schedule.eval_size}};
    j["warm_start"] = {{"enabled", c.warm_start.enabled},
                       {"episodes", c.warm_start.episodes},
                       {"epochs", c.warm_start.epochs},
                       {"minibatch_size", c.warm_start.minibatch_size},
                       {"learning_rate", c.warm_start.learning_rate}};
    j["seeds"] = {{"train", c.seeds.train}, {"eval", c.seeds.eval}, {"ablation", c.seeds.ablation}};
    j["threads"] = c.threads;
    return j;
}

template <class Json>
RunConfig run_config_from_json(const Json& j) {
    using detail::read_opt;
    RunConfig c;
    if (j.contains("task")) {
        const auto& t = j.at("task");
        read_opt(t, "hops", c.task.hop.hops);
        read_opt(t, "n_entities", c.task.hop.n_entities);
        read_opt(t, "n_relations", c.task.hop.n_relations);
        read_opt(t, "n_distractors", c.task.hop.n_distractors);
        read_opt(t, "share_subject_prob", c.task.hop.share_subject_prob);
        read_opt(t, "search_k", c.task.search_k);
    }
    if (j.contains("env")) {
        const auto& e = j.at("env");
        read_opt(e, "max_turns", c.env.limits.max_turns);
        read_opt(e, "max_tokens_per_turn", c.env.limits.max_tokens_per_turn);
        read_opt(e, "max_total_tokens", c.env.limits.max_total_tokens);
        read_opt(e, "process_reward_enabled", c.env.process_reward_enabled);
        read_opt(e, "process_reward_value", c.env.process_reward_value);
    }
    if (j.contains("rl")) {
        const auto& r = j.at("rl");
        if (r.contains("algorithm"))
            c.rl.algorithm = algorithm_from_string(r.at("algorithm").template get<std::string>());
        read_opt(r, "gamma", c.rl.gamma);
        read_opt(r, "lambda", c.rl.lambda);
        read_opt(r, "clip_eps", c.rl.clip_eps);
        read_opt(r, "group_size", c.rl.group_size);
        read_opt(r, "norm_eps", c.rl.norm_eps);
        read_opt(r, "loss_mask_enabled", c.rl.loss_mask_enabled);
        read_opt(r, "advantage_mask_enabled", c.rl.advantage_mask_enabled);
        read_opt(r, "whiten_advantages", c.rl.whiten_advantages);
        read_opt(r, "kl_coef", c.rl.kl_coef);
        read_opt(r, "value_coef", c.rl.value_coef);
    }
    if (j.contains("policy")) {
        const auto& p = j.at("policy");
        read_opt(p, "window", c.policy.window);
        read_opt(p, "embed", c.policy.embed);
        read_opt(p, "hidden", c.policy.hidden);
        read_opt(p, "separate_critic", c.policy.separate_critic);
    }
    read_opt(j, "temperature", c.temperature);
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        read_opt(o, "learning_rate", c.optimizer.learning_rate);
        read_opt(o, "grad_clip", c.optimizer.grad_clip);
        read_opt(o, "epochs", c.optimizer.epochs);
        read_opt(o, "minibatch_size", c.optimizer.minibatch_size);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        read_opt(s, "updates", c.schedule.updates);
        read_opt(s, "episodes_per_update", c.schedule.episodes_per_update);
        read_opt(s, "eval_interval", c.schedule.eval_interval);
        read_opt(s, "eval_size", c.schedule.eval_size);
    }
    if (j.contains("warm_start")) {
        const auto& w = j.at("warm_start");
        read_opt(w, "enabled", c.warm_start.enabled);
        read_opt(w, "episodes", c.warm_start.episodes);
        read_opt(w, "epochs", c.warm_start.epochs);
        read_opt(w, "minibatch_size", c.warm_start.minibatch_size);
        read_opt(w, "learning_rate", c.warm_start.learning_rate);
    }
    if (j.contains("seeds")) {
        const auto& s = j.at("seeds");
        read_opt(s, "train", c.seeds.train);
        read_opt(s, "eval", c.seeds.eval);
        read_opt(s, "ablation", c.seeds.ablation);
    }
    read_opt(j, "threads", c.threads);
    c.validate();
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    return run_config_from_json(nlohmann::json::parse(in));
}

// ---------------------------------------------------------------------------
// Instance streams. Training, warm-start and evaluation instances come from
// separately tagged seed domains.

namespace stream {
inline constexpr std::uint64_t train = 0x747261696e;
inline constexpr std::uint64_t eval = 0x6576616c;
inline constexpr std::uint64_t warm = 0x7761726d;
inline constexpr std::uint64_t shuffle = 0x73687566;
inline constexpr std::uint64_t episode = 0x65706973;
} // namespace stream

inline std::uint64_t stream_seed(std::uint64_t base, std::uint64_t domain, std::uint64_t index) {
    return derive_seed(derive_seed(base, domain), index);
}

inline std::vector<hopqa::Instance> make_eval_set(const RunConfig& cfg, const Vocabulary& vocab) {
    std::vector<hopqa::Instance> out;
    out.reserve(static_cast<std::size_t>(cfg.schedule.eval_size));
    for (int i = 0; i < cfg.schedule.eval_size; ++i)
        out.push_back(hopqa::generate_instance(
            stream_seed(cfg.seeds.eval, stream::eval, static_cast<std::uint64_t>(i)), cfg.task.hop,
            vocab));
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRecord {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    TokenId gold = 0;
    std::optional<TokenSeq> predicted;
    int em = 0;
    double reward = 0.0;
    int turns = 0;
    TerminationReason reason = TerminationReason::none;
};

struct EvalReport {
    double mean_em = 0.0;
    std::vector<EvalRecord> records;
};

// Greedy decoding; EM is 0 when no well-formed answer span was produced.
template <RolloutPolicy Policy>
EvalReport evaluate(const Policy& policy, std::span<const hopqa::Instance> instances,
                    const Vocabulary& vocab, const EnvConfig& env_cfg, std::size_t search_k = 5,
                    int threads = 1) {
    if (instances.empty()) throw PreconditionError("evaluation needs a non-empty instance set");
    EvalReport report;
    report.records.resize(instances.size());
    const Decoding greedy{1.0, true};
    parallel_for(instances.size(), threads, [&](std::size_t i) {
        const auto& inst = instances[i];
        const auto rec = run_episode(policy, inst, vocab, env_cfg, greedy, inst.seed, i, search_k);
        EvalRecord r;
        r.index = i;
        r.seed = inst.seed;
        r.gold = inst.gold_answer;
        r.predicted = rec.answer;
        r.em = rec.answer ? hopqa::exact_match(*rec.answer, inst.gold_answer) : 0;
        r.reward = rec.episode_reward;
        r.turns = rec.turns;
        r.reason = rec.trajectory.termination_reason;
        report.records[i] = std::move(r);
    });
    double s = 0.0;
    for (const auto& r : report.records) s += r.em;
    report.mean_em = s / static_cast<double>(report.records.size());
    return report;
}

inline nlohmann::ordered_json to_json(const EvalRecord& r, const Vocabulary& vocab) {
    nlohmann::ordered_json j;
    j["index"] = r.index;
    j["seed"] = r.seed;
    j["gold"] = vocab.symbol(r.gold);
    j["predicted"] = r.predicted ? nlohmann::ordered_json(vocab.symbols_of(*r.predicted))
                                 : nlohmann::ordered_json(nullptr);
    j["em"] = r.em;
    j["reward"] = r.reward;
    j["turns"] = r.turns;
    j["reason"] = to_string(r.reason);
    return j;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRow {
    int update = 0;
    double mean_episode_reward = 0.0;
    std::optional<double> eval_em;
    double mean_trajectory_length = 0.0;
    double mean_turns = 0.0;
    double parse_failure_rate = 0.0;  // fraction of episodes with a malformed tool call
    double actor_loss = 0.0;
    std::optional<double> critic_loss;
    double wall_clock_seconds = 0.0;
};

namespace detail {
inline std::string fmt_num(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}
} // namespace detail

// Wall-clock time is kept out of metrics.csv so that the file is a pure
// function of the config; write_timing_csv records it separately.
inline void write_metrics_csv(std::ostream& os, std::span<const MetricsRow> rows) {
    os << "update,mean_episode_reward,eval_em,mean_trajectory_length,mean_turns,"
          "parse_failure_rate,actor_loss,critic_loss\n";
    for (const auto& r : rows) {
        os << r.update << ',' << detail::fmt_num(r.mean_episode_reward) << ','
           << (r.eval_em ? detail::fmt_num(*r.eval_em) : "") << ','
           << detail::fmt_num(r.mean_trajectory_length) << ',' << detail::fmt_num(r.mean_turns)
           << ',' << detail::fmt_num(r.parse_failure_rate) << ',' << detail::fmt_num(r.actor_loss)
           << ',' << (r.critic_loss ? detail::fmt_num(*r.critic_loss) : "") << '\n';
    }
}

inline void write_timing_csv(std::ostream& os, std::span<const MetricsRow> rows) {
    os << "update,wall_clock_seconds\n";
    for (const auto& r : rows) os << r.update << ',' << detail::fmt_num(r.wall_clock_seconds) << '\n';
}

// ---------------------------------------------------------------------------
// Batch preparation

struct BatchAdvantages {
    std::vector<std::vector<double>> advantages;
    std::vector<std::vector<double>> returns;
    std::vector<std::vector<std::uint8_t>> defined;
};

// Advantages for one update's records. group_ids[b] identifies the instance
// group of record b.
inline BatchAdvantages compute_advantages(const RLConfig& rl,
                                          std::span<const RolloutRecord> records,
                                          std::span<const std::size_t> group_ids) {
    BatchAdvantages out;
    const std::size_t n = records.size();
    if (n == 0) throw EmptyBatchError("no episodes in batch");
    out.advantages.resize(n);
    out.returns.resize(n);
    out.defined.resize(n);
    const bool adv_mask = rl.advantage_mask_enabled;
    auto defined_for = [&](const Trajectory& t) {
        return adv_mask ? t.action_mask : std::vector<std::uint8_t>(t.size(), 1);
    };

    switch (rl.algorithm) {
        case Algorithm::ppo: {
            for (std::size_t b = 0; b < n; ++b) {
                const auto& t = records[b].trajectory;
                auto g = masked_gae(t.rewards, t.values, t.action_mask, rl.gamma, rl.lambda, adv_mask);
                out.advantages[b] = std::move(g.advantages);
                out.returns[b] = std::move(g.returns);
                out.defined[b] = std::move(g.defined_mask);
            }
            if (rl.whiten_advantages) whiten(out.advantages, out.defined, rl.norm_eps);
            break;
        }
        case Algorithm::grpo:
        case Algorithm::rloo: {
            std::vector<std::size_t> order(n);
            for (std::size_t b = 0; b < n; ++b) order[b] = b;
            std::vector<bool> done(n, false);
            for (std::size_t b = 0; b < n; ++b) {
                if (done[b]) continue;
                std::vector<std::size_t> members;
                std::vector<double> rewards;
                for (std::size_t k = b; k < n; ++k)
                    if (group_ids[k] == group_ids[b]) {
                        members.push_back(k);
                        rewards.push_back(records[k].episode_reward);
                        done[k] = true;
                    }
                const auto adv = rl.algorithm == Algorithm::grpo
                                     ? grpo_advantages(rewards, rl.norm_eps)
                                     : rloo_advantages(rewards);
                for (std::size_t m = 0; m < members.size(); ++m) {
                    const auto& t = records[members[m]].trajectory;
                    out.advantages[members[m]] = broadcast_scalar_advantage(t, adv[m], adv_mask);
                }
            }
            for (std::size_t b = 0; b < n; ++b) {
                out.defined[b] = defined_for(records[b].trajectory);
                out.returns[b].assign(records[b].trajectory.size(), 0.0);
            }
            break;
        }
        case Algorithm::reinforce_pp:
        case Algorithm::reinforce_pp_baseline: {
            std::vector<Trajectory> trajs;
            trajs.reserve(n);
            for (const auto& r : records) trajs.push_back(r.trajectory);
            out.advantages = reinforce_pp_advantages(
                trajs, group_ids, rl.gamma, rl.algorithm == Algorithm::reinforce_pp_baseline,
                rl.norm_eps, adv_mask);
            for (std::size_t b = 0; b < n; ++b) {
                out.defined[b] = defined_for(trajs[b]);
                out.returns[b].assign(trajs[b].size(), 0.0);
            }
            break;
        }
    }
    return out;
}

struct MinibatchLosses {
    double actor = 0.0;
    std::optional<double> critic;
    std::size_t critic_calls = 0;
};

// One descent step on a minibatch of trajectories; returns the losses
// evaluated before the step.
inline MinibatchLosses update_minibatch(PolicyParams& params, const RLConfig& rl,
                                        const OptimizerConfig& opt, TokenId pad,
                                        std::span<const RolloutRecord> records,
                                        const BatchAdvantages& adv,
                                        std::span<const std::size_t> members) {
    std::vector<double> old_lp, new_lp, a, values_new, returns;
    std::vector<std::uint8_t> mask, defined;
    std::vector<BackwardSample> samples;
    const bool critic = rl.uses_critic();
    for (std::size_t b : members) {
        const auto& t = records[b].trajectory;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const bool need_actor = !rl.loss_mask_enabled || t.action_mask[i];
            const bool need_critic = critic && adv.defined[b][i];
            double lp = t.old_logprobs[i];
            double v = 0.0;
            TokenSeq ctx;
            if (need_actor || need_critic) {
                ctx = context_window(t.tokens, i, params.dims.window, pad);
                const auto out = forward(params, ctx);
                lp = logprob(out.logits, t.tokens[i]);
                v = out.value;
            }
            old_lp.push_back(t.old_logprobs[i]);
            new_lp.push_back(lp);
            a.push_back(adv.advantages[b][i]);
            mask.push_back(t.action_mask[i]);
            values_new.push_back(v);
            returns.push_back(adv.returns[b][i]);
            defined.push_back(critic ? adv.defined[b][i] : 0);
            samples.push_back(BackwardSample{std::move(ctx), t.tokens[i], 0.0, 0.0});
        }
    }

    MinibatchLosses losses;
    const auto actor = actor_loss(old_lp, new_lp, a, mask, rl.clip_eps, rl.loss_mask_enabled);
    losses.actor = actor.loss;
    for (std::size_t k = 0; k < samples.size(); ++k) samples[k].d_logprob = actor.grad[k];
    if (rl.kl_coef > 0.0) {
        const auto kl = kl_penalty(old_lp, new_lp, mask, rl.loss_mask_enabled);
        for (std::size_t k = 0; k < samples.size(); ++k)
            samples[k].d_logprob += rl.kl_coef * kl.grad[k];
    }
    if (critic) {
        const auto c = critic_loss(values_new, returns, defined);
        losses.critic = c.loss;
        losses.critic_calls = 1;
        for (std::size_t k = 0; k < samples.size(); ++k)
            samples[k].d_value = rl.value_coef * c.grad[k];
    }
    if (!std::isfinite(losses.actor) || (losses.critic && !std::isfinite(*losses.critic)))
        throw NumericalError("non-finite loss");

    std::erase_if(samples, [](const BackwardSample& s) {
        return s.d_logprob == 0.0 && s.d_value == 0.0;
    });
    if (opt.learning_rate > 0.0 && !samples.empty()) {
        const auto grad = backward(params, samples);
        sgd_step(params, grad, opt.learning_rate, opt.grad_clip);
    }
    return losses;
}

// ---------------------------------------------------------------------------
// Warm start

inline void warm_start(PolicyParams& params, const RunConfig& cfg, const Vocabulary& vocab) {
    const auto& ws = cfg.warm_start;
    const TokenId pad = vocab.reserved().pad;
    ScriptedPolicy demo(
        hopqa::ScriptedAgent(vocab, hopqa::ScriptedAgent::Mode::format_only, cfg.task.hop.n_entities));
    std::vector<Trajectory> demos(static_cast<std::size_t>(ws.episodes));
    parallel_for(demos.size(), cfg.threads, [&](std::size_t j) {
        const auto seed = stream_seed(cfg.seeds.train, stream::warm, j);
        const auto inst = hopqa::generate_instance(seed, cfg.task.hop, vocab);
        demos[j] = run_episode(demo, inst, vocab, cfg.env, Decoding{}, seed, j, cfg.task.search_k)
                       .trajectory;
    });
    Rng rng(stream_seed(cfg.seeds.train, stream::warm, UINT64_MAX));
    std::vector<std::size_t> order(demos.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < ws.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(ws.minibatch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(ws.minibatch_size));
            std::vector<BackwardSample> samples;
            for (std::size_t k = start; k < stop; ++k) {
                const auto& t = demos[order[k]];
                for (std::size_t i = 0; i < t.size(); ++i)
                    if (t.action_mask[i])
                        samples.push_back({context_window(t.tokens, i, params.dims.window, pad),
                                           t.tokens[i], 0.0, 0.0});
            }
            // mean negative log-likelihood of the demonstrated actions
            for (auto& s : samples) s.d_logprob = -1.0 / static_cast<double>(samples.size());
            sgd_step(params, backward(params, samples), ws.learning_rate, cfg.optimizer.grad_clip);
        }
    }
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
    std::optional<std::filesystem::path> out_dir;
    bool dump_trajectories = false;
    bool evaluate_baselines = true;
    std::function<void(const MetricsRow&)> on_update;
};

struct TrainResult {
    std::vector<MetricsRow> metrics;
    PolicyParams params;
    std::optional<double> random_init_eval_em;  // before warm start
    std::optional<double> untrained_eval_em;    // after warm start, before RL
    EvalReport final_eval;
    std::size_t critic_loss_calls = 0;
};

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw ConfigError("cannot write " + p.string());
    os << text;
}

inline void dump_batch(const std::filesystem::path& p, std::span<const RolloutRecord> records,
                       const Vocabulary& vocab) {
    std::ofstream os(p, std::ios::binary);
    for (const auto& r : records) os << dump_line(r.trajectory, vocab) << '\n';
}

} // namespace detail

inline TrainResult train(const RunConfig& cfg, const TrainOptions& options = {}) {
    cfg.validate();
    const Vocabulary vocab = cfg.vocabulary();
    const TokenId pad = vocab.reserved().pad;
    const auto& rl = cfg.rl;
    const auto& sched = cfg.schedule;
    const auto t0 = std::chrono::steady_clock::now();

    if (options.out_dir) std::filesystem::create_directories(*options.out_dir);
    std::ofstream traj_dump;
    if (options.out_dir && options.dump_trajectories)
        traj_dump.open(*options.out_dir / "trajectories.jsonl", std::ios::binary);

    const auto eval_set = make_eval_set(cfg, vocab);
    TrainResult result;
    result.params = init_params(cfg.seeds.train, cfg.dims());
    auto run_eval = [&](const PolicyParams& p) {
        return evaluate(NetworkPolicy(p, pad), eval_set, vocab, cfg.env, cfg.task.search_k,
                        cfg.threads);
    };
    if (options.evaluate_baselines) result.random_init_eval_em = run_eval(result.params).mean_em;
    if (cfg.warm_start.enabled) warm_start(result.params, cfg, vocab);
    if (options.evaluate_baselines) result.untrained_eval_em = run_eval(result.params).mean_em;

    const int group = rl.uses_groups() ? rl.group_size : 1;
    const int n_groups = sched.episodes_per_update / group;
    for (int update = 0; update < sched.updates; ++update) {
        // collect
        std::vector<hopqa::Instance> instances;
        instances.reserve(static_cast<std::size_t>(n_groups));
        for (int g = 0; g < n_groups; ++g)
            instances.push_back(hopqa::generate_instance(
                stream_seed(cfg.seeds.train, stream::train,
                            static_cast<std::uint64_t>(update) * n_groups + g),
                cfg.task.hop, vocab));
        std::vector<RolloutRecord> records(static_cast<std::size_t>(sched.episodes_per_update));
        std::vector<std::size_t> group_ids(records.size());
        const NetworkPolicy policy(result.params, pad);
        const Decoding sampling{cfg.temperature, false};
        parallel_for(records.size(), cfg.threads, [&](std::size_t e) {
            const std::size_t g = e / static_cast<std::size_t>(group);
            const std::size_t member = e % static_cast<std::size_t>(group);
            const auto& inst = instances[g];
            const auto seed = derive_seed(stream_seed(inst.seed, stream::episode, 0), member);
            records[e] = run_episode(policy, inst, vocab, cfg.env, sampling, seed,
                                     static_cast<std::uint64_t>(update) * n_groups + g,
                                     cfg.task.search_k);
            group_ids[e] = g;
        });
        if (traj_dump.is_open())
            for (const auto& r : records) traj_dump << dump_line(r.trajectory, vocab) << '\n';

        // learn
        MetricsRow row;
        row.update = update;
        const BatchAdvantages adv = compute_advantages(rl, records, group_ids);
        Rng shuffle_rng(stream_seed(cfg.seeds.train, stream::shuffle, static_cast<std::uint64_t>(update)));
        std::vector<std::size_t> order(records.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        double actor_sum = 0.0, critic_sum = 0.0;
        std::size_t steps = 0, critic_steps = 0;
        try {
            for (int epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
                for (std::size_t i = order.size(); i > 1; --i)
                    std::swap(order[i - 1], order[shuffle_rng.below(i)]);
                const auto mb = static_cast<std::size_t>(cfg.optimizer.minibatch_size);
                for (std::size_t start = 0; start < order.size(); start += mb) {
                    const std::span<const std::size_t> members(
                        order.data() + start, std::min(order.size(), start + mb) - start);
                    const auto l = update_minibatch(result.params, rl, cfg.optimizer, pad, records,
                                                    adv, members);
                    actor_sum += l.actor;
                    ++steps;
                    if (l.critic) {
                        critic_sum += *l.critic;
                        ++critic_steps;
                    }
                    result.critic_loss_calls += l.critic_calls;
                }
            }
            if (!result.params.all_finite()) throw NumericalError("parameters became non-finite");
        } catch (const NumericalError&) {
            if (options.out_dir)
                detail::dump_batch(*options.out_dir / "divergent_batch.jsonl", records, vocab);
            throw;
        }

        double reward_sum = 0.0, len_sum = 0.0, turn_sum = 0.0, parse_fail = 0.0;
        for (const auto& r : records) {
            reward_sum += r.episode_reward;
            len_sum += static_cast<double>(r.trajectory.size());
            turn_sum += r.turns;
            parse_fail += r.parse_failures > 0 ? 1.0 : 0.0;
        }
        const double n = static_cast<double>(records.size());
        row.mean_episode_reward = reward_sum / n;
        row.mean_trajectory_length = len_sum / n;
        row.mean_turns = turn_sum / n;
        row.parse_failure_rate = parse_fail / n;
        row.actor_loss = actor_sum / static_cast<double>(steps);
        if (critic_steps > 0) row.critic_loss = critic_sum / static_cast<double>(critic_steps);
        const bool last = update + 1 == sched.updates;
        if (last) {
            result.final_eval = run_eval(result.params);
            row.eval_em = result.final_eval.mean_em;
        } else if ((update + 1) % sched.eval_interval == 0) {
            row.eval_em = run_eval(result.params).mean_em;
        }
        row.wall_clock_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.metrics.push_back(row);
        if (options.on_update) options.on_update(row);
    }

    if (options.out_dir) {
        const auto& dir = *options.out_dir;
        {
            std::ofstream os(dir / "metrics.csv", std::ios::binary);
            write_metrics_csv(os, result.metrics);
        }
        {
            std::ofstream os(dir / "timing.csv", std::ios::binary);
            write_timing_csv(os, result.metrics);
        }
        {
            std::ofstream os(dir / "checkpoint.txt", std::ios::binary);
            save_checkpoint(os, result.params,
                            CheckpointHeader{1, cfg.seeds.train,
                                             static_cast<std::uint64_t>(sched.updates)});
        }
        {
            std::ofstream os(dir / "eval.jsonl", std::ios::binary);
            for (const auto& r : result.final_eval.records) os << to_json(r, vocab).dump() << '\n';
        }
        {
            std::ofstream os(dir / "eval_instances.jsonl", std::ios::binary);
            for (const auto& inst : eval_set) os << hopqa::to_json(inst, vocab).dump() << '\n';
        }
        detail::write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
    }
    return result;
}

// ---------------------------------------------------------------------------
// Mask ablation

struct AblationArm {
    std::string name;
    bool loss_mask = true;
    bool advantage_mask = true;
};

// Each arm disables one more component than the arm before it.
inline std::vector<AblationArm> ablation_arms(Algorithm algorithm) {
    switch (algorithm) {
        case Algorithm::ppo:
            return {{"both_masks", true, true},
                    {"advantage_mask_disabled", true, false},
                    {"loss_mask_disabled", false, false}};
        case Algorithm::grpo:
            return {{"loss_mask", true, true}, {"loss_mask_disabled", false, true}};
        default:
            throw ConfigError(std::string("ablation supports ppo and grpo, not ") +
                              to_string(algorithm));
    }
}

struct AblationRow {
    std::string arm;
    bool loss_mask = true;
    bool advantage_mask = true;
    std::uint64_t seed = 0;
    double eval_em = 0.0;
};

struct AblationReport {
    Algorithm algorithm = Algorithm::ppo;
    std::vector<AblationArm> arms;
    std::vector<AblationRow> rows;  // arm-major, seed order within an arm

    std::vector<double> ems(const std::string& arm) const {
        std::vector<double> out;
        for (const auto& r : rows)
            if (r.arm == arm) out.push_back(r.eval_em);
        return out;
    }

    double median(const std::string& arm) const {
        auto v = ems(arm);
        if (v.empty()) throw PreconditionError("no rows for arm " + arm);
        std::sort(v.begin(), v.end());
        const std::size_t m = v.size() / 2;
        return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    }
};

inline AblationReport run_ablation(const RunConfig& base, Algorithm algorithm,
                                   std::function<void(const AblationRow&)> on_row = {}) {
    AblationReport report;
    report.algorithm = algorithm;
    report.arms = ablation_arms(algorithm);
    if (base.seeds.ablation.empty()) throw ConfigError("ablation needs at least one seed");
    for (const auto& arm : report.arms) {
        for (auto seed : base.seeds.ablation) {
            RunConfig cfg = base;
            cfg.rl.algorithm = algorithm;
            cfg.rl.loss_mask_enabled = arm.loss_mask;
            cfg.rl.advantage_mask_enabled = arm.advantage_mask;
            cfg.seeds.train = seed;
            TrainOptions opts;
            opts.evaluate_baselines = false;
            const auto res = train(cfg, opts);
            AblationRow row{arm.name, arm.loss_mask, arm.advantage_mask, seed,
                            res.final_eval.mean_em};
            if (on_row) on_row(row);
            report.rows.push_back(row);
        }
    }
    return report;
}

// Per-seed rows followed by one median row per arm.
inline void write_ablation_csv(std::ostream& os, const AblationReport& report) {
    os << "algorithm,arm,loss_mask,advantage_mask,row,seed,eval_em\n";
    const char* alg = to_string(report.algorithm);
    for (const auto& r : report.rows)
        os << alg << ',' << r.arm << ',' << r.loss_mask << ',' << r.advantage_mask << ",seed,"
           << r.seed << ',' << detail::fmt_num(r.eval_em) << '\n';
    for (const auto& arm : report.arms)
        os << alg << ',' << arm.name << ',' << arm.loss_mask << ',' << arm.advantage_mask
           << ",median,," << detail::fmt_num(report.median(arm.name)) << '\n';
}

} // namespace turnrl

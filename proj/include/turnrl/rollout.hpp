#pragma once

// Multi-turn generation: sample agent tokens, hand each finished turn to the
// environment, splice its feedback in with mask 0, and place rewards.
//
// A turn ends at the first of: a completed tool call, </ans>, <eos>, the
// per-turn token limit, or the episode token budget.

#include "turnrl/errors.hpp"
#include "turnrl/hopqa.hpp"
#include "turnrl/policy.hpp"
#include "turnrl/random.hpp"
#include "turnrl/token_mdp.hpp"
#include "turnrl/tool_env.hpp"

#include <concepts>
#include <cstdint>
#include <span>
#include <vector>

namespace turnrl {

struct TokenDecision {
    TokenId token = 0;
    double logprob = 0.0;
    double value = 0.0;
};

// Anything that picks the next token from the full episode context.
template <class P>
concept RolloutPolicy = requires(const P& p, std::span<const TokenId> ctx, const Decoding& dec,
                                 Rng& rng) {
    { p.decide(ctx, dec, rng) } -> std::same_as<TokenDecision>;
    { p.value(ctx) } -> std::convertible_to<double>;
};

class NetworkPolicy {
public:
    NetworkPolicy(const PolicyParams& params, TokenId pad) : params_(&params), pad_(pad) {}

    TokenDecision decide(std::span<const TokenId> ctx, const Decoding& dec, Rng& rng) const {
        const auto window = context_window(ctx, ctx.size(), params_->dims.window, pad_);
        const auto out = forward(*params_, window);
        const TokenId tok = decode(out.logits, dec, rng);
        return {tok, logprob(out.logits, tok), out.value};
    }

    double value(std::span<const TokenId> ctx) const {
        return forward(*params_, context_window(ctx, ctx.size(), params_->dims.window, pad_)).value;
    }

    const PolicyParams& params() const noexcept { return *params_; }

private:
    const PolicyParams* params_;
    TokenId pad_;
};

class ScriptedPolicy {
public:
    explicit ScriptedPolicy(hopqa::ScriptedAgent agent) : agent_(std::move(agent)) {}

    TokenDecision decide(std::span<const TokenId> ctx, const Decoding&, Rng& rng) const {
        return {agent_.next(ctx, rng), 0.0, 0.0};
    }
    double value(std::span<const TokenId>) const { return 0.0; }

private:
    hopqa::ScriptedAgent agent_;
};

struct RolloutRecord {
    Trajectory trajectory;
    double episode_reward = 0.0;
    std::uint64_t instance_id = 0;
    std::uint64_t seed = 0;
    std::size_t prompt_length = 0;
    std::vector<Segment> layout;
    int turns = 0;
    int tool_calls = 0;
    int parse_failures = 0;
    double outcome_reward = 0.0;
    double process_reward_total = 0.0;
    std::optional<TokenSeq> answer;
};

template <RolloutPolicy Policy>
RolloutRecord rollout_episode(const Policy& policy, ToolEnv& env, const TokenSeq& prompt,
                              const Decoding& decoding, Rng& rng, std::uint64_t instance_id = 0,
                              std::uint64_t seed = 0) {
    const auto& st = env.state();
    if (st.done || st.turn_count != 0 || st.total_tokens != 0)
        throw ProtocolViolation("rollout needs a fresh environment");
    const Vocabulary& vocab = env.vocabulary();
    const auto& rt = vocab.reserved();
    const auto& limits = env.config().limits;

    RolloutRecord rec;
    rec.instance_id = instance_id;
    rec.seed = seed;
    rec.prompt_length = prompt.size();
    AgentState state{prompt, {}, {}};
    Trajectory& traj = rec.trajectory;

    auto push = [&](TokenId tok, std::uint8_t m, double logp, double value) {
        traj.tokens.push_back(tok);
        traj.action_mask.push_back(m);
        traj.rewards.push_back(0.0);
        traj.old_logprobs.push_back(logp);
        traj.values.push_back(value);
    };
    auto prefix = [&]() { return std::span<const TokenId>(traj.tokens); };

    for (TokenId tok : prompt) {
        vocab.check(tok);
        push(tok, 0, 0.0, policy.value(prefix()));
    }

    while (!env.state().done) {
        const TokenDecision d = policy.decide(prefix(), decoding, rng);
        if (!std::isfinite(d.logprob) || !std::isfinite(d.value))
            throw NumericalError("policy produced a non-finite log-probability or value");
        state = append_action_token(vocab, state, d.token);
        push(d.token, 1, d.logprob, d.value);

        const auto& partial = state.partial;
        const bool boundary =
            detect_tool_call_trigger(partial, rt).has_value() || d.token == rt.ans_close ||
            d.token == rt.eos || static_cast<int>(partial.size()) >= limits.max_tokens_per_turn ||
            env.state().total_tokens + static_cast<int>(partial.size()) >= limits.max_total_tokens;
        if (!boundary) continue;

        const StepOutcome out = env.step(partial);
        rec.turns += 1;
        if (out.info.tool_call_turn) {
            rec.tool_calls += 1;
            if (!out.info.parse_ok) rec.parse_failures += 1;
        }
        // process reward sits on the call's </tool>, the outcome on the
        // final agent token; both are the last token of this turn
        traj.rewards.back() += out.process_reward;
        rec.process_reward_total += out.process_reward;
        if (out.done) {
            traj.rewards.back() += out.outcome_reward;
            rec.outcome_reward = out.outcome_reward;
            traj.terminated = true;
            traj.termination_reason = out.reason;
        }
        state = append_environment_feedback(state, out.feedback_tokens);
        for (TokenId tok : out.feedback_tokens) push(tok, 0, 0.0, policy.value(prefix()));
    }

    rec.layout = segment_layout(state);
    rec.episode_reward = traj.total_reward();
    rec.answer = hopqa::extract_answer(env.state().action_segments, vocab);
    return rec;
}

// Fresh environment and rng seeded from `seed`.
template <RolloutPolicy Policy>
RolloutRecord run_episode(const Policy& policy, const hopqa::Instance& instance,
                          const Vocabulary& vocab, EnvConfig env_cfg, const Decoding& decoding,
                          std::uint64_t seed, std::uint64_t instance_id = 0, std::size_t search_k = 5) {
    env_cfg.seed = seed;
    ToolEnv env = hopqa::make_env(instance, vocab, env_cfg, search_k);
    Rng rng(seed);
    return rollout_episode(policy, env, instance.question_tokens, decoding, rng, instance_id, seed);
}

// G episodes on one instance with seeds derive_seed(base_seed, i).
template <RolloutPolicy Policy>
std::vector<RolloutRecord> rollout_group(const Policy& policy, const hopqa::Instance& instance,
                                         const Vocabulary& vocab, const EnvConfig& env_cfg, int G,
                                         const Decoding& decoding, std::uint64_t base_seed,
                                         std::uint64_t instance_id = 0, std::size_t search_k = 5) {
    if (G < 1) throw PreconditionError("group size must be at least 1");
    std::vector<RolloutRecord> out;
    out.reserve(static_cast<std::size_t>(G));
    for (int i = 0; i < G; ++i)
        out.push_back(run_episode(policy, instance, vocab, env_cfg, decoding,
                                  derive_seed(base_seed, static_cast<std::uint64_t>(i)),
                                  instance_id, search_k));
    return out;
}

} // namespace turnrl

#pragma once

// Environment wrapper around a tool registry: interprets one agent turn,
// executes at most one tool call, formats the observation, assigns process
// and outcome rewards, and decides termination.

#include "turnrl/errors.hpp"
#include "turnrl/random.hpp"
#include "turnrl/token_mdp.hpp"
#include "turnrl/tool_protocol.hpp"

#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace turnrl {

struct Limits {
    int max_turns = 4;
    int max_tokens_per_turn = 16;
    int max_total_tokens = 96;

    void validate() const {
        if (max_turns <= 0 || max_tokens_per_turn <= 0 || max_total_tokens <= 0)
            throw ConfigError("limits must be positive");
    }
};

struct EnvConfig {
    Limits limits;
    bool process_reward_enabled = false;
    double process_reward_value = 0.1;  // rho
    std::uint64_t seed = 0;
};

// Answer spans: <ans> content+ </ans> with no control token in the content.
struct AnswerScan {
    std::vector<TokenSeq> spans;  // contents of well-formed spans, in order
    std::size_t malformed = 0;    // stray or broken answer markers
};

inline AnswerScan scan_answer_spans(std::span<const TokenId> segment, const Vocabulary& vocab) {
    const auto& rt = vocab.reserved();
    AnswerScan scan;
    std::size_t i = 0;
    while (i < segment.size()) {
        if (segment[i] == rt.ans_close) {
            ++scan.malformed;
            ++i;
            continue;
        }
        if (segment[i] != rt.ans_open) {
            ++i;
            continue;
        }
        std::size_t j = i + 1;
        bool clean = true;
        while (j < segment.size() && segment[j] != rt.ans_close) {
            if (vocab.is_control(segment[j])) {
                clean = false;
                if (segment[j] == rt.ans_open) break;
            }
            ++j;
        }
        if (j >= segment.size() || segment[j] != rt.ans_close) {
            ++scan.malformed;
            i = j;  // resume at the interrupting <ans> or the end
            continue;
        }
        if (!clean || j == i + 1)
            ++scan.malformed;
        else
            scan.spans.emplace_back(segment.begin() + i + 1, segment.begin() + j);
        i = j + 1;
    }
    return scan;
}

struct StepInfo {
    bool tool_call_turn = false;
    bool parse_ok = true;
    bool tool_executed = false;
    std::size_t calls_ignored = 0;
    std::optional<ParseErrorKind> parse_error;
};

struct StepOutcome {
    TokenSeq feedback_tokens;
    double process_reward = 0.0;
    double outcome_reward = 0.0;
    bool done = false;
    TerminationReason reason = TerminationReason::none;
    StepInfo info;
};

struct StopDecision {
    bool stop = false;
    TerminationReason reason = TerminationReason::none;
};

struct EnvState {
    int turn_count = 0;
    int total_tokens = 0;  // agent and feedback tokens; the prompt is not counted
    bool done = false;
    TerminationReason reason = TerminationReason::none;
    std::vector<TokenSeq> action_segments;  // one per completed turn
};

// Answer and EOS dominate; limits are checked after, turns before tokens.
inline StopDecision should_stop(const EnvState& env, const Limits& limits,
                                std::span<const TokenId> agent_output, const Vocabulary& vocab,
                                bool answer_counts = true) {
    if (answer_counts && !scan_answer_spans(agent_output, vocab).spans.empty())
        return {true, TerminationReason::answer_emitted};
    for (auto t : agent_output)
        if (t == vocab.reserved().eos) return {true, TerminationReason::eos};
    if (env.turn_count >= limits.max_turns) return {true, TerminationReason::max_turns};
    if (env.total_tokens >= limits.max_total_tokens) return {true, TerminationReason::max_tokens};
    return {};
}

// +rho for a parsed call that returned at least one fact, when enabled.
inline double process_reward(const EnvConfig& cfg, bool call_parsed, const ToolResult& result) {
    if (!cfg.process_reward_enabled) return 0.0;
    return (call_parsed && result.success && !result.payload.empty()) ? cfg.process_reward_value
                                                                      : 0.0;
}

// Scores a finished episode from its per-turn action segments.
using OutcomeScorer = std::function<double(std::span<const TokenSeq>)>;

class ToolEnv {
public:
    ToolEnv(const Vocabulary& vocab, ToolRegistry registry, EnvConfig cfg, OutcomeScorer scorer)
        : vocab_(&vocab), registry_(std::move(registry)), cfg_(cfg), scorer_(std::move(scorer)),
          rng_(cfg.seed) {
        cfg_.limits.validate();
    }

    const EnvState& state() const noexcept { return state_; }
    const EnvConfig& config() const noexcept { return cfg_; }
    const ToolRegistry& registry() const noexcept { return registry_; }
    const Vocabulary& vocabulary() const noexcept { return *vocab_; }

    StopDecision should_stop(std::span<const TokenId> agent_output) const {
        return turnrl::should_stop(state_, cfg_.limits, agent_output, *vocab_);
    }

    StepOutcome step(std::span<const TokenId> agent_output) {
        if (state_.done) throw ProtocolViolation("step called on a finished episode");
        if (agent_output.empty()) throw ProtocolViolation("agent output must be non-empty");
        for (auto t : agent_output) vocab_->check(t);

        StepOutcome out;
        state_.action_segments.emplace_back(agent_output.begin(), agent_output.end());

        const bool tool_turn =
            detect_tool_call_trigger(agent_output, vocab_->reserved()).has_value();
        if (tool_turn) {
            out.info.tool_call_turn = true;
            auto extracted = extract_tool_calls(agent_output, *vocab_, registry_);
            ToolResult result;
            bool parsed = false;
            if (auto* err = std::get_if<ParseError>(&extracted)) {
                out.info.parse_ok = false;
                out.info.parse_error = err->kind;
                result = ToolResult::failure(err->reason);
            } else {
                const auto& calls = std::get<std::vector<ToolCall>>(extracted);
                parsed = true;
                out.info.calls_ignored = calls.size() - 1;
                if (const Tool* tool = registry_.tool(calls.front().tool_name)) {
                    result = tool->execute(calls.front().arguments, rng_);
                    out.info.tool_executed = true;
                } else {
                    result = ToolResult::failure("tool has no implementation");
                }
            }
            out.feedback_tokens = format_tool_response(result, *vocab_);
            out.process_reward = process_reward(cfg_, parsed, result);
        }

        state_.turn_count += 1;
        state_.total_tokens += static_cast<int>(agent_output.size());
        EnvState tentative = state_;
        tentative.total_tokens += static_cast<int>(out.feedback_tokens.size());
        const StopDecision stop =
            turnrl::should_stop(tentative, cfg_.limits, agent_output, *vocab_, !tool_turn);
        if (stop.stop) {
            out.feedback_tokens.clear();
            state_.done = true;
            state_.reason = stop.reason;
            out.done = true;
            out.reason = stop.reason;
            out.outcome_reward = scorer_(state_.action_segments);
        } else {
            state_ = std::move(tentative);
        }
        return out;
    }

private:
    const Vocabulary* vocab_;
    ToolRegistry registry_;
    EnvConfig cfg_;
    OutcomeScorer scorer_;
    Rng rng_;
    EnvState state_;
};

} // namespace turnrl

#pragma once

// Token-level states, turns and trajectories of a multi-turn agent episode.
//
// An episode state is the prompt followed by completed turns (agent actions,
// then environment feedback) and the in-progress partial turn. Appending a
// sampled token is a deterministic generative transition; closing a turn
// with feedback is an environmental transition.

#include "turnrl/errors.hpp"
#include "turnrl/vocabulary.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace turnrl {

struct Turn {
    TokenSeq action_tokens;
    TokenSeq feedback_tokens;

    bool operator==(const Turn&) const = default;
};

struct AgentState {
    TokenSeq prompt;
    std::vector<Turn> completed_turns;
    TokenSeq partial;

    bool operator==(const AgentState&) const = default;
};

enum class TransitionKind : std::uint8_t { generative, environmental };

// Half-open token range [begin, end) of one trajectory segment.
struct Segment {
    std::size_t begin = 0;
    std::size_t end = 0;
    TransitionKind kind = TransitionKind::generative;
    bool is_prompt = false;

    std::size_t size() const noexcept { return end - begin; }
    bool operator==(const Segment&) const = default;
};

enum class TerminationReason : std::uint8_t {
    none,
    answer_emitted,
    eos,
    max_turns,
    max_tokens,
    parse_failure
};

inline const char* to_string(TerminationReason r) {
    switch (r) {
        case TerminationReason::none: return "none";
        case TerminationReason::answer_emitted: return "answer_emitted";
        case TerminationReason::eos: return "eos";
        case TerminationReason::max_turns: return "max_turns";
        case TerminationReason::max_tokens: return "max_tokens";
        case TerminationReason::parse_failure: return "parse_failure";
    }
    return "none";
}

inline TerminationReason termination_reason_from_string(const std::string& s) {
    for (auto r : {TerminationReason::none, TerminationReason::answer_emitted,
                   TerminationReason::eos, TerminationReason::max_turns,
                   TerminationReason::max_tokens, TerminationReason::parse_failure})
        if (s == to_string(r)) return r;
    throw FormatError("unknown termination reason '" + s + "'");
}

// Flat token sequence with parallel per-token arrays; the unit of learning.
struct Trajectory {
    TokenSeq tokens;
    std::vector<std::uint8_t> action_mask;
    std::vector<double> rewards;
    std::vector<double> old_logprobs;
    std::vector<double> values;
    bool terminated = false;
    TerminationReason termination_reason = TerminationReason::none;

    std::size_t size() const noexcept { return tokens.size(); }

    std::size_t action_count() const noexcept {
        std::size_t n = 0;
        for (auto m : action_mask) n += m;
        return n;
    }

    double total_reward() const noexcept {
        double s = 0.0;
        for (double r : rewards) s += r;
        return s;
    }

    bool operator==(const Trajectory&) const = default;
};

// Generative transition: s' = s ⊕ token. Pure.
inline AgentState append_action_token(const Vocabulary& vocab, const AgentState& state,
                                      TokenId token) {
    vocab.check(token);
    AgentState next = state;
    next.partial.push_back(token);
    return next;
}

// Environmental transition: closes the partial turn with the given feedback
// (possibly empty, e.g. a final answer turn).
inline AgentState append_environment_feedback(const AgentState& state, const TokenSeq& feedback) {
    if (state.partial.empty())
        throw ProtocolViolation("environment feedback requires a non-empty partial turn");
    AgentState next = state;
    next.completed_turns.push_back(Turn{std::move(next.partial), feedback});
    next.partial.clear();
    return next;
}

inline TokenSeq flatten(const AgentState& state) {
    TokenSeq out = state.prompt;
    for (const auto& turn : state.completed_turns) {
        out.insert(out.end(), turn.action_tokens.begin(), turn.action_tokens.end());
        out.insert(out.end(), turn.feedback_tokens.begin(), turn.feedback_tokens.end());
    }
    out.insert(out.end(), state.partial.begin(), state.partial.end());
    return out;
}

// Segment layout of a state, in flatten order. Empty segments are omitted.
inline std::vector<Segment> segment_layout(const AgentState& state) {
    std::vector<Segment> out;
    std::size_t pos = 0;
    auto push = [&](std::size_t n, TransitionKind kind, bool is_prompt) {
        if (n == 0) return;
        out.push_back(Segment{pos, pos + n, kind, is_prompt});
        pos += n;
    };
    push(state.prompt.size(), TransitionKind::environmental, true);
    for (const auto& turn : state.completed_turns) {
        push(turn.action_tokens.size(), TransitionKind::generative, false);
        push(turn.feedback_tokens.size(), TransitionKind::environmental, false);
    }
    push(state.partial.size(), TransitionKind::generative, false);
    return out;
}

// Mask is 1 exactly on agent-generated, non-prompt segments. Segments must
// tile [0, total_tokens) in order.
inline std::vector<std::uint8_t> compute_action_mask(std::span<const Segment> layout,
                                                     std::size_t total_tokens) {
    std::vector<std::uint8_t> mask;
    mask.reserve(total_tokens);
    std::size_t pos = 0;
    for (const auto& seg : layout) {
        if (seg.begin != pos)
            throw LayoutError(seg.begin < pos ? "overlapping segments" : "gap between segments");
        if (seg.end < seg.begin) throw LayoutError("segment ends before it begins");
        const std::uint8_t bit =
            (seg.kind == TransitionKind::generative && !seg.is_prompt) ? 1 : 0;
        mask.insert(mask.end(), seg.size(), bit);
        pos = seg.end;
    }
    if (pos != total_tokens) throw LayoutError("segments do not cover the token sequence");
    return mask;
}

// Throws FormatError describing the first violated invariant.
inline void validate(const Trajectory& t, std::size_t prompt_length = 0) {
    const std::size_t n = t.tokens.size();
    if (t.action_mask.size() != n || t.rewards.size() != n || t.old_logprobs.size() != n ||
        t.values.size() != n)
        throw FormatError("trajectory arrays differ in length");
    for (std::size_t i = 0; i < n; ++i) {
        if (t.action_mask[i] > 1) throw FormatError("mask entries must be 0 or 1");
        if (t.action_mask[i] == 0 && t.rewards[i] != 0.0)
            throw FormatError("reward placed at a non-action position");
        if (i < prompt_length && t.action_mask[i] != 0)
            throw FormatError("prompt position carries mask 1");
    }
}

// One JSON record per trajectory; field names are part of the dump format.
inline nlohmann::ordered_json to_json(const Trajectory& t, const Vocabulary& vocab) {
    nlohmann::ordered_json j;
    j["tokens"] = vocab.symbols_of(t.tokens);
    j["mask"] = t.action_mask;
    j["rewards"] = t.rewards;
    j["old_logprobs"] = t.old_logprobs;
    j["values"] = t.values;
    j["terminated"] = t.terminated;
    j["reason"] = to_string(t.termination_reason);
    return j;
}

inline std::string dump_line(const Trajectory& t, const Vocabulary& vocab) {
    return to_json(t, vocab).dump();
}

template <class Json>
inline Trajectory trajectory_from_json(const Json& j, const Vocabulary& vocab) {
    Trajectory t;
    t.tokens = vocab.encode(j.at("tokens").template get<std::vector<std::string>>());
    t.action_mask = j.at("mask").template get<std::vector<std::uint8_t>>();
    t.rewards = j.at("rewards").template get<std::vector<double>>();
    t.old_logprobs = j.at("old_logprobs").template get<std::vector<double>>();
    t.values = j.at("values").template get<std::vector<double>>();
    t.terminated = j.at("terminated").template get<bool>();
    t.termination_reason = termination_reason_from_string(j.at("reason").template get<std::string>());
    validate(t);
    return t;
}

} // namespace turnrl

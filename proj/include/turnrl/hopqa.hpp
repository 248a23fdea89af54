#pragma once

// Synthetic multi-hop retrieval task. A question [<ask>, r_k, ..., r_1, e_0]
// asks for the entity reached by following r_1..r_k from e_0 through a
// knowledge base that also holds distractor facts. The agent's only tool is
// `search(entity[, relation])`.

#include "turnrl/errors.hpp"
#include "turnrl/random.hpp"
#include "turnrl/tool_env.hpp"
#include "turnrl/tool_protocol.hpp"
#include "turnrl/vocabulary.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace turnrl::hopqa {

struct Fact {
    TokenId subject = 0;
    TokenId relation = 0;
    TokenId object = 0;

    bool operator==(const Fact&) const = default;
};

class KnowledgeBase {
public:
    KnowledgeBase() = default;
    explicit KnowledgeBase(std::vector<Fact> facts) {
        for (const auto& f : facts) add(f);
    }

    void add(const Fact& f) {
        by_pair_[{f.subject, f.relation}].push_back(facts_.size());
        by_subject_[f.subject].push_back(facts_.size());
        facts_.push_back(f);
    }

    const std::vector<Fact>& facts() const noexcept { return facts_; }

    bool contains_pair(TokenId subject, TokenId relation) const {
        return by_pair_.count({subject, relation}) != 0;
    }

    bool contains(const Fact& f) const {
        auto it = by_pair_.find({f.subject, f.relation});
        if (it == by_pair_.end()) return false;
        for (auto idx : it->second)
            if (facts_[idx].object == f.object) return true;
        return false;
    }

    // Matching facts in insertion order.
    std::vector<Fact> lookup(TokenId subject, std::optional<TokenId> relation = std::nullopt,
                             std::size_t k = SIZE_MAX) const {
        std::vector<Fact> out;
        const auto* ids = relation ? find_in(by_pair_, std::pair{subject, *relation})
                                   : find_in(by_subject_, subject);
        if (!ids) return out;
        for (auto idx : *ids) {
            if (out.size() >= k) break;
            out.push_back(facts_[idx]);
        }
        return out;
    }

    bool operator==(const KnowledgeBase& o) const { return facts_ == o.facts_; }

private:
    template <class Map, class Key>
    static const std::vector<std::size_t>* find_in(const Map& m, const Key& key) {
        auto it = m.find(key);
        return it == m.end() ? nullptr : &it->second;
    }

    std::vector<Fact> facts_;
    std::map<std::pair<TokenId, TokenId>, std::vector<std::size_t>> by_pair_;
    std::map<TokenId, std::vector<std::size_t>> by_subject_;
};

struct HopConfig {
    int hops = 1;
    int n_entities = 24;
    int n_relations = 12;
    int n_distractors = 8;
    double share_subject_prob = 0.5;  // distractor subject drawn from the gold chain
    int max_retries = 200;            // per distractor
};

struct Instance {
    TokenSeq question_tokens;
    TokenId gold_answer = 0;
    std::vector<Fact> chain;
    std::shared_ptr<const KnowledgeBase> kb;
    std::uint64_t seed = 0;
};

inline Instance generate_instance(std::uint64_t seed, const HopConfig& cfg, const Vocabulary& vocab) {
    if (cfg.hops < 1) throw GenerationError("hops must be at least 1");
    if (cfg.n_entities < cfg.hops + 1)
        throw GenerationError("need at least hops+1 entities for a chain of distinct entities");
    if (cfg.n_relations < cfg.hops)
        throw GenerationError("need at least as many relations as hops");
    const auto entities = vocab.tokens_of(TokenClass::entity);
    const auto relations = vocab.tokens_of(TokenClass::relation);
    if (entities.size() < static_cast<std::size_t>(cfg.n_entities) ||
        relations.size() < static_cast<std::size_t>(cfg.n_relations))
        throw GenerationError("vocabulary is smaller than the configured task");
    const auto ask = vocab.find("<ask>");
    if (!ask) throw GenerationError("vocabulary has no <ask> token");

    Rng rng(seed);
    auto pick_distinct = [&](const std::vector<TokenId>& pool, int n, int count) {
        std::vector<TokenId> bag(pool.begin(), pool.begin() + n);
        for (int i = 0; i < count; ++i) {
            auto j = i + rng.below(static_cast<std::uint64_t>(n - i));
            std::swap(bag[i], bag[j]);
        }
        bag.resize(count);
        return bag;
    };
    const auto chain_entities = pick_distinct(entities, cfg.n_entities, cfg.hops + 1);
    const auto chain_relations = pick_distinct(relations, cfg.n_relations, cfg.hops);

    Instance inst;
    inst.seed = seed;
    for (int k = 0; k < cfg.hops; ++k)
        inst.chain.push_back(Fact{chain_entities[k], chain_relations[k], chain_entities[k + 1]});
    inst.gold_answer = chain_entities.back();

    std::vector<Fact> facts = inst.chain;
    KnowledgeBase probe(facts);
    for (int d = 0; d < cfg.n_distractors; ++d) {
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
            Fact f;
            f.subject = rng.bernoulli(cfg.share_subject_prob)
                            ? chain_entities[rng.below(chain_entities.size())]
                            : entities[rng.below(cfg.n_entities)];
            f.relation = relations[rng.below(cfg.n_relations)];
            f.object = entities[rng.below(cfg.n_entities)];
            if (f.object == f.subject) continue;
            // a second fact on a gold (subject, relation) pair would make the
            // question ambiguous
            bool on_chain = false;
            for (const auto& c : inst.chain)
                on_chain = on_chain || (c.subject == f.subject && c.relation == f.relation);
            if (on_chain || probe.contains(f)) continue;
            probe.add(f);
            facts.push_back(f);
            placed = true;
        }
        if (!placed)
            throw GenerationError("could not place distractor " + std::to_string(d) + " after " +
                                  std::to_string(cfg.max_retries) + " attempts");
    }
    for (std::size_t i = facts.size(); i > 1; --i) std::swap(facts[i - 1], facts[rng.below(i)]);
    inst.kb = std::make_shared<const KnowledgeBase>(std::move(facts));

    inst.question_tokens.push_back(*ask);
    for (int k = cfg.hops - 1; k >= 0; --k) inst.question_tokens.push_back(chain_relations[k]);
    inst.question_tokens.push_back(chain_entities.front());
    return inst;
}

// Follows the chain from its first subject; returns the reached entity or
// nullopt if a hop is missing from the knowledge base.
inline std::optional<TokenId> walk_chain(const Instance& inst) {
    if (inst.chain.empty()) return std::nullopt;
    TokenId cur = inst.chain.front().subject;
    for (const auto& hop : inst.chain) {
        auto found = inst.kb->lookup(cur, hop.relation);
        if (found.size() != 1) return std::nullopt;
        cur = found.front().object;
    }
    return cur;
}

inline ToolSpec search_spec() {
    return ToolSpec{"search",
                    "Look up knowledge-base facts by subject entity, optionally narrowed by "
                    "relation. Returns up to k facts in insertion order.",
                    {ParamSpec{"entity", SemanticType::entity, true, "subject entity"},
                     ParamSpec{"relation", SemanticType::relation, false, "relation to follow"}}};
}

inline ToolResult search_tool(const KnowledgeBase& kb, std::span<const std::string> args,
                              std::size_t k, const Vocabulary& vocab) {
    if (k < 1) throw PreconditionError("search k must be at least 1");
    if (args.empty() || args.size() > 2) return ToolResult::failure("search takes 1 or 2 arguments");
    auto subject = vocab.find(args[0]);
    if (!subject || vocab.token_class(*subject) != TokenClass::entity)
        return ToolResult::failure("first argument must be an entity");
    std::optional<TokenId> relation;
    if (args.size() == 2) {
        relation = vocab.find(args[1]);
        if (!relation || vocab.token_class(*relation) != TokenClass::relation)
            return ToolResult::failure("second argument must be a relation");
    }
    ToolResult result;
    for (const auto& f : kb.lookup(*subject, relation, k))
        result.payload.push_back(
            FactRecord{vocab.symbol(f.subject), vocab.symbol(f.relation), vocab.symbol(f.object)});
    result.success = !result.payload.empty();
    if (!result.success) result.note = "no matching facts";
    return result;
}

class SearchTool final : public Tool {
public:
    SearchTool(std::shared_ptr<const KnowledgeBase> kb, const Vocabulary& vocab, std::size_t k = 5)
        : kb_(std::move(kb)), vocab_(&vocab), k_(k), spec_(search_spec()) {}

    const ToolSpec& spec() const override { return spec_; }

    ToolResult execute(const std::vector<std::string>& arguments, Rng&) const override {
        return search_tool(*kb_, arguments, k_, *vocab_);
    }

private:
    std::shared_ptr<const KnowledgeBase> kb_;
    const Vocabulary* vocab_;
    std::size_t k_;
    ToolSpec spec_;
};

inline int exact_match(std::span<const TokenId> pred, TokenId gold) {
    return (pred.size() == 1 && pred[0] == gold) ? 1 : 0;
}

struct RewardBreakdown {
    double format_answer = 0.0;
    double format_tool = 0.0;
    double format = 0.0;
    double answer = 0.0;
    double reward = 0.0;
};

// r_format_a: exactly one well-formed answer span and no broken answer
// markers. r_format_t: every tool span in every turn parses (1 if none).
// reward = EM when both hold, r_format - 1 otherwise.
inline RewardBreakdown outcome_breakdown(std::span<const TokenSeq> action_segments, TokenId gold,
                                         const Vocabulary& vocab, const ToolRegistry& registry) {
    RewardBreakdown b;
    std::size_t spans = 0, malformed = 0;
    std::optional<TokenSeq> answer;
    bool tools_ok = true;
    for (const auto& seg : action_segments) {
        auto scan = scan_answer_spans(seg, vocab);
        spans += scan.spans.size();
        malformed += scan.malformed;
        if (!answer && !scan.spans.empty()) answer = scan.spans.front();
        tools_ok = tools_ok && !is_parse_error(extract_tool_calls(seg, vocab, registry));
    }
    b.format_answer = (spans == 1 && malformed == 0) ? 1.0 : 0.0;
    b.format_tool = tools_ok ? 1.0 : 0.0;
    b.format = (b.format_answer + b.format_tool) / 2.0;
    b.answer = answer ? exact_match(*answer, gold) : 0.0;
    b.reward = b.format == 1.0 ? b.answer : b.format - 1.0;
    return b;
}

inline double outcome_reward(std::span<const TokenSeq> action_segments, TokenId gold,
                             const Vocabulary& vocab, const ToolRegistry& registry) {
    return outcome_breakdown(action_segments, gold, vocab, registry).reward;
}

// First well-formed answer span across the agent's turns.
inline std::optional<TokenSeq> extract_answer(std::span<const TokenSeq> action_segments,
                                              const Vocabulary& vocab) {
    for (const auto& seg : action_segments) {
        auto scan = scan_answer_spans(seg, vocab);
        if (!scan.spans.empty()) return scan.spans.front();
    }
    return std::nullopt;
}

inline ToolRegistry make_registry(const Instance& inst, const Vocabulary& vocab, std::size_t k = 5) {
    ToolRegistry reg;
    reg.add(std::make_shared<const SearchTool>(inst.kb, vocab, k));
    return reg;
}

inline ToolEnv make_env(const Instance& inst, const Vocabulary& vocab, EnvConfig cfg,
                        std::size_t k = 5) {
    auto registry = make_registry(inst, vocab, k);
    // the scorer keeps its own registry copy; specs are all it needs
    OutcomeScorer scorer = [reg = registry, gold = inst.gold_answer,
                            v = &vocab](std::span<const TokenSeq> segs) {
        return outcome_reward(segs, gold, *v, reg);
    };
    return ToolEnv(vocab, std::move(registry), cfg, std::move(scorer));
}

// Scripted agent that reads the question and observations from its context
// and walks the chain: one search per hop, then the answer. In format_only
// mode it still copies from the question, but every entity it would read
// from an observation is replaced by a uniformly random entity.
class ScriptedAgent {
public:
    enum class Mode { gold_chain, format_only };

    ScriptedAgent(const Vocabulary& vocab, Mode mode = Mode::gold_chain, int n_entities = -1)
        : vocab_(&vocab), mode_(mode), entities_(vocab.tokens_of(TokenClass::entity)),
          search_(vocab.id("search")) {
        if (n_entities >= 0 && static_cast<std::size_t>(n_entities) < entities_.size())
            entities_.resize(n_entities);
    }

    // Next token given the full episode context (prompt first).
    TokenId next(std::span<const TokenId> context, Rng& rng) const {
        const auto& rt = vocab_->reserved();
        std::vector<TokenId> relations;  // r_1 .. r_k
        std::size_t i = 1;
        while (i < context.size() && vocab_->token_class(context[i]) == TokenClass::relation)
            relations.push_back(context[i++]);
        if (i >= context.size()) return rt.eos;
        std::reverse(relations.begin(), relations.end());
        TokenId current = context[i++];
        std::size_t hop = 0;
        std::size_t turn_start = i;
        for (std::size_t p = i; p < context.size(); ++p) {
            if (context[p] != rt.obs_open) continue;
            std::size_t q = p + 1;
            while (q < context.size() && context[q] != rt.obs_close) ++q;
            if (q >= context.size()) break;
            if (hop < relations.size()) {
                for (std::size_t f = p + 1; f + 2 < q; f += 3) {
                    if (context[f] == current && context[f + 1] == relations[hop]) {
                        current = context[f + 2];
                        break;
                    }
                }
                ++hop;
            }
            turn_start = q + 1;
            p = q;
        }
        if (mode_ == Mode::format_only && hop > 0) current = entities_[rng.below(entities_.size())];
        const std::size_t offset = context.size() - turn_start;
        TokenSeq script;
        if (hop < relations.size())
            script = {rt.tool_open, search_, current, relations[hop], rt.tool_close};
        else
            script = {rt.ans_open, current, rt.ans_close};
        return offset < script.size() ? script[offset] : rt.eos;
    }

private:
    const Vocabulary* vocab_;
    Mode mode_;
    std::vector<TokenId> entities_;
    TokenId search_;
};

// JSON line: {question, gold, chain, facts, seed}, symbols as strings.
inline nlohmann::ordered_json to_json(const Instance& inst, const Vocabulary& vocab) {
    auto fact_json = [&](const Fact& f) {
        return nlohmann::ordered_json::array(
            {vocab.symbol(f.subject), vocab.symbol(f.relation), vocab.symbol(f.object)});
    };
    nlohmann::ordered_json j;
    j["question"] = vocab.symbols_of(inst.question_tokens);
    j["gold"] = vocab.symbol(inst.gold_answer);
    j["chain"] = nlohmann::ordered_json::array();
    for (const auto& f : inst.chain) j["chain"].push_back(fact_json(f));
    j["facts"] = nlohmann::ordered_json::array();
    for (const auto& f : inst.kb->facts()) j["facts"].push_back(fact_json(f));
    j["seed"] = inst.seed;
    return j;
}

template <class Json>
inline Instance instance_from_json(const Json& j, const Vocabulary& vocab) {
    auto fact = [&](const auto& a) {
        return Fact{vocab.id(a.at(0).template get<std::string>()),
                    vocab.id(a.at(1).template get<std::string>()),
                    vocab.id(a.at(2).template get<std::string>())};
    };
    Instance inst;
    inst.question_tokens = vocab.encode(j.at("question").template get<std::vector<std::string>>());
    inst.gold_answer = vocab.id(j.at("gold").template get<std::string>());
    for (const auto& f : j.at("chain")) inst.chain.push_back(fact(f));
    std::vector<Fact> facts;
    for (const auto& f : j.at("facts")) facts.push_back(fact(f));
    inst.kb = std::make_shared<const KnowledgeBase>(std::move(facts));
    inst.seed = j.at("seed").template get<std::uint64_t>();
    if (walk_chain(inst) != inst.gold_answer)
        throw FormatError("instance chain does not reach the gold answer");
    return inst;
}

} // namespace turnrl::hopqa

#pragma once

#include "turnrl/errors.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace turnrl {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

enum class TokenClass { control, entity, relation, tool_name, other };

struct ReservedTokens {
    TokenId pad = 0;
    TokenId eos = 1;
    TokenId tool_open = 2;
    TokenId tool_close = 3;
    TokenId obs_open = 4;
    TokenId obs_close = 5;
    TokenId ans_open = 6;
    TokenId ans_close = 7;
};

// Ordered set of atomic symbols. Immutable after construction.
class Vocabulary {
public:
    Vocabulary(std::vector<std::string> symbols, std::vector<TokenClass> classes,
               ReservedTokens reserved)
        : symbols_(std::move(symbols)), classes_(std::move(classes)), reserved_(reserved) {
        if (symbols_.size() != classes_.size())
            throw ConfigError("vocabulary symbols and classes differ in length");
        if (symbols_.size() < 8)
            throw ConfigError("vocabulary must hold at least the 8 reserved tokens");
        for (std::size_t i = 0; i < symbols_.size(); ++i) {
            if (!index_.emplace(symbols_[i], static_cast<TokenId>(i)).second)
                throw ConfigError("duplicate vocabulary symbol '" + symbols_[i] + "'");
        }
        const TokenId ids[] = {reserved_.pad,      reserved_.eos,       reserved_.tool_open,
                               reserved_.tool_close, reserved_.obs_open, reserved_.obs_close,
                               reserved_.ans_open, reserved_.ans_close};
        for (std::size_t i = 0; i < 8; ++i) {
            if (ids[i] >= symbols_.size())
                throw ConfigError("reserved token index out of range");
            for (std::size_t j = 0; j < i; ++j)
                if (ids[i] == ids[j]) throw ConfigError("reserved token indices collide");
            classes_[ids[i]] = TokenClass::control;
        }
    }

    // Layout used throughout the project: 8 control tokens, <ask>, tool
    // names, then entities e0.. and relations r0..
    static Vocabulary standard(std::size_t n_entities, std::size_t n_relations,
                               const std::vector<std::string>& tool_names = {"search"}) {
        std::vector<std::string> symbols = {"<pad>", "<eos>", "<tool>", "</tool>",
                                            "<obs>", "</obs>", "<ans>", "</ans>", "<ask>"};
        std::vector<TokenClass> classes(symbols.size(), TokenClass::control);
        classes.back() = TokenClass::other;
        for (const auto& name : tool_names) {
            symbols.push_back(name);
            classes.push_back(TokenClass::tool_name);
        }
        for (std::size_t i = 0; i < n_entities; ++i) {
            symbols.push_back("e" + std::to_string(i));
            classes.push_back(TokenClass::entity);
        }
        for (std::size_t i = 0; i < n_relations; ++i) {
            symbols.push_back("r" + std::to_string(i));
            classes.push_back(TokenClass::relation);
        }
        return Vocabulary(std::move(symbols), std::move(classes), ReservedTokens{});
    }

    std::size_t size() const noexcept { return symbols_.size(); }
    const ReservedTokens& reserved() const noexcept { return reserved_; }

    bool contains(TokenId id) const noexcept { return id < symbols_.size(); }

    void check(TokenId id) const {
        if (!contains(id))
            throw InvalidToken("token " + std::to_string(id) + " outside vocabulary of size " +
                               std::to_string(size()));
    }

    const std::string& symbol(TokenId id) const {
        check(id);
        return symbols_[id];
    }

    std::optional<TokenId> find(std::string_view sym) const {
        auto it = index_.find(std::string(sym));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    TokenId id(std::string_view sym) const {
        if (auto t = find(sym)) return *t;
        throw EncodingError("symbol '" + std::string(sym) + "' not in vocabulary");
    }

    TokenClass token_class(TokenId id) const {
        check(id);
        return classes_[id];
    }

    bool is_control(TokenId id) const { return token_class(id) == TokenClass::control; }

    std::vector<TokenId> tokens_of(TokenClass c) const {
        std::vector<TokenId> out;
        for (std::size_t i = 0; i < classes_.size(); ++i)
            if (classes_[i] == c) out.push_back(static_cast<TokenId>(i));
        return out;
    }

    std::vector<std::string> symbols_of(const TokenSeq& seq) const {
        std::vector<std::string> out;
        out.reserve(seq.size());
        for (auto t : seq) out.push_back(symbol(t));
        return out;
    }

    TokenSeq encode(const std::vector<std::string>& syms) const {
        TokenSeq out;
        out.reserve(syms.size());
        for (const auto& s : syms) out.push_back(id(s));
        return out;
    }

private:
    std::vector<std::string> symbols_;
    std::vector<TokenClass> classes_;
    ReservedTokens reserved_;
    std::unordered_map<std::string, TokenId> index_;
};

} // namespace turnrl

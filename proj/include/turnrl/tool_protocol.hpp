#pragma once

// Tool metadata and the token-level tool-call wire format.
//
//   call:        <tool> name arg* </tool>
//   observation: <obs> (subject relation object)* </obs>
//
// Malformed calls are reported as ParseError values, never thrown.

#include "turnrl/errors.hpp"
#include "turnrl/random.hpp"
#include "turnrl/vocabulary.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace turnrl {

enum class SemanticType { entity, relation, free_token };

inline const char* to_string(SemanticType t) {
    switch (t) {
        case SemanticType::entity: return "entity";
        case SemanticType::relation: return "relation";
        case SemanticType::free_token: return "free_token";
    }
    return "free_token";
}

inline SemanticType semantic_type_from_string(const std::string& s) {
    if (s == "entity") return SemanticType::entity;
    if (s == "relation") return SemanticType::relation;
    if (s == "free_token") return SemanticType::free_token;
    throw RegistryError("unknown semantic type '" + s + "'");
}

struct ParamSpec {
    std::string name;
    SemanticType type = SemanticType::free_token;
    bool required = true;
    std::string description;

    bool operator==(const ParamSpec&) const = default;
};

struct ToolSpec {
    std::string name;
    std::string description;
    std::vector<ParamSpec> parameters;

    std::size_t required_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters) n += p.required ? 1 : 0;
        return n;
    }

    // JSON Schema object describing the parameters.
    nlohmann::ordered_json parameter_schema() const {
        nlohmann::ordered_json props = nlohmann::ordered_json::object();
        nlohmann::ordered_json required = nlohmann::ordered_json::array();
        for (const auto& p : parameters) {
            nlohmann::ordered_json prop;
            prop["type"] = "string";
            prop["x-semantic-type"] = to_string(p.type);
            if (!p.description.empty()) prop["description"] = p.description;
            props[p.name] = prop;
            if (p.required) required.push_back(p.name);
        }
        nlohmann::ordered_json schema;
        schema["type"] = "object";
        schema["properties"] = props;
        schema["required"] = required;
        return schema;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["name"] = name;
        j["description"] = description;
        j["parameters"] = parameter_schema();
        return j;
    }

    template <class Json>
    static ToolSpec from_json(const Json& j) {
        ToolSpec spec;
        spec.name = j.at("name").template get<std::string>();
        spec.description = j.value("description", std::string{});
        const auto& params = j.at("parameters");
        if (params.value("type", std::string{"object"}) != "object")
            throw RegistryError("tool '" + spec.name + "': parameters must be an object schema");
        std::vector<std::string> required;
        if (params.contains("required"))
            required = params.at("required").template get<std::vector<std::string>>();
        if (params.contains("properties")) {
            for (const auto& [pname, prop] : params.at("properties").items()) {
                ParamSpec p;
                p.name = pname;
                p.type = semantic_type_from_string(
                    prop.value("x-semantic-type", std::string{"free_token"}));
                p.description = prop.value("description", std::string{});
                p.required = std::find(required.begin(), required.end(), pname) != required.end();
                spec.parameters.push_back(std::move(p));
            }
        }
        for (const auto& r : required) {
            bool found = false;
            for (const auto& p : spec.parameters) found = found || p.name == r;
            if (!found)
                throw RegistryError("tool '" + spec.name + "': required parameter '" + r +
                                    "' has no property");
        }
        spec.validate();
        return spec;
    }

    void validate() const {
        if (name.empty()) throw RegistryError("tool name must be non-empty");
        for (std::size_t i = 0; i < parameters.size(); ++i)
            for (std::size_t j = 0; j < i; ++j)
                if (parameters[i].name == parameters[j].name)
                    throw RegistryError("tool '" + name + "': duplicate parameter '" +
                                        parameters[i].name + "'");
    }

    bool operator==(const ToolSpec&) const = default;
};

struct ToolCall {
    std::string tool_name;
    std::vector<std::string> arguments;

    bool operator==(const ToolCall&) const = default;
};

struct FactRecord {
    std::string subject;
    std::string relation;
    std::string object;

    bool operator==(const FactRecord&) const = default;
};

// Raw execution outcome. A failed call carries no payload.
struct ToolResult {
    std::vector<FactRecord> payload;
    bool success = false;
    std::string note;

    static ToolResult failure(std::string note) { return ToolResult{{}, false, std::move(note)}; }

    bool operator==(const ToolResult&) const = default;
};

class Tool {
public:
    virtual ~Tool() = default;
    virtual const ToolSpec& spec() const = 0;
    // rng carries any environment stochasticity; deterministic tools ignore it.
    virtual ToolResult execute(const std::vector<std::string>& arguments, Rng& rng) const = 0;
};

// Name-unique set of tool specs, optionally bound to implementations.
class ToolRegistry {
public:
    ToolRegistry() = default;

    void add(ToolSpec spec) {
        spec.validate();
        if (find(spec.name)) throw RegistryError("duplicate tool name '" + spec.name + "'");
        specs_.push_back(std::move(spec));
    }

    void add(std::shared_ptr<const Tool> tool) {
        add(tool->spec());
        tools_[tool->spec().name] = std::move(tool);
    }

    const ToolSpec* find(const std::string& name) const {
        for (const auto& s : specs_)
            if (s.name == name) return &s;
        return nullptr;
    }

    const Tool* tool(const std::string& name) const {
        auto it = tools_.find(name);
        return it == tools_.end() ? nullptr : it->second.get();
    }

    const std::vector<ToolSpec>& specs() const noexcept { return specs_; }
    bool empty() const noexcept { return specs_.empty(); }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j = nlohmann::ordered_json::array();
        for (const auto& s : specs_) j.push_back(s.to_json());
        return j;
    }

    template <class Json>
    static ToolRegistry from_json(const Json& j) {
        if (!j.is_array()) throw RegistryError("tool registry config must be a JSON array");
        ToolRegistry reg;
        for (const auto& item : j) reg.add(ToolSpec::from_json(item));
        return reg;
    }

private:
    std::vector<ToolSpec> specs_;
    std::map<std::string, std::shared_ptr<const Tool>> tools_;
};

enum class ParseErrorKind { unmatched_open, unmatched_close, nested_open, empty_span, unknown_tool, arity };

inline const char* to_string(ParseErrorKind k) {
    switch (k) {
        case ParseErrorKind::unmatched_open: return "unmatched_open";
        case ParseErrorKind::unmatched_close: return "unmatched_close";
        case ParseErrorKind::nested_open: return "nested_open";
        case ParseErrorKind::empty_span: return "empty_span";
        case ParseErrorKind::unknown_tool: return "unknown_tool";
        case ParseErrorKind::arity: return "arity";
    }
    return "unknown";
}

struct ParseError {
    ParseErrorKind kind;
    std::size_t span_begin = 0;  // offending span [begin, end) within the segment
    std::size_t span_end = 0;
    std::string reason;
};

using ExtractResult = std::variant<std::vector<ToolCall>, ParseError>;

inline bool is_parse_error(const ExtractResult& r) { return std::holds_alternative<ParseError>(r); }

// Index of the first </tool> closing an open <tool> with no </tool> in
// between; nullopt when no complete call is present.
inline std::optional<std::size_t> detect_tool_call_trigger(std::span<const TokenId> stream,
                                                           const ReservedTokens& rt) {
    bool open = false;
    for (std::size_t i = 0; i < stream.size(); ++i) {
        if (stream[i] == rt.tool_open) {
            open = true;
        } else if (stream[i] == rt.tool_close) {
            if (open) return i;
        }
    }
    return std::nullopt;
}

inline ExtractResult extract_tool_calls(std::span<const TokenId> segment, const Vocabulary& vocab,
                                        const ToolRegistry& registry) {
    const auto& rt = vocab.reserved();
    std::vector<ToolCall> calls;
    std::size_t i = 0;
    while (i < segment.size()) {
        if (segment[i] == rt.tool_close)
            return ParseError{ParseErrorKind::unmatched_close, i, i + 1,
                              "</tool> without a preceding <tool>"};
        if (segment[i] != rt.tool_open) {
            ++i;
            continue;
        }
        std::size_t j = i + 1;
        while (j < segment.size() && segment[j] != rt.tool_close) {
            if (segment[j] == rt.tool_open)
                return ParseError{ParseErrorKind::nested_open, i, j + 1,
                                  "<tool> opened inside an unterminated call"};
            ++j;
        }
        if (j == segment.size())
            return ParseError{ParseErrorKind::unmatched_open, i, j, "<tool> is never closed"};
        if (j == i + 1)
            return ParseError{ParseErrorKind::empty_span, i, j + 1, "call span is empty"};
        const std::string& name = vocab.symbol(segment[i + 1]);
        const ToolSpec* spec = registry.find(name);
        if (!spec)
            return ParseError{ParseErrorKind::unknown_tool, i, j + 1,
                              "no registered tool named '" + name + "'"};
        ToolCall call{name, {}};
        for (std::size_t k = i + 2; k < j; ++k) call.arguments.push_back(vocab.symbol(segment[k]));
        if (call.arguments.size() < spec->required_count() ||
            call.arguments.size() > spec->parameters.size())
            return ParseError{ParseErrorKind::arity, i, j + 1,
                              "tool '" + name + "' takes " + std::to_string(spec->required_count()) +
                                  ".." + std::to_string(spec->parameters.size()) + " arguments, got " +
                                  std::to_string(call.arguments.size())};
        calls.push_back(std::move(call));
        i = j + 1;
    }
    return calls;
}

inline TokenSeq wrap(const ToolCall& call, const Vocabulary& vocab) {
    TokenSeq out{vocab.reserved().tool_open, vocab.id(call.tool_name)};
    for (const auto& a : call.arguments) out.push_back(vocab.id(a));
    out.push_back(vocab.reserved().tool_close);
    return out;
}

inline TokenSeq format_tool_response(const ToolResult& result, const Vocabulary& vocab) {
    TokenSeq out{vocab.reserved().obs_open};
    if (result.success) {
        for (const auto& f : result.payload) {
            out.push_back(vocab.id(f.subject));
            out.push_back(vocab.id(f.relation));
            out.push_back(vocab.id(f.object));
        }
    }
    out.push_back(vocab.reserved().obs_close);
    return out;
}

inline std::string render_tool_manifest(std::span<const ToolSpec> specs) {
    if (specs.empty()) throw RegistryError("cannot render an empty tool manifest");
    for (std::size_t i = 0; i < specs.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (specs[i].name == specs[j].name)
                throw RegistryError("duplicate tool name '" + specs[i].name + "'");
    std::string out;
    for (const auto& s : specs) {
        out += "## tool: " + s.name + "\n";
        out += "description: " + s.description + "\n";
        out += "parameters:\n" + s.parameter_schema().dump(2) + "\n\n";
    }
    return out;
}

} // namespace turnrl

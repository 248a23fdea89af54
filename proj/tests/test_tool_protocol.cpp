#include "turnrl/hopqa.hpp"
#include "turnrl/tool_protocol.hpp"

#include <gtest/gtest.h>

using namespace turnrl;

namespace {

const Vocabulary& vocab() {
    static const Vocabulary v = Vocabulary::standard(10, 4, {"search", "lookup"});
    return v;
}

TokenId tok(const char* s) { return vocab().id(s); }

ToolRegistry search_only() {
    ToolRegistry r;
    r.add(hopqa::search_spec());
    return r;
}

ParseErrorKind kind_of(const ExtractResult& r) { return std::get<ParseError>(r).kind; }

} // namespace

TEST(Trigger, FirstClosedCall) {
    const auto& rt = vocab().reserved();
    TokenSeq s{tok("e0"), rt.tool_open, tok("search"), tok("e1"), rt.tool_close, tok("e2")};
    EXPECT_EQ(detect_tool_call_trigger(s, rt), std::optional<std::size_t>(4));
    EXPECT_FALSE(detect_tool_call_trigger(TokenSeq{tok("e0"), tok("e1"), tok("e2")}, rt));
    EXPECT_FALSE(detect_tool_call_trigger(TokenSeq{rt.tool_open, tok("search")}, rt));
    EXPECT_FALSE(detect_tool_call_trigger(TokenSeq{rt.tool_close, tok("e1")}, rt));
}

TEST(Extract, WellFormedCall) {
    const auto& rt = vocab().reserved();
    TokenSeq s{rt.tool_open, tok("search"), tok("e3"), tok("r1"), rt.tool_close};
    auto r = extract_tool_calls(s, vocab(), search_only());
    ASSERT_FALSE(is_parse_error(r));
    const auto& calls = std::get<std::vector<ToolCall>>(r);
    ASSERT_EQ(calls.size(), 1u);
    EXPECT_EQ(calls[0], (ToolCall{"search", {"e3", "r1"}}));
}

TEST(Extract, NoMarkersGivesEmptyList) {
    auto r = extract_tool_calls(TokenSeq{tok("e1"), tok("e2")}, vocab(), search_only());
    ASSERT_FALSE(is_parse_error(r));
    EXPECT_TRUE(std::get<std::vector<ToolCall>>(r).empty());
}

TEST(Extract, MalformedSpanKinds) {
    const auto& rt = vocab().reserved();
    auto reg = search_only();
    EXPECT_EQ(kind_of(extract_tool_calls(TokenSeq{rt.tool_open, rt.tool_close}, vocab(), reg)),
              ParseErrorKind::empty_span);
    EXPECT_EQ(kind_of(extract_tool_calls(TokenSeq{rt.tool_open, tok("lookup"), tok("e1"), rt.tool_close},
                                         vocab(), reg)),
              ParseErrorKind::unknown_tool);
    EXPECT_EQ(kind_of(extract_tool_calls(TokenSeq{rt.tool_open, tok("search"), tok("e1")}, vocab(), reg)),
              ParseErrorKind::unmatched_open);
    EXPECT_EQ(kind_of(extract_tool_calls(TokenSeq{tok("e1"), rt.tool_close}, vocab(), reg)),
              ParseErrorKind::unmatched_close);
    EXPECT_EQ(kind_of(extract_tool_calls(TokenSeq{rt.tool_open, tok("search"), rt.tool_open, tok("e1"),
                                                  rt.tool_close},
                                         vocab(), reg)),
              ParseErrorKind::nested_open);
    EXPECT_EQ(kind_of(extract_tool_calls(TokenSeq{rt.tool_open, tok("search"), rt.tool_close}, vocab(), reg)),
              ParseErrorKind::arity);
    EXPECT_EQ(kind_of(extract_tool_calls(TokenSeq{rt.tool_open, tok("search"), tok("e1"), tok("r1"),
                                                  tok("r2"), rt.tool_close},
                                         vocab(), reg)),
              ParseErrorKind::arity);
}

TEST(Extract, ErrorCarriesSpan) {
    const auto& rt = vocab().reserved();
    TokenSeq s{tok("e0"), rt.tool_open, rt.tool_close};
    auto err = std::get<ParseError>(extract_tool_calls(s, vocab(), search_only()));
    EXPECT_EQ(err.span_begin, 1u);
    EXPECT_EQ(err.span_end, 3u);
    EXPECT_FALSE(err.reason.empty());
}

TEST(Extract, MultipleCallsInOrder) {
    const auto& rt = vocab().reserved();
    TokenSeq s{rt.tool_open, tok("search"), tok("e1"), rt.tool_close,
               rt.tool_open, tok("search"), tok("e2"), tok("r0"), rt.tool_close};
    auto calls = std::get<std::vector<ToolCall>>(extract_tool_calls(s, vocab(), search_only()));
    ASSERT_EQ(calls.size(), 2u);
    EXPECT_EQ(calls[0].arguments, (std::vector<std::string>{"e1"}));
    EXPECT_EQ(calls[1].arguments, (std::vector<std::string>{"e2", "r0"}));
}

TEST(Extract, TriggerAgreement) {
    // a trigger position always yields calls or an error on the prefix
    Rng rng(11);
    const auto& rt = vocab().reserved();
    auto reg = search_only();
    for (int n = 0; n < 2000; ++n) {
        TokenSeq s;
        const auto len = 1 + rng.below(8);
        for (std::uint64_t i = 0; i < len; ++i) s.push_back(static_cast<TokenId>(rng.below(vocab().size())));
        auto pos = detect_tool_call_trigger(s, rt);
        if (!pos) continue;
        std::span<const TokenId> prefix(s.data(), *pos + 1);
        auto r = extract_tool_calls(prefix, vocab(), reg);
        EXPECT_TRUE(is_parse_error(r) || !std::get<std::vector<ToolCall>>(r).empty());
    }
}

TEST(Codec, WrapExtractRoundTrip) {
    Rng rng(3);
    auto reg = search_only();
    const auto ents = vocab().tokens_of(TokenClass::entity);
    const auto rels = vocab().tokens_of(TokenClass::relation);
    for (int n = 0; n < 500; ++n) {
        ToolCall c{"search", {vocab().symbol(ents[rng.below(ents.size())])}};
        if (rng.bernoulli(0.5)) c.arguments.push_back(vocab().symbol(rels[rng.below(rels.size())]));
        auto calls = std::get<std::vector<ToolCall>>(extract_tool_calls(wrap(c, vocab()), vocab(), reg));
        ASSERT_EQ(calls.size(), 1u);
        EXPECT_EQ(calls[0], c);
    }
}

TEST(FormatResponse, Facts) {
    const auto& rt = vocab().reserved();
    ToolResult one{{FactRecord{"e1", "r1", "e2"}}, true, ""};
    EXPECT_EQ(format_tool_response(one, vocab()),
              (TokenSeq{rt.obs_open, tok("e1"), tok("r1"), tok("e2"), rt.obs_close}));
    ToolResult two{{FactRecord{"e1", "r1", "e2"}, FactRecord{"e3", "r0", "e4"}}, true, ""};
    EXPECT_EQ(format_tool_response(two, vocab()),
              (TokenSeq{rt.obs_open, tok("e1"), tok("r1"), tok("e2"), tok("e3"), tok("r0"), tok("e4"),
                        rt.obs_close}));
    EXPECT_EQ(format_tool_response(ToolResult::failure("x"), vocab()), (TokenSeq{rt.obs_open, rt.obs_close}));
    ToolResult bad{{FactRecord{"e1", "r1", "zz"}}, true, ""};
    EXPECT_THROW(format_tool_response(bad, vocab()), EncodingError);
}

TEST(Manifest, SingleBlockDeterministic) {
    std::vector<ToolSpec> specs{hopqa::search_spec()};
    const auto a = render_tool_manifest(specs);
    const auto b = render_tool_manifest(specs);
    EXPECT_EQ(a, b);
    std::size_t blocks = 0;
    for (std::size_t p = a.find("## tool:"); p != std::string::npos; p = a.find("## tool:", p + 1)) ++blocks;
    EXPECT_EQ(blocks, 1u);
    EXPECT_NE(a.find("## tool: search"), std::string::npos);
    EXPECT_NE(a.find("\"required\""), std::string::npos);
}

TEST(Manifest, Errors) {
    EXPECT_THROW(render_tool_manifest(std::vector<ToolSpec>{}), RegistryError);
    std::vector<ToolSpec> dup{hopqa::search_spec(), hopqa::search_spec()};
    EXPECT_THROW(render_tool_manifest(dup), RegistryError);
}

TEST(Registry, DuplicatesAndJson) {
    ToolRegistry r;
    r.add(hopqa::search_spec());
    EXPECT_THROW(r.add(hopqa::search_spec()), RegistryError);
    ToolSpec dup_param{"lookup", "d", {ParamSpec{"a", SemanticType::entity, true, ""},
                                       ParamSpec{"a", SemanticType::relation, false, ""}}};
    EXPECT_THROW(r.add(dup_param), RegistryError);

    auto j = r.to_json();
    ASSERT_EQ(j.size(), 1u);
    EXPECT_EQ(j[0]["parameters"]["type"], "object");
    EXPECT_EQ(j[0]["parameters"]["required"].dump(), R"(["entity"])");
    auto back = ToolRegistry::from_json(j);
    ASSERT_EQ(back.specs().size(), 1u);
    EXPECT_EQ(back.specs()[0], hopqa::search_spec());
}

#include <gtest/gtest.h>

#include "support.hpp"

using namespace orchestra;
using namespace testsupport;

TEST(Prompts, AnnotationPromptCarriesRubricAndContext) {
    auto cb = table_codebook();
    auto t = session("s", "TSTST");
    auto prompt = render_annotation_prompt(cb, build_context(t, 4));
    for (const auto& c : cb.categories()) {
        EXPECT_EQ(util::count_occurrences(prompt, "- " + c.name + ": "), 1u) << c.name;
        EXPECT_NE(prompt.find(c.definition), std::string::npos) << c.name;
    }
    EXPECT_NE(prompt.find("Focal tutor utterance (turn 4): \"tutor 4\""), std::string::npos);
    EXPECT_NE(prompt.find("Preceding student turn (turn 3): \"student 3\""), std::string::npos);
    EXPECT_NE(prompt.find("Tutor's prior turn (turn 2): \"tutor 2\""), std::string::npos);
    EXPECT_NE(prompt.find("Examples: \"Great job\"; \"Nice approach\""), std::string::npos);
    EXPECT_EQ(prompt.find("{{"), std::string::npos);
}

TEST(Prompts, MissingContextLeavesNoPlaceholderLine) {
    auto cb = small_codebook();
    auto prompt = render_annotation_prompt(cb, build_context(session("s", "TS"), 0));
    EXPECT_EQ(prompt.find("Preceding student turn"), std::string::npos);
    EXPECT_EQ(prompt.find("prior turn"), std::string::npos);
    EXPECT_EQ(prompt.find("{{"), std::string::npos);
}

TEST(Prompts, VerificationPromptShowsInitialLabelAndRationale) {
    auto cb = small_codebook();
    auto ctx = build_context(session("s", "STT"), 2);
    auto p = render_verification_prompt(cb, ctx, cb.require("B"), "  because B  ");
    EXPECT_NE(p.find("Initial label: B"), std::string::npos);
    EXPECT_NE(p.find("Annotator rationale: because B"), std::string::npos);
    auto none = render_verification_prompt(cb, ctx, Label::unparseable(), "");
    EXPECT_NE(none.find("Initial label: UNPARSEABLE"), std::string::npos);
    EXPECT_NE(none.find("(none given)"), std::string::npos);
}

TEST(Prompts, StudentFocalIsAContractViolation) {
    auto cb = small_codebook();
    AnnotationContext ctx{{"s", 0, Speaker::Student, "hi"}, std::nullopt, std::nullopt};
    EXPECT_THROW(render_annotation_prompt(cb, ctx), ContractError);
}

TEST(Prompts, ShippedTemplateFilesMatchBuiltIns) {
    const std::string dir = std::string(ORCHESTRA_DATA_DIR) + "/templates/";
    auto a = PromptTemplate::load(dir + "annotation_v1.txt");
    auto v = PromptTemplate::load(dir + "verification_v1.txt");
    auto d = PromptTemplates::defaults();
    EXPECT_EQ(a.version, d.annotation.version);
    EXPECT_EQ(a.body, d.annotation.body);
    EXPECT_EQ(v.version, d.verification.version);
    EXPECT_EQ(v.body, d.verification.body);
}

TEST(Prompts, TemplateHeaderIsRequired) {
    EXPECT_THROW(PromptTemplate::parse("no header\nbody"), ParseError);
    auto t = PromptTemplate::parse("version: x/2\n---\nbody {{FOCAL}}\n");
    EXPECT_EQ(t.version, "x/2");
    EXPECT_EQ(t.body, "body {{FOCAL}}\n");
}

TEST(ResponseParsing, AnnotationAcceptsFormattingNoise) {
    auto cb = table_codebook();
    auto r = parse_annotation_response("**Label:** giving praise\nJustification: tied to effort.", cb);
    EXPECT_EQ(r.label.name(), "GIVING PRAISE");
    EXPECT_EQ(r.justification, "tied to effort.");
    EXPECT_EQ(parse_annotation_response("- LABEL: Prompting.", cb).label.name(), "PROMPTING");
}

TEST(ResponseParsing, AnnotationIsTotal) {
    auto cb = table_codebook();
    EXPECT_TRUE(parse_annotation_response("", cb).label.is_unparseable());
    EXPECT_TRUE(parse_annotation_response("LABEL: DANCING", cb).label.is_unparseable());
    EXPECT_TRUE(parse_annotation_response("LABEL: UNPARSEABLE", cb).label.is_unparseable());
    std::mt19937_64 rng(1);
    for (int i = 0; i < 2000; ++i) {
        std::string junk;
        for (std::size_t j = 0, n = rng() % 80; j < n; ++j) junk += static_cast<char>(rng() % 256);
        if (i % 3 == 0) junk = "LABEL:" + junk;
        EXPECT_NO_THROW(parse_annotation_response(junk, cb));
    }
}

TEST(ResponseParsing, VerificationDecisionSpace) {
    auto cb = small_codebook();
    const auto a = cb.require("A");
    auto keep = parse_verification_response("DECISION: RETAIN\nLABEL: C\nJUSTIFICATION: fits", cb, a);
    EXPECT_EQ(keep.decision, Decision::Retain);
    EXPECT_EQ(keep.final_label, a);
    EXPECT_FALSE(keep.flagged);

    auto change = parse_verification_response("Decision: revised\nLabel: b\n", cb, a);
    EXPECT_EQ(change.decision, Decision::Revise);
    EXPECT_EQ(change.final_label.name(), "B");

    for (const char* bad : {"", "DECISION: MAYBE", "DECISION: REVISE", "DECISION: REVISE\nLABEL: Q",
                            "DECISION: REVISE\nLABEL: A"}) {
        auto r = parse_verification_response(bad, cb, a);
        EXPECT_EQ(r.decision, Decision::Retain) << bad;
        EXPECT_EQ(r.final_label, a) << bad;
        EXPECT_TRUE(r.flagged) << bad;
    }
}

#include <gtest/gtest.h>

#include "banet/audit.hpp"
#include "banet/train.hpp"
#include "support/cli.hpp"
#include "support/schema.hpp"

using namespace banet;
using banet::testing::csv_document;
using banet::testing::load_json;
using banet::testing::run_cli;
using banet::testing::schema_path;
using banet::testing::validate;

namespace {

const nlohmann::json& audit_schema() {
    static const auto s = load_json(schema_path("audit_report.schema.json"));
    return s;
}

const nlohmann::json& cka_schema() {
    static const auto s = load_json(schema_path("cka_matrix.schema.json"));
    return s;
}

std::string joined(const std::vector<std::string>& errors) {
    std::string s;
    for (const auto& e : errors) s += e + "\n";
    return s;
}

void expect_rectangular(const nlohmann::json& doc) {
    for (const auto& row : doc["rows"]) EXPECT_EQ(row.size(), doc["header"].size());
}

}  // namespace

TEST(AuditSchema, EveryReferenceCellValidates) {
    const auto refs = audit::load_reference_table(audit::default_reference_path());
    for (const auto& cell : refs) {
        const auto report = audit::audit_report(audit::build_arch(cell.backbone, parse_attention_kind(cell.variant)), refs);
        const nlohmann::json j = audit::to_json(report);
        EXPECT_TRUE(validate(j, audit_schema()).empty()) << joined(validate(j, audit_schema()));
        EXPECT_EQ(j["status"]["params"], "PASS");
    }
}

TEST(AuditSchema, CellWithoutReferenceValidates) {
    const auto refs = audit::load_reference_table(audit::default_reference_path());
    const nlohmann::json j = audit::to_json(audit::audit_report(audit::build_arch("resnet18", AttentionKind::bav1), refs));
    EXPECT_TRUE(validate(j, audit_schema()).empty()) << joined(validate(j, audit_schema()));
    EXPECT_TRUE(j["delta_pct"].is_null());
    EXPECT_EQ(j["status"]["flops"], "NO_REFERENCE");
}

TEST(AuditSchema, CliOutputValidates) {
    const auto r = run_cli("audit --arch resnet101 --attn se");
    ASSERT_EQ(r.code, 0);
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_TRUE(validate(j, audit_schema()).empty()) << joined(validate(j, audit_schema()));
}

TEST(AuditSchema, CorruptedReportsAreRejected) {
    const auto refs = audit::load_reference_table(audit::default_reference_path());
    const nlohmann::json good = audit::to_json(audit::audit_report(audit::build_arch("resnet50", AttentionKind::se), refs));

    auto bad = good;
    bad.erase("flops_total");
    EXPECT_FALSE(validate(bad, audit_schema()).empty());
    bad = good;
    bad["params_total"] = -1;
    EXPECT_FALSE(validate(bad, audit_schema()).empty());
    bad = good;
    bad["attention"] = "cbam";
    EXPECT_FALSE(validate(bad, audit_schema()).empty());
    bad = good;
    bad["per_stage"][0]["name"] = "layer5";
    EXPECT_FALSE(validate(bad, audit_schema()).empty());
    bad = good;
    bad["status"]["params"] = "OK";
    EXPECT_FALSE(validate(bad, audit_schema()).empty());
    bad = good;
    bad["extra"] = 1;
    EXPECT_FALSE(validate(bad, audit_schema()).empty());
}

TEST(CkaSchema, LibraryCsvValidates) {
    TrainConfig cfg;
    cfg.synth_samples = 64;
    const Dataset data = load_dataset(cfg);
    for (AttentionKind kind : {AttentionKind::bav1, AttentionKind::bav2}) {
        ModelConfig mc = cfg.model;
        mc.attention = kind;
        auto model = make_model<double>(mc);
        const auto doc = csv_document(importance_matrix(*model, data, 64).to_csv());
        EXPECT_TRUE(validate(doc, cka_schema()).empty()) << joined(validate(doc, cka_schema()));
        expect_rectangular(doc);
    }
}

TEST(CkaSchema, ShortRowsUseEmptyCells) {
    cka::CkaMatrix m{{"B1", "B2"}, {"S1", "S2", "S3"}, {{0.5, 0.25}, {1.0, 0.0, 0.125}}};
    const auto doc = csv_document(m.to_csv());
    EXPECT_TRUE(validate(doc, cka_schema()).empty()) << joined(validate(doc, cka_schema()));
    EXPECT_TRUE(doc["rows"][0][3].is_null());
    expect_rectangular(doc);
}

TEST(CkaSchema, CliOutputValidates) {
    const auto r = run_cli("cka --model toy3 --attn bav2 --samples 32");
    ASSERT_EQ(r.code, 0);
    const auto doc = csv_document(r.out);
    EXPECT_TRUE(validate(doc, cka_schema()).empty()) << joined(validate(doc, cka_schema()));
    EXPECT_EQ(doc["rows"].size(), 3u);
    expect_rectangular(doc);
}

TEST(CkaSchema, CorruptedCsvIsRejected) {
    EXPECT_FALSE(validate(csv_document("block,S1\nB1,1.5\n"), cka_schema()).empty());
    EXPECT_FALSE(validate(csv_document("blocks,S1\nB1,0.5\n"), cka_schema()).empty());
    EXPECT_FALSE(validate(csv_document("block,S1\nX1,0.5\n"), cka_schema()).empty());
    EXPECT_FALSE(validate(csv_document("block,S1\nB1,high\n"), cka_schema()).empty());
    EXPECT_FALSE(validate(csv_document("block\nB1\n"), cka_schema()).empty());
}

TEST(Validator, KeywordBasics) {
    const nlohmann::json schema = {{"type", "object"},
                                   {"required", {"n"}},
                                   {"properties", {{"n", {{"type", "integer"}, {"minimum", 0}, {"maximum", 3}}}}}};
    EXPECT_TRUE(validate({{"n", 2}}, schema).empty());
    EXPECT_FALSE(validate({{"n", 2.5}}, schema).empty());
    EXPECT_FALSE(validate({{"n", 4}}, schema).empty());
    EXPECT_FALSE(validate(nlohmann::json::object(), schema).empty());
    EXPECT_FALSE(validate(nlohmann::json::array(), schema).empty());
}

#include <gtest/gtest.h>

#include <cmath>
#include <stack>

#include "polint/tool_eval.hpp"
#include "support/expr_oracle.hpp"

using namespace polint;
using polint::oracle::YardError;
using polint::oracle::random_expr;
using polint::oracle::yard_eval;

namespace {

ToolRuleSet tiny_rules() {
  ToolRuleSet rs;
  rs.tools.push_back({"DrawBox", "v1", "Draw.", {{"image", MetricKind::ExactMatch}, {"bbox", MetricKind::BBox}}});
  rs.tools.push_back({"DrawBox", "v2", "Draw.", {{"image", MetricKind::ExactMatch}, {"bbox", MetricKind::BBox}}});
  rs.tools.push_back({"Calculator", "v1", "Calc.", {{"expression", MetricKind::Expression}}});
  rs.tools.push_back({"Search", "v1", "Search.", {{"query", MetricKind::TextSim}}});
  rs.defaults = {{"DrawBox", "v1"}, {"Calculator", "v1"}, {"Search", "v1"}};
  rs.rules.push_back({"DrawBox", {{"region", "eu"}}, "v2"});
  return rs;
}

}  // namespace

TEST(Expression, AgreesWithShuntingYardOnRandomInputs) {
  Rng rng(2024);
  int compared = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::string e = random_expr(rng, 4);
    bool yard_threw = false;
    double expect = 0;
    try {
      expect = yard_eval(e);
    } catch (const YardError&) {
      yard_threw = true;
    }
    if (yard_threw) {
      EXPECT_THROW(eval_expression(e), NumericError) << e;
      continue;
    }
    const double got = eval_expression(e);
    EXPECT_NEAR(got, expect, 1e-9 * std::max(1.0, std::abs(expect))) << e;
    ++compared;
  }
  EXPECT_GT(compared, 800);
}

TEST(Expression, PrecedenceAndErrors) {
  EXPECT_DOUBLE_EQ(eval_expression("-2**2"), -4.0);
  EXPECT_DOUBLE_EQ(eval_expression("2**3**2"), 512.0);
  EXPECT_DOUBLE_EQ(eval_expression("2**-1"), 0.5);
  EXPECT_DOUBLE_EQ(eval_expression("1 - 2 - 3"), -4.0);
  EXPECT_DOUBLE_EQ(eval_expression("8 / 4 / 2"), 1.0);
  EXPECT_DOUBLE_EQ(eval_expression("1.5e2 + 1"), 151.0);
  EXPECT_THROW(eval_expression("1/0"), NumericError);
  EXPECT_THROW(eval_expression("0**-1"), NumericError);
  EXPECT_THROW(eval_expression("2 +"), ParseError);
  EXPECT_THROW(eval_expression("(1"), ParseError);
  EXPECT_THROW(eval_expression("abs(1)"), ParseError);
  EXPECT_THROW(eval_expression("1.2.3"), ParseError);
}

TEST(BBox, IouGoldens) {
  EXPECT_NEAR(bbox_iou({0, 0, 2, 2}, {1, 1, 3, 3}), 1.0 / 7.0, 1e-12);
  EXPECT_DOUBLE_EQ(bbox_iou({0, 0, 1, 1}, {0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(bbox_iou({0, 0, 1, 1}, {2, 2, 3, 3}), 0.0);
  std::vector<std::string> w;
  EXPECT_DOUBLE_EQ(bbox_iou({1, 1, 1, 3}, {0, 0, 2, 2}, &w), 0.0);
  EXPECT_EQ(w.size(), 1u);
}

TEST(BBox, IouIsSymmetricAndBounded) {
  Rng rng(7);
  for (int i = 0; i < 500; ++i) {
    auto box = [&] {
      const double x = rng.uniform() * 10, y = rng.uniform() * 10;
      return BBox{x, y, x + 0.1 + rng.uniform() * 5, y + 0.1 + rng.uniform() * 5};
    };
    const BBox a = box(), b = box();
    const double ab = bbox_iou(a, b);
    EXPECT_DOUBLE_EQ(ab, bbox_iou(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    EXPECT_DOUBLE_EQ(bbox_iou(a, a), 1.0);
  }
}

TEST(TextSimilarity, TokenF1) {
  EXPECT_DOUBLE_EQ(text_similarity("Red Car!", "red car"), 1.0);
  EXPECT_DOUBLE_EQ(text_similarity("red car", "blue car"), 0.5);
  EXPECT_DOUBLE_EQ(text_similarity("", ""), 1.0);
  EXPECT_DOUBLE_EQ(text_similarity("a", ""), 0.0);
}

TEST(ScoreCall, Goldens) {
  const auto rs = tiny_rules();
  ToolCall gold{"DrawBox_v1", {{"image", std::string{"image_0"}}, {"bbox", BBox{0, 0, 2, 2}}}};
  EXPECT_DOUBLE_EQ(score_call(gold, gold, rs).overall, 1.0);
  ToolCall wrong = gold;
  wrong.name = "DrawBox_v2";
  const auto s = score_call(wrong, gold, rs);
  EXPECT_DOUBLE_EQ(s.tool_acc, 0.0);
  EXPECT_DOUBLE_EQ(s.arg_score, 1.0);
  EXPECT_DOUBLE_EQ(s.overall, 0.5);

  ToolCall bgold{"DrawBox_v1", {{"bbox", BBox{0, 0, 2, 2}}}};
  ToolCall bpred{"DrawBox_v1", {{"bbox", BBox{1, 1, 3, 3}}}};
  EXPECT_NEAR(score_call(bpred, bgold, rs).overall, 0.5 + 0.5 * (1.0 / 7.0), 1e-9);
  bpred.arguments["bbox"] = std::string{"(1, 1, 3, 3)"};
  EXPECT_NEAR(score_call(bpred, bgold, rs).overall, 0.5 + 0.5 * (1.0 / 7.0), 1e-9);

  ToolCall cg{"Calculator_v1", {{"expression", std::string{"2*(3+4)"}}}};
  ToolCall cp{"Calculator_v1", {{"expression", 14.0}}};
  EXPECT_DOUBLE_EQ(score_call(cp, cg, rs).overall, 1.0);
  cp.arguments["expression"] = std::string{"1/0"};
  const auto bad = score_call(cp, cg, rs);
  EXPECT_DOUBLE_EQ(bad.arg_score, 0.0);
  EXPECT_FALSE(bad.warnings.empty());

  ToolCall missing{"DrawBox_v1", {}};
  EXPECT_DOUBLE_EQ(score_call(missing, gold, rs).arg_score, 0.0);
  ToolCall extra = gold;
  extra.arguments["note"] = std::string{"x"};
  EXPECT_DOUBLE_EQ(score_call(extra, gold, rs).overall, 1.0);
  EXPECT_THROW(score_call(gold, ToolCall{"Nope_v1", {}}, rs), ConfigError);
}

TEST(ScoreCall, OverallIsAverageOfParts) {
  const auto ds = generate_gta_like({5, 8, 40, 10, 3, "G"});
  Rng rng(1);
  for (const auto& r : ds.train) {
    ToolCall pred = r.gold_call;
    if (rng.bernoulli(0.5)) pred.name = ds.rules.tools[rng.below(ds.rules.tools.size())].full_name();
    if (!pred.arguments.empty() && rng.bernoulli(0.5)) pred.arguments.erase(pred.arguments.begin());
    const auto s = score_call(pred, r.gold_call, ds.rules);
    EXPECT_DOUBLE_EQ(s.overall, 0.5 * s.tool_acc + 0.5 * s.arg_score);
    EXPECT_GE(s.overall, 0.0);
    EXPECT_LE(s.overall, 1.0);
  }
}

TEST(ToolCalls, ParseAndRoundTrip) {
  const auto c = parse_tool_call(R"(noise {"x": 1} then {"name": "OCR_v2", "arguments": {"image": "image_0"}} tail)");
  EXPECT_EQ(c.name, "OCR_v2");
  EXPECT_EQ(std::get<std::string>(c.arguments.at("image")), "image_0");
  EXPECT_THROW(parse_tool_call("no json here"), ParseError);
  EXPECT_THROW(parse_tool_call(R"({"name": 3})"), SchemaError);
  const ToolCall box{"DrawBox_v1", {{"bbox", BBox{1, 2, 3, 4}}, {"k", 2.0}}};
  EXPECT_EQ(call_from_json(nlohmann::json::parse(call_to_json(box).dump())), box);
  EXPECT_EQ(join(call_tokens(box), ""), call_to_json(box).dump());
  EXPECT_EQ(split_tool_name("Text_To_v12"), (std::pair<std::string, std::string>{"Text_To", "v12"}));
  EXPECT_EQ(split_tool_name("OCR").second, "");
}

TEST(Rules, FirstMatchWinsThenDefault) {
  auto rs = tiny_rules();
  rs.rules.push_back({"DrawBox", {{"region", "eu"}, {"premium", "true"}}, "v1"});
  EXPECT_EQ(resolve_required_version(rs, {{"region", "eu"}, {"premium", "true"}}, "DrawBox"), "v2");
  EXPECT_EQ(resolve_required_version(rs, {{"region", "us"}}, "DrawBox"), "v1");
  EXPECT_THROW(resolve_required_version(rs, {}, "Nope"), ConfigError);
  const auto back = rule_set_from_json(nlohmann::json::parse(rule_set_to_json(rs).dump()));
  EXPECT_EQ(rule_set_to_json(back).dump(), rule_set_to_json(rs).dump());
  auto broken = rs;
  broken.rules.push_back({"DrawBox", {}, "v9"});
  EXPECT_THROW(validate_rule_set(broken), ConfigError);
}

TEST(Rules, FlipChangesEveryRuleVersion) {
  const auto ds = generate_gta_like({});
  const auto flipped = flip_rule_versions(ds.rules);
  ASSERT_EQ(flipped.rules.size(), ds.rules.rules.size());
  for (std::size_t i = 0; i < flipped.rules.size(); ++i) {
    EXPECT_NE(flipped.rules[i].version, ds.rules.rules[i].version);
    EXPECT_TRUE(flipped.find(flipped.rules[i].base + "_" + flipped.rules[i].version));
  }
  EXPECT_NE(render_rule_policy(flipped, "G"), render_rule_policy(ds.rules, "G"));
}

TEST(GtaGenerator, CountsAndGoldConsistency) {
  const auto ds = generate_gta_like({});
  EXPECT_EQ(ds.train.size(), 451u);
  EXPECT_EQ(ds.test.size(), 106u);
  EXPECT_EQ(ds.rules.bases().size(), 13u);
  EXPECT_EQ(ds.rules.rules.size(), 24u);
  for (const auto& r : ds.train) {
    const auto [base, version] = split_tool_name(r.gold_call.name);
    ASSERT_EQ(version, resolve_required_version(ds.rules, r.profile, base));
    const auto back = gta_record_from_json(nlohmann::json::parse(gta_record_to_json(r).dump()));
    ASSERT_EQ(back.gold_call, r.gold_call);
    ASSERT_EQ(back.tokens_with_policy, r.tokens_with_policy);
  }
  const auto again = generate_gta_like({});
  EXPECT_EQ(gta_record_to_json(again.test.back()).dump(), gta_record_to_json(ds.test.back()).dump());
  EXPECT_THROW(generate_gta_like({20, 1, 1, 1, 0, "G"}), GenerationError);
}

#include <gtest/gtest.h>

#include "polint/rewards.hpp"

using namespace polint;

TEST(ParseResponse, WellFormed) {
  const auto p = parse_response(std::string_view{"<think> Condition 0 : red object ? yes </think> \\boxed{ Case 3 }"});
  EXPECT_TRUE(p.format_ok);
  EXPECT_EQ(p.answer, "Case 3");
  EXPECT_EQ(p.think, "Condition 0 : red object ? yes");
}

TEST(ParseResponse, FormatViolations) {
  EXPECT_FALSE(parse_response(std::string_view{"\\boxed{ Case 1 }"}).format_ok);
  EXPECT_EQ(parse_response(std::string_view{"\\boxed{ Case 1 }"}).answer, "Case 1");
  EXPECT_FALSE(parse_response(std::string_view{"<think> </think> <think> </think> \\boxed{ A }"}).format_ok);
  EXPECT_FALSE(parse_response(std::string_view{"\\boxed{ A } <think> </think>"}).format_ok);
  EXPECT_FALSE(parse_response(std::string_view{"<think> </think> \\boxed{ A } \\boxed{ B }"}).format_ok);
  EXPECT_EQ(parse_response(std::string_view{"<think> </think> \\boxed{ A } \\boxed{ B }"}).answer, "A");
  EXPECT_FALSE(parse_response(std::string_view{"<think> </think> \\boxed{ A"}).format_ok);
  EXPECT_EQ(parse_response(std::string_view{"<think> </think> \\boxed{ A"}).answer, "");
}

TEST(ParseResponse, NestedBracesInBox) {
  const auto p = parse_response(std::string_view{R"(<think> </think> \boxed{ {"name": "OCR_v1", "arguments": {"image": "x"}} })"});
  EXPECT_TRUE(p.format_ok);
  EXPECT_EQ(p.answer, R"({"name": "OCR_v1", "arguments": {"image": "x"}})");
}

TEST(Rewards, ClevrAccuracyAndFormat) {
  const auto ok = parse_response(Tokens{"<think>", "</think>", "\\boxed{", "Case", "2", "}"});
  EXPECT_DOUBLE_EQ(reward_clevr(ok, "Case 2").total, 1.1);
  EXPECT_DOUBLE_EQ(reward_clevr(ok, "Case 3").total, 0.1);
  EXPECT_DOUBLE_EQ(reward_clevr(ok, "Case 2", 0.0).total, 1.0);
  const auto bare = parse_response(Tokens{"\\boxed{", "Case", "2", "}"});
  const auto r = reward_clevr(bare, "Case 2");
  EXPECT_DOUBLE_EQ(r.acc, 1.0);
  EXPECT_DOUBLE_EQ(r.format, 0.0);
}

TEST(Rewards, GtaUsesCallScore) {
  ToolRuleSet rs;
  rs.tools.push_back({"OCR", "v1", "Read.", {{"image", MetricKind::ExactMatch}}});
  rs.tools.push_back({"OCR", "v2", "Read.", {{"image", MetricKind::ExactMatch}}});
  rs.defaults["OCR"] = "v1";
  const ToolCall gold{"OCR_v1", {{"image", std::string{"image_0"}}}};
  const auto good = parse_response(std::string_view{R"(<think> </think> \boxed{ {"name": "OCR_v1", "arguments": {"image": "image_0"}} })"});
  EXPECT_DOUBLE_EQ(reward_gta(good, gold, rs).total, 1.1);
  const auto wrong = parse_response(std::string_view{R"(<think> </think> \boxed{ {"name": "OCR_v2", "arguments": {"image": "image_0"}} })"});
  EXPECT_DOUBLE_EQ(reward_gta(wrong, gold, rs).total, 0.6);
  const auto junk = parse_response(std::string_view{"<think> </think> \\boxed{ nope }"});
  const auto rj = reward_gta(junk, gold, rs);
  EXPECT_FALSE(rj.parsed);
  EXPECT_DOUBLE_EQ(rj.total, 0.1);
}

TEST(Losses, VmCptMasksVisualTokens) {
  const std::vector<double> logp{-1.0, -2.0, -3.0, -4.0};
  const std::vector<bool> keep{true, false, true, false};
  const auto l = vm_cpt_loss(logp, keep);
  EXPECT_DOUBLE_EQ(l.value, 2.0);
  EXPECT_EQ(l.dlogp, (std::vector<double>{-0.5, 0.0, -0.5, 0.0}));
  EXPECT_THROW(vm_cpt_loss(logp, {false, false, false, false}), ValidationError);
  EXPECT_THROW(vm_cpt_loss(logp, {true}), ValidationError);
}

// The loss is linear in logp, so its derivative equals a finite difference
// exactly (up to rounding).
TEST(Losses, VmCptGradientMatchesDifference) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    std::vector<double> logp(n);
    std::vector<bool> keep(n);
    for (std::size_t i = 0; i < n; ++i) {
      logp[i] = -5 * rng.uniform();
      keep[i] = rng.bernoulli(0.6);
    }
    keep[0] = true;
    const auto base = vm_cpt_loss(logp, keep);
    for (std::size_t i = 0; i < n; ++i) {
      auto up = logp, down = logp;
      up[i] += 1e-5;
      down[i] -= 1e-5;
      const double fd = (vm_cpt_loss(up, keep).value - vm_cpt_loss(down, keep).value) / 2e-5;
      EXPECT_NEAR(base.dlogp[i], fd, 1e-8);
    }
  }
}

TEST(Losses, CotSftSumsOverOutput) {
  const std::vector<double> logp{-0.5, -1.5};
  const auto l = cot_sft_loss(logp);
  EXPECT_DOUBLE_EQ(l.sum.value, 2.0);
  EXPECT_DOUBLE_EQ(l.mean, 1.0);
  EXPECT_EQ(l.sum.dlogp, (std::vector<double>{-1.0, -1.0}));
  EXPECT_THROW(cot_sft_loss(std::vector<double>{}), ValidationError);
}

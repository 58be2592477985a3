#include <gtest/gtest.h>

#include <set>

#include "insight/grad_suite.hpp"

using namespace insight;

TEST(GradSuite, CoversEveryModule) {
  const auto names = grad_suite_ops();
  const std::set<std::string> got(names.begin(), names.end());
  EXPECT_EQ(got.size(), names.size());
  for (const char* op : {"affine", "softmax", "attention", "layer_norm", "gelu", "sigmoid", "mha",
                         "fusion.self_attention", "queries.hybrid", "decoder_layer.masked.before_cross",
                         "decoder_stack", "bev_encoder", "detector.hybrid", "detector.naive"}) {
    EXPECT_TRUE(got.contains(op)) << op;
  }
}

TEST(GradSuite, DefaultRunPassesAndReportsEveryOp) {
  const auto rep = run_grad_suite({.trials = 3});
  EXPECT_TRUE(rep.pass());
  ASSERT_EQ(rep.entries.size(), grad_suite_ops().size());
  for (const auto& e : rep.entries) {
    EXPECT_LT(e.max_rel_err, 1e-4) << e.op << " at " << e.worst_param;
    EXPECT_GT(e.coords, 0u) << e.op;
  }
  const auto j = grad_suite_json(rep, 1e-4);
  EXPECT_EQ(j["ops"].size(), rep.entries.size());
  EXPECT_TRUE(j["pass"].get<bool>());
}

TEST(GradSuite, InjectedBugFailsOnlyThatOp) {
  for (const char* op : {"layer_norm", "decoder_layer.masked.after_cross", "detector.hybrid"}) {
    const auto rep = run_grad_suite({.trials = 1, .inject_bug = op});
    EXPECT_FALSE(rep.pass());
    EXPECT_EQ(rep.failing(), std::vector<std::string>{op});
  }
}

TEST(GradSuite, UnknownInjectionTargetIsAUsageError) {
  try {
    run_grad_suite({.inject_bug = "nope"});
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("valid ops: affine"), std::string::npos);
  }
}

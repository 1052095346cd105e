#include <gtest/gtest.h>

#include "aligndet/gradcheck.hpp"

using namespace aligndet;

namespace {

GradcheckOptions options(const std::string& scope, std::uint64_t seed = 0, int samples = 0,
                         const std::string& corrupt = {}) {
  GradcheckOptions o;
  o.scope = scope;
  o.seed = seed;
  o.samples = samples;
  o.corrupt = corrupt;
  return o;
}

}  // namespace

TEST(Gradcheck, RelativeErrorFloor) {
  EXPECT_NEAR(relative_error(1.0, 1.1, 1e-6), 0.1 / 1.1, 1e-15);
  EXPECT_NEAR(relative_error(1e-9, 0.0, 1e-6), 1e-3, 1e-15);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0, 1e-6), 0.0);
}

TEST(Gradcheck, LossAndFusionSuitesPass) {
  for (const char* scope : {"losses", "fusion"}) {
    const auto r = run_gradcheck(options(scope));
    EXPECT_TRUE(r.pass()) << r.to_text();
    EXPECT_FALSE(r.groups.empty());
  }
}

TEST(Gradcheck, CorruptedGradientIsCaughtAndNamed) {
  const auto r = run_gradcheck(options("fusion", 0, 0, "fusion.attn.wv"));
  EXPECT_FALSE(r.pass());
  bool named = false;
  for (const auto& g : r.groups)
    if (!g.pass()) named = named || g.worst_tensor.find("fusion.attn.wv") != std::string::npos;
  EXPECT_TRUE(named) << r.to_text();

  const auto l = run_gradcheck(options("losses", 0, 50, "dwcl"));
  EXPECT_FALSE(l.pass());
}

TEST(Gradcheck, ReportIsReproducible) {
  const auto o = options("losses", 9, 100);
  EXPECT_EQ(run_gradcheck(o).to_text(), run_gradcheck(o).to_text());
}

TEST(Gradcheck, UnknownScope) {
  EXPECT_ANY_THROW(run_gradcheck(options("everything")));
}

#include <gtest/gtest.h>

#include "cks/ablation.hpp"
#include "fixtures.hpp"

namespace {

TEST(PriorSweep, RowsAndChangedKeys) {
  auto c = fixtures::tiny_run("unused");
  c.losses.d_by_group = {{"a", 4.0}, {"b", 9.0}};
  c.ablation.steps = 7;
  const auto v = cks::prior_sweep_variants(c);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[0].label, "NOT USED");
  EXPECT_EQ(v[1].label, "CONSTANT d");
  EXPECT_EQ(v[2].label, "PER-GROUP d");
  const auto base = cks::sweep_base(c);
  EXPECT_EQ(base.train.total_steps, 7);
  EXPECT_EQ(cks::config_diff(base, v[0].config), (std::vector<std::string>{"losses.pi"}));
  EXPECT_DOUBLE_EQ(v[1].config.losses.d, 9.0);
  EXPECT_TRUE(v[1].config.losses.d_by_group.empty());
  EXPECT_TRUE(cks::config_diff(base, v[2].config).empty());
}

TEST(PriorSweep, ExplicitConstantRadius) {
  auto c = fixtures::tiny_run("unused");
  c.ablation.constant_d = 5.5;
  EXPECT_DOUBLE_EQ(cks::prior_sweep_variants(c)[1].config.losses.d, 5.5);
}

TEST(CollaboratorSweep, FourVariantsDifferOnlyInCollaborator) {
  const auto c = fixtures::tiny_run("unused");
  const auto v = cks::collaborator_sweep_variants(c);
  ASSERT_EQ(v.size(), 4u);
  const std::vector<std::string> labels{"a1b1", "a2b1", "a3b1", "a1b2"};
  for (std::size_t i = 0; i < v.size(); ++i) {
    EXPECT_EQ(v[i].label, labels[i]);
    for (const auto& k : cks::config_diff(cks::sweep_base(c), v[i].config)) {
      EXPECT_EQ(k.rfind("collaborator.", 0), 0u) << k;
    }
  }
}

TEST(RunSweep, TrainsEveryRowAndWritesSummary) {
  const auto dir = fixtures::temp_dir("sweep");
  auto c = fixtures::tiny_run(dir.string());
  c.ablation.steps = 2;
  const auto data = cks::load_training_data(c.data);
  std::vector<std::string> log;
  cks::SweepOptions o;
  o.log = [&](const std::string& s) { log.push_back(s); };
  const auto t = cks::sweep_prior(c, data, data, o);
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_TRUE(std::filesystem::exists(dir / "prior" / "summary.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "prior" / "not_used" / "final.pt"));
  EXPECT_NE(t.to_text().find("PER-GROUP d"), std::string::npos);
  EXPECT_EQ(t.to_json().at("rows").size(), 3u);
  EXPECT_NO_THROW(t.row("CONSTANT d"));
  EXPECT_THROW(t.row("missing"), std::exception);
}

}  // namespace

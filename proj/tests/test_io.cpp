#include <gtest/gtest.h>

#include <sstream>

#include "exbias/harness.hpp"

using namespace exbias;

TEST(Jsonl, EventLineShape) {
  const ChoiceEvent e{3, Slate{{5, 9, 12, 40}, Policy::kOverexposeBias}, 2};
  const auto line = to_jsonl(std::span<const ChoiceEvent>(&e, 1));
  EXPECT_EQ(line, "{\"chosen\":2,\"policy\":\"overexpose_bias\",\"slate\":[5,9,12,40],\"user\":3}\n");
}

TEST(Jsonl, RoundTrip) {
  const auto catalog = std::make_shared<const ItemCatalog>(build_catalog(100, 50, 5, RngHandle(1)));
  const auto split = std::make_shared<const UserSplit>(partition_users(30, 1.0 / 3.0, RngHandle(2)));
  const auto pop = sample_population(30, 100, 8, RngHandle(3));
  DesignParams d;
  d.force_prob = 0.5;
  const auto pair = build_pair(pop, catalog, split, Experiment::kCompetition, d, {}, RngHandle(4));
  std::istringstream in(to_jsonl(pair.treated.events));
  const auto back = events_from_jsonl(in);
  ASSERT_EQ(back.size(), pair.treated.events.size());
  for (std::size_t j = 0; j < back.size(); ++j) {
    EXPECT_EQ(back[j].user, pair.treated.events[j].user);
    EXPECT_EQ(back[j].slate.items, pair.treated.events[j].slate.items);
    EXPECT_EQ(back[j].slate.policy, pair.treated.events[j].slate.policy);
    EXPECT_EQ(back[j].chosen_index, pair.treated.events[j].chosen_index);
  }
}

TEST(DesignJson, RoundTrip) {
  const auto c = build_catalog(100, 50, 5, RngHandle(5));
  const auto s = partition_users(30, 0.5, RngHandle(6));
  const auto [c2, s2] = design_from_json(json::parse(design_to_json(c, s).dump()));
  EXPECT_EQ(c2.set_a, c.set_a);
  EXPECT_EQ(c2.bias_set, c.bias_set);
  EXPECT_EQ(s2.eval_users, s.eval_users);
}

TEST(ModelJson, RoundTripIsExact) {
  const auto inst = gradient_instance(RngHandle(7));
  HyperParams h;
  h.epochs = 10;
  const auto m = fit(ModelKind::kGev, inst.events, {6, 12}, h, inst.nests, RngHandle(8));
  const auto j = to_json(m);
  EXPECT_EQ(j.at("shape").at("dim"), 8);
  EXPECT_EQ(j.at("user_factors").size(), 6u);
  const auto back = trained_model_from_json(json::parse(j.dump()));
  EXPECT_EQ(back.params.values, m.params.values);
  EXPECT_EQ(back.loss_trace, m.loss_trace);
  EXPECT_EQ(back.kind, ModelKind::kGev);
}

TEST(PopulationJson, NestedMatrices) {
  const auto p = sample_population(4, 6, 3, RngHandle(9));
  const auto j = to_json(p);
  ASSERT_EQ(j.at("user_factors").size(), 4u);
  ASSERT_EQ(j.at("item_factors")[5].size(), 3u);
  EXPECT_EQ(j.at("item_factors")[5][2].get<double>(), p.item_factors[17]);
}

TEST(PairFiles, WritesFourFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "exbias_io_pair";
  std::filesystem::remove_all(dir);
  const auto catalog = std::make_shared<const ItemCatalog>(build_catalog(100, 50, 5, RngHandle(1)));
  const auto split = std::make_shared<const UserSplit>(partition_users(9, 1.0 / 3.0, RngHandle(2)));
  const auto pop = sample_population(9, 100, 8, RngHandle(3));
  DesignParams d;
  d.force_prob = 0.7;
  const auto pair = build_pair(pop, catalog, split, Experiment::kOverexposure, d, {}, RngHandle(4));
  write_pair(pair, dir, 42, 0.7, 11);
  for (const char* f : {"treated.jsonl", "control.jsonl", "design.json", "pair.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  const auto manifest = json::parse(read_text(dir / "pair.json"));
  EXPECT_EQ(manifest.at("label"), "overexposure");
  EXPECT_EQ(manifest.at("seed"), 42);
  EXPECT_EQ(manifest.at("quartile_size"), 11);
  std::filesystem::remove_all(dir);
}

TEST(Files, MissingPathNamesThePath) {
  try {
    read_text("/nonexistent/dir/x.json");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/x.json"), std::string::npos);
  }
}

#include <gtest/gtest.h>

#include <fstream>

#include "iternet/config.hpp"
#include "temp_dir.hpp"

namespace iternet {
namespace {

TEST(Config, DefaultsValidate) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.model_config().iterations, 4u);
  EXPECT_EQ(c.loss_weights(), std::vector<float>(4, 1.0f));
  EXPECT_EQ(c.theta_grid().size(), 256u);
}

TEST(Config, SerializeParseRoundTrip) {
  RunConfig c;
  c.model.iterations = 3;
  c.train.learning_rate = 0.1 + 0.2;  // not exactly representable in short form
  c.train.loss_weights = {0.5, 1.0, 2.0};
  c.predict.mode = PredictMode::whole;
  c.eval.with_mask = false;
  c.data.corpus = "some dir/x";
  const RunConfig back = parse_config_string(serialize_config(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize_config(back), serialize_config(c));
}

TEST(Config, PartialFileOverridesDefaults) {
  const RunConfig c = parse_config_string("# comment\n\n model.iterations = 2 \ntrain.augment = no\n");
  EXPECT_EQ(c.model.iterations, 2u);
  EXPECT_FALSE(c.train.augment);
  EXPECT_EQ(c.train.steps, RunConfig{}.train.steps);
}

TEST(Config, BoolSpellings) {
  for (const char* t : {"true", "1", "yes"})
    EXPECT_TRUE(parse_config_string(std::string("eval.with_mask = ") + t).eval.with_mask);
  for (const char* f : {"false", "0", "no"})
    EXPECT_FALSE(parse_config_string(std::string("eval.with_mask = ") + f).eval.with_mask);
  EXPECT_THROW(parse_config_string("eval.with_mask = maybe"), config_error);
}

TEST(Config, RejectsMalformedInput) {
  EXPECT_THROW(parse_config_string("model.nope = 1"), config_error);
  EXPECT_THROW(parse_config_string("model.iterations = 2\nmodel.iterations = 3"), config_error);
  EXPECT_THROW(parse_config_string("model.iterations"), config_error);
  EXPECT_THROW(parse_config_string("model.iterations = two"), config_error);
  EXPECT_THROW(parse_config_string("model.iterations = -1"), config_error);
  EXPECT_THROW(parse_config_string("train.learning_rate = 1e-3x"), config_error);
  EXPECT_THROW(parse_config_string("predict.mode = tiled"), config_error);
}

TEST(Config, ErrorNamesLine) {
  try {
    parse_config_string("model.iterations = 2\n\nbogus.key = 1\n");
    FAIL();
  } catch (const config_error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("bogus.key"), std::string::npos);
  }
}

TEST(Config, ValidationCatchesInconsistencies) {
  auto bad = [](auto edit) {
    RunConfig c;
    edit(c);
    EXPECT_THROW(c.validate(), config_error);
  };
  bad([](RunConfig& c) { c.model.iterations = 9; });
  bad([](RunConfig& c) { c.model.iterations = 0; });
  bad([](RunConfig& c) { c.train.patch_size = 30; });
  bad([](RunConfig& c) { c.train.batch_size = 0; });
  bad([](RunConfig& c) { c.train.loss_weights = {1, 1}; });
  bad([](RunConfig& c) { c.train.learning_rate = 0; });
  bad([](RunConfig& c) { c.predict.stride = 200; });
  bad([](RunConfig& c) { c.eval.alpha = 0; });
  bad([](RunConfig& c) { c.eval.theta_step = 0; });
  bad([](RunConfig& c) { c.data.train_count = 99; });
  bad([](RunConfig& c) { c.train.rotation_min = 30; });
}

TEST(Config, ThetaGridFromFields) {
  const RunConfig c = parse_config_string("eval.theta_start = 10\neval.theta_stop = 20\neval.theta_step = 2.5");
  EXPECT_EQ(c.theta_grid(), (std::vector<double>{10, 12.5, 15, 17.5, 20}));
  EXPECT_EQ(c.eval_options().thetas, c.theta_grid());
}

TEST(Config, LoadFromFile) {
  testing::TempDir dir;
  const auto p = dir.path() / "run.ini";
  std::ofstream(p) << "train.steps = 7\n";
  EXPECT_EQ(load_config(p).train.steps, 7u);
  EXPECT_THROW(load_config(dir.path() / "missing.ini"), config_error);
}

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"default.ini", "toy.ini"}) {
    const auto p = std::filesystem::path(ITERNET_CONFIG_DIR) / name;
    RunConfig c;
    ASSERT_NO_THROW(c = load_config(p)) << p;
    EXPECT_NO_THROW(c.validate()) << p;
  }
}

}  // namespace
}  // namespace iternet

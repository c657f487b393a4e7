#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "grad_check.hpp"
#include "iternet/model.hpp"

using namespace iternet;
using iternet::testing::grad_check;
using iternet::testing::random_tensor;

namespace {

std::set<std::string> names_with_prefix(const ParamStore<float>& s, const std::string& p) {
  std::set<std::string> out;
  for (const auto& n : s.names())
    if (n.rfind(p, 0) == 0) out.insert(n);
  return out;
}

std::size_t layout_count(const ParamLayout& layout, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& [name, shape] : layout)
    if (name.rfind(prefix, 0) == 0) n += shape_size(shape);
  return n;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("iternet_test_model_" + name);
}

}  // namespace

TEST(BuildIterNet, SingleOutputIsPlainUNet) {
  auto cfg = IterNetConfig::make(UNetConfig{3, 8, 3}, 1);
  auto store = build_iternet(cfg, 1);
  EXPECT_TRUE(names_with_prefix(store, "mini").empty());
  EXPECT_TRUE(names_with_prefix(store, "reduce").empty());
  EXPECT_EQ(names_with_prefix(store, "base").size(), store.size());
}

TEST(BuildIterNet, ExactlyThreeParameterGroups) {
  auto store = build_iternet(IterNetConfig::toy(), 1);
  std::set<std::string> groups;
  for (const auto& n : store.names()) groups.insert(n.substr(0, n.find('.')));
  EXPECT_EQ(groups, (std::set<std::string>{"base", "mini", "reduce"}));
}

TEST(BuildIterNet, MiniIsLighterThanBase) {
  // Count each group from the layout: 3x3 convs contribute 9*in*out + out.
  const auto layout = iternet_layout(IterNetConfig::toy());
  const std::size_t base = layout_count(layout, "base.");
  const std::size_t mini = layout_count(layout, "mini.");
  // base: enc 3->8,8->8 | 8->16,16->16 | 16->32,32->32; up 32->16, 16->8;
  //       dec 32->16,16->16 | 16->8,8->8; head 8->1
  const std::size_t base_expected = (9 * 3 * 8 + 8) + (9 * 8 * 8 + 8) + (9 * 8 * 16 + 16) +
                                    (9 * 16 * 16 + 16) + (9 * 16 * 32 + 32) + (9 * 32 * 32 + 32) +
                                    (9 * 32 * 16 + 16) + (9 * 32 * 16 + 16) + (9 * 16 * 16 + 16) +
                                    (9 * 16 * 8 + 8) + (9 * 16 * 8 + 8) + (9 * 8 * 8 + 8) + (8 + 1);
  // mini (input width 8): enc 8->4,4->4 | 4->8,8->8; up 8->4; dec 8->4,4->4; head 4->1
  const std::size_t mini_expected = (9 * 8 * 4 + 4) + (9 * 4 * 4 + 4) + (9 * 4 * 8 + 8) +
                                    (9 * 8 * 8 + 8) + (9 * 8 * 4 + 4) + (9 * 8 * 4 + 4) +
                                    (9 * 4 * 4 + 4) + (4 + 1);
  EXPECT_EQ(base, base_expected);
  EXPECT_EQ(mini, mini_expected);
  EXPECT_LT(mini, base);
}

TEST(BuildIterNet, IterationCountAddsNoParameters) {
  auto s2 = build_iternet(IterNetConfig::make(UNetConfig{3, 8, 3}, 2), 5);
  auto s4 = build_iternet(IterNetConfig::make(UNetConfig{3, 8, 3}, 4), 5);
  auto s6 = build_iternet(IterNetConfig::make(UNetConfig{3, 8, 3}, 6), 5);
  EXPECT_EQ(names_with_prefix(s2, "mini"), names_with_prefix(s4, "mini"));
  EXPECT_EQ(s2.names(), s6.names());
  EXPECT_EQ(s2.parameter_count(), s6.parameter_count());
}

TEST(BuildIterNet, FullSizeRefineryHasMoreParameters) {
  const auto light = IterNetConfig::toy();
  auto full = light;
  full = IterNetConfig::make(light.base, light.iterations, true, true);
  EXPECT_EQ(full.mini.depth, full.base.depth);
  EXPECT_GT(build_iternet(full, 1).parameter_count(), build_iternet(light, 1).parameter_count());
}

TEST(BuildIterNet, RejectsInvalidConfigs) {
  auto cfg = IterNetConfig::toy();
  cfg.iterations = 0;
  EXPECT_THROW(build_iternet(cfg, 1), std::invalid_argument);
  cfg = IterNetConfig::toy();
  cfg.iterations = 9;
  EXPECT_THROW(build_iternet(cfg, 1), std::invalid_argument);
  cfg = IterNetConfig::make(UNetConfig{1, 8, 3}, 2);
  EXPECT_THROW(build_iternet(cfg, 1), std::invalid_argument);
}

TEST(Forward, SingleOutputShapeAndRange) {
  auto cfg = IterNetConfig::make(UNetConfig{3, 8, 3}, 1);
  auto store = build_iternet(cfg, 2);
  std::mt19937_64 rng(1);
  auto img = random_tensor(Shape{2, 3, 16, 16}, rng, 0, 1).cast<float>();
  Tape<float> tape;
  auto r = iternet_forward(tape, store, img, cfg);
  ASSERT_EQ(r.outputs.size(), 1u);
  EXPECT_EQ(r.outputs[0].shape(), (Shape{2, 1, 16, 16}));
  for (float p : r.outputs[0].value().values()) {
    EXPECT_GT(p, 0.0f);
    EXPECT_LT(p, 1.0f);
  }
}

TEST(Forward, OutputCountAndShapesForEveryN) {
  for (std::size_t n = 1; n <= 6; ++n) {
    auto cfg = IterNetConfig::make(UNetConfig{3, 8, 3}, n);
    auto store = build_iternet(cfg, n);
    Tensor img(Shape{1, 3, 16, 24}, 0.3f);
    auto outs = predict_outputs(store, cfg, img);
    ASSERT_EQ(outs.size(), n);
    for (const auto& o : outs) EXPECT_EQ(o.shape(), (Shape{1, 1, 16, 24}));
  }
}

TEST(Forward, RejectsIndivisibleInput) {
  auto cfg = IterNetConfig::toy();
  auto store = build_iternet(cfg, 1);
  EXPECT_THROW(predict(store, cfg, Tensor(Shape{1, 3, 18, 16})), std::invalid_argument);
  EXPECT_THROW(predict(store, cfg, Tensor(Shape{1, 1, 16, 16})), std::invalid_argument);
}

// A zero image with zero-padded convolutions gives spatially constant maps
// away from the border; with a receptive field wider than 16 px the
// constant window exists only on larger inputs.
namespace {
void expect_constant_interior(const IterNetConfig& cfg, const ParamStore<float>& store,
                              std::size_t side, float level) {
  auto outs = predict_outputs(store, cfg, Tensor(Shape{1, 3, side, side}, level));
  ASSERT_EQ(outs.size(), 4u);
  for (const auto& o : outs) {
    const float center = o.at(0, 0, side / 2, side / 2);
    for (std::size_t y = side / 2 - 2; y < side / 2 + 2; ++y)
      for (std::size_t x = side / 2 - 2; x < side / 2 + 2; ++x) EXPECT_EQ(o.at(0, 0, y, x), center);
  }
}
}  // namespace

TEST(Forward, ZeroImageGivesConstantInterior) {
  auto cfg = IterNetConfig::toy();
  expect_constant_interior(cfg, build_iternet(cfg, 3), 16, 0.0f);
}

// Nonzero input: the border effect must not reach the center window.
TEST(Forward, NonzeroConstantGivesConstantInterior) {
  auto cfg = IterNetConfig::toy();
  expect_constant_interior(cfg, build_iternet(cfg, 3), 256, 0.5f);
}

TEST(Forward, IsBitDeterministic) {
  auto cfg = IterNetConfig::toy();
  auto store = build_iternet(cfg, 4);
  std::mt19937_64 rng(2);
  auto img = random_tensor(Shape{1, 3, 32, 32}, rng, 0, 1).cast<float>();
  EXPECT_EQ(predict_outputs(store, cfg, img), predict_outputs(store, cfg, img));
  auto again = build_iternet(cfg, 4);
  EXPECT_EQ(predict(again, cfg, img), predict(store, cfg, img));
}

TEST(Forward, NoSkipVariantChangesOutput) {
  auto cfg = IterNetConfig::toy();
  auto no_skip = cfg;
  no_skip.skip_connections = false;
  auto store = build_iternet(cfg, 6);
  EXPECT_EQ(iternet_layout(cfg), iternet_layout(no_skip));
  std::mt19937_64 rng(3);
  auto img = random_tensor(Shape{1, 3, 16, 16}, rng, 0, 1).cast<float>();
  auto a = predict_outputs(store, cfg, img);
  auto b = predict_outputs(store, no_skip, img);
  EXPECT_EQ(a.front(), b.front());
  EXPECT_NE(a.back(), b.back());
}

TEST(Loss, DuplicatedOutputDoublesLoss) {
  Tape<double> tape;
  std::mt19937_64 rng(7);
  auto logits = tape.constant(random_tensor(Shape{1, 1, 4, 4}, rng, -2, 2));
  basic_tensor<double> gold(Shape{1, 1, 4, 4});
  gold[3] = gold[7] = 1;
  ForwardResult<double> r;
  r.logits = {logits, logits};
  r.outputs = {sigmoid(logits), sigmoid(logits)};
  auto two = iternet_loss(r, gold, std::vector<double>{1, 1});
  auto single = sigmoid_cross_entropy(logits, gold);
  EXPECT_DOUBLE_EQ(two.total.value()[0], 2 * single.value()[0]);
}

TEST(Loss, WeightsSelectFinalOutput) {
  auto cfg = IterNetConfig::toy();
  auto store = build_iternet<double>(cfg, 8);
  std::mt19937_64 rng(8);
  auto img = random_tensor(Shape{1, 3, 16, 16}, rng, 0, 1);
  basic_tensor<double> gold(Shape{1, 1, 16, 16});
  for (std::size_t i = 0; i < gold.size(); i += 5) gold[i] = 1;
  Tape<double> tape;
  auto r = iternet_forward(tape, store, img, cfg);
  auto last = iternet_loss(r, gold, std::vector<double>{0, 0, 0, 1});
  EXPECT_DOUBLE_EQ(last.total.value()[0], sigmoid_cross_entropy(r.logits.back(), gold).value()[0]);
  EXPECT_EQ(last.per_output.size(), 4u);
  EXPECT_THROW(iternet_loss(r, gold, std::vector<double>{1, 1}), std::invalid_argument);
  auto defaults = iternet_loss(r, gold, default_loss_weights<double>(cfg));
  double sum_terms = 0;
  for (double v : defaults.per_output) sum_terms += v;
  EXPECT_NEAR(defaults.total.value()[0], sum_terms, 1e-12);
}

// Gradient of the shared refinery equals the sum of the gradients of
// distinct per-pass copies holding the same values.
TEST(WeightSharing, SharedGradientEqualsSummedUnrolledCopies) {
  auto cfg = IterNetConfig::toy();
  auto shared = build_iternet<double>(cfg, 9);
  ParamStore<double> unrolled;
  for (const auto& [name, e] : shared.entries()) {
    if (name.rfind("mini.", 0) == 0) {
      for (std::size_t k = 0; k + 1 < cfg.iterations; ++k)
        unrolled.add("mini" + std::to_string(k) + name.substr(4), e.value);
    } else {
      unrolled.add(name, e.value);
    }
  }
  std::mt19937_64 rng(10);
  auto img = random_tensor(Shape{1, 3, 16, 16}, rng, 0, 1);
  basic_tensor<double> gold(Shape{1, 1, 16, 16});
  for (std::size_t i = 0; i < gold.size(); i += 3) gold[i] = 1;
  {
    Tape<double> t;
    auto r = iternet_forward(t, shared, img, cfg);
    t.backward(iternet_loss(r, gold, default_loss_weights<double>(cfg)).total);
  }
  {
    Tape<double> t;
    auto r = iternet_forward(t, unrolled, img, cfg,
                             [](std::size_t k) { return "mini" + std::to_string(k); });
    t.backward(iternet_loss(r, gold, default_loss_weights<double>(cfg)).total);
  }
  double worst = 0;
  for (const auto& [name, e] : shared.entries()) {
    for (std::size_t i = 0; i < e.grad.size(); ++i) {
      double expected = 0;
      if (name.rfind("mini.", 0) == 0) {
        for (std::size_t k = 0; k + 1 < cfg.iterations; ++k)
          expected += unrolled.grad("mini" + std::to_string(k) + name.substr(4))[i];
      } else {
        expected = unrolled.grad(name)[i];
      }
      worst = std::max(worst, iternet::testing::rel_error(e.grad[i], expected, 1e-12));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(GradientCheck, ToyIterNetSampled) {
  auto cfg = IterNetConfig::toy();
  auto store = build_iternet<double>(cfg, 12);
  std::mt19937_64 rng(13);
  auto img = random_tensor(Shape{1, 3, 16, 16}, rng, 0, 1);
  basic_tensor<double> gold(Shape{1, 1, 16, 16});
  for (std::size_t i = 0; i < gold.size(); i += 4) gold[i] = 1;
  auto f = [&](Tape<double>& t, ParamStore<double>& s) {
    auto r = iternet_forward(t, s, img, cfg);
    return iternet_loss(r, gold, default_loss_weights<double>(cfg)).total;
  };
  auto res = grad_check(f, store, 1e-5, 1e-6, 3, 14);
  EXPECT_LT(res.max_rel_error, 1e-3) << res.worst;
}

TEST(Checkpoint, SaveLoadReproducesForwardExactly) {
  auto cfg = IterNetConfig::toy();
  auto store = build_iternet(cfg, 15);
  const auto path = temp_path("roundtrip.itnt");
  save_checkpoint(store, path.string());
  auto loaded = load_checkpoint(path.string(), cfg);
  std::mt19937_64 rng(16);
  auto img = random_tensor(Shape{1, 3, 32, 32}, rng, 0, 1).cast<float>();
  EXPECT_EQ(predict_outputs(loaded, cfg, img), predict_outputs(store, cfg, img));
  std::vector<std::string> expected;
  for (const auto& [name, shape] : iternet_layout(cfg)) expected.push_back(name);
  std::sort(expected.begin(), expected.end());
  EXPECT_EQ(loaded.names(), expected);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsTruncatedAndMismatchedFiles) {
  auto cfg = IterNetConfig::toy();
  auto store = build_iternet(cfg, 17);
  const auto path = temp_path("bad.itnt");
  auto bytes = encode_checkpoint(store);
  {
    std::ofstream f(path, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  EXPECT_THROW(load_checkpoint(path.string(), cfg), checkpoint_error);

  save_checkpoint(store, path.string());
  auto plain = IterNetConfig::make(cfg.base, 1);
  EXPECT_THROW(load_checkpoint(path.string(), plain), checkpoint_error);  // unknown mini.*
  auto wider = IterNetConfig::make(UNetConfig{3, 16, 3}, 4);
  EXPECT_THROW(load_checkpoint(path.string(), wider), checkpoint_error);  // shape mismatch
  save_checkpoint(build_iternet(plain, 1), path.string());
  EXPECT_THROW(load_checkpoint(path.string(), cfg), checkpoint_error);  // missing names
  EXPECT_THROW(load_checkpoint((path.string() + ".missing"), cfg), checkpoint_error);
  std::filesystem::remove(path);
}

#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "copanet/model.hpp"
#include "copanet/reference.hpp"
#include "test_util.hpp"

namespace copanet {
namespace {

NetworkConfig cifar_config(std::size_t depth, std::size_t k, std::size_t m,
                           Variant variant = Variant::plain) {
  NetworkConfig c;
  c.depth = depth;
  c.k = k;
  c.m = m;
  c.variant = variant;
  return c;
}

std::size_t count(const NetworkConfig& config) { return Model<float>(config).parameter_count(); }

TEST(NetworkConfig, DepthArithmetic) {
  EXPECT_EQ(cifar_config(164, 2, 1).units_per_stage(), 18u);
  EXPECT_EQ(cifar_config(20, 2, 1).units_per_stage(), 2u);
  EXPECT_EQ(cifar_config(56, 2, 1).units_per_stage(), 6u);
  try {
    cifar_config(100, 2, 1).units_per_stage();
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("9*units + 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("92 or 101"), std::string::npos) << msg;
  }
  NetworkConfig basic;
  basic.pathway = PathwayKind::basic;
  basic.depth = 110;
  EXPECT_EQ(basic.units_per_stage(), 18u);
}

TEST(NetworkConfig, TextRoundTrip) {
  auto c = cifar_config(56, 3, 2, Variant::cross_block);
  c.dropout = 0.1;
  c.widths = {16, 32, 64};
  EXPECT_EQ(NetworkConfig::from_text(c.to_text()), c);
  EXPECT_THROW(NetworkConfig::from_text("depth=20\nbogus=1\n"), UsageError);
  EXPECT_THROW(NetworkConfig::from_text("k=two\n"), UsageError);
}

TEST(NetworkConfig, WidthsScaleWithMultiplier) {
  auto c = cifar_config(164, 2, 3);
  EXPECT_EQ(c.stage_widths(), (std::array<std::size_t, 3>{135, 270, 540}));
  EXPECT_EQ(c.stage_mids(), (std::array<std::size_t, 3>{36, 69, 135}));
  EXPECT_EQ(cifar_config(164, 2, 1).stage_widths()[2], 180u);
}

TEST(Model, ForwardProducesLogits) {
  std::mt19937_64 rng(1);
  for (auto variant : {Variant::plain, Variant::cross_block}) {
    Model<float> model(cifar_config(20, 2, 1, variant));
    auto x = test::random_tensor<float>({2, 3, 32, 32}, rng);
    auto out = model.forward(x, {});
    EXPECT_EQ(out.logits.shape(), (Shape{2, 10}));
  }
  Model<float> model(cifar_config(20, 2, 1));
  EXPECT_THROW(model.forward(Tensor<float>({1, 3, 16, 16}), {}), ConfigError);
}

TEST(Model, StageSpatialSizes) {
  Model<float> model(cifar_config(20, 2, 1));
  std::mt19937_64 rng(2);
  std::map<std::string, Shape> shapes;
  Model<float>::ForwardOptions opt;
  opt.probe = [&](const std::string& name, const Tensor<float>& t) { shapes[name] = t.shape(); };
  model.forward(test::random_tensor<float>({1, 3, 32, 32}, rng), opt);
  EXPECT_EQ(shapes["stage1.unit1"], (Shape{1, 45, 32, 32}));
  EXPECT_EQ(shapes["stage2.unit1"], (Shape{1, 90, 16, 16}));
  EXPECT_EQ(shapes["stage3.unit1"], (Shape{1, 180, 8, 8}));
  EXPECT_EQ(shapes["head.pool"], (Shape{1, 180}));
}

TEST(Model, CrossBlockClassifierSeesAllBlocks) {
  auto config = cifar_config(20, 2, 1, Variant::cross_block);
  Model<float> model(config);
  std::mt19937_64 rng(3);
  Shape features, stage3_input;
  Model<float>::ForwardOptions opt;
  opt.probe = [&](const std::string& name, const Tensor<float>& t) {
    if (name == "head.pool") features = t.shape();
    if (name == "pool2") stage3_input = t.shape();
  };
  model.forward(test::random_tensor<float>({1, 3, 32, 32}, rng), opt);
  const auto w = config.stage_widths();
  EXPECT_EQ(features, (Shape{1, w[0] + w[1] + w[2]}));
  EXPECT_EQ(stage3_input, (Shape{1, w[0] + w[1], 8, 8}));
  EXPECT_EQ(model.classifier_layout(), (std::vector<std::size_t>{45, 90, 180}));
  EXPECT_EQ(model.stage(2).front().spec().pathway.in_channels, w[0] + w[1]);
}

TEST(Model, ProjectionOnlyAtStageEntry) {
  Model<float> model(cifar_config(29, 2, 1));
  EXPECT_FALSE(model.stage(0)[0].has_projection());
  for (std::size_t s = 1; s < 3; ++s) {
    EXPECT_TRUE(model.stage(s)[0].has_projection());
    for (std::size_t u = 1; u < model.stage(s).size(); ++u) {
      EXPECT_FALSE(model.stage(s)[u].has_projection());
    }
  }
}

TEST(Model, SinglePathwayHasNoMaxNodes) {
  Model<double> model(cifar_config(11, 1, 1));
  auto params = model.parameters();
  std::mt19937_64 rng(4);
  for (auto& p : params.parameters()) test::fill_normal(p.tensor, rng, 0.1);
  auto logits = model.forward(test::random_tensor({2, 3, 32, 32}, rng), {}).logits;
  ASSERT_TRUE(logits.requires_grad());
  EXPECT_EQ(count_ops(logits, "max_k"), 0u);
  Model<double> copa(cifar_config(11, 2, 1));
  auto l2 = copa.forward(test::random_tensor({2, 3, 32, 32}, rng), {}).logits;
  EXPECT_EQ(count_ops(l2, "max_k"), 3u);
}

TEST(Model, RegistryIsDeterministicAndUnique) {
  auto config = cifar_config(20, 2, 2, Variant::cross_block);
  Model<float> a(config), b(config);
  auto ra = a.parameters(), rb = b.parameters();
  ASSERT_EQ(ra.parameters().size(), rb.parameters().size());
  std::set<std::string> names;
  for (std::size_t i = 0; i < ra.parameters().size(); ++i) {
    EXPECT_EQ(ra.parameters()[i].name, rb.parameters()[i].name);
    EXPECT_EQ(ra.parameters()[i].tensor.shape(), rb.parameters()[i].tensor.shape());
    EXPECT_TRUE(names.insert(ra.parameters()[i].name).second) << ra.parameters()[i].name;
  }
  std::set<const void*> storage;
  for (auto& p : ra.parameters()) EXPECT_TRUE(storage.insert(p.tensor.node().get()).second);
}

TEST(ParameterCount, MatchesPublishedTotals) {
  const double m1 = static_cast<double>(count(cifar_config(164, 2, 1)));
  const double m2 = static_cast<double>(count(cifar_config(164, 2, 2)));
  const double m4 = static_cast<double>(count(cifar_config(164, 2, 4)));
  EXPECT_NEAR(m1 / 1.75e6, 1.0, 0.05) << m1;
  EXPECT_NEAR(m2 / 6.98e6, 1.0, 0.05) << m2;
  EXPECT_NEAR(m4 / 27.9e6, 1.0, 0.05) << m4;
  const double r2 = static_cast<double>(count(cifar_config(164, 2, 2, Variant::cross_block)));
  EXPECT_GT(r2, m2);
  EXPECT_LT(r2 - m2, 0.1e6);
}

// Closed-form recount of one bottleneck pathway: three pre-activation BNs
// (gamma + beta) and three bias-free convs.
std::size_t pathway_params(std::size_t in, std::size_t mid, std::size_t out) {
  return 2 * in + in * mid + 2 * mid + 9 * mid * mid + 2 * mid + mid * out;
}

TEST(ParameterCount, ClosedFormRecount) {
  for (auto variant : {Variant::plain, Variant::cross_block}) {
    auto config = cifar_config(29, 2, 1, variant);
    const auto w = config.stage_widths();
    const auto mid = config.stage_mids();
    const std::size_t units = config.units_per_stage();
    std::size_t pathways = 0, expected = 3 * 9 * w[0];
    std::array<std::size_t, 3> in{w[0], w[0], w[1]};
    if (variant == Variant::cross_block) in[2] = w[0] + w[1];
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t u = 0; u < units; ++u) {
        const std::size_t i = u == 0 ? in[s] : w[s];
        pathways += pathway_params(i, mid[s], w[s]);
        if (i != w[s]) expected += i * w[s];
      }
    }
    const std::size_t features = variant == Variant::cross_block ? w[0] + w[1] + w[2] : w[2];
    expected += 2 * features + features * 10 + 10;
    EXPECT_EQ(count(config), expected + 2 * pathways);
    // Adding pathways adds exactly one pathway total per unit.
    auto k3 = config;
    k3.k = 3;
    auto k4 = config;
    k4.k = 4;
    EXPECT_EQ(count(k3) - count(config), pathways);
    EXPECT_EQ(count(k4) - count(config), 2 * pathways);
  }
}

TEST(ParameterCount, MonotoneInEachFactor) {
  std::size_t previous = 0;
  for (std::size_t k : {1, 2, 3, 4}) {
    const auto c = count(cifar_config(20, k, 1));
    EXPECT_GT(c, previous);
    previous = c;
  }
  previous = 0;
  for (std::size_t m : {1, 2, 3}) {
    const auto c = count(cifar_config(20, 2, m));
    EXPECT_GT(c, previous);
    previous = c;
  }
  previous = 0;
  for (std::size_t depth : {11, 20, 29, 56}) {
    const auto c = count(cifar_config(depth, 2, 1));
    EXPECT_GT(c, previous);
    previous = c;
  }
}

TEST(DeploymentTable, RowsAndTotals) {
  const auto config = cifar_config(164, 2, 1);
  const auto rows = deployment_table(config);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[1].output_size, "32x32");
  EXPECT_EQ(rows[2].output_size, "16x16");
  EXPECT_EQ(rows[3].output_size, "8x8");
  EXPECT_EQ(rows[4].output_size, "1x1");
  EXPECT_EQ(rows[3].out_channels, 180u);
  EXPECT_EQ(rows[1].units, 18u);
  EXPECT_EQ(rows[1].pathway_layers, "[1x1,12; 3x3,12; 1x1,45] x2");
  EXPECT_EQ(rows.back().stage, "total");
  EXPECT_EQ(rows.back().params, count(config));
  std::size_t sum = 0;
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) sum += rows[i].params;
  EXPECT_EQ(sum, rows.back().params);
  const auto csv = deployment_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "stage,output_size,units,pathway_layers,in_channels,out_channels,params,"
            "cumulative_params");
}

template <typename T>
void randomize_model(Model<T>& model, std::mt19937_64& rng) {
  auto registry = model.parameters();
  std::uniform_real_distribution<double> gamma(0.5, 1.5);
  for (auto& p : registry.parameters()) {
    if (p.role == ParamRole::bn_gamma) {
      for (auto& v : p.tensor.data()) v = static_cast<T>(gamma(rng));
    } else {
      test::fill_normal(p.tensor, rng, p.role == ParamRole::bn_beta ? 0.1 : 0.3);
    }
  }
}

template <typename T>
void expect_k1_matches_reference(NetworkConfig config, std::uint64_t seed, int batches) {
  config.k = 1;
  Model<T> model(config);
  std::mt19937_64 init(seed);
  randomize_model(model, init);
  PreActResNet<T> reference(model);
  auto registry = model.parameters();
  const auto& ref_params = reference.parameters();
  ASSERT_EQ(ref_params.size(), registry.parameters().size());

  std::mt19937_64 data(seed + 1);
  for (int b = 0; b < batches; ++b) {
    auto x = test::random_tensor<T>({3, 3, config.input_size, config.input_size}, data, -2, 2);
    const std::vector<int> labels{b % 10, (b + 3) % 10, (b + 7) % 10};
    std::mt19937_64 drop_a(seed + 100 + b), drop_b(seed + 100 + b);
    typename Model<T>::ForwardOptions opt;
    opt.training = true;
    opt.rng = &drop_a;
    auto la = model.forward(x, opt).logits;
    auto lb = reference.forward(x, true, &drop_b);
    ASSERT_EQ(la.values(), lb.values()) << "batch " << b;
    registry.zero_grad();
    for (auto t : ref_params) t.zero_grad();
    backward(softmax_cross_entropy<T>(la, labels));
    backward(softmax_cross_entropy<T>(lb, labels));
    for (std::size_t i = 0; i < ref_params.size(); ++i) {
      const auto& name = registry.parameters()[i].name;
      const auto& ga = registry.parameters()[i].tensor.grad();
      const auto& gb = ref_params[i].grad();
      ASSERT_TRUE(std::equal(ga.begin(), ga.end(), gb.begin(), gb.end())) << name << " batch " << b;
    }
    const auto ref_buffers = reference.buffers();
    for (std::size_t i = 0; i < ref_buffers.size(); ++i) {
      ASSERT_EQ(*registry.buffers()[i].values, *ref_buffers[i]) << registry.buffers()[i].name;
    }
    EXPECT_EQ(model.forward(x).logits.values(), reference.forward(x, false).values());
  }
}

TEST(SinglePathway, MatchesPreActivationResNet) {
  NetworkConfig c;
  c.depth = 20;
  c.widths = {6, 10, 14};
  c.mids = {3, 5, 7};
  c.input_size = 16;
  expect_k1_matches_reference<double>(c, 1, 3);
  expect_k1_matches_reference<float>(c, 2, 3);
  c.variant = Variant::cross_block;
  expect_k1_matches_reference<float>(c, 3, 2);
  c.variant = Variant::plain;
  c.pathway = PathwayKind::basic;
  c.depth = 14;
  expect_k1_matches_reference<float>(c, 4, 2);
}

TEST(SinglePathway, ReferenceRejectsCompetingPathways) {
  NetworkConfig c;
  c.depth = 11;
  c.widths = {4, 4, 4};
  c.mids = {2, 2, 2};
  Model<float> model(c);
  EXPECT_THROW(PreActResNet<float>{model}, ConfigError);
}

}  // namespace
}  // namespace copanet

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "copanet/checkpoint.hpp"
#include "copanet/trainer.hpp"

namespace copanet {
namespace {

namespace fs = std::filesystem;

NetworkConfig small_config() {
  NetworkConfig c;
  c.depth = 11;
  c.k = 2;
  c.widths = {8, 16, 32};
  c.mids = {4, 8, 16};
  c.dropout = 0.0;
  return c;
}

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "copanet_checkpoint_test";
  fs::create_directories(dir);
  return dir / name;
}

template <typename T>
void train_briefly(Model<T>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto reg = model.parameters();
  he_init(reg, rng);
  const auto ds = make_synthetic(4, 4, seed);
  TrainPlan plan;
  plan.total_epochs = 2;
  plan.batch_size = 8;
  plan.lr_drop_fractions = {};
  SgdOptimizer<T> sgd(model.parameters(), 0.9, 1e-4);
  train(model, sgd, ds, Normalizer::fit(ds), plan, rng);
}

TEST(Checkpoint, EvalLogitsBitExactAfterReload) {
  Model<float> model(small_config());
  train_briefly(model, 3);
  const auto ds = make_synthetic(4, 3, 17);
  const auto norm = Normalizer::fit(ds);
  std::vector<float> before;
  evaluate(model, ds, norm, 5, &before);

  const auto path = temp_file("bitexact.ckpt");
  std::mt19937_64 rng(42);
  save_checkpoint(model, path, 2, rng, 7);

  const auto ck = read_checkpoint(path);
  Model<float> fresh(ck.config);
  restore(fresh, ck);
  std::vector<float> after;
  evaluate(fresh, ds, norm, 5, &after);
  ASSERT_EQ(before.size(), after.size());
  EXPECT_EQ(0, std::memcmp(before.data(), after.data(), before.size() * sizeof(float)));
  EXPECT_EQ(ck.epoch, 2u);
  EXPECT_EQ(ck.plan_digest, 7u);
}

TEST(Checkpoint, RestoresBatchNormRunningStats) {
  Model<double> model(small_config());
  train_briefly(model, 5);
  const auto ck = decode_checkpoint(encode_checkpoint(make_checkpoint(model, 0, std::mt19937_64(1), 0)),
                                    "memory");
  Model<double> fresh(small_config());
  restore(fresh, ck);
  auto a = model.parameters();
  auto b = fresh.parameters();
  ASSERT_EQ(a.buffers().size(), b.buffers().size());
  for (std::size_t i = 0; i < a.buffers().size(); ++i) {
    EXPECT_EQ(*a.buffers()[i].values, *b.buffers()[i].values) << a.buffers()[i].name;
  }
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].tensor.values(), b.parameters()[i].tensor.values());
  }
}

TEST(Checkpoint, RngStateRoundTrip) {
  std::mt19937_64 rng(123);
  for (int i = 0; i < 1000; ++i) rng();
  auto copy = deserialize_rng(serialize_rng(rng));
  for (int i = 0; i < 100; ++i) EXPECT_EQ(rng(), copy());
  EXPECT_THROW(deserialize_rng("not a state"), DataError);
}

TEST(Checkpoint, HeaderLayout) {
  Model<float> model(small_config());
  const auto bytes = encode_checkpoint(make_checkpoint(model, 0, std::mt19937_64(1), 0));
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 4), "CPNT");
  std::uint32_t version = 0;
  for (int b = 0; b < 4; ++b) version |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 + b])) << (8 * b);
  EXPECT_EQ(version, kCheckpointVersion);
  std::uint64_t digest = 0;
  for (int b = 0; b < 8; ++b) digest |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + b])) << (8 * b);
  EXPECT_EQ(digest, fnv1a64(model.config().to_text()));
}

TEST(Checkpoint, RawValuesAreLittleEndian) {
  Model<float> model(small_config());
  model.stem()[0] = 1.0f;  // 0x3f800000
  const auto ck = make_checkpoint(model, 0, std::mt19937_64(1), 0);
  const auto* rec = ck.find("stem.conv");
  ASSERT_NE(rec, nullptr);
  EXPECT_EQ(rec->dtype, 4);
  EXPECT_EQ(rec->raw[0], 0x00);
  EXPECT_EQ(rec->raw[1], 0x00);
  EXPECT_EQ(rec->raw[2], 0x80);
  EXPECT_EQ(rec->raw[3], 0x3f);
  EXPECT_EQ(rec->dims, (std::vector<std::uint64_t>{8, 3, 3, 3}));
}

TEST(Checkpoint, RejectsBadMagicAndVersion) {
  Model<float> model(small_config());
  auto bytes = encode_checkpoint(make_checkpoint(model, 0, std::mt19937_64(1), 0));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad, "x"), DataError);
  bad = bytes;
  bad[4] = 9;
  try {
    decode_checkpoint(bad, "x");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, RejectsTruncationEverywhere) {
  Model<float> model(small_config());
  const auto bytes = encode_checkpoint(make_checkpoint(model, 0, std::mt19937_64(1), 0));
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, std::size_t{40}, bytes.size() / 2,
                          bytes.size() - 1}) {
    EXPECT_THROW(decode_checkpoint(std::string_view(bytes).substr(0, cut), "cut"), DataError)
        << cut;
  }
  EXPECT_THROW(decode_checkpoint(bytes + "z", "long"), DataError);
}

TEST(Checkpoint, RejectsConfigMismatchAndMissingFile) {
  Model<float> model(small_config());
  const auto ck = make_checkpoint(model, 0, std::mt19937_64(1), 0);
  auto other = small_config();
  other.k = 3;
  Model<float> wrong(other);
  EXPECT_THROW(restore(wrong, ck), DataError);
  EXPECT_THROW(read_checkpoint(temp_file("does_not_exist.ckpt")), IoError);

  auto stripped = ck;
  stripped.records.pop_back();
  EXPECT_THROW(restore(model, stripped), DataError);
  auto extra = ck;
  extra.records.push_back(extra.records.front());
  extra.records.back().name = "stray";
  EXPECT_THROW(restore(model, extra), DataError);
  auto misshapen = ck;
  misshapen.records.front().dims[0] += 1;
  EXPECT_THROW(restore(model, misshapen), DataError);
}

TEST(Checkpoint, CrossPrecisionRestore) {
  Model<double> wide(small_config());
  train_briefly(wide, 9);
  const auto ck = make_checkpoint(wide, 0, std::mt19937_64(1), 0);
  Model<float> narrow(small_config());
  restore(narrow, ck);
  auto a = wide.parameters();
  auto b = narrow.parameters();
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto wa = a.parameters()[i].tensor.values();
    const auto wb = b.parameters()[i].tensor.values();
    for (std::size_t j = 0; j < wa.size(); ++j) EXPECT_EQ(static_cast<float>(wa[j]), wb[j]);
  }
  // float -> double -> float is the identity.
  Model<double> back(small_config());
  restore(back, make_checkpoint(narrow, 0, std::mt19937_64(1), 0));
  Model<float> again(small_config());
  restore(again, make_checkpoint(back, 0, std::mt19937_64(1), 0));
  auto c = again.parameters();
  for (std::size_t i = 0; i < b.parameters().size(); ++i) {
    EXPECT_EQ(b.parameters()[i].tensor.values(), c.parameters()[i].tensor.values());
  }
}

// Training 4 epochs straight equals training 2, checkpointing, restoring into
// fresh objects and training 2 more.
TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  auto config = small_config();
  config.dropout = 0.2;
  const auto ds = make_synthetic(4, 4, 21);
  const auto norm = Normalizer::fit(ds);
  TrainPlan plan;
  plan.total_epochs = 4;
  plan.batch_size = 8;
  plan.lr_drop_fractions = {0.5};
  plan.seed = 4;

  Model<double> straight(config);
  std::mt19937_64 rng_a(plan.seed);
  {
    auto reg = straight.parameters();
    he_init(reg, rng_a);
  }
  SgdOptimizer<double> sgd_a(straight.parameters(), plan.momentum, plan.weight_decay);
  train(straight, sgd_a, ds, norm, plan, rng_a);

  Model<double> first(config);
  std::mt19937_64 rng_b(plan.seed);
  {
    auto reg = first.parameters();
    he_init(reg, rng_b);
  }
  SgdOptimizer<double> sgd_b(first.parameters(), plan.momentum, plan.weight_decay);
  const auto path = temp_file("resume.ckpt");
  // Run epochs 0 and 1 of the 4-epoch plan, save, then abandon the run.
  struct Stop {};
  TrainOptions stop_after_two;
  stop_after_two.on_epoch_end = [&](const EpochRow& row) {
    if (row.epoch == 1) {
      save_checkpoint(first, path, 2, rng_b, fnv1a64(plan.to_text()), &sgd_b);
      throw Stop{};
    }
  };
  EXPECT_THROW(train(first, sgd_b, ds, norm, plan, rng_b, stop_after_two), Stop);

  const auto ck = read_checkpoint(path);
  EXPECT_EQ(ck.plan_digest, fnv1a64(plan.to_text()));
  Model<double> resumed(ck.config);
  restore(resumed, ck);
  SgdOptimizer<double> sgd_c(resumed.parameters(), plan.momentum, plan.weight_decay);
  EXPECT_TRUE(restore_optimizer(sgd_c, ck));
  auto rng_c = deserialize_rng(ck.rng_state);
  TrainOptions opts;
  opts.start_epoch = ck.epoch;
  train(resumed, sgd_c, ds, norm, plan, rng_c, opts);

  auto a = straight.parameters();
  auto c = resumed.parameters();
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].tensor.values(), c.parameters()[i].tensor.values())
        << a.parameters()[i].name;
  }
  for (std::size_t i = 0; i < a.buffers().size(); ++i) {
    EXPECT_EQ(*a.buffers()[i].values, *c.buffers()[i].values) << a.buffers()[i].name;
  }
}

TEST(Checkpoint, OptimizerRecordsOptional) {
  Model<float> model(small_config());
  SgdOptimizer<float> sgd(model.parameters(), 0.9, 0.0);
  const auto ck = make_checkpoint(model, 0, std::mt19937_64(1), 0);
  EXPECT_FALSE(restore_optimizer(sgd, ck));
}

}  // namespace
}  // namespace copanet

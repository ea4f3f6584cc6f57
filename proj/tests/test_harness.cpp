#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <set>
#include <sstream>

#include "bln/harness.hpp"

using namespace bln;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("bln_harness_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
             "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

std::string write_config(const TempDir& dir, const std::string& name, const std::string& text) {
  const std::string p = dir.file(name);
  write_file(p, text);
  return p;
}

const char* kSmallBln = R"({
  "task": "cnn-synthetic",
  "normalizer": "bln",
  "batch_size": 8,
  "epochs": 2,
  "seed": 3,
  "samples_per_class": 30,
  "train_fraction": 1.0
})";

std::vector<std::string> data_rows(const std::string& csv) {
  std::vector<std::string> rows;
  std::istringstream in(csv);
  bool header_seen = false;
  for (std::string line; std::getline(in, line);) {
    if (line.starts_with("#")) continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    rows.push_back(line);
  }
  return rows;
}

}  // namespace

TEST(Config, Defaults) {
  const ExperimentConfig c = parse_config("{}");
  EXPECT_EQ(c.task, Task::cnn_synthetic);
  EXPECT_EQ(c.epsilon, 1e-4);
  EXPECT_EQ(c.momentum.value, 0.9);
  EXPECT_FALSE(c.momentum.cumulative);
  EXPECT_EQ(c.train_fraction, 0.2);
  EXPECT_EQ(c.flags, InferenceFlags::all(false));
}

TEST(Config, FullParse) {
  const ExperimentConfig c = parse_config(R"({"task":"rnn-synthetic","normalizer":"ln",
    "normalizers":["bn","bln"],"batch_sizes":[1,25],"momentum":"cumulative",
    "flags":{"e_b":true,"std_f":true},"epsilon":0.001,"learning_rate":0.01})");
  EXPECT_EQ(c.task, Task::rnn_synthetic);
  EXPECT_EQ(c.normalizer, Normalizer::ln);
  EXPECT_EQ(c.normalizers, (std::vector<Normalizer>{Normalizer::bn, Normalizer::bln}));
  EXPECT_EQ(c.batch_sizes, (std::vector<std::size_t>{1, 25}));
  EXPECT_TRUE(c.momentum.cumulative);
  EXPECT_EQ(c.flags, (InferenceFlags{true, false, false, true}));
  EXPECT_EQ(c.epsilon, 1e-3);
}

TEST(Config, UnknownKeysNamed) {
  try {
    parse_config(R"({"std_f": true})");
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_STREQ(e.what(), "unknown config key 'std_f'");
  }
  try {
    parse_config(R"({"flags": {"std_F": true}})");
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_STREQ(e.what(), "unknown config key 'flags.std_F'");
  }
}

TEST(Config, InvalidValues) {
  EXPECT_THROW(parse_config(R"({"batch_size": 0})"), UsageError);
  EXPECT_THROW(parse_config(R"({"epochs": 0})"), UsageError);
  EXPECT_THROW(parse_config(R"({"epsilon": 0})"), UsageError);
  EXPECT_THROW(parse_config(R"({"train_fraction": 1.5})"), UsageError);
  EXPECT_THROW(parse_config(R"({"momentum": "fast"})"), UsageError);
  EXPECT_THROW(parse_config(R"({"normalizer": "gn"})"), UsageError);
  EXPECT_THROW(parse_config(R"({"task": "cnn-cifar10"})"), UsageError);
  EXPECT_THROW(parse_config("[1,2]"), UsageError);
  EXPECT_THROW(parse_config("{nope"), UsageError);
}

TEST(Splits, SizesAndDeterminism) {
  ExperimentConfig c = parse_config(kSmallBln);
  const Splits a = prepare_data(c);
  EXPECT_EQ(a.test.size(), 12u);
  EXPECT_EQ(a.validation.size(), 5u);
  EXPECT_EQ(a.train.size(), 43u);
  EXPECT_EQ(a.train.inputs.shape(), (Shape{43, 1, 8, 8}));
  const Splits b = prepare_data(c);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.validation, b.validation);
  c.train_fraction = 0.2;
  EXPECT_EQ(prepare_data(c).train.size(), 9u);
}

TEST(Train, CsvLayoutAndDeterminism) {
  TempDir dir;
  const auto cfg = write_config(dir, "c.json", kSmallBln);
  CommandOptions o{cfg, dir.file("a.csv"), dir.file("a.ckpt"), false, false, 1};
  ASSERT_EQ(cmd_train(o), kExitOk);
  o.out_path = dir.file("b.csv");
  o.checkpoint_path = dir.file("b.ckpt");
  ASSERT_EQ(cmd_train(o), kExitOk);
  const std::string a = read_text_file(dir.file("a.csv"));
  EXPECT_EQ(a, read_text_file(dir.file("b.csv")));
  EXPECT_EQ(read_text_file(dir.file("a.ckpt")), read_text_file(dir.file("b.ckpt")));

  std::istringstream in(a);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "# {");
  std::string header;
  while (std::getline(in, line))
    if (!line.starts_with("#")) {
      header = line;
      break;
    }
  EXPECT_EQ(header, "run_id,normalizer,batch_size,seed,epoch,step,split,loss,accuracy");
  const auto rows = data_rows(a);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_TRUE(rows[0].starts_with("bln-bs8-seed3,bln,8,3,1,6,train,"));
  EXPECT_TRUE(rows[1].starts_with("bln-bs8-seed3,bln,8,3,1,6,test,"));
  EXPECT_TRUE(rows[3].starts_with("bln-bs8-seed3,bln,8,3,2,12,test,"));
}

TEST(Train, SmokeConfigLossDecreases) {
  TempDir dir;
  const std::string cfg = std::string(BLN_SOURCE_DIR) + "/configs/smoke_bln.json";
  ASSERT_EQ(cmd_train({cfg, dir.file("s.csv"), "", false, false, 1}), kExitOk);
  std::vector<double> losses;
  for (const auto& row : data_rows(read_text_file(dir.file("s.csv")))) {
    std::vector<std::string> cells;
    std::istringstream ls(row);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    if (cells.at(6) == "train") losses.push_back(std::stod(cells.at(7)));
  }
  ASSERT_EQ(losses.size(), 3u);
  for (std::size_t e = 1; e < losses.size(); ++e) EXPECT_LE(losses[e], losses[e - 1]);
}

TEST(Train, CheckpointCollision) {
  TempDir dir;
  const auto cfg = write_config(dir, "c.json", kSmallBln);
  CommandOptions o{cfg, dir.file("a.csv"), dir.file("a.ckpt"), false, false, 1};
  ASSERT_EQ(cmd_train(o), kExitOk);
  std::ostringstream out, err;
  EXPECT_EQ(cmd_train(o, out, err), kExitUsage);
  EXPECT_NE(err.str().find("--force"), std::string::npos);
  o.force = true;
  EXPECT_EQ(cmd_train(o), kExitOk);
}

TEST(Train, UnknownKeyExitCode) {
  TempDir dir;
  const auto cfg = write_config(dir, "c.json", R"({"normaliser": "bln"})");
  std::ostringstream out, err;
  EXPECT_EQ(cmd_train({cfg, "", "", false, false, 1}, out, err), kExitUsage);
  EXPECT_NE(err.str().find("'normaliser'"), std::string::npos);
}

TEST(Train, EnvSeedOverride) {
  TempDir dir;
  const auto cfg = write_config(dir, "c.json", kSmallBln);
  ::setenv("BLN_SEED", "11", 1);
  std::ostringstream out, err;
  const int rc = cmd_train({cfg, "", "", false, false, 1}, out, err);
  ::unsetenv("BLN_SEED");
  ASSERT_EQ(rc, kExitOk) << err.str();
  EXPECT_NE(out.str().find("# BLN_SEED=11"), std::string::npos);
  EXPECT_NE(out.str().find("bln-bs8-seed11,bln,8,11,"), std::string::npos);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const ExperimentConfig c = parse_config(kSmallBln);
  const Splits data = prepare_data(c);
  TrainedRun run = run_training(c, data, Normalizer::bln, 8);
  const Checkpoint ck{c, run.network, run.input_shape, run.classes, run.normalizer, 8, c.flags};
  const std::string bytes = serialize_checkpoint(ck);
  ASSERT_EQ(bytes.substr(0, 4), "BLN1");
  const Checkpoint back = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  for (std::size_t i = 0; i < run.network.size(); ++i) {
    const auto a = run.network.layer(i).state();
    const auto b = back.network.layer(i).state();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t j = 0; j < a.size(); ++j) EXPECT_EQ(a[j].value, b[j].value);
  }
  // Subsequent metrics agree exactly.
  for (const auto& flags : enumerate_configs())
    EXPECT_EQ(network_evaluate(run.network, data.test, flags, 8),
              network_evaluate(back.network, data.test, flags, 8));
}

TEST(Checkpoint, CorruptInputs) {
  EXPECT_THROW(deserialize_checkpoint("XXXX"), DataError);
  const ExperimentConfig c = parse_config(kSmallBln);
  const Splits data = prepare_data(c);
  TrainedRun run = run_training(c, data, Normalizer::ln, 8);
  const std::string bytes = serialize_checkpoint(
      {c, run.network, run.input_shape, run.classes, run.normalizer, 8, c.flags});
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), DataError);
}

TEST(Gridsearch, RowsAndPurity) {
  TempDir dir;
  const auto cfg = write_config(dir, "c.json", kSmallBln);
  ASSERT_EQ(cmd_train({cfg, dir.file("t.csv"), dir.file("m.ckpt"), false, false, 1}), kExitOk);
  const std::string ck_before = read_text_file(dir.file("m.ckpt"));
  CommandOptions g{"", dir.file("g1.csv"), dir.file("m.ckpt"), false, false, 1};
  ASSERT_EQ(cmd_gridsearch(g), kExitOk);
  g.out_path = dir.file("g2.csv");
  g.threads = 3;
  ASSERT_EQ(cmd_gridsearch(g), kExitOk);
  EXPECT_EQ(read_text_file(dir.file("m.ckpt")), ck_before);
  const std::string csv = read_text_file(dir.file("g1.csv"));
  EXPECT_EQ(csv, read_text_file(dir.file("g2.csv")));

  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "rank,e_b,std_b,e_f,std_f,loss,accuracy");
  int rank = 0;
  while (std::getline(in, line)) {
    ++rank;
    EXPECT_TRUE(line.starts_with(std::to_string(rank) + ",")) << line;
  }
  EXPECT_EQ(rank, 16);

  // --search-on-test evaluates a different split.
  g.search_on_test = true;
  g.out_path = dir.file("g3.csv");
  ASSERT_EQ(cmd_gridsearch(g), kExitOk);
  EXPECT_NE(read_text_file(dir.file("g3.csv")), csv);
}

TEST(Gridsearch, NeedsBlnCheckpoint) {
  TempDir dir;
  const auto cfg = write_config(dir, "c.json",
                                R"({"normalizer":"ln","samples_per_class":20,"epochs":1})");
  ASSERT_EQ(cmd_train({cfg, dir.file("t.csv"), dir.file("m.ckpt"), false, false, 1}), kExitOk);
  std::ostringstream out, err;
  EXPECT_EQ(cmd_gridsearch({"", "", dir.file("m.ckpt"), false, false, 1}, out, err), kExitData);
  EXPECT_NE(err.str().find("no BLN layers to configure"), std::string::npos);
}

TEST(Compare, RunsMatchIndividualTraining) {
  TempDir dir;
  const auto cfg = write_config(dir, "c.json", R"({
    "normalizers": ["bn", "ln", "bln"], "batch_sizes": [1, 25],
    "epochs": 1, "seed": 5, "samples_per_class": 20})");
  std::ostringstream out, err;
  ASSERT_EQ(cmd_compare({cfg, "", "", false, false, 2}, out, err), kExitOk) << err.str();
  const auto rows = data_rows(out.str());
  std::set<std::string> ids;
  for (const auto& r : rows) ids.insert(r.substr(0, r.find(',')));
  EXPECT_EQ(ids.size(), 6u);
  EXPECT_TRUE(ids.contains("bln-bs25-seed5"));

  const auto single = write_config(dir, "s.json", R"({
    "normalizer": "ln", "batch_size": 25, "epochs": 1, "seed": 5, "samples_per_class": 20})");
  std::ostringstream sout;
  ASSERT_EQ(cmd_train({single, "", "", false, false, 1}, sout, err), kExitOk);
  std::vector<std::string> ln_rows;
  for (const auto& r : rows)
    if (r.starts_with("ln-bs25-seed5,")) ln_rows.push_back(r);
  EXPECT_EQ(ln_rows, data_rows(sout.str()));
}

TEST(Compare, NeedsTwoNormalizers) {
  TempDir dir;
  const auto cfg = write_config(dir, "c.json", R"({"normalizers": ["bln"]})");
  std::ostringstream out, err;
  EXPECT_EQ(cmd_compare({cfg, "", "", false, false, 1}, out, err), kExitUsage);
}

TEST(Gradcheck, ExitCodes) {
  std::ostringstream out, err;
  EXPECT_EQ(cmd_gradcheck({"bln", 25, 8, 1, false}, out, err), kExitOk);
  EXPECT_NE(out.str().find("PASS"), std::string::npos);
  EXPECT_EQ(cmd_gradcheck({"bln", 1, 8, 1, false}, out, err), kExitOk);
  EXPECT_EQ(cmd_gradcheck({"bln", 25, 8, 1, true}, out, err), kExitVerification);
  EXPECT_EQ(cmd_gradcheck({"net-bln", 4, 6, 1, true}, out, err), kExitVerification);
  EXPECT_EQ(cmd_gradcheck({"gn", 4, 6, 1, false}, out, err), kExitUsage);
}

/*
 * Copyright (c) 2026, The pacset authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <pacset/pacset.hpp>

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace pacset {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("pacset_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  CliRun run(const std::string& args) const {
    const auto out = path("stdout.txt");
    const auto err = path("stderr.txt");
    const auto cmd = std::string(PACSET_CLI_PATH) + " " + args + " > " + out + " 2> " + err;
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  static std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  void write(const std::string& name, const std::string& text) const { std::ofstream(path(name)) << text; }

  fs::path dir;
};

TEST_F(Cli, PackWritesAValidDeterministicFile) {
  ASSERT_EQ(run("generate --trees 12 --depth 7 --seed 3 --out " + path("f.json")).code, 0);
  const auto a = run("pack --model " + path("f.json") + " --layout bin_block_wdfs --block-bytes 4096 --out " + path("a.pac"));
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("bins 1"), std::string::npos);
  EXPECT_NE(a.out.find("padding"), std::string::npos);
  ASSERT_EQ(run("pack --model " + path("f.json") + " --block-bytes 4096 --out " + path("b.pac")).code, 0);
  const auto bytes = read_file(path("a.pac"));
  EXPECT_EQ(bytes, read_file(path("b.pac")));
  const auto model = decode(bytes);
  EXPECT_EQ(model.header.layout, Layout::bin_block_wdfs);
  EXPECT_EQ(model.header.num_trees, 12u);
  std::ostringstream fp;
  fp << std::hex << fingerprint(bytes);
  EXPECT_NE(a.out.find(fp.str()), std::string::npos);
}

TEST_F(Cli, BinLargerThanBlockIsAValidationExit) {
  ASSERT_EQ(run("generate --trees 682 --depth 3 --out " + path("f.json")).code, 0);
  const auto r = run("pack --model " + path("f.json") + " --bin-depth 9 --block-bytes 4096 --out " + path("f.pac"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("bin depth 9"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(path("f.pac")));
}

TEST_F(Cli, WarnsWhenThresholdsLosePrecision) {
  write("m.json", R"({"task":"regress","kind":"rf","num_features":1,"trees":[{"root":0,"nodes":[
    {"id":0,"feature":0,"threshold":0.1,"left":1,"right":2},
    {"id":1,"leaf_value":1,"cardinality":1},{"id":2,"leaf_value":2,"cardinality":1}]}]})");
  const auto r = run("pack --model " + path("m.json") + " --layout dfs --block-bytes 128 --out " + path("m.pac"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("1 thresholds rounded"), std::string::npos);
}

TEST_F(Cli, InferMatchesTheLibrary) {
  ASSERT_EQ(run("generate --trees 9 --depth 6 --kind gbt --task regress --num-obs 25 --out " + path("f.json") +
                " --observations-out " + path("obs.csv"))
                .code,
            0);
  ASSERT_EQ(run("pack --model " + path("f.json") + " --block-bytes 1024 --out " + path("f.pac")).code, 0);
  for (const std::string extra : {"", "--store mmap", "--store kv --nodes-per-value 4", "--mode per_bin_parallel"}) {
    const auto r = run("infer --packed " + path("f.pac") + " --observations " + path("obs.csv") + " --trace " +
                       path("t.jsonl") + " " + extra);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto store = open_file_store(path("f.pac"));
    const auto rows = read_observations(path("obs.csv"));
    const auto batch = infer_batch(store, rows);
    std::istringstream lines(r.out);
    std::istringstream traces(slurp(path("t.jsonl")));
    std::string line;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      ASSERT_TRUE(std::getline(lines, line));
      const auto j = json::parse(line);
      EXPECT_EQ(j.at("obs"), i);
      EXPECT_EQ(j.at("value").get<double>(), batch.predictions[i].value) << extra;
      ASSERT_TRUE(std::getline(traces, line));
      if (extra.find("kv") == std::string::npos) {
        EXPECT_EQ(json::parse(line).at("blocks").get<std::vector<std::uint64_t>>(), batch.traces[i].fetched);
      }
    }
  }
}

TEST_F(Cli, FeatureLengthMismatchNamesTheRow) {
  ASSERT_EQ(run("generate --trees 2 --depth 3 --features 4 --out " + path("f.json")).code, 0);
  ASSERT_EQ(run("pack --model " + path("f.json") + " --block-bytes 1024 --out " + path("f.pac")).code, 0);
  write("obs.csv", "f0,f1,f2,f3\n0.1,0.2,0.3,0.4\n0.5,0.5,0.5,0.5\n0.1,0.2,0.3\n");
  const auto r = run("infer --packed " + path("f.pac") + " --observations " + path("obs.csv"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("row 3"), std::string::npos) << r.err;
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("infer --packed " + path("missing.pac") + " --observations " + path("missing.csv")).code, 2);
  EXPECT_EQ(run("pack --model " + path("f.json") + " --out " + path("f.pac") + " --no-such-flag").code, 1);
  EXPECT_EQ(run("").code, 1);
  write("bad.json", "{\"task\": ");
  EXPECT_EQ(run("pack --model " + path("bad.json") + " --out " + path("f.pac")).code, 1);

  ASSERT_EQ(run("generate --trees 3 --depth 4 --features 4 --out " + path("f.json") + " --num-obs 3 --observations-out " +
                path("obs.csv"))
                .code,
            0);
  ASSERT_EQ(run("pack --model " + path("f.json") + " --block-bytes 512 --out " + path("f.pac")).code, 0);
  auto bytes = read_file(path("f.pac"));
  bytes[0] = std::byte{'Z'};
  write_file(path("bad.pac"), bytes);
  EXPECT_EQ(run("infer --packed " + path("bad.pac") + " --observations " + path("obs.csv")).code, 3);
  EXPECT_EQ(run("infer --packed " + path("f.pac") + " --observations " + path("obs.csv") + " --expect-block-bytes 4096").code, 3);

  // Point every root at an empty slot.
  bytes = read_file(path("f.pac"));
  const auto h = read_header(bytes).first;
  for (std::size_t t = 0; t < h.num_trees; ++t) {
    const auto off = kFixedHeaderBytes + 12 * h.bins.size() + 4 * t;
    const std::uint32_t last = static_cast<std::uint32_t>((bytes.size() - read_header(bytes).second) / kNodeBytes - 1);
    std::memcpy(bytes.data() + off, &last, 4);
  }
  write_file(path("bad.pac"), bytes);
  const auto r = run("infer --packed " + path("bad.pac") + " --observations " + path("obs.csv"));
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST_F(Cli, HelpDocumentsFlags) {
  const auto r = run("compare --help");
  EXPECT_EQ(r.code, 0);
  for (const char* flag : {"--model", "--synthetic", "--layout", "--block-bytes", "--bin-depth", "--trees-per-bin",
                           "--observations", "--num-obs", "--repetitions", "--warm", "--format", "--out", "--seed"}) {
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
  }
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, CompareReportsEveryLayout) {
  write("toy.json", R"({"task":"classify","kind":"rf","num_features":2,"num_classes":2,"trees":[
    {"root":0,"nodes":[{"id":0,"feature":0,"threshold":0.5,"left":1,"right":2},
      {"id":1,"leaf_class":0,"cardinality":3},{"id":2,"feature":1,"threshold":0.5,"left":3,"right":4},
      {"id":3,"leaf_class":1,"cardinality":2},{"id":4,"leaf_class":0,"cardinality":1}]}]})");
  write("obs.json", "[[0.1,0.9],[0.9,0.1],[0.9,0.9]]");
  const auto r = run("compare --model " + path("toy.json") + " --observations " + path("obs.json") +
                     " --block-bytes 4096");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = json::parse(r.out);
  EXPECT_TRUE(doc.at("predictions_agree").get<bool>());
  ASSERT_EQ(doc.at("rows").size(), 5u);
  for (const auto& row : doc.at("rows")) EXPECT_EQ(row.at("unique_blocks").at("mean"), 1.0);

  const auto tsv = run("compare --model " + path("toy.json") + " --observations " + path("obs.json") +
                       " --block-bytes 4096 --format tsv");
  EXPECT_EQ(tsv.out.substr(0, 6), "# bfs\n");
  EXPECT_EQ(run("compare --model " + path("toy.json") + " --block-bytes 4096").code, 1);  // no workload
}

TEST_F(Cli, ConfigFileSuppliesFlagsAndFlagsWin) {
  ASSERT_EQ(run("generate --trees 4 --depth 5 --out " + path("f.json")).code, 0);
  write("run.cfg", "# pack settings\nlayout = dfs\nblock_bytes = 2048\n");
  ASSERT_EQ(run("pack --config " + path("run.cfg") + " --model " + path("f.json") + " --out " + path("a.pac")).code, 0);
  auto h = decode(read_file(path("a.pac"))).header;
  EXPECT_EQ(h.layout, Layout::dfs);
  EXPECT_EQ(h.block_bytes, 2048u);
  ASSERT_EQ(run("pack --config " + path("run.cfg") + " --model " + path("f.json") + " --block-bytes 512 --out " +
                path("b.pac"))
                .code,
            0);
  h = decode(read_file(path("b.pac"))).header;
  EXPECT_EQ(h.layout, Layout::dfs);
  EXPECT_EQ(h.block_bytes, 512u);

  write("bad.cfg", "no_such_key = 1\n");
  EXPECT_EQ(run("pack --config " + path("bad.cfg") + " --model " + path("f.json") + " --out " + path("c.pac")).code, 1);
  EXPECT_EQ(run("pack --config " + path("none.cfg") + " --model " + path("f.json") + " --out " + path("c.pac")).code, 2);
}

TEST_F(Cli, SweepsAreReproducible) {
  const std::string depth = "sweep bin-depth --synthetic --trees 16 --depth 7 --num-obs 40 --block-bytes 2048 --depths 1,2,3";
  const auto a = run(depth);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(run(depth).out, a.out);
  EXPECT_EQ(json::parse(a.out).at("rows").size(), 3u);

  const auto kv = run("sweep kv-bucket --synthetic --trees 8 --depth 6 --num-obs 30 --sizes 1,4,all");
  ASSERT_EQ(kv.code, 0) << kv.err;
  const auto rows = json::parse(kv.out).at("rows");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].at("total_fetches"), rows[0].at("nodes_read"));
  EXPECT_EQ(rows[2].at("total_fetches"), 30);
  EXPECT_EQ(run("sweep kv-bucket --synthetic --sizes 0").code, 1);
  EXPECT_EQ(run("sweep").code, 1);
}

}  // namespace
}  // namespace pacset

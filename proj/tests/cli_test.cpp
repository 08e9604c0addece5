// SPDX-License-Identifier: Apache-2.0
/**
 * @file   cli_test.cpp
 * @brief  plan | train | verify | sweep through run_cli
 */
#include "common.hpp"

#include <nnplan/cli.hpp>
#include <nnplan/swap.hpp>

#include <gtest/gtest.h>
#include <json.hpp>

#include <fstream>
#include <regex>
#include <sstream>

#include <unistd.h>

using namespace nnplan;
namespace fs = std::filesystem;

namespace {

struct Out {
  int code = 0;
  std::string out, err;
};

Out cli(std::vector<std::string> args) {
  args.insert(args.begin(), "nnplan");
  std::vector<const char *> argv;
  for (auto &a : args)
    argv.push_back(a.c_str());
  std::ostringstream o, e;
  Out r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), o, e);
  r.out = o.str();
  r.err = e.str();
  return r;
}

std::string model(const char *name) { return test::model_path(name).string(); }

} // namespace

TEST(Cli, PlanPrintsPoolNearTheoreticalLinear) {
  const auto r = cli({"plan", model("mem_linear.ini")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::smatch m;
  ASSERT_TRUE(std::regex_search(r.out, m, std::regex(R"(pool_bytes\s+(\d+))")));
  const double kib = std::stod(m[1]) / 1024.0;
  EXPECT_NEAR(kib, 390590, 0.02 * 390590);
  EXPECT_NE(r.out.find("Execution order"), std::string::npos);
  EXPECT_NE(r.out.find("lower bound"), std::string::npos);
}

TEST(Cli, PlanJson) {
  const auto r = cli({"plan", model("walk_linear3.ini"), "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("pool_bytes"), j.at("lower_bound_bytes"));
  EXPECT_EQ(j.at("eo_max"), 12);
  EXPECT_FALSE(j.at("tensors").empty());
}

TEST(Cli, VerifyPassesOnInplaceModel) {
  const auto r = cli({"verify", model("desk_inplace.ini")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::smatch m;
  ASSERT_TRUE(std::regex_search(r.out, m, std::regex(R"(delta ([0-9.e+-]+))")));
  EXPECT_LE(std::stod(m[1]), 1e-4);
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
}

TEST(Cli, TrainWritesReportAndWeights) {
  const auto dir = fs::temp_directory_path() / ("nnplan-cli-" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const auto report = dir / "report.json", weights = dir / "w.bin";
  const auto r = cli({"train", model("desk_conv.ini"), "--swap", "proactive",
                      "--lookahead", "2", "--iterations", "4", "--seed", "5",
                      "--report", report.string(), "--export", weights.string(),
                      "--swap-dir", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream f(report);
  const auto j = nlohmann::json::parse(f);
  EXPECT_EQ(j.at("swap_mode"), "proactive");
  EXPECT_EQ(j.at("lookahead"), 2);
  EXPECT_EQ(j.at("iterations"), 4);
  EXPECT_FALSE(SwapStore::load(weights).empty());
  fs::remove_all(dir);
}

TEST(Cli, SweepOrdersPeaks) {
  const auto r = cli({"sweep", model("desk_conv.ini"), "--swap-modes",
                      "off,ondemand,reduced,proactive", "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  std::map<std::string, std::size_t> peak;
  for (const auto &row : j)
    peak[row.at("swap_mode").get<std::string>()] =
        row.at("memory").at("planner").at("peak_resident_bytes");
  ASSERT_EQ(peak.size(), 4u);
  EXPECT_EQ(peak.at("ondemand"), peak.at("reduced"));
  EXPECT_LE(peak.at("ondemand"), peak.at("proactive"));
  EXPECT_LE(peak.at("proactive"), peak.at("off"));
}

TEST(Cli, ErrorsGiveNonzeroExitAndDiagnostic) {
  auto r = cli({"plan", "/nonexistent/model.ini"});
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(r.err.empty());
  r = cli({"train", model("desk_conv.ini"), "--swap", "sideways"});
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(r.err.empty());
  r = cli({"frobnicate"});
  EXPECT_NE(r.code, 0);
  r = cli({"train", model("walk_linear3.ini")});
  EXPECT_NE(r.code, 0) << "a graph without a loss cannot be trained";
}

TEST(Cli, FreezeShrinksThePlan) {
  auto pool = [](const Out &r) {
    std::smatch m;
    EXPECT_TRUE(std::regex_search(r.out, m, std::regex(R"(pool_bytes\s+(\d+))")));
    return std::stoull(m[1]);
  };
  const auto base = cli({"plan", model("mem_fc_fc_fc.ini")});
  const auto frozen = cli({"plan", model("mem_fc_fc_fc.ini"), "--freeze", "fc2"});
  ASSERT_EQ(frozen.code, 0) << frozen.err;
  EXPECT_LT(pool(frozen), pool(base));
  EXPECT_NE(cli({"plan", model("mem_fc_fc_fc.ini"), "--freeze", "nope"}).code, 0);
}

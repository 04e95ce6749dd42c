#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "maskflow/cli.hpp"

using namespace maskflow;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("maskflow_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) { return detail::read_file(p); }

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Cli, PlotSamplersWritesOneRowPerGridPoint) {
  const auto dir = scratch("plot");
  const auto r = run({"plot-samplers", "--a", "0.05", "--grid", "1000", "--out", (dir / "c.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = slurp(dir / "c.csv");
  EXPECT_EQ(csv.rfind("kind,a,t,pdf,cdf\n", 0), 0u);
  EXPECT_EQ(count_lines(csv), 1001u);
  const auto both = run({"plot-samplers", "--a", "0.05,0.5", "--kinds", "gen,seg", "--grid", "11", "--out", (dir / "d.csv").string()});
  ASSERT_EQ(both.code, 0);
  EXPECT_EQ(count_lines(slurp(dir / "d.csv")), 1u + 3u * 11u);
  EXPECT_NE(slurp(dir / "d.csv").find("gen,0,0.500000,1.59576912"), std::string::npos);
}

TEST(Cli, UserErrorsExitWithOne) {
  const auto bad_flag = run({"plot-samplers", "--bogus", "--out", "x.csv"});
  EXPECT_EQ(bad_flag.code, 1);
  EXPECT_NE(bad_flag.err.find("--bogus"), std::string::npos);
  const auto unknown = run({"frobnicate"});
  EXPECT_EQ(unknown.code, 1);
  EXPECT_NE(unknown.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({}).code, 1);
  const auto missing = run({"eval", "--ckpt", "/nonexistent/model.st", "--data", "/nonexistent", "--out", "r.json"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("/nonexistent/model.st"), std::string::npos);
  EXPECT_EQ(run({"plot-samplers", "--a", "-1", "--out", (scratch("neg") / "c.csv").string()}).code, 1);
  EXPECT_EQ(run({"plot-samplers", "--kinds", "weird", "--out", (scratch("kind") / "c.csv").string()}).code, 1);
}

TEST(Cli, HelpListsFlagsWithDefaults) {
  for (const char* sub : {"gen-data", "train-codec", "analyze-latents", "plot-samplers", "train", "segment", "sample", "eval", "ablate", "reproduce"}) {
    const auto r = run({sub, "--help"});
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("--"), std::string::npos) << sub;
  }
  EXPECT_NE(run({"plot-samplers", "--help"}).out.find("[1000]"), std::string::npos);
}

TEST(Cli, DumpConfigRoundTrips) {
  const auto dir = scratch("dump");
  const auto r = run({"train", "--dump-config"});
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("steps"), 8000);
  EXPECT_EQ(j.at("batch"), 32);
  cli::write_text(dir / "cfg.json", r.out);
  const auto again = run({"train", "--config", (dir / "cfg.json").string(), "--dump-config"});
  EXPECT_EQ(again.out, r.out);
  cli::write_text(dir / "bad.json", R"({"stepz": 3})");
  EXPECT_EQ(run({"train", "--config", (dir / "bad.json").string(), "--dump-config"}).code, 1);
}

TEST(Cli, QueryAndCaptionParsing) {
  EXPECT_EQ(cli::parse_query("red circle").ids, (std::vector<int>{vocab::kSeg, 2, 8}));
  EXPECT_EQ(cli::parse_query("triangle cyan").ids, (std::vector<int>{vocab::kSeg, 7, 10}));
  EXPECT_THROW(cli::parse_query("red"), cli::UserError);
  EXPECT_THROW(cli::parse_query("red hexagon"), cli::UserError);
  EXPECT_EQ(cli::parse_caption("blue square green circle").ids, (std::vector<int>{4, 9, 3, 8}));
  EXPECT_TRUE(cli::parse_caption("").null);
}

TEST(Cli, PipelineEndToEnd) {
  const auto dir = scratch("pipeline");
  const auto data = (dir / "data").string(), codec = (dir / "codec.st").string(), ckpt = (dir / "model.st").string();
  ASSERT_EQ(run({"gen-data", "--n-train", "40", "--n-val", "10", "--seed", "3", "--out", data}).code, 0);
  const auto tc = run({"train-codec", "--data", data, "--steps", "5", "--width0", "8", "--width1", "8", "--batch", "4", "--out", codec});
  ASSERT_EQ(tc.code, 0) << tc.err;
  const auto body = tc.out.substr(0, tc.out.size() - 1);
  const auto last = nlohmann::json::parse(body.substr(body.rfind('\n') + 1));
  EXPECT_EQ(last.at("event"), "done");
  cli::write_text(dir / "cfg.json",
                  R"({"steps": 4, "batch": 4, "model": {"dim": 16, "depth": 1, "heads": 2, "cond_dim": 8, "mlp_ratio": 2, "time_freqs": 8}})");
  const auto tr = run({"train", "--config", (dir / "cfg.json").string(), "--codec", codec, "--data", data, "--log-every", "1", "--out", ckpt});
  ASSERT_EQ(tr.code, 0) << tr.err;
  std::istringstream lines(tr.out);
  int steps = 0;
  for (std::string line; std::getline(lines, line);) {
    const auto j = nlohmann::json::parse(line);
    if (j.at("event") == "step") {
      ++steps;
      for (const char* k : {"step", "loss", "seg_loss", "gen_loss", "lr"}) EXPECT_TRUE(j.contains(k)) << k;
    }
  }
  EXPECT_EQ(steps, 4);
  const auto report = (dir / "report.json").string();
  ASSERT_EQ(run({"eval", "--ckpt", ckpt, "--data", data, "--out", report, "--csv", (dir / "report.csv").string()}).code, 0);
  const auto j = nlohmann::json::parse(slurp(report));
  EXPECT_EQ(j.at("count"), 10);
  EXPECT_DOUBLE_EQ(j.at("giou").get<double>(), j.at("miou").get<double>());
  EXPECT_EQ(count_lines(slurp(dir / "report.csv")), 11u);
  const auto image = (dir / "data" / "val" / "000040_image.png").string();
  ASSERT_EQ(run({"segment", "--ckpt", ckpt, "--image", image, "--query", "red circle", "--out", (dir / "m.png").string()}).code, 0);
  EXPECT_EQ(read_png(dir / "m.png", 1).width, 32);
  ASSERT_EQ(run({"sample", "--ckpt", ckpt, "--caption", "red circle", "--steps", "2", "--out", (dir / "s.png").string()}).code, 0);
  EXPECT_EQ(read_png(dir / "s.png", 3).height, 32);
  const auto resumed = run({"train", "--resume", ckpt, "--data", data, "--steps", "6", "--out", ckpt});
  EXPECT_EQ(resumed.code, 1);  // the stored config governs a resumed run
  EXPECT_EQ(run({"train", "--resume", ckpt, "--data", data, "--out", (dir / "again.st").string()}).code, 0);
  const auto ab = run({"ablate", "--base", (dir / "cfg.json").string(), "--codec", codec, "--data", data, "--arms", "base,shortcut=off", "--out",
                       (dir / "results.csv").string()});
  ASSERT_EQ(ab.code, 0) << ab.err;
  EXPECT_EQ(count_lines(slurp(dir / "results.csv")), 3u);
  EXPECT_EQ(run({"ablate", "--codec", codec, "--data", data, "--arms", "nope", "--out", (dir / "x.csv").string()}).code, 1);
}

TEST(Cli, MissingPrerequisiteNamesTheCommand) {
  const auto dir = scratch("prereq");
  const auto r = run({"analyze-latents", "--codec", (dir / "codec.st").string(), "--data", (dir / "data").string(), "--out", (dir / "a.csv").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("train-codec"), std::string::npos);
}

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "latentvision/synthetic.hpp"
#include "latentvision/train.hpp"

using namespace lvc;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("lvc_cli_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& rel) const {
    return (path / rel).string();
  }
};

int run_cli(const std::string& args, std::string* output = nullptr) {
  std::string cmd = std::string(LVC_CLI_PATH) + " " + args;
  std::string log = (fs::temp_directory_path() / "lvc_cli_out.txt").string();
  int rc = std::system((cmd + " >" + log + " 2>&1").c_str());
  if (output) {
    std::ifstream is(log);
    std::stringstream ss;
    ss << is.rdbuf();
    *output = ss.str();
  }
  return WEXITSTATUS(rc);
}

std::string file_text(const std::string& path) {
  std::ifstream is(path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> csv_rows(const std::string& path) {
  std::ifstream is(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

// Shared fixture: a tiny dataset plus randomly initialized codec weights.
struct CliFixture {
  TempDir dir{"fixture"};
  std::string data, codec_path;

  CliFixture() {
    data = dir / "data";
    generate_fixture(data, 3, 2, 0, 64, 9);
    CodecModel codec(QualityConfig::for_quality(4), 99, 8);
    codec_path = dir / "codec.lvcw";
    save_codec(codec_path, codec);
  }
};

CliFixture& fixture() {
  static CliFixture f;
  return f;
}

}  // namespace

TEST(Cli, CompressProducesFilesAndCsv) {
  CliFixture& f = fixture();
  TempDir out("compress");
  std::string imgs = f.data + "/hgrating/0000.ppm " + f.data +
                     "/vgrating/0000.ppm " + f.data + "/checker/0000.ppm";
  int rc = run_cli("compress " + imgs + " --weights " + f.codec_path +
                   " --out " + out.path.string());
  EXPECT_EQ(rc, 0);
  EXPECT_TRUE(fs::exists(out / "0000.lvc") || fs::exists(out.path));
  int lvc_count = 0;
  for (const auto& e : fs::directory_iterator(out.path))
    if (e.path().extension() == ".lvc") ++lvc_count;
  EXPECT_EQ(lvc_count, 3);

  auto rows = csv_rows(out / "bpp.csv");
  ASSERT_EQ(rows.size(), 4u);  // header + 3
  EXPECT_EQ(rows[0], (std::vector<std::string>{"file", "H", "W", "bytes",
                                               "bpp"}));
  for (size_t i = 1; i < rows.size(); ++i) {
    double h = std::stod(rows[i][1]), w = std::stod(rows[i][2]);
    double bytes = std::stod(rows[i][3]), bpp = std::stod(rows[i][4]);
    EXPECT_NEAR(bpp, bytes * 8.0 / (h * w), 1e-9);
  }
}

TEST(Cli, CompressMissingWeightsExit2) {
  CliFixture& f = fixture();
  int rc = run_cli("compress " + f.data +
                   "/hgrating/0000.ppm --weights /nonexistent.lvcw --out /tmp");
  EXPECT_EQ(rc, 2);
}

TEST(Cli, CompressUnreadableImageListedInErrorsCsv) {
  CliFixture& f = fixture();
  TempDir out("compress_err");
  std::string bad = out / "not_an_image.ppm";
  std::ofstream(bad) << "garbage";
  int rc = run_cli("compress " + bad + " " + f.data +
                   "/hgrating/0001.ppm --weights " + f.codec_path + " --out " +
                   out.path.string());
  EXPECT_EQ(rc, 0);  // one image succeeded
  auto errs = csv_rows(out / "errors.csv");
  ASSERT_EQ(errs.size(), 2u);
  EXPECT_NE(errs[1][0].find("not_an_image"), std::string::npos);
}

TEST(Cli, LatentsCountAndRerunIdentical) {
  CliFixture& f = fixture();
  TempDir out("latents");
  std::string s1 = out / "a.lvst", s2 = out / "b.lvst";
  std::string base = "latents --root " + f.data + " --weights " +
                     f.codec_path + " --split val --out ";
  std::string text;
  ASSERT_EQ(run_cli(base + s1, &text), 0);
  EXPECT_NE(text.find("8 record(s)"), std::string::npos);  // 4 classes x 2
  ASSERT_EQ(run_cli(base + s2), 0);
  EXPECT_EQ(file_text(s1), file_text(s2));
}

TEST(Cli, LatentsBadRootExit2) {
  CliFixture& f = fixture();
  int rc = run_cli("latents --root /no/such/dir --weights " + f.codec_path +
                   " --out /tmp/x.lvst");
  EXPECT_EQ(rc, 2);
}

TEST(Cli, TrainFrozenArtifactsAndSummary) {
  CliFixture& f = fixture();
  TempDir out("train");
  json cfg = {{"mode", "frozen"},
              {"dataset_root", f.data},
              {"codec_weights", f.codec_path},
              {"quality_index", 4},
              {"epochs", 2},
              {"batch_size", 8},
              {"learning_rate", 1e-3},
              {"seed", 3},
              {"classifier_width_divisor", 8},
              {"output_dir", out / "run1"}};
  std::string cfg_path = out / "spec.json";
  std::ofstream(cfg_path) << cfg.dump();
  ASSERT_EQ(run_cli("train --config " + cfg_path), 0);

  for (const char* artifact : {"classifier.lvcw", "metrics.csv",
                               "summary.json", "loss.svg", "top1.svg",
                               "config.json"})
    EXPECT_TRUE(fs::exists(fs::path(out / "run1") / artifact)) << artifact;

  auto rows = csv_rows(out / "run1/metrics.csv");
  EXPECT_EQ(rows.size(), 3u);  // header + one row per epoch

  json summary = json::parse(file_text(out / "run1/summary.json"));
  double max_top1 = 0;
  for (size_t i = 1; i < rows.size(); ++i)
    max_top1 = std::max(max_top1, std::stod(rows[i][3]));
  EXPECT_EQ(summary["best_top1"].get<double>(), max_top1);
}

TEST(Cli, TrainUnknownConfigKeyExit2) {
  TempDir out("badkey");
  std::string cfg_path = out / "spec.json";
  std::ofstream(cfg_path) << R"({"mode":"frozen","banana":1})";
  std::string text;
  EXPECT_EQ(run_cli("train --config " + cfg_path, &text), 2);
  EXPECT_NE(text.find("banana"), std::string::npos);
}

TEST(Cli, TrainRerunIdenticalMetrics) {
  CliFixture& f = fixture();
  TempDir out("repro");
  json cfg = {{"mode", "frozen"},
              {"dataset_root", f.data},
              {"codec_weights", f.codec_path},
              {"quality_index", 4},
              {"epochs", 2},
              {"batch_size", 8},
              {"seed", 11},
              {"classifier_width_divisor", 8}};
  std::string cfg_path = out / "spec.json";
  std::ofstream(cfg_path) << cfg.dump();
  ASSERT_EQ(run_cli("train --config " + cfg_path + " --out " + (out / "r1")),
            0);
  ASSERT_EQ(run_cli("train --config " + cfg_path + " --out " + (out / "r2")),
            0);
  EXPECT_EQ(file_text(out / "r1/metrics.csv"), file_text(out / "r2/metrics.csv"));
}

TEST(Cli, EvalPrintsMetricsAndIsDeterministic) {
  CliFixture& f = fixture();
  TempDir out("eval");
  std::string store = out / "val.lvst";
  ASSERT_EQ(run_cli("latents --root " + f.data + " --weights " + f.codec_path +
                    " --split val --out " + store),
            0);
  json cfg = {{"mode", "frozen"},      {"dataset_root", f.data},
              {"codec_weights", f.codec_path}, {"quality_index", 4},
              {"epochs", 1},           {"batch_size", 8},
              {"seed", 1},             {"classifier_width_divisor", 8},
              {"output_dir", out / "run"}};
  std::string cfg_path = out / "spec.json";
  std::ofstream(cfg_path) << cfg.dump();
  ASSERT_EQ(run_cli("train --config " + cfg_path), 0);

  std::string text;
  int rc = run_cli("eval --classifier " + (out / "run/classifier.lvcw") +
                       " --store " + store + " --out " + (out / "e1.csv"),
                   &text);
  EXPECT_EQ(rc, 0);
  EXPECT_NE(text.find("top1 "), std::string::npos);
  EXPECT_NE(text.find("mean_bpp "), std::string::npos);
  ASSERT_EQ(run_cli("eval --classifier " + (out / "run/classifier.lvcw") +
                    " --store " + store + " --out " + (out / "e2.csv")),
            0);
  EXPECT_EQ(file_text(out / "e1.csv"), file_text(out / "e2.csv"));
}

TEST(Cli, EvalMismatchedChannelsExit2) {
  CliFixture& f = fixture();
  TempDir out("eval_mismatch");
  std::string store = out / "val.lvst";
  ASSERT_EQ(run_cli("latents --root " + f.data + " --weights " + f.codec_path +
                    " --split val --out " + store),
            0);
  // A classifier for 320-channel latents cannot consume the 192-channel
  // store.
  ClassifierConfig cfg;
  cfg.num_classes = 4;
  cfg.latent_channels = 320;
  cfg = cfg.scaled(8);
  CResNet wrong(cfg, 1);
  std::string wrong_path = out / "wrong.lvcw";
  save_classifier(wrong_path, wrong);
  EXPECT_EQ(run_cli("eval --classifier " + wrong_path + " --store " + store),
            2);
}

TEST(Cli, ReportTableAndSkipsBadDirs) {
  TempDir out("report");
  auto make_run = [&](const std::string& name, int quality,
                      const std::string& mode, double top1) {
    fs::create_directories(out / name);
    std::ofstream(fs::path(out / name) / "config.json")
        << json{{"quality_index", quality}, {"mode", mode}}.dump();
    std::ofstream(fs::path(out / name) / "summary.json")
        << json{{"best_top1", top1}, {"final_top5", 99.0}}.dump();
  };
  make_run("q1f", 1, "frozen", 40.0);
  make_run("q4f", 4, "frozen", 55.0);
  make_run("q8f", 8, "frozen", 60.0);
  make_run("q1j", 1, "joint", 62.0);
  make_run("q4j", 4, "joint", 66.0);
  make_run("q8j", 8, "joint", 70.0);
  fs::create_directories(out / "broken");  // no summary.json -> skipped

  std::string text;
  int rc = run_cli("report " + (out / "q1f") + " " + (out / "q4f") + " " +
                       (out / "q8f") + " " + (out / "q1j") + " " +
                       (out / "q4j") + " " + (out / "q8j") + " " +
                       (out / "broken") + " --out " + out.path.string(),
                   &text);
  EXPECT_EQ(rc, 0);
  auto rows = csv_rows(out / "report.csv");
  ASSERT_EQ(rows.size(), 4u);  // header + 3 qualities
  EXPECT_EQ(rows[0][0], "quality");
  ASSERT_EQ(rows[0].size(), 5u);  // quality + 2 modes x 2 metrics
  EXPECT_EQ(rows[1][0], "1");
  EXPECT_EQ(rows[3][0], "8");
  EXPECT_TRUE(fs::exists(out / "report.md"));
  EXPECT_NE(text.find("| quality |"), std::string::npos);

  // No readable dirs -> exit 2.
  EXPECT_EQ(run_cli("report " + (out / "broken")), 2);
}

TEST(Cli, NoSubcommandExit2) {
  EXPECT_EQ(run_cli(""), 2);
}

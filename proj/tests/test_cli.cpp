#include "doctest.h"

#include "bornovit/image.hpp"
#include "bornovit/trainer.hpp"
#include "support/glyphs.hpp"

#include <fstream>
#include <sstream>

#include <sys/wait.h>

namespace fs = std::filesystem;
using namespace bornovit;
using bornovit::testing::scratch_dir;

#ifndef BORNOVIT_CLI
#error "BORNOVIT_CLI must name the command-line binary"
#endif

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Run cli(const std::string& args, const fs::path& scratch) {
  const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd = std::string(BORNOVIT_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  fs::remove(out);
  fs::remove(err);
  return r;
}

std::size_t count_files(const fs::path& dir) {
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++n;
  return n;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

const char* kToyConfig = R"({
  "model": {"embed_dim": 16, "depth": 1, "num_heads": 2, "mlp_hidden_dim": 32},
  "train": {"learning_rate": 0.001, "batch_size": 8, "max_epochs": 2, "patience_limit": 3}
})";

}  // namespace

TEST_CASE("every subcommand answers --help without side effects") {
  const auto dir = scratch_dir("cli_help");
  for (const char* sub : {"", "train", "eval", "profile", "gradcam", "crop-page"}) {
    CAPTURE(sub);
    const auto r = cli(std::string(sub) + " --help", dir);
    CHECK(r.code == 0);
    CHECK(r.out.find("Usage") != std::string::npos);
  }
  CHECK(count_files(dir) == 0);
  CHECK(cli("", dir).code == 2);
  CHECK(cli("frobnicate", dir).code == 2);
  CHECK(cli("crop-page --image x.png", dir).code == 2);
  fs::remove_all(dir);
}

TEST_CASE("profile") {
  const auto dir = scratch_dir("cli_profile");
  auto r = cli("profile", dir);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("653,706") != std::string::npos);

  r = cli("profile --json --num-classes 84", dir);
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  bool found = false;
  for (const auto& row : j["rows"]) {
    if (row["key"] == "head") {
      CHECK(row["params"] == 10836);
      found = true;
    }
  }
  CHECK(found);

  write_file(dir / "bad.json", R"({"model": {"depht": 3}})");
  r = cli("profile --config " + (dir / "bad.json").string(), dir);
  CHECK(r.code == 2);
  CHECK(r.err.find("model.depht") != std::string::npos);
  CHECK(cli("profile --num-classes 0", dir).code == 2);
  fs::remove_all(dir);
}

TEST_CASE("train, eval and gradcam on a toy dataset") {
  const auto dir = scratch_dir("cli_train");
  const auto data = bornovit::testing::write_glyph_folder(dir / "toy", 5, 48, 3);
  write_file(dir / "run.json", kToyConfig);
  const std::string base = "train --config " + (dir / "run.json").string() + " --data-dir " + data.string();

  auto r = cli("train --config " + (dir / "run.json").string() + " --data-dir " + (dir / "nowhere").string() +
                   " --out " + (dir / "x").string(),
               dir);
  CHECK(r.code == 3);
  CHECK(r.err.find("nowhere") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "x"));

  r = cli(base + " --out " + (dir / "a").string() + " --seed 7", dir);
  REQUIRE(r.code == 0);
  for (int f = 0; f < 5; ++f) {
    CHECK(fs::exists(dir / "a" / ("fold" + std::to_string(f) + ".bvit")));
    CHECK(fs::exists(dir / "a" / ("metrics_fold" + std::to_string(f) + ".jsonl")));
  }
  // Per-epoch records stream to stderr as JSON lines.
  CHECK(r.err.find("\"val_loss\"") != std::string::npos);
  const auto summary = nlohmann::json::parse(slurp(dir / "a" / "summary.json"));
  CHECK(summary["folds"].size() == 5);
  CHECK(summary["config"]["train"]["seed"] == 7);
  CHECK(summary["config"]["model"]["num_classes"] == 3);

  SUBCASE("same seed gives a byte-identical summary") {
    REQUIRE(cli(base + " --out " + (dir / "b").string() + " --seed 7", dir).code == 0);
    CHECK(slurp(dir / "a" / "summary.json") == slurp(dir / "b" / "summary.json"));
    CHECK(slurp(dir / "a" / "fold2.bvit") == slurp(dir / "b" / "fold2.bvit"));
  }

  SUBCASE("eval writes a consistent report") {
    const auto ckpt = (dir / "a" / "fold0.bvit").string();
    r = cli("eval --checkpoint " + ckpt + " --data-dir " + data.string() + " --out " + (dir / "ev").string(), dir);
    REQUIRE(r.code == 0);
    CHECK(r.out.find("macro avg") != std::string::npos);
    const auto report = nlohmann::json::parse(slurp(dir / "ev" / "report.json"));
    CHECK(report["total"] == 15);
    // accuracy = trace / total, recomputed from the CSV
    std::istringstream csv(slurp(dir / "ev" / "confusion.csv"));
    std::string line;
    std::getline(csv, line);
    long trace = 0, total = 0;
    for (int row = 0; std::getline(csv, line); ++row) {
      std::istringstream cells(line);
      std::string cell;
      std::getline(cells, cell, ',');
      for (int col = 0; std::getline(cells, cell, ','); ++col) {
        total += std::stol(cell);
        if (col == row) trace += std::stol(cell);
      }
    }
    CHECK(total == 15);
    CHECK(report["accuracy"].get<double>() == doctest::Approx(static_cast<double>(trace) / 15.0));

    const auto other = bornovit::testing::scratch_dir("cli_other");
    for (const char* cls : {"p", "q", "r", "s"}) {
      fs::create_directories(other / cls);
      write_png(other / cls / "x.png", Image(20, 20, 1, 100));
    }
    r = cli("eval --checkpoint " + ckpt + " --data-dir " + other.string() + " --out " + (dir / "ev2").string(), dir);
    CHECK(r.code == 4);
    CHECK(r.err.find("head") != std::string::npos);
    fs::remove_all(other);

    auto bytes = slurp(dir / "a" / "fold0.bvit");
    bytes.resize(bytes.size() / 2);
    write_file(dir / "cut.bvit", bytes);
    r = cli("eval --checkpoint " + (dir / "cut.bvit").string() + " --data-dir " + data.string() + " --out " +
                (dir / "ev3").string(),
            dir);
    CHECK(r.code == 2);
    CHECK(r.err.find("offset") != std::string::npos);
  }

  SUBCASE("gradcam writes deterministic PNGs") {
    const auto ckpt = (dir / "a" / "fold1.bvit").string();
    fs::path image;
    for (const auto& e : fs::recursive_directory_iterator(data)) {
      if (e.path().extension() == ".png") {
        image = e.path();
        break;
      }
    }
    r = cli("gradcam --checkpoint " + ckpt + " --image " + image.string() + " --out " + (dir / "g1").string(), dir);
    REQUIRE(r.code == 0);
    CHECK(r.out.find("confidence") != std::string::npos);
    REQUIRE(cli("gradcam --checkpoint " + ckpt + " --image " + image.string() + " --out " + (dir / "g2").string(),
                dir)
                .code == 0);
    const auto overlay = read_image(dir / "g1" / "overlay.png");
    CHECK(overlay.height == 224);
    CHECK(overlay.width == 224);
    CHECK(slurp(dir / "g1" / "heatmap.png") == slurp(dir / "g2" / "heatmap.png"));
    CHECK(slurp(dir / "g1" / "overlay.png") == slurp(dir / "g2" / "overlay.png"));

    CHECK(cli("gradcam --checkpoint " + ckpt + " --image " + image.string() + " --class 3 --out " +
                  (dir / "g3").string(),
              dir)
              .code == 2);
    write_file(dir / "junk.png", "not an image");
    CHECK(cli("gradcam --checkpoint " + ckpt + " --image " + (dir / "junk.png").string() + " --out " +
                  (dir / "g4").string(),
              dir)
              .code == 3);
  }
  fs::remove_all(dir);
}

TEST_CASE("train rejects a config that disagrees with the dataset") {
  const auto dir = scratch_dir("cli_mismatch");
  const auto data = bornovit::testing::write_glyph_folder(dir / "toy", 5, 32, 4);
  write_file(dir / "run.json", R"({"model": {"num_classes": 10}})");
  const auto r = cli("train --config " + (dir / "run.json").string() + " --data-dir " + data.string() + " --out " +
                         (dir / "o").string(),
                     dir);
  CHECK(r.code == 4);
  write_file(dir / "typo.json", R"({"train": {"learnig_rate": 0.1}})");
  const auto t = cli("train --config " + (dir / "typo.json").string() + " --data-dir " + data.string(), dir);
  CHECK(t.code == 2);
  CHECK(t.err.find("train.learnig_rate") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("crop-page") {
  const auto dir = scratch_dir("cli_crop");
  Image page(1000, 600, 3, 0);
  for (Index y = 0; y < 1000; ++y)
    for (Index x = 0; x < 600; ++x) {
      page.at(y, x, 0) = static_cast<std::uint8_t>(y % 251);
      page.at(y, x, 1) = static_cast<std::uint8_t>(x % 241);
      page.at(y, x, 2) = static_cast<std::uint8_t>((x + y) % 7);
    }
  write_png(dir / "page.png", page);

  auto r = cli("crop-page --image " + (dir / "page.png").string() + " --out-dir " + (dir / "cells").string(), dir);
  REQUIRE(r.code == 0);
  CHECK(count_files(dir / "cells") == 60);
  Index area = 0;
  for (const auto& e : fs::directory_iterator(dir / "cells")) {
    const auto cell = read_image(e.path());
    CHECK(cell.height == 100);
    CHECK(cell.width == 100);
    area += cell.height * cell.width;
  }
  CHECK(area == 1000 * 600);
  const auto c34 = read_image(dir / "cells" / "cell_3_4.png");
  CHECK(c34.at(0, 0, 0) == page.at(300, 400, 0));
  CHECK(c34.at(0, 0, 1) == page.at(300, 400, 1));

  r = cli("crop-page --image " + (dir / "page.png").string() + " --rows 1 --cols 1 --out-dir " +
              (dir / "one").string(),
          dir);
  REQUIRE(r.code == 0);
  CHECK(read_image(dir / "one" / "cell_0_0.png") == page);

  CHECK(cli("crop-page --image " + (dir / "page.png").string() + " --rows 0 --out-dir " + (dir / "z").string(), dir)
            .code == 2);
  CHECK(cli("crop-page --image " + (dir / "none.png").string() + " --out-dir " + (dir / "z").string(), dir).code ==
        3);
  fs::remove_all(dir);
}

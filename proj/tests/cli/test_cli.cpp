#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "loupe/data.hpp"
#include "loupe/masks.hpp"
#include "loupe_cli/cli.hpp"
#include "test_support.hpp"

using namespace loupe;
using loupe::testing::TempDir;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "loupe");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> tiny_data() {
  return {"--train-volumes", "4", "--val-volumes", "1", "--test-volumes", "1", "--height", "16", "--width", "16"};
}

std::vector<std::string> join(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

} // namespace

TEST_CASE("help documents every flag with its default") {
  const auto table = cli::describe_options();
  REQUIRE(table.size() == 8);
  for (const auto& [sub, options] : table) {
    const auto help = invoke({sub, "--help"});
    CHECK(help.code == 0);
    for (const auto& opt : options) {
      INFO(sub << " " << opt.name);
      const auto line = help.out.find("  " + opt.name + " ");
      REQUIRE(line != std::string::npos);
      if (opt.takes_value && !opt.required) {
        CHECK_FALSE(opt.default_text.empty());
        const auto eol = help.out.find('\n', line);
        CHECK(help.out.substr(line, eol - line).find("[" + opt.default_text + "]") != std::string::npos);
      }
    }
  }
}

TEST_CASE("usage errors exit with 1") {
  CHECK(invoke({}).code == 1);
  CHECK(invoke({"make-mask", "--no-such-flag"}).code == 1);
  CHECK(invoke({"make-mask", "--kind", "spiral"}).code == 1);
  CHECK(invoke({"train-recon"}).code == 1);

  TempDir dir("cli_usage");
  std::ofstream(dir / "bad.json") << R"({"train": {"alpha": 0.3, "typo": 1}})";
  const auto bad = invoke({"make-mask", "--config", (dir / "bad.json").string()});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("train.typo") != std::string::npos);
}

TEST_CASE("data errors exit with 2 and leave no partial output") {
  TempDir dir("cli_data");
  const auto out = dir / "run";
  const auto r = invoke({"train-recon", "--mask", (dir / "missing.pgm").string(), "--out", out.string()});
  CHECK(r.code == 2);
  CHECK_FALSE(r.err.empty());
  CHECK_FALSE(std::filesystem::exists(out));

  // Mask grid does not match the data: fails after the output directory exists.
  REQUIRE(invoke({"make-mask", "--height", "8", "--width", "8", "--out", (dir / "m").string()}).code == 0);
  const auto mismatch = invoke(join({"train-recon", "--mask", (dir / "m" / "mask.pgm").string(), "--out",
                                     out.string(), "--depth", "1", "--base-channels", "2", "--quiet"},
                                    tiny_data()));
  CHECK(mismatch.code == 2);
  CHECK_FALSE(std::filesystem::exists(out));
}

TEST_CASE("cartesian mask with two lines") {
  TempDir dir("cli_cart");
  const auto r = invoke({"make-mask", "--kind", "cartesian", "--alpha", "0.25", "--width", "8", "--center-lines", "0",
                         "--out", dir.path().string()});
  REQUIRE(r.code == 0);
  const auto mask = load_mask(dir / "mask.pgm");
  std::size_t lines = 0;
  for (std::size_t j = 0; j < mask.width(); ++j) {
    bool full = true;
    for (std::size_t i = 0; i < mask.height(); ++i) full = full && mask.values.at({i, j}) == 1.0;
    lines += full;
  }
  CHECK(lines == 2);
  CHECK(mask.sampled() == 2 * mask.height());
}

TEST_CASE("config precedence") {
  TempDir dir("cli_cfg");
  std::ofstream(dir / "c.json") << R"({"train": {"alpha": 0.5}, "mask": {"kind": "vd"}, "data": {"height": 8}})";
  const auto cfg = (dir / "c.json").string();
  REQUIRE(invoke({"make-mask", "--config", cfg, "--width", "8", "--out", (dir / "a").string()}).code == 0);
  REQUIRE(invoke({"make-mask", "--config", cfg, "--width", "8", "--alpha", "0.25", "--out", (dir / "b").string()})
              .code == 0);
  REQUIRE(invoke({"make-mask", "--width", "8", "--height", "8", "--out", (dir / "c").string()}).code == 0);
  const auto a = load_mask(dir / "a" / "mask.pgm");
  const auto b = load_mask(dir / "b" / "mask.pgm");
  const auto c = load_mask(dir / "c" / "mask.pgm");
  CHECK(a.sampled() == 32);
  CHECK(a.kind == "variable-density");
  CHECK(b.sampled() == 16);
  CHECK(c.kind == "uniform");
  CHECK(c.sampled() == 16);
}

TEST_CASE("evaluate on identical volumes reports perfect similarity") {
  TempDir dir("cli_eval");
  REQUIRE(invoke(join({"gen-data", "--out", (dir / "ds").string()}, tiny_data())).code == 0);
  const auto vol = (dir / "ds" / "vol_000.json").string();
  const auto r = invoke({"evaluate", "--prediction", vol, "--target", vol, "--out", (dir / "ev").string()});
  REQUIRE(r.code == 0);
  std::ifstream csv(dir / "ev" / "metrics.csv");
  std::string line;
  std::getline(csv, line);
  REQUIRE(line.substr(line.rfind(',') + 1) == "ssim");
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    CHECK(line.substr(line.rfind(',') + 1) == "1");
    ++rows;
  }
  CHECK(rows == 6); // five slices plus the mean
}

TEST_CASE("gradcheck passes") {
  const auto r = invoke({"gradcheck"});
  CHECK(r.code == 0);
  CHECK(r.out.find("max relative error") != std::string::npos);
  CHECK(invoke({"gradcheck", "--loss", "complex-l2", "--line-constrained", "--seed", "4"}).code == 0);
}

TEST_CASE("train, binarize and evaluate round trip with byte-identical reruns") {
  TempDir dir("cli_train");
  const auto args = join({"--depth", "1", "--base-channels", "2", "--epochs", "2", "--batch-size", "5", "--seed",
                          "9", "--quiet"},
                         tiny_data());
  REQUIRE(invoke(join({"train-loupe", "--out", (dir / "a").string()}, args)).code == 0);
  REQUIRE(invoke(join({"train-loupe", "--out", (dir / "b").string()}, args)).code == 0);
  for (const char* f : {"mask.pgm", "mask.json", "mask_prob.pgm", "model.json", "model.f32", "history.csv"}) {
    INFO(f);
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }

  REQUIRE(invoke({"binarize-mask", "--prob", (dir / "a" / "mask_prob.pgm").string(), "--out",
                  (dir / "bin").string()})
              .code == 0);
  CHECK(load_mask(dir / "bin" / "mask.pgm").values == load_mask(dir / "a" / "mask.pgm").values);

  REQUIRE(invoke(join({"train-recon", "--mask", (dir / "a" / "mask.pgm").string(), "--out", (dir / "r").string()},
                      args))
              .code == 0);
  const auto ev = invoke(join({"evaluate", "--mask", (dir / "a" / "mask.pgm").string(), "--weights",
                               (dir / "r" / "model.json").string(), "--out", (dir / "ev").string(), "--seed", "9"},
                              tiny_data()));
  CHECK(ev.code == 0);
  CHECK(std::filesystem::exists(dir / "ev" / "summary.csv"));
}

TEST_CASE("slope grid writes one row per pair") {
  TempDir dir("cli_grid");
  const auto r = invoke(join({"slope-grid", "--grid-s", "10,200", "--grid-t", "5", "--depth", "1", "--base-channels",
                              "2", "--epochs", "1", "--batch-size", "5", "--quiet", "--out", dir.path().string()},
                             tiny_data()));
  REQUIRE(r.code == 0);
  std::ifstream csv(dir / "slope_grid.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 3);
}

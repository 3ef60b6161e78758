#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "msinet/cli.hpp"
#include "msinet/error.hpp"

using namespace msinet;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# tiny end-to-end run
seed = 3
[data]
num_ids = 8
heldout_ids = 4
imgs_per_id = 6
[space]
widths = 4,4,8
stem_width = 4
rho = 2
embedding_dim = 8
image_h = 32
image_w = 16
bottleneck = 2
[search]
epochs = 2
p = 4
k = 2
[train]
arch = searched
epochs = 2
p = 4
k = 2
)";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("msinet_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "msinet");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string error_of(const std::string& text, const std::vector<std::string>& overrides = {}) {
  try {
    parse_config(text, "cfg", overrides);
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("an empty configuration resolves to the defaults") {
  CHECK(parse_config("") == RunConfig{});
  CHECK(parse_config("# only a comment\n\n   \n") == RunConfig{});
  const RunConfig c = parse_config("");
  CHECK(c.space.image_h == c.data.height);
  CHECK(c.space.image_w == c.data.width);
  CHECK(c.search.epochs == 60);
  CHECK(c.train.epochs == 60);
}

TEST_CASE("resolved configuration text parses back to the same configuration") {
  RunConfig c = parse_config(kTinyConfig);
  CHECK(parse_config(config_to_text(c)) == c);
  CHECK(config_to_text(parse_config(config_to_text(c))) == config_to_text(c));

  const RunConfig full = parse_config("preset = full\nsearch.scheme = ce_overlap\n");
  CHECK(parse_config(config_to_text(full)) == full);
}

TEST_CASE("keys may be written flat or under sections, overrides apply last") {
  const RunConfig a = parse_config("[search]\nscheme = tcm_overlap\nepochs = 7\n");
  const RunConfig b = parse_config("search.scheme = tcm_overlap\nsearch.epochs = 7\n");
  CHECK(a == b);
  CHECK(a.search.scheme == SearchScheme::TcmOverlap);

  const RunConfig c = parse_config("search.epochs = 7\n", "cfg", {"search.scheme=ce_overlap", "search.epochs = 9"});
  CHECK(c.search.scheme == SearchScheme::CeOverlap);
  CHECK(c.search.epochs == 9);
}

TEST_CASE("one seed drives every stage") {
  const RunConfig c = parse_config("seed = 42\n");
  CHECK(c.data.seed == 42);
  CHECK(c.search.seed == 42);
  CHECK(c.search.split.seed == 42);
  CHECK(c.train.seed == 42);
}

TEST_CASE("the full preset applies before other keys wherever it appears") {
  const RunConfig c = parse_config("train.epochs = 5\npreset = full\n");
  CHECK(c.preset == "full");
  CHECK(c.space == SupernetConfig::full_scale());
  CHECK(c.search.epochs == 350);
  CHECK(c.train.epochs == 5);
}

TEST_CASE("configuration errors name the offending line") {
  CHECK(error_of("seed = 1\nfoo bar\n").find("cfg:2:") != std::string::npos);
  CHECK(error_of("seed = 1\n\nnot.a.key = 3\n").find("cfg:3:") != std::string::npos);
  CHECK(error_of("seed = 1\nseed = 2\n").find("duplicate") != std::string::npos);
  CHECK(error_of("[train\n").find("cfg:1:") != std::string::npos);
  CHECK(error_of("train.epochs = many\n").find("cfg:1:") != std::string::npos);
  CHECK(error_of("train.p = 1\n").find("cfg:1:") != std::string::npos);
  CHECK(error_of("search.scheme = darts\n").find("cfg:1:") != std::string::npos);
  CHECK(error_of("preset = huge\n").find("cfg:1:") != std::string::npos);
  CHECK(error_of("", {"seed=1", "bogus=2"}).find("--set:2:") != std::string::npos);
  CHECK(error_of("", {"seed"}).find("--set:1:") != std::string::npos);
  CHECK(error_of("sweep.axis = overlap\nsweep.values = 60\ntrain.arch = searched\n") != "");
  CHECK(error_of("sweep.axis = overlap\nsweep.values = 60:80\n") != "");
  CHECK(error_of("sweep.axis = overlap\nsweep.values = 60:80\ntrain.arch = searched\n") == "");
}

TEST_CASE("sweep points change exactly one setting") {
  RunConfig base = parse_config("sweep.axis = lambda_sa\nsweep.values = 0,0.5,4\n");
  REQUIRE(base.sweep_values.size() == 3);
  RunConfig p = sweep_point(base, "0.5");
  CHECK(p.train.loss.sam.lambda_sa == 0.5);
  p.train.loss.sam.lambda_sa = base.train.loss.sam.lambda_sa;
  CHECK(p == base);

  base = parse_config("sweep.axis = overlap\nsweep.values = 70:70\ntrain.arch = searched\n");
  p = sweep_point(base, "70:70");
  CHECK(p.search.split.train_pct == 70);
  CHECK(p.search.split.val_pct == 70);

  base = parse_config("");
  CHECK(sweep_point(base, "3").space.rho == 3);
  CHECK_THROWS_AS(sweep_point(base, "0"), ParseError);
}

TEST_CASE("architecture names resolve to descriptors") {
  const fs::path dir = fresh_dir("arch");
  RunConfig c = parse_config(kTinyConfig);
  c.arch = "msinet";
  CHECK(resolve_arch(c, dir.string()) == msinet_descriptor(c.space));
  c.arch = "fixed:E";
  CHECK(resolve_arch(c, dir.string()) == uniform_descriptor(InteractionOp::Exchange, c.space));
  c.arch = "random";
  CHECK(resolve_arch(c, dir.string()) == random_descriptor(c.seed, c.space));
  c.arch = "searched";
  CHECK_THROWS(resolve_arch(c, dir.string()));
  save_descriptor(msinet_descriptor(c.space), (dir / "descriptor.txt").string());
  CHECK(resolve_arch(c, dir.string()) == msinet_descriptor(c.space));
  c.arch = (dir / "descriptor.txt").string();
  CHECK(resolve_arch(c, dir.string()) == msinet_descriptor(c.space));
  fs::remove_all(dir);
}

TEST_CASE("the pipeline reruns byte for byte and reports exit codes") {
  setenv("MSINET_LOG", "quiet", 1);
  const fs::path root = fresh_dir("pipeline");
  const fs::path cfg = root / "tiny.cfg";
  std::ofstream(cfg) << kTinyConfig;

  for (const char* name : {"a", "b"}) {
    const std::string out = (root / name).string();
    CHECK(run({"search", "--config", cfg.string(), "--out", out}) == 0);
    CHECK(run({"train", "--config", cfg.string(), "--out", out}) == 0);
    CHECK(run({"eval", "--config", cfg.string(), "--out", out}) == 0);
  }
  for (const char* f : {"descriptor.txt", "alpha_history.txt", "metrics.jsonl", "checkpoint.txt", "config.resolved.txt"}) {
    INFO(f);
    CHECK(fs::exists(root / "a" / f));
    CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));
  }

  // Two search epochs leave two alpha rows of 48 logits.
  std::istringstream hist(slurp(root / "a" / "alpha_history.txt"));
  std::string row;
  std::size_t rows = 0;
  while (std::getline(hist, row)) {
    std::istringstream r(row);
    std::size_t n = 0;
    for (double v; r >> v;) ++n;
    CHECK(n == 48);
    ++rows;
  }
  CHECK(rows == 2);

  // Records carry no wall-clock fields; those live in timing.jsonl.
  CHECK(slurp(root / "a" / "metrics.jsonl").find("seconds") == std::string::npos);
  CHECK(slurp(root / "a" / "timing.jsonl").find("seconds") != std::string::npos);
  CHECK(slurp(root / "a" / "metrics.jsonl").find("\"mAP\"") != std::string::npos);

  // The echoed configuration reproduces the run configuration.
  CHECK(parse_config(slurp(root / "a" / "config.resolved.txt")) == parse_config(kTinyConfig));

  const std::string bad = (root / "bad").string();
  CHECK(run({"train", "--config", cfg.string(), "--set", "train.bogus=1", "--out", bad}) == 1);
  CHECK(run({"train", "--out", bad, "--config", (root / "missing.cfg").string()}) != 0);
  CHECK(run({"frobnicate", "--out", bad}) == 1);
  CHECK(run({"train", "--config", cfg.string()}) == 1);
  CHECK(run({"train", "--config", cfg.string(), "--set", "train.arch=" + (root / "nope.txt").string(), "--out", bad}) ==
        2);
  CHECK(run({"eval", "--config", cfg.string(), "--out", bad}) == 2);
  fs::remove_all(root);
}

TEST_CASE("generated data loads back through its manifest") {
  setenv("MSINET_LOG", "quiet", 1);
  const fs::path root = fresh_dir("gendata");
  const fs::path cfg = root / "tiny.cfg";
  std::ofstream(cfg) << kTinyConfig;
  REQUIRE(run({"gen-data", "--config", cfg.string(), "--out", root.string()}) == 0);

  RunConfig c = parse_config(kTinyConfig);
  const IdentityDataset generated = load_dataset(c);
  c.manifest = (root / "data" / "manifest.tsv").string();
  const IdentityDataset loaded = load_dataset(c);
  REQUIRE(loaded.records.size() == generated.records.size());
  for (std::size_t i = 0; i < loaded.records.size(); ++i) {
    CHECK(loaded.records[i].identity == generated.records[i].identity);
    CHECK(loaded.records[i].view == generated.records[i].view);
    CHECK(loaded.records[i].side == generated.records[i].side);
    CHECK(loaded.records[i].image.pixels == generated.records[i].image.pixels);
  }

  // A manifest whose images do not match the network input is a runtime error.
  c.space.image_h = 64;
  CHECK_THROWS_AS(load_dataset(c), ArgumentError);
  fs::remove_all(root);
}

TEST_CASE("a sweep writes one record per value") {
  setenv("MSINET_LOG", "quiet", 1);
  const fs::path root = fresh_dir("sweep");
  const fs::path cfg = root / "tiny.cfg";
  std::ofstream(cfg) << kTinyConfig;
  REQUIRE(run({"sweep", "--config", cfg.string(), "--set", "train.arch=msinet", "--set", "sweep.axis=lambda_sa",
               "--set", "sweep.values=0,1", "--out", root.string()}) == 0);
  std::istringstream in(slurp(root / "metrics.jsonl"));
  std::size_t records = 0;
  for (std::string line; std::getline(in, line);)
    if (line.find("\"command\":\"sweep\"") != std::string::npos) ++records;
  CHECK(records == 2);
  CHECK(fs::exists(root / "lambda_sa_0" / "checkpoint.txt"));
  CHECK(fs::exists(root / "lambda_sa_1" / "checkpoint.txt"));
  fs::remove_all(root);
}

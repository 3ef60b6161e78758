// Acceptance run: one pass/fail line per criterion.
//
// Criteria 1-4 re-run the named oracle suites compiled into this binary;
// criteria 5-8 drive the pipeline end to end on the default synthetic data.
// Usage: acceptance [work_dir] [criterion ...]   (default: all eight)
#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "msinet/cli.hpp"
#include "msinet/losses.hpp"
#include "msinet/numerics/ops.hpp"
#include "msinet/seed.hpp"

using namespace msinet;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

void note(const std::string& msg) {
  std::printf("  .. %s\n", msg.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Counts the test cases a doctest run actually entered.
struct CaseCounter : doctest::IReporter {
  static inline std::size_t started = 0;
  explicit CaseCounter(const doctest::ContextOptions&) {}
  void report_query(const doctest::QueryData&) override {}
  void test_run_start() override {}
  void test_run_end(const doctest::TestRunStats&) override {}
  void test_case_start(const doctest::TestCaseData&) override { ++started; }
  void test_case_reenter(const doctest::TestCaseData&) override {}
  void test_case_end(const doctest::CurrentTestCaseStats&) override {}
  void test_case_exception(const doctest::TestCaseException&) override {}
  void subcase_start(const doctest::SubcaseSignature&) override {}
  void subcase_end() override {}
  void log_assert(const doctest::AssertData&) override {}
  void log_message(const doctest::MessageData&) override {}
  void test_case_skipped(const doctest::TestCaseData&) override {}
};
REGISTER_LISTENER("case_counter", 1, CaseCounter);

// Runs each named doctest case on its own; a name that matches no case, or
// more than one, counts as a failure so a renamed suite cannot pass silently.
Verdict suite_verdict(const std::vector<std::string>& cases, double time_limit = 0) {
  const auto t0 = Clock::now();
  bool ok = true;
  for (const auto& c : cases) {
    std::string name = c;
    for (char& ch : name)
      if (ch == ',' || ch == '*' || ch == '?') ch = '?';
    doctest::Context ctx;
    ctx.setOption("test-case", name.c_str());
    ctx.setOption("no-intro", true);
    ctx.setOption("no-version", true);
    ctx.setOption("minimal", true);
    CaseCounter::started = 0;
    const int rc = ctx.run();
    if (CaseCounter::started != 1) std::printf("  .. '%s' matched %zu test cases\n", c.c_str(), CaseCounter::started);
    ok = ok && rc == 0 && CaseCounter::started == 1;
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = ok && (time_limit <= 0 || secs < time_limit);
  v.detail = std::to_string(cases.size()) + " suites " + (ok ? "passed" : "FAILED") + " in " + fmt("%.1f", secs) + " s";
  if (time_limit > 0) v.detail += " (limit " + fmt("%.0f", time_limit) + " s)";
  return v;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct SeedOutcome {
  double trained = 0, untrained = 0, searched = 0, random = 0;
  double pipeline_seconds = 0;
  std::string searched_ops, random_ops;
};

// Search, then train and evaluate the reference preset, the searched
// descriptor and a random descriptor, all from one seed.
SeedOutcome run_seed(std::uint64_t seed, const fs::path& work) {
  SeedOutcome o;
  const RunConfig cfg = parse_config("seed = " + std::to_string(seed) + "\n");
  const fs::path dir = work / ("seed_" + std::to_string(seed));
  fs::remove_all(dir);

  const auto t0 = Clock::now();
  const SearchResult search = command_search(cfg, (dir / "search").string());
  note("seed " + std::to_string(seed) + ": search " + fmt("%.0f", seconds_since(t0)) + " s -> " +
       search.descriptor.ops_string());
  o.searched_ops = search.descriptor.ops_string();

  RunConfig preset = cfg;
  preset.arch = "msinet";
  const auto t1 = Clock::now();
  command_train(preset, (dir / "msinet").string());
  o.trained = command_eval(preset, (dir / "msinet").string()).rank1();
  o.pipeline_seconds = seconds_since(t0);
  note("seed " + std::to_string(seed) + ": preset trained rank-1 " + fmt("%.3f", o.trained) + " (" +
       fmt("%.0f", seconds_since(t1)) + " s)");

  RunConfig untrained = preset;
  untrained.train.epochs = 0;
  command_train(untrained, (dir / "untrained").string());
  o.untrained = command_eval(untrained, (dir / "untrained").string()).rank1();

  RunConfig searched = cfg;
  searched.arch = (dir / "search" / "descriptor.txt").string();
  command_train(searched, (dir / "searched").string());
  o.searched = command_eval(searched, (dir / "searched").string()).rank1();
  note("seed " + std::to_string(seed) + ": searched rank-1 " + fmt("%.3f", o.searched));

  RunConfig random = cfg;
  random.arch = "random";
  o.random_ops = resolve_arch(random, dir.string()).ops_string();
  command_train(random, (dir / "random").string());
  o.random = command_eval(random, (dir / "random").string()).rank1();
  note("seed " + std::to_string(seed) + ": random " + o.random_ops + " rank-1 " + fmt("%.3f", o.random));
  return o;
}

Verdict criterion5(const std::vector<SeedOutcome>& runs) {
  std::size_t passed = 0;
  std::string detail;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    const auto& r = runs[s];
    const bool ok = r.trained >= 0.90 && r.untrained <= 0.40 && r.pipeline_seconds < 1800;
    passed += ok;
    detail += "seed " + std::to_string(s) + ": trained " + fmt("%.3f", r.trained) + " untrained " +
              fmt("%.3f", r.untrained) + " search+train+eval " + fmt("%.0f", r.pipeline_seconds) + " s [" +
              (ok ? "ok" : "miss") + "]; ";
  }
  return {passed >= 2, detail + std::to_string(passed) + "/3 seeds meet rank-1 >= 0.90 vs <= 0.40"};
}

Verdict criterion6(const std::vector<SeedOutcome>& runs) {
  double searched = 0, random = 0;
  for (const auto& r : runs) searched += r.searched / runs.size(), random += r.random / runs.size();
  const double margin = searched - random;
  return {margin >= 0, "mean rank-1 searched " + fmt("%.3f", searched) + " vs random " + fmt("%.3f", random) +
                           ", margin " + fmt("%+.3f", margin)};
}

Verdict criterion7(const fs::path& work) {
  const std::string text = "seed = 11\nsearch.epochs = 3\ntrain.epochs = 3\ntrain.arch = searched\n";
  const RunConfig cfg = parse_config(text);
  std::vector<fs::path> dirs{work / "determinism_a", work / "determinism_b"};
  for (const auto& d : dirs) {
    fs::remove_all(d);
    command_search(cfg, d.string());
    command_train(cfg, d.string());
    command_eval(cfg, d.string());
  }
  std::string detail;
  bool ok = true;
  for (const char* f : {"descriptor.txt", "alpha_history.txt", "metrics.jsonl", "checkpoint.txt"}) {
    const std::string a = slurp(dirs[0] / f), b = slurp(dirs[1] / f);
    const bool same = !a.empty() && a == b;
    ok = ok && same;
    detail += std::string(f) + (same ? " identical" : " DIFFERS") + "; ";
  }
  return {ok, detail + "two runs of one config and seed"};
}

Verdict criterion8() {
  const RunConfig cfg = parse_config("seed = 0\n");
  const IdentityDataset ds = load_dataset(cfg);
  const ArchDescriptor desc = msinet_descriptor(cfg.space);
  bool ok = true;
  std::string detail;

  // Every mode trains for one epoch with non-negative losses.
  for (SamMode mode : {SamMode::Off, SamMode::PosSelf, SamMode::NegSelf, SamMode::Unified, SamMode::Separated,
                       SamMode::PamSelf}) {
    TrainConfig tc = cfg.train;
    tc.epochs = 1;
    tc.loss.sam.mode = mode;
    bool mode_ok = true;
    try {
      ReidModel model = ReidModel::create(desc, ds, tc.loss.sam, cfg.seed);
      for (const auto& r : train_model(model, ds, tc))
        mode_ok = mode_ok && r.loss >= 0 && r.id >= 0 && r.triplet >= 0 && r.sam >= 0;
    } catch (const std::exception& e) {
      note(sam_mode_name(mode) + " failed: " + e.what());
      mode_ok = false;
    }
    ok = ok && mode_ok;
    detail += sam_mode_name(mode) + (mode_ok ? " ok" : " FAIL") + ", ";
  }

  // Exactness in double precision on one training batch of the same objective.
  Rng rng(derive_seed({cfg.seed, 0xacce}));
  auto net = MsiNetwork<double>::fixed_network(desc, rng);
  const auto pool = ds.indices(SplitSide::Train);
  std::map<std::size_t, std::size_t> class_of;
  for (std::size_t r : pool) class_of.emplace(ds.records[r].identity, 0);
  std::size_t next = 0;
  for (auto& [id, c] : class_of) c = next++;
  auto heads = TrainHeads<double>::create(desc.config.embedding_dim, class_of.size(), desc.config.widths[2],
                                          SamConfig{SamMode::PamSelf, 1.0}, rng);
  const auto batch_records = pk_batches(ds, pool, cfg.train.p, cfg.train.k, cfg.seed, 0).front();
  const LabelledBatch batch = make_batch(
      ds, batch_records, [&](std::size_t id) { return class_of.at(id); }, AugmentPolicy::None, cfg.seed, 0);
  Tensor<double> images(batch.images.shape());
  for (std::size_t i = 0; i < images.numel(); ++i) images[i] = batch.images[i];

  Tape<double> tape;
  net.set_mode(NormMode::Train);
  net.set_update_running(false);
  heads.neck.update_running = false;
  const auto out = fixed_forward(tape.constant(images), desc, net);
  LossConfig off;
  off.sam.mode = SamMode::Off;
  const auto base = total_loss(out, batch.labels, heads, off);
  const double id = id_loss(batchnorm(out.embedding, heads.neck), batch.labels, heads.classifier).value()[0];
  const double tri = triplet_batch_hard(out.embedding, batch.labels, off.margin).value()[0];
  const double l_off = base.total.value()[0];
  const bool exact_off = l_off == id + tri && base.sam == 0;
  ok = ok && exact_off;
  detail += "off total == id + triplet: " + std::string(exact_off ? "exact" : "NO");

  double worst = 0;
  for (SamMode mode : {SamMode::PosSelf, SamMode::NegSelf, SamMode::Unified, SamMode::Separated, SamMode::PamSelf}) {
    for (double lambda : {0.5, 1.0, 2.0, 4.0}) {
      LossConfig lc;
      lc.sam = SamConfig{mode, lambda};
      const auto t = total_loss(out, batch.labels, heads, lc);
      const double expect = l_off + lambda * t.sam;
      const double err = std::abs(t.total.value()[0] - expect) / std::max(1.0, std::abs(expect));
      worst = std::max(worst, err);
      ok = ok && t.sam >= 0 && t.total.value()[0] >= 0;
    }
  }
  ok = ok && worst <= 1e-12;
  detail += "; lambda-linearity worst relative error " + fmt("%.2e", worst) + " (limit 1e-12)";
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "msinet_acceptance";
  std::vector<bool> selected(8, argc <= 2);
  for (int i = 2; i < argc; ++i) {
    const int n = std::atoi(argv[i]);
    if (n < 1 || n > 8) {
      std::fprintf(stderr, "usage: acceptance [work_dir] [criterion 1-8 ...]\n");
      return 2;
    }
    selected[n - 1] = true;
  }
  fs::create_directories(work);
  if (!std::getenv("MSINET_LOG")) setenv("MSINET_LOG", "quiet", 1);
  const auto start = Clock::now();
  auto heading = [](const char* text) {
    std::printf("%s\n", text);
    std::fflush(stdout);
  };

  std::vector<Verdict> verdicts(8);
  if (selected[0]) {
    heading("criterion 1: gradient suite");
    verdicts[0] = suite_verdict(
        {"finite-difference gradients of every numerics op", "every layer passes finite-difference gradient checks",
         "id loss examples", "batch-hard triplet examples", "correlation activation examples",
         "spatial alignment loss", "total objective", "mixed interaction equals the softmax-weighted sum",
         "branch examples", "cell examples", "supernet and fixed network",
         "contrastive loss: scale cancellation, non-negativity, gradient"},
        120.0);
  }
  if (selected[1]) {
    heading("criterion 2: operator semantics");
    verdicts[1] = suite_verdict(
        {"interaction operator examples", "mixed interaction equals the softmax-weighted sum", "discretize"});
  }
  if (selected[2]) {
    heading("criterion 3: twins contrastive mechanism");
    verdicts[2] = suite_verdict({"twin_split is image-disjoint with exact overlap counts for 1000 seeds",
                                 "memory update arithmetic, fixed point and unit norm",
                                 "search phases touch only their own parameters"});
  }
  if (selected[3]) {
    heading("criterion 4: oracle equivalence");
    verdicts[3] =
        suite_verdict({"ranking metrics equal a brute-force counting oracle", "batch-hard triplet examples"});
  }
  if (selected[6]) {
    heading("criterion 7: determinism");
    verdicts[6] = criterion7(work);
  }
  if (selected[7]) {
    heading("criterion 8: spatial alignment modes");
    verdicts[7] = criterion8();
  }
  if (selected[4] || selected[5]) {
    heading("criteria 5 and 6: desk runs over three seeds");
    std::vector<SeedOutcome> runs;
    for (std::uint64_t seed = 0; seed < 3; ++seed) runs.push_back(run_seed(seed, work));
    verdicts[4] = criterion5(runs);
    verdicts[5] = criterion6(runs);
  }

  std::printf("\nacceptance summary (%.0f s)\n", seconds_since(start));
  bool all = true;
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    if (!selected[i]) continue;
    std::printf("criterion %zu: %s  %s\n", i + 1, verdicts[i].pass ? "PASS" : "FAIL", verdicts[i].detail.c_str());
    all = all && verdicts[i].pass;
  }
  return all ? 0 : 1;
}

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "msinet/cli.hpp"
#include "msinet/error.hpp"
#include "util/atomic_file.hpp"
#include "util/number_format.hpp"

namespace msinet {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

enum class LogLevel { Quiet, Info, Debug };

LogLevel log_level() {
  const char* env = std::getenv("MSINET_LOG");
  const std::string v = env ? env : "info";
  if (v == "quiet" || v == "0" || v == "off") return LogLevel::Quiet;
  if (v == "debug" || v == "2") return LogLevel::Debug;
  return LogLevel::Info;
}

void log(LogLevel level, const std::string& msg) {
  if (level == LogLevel::Quiet || log_level() < level) return;
  std::cerr << "[msinet] " << msg << '\n';
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void append_line(const std::string& path, const std::string& line) {
  std::string existing;
  if (fs::exists(path)) existing = read_file(path);
  write_file_atomic(path, existing + line + '\n');
}

// Stable run identifier: the command and a hash of the resolved configuration.
std::string run_id(const std::string& command, const RunConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : config_to_text(cfg)) h = (h ^ c) * 1099511628211ull;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return command + "-" + buf;
}

// Numbers go through the shortest round-trip formatter so records are
// reproducible byte for byte.
Json number(double v) { return Json::parse(format_number(v)); }

struct Recorder {
  std::string dir, run;

  void metrics(Json record) const {
    Json full{{"run", run}};
    full.update(record);
    append_line(path_in(dir, "metrics.jsonl"), full.dump());
  }
  void timing(const std::string& command, std::size_t epoch, double seconds) const {
    Json rec{{"run", run}, {"command", command}, {"epoch", epoch}, {"seconds", seconds}};
    append_line(path_in(dir, "timing.jsonl"), rec.dump());
  }
};

Recorder start_command(const std::string& command, const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  write_file_atomic(path_in(out_dir, "config.resolved.txt"), config_to_text(cfg));
  Recorder r{out_dir, run_id(command, cfg)};
  log(LogLevel::Info, command + " -> " + out_dir + " (run " + r.run + ")");
  return r;
}

std::string alpha_line(const std::array<double, kNumSlots * kNumOps>& row) {
  std::string s;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) s += ' ';
    s += format_number(static_cast<float>(row[i]));
  }
  return s;
}

Json metrics_json(const RetrievalMetrics& m) {
  Json j;
  for (std::size_t r : {1, 5, 10})
    if (r <= m.cmc.size()) j["rank" + std::to_string(r)] = number(m.cmc[r - 1]);
  j["mAP"] = number(m.mean_ap);
  j["valid_queries"] = m.valid_queries;
  return j;
}

}  // namespace

IdentityDataset load_dataset(const RunConfig& cfg) {
  IdentityDataset ds = cfg.manifest.empty() ? generate_synthetic(cfg.data) : load_manifest(cfg.manifest);
  const auto& img = ds.records.front().image;
  if (img.height != cfg.space.image_h || img.width != cfg.space.image_w)
    throw ArgumentError("dataset images are " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                        " but the network expects " + std::to_string(cfg.space.image_h) + "x" +
                        std::to_string(cfg.space.image_w));
  return ds;
}

ArchDescriptor resolve_arch(const RunConfig& cfg, const std::string& out_dir) {
  if (cfg.arch == "msinet") return msinet_descriptor(cfg.space);
  if (cfg.arch == "random") return random_descriptor(cfg.seed, cfg.space);
  if (cfg.arch.rfind("fixed:", 0) == 0) return uniform_descriptor(op_from_code(cfg.arch[6]), cfg.space);
  if (cfg.arch == "searched") return load_descriptor(path_in(out_dir, "descriptor.txt"));
  return load_descriptor(cfg.arch);
}

void command_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  const Recorder rec = start_command("gen-data", cfg, out_dir);
  const IdentityDataset ds = generate_synthetic(cfg.data);
  write_dataset(ds, path_in(out_dir, "data"));
  rec.metrics({{"command", "gen-data"},
               {"records", ds.records.size()},
               {"train", ds.indices(SplitSide::Train).size()},
               {"probe", ds.indices(SplitSide::Probe).size()},
               {"gallery", ds.indices(SplitSide::Gallery).size()}});
}

SearchResult command_search(const RunConfig& cfg, const std::string& out_dir) {
  const Recorder rec = start_command("search", cfg, out_dir);
  const IdentityDataset ds = load_dataset(cfg);
  std::string history;
  const SearchResult res = run_search(ds, cfg.space, cfg.search, [&](const SearchEpochReport& r, const auto& alpha) {
    rec.metrics({{"command", "search"},
                 {"epoch", r.epoch},
                 {"train_loss", number(r.train_loss)},
                 {"val_loss", number(r.val_loss)},
                 {"lr", number(r.lr_weights)},
                 {"lr_alpha", number(r.lr_alpha)},
                 {"steps", r.steps}});
    rec.timing("search", r.epoch, r.seconds);
    history += alpha_line(alpha) + '\n';
    write_file_atomic(path_in(out_dir, "alpha_history.txt"), history);
    log(LogLevel::Debug, "search epoch " + std::to_string(r.epoch) + " train " + format_number(r.train_loss) +
                             " val " + format_number(r.val_loss));
  });
  save_descriptor(res.descriptor, path_in(out_dir, "descriptor.txt"));
  rec.metrics({{"command", "search"}, {"event", "descriptor"}, {"ops", res.descriptor.ops_string()}});
  log(LogLevel::Info, "searched descriptor: " + res.descriptor.ops_string());
  return res;
}

void command_train(const RunConfig& cfg, const std::string& out_dir) {
  const Recorder rec = start_command("train", cfg, out_dir);
  const IdentityDataset ds = load_dataset(cfg);
  const ArchDescriptor desc = resolve_arch(cfg, out_dir);
  if (desc.config.image_h != cfg.space.image_h || desc.config.image_w != cfg.space.image_w)
    throw ArgumentError("descriptor input size differs from the configured image size");
  ReidModel model = ReidModel::create(desc, ds, cfg.train.loss.sam, cfg.seed);
  log(LogLevel::Info, "training " + desc.ops_string() + " (" + std::to_string(model.net.parameter_count()) +
                          " parameters)");
  std::vector<std::string> warnings;
  train_model(
      model, ds, cfg.train,
      [&](const TrainEpochReport& r) {
        rec.metrics({{"command", "train"},
                     {"epoch", r.epoch},
                     {"loss", number(r.loss)},
                     {"id", number(r.id)},
                     {"triplet", number(r.triplet)},
                     {"sam", number(r.sam)},
                     {"lr", number(r.lr)},
                     {"steps", r.steps}});
        rec.timing("train", r.epoch, r.seconds);
        log(LogLevel::Debug, "train epoch " + std::to_string(r.epoch) + " loss " + format_number(r.loss));
      },
      &warnings);
  for (const auto& w : warnings) log(LogLevel::Debug, "sam: " + w);
  save_checkpoint(model, path_in(out_dir, "checkpoint.txt"));
  rec.metrics({{"command", "train"},
               {"event", "checkpoint"},
               {"ops", desc.ops_string()},
               {"parameters", model.net.parameter_count()},
               {"sam_warnings", warnings.size()}});
}

RetrievalMetrics command_eval(const RunConfig& cfg, const std::string& out_dir) {
  const Recorder rec = start_command("eval", cfg, out_dir);
  const IdentityDataset ds = load_dataset(cfg);
  const std::string ckpt = cfg.checkpoint.empty() ? path_in(out_dir, "checkpoint.txt") : cfg.checkpoint;
  ReidModel model = load_checkpoint(ckpt, ds, cfg.train.loss.sam);
  const RetrievalMetrics m = evaluate(ds, network_embedder(model.net, model.descriptor), cfg.eval_batch, cfg.max_rank);
  Json j{{"command", "eval"}, {"ops", model.descriptor.ops_string()}};
  j.update(metrics_json(m));
  rec.metrics(j);
  std::cout << metrics_json(m).dump() << std::endl;
  return m;
}

void command_sweep(const RunConfig& cfg, const std::string& out_dir) {
  const Recorder rec = start_command("sweep", cfg, out_dir);
  for (const auto& value : cfg.sweep_values) {
    const RunConfig point = sweep_point(cfg, value);
    std::string tag = cfg.sweep_axis + "_" + value;
    for (char& c : tag)
      if (c == ':' || c == '/' || c == ' ') c = '-';
    const std::string dir = path_in(out_dir, tag);
    log(LogLevel::Info, "sweep point " + cfg.sweep_axis + " = " + value);
    if (point.arch == "searched") command_search(point, dir);
    command_train(point, dir);
    const RetrievalMetrics m = command_eval(point, dir);
    Json j{{"command", "sweep"}, {"axis", cfg.sweep_axis}, {"value", value}};
    j.update(metrics_json(m));
    rec.metrics(j);
  }
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Multi-scale interaction architecture search and re-identification pipeline"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::vector<std::string> overrides;
  const char* names[] = {"gen-data", "search", "train", "eval", "sweep"};
  const char* help[] = {"write the synthetic dataset as PPM images plus a manifest",
                        "run the alternating architecture search", "train a fixed architecture",
                        "evaluate a checkpoint on the probe/gallery split",
                        "train and evaluate over one configuration axis"};
  for (std::size_t i = 0; i < 5; ++i) {
    auto* sub = app.add_subcommand(names[i], help[i]);
    sub->add_option("--config", config_path, "configuration file (key = value lines)");
    sub->add_option("--set", overrides, "override one key, e.g. --set train.epochs=5");
    sub->add_option("--out", out_dir, "output directory")->required();
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  try {
    const std::string text = config_path.empty() ? std::string() : read_file(config_path);
    cfg = parse_config(text, config_path.empty() ? "config" : config_path, overrides);
  } catch (const ParseError& e) {
    std::cerr << "msinet: configuration error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (command == "gen-data") command_gen_data(cfg, out_dir);
    else if (command == "search") command_search(cfg, out_dir);
    else if (command == "train") command_train(cfg, out_dir);
    else if (command == "eval") command_eval(cfg, out_dir);
    else command_sweep(cfg, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "msinet: " << command << " failed: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace msinet

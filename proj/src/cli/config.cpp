#include <algorithm>
#include <charconv>
#include <cmath>
#include <optional>
#include <functional>
#include <sstream>

#include "msinet/cli.hpp"
#include "msinet/error.hpp"
#include "util/number_format.hpp"

namespace msinet {

namespace {

struct Location {
  std::string where;
  std::size_t line = 0;
};

[[noreturn]] void fail(const Location& loc, const std::string& what) { throw ParseError(loc.where, loc.line, what); }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_count(const std::string& v, const Location& loc, const std::string& key) {
  std::size_t out = 0;
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || p != end) fail(loc, key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& v, const Location& loc, const std::string& key) {
  std::uint64_t out = 0;
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || p != end) fail(loc, key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_real(const std::string& v, const Location& loc, const std::string& key) {
  double out = 0;
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || p != end || !std::isfinite(out))
    fail(loc, key + ": expected a number, got '" + v + "'");
  return out;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = v.find(',', start);
    out.push_back(trim(v.substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename Fn>
auto as_config_error(const Location& loc, const std::string& key, Fn&& fn) {
  try {
    return fn();
  } catch (const ArgumentError& e) {
    fail(loc, key + ": " + e.what());
  }
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&, const Location&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string real_text(double v) { return format_number(v); }

Field count_field(std::string key, std::size_t RunConfig::*member) {
  return {key, [key, member](RunConfig& c, const std::string& v, const Location& l) { c.*member = to_count(v, l, key); },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

template <typename S>
Field count_in(std::string key, S RunConfig::*section, std::size_t S::*member) {
  return {key,
          [key, section, member](RunConfig& c, const std::string& v, const Location& l) {
            (c.*section).*member = to_count(v, l, key);
          },
          [section, member](const RunConfig& c) { return std::to_string((c.*section).*member); }};
}

template <typename S>
Field real_in(std::string key, S RunConfig::*section, double S::*member) {
  return {key,
          [key, section, member](RunConfig& c, const std::string& v, const Location& l) {
            (c.*section).*member = to_real(v, l, key);
          },
          [section, member](const RunConfig& c) { return real_text((c.*section).*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"seed", [](RunConfig& c, const std::string& v, const Location& l) { c.seed = to_u64(v, l, "seed"); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});

    f.push_back({"data.manifest", [](RunConfig& c, const std::string& v, const Location&) { c.manifest = v; },
                 [](const RunConfig& c) { return c.manifest; }});
    f.push_back(count_in("data.num_ids", &RunConfig::data, &SyntheticConfig::num_ids));
    f.push_back(count_in("data.heldout_ids", &RunConfig::data, &SyntheticConfig::heldout_ids));
    f.push_back(count_in("data.imgs_per_id", &RunConfig::data, &SyntheticConfig::imgs_per_id));
    f.push_back(count_in("data.num_views", &RunConfig::data, &SyntheticConfig::num_views));
    f.push_back(real_in("data.brightness", &RunConfig::data, &SyntheticConfig::brightness));
    f.push_back(real_in("data.translation", &RunConfig::data, &SyntheticConfig::translation));
    f.push_back(real_in("data.background", &RunConfig::data, &SyntheticConfig::background));

    f.push_back({"split.train_pct",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   c.search.split.train_pct = to_real(v, l, "split.train_pct");
                 },
                 [](const RunConfig& c) { return real_text(c.search.split.train_pct); }});
    f.push_back({"split.val_pct",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   c.search.split.val_pct = to_real(v, l, "split.val_pct");
                 },
                 [](const RunConfig& c) { return real_text(c.search.split.val_pct); }});

    f.push_back({"space.widths",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   const auto parts = split_list(v);
                   if (parts.size() != 3) fail(l, "space.widths: expected three comma-separated widths");
                   for (std::size_t i = 0; i < 3; ++i) c.space.widths[i] = to_count(parts[i], l, "space.widths");
                 },
                 [](const RunConfig& c) {
                   return std::to_string(c.space.widths[0]) + "," + std::to_string(c.space.widths[1]) + "," +
                          std::to_string(c.space.widths[2]);
                 }});
    f.push_back(count_in("space.stem_width", &RunConfig::space, &SupernetConfig::stem_width));
    f.push_back(count_in("space.rho", &RunConfig::space, &SupernetConfig::rho));
    f.push_back({"space.fusion",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   c.space.fusion = as_config_error(l, "space.fusion", [&] { return parse_fusion(v); });
                 },
                 [](const RunConfig& c) { return fusion_name(c.space.fusion); }});
    f.push_back(count_in("space.embedding_dim", &RunConfig::space, &SupernetConfig::embedding_dim));
    f.push_back(count_in("space.image_h", &RunConfig::space, &SupernetConfig::image_h));
    f.push_back(count_in("space.image_w", &RunConfig::space, &SupernetConfig::image_w));
    f.push_back(count_in("space.bottleneck", &RunConfig::space, &SupernetConfig::bottleneck));

    f.push_back({"search.scheme",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   c.search.scheme = as_config_error(l, "search.scheme", [&] { return parse_search_scheme(v); });
                 },
                 [](const RunConfig& c) { return search_scheme_name(c.search.scheme); }});
    f.push_back(count_in("search.epochs", &RunConfig::search, &SearchConfig::epochs));
    f.push_back(real_in("search.lr", &RunConfig::search, &SearchConfig::lr_weights));
    f.push_back(real_in("search.lr_alpha", &RunConfig::search, &SearchConfig::lr_alpha));
    f.push_back(real_in("search.momentum", &RunConfig::search, &SearchConfig::momentum));
    f.push_back(real_in("search.weight_decay", &RunConfig::search, &SearchConfig::weight_decay));
    f.push_back(real_in("search.adam_beta1", &RunConfig::search, &SearchConfig::adam_beta1));
    f.push_back(real_in("search.adam_beta2", &RunConfig::search, &SearchConfig::adam_beta2));
    f.push_back(real_in("search.tau", &RunConfig::search, &SearchConfig::tau));
    f.push_back(real_in("search.beta", &RunConfig::search, &SearchConfig::memory_beta));
    f.push_back(count_in("search.p", &RunConfig::search, &SearchConfig::p));
    f.push_back(count_in("search.k", &RunConfig::search, &SearchConfig::k));
    f.push_back({"search.augment",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   c.search.augment = as_config_error(l, "search.augment", [&] { return parse_augment_policy(v); });
                 },
                 [](const RunConfig& c) { return augment_policy_name(c.search.augment); }});

    f.push_back({"train.arch",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   if (v.empty()) fail(l, "train.arch must not be empty");
                   if (v.rfind("fixed:", 0) == 0) {
                     if (v.size() != 7) fail(l, "train.arch: expected fixed:<N|E|G|A>");
                     as_config_error(l, "train.arch", [&] { return op_from_code(v[6]); });
                   }
                   c.arch = v;
                 },
                 [](const RunConfig& c) { return c.arch; }});
    f.push_back(count_in("train.epochs", &RunConfig::train, &TrainConfig::epochs));
    f.push_back(real_in("train.lr", &RunConfig::train, &TrainConfig::lr));
    f.push_back(real_in("train.momentum", &RunConfig::train, &TrainConfig::momentum));
    f.push_back(real_in("train.weight_decay", &RunConfig::train, &TrainConfig::weight_decay));
    f.push_back(count_in("train.p", &RunConfig::train, &TrainConfig::p));
    f.push_back(count_in("train.k", &RunConfig::train, &TrainConfig::k));
    f.push_back({"train.margin",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   c.train.loss.margin = to_real(v, l, "train.margin");
                 },
                 [](const RunConfig& c) { return real_text(c.train.loss.margin); }});
    f.push_back({"train.sam_mode",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   c.train.loss.sam.mode = as_config_error(l, "train.sam_mode", [&] { return parse_sam_mode(v); });
                 },
                 [](const RunConfig& c) { return sam_mode_name(c.train.loss.sam.mode); }});
    f.push_back({"train.lambda_sa",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   c.train.loss.sam.lambda_sa = to_real(v, l, "train.lambda_sa");
                 },
                 [](const RunConfig& c) { return real_text(c.train.loss.sam.lambda_sa); }});
    f.push_back({"train.augment",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   c.train.augment = as_config_error(l, "train.augment", [&] { return parse_augment_policy(v); });
                 },
                 [](const RunConfig& c) { return augment_policy_name(c.train.augment); }});

    f.push_back(count_field("eval.max_rank", &RunConfig::max_rank));
    f.push_back(count_field("eval.batch_size", &RunConfig::eval_batch));
    f.push_back({"eval.checkpoint", [](RunConfig& c, const std::string& v, const Location&) { c.checkpoint = v; },
                 [](const RunConfig& c) { return c.checkpoint; }});

    f.push_back({"sweep.axis",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   if (v != "rho" && v != "lambda_sa" && v != "fusion" && v != "overlap")
                     fail(l, "sweep.axis: expected rho, lambda_sa, fusion or overlap, got '" + v + "'");
                   c.sweep_axis = v;
                 },
                 [](const RunConfig& c) { return c.sweep_axis; }});
    f.push_back({"sweep.values",
                 [](RunConfig& c, const std::string& v, const Location& l) {
                   auto vals = split_list(v);
                   for (const auto& s : vals)
                     if (s.empty()) fail(l, "sweep.values: empty entry");
                   c.sweep_values = std::move(vals);
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.sweep_values.size(); ++i) s += (i ? "," : "") + c.sweep_values[i];
                   return s;
                 }});
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

RunConfig preset_config(const std::string& name, const Location& loc) {
  RunConfig c;
  if (name == "desk") return c;
  if (name == "full") {
    c.preset = "full";
    c.space = SupernetConfig::full_scale();
    c.search.epochs = 350;
    c.train.epochs = 350;
    return c;
  }
  fail(loc, "preset: expected desk or full, got '" + name + "'");
}

struct Entry {
  std::string key, value;
  Location loc;
};

// Applies one sweep value on the configured axis.
RunConfig apply_sweep_point_at(const RunConfig& base, const std::string& value, const Location& loc) {
  RunConfig c = base;
  if (base.sweep_axis == "rho") {
    find_field("space.rho")->set(c, value, loc);
    if (c.space.rho == 0) fail(loc, "sweep value rho must be at least 1");
  } else if (base.sweep_axis == "lambda_sa") {
    find_field("train.lambda_sa")->set(c, value, loc);
    if (c.train.loss.sam.lambda_sa < 0) fail(loc, "sweep value lambda_sa must be non-negative");
  } else if (base.sweep_axis == "fusion") {
    find_field("space.fusion")->set(c, value, loc);
  } else {
    const auto colon = value.find(':');
    if (colon == std::string::npos) fail(loc, "overlap sweep values are train:val percentages, got '" + value + "'");
    find_field("split.train_pct")->set(c, value.substr(0, colon), loc);
    find_field("split.val_pct")->set(c, value.substr(colon + 1), loc);
    as_config_error(loc, "sweep.values", [&] {
      c.search.split.validate();
      return 0;
    });
  }
  return c;
}

void validate_resolved(const RunConfig& c, const Location& loc) {
  as_config_error(loc, "data", [&] {
    SyntheticConfig d = c.data;
    d.height = c.space.image_h;
    d.width = c.space.image_w;
    d.validate();
    return 0;
  });
  as_config_error(loc, "space", [&] {
    c.space.validate();
    return 0;
  });
  as_config_error(loc, "search", [&] {
    c.search.validate();
    return 0;
  });
  as_config_error(loc, "train", [&] {
    c.train.validate();
    return 0;
  });
  if (c.max_rank == 0) fail(loc, "eval.max_rank must be positive");
  if (c.eval_batch < 2) fail(loc, "eval.batch_size must be at least 2");
  if (c.sweep_values.empty()) fail(loc, "sweep.values must list at least one value");
  if (c.sweep_axis == "overlap" && c.arch != "searched")
    fail(loc, "an overlap sweep needs train.arch = searched");
  for (const auto& v : c.sweep_values) (void)apply_sweep_point_at(c, v, loc);
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& where, const std::vector<std::string>& overrides) {
  std::vector<Entry> entries;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t lineno = 0;
  std::optional<Entry> preset;
  auto add = [&](std::string key, std::string value, const Location& loc) {
    if (key == "preset") {
      preset = Entry{key, value, loc};
      return;
    }
    if (!find_field(key)) fail(loc, "unknown key '" + key + "'");
    entries.push_back({std::move(key), std::move(value), loc});
  };
  std::vector<std::string> seen;
  while (std::getline(in, raw)) {
    ++lineno;
    const Location loc{where, lineno};
    std::string line = raw;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(loc, "malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty() || section.find_first_of(" \t.=") != std::string::npos)
        fail(loc, "malformed section name '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(loc, "expected 'key = value', got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) fail(loc, "missing key before '='");
    if (!section.empty()) key = section + "." + key;
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) fail(loc, "duplicate key '" + key + "'");
    seen.push_back(key);
    add(key, trim(line.substr(eq + 1)), loc);
  }
  for (std::size_t i = 0; i < overrides.size(); ++i) {
    const Location loc{"--set", i + 1};
    const auto eq = overrides[i].find('=');
    if (eq == std::string::npos) fail(loc, "expected key=value, got '" + overrides[i] + "'");
    add(trim(overrides[i].substr(0, eq)), trim(overrides[i].substr(eq + 1)), loc);
  }

  RunConfig cfg = preset ? preset_config(preset->value, preset->loc) : RunConfig{};
  Location last{where, 0};
  for (const auto& e : entries) {
    find_field(e.key)->set(cfg, e.value, e.loc);
    last = e.loc;
  }
  // One seed drives every stage; synthetic images follow the network input size.
  cfg.data.seed = cfg.search.seed = cfg.search.split.seed = cfg.train.seed = cfg.seed;
  cfg.data.height = cfg.space.image_h;
  cfg.data.width = cfg.space.image_w;
  validate_resolved(cfg, last);
  return cfg;
}

RunConfig sweep_point(const RunConfig& base, const std::string& value) {
  return apply_sweep_point_at(base, value, Location{"sweep.values", 0});
}

std::string config_to_text(const RunConfig& cfg) {
  std::ostringstream out;
  out << "# resolved configuration\n";
  out << "preset = " << cfg.preset << '\n';
  for (const auto& f : fields()) out << f.key << " = " << f.get(cfg) << '\n';
  return out.str();
}

}  // namespace msinet

#include "msinet/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "msinet/error.hpp"
#include "msinet/layers.hpp"
#include "msinet/seed.hpp"
#include "util/atomic_file.hpp"

namespace msinet {

namespace {

constexpr std::uint64_t kIdentityStream = 0x1D;
constexpr std::uint64_t kViewStream = 0x5E;
constexpr std::uint64_t kImageStream = 0x1A;
constexpr std::uint64_t kSamplerStream = 0x9B;
constexpr std::uint64_t kAugmentStream = 0xA7;

using Rgb = std::array<double, 3>;

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

Rgb random_colour(Rng& rng, double lo, double hi) {
  return {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)};
}

// Appearance of one identity in normalized body coordinates.
struct Figure {
  Rgb head, upper, lower, glyph, accent;
  int glyph_shape = 0;     // 0 disk, 1 square, 2 horizontal bar, 3 vertical bar
  double glyph_size = 0;   // fraction of the image width
  double half_width = 0;   // torso half width, fraction of the image width
  double waist = 0;        // torso/legs boundary, fraction of the image height
  bool has_accent = false; // a coloured band across the legs
  double accent_at = 0;

  static Figure sample(Rng& rng) {
    Figure f;
    f.head = {uniform(rng, 0.55, 0.9), uniform(rng, 0.4, 0.7), uniform(rng, 0.3, 0.55)};
    f.upper = random_colour(rng, 0.05, 0.95);
    f.lower = random_colour(rng, 0.05, 0.95);
    f.glyph = random_colour(rng, 0.05, 0.95);
    f.accent = random_colour(rng, 0.05, 0.95);
    f.glyph_shape = static_cast<int>(uniform_index(rng, 4));
    f.glyph_size = uniform(rng, 0.08, 0.14);
    f.half_width = uniform(rng, 0.16, 0.26);
    f.waist = uniform(rng, 0.5, 0.62);
    f.has_accent = uniform01(rng) < 0.5;
    f.accent_at = uniform(rng, 0.0, 1.0);
    return f;
  }

  // Colour at normalized (u across, t down), or nothing for background.
  bool colour_at(double u, double t, double aspect, Rgb& out) const {
    const double du = (u - 0.5) * aspect;  // horizontal distance in height units
    {
      const double a = (u - 0.5) / 0.12, b = (t - 0.13) / 0.08;
      if (a * a + b * b <= 1.0) {
        out = head;
        return true;
      }
    }
    if (t >= 0.22 && t < waist && std::abs(u - 0.5) < half_width) {
      const double cy = (0.22 + waist) / 2;
      const double r = glyph_size * aspect;  // glyph size in height units
      const double dy = t - cy;
      bool in_glyph = false;
      switch (glyph_shape) {
        case 0: in_glyph = du * du + dy * dy <= r * r; break;
        case 1: in_glyph = std::abs(du) <= r && std::abs(dy) <= r; break;
        case 2: in_glyph = std::abs(du) <= 2 * r && std::abs(dy) <= r / 2; break;
        default: in_glyph = std::abs(du) <= r / 2 && std::abs(dy) <= 2 * r; break;
      }
      out = in_glyph ? glyph : upper;
      return true;
    }
    if (t >= waist && t < 0.95) {
      const double leg_half = half_width * 0.45;
      const double off = std::abs(u - 0.5) - half_width * 0.5;
      if (std::abs(off) < leg_half) {
        const double band = waist + (0.95 - waist) * (0.2 + 0.6 * accent_at);
        out = (has_accent && std::abs(t - band) < 0.03) ? accent : lower;
        return true;
      }
    }
    return false;
  }
};

struct ViewStyle {
  Rgb gain{1, 1, 1};
  double offset = 0;
  Rgb background{0.5, 0.5, 0.5};
};

ViewStyle sample_view(const SyntheticConfig& cfg, std::size_t view) {
  Rng rng(derive_seed({cfg.seed, kViewStream, view}));
  ViewStyle v;
  for (double& g : v.gain) g = 1.0 + cfg.brightness * uniform(rng, -1, 1);
  v.offset = 0.3 * cfg.brightness * uniform(rng, -1, 1);
  for (double& c : v.background) c = 0.5 + 0.4 * cfg.background * uniform(rng, -1, 1);
  return v;
}

Image render(const SyntheticConfig& cfg, const Figure& fig, const ViewStyle& view, std::uint64_t image_seed) {
  Rng rng(image_seed);
  const std::size_t H = cfg.height, W = cfg.width;
  const double aspect = static_cast<double>(W) / static_cast<double>(H);
  const long dx = std::lround(cfg.translation * uniform(rng, -1, 1));
  const long dy = std::lround(cfg.translation * uniform(rng, -1, 1));
  const double jitter = 1.0 + 0.1 * cfg.brightness * uniform(rng, -1, 1);

  std::vector<Rgb> canvas(H * W, view.background);
  const auto clutter = static_cast<std::size_t>(std::lround(6.0 * cfg.background));
  for (std::size_t r = 0; r < clutter; ++r) {
    const Rgb c = random_colour(rng, 0.0, 1.0);
    const auto y0 = uniform_index(rng, H), x0 = uniform_index(rng, W);
    const auto h = 1 + uniform_index(rng, std::max<std::size_t>(1, H / 4));
    const auto w = 1 + uniform_index(rng, std::max<std::size_t>(1, W / 3));
    for (std::size_t y = y0; y < std::min(H, y0 + h); ++y)
      for (std::size_t x = x0; x < std::min(W, x0 + w); ++x) canvas[y * W + x] = c;
  }
  const double noise = 0.06 * cfg.background;
  Image img{H, W, std::vector<std::uint8_t>(H * W * 3)};
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double u = (static_cast<double>(x) - static_cast<double>(dx) + 0.5) / static_cast<double>(W);
      const double t = (static_cast<double>(y) - static_cast<double>(dy) + 0.5) / static_cast<double>(H);
      Rgb c = canvas[y * W + x];
      const bool person = fig.colour_at(u, t, aspect, c);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = c[ch];
        if (!person && noise > 0) v += noise * uniform(rng, -1, 1);
        v = view.gain[ch] * jitter * v + view.offset;
        img.pixels[(y * W + x) * 3 + ch] = quantize(v);
      }
    }
  }
  return img;
}

std::size_t parse_count(const std::string& field, const std::string& where, std::size_t line, const char* what) {
  std::size_t v = 0;
  const char* end = field.data() + field.size();
  auto [p, ec] = std::from_chars(field.data(), end, v);
  if (ec != std::errc() || p != end || field.empty())
    throw ParseError(where, line, std::string("bad ") + what + " '" + field + "'");
  return v;
}

}  // namespace

FloatImage to_float(const Image& img) {
  const std::size_t hw = img.height * img.width;
  FloatImage out{img.height, img.width, std::vector<float>(3 * hw)};
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.data[c * hw + i] = static_cast<float>(img.pixels[i * 3 + c]) / 255.0f;
  return out;
}

std::string split_side_name(SplitSide s) {
  switch (s) {
    case SplitSide::Train: return "train";
    case SplitSide::Val: return "val";
    case SplitSide::Probe: return "probe";
    case SplitSide::Gallery: return "gallery";
  }
  throw InternalError("unknown split side");
}

SplitSide parse_split_side(const std::string& name) {
  for (SplitSide s : {SplitSide::Train, SplitSide::Val, SplitSide::Probe, SplitSide::Gallery})
    if (split_side_name(s) == name) return s;
  throw ArgumentError("unknown split '" + name + "' (expected train, val, probe or gallery)");
}

std::vector<std::size_t> IdentityDataset::indices(SplitSide side) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].side == side) out.push_back(i);
  return out;
}

void SyntheticConfig::validate() const {
  if (num_ids == 0) throw ArgumentError("synthetic data needs at least one training identity");
  if (imgs_per_id == 0 || num_views == 0) throw ArgumentError("synthetic data needs images and views");
  if (heldout_ids > 0 && imgs_per_id <= num_views)
    throw ArgumentError("held-out identities need more images than views to fill the gallery");
  if (height < 8 || width < 8) throw ArgumentError("synthetic images must be at least 8x8");
  if (brightness < 0 || brightness > 0.9 || translation < 0 || background < 0 || background > 1)
    throw ArgumentError("nuisance strengths out of range");
}

IdentityDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::vector<ViewStyle> views;
  for (std::size_t v = 0; v < cfg.num_views; ++v) views.push_back(sample_view(cfg, v));

  IdentityDataset ds;
  const std::size_t total = cfg.num_ids + cfg.heldout_ids;
  for (std::size_t id = 0; id < total; ++id) {
    Rng id_rng(derive_seed({cfg.seed, kIdentityStream, id}));
    const Figure fig = Figure::sample(id_rng);
    const bool heldout = id >= cfg.num_ids;
    for (std::size_t i = 0; i < cfg.imgs_per_id; ++i) {
      IdentityRecord r;
      r.identity = id;
      r.view = i % cfg.num_views;
      r.side = !heldout ? SplitSide::Train : (i < cfg.num_views ? SplitSide::Probe : SplitSide::Gallery);
      r.image = render(cfg, fig, views[r.view], derive_seed({cfg.seed, kImageStream, id, i}));
      ds.records.push_back(std::move(r));
    }
  }
  return ds;
}

std::string encode_ppm(const Image& img) {
  if (img.pixels.size() != img.height * img.width * 3) throw ArgumentError("image pixel buffer has the wrong size");
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

Image decode_ppm(const std::string& bytes, const std::string& where) {
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) && bytes[pos] != '#') ++pos;
    return bytes.substr(start, pos - start);
  };
  auto number = [&](const char* what) {
    const std::string tok = next_token();
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (tok.empty() || ec != std::errc() || p != tok.data() + tok.size())
      throw ParseError(where + ": bad PPM " + what + " '" + tok + "'");
    return v;
  };
  if (next_token() != "P6") throw ParseError(where + ": not a binary PPM (expected P6)");
  Image img;
  img.width = number("width");
  img.height = number("height");
  if (img.width == 0 || img.height == 0) throw ParseError(where + ": PPM has zero size");
  if (number("maxval") != 255) throw ParseError(where + ": only 8-bit PPM (maxval 255) is supported");
  if (pos >= bytes.size()) throw ParseError(where + ": PPM pixel data missing");
  ++pos;  // single whitespace byte before the raster
  const std::size_t n = img.width * img.height * 3;
  if (bytes.size() - pos < n) throw ParseError(where + ": PPM pixel data truncated");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

void write_dataset(const IdentityDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  std::ostringstream manifest;
  manifest << "# path\tidentity\tview\tsplit\n";
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    char name[64];
    std::snprintf(name, sizeof name, "images/%06zu_id%zu_v%zu.ppm", i, r.identity, r.view);
    write_file_atomic((fs::path(dir) / name).string(), encode_ppm(r.image));
    manifest << name << '\t' << r.identity << '\t' << r.view << '\t' << split_side_name(r.side) << '\n';
  }
  write_file_atomic((fs::path(dir) / "manifest.tsv").string(), manifest.str());
}

IdentityDataset load_manifest(const std::string& path) {
  namespace fs = std::filesystem;
  const std::string text = read_file(path);
  const fs::path base = fs::path(path).parent_path();
  IdentityDataset ds;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 4)
      throw ParseError(path, lineno, "expected 4 tab-separated fields, got " + std::to_string(fields.size()));
    IdentityRecord r;
    r.path = fields[0];
    if (r.path.empty()) throw ParseError(path, lineno, "empty image path");
    r.identity = parse_count(fields[1], path, lineno, "identity");
    r.view = parse_count(fields[2], path, lineno, "view");
    try {
      r.side = parse_split_side(fields[3]);
    } catch (const ArgumentError& e) {
      throw ParseError(path, lineno, e.what());
    }
    try {
      r.image = decode_ppm(read_file((base / r.path).string()), r.path);
    } catch (const ParseError& e) {
      throw ParseError(path, lineno, std::string("image: ") + e.what());
    }
    if (!ds.records.empty() && (r.image.height != ds.records[0].image.height ||
                                r.image.width != ds.records[0].image.width))
      throw ParseError(path, lineno, "image size differs from the first record");
    ds.records.push_back(std::move(r));
  }
  if (ds.records.empty()) throw ParseError(path, 0, "manifest lists no images");
  return ds;
}

std::vector<std::vector<std::size_t>> pk_batches(const IdentityDataset& ds, std::span<const std::size_t> records,
                                                 std::size_t p, std::size_t k, std::uint64_t seed,
                                                 std::uint64_t epoch) {
  if (p == 0 || k == 0) throw ArgumentError("P and K must be positive");
  std::map<std::size_t, std::vector<std::size_t>> by_id;
  for (std::size_t r : records) {
    if (r >= ds.records.size()) throw ArgumentError("record index out of range");
    by_id[ds.records[r].identity].push_back(r);
  }
  if (by_id.size() < p)
    throw ArgumentError("PK sampling needs at least P=" + std::to_string(p) + " identities, got " +
                        std::to_string(by_id.size()));
  Rng rng(derive_seed({seed, kSamplerStream, epoch}));

  // Per-identity chunks of K: pad with replacement when short, shuffle, drop the tail.
  std::vector<std::size_t> ids;
  std::map<std::size_t, std::vector<std::vector<std::size_t>>> chunks;
  auto fresh_chunks = [&](std::size_t id) {
    std::vector<std::size_t> pool = by_id[id];
    while (pool.size() < k) pool.push_back(by_id[id][uniform_index(rng, by_id[id].size())]);
    shuffle_range(pool.begin(), pool.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i + k <= pool.size(); i += k) out.emplace_back(pool.begin() + i, pool.begin() + i + k);
    return out;
  };
  for (auto& [id, _] : by_id) {
    ids.push_back(id);
    chunks[id] = fresh_chunks(id);
  }

  std::vector<std::vector<std::size_t>> batches;
  std::set<std::size_t> unused(ids.begin(), ids.end());
  std::vector<std::size_t> available = ids;
  auto emit = [&](const std::vector<std::size_t>& chosen) {
    std::vector<std::size_t> batch;
    for (std::size_t id : chosen) {
      auto& c = chunks[id];
      if (c.empty()) c = fresh_chunks(id);
      batch.insert(batch.end(), c.back().begin(), c.back().end());
      c.pop_back();
      unused.erase(id);
    }
    batches.push_back(std::move(batch));
  };
  while (available.size() >= p) {
    for (std::size_t i = 0; i < p; ++i) std::swap(available[i], available[i + uniform_index(rng, available.size() - i)]);
    const std::vector<std::size_t> chosen(available.begin(), available.begin() + static_cast<std::ptrdiff_t>(p));
    emit(chosen);
    std::erase_if(available, [&](std::size_t id) { return chunks[id].empty(); });
  }
  // Identities never drawn this epoch get a final batch, filled with random others.
  while (!unused.empty()) {
    std::vector<std::size_t> chosen;
    for (auto it = unused.begin(); it != unused.end() && chosen.size() < p; ++it) chosen.push_back(*it);
    std::vector<std::size_t> rest;
    for (std::size_t id : ids)
      if (std::find(chosen.begin(), chosen.end(), id) == chosen.end()) rest.push_back(id);
    shuffle_range(rest.begin(), rest.end(), rng);
    for (std::size_t i = 0; chosen.size() < p; ++i) chosen.push_back(rest[i]);
    emit(chosen);
  }
  return batches;
}

std::string augment_policy_name(AugmentPolicy p) {
  switch (p) {
    case AugmentPolicy::None: return "none";
    case AugmentPolicy::Supervised: return "supervised";
    case AugmentPolicy::CrossDomain: return "cross_domain";
  }
  throw InternalError("unknown augmentation policy");
}

AugmentPolicy parse_augment_policy(const std::string& name) {
  for (AugmentPolicy p : {AugmentPolicy::None, AugmentPolicy::Supervised, AugmentPolicy::CrossDomain})
    if (augment_policy_name(p) == name) return p;
  throw ArgumentError("unknown augmentation policy '" + name + "' (expected none, supervised or cross_domain)");
}

FloatImage augment(const FloatImage& img, AugmentPolicy policy, std::uint64_t seed, std::uint64_t index,
                   const AugmentOptions& opts) {
  if (img.data.size() != 3 * img.height * img.width) throw ArgumentError("image buffer has the wrong size");
  if (policy == AugmentPolicy::None) return img;
  Rng rng(derive_seed({seed, kAugmentStream, index}));
  const std::size_t H = img.height, W = img.width, HW = H * W;
  FloatImage out = img;

  if (uniform01(rng) < opts.flip_p) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) out.data[c * HW + y * W + x] = img.data[c * HW + y * W + (W - 1 - x)];
  }

  if (opts.crop_pad > 0) {
    // Zero-pad by crop_pad on each side, then crop back to H x W.
    const long pad = static_cast<long>(opts.crop_pad);
    const long oy = static_cast<long>(uniform_index(rng, 2 * opts.crop_pad + 1)) - pad;
    const long ox = static_cast<long>(uniform_index(rng, 2 * opts.crop_pad + 1)) - pad;
    const FloatImage src = out;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const long sy = static_cast<long>(y) + oy, sx = static_cast<long>(x) + ox;
          const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(H) && sx < static_cast<long>(W);
          out.data[c * HW + y * W + x] = inside ? src.data[c * HW + static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)] : 0.0f;
        }
  }

  if (policy == AugmentPolicy::CrossDomain) {
    const double b = uniform(rng, 1 - opts.jitter, 1 + opts.jitter);
    const double ct = uniform(rng, 1 - opts.jitter, 1 + opts.jitter);
    double mean = 0;
    for (float v : out.data) mean += v;
    mean = mean * b / static_cast<double>(out.data.size());
    for (float& v : out.data) v = static_cast<float>(std::clamp((v * b - mean) * ct + mean, 0.0, 1.0));
  }

  if (policy == AugmentPolicy::Supervised && uniform01(rng) < opts.erase_p) {
    const double area = static_cast<double>(HW);
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double target = uniform(rng, opts.erase_area_min, opts.erase_area_max) * area;
      const double aspect = uniform(rng, opts.erase_aspect_min, 1.0 / opts.erase_aspect_min);
      const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
      const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
      if (h == 0 || w == 0 || h >= H || w >= W) continue;
      const std::size_t y0 = uniform_index(rng, H - h + 1), x0 = uniform_index(rng, W - w + 1);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = y0; y < y0 + h; ++y)
          for (std::size_t x = x0; x < x0 + w; ++x) out.data[c * HW + y * W + x] = static_cast<float>(uniform01(rng));
      break;
    }
  }
  return out;
}

template <typename T>
Tensor<T> stack_images(std::span<const FloatImage> images) {
  if (images.empty()) throw ArgumentError("cannot stack an empty image list");
  const std::size_t H = images[0].height, W = images[0].width, n = 3 * H * W;
  Tensor<T> out({images.size(), 3, H, W});
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b].height != H || images[b].width != W || images[b].data.size() != n)
      throw ArgumentError("images in a batch must share one size");
    std::copy(images[b].data.begin(), images[b].data.end(), out.data() + b * n);
  }
  return out;
}

template Tensor<float> stack_images(std::span<const FloatImage>);
template Tensor<double> stack_images(std::span<const FloatImage>);

}  // namespace msinet

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "msinet/numerics/tensor.hpp"

namespace msinet {

// 8-bit RGB raster, row-major HWC; values map to [0,1] by v / 255.
struct Image {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const Image&) const = default;
};

// Planar CHW float image with values in [0,1].
struct FloatImage {
  std::size_t height = 0, width = 0;
  std::vector<float> data;

  bool operator==(const FloatImage&) const = default;
};

FloatImage to_float(const Image& img);

enum class SplitSide { Train, Val, Probe, Gallery };
std::string split_side_name(SplitSide s);
SplitSide parse_split_side(const std::string& name);

struct IdentityRecord {
  Image image;
  std::size_t identity = 0;
  std::size_t view = 0;
  SplitSide side = SplitSide::Train;
  std::string path;  // relative path in a manifest, empty for generated data

  bool operator==(const IdentityRecord&) const = default;
};

struct IdentityDataset {
  std::vector<IdentityRecord> records;

  // Records on one side, in dataset order.
  std::vector<std::size_t> indices(SplitSide side) const;
};

struct SyntheticConfig {
  std::size_t num_ids = 64;      // training pool
  std::size_t heldout_ids = 16;  // disjoint probe/gallery identities
  std::size_t imgs_per_id = 12;  // spread round-robin over the views
  std::size_t num_views = 4;
  std::size_t height = 64, width = 32;
  std::uint64_t seed = 0;
  // Nuisance strengths; all zero makes every image of an identity identical.
  double brightness = 0.35;   // per-view channel gain spread and offset
  double translation = 3.0;   // max shift in pixels
  double background = 1.0;    // clutter/noise strength and per-view background colour

  void validate() const;
  bool operator==(const SyntheticConfig&) const = default;
};

// Pool identities get labels [0, num_ids) on the train side; held-out ones get
// [num_ids, num_ids + heldout_ids), with the first image of each (identity, view)
// as probe and the rest as gallery.
IdentityDataset generate_synthetic(const SyntheticConfig& cfg);

// P6 raster I/O.
std::string encode_ppm(const Image& img);
Image decode_ppm(const std::string& bytes, const std::string& where = "image");

// Writes `dir/manifest.tsv` and one raster per record under `dir/images/`.
void write_dataset(const IdentityDataset& ds, const std::string& dir);
// Tab-separated `path\tidentity\tview\tsplit`, paths relative to the manifest.
IdentityDataset load_manifest(const std::string& path);

// P identities x K images per batch (record indices into `records`); identities
// with fewer than K images are sampled with replacement. Every identity
// appears at least once per epoch. Order is a function of (seed, epoch).
std::vector<std::vector<std::size_t>> pk_batches(const IdentityDataset& ds, std::span<const std::size_t> records,
                                                 std::size_t p, std::size_t k, std::uint64_t seed,
                                                 std::uint64_t epoch);

enum class AugmentPolicy { None, Supervised, CrossDomain };
std::string augment_policy_name(AugmentPolicy p);
AugmentPolicy parse_augment_policy(const std::string& name);

// Probabilities and ranges; tests override them to force or disable steps.
struct AugmentOptions {
  double flip_p = 0.5;
  std::size_t crop_pad = 2;
  double erase_p = 0.5;
  double erase_area_min = 0.02, erase_area_max = 0.2;
  double erase_aspect_min = 0.3;
  double jitter = 0.2;  // brightness and contrast factors in [1 - j, 1 + j]
};

// Deterministic per (seed, index); output keeps shape and the [0,1] range.
FloatImage augment(const FloatImage& img, AugmentPolicy policy, std::uint64_t seed, std::uint64_t index,
                   const AugmentOptions& opts = {});

// Stacks images into [B,3,H,W].
template <typename T>
Tensor<T> stack_images(std::span<const FloatImage> images);

}  // namespace msinet

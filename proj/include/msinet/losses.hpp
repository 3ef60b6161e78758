#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msinet/layers.hpp"
#include "msinet/msi_space.hpp"

namespace msinet {

// Mean over the batch of -log softmax(W f)[label].
template <typename T>
Var<T> id_loss(Var<T> features, std::span<const std::size_t> labels, LinearParams<T>& classifier);

// Mean over anchors of [max_p D(a,p) - min_n D(a,n) + margin]_+ with Euclidean D.
// Ties pick the lowest batch index.
template <typename T>
Var<T> triplet_batch_hard(Var<T> features, std::span<const std::size_t> labels, T margin);

// a(i,j)[p] = max over q of sum_c x_j[c,q] x_i[c,p], for [C,H,W] maps; returns [H*W].
template <typename T>
Var<T> correlation_activation(Var<T> x_i, Var<T> x_j);
// Batched form over maps [B,C,H,W]: one row a(i,j) per (i, j) pair -> [P, H*W].
template <typename T>
Var<T> correlation_activations(Var<T> maps, std::span<const std::pair<std::size_t, std::size_t>> pairs);

// Position activation module: sigmoid of a 1x1 conv to a single channel.
template <typename T>
struct PamParams {
  Conv2dParams<T> conv;

  static PamParams create(std::size_t channels, Rng& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

// [B,C,H,W] -> [B, H*W]
template <typename T>
Var<T> pam_forward(Var<T> maps, PamParams<T>& p);

enum class SamMode { Off, PosSelf, NegSelf, Unified, Separated, PamSelf };
std::string sam_mode_name(SamMode m);
SamMode parse_sam_mode(const std::string& name);
inline bool sam_mode_needs_pam(SamMode m) { return m == SamMode::PamSelf; }

struct SamConfig {
  SamMode mode = SamMode::PamSelf;
  double lambda_sa = 2.0;

  bool operator==(const SamConfig&) const = default;
};

// Spatial alignment loss over the last feature maps. Terms with no instances
// in the batch contribute 0 and append a message to `warnings` when given.
template <typename T>
Var<T> sam_loss(Var<T> maps, std::span<const std::size_t> labels, SamMode mode, PamParams<T>* pam,
                std::vector<std::string>* warnings = nullptr);

// Normalization neck and identity classifier used during final training.
template <typename T>
struct TrainHeads {
  BatchNormState<T> neck;
  LinearParams<T> classifier;  // [num_ids, D], no bias
  std::optional<PamParams<T>> pam;

  static TrainHeads create(std::size_t dim, std::size_t num_ids, std::size_t map_channels, const SamConfig& sam,
                           Rng& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

struct LossConfig {
  double margin = 0.3;
  SamConfig sam;

  bool operator==(const LossConfig&) const = default;
};

template <typename T>
struct LossTerms {
  Var<T> total;
  double id = 0, triplet = 0, sam = 0;
};

// L_id + L_tri + lambda_sa * L_sa; the SAM term is left out entirely when off.
template <typename T>
LossTerms<T> total_loss(const NetworkOutput<T>& out, std::span<const std::size_t> labels, TrainHeads<T>& heads,
                        const LossConfig& cfg, std::vector<std::string>* warnings = nullptr);

}  // namespace msinet

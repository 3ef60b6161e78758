#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msinet/data.hpp"
#include "msinet/msi_space.hpp"
#include "msinet/numerics/optim.hpp"

namespace msinet {

// Identity percentages for the two search sides. When they sum past 100 the
// excess identities appear on both sides with their images divided between them.
struct SplitConfig {
  double train_pct = 60;
  double val_pct = 80;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SplitConfig&) const = default;
};

struct TwinSplit {
  std::vector<std::size_t> train, val;          // record indices
  std::vector<std::size_t> train_ids, val_ids;  // sorted identity labels per side
  std::size_t overlap = 0;                      // identities on both sides
};

// Number of identities on both sides: floor(max(0, tr + va - 100) * n / 100).
std::size_t overlap_count(std::size_t num_ids, const SplitConfig& cfg);

// After a seeded shuffle of the identities, train takes the first
// floor(n * tr / 100) and val the last (n - n_train + overlap). An identity on
// both sides alternates its images between them, train first.
TwinSplit twin_split(const IdentityDataset& ds, std::span<const std::size_t> records, const SplitConfig& cfg);

// Per-category unit-norm centroids used as a non-parametric classifier.
struct MemoryBank {
  Tensor<double> centroids;  // [N_c, D]
  double beta = 0.2;
  double tau = 0.05;
  std::map<std::size_t, std::size_t> label_index;  // category -> row

  // Row j is the normalized mean of features labelled with the j-th smallest category.
  static MemoryBank init(const Tensor<double>& features, std::span<const std::size_t> labels, double beta = 0.2,
                         double tau = 0.05);
  std::size_t row(std::size_t label) const;
  std::size_t size() const { return label_index.size(); }
  // c <- normalize(beta * c + (1 - beta) * f) for the row of `label`.
  void update(std::span<const double> feature, std::size_t label);
};

// Mean over the batch of -log softmax(f C^T / tau)[row(label)] for
// L2-normalized features [B,D]; the bank is a constant.
template <typename T>
Var<T> contrastive_loss(Var<T> features, std::span<const std::size_t> labels, const MemoryBank& bank);

// Warmup and step-decay epochs, scaled from a reference schedule.
struct Schedule {
  std::size_t warmup_epochs = 10;
  std::vector<std::size_t> milestones{150, 225, 300};
  double gamma = 0.1;

  // 350-epoch reference schedule.
  static Schedule reference();
  // Reference epochs scaled by round(e * total / 350).
  static Schedule scaled(std::size_t total_epochs);
  bool operator==(const Schedule&) const = default;
};

// base * (0.1 + 0.9 * e / W) during warmup, then base * gamma^(passed milestones).
double lr_at(std::size_t epoch, double base_lr, const Schedule& schedule);

enum class SearchScheme { Tcm, TcmOverlap, CeOverlap };
std::string search_scheme_name(SearchScheme s);
SearchScheme parse_search_scheme(const std::string& name);

struct SearchConfig {
  SearchScheme scheme = SearchScheme::Tcm;
  std::size_t epochs = 60;
  double lr_weights = 0.025;
  double lr_alpha = 0.002;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double adam_beta1 = 0.5, adam_beta2 = 0.999;
  double tau = 0.05;
  double memory_beta = 0.2;
  std::size_t p = 8, k = 4;
  AugmentPolicy augment = AugmentPolicy::Supervised;
  SplitConfig split;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SearchConfig&) const = default;
};

// Split used by a scheme: the overlap schemes place every identity on both sides.
SplitConfig effective_split(const SearchConfig& cfg);

// Images with bank/classifier categories.
struct LabelledBatch {
  Tensor<float> images;  // [B,3,H,W]
  std::vector<std::size_t> labels;
};

struct SearchState {
  MsiNetwork<float> net;
  Tensor<float> alpha;  // [12,4] architecture logits
  SgdState<float> weight_opt;
  AdamState<float> alpha_opt;
  // Shared classifier of the cross-entropy baseline, trained with the weights.
  std::optional<LinearParams<float>> classifier;
  MemoryBank train_bank, val_bank;
  std::size_t epoch = 0;

  static SearchState create(const SupernetConfig& space, const SearchConfig& cfg, Rng& rng);
  // Supernet weights plus the baseline classifier, if any.
  std::vector<Tensor<float>*> weights();
};

struct PhaseResult {
  double loss = 0;
  Tensor<double> features;  // normalized batch embeddings [B,D]
};

// Weight phase: loss on the train batch, SGD on the weights; alpha is a constant.
PhaseResult weight_phase(SearchState& st, const LabelledBatch& batch, SearchScheme scheme, double lr);
// Architecture phase: loss on the val batch, Adam on alpha; weights and
// batch-norm running statistics stay fixed.
PhaseResult alpha_phase(SearchState& st, const LabelledBatch& batch, SearchScheme scheme, double lr);

struct StepLosses {
  double train = 0, val = 0;
};

// One alternation: weight phase, train-bank updates in batch order, alpha
// phase, val-bank updates. Memories are untouched by the cross-entropy baseline.
StepLosses search_step(SearchState& st, const LabelledBatch& train, const LabelledBatch& val, SearchScheme scheme,
                       double lr_weights, double lr_alpha);

// Embeds records with batch statistics (no running-stat updates) and builds a bank.
MemoryBank build_memory(SearchState& st, const IdentityDataset& ds, std::span<const std::size_t> records,
                        double beta, double tau, std::size_t batch_size = 64);

struct SearchEpochReport {
  std::size_t epoch = 0;
  double train_loss = 0, val_loss = 0;
  double lr_weights = 0, lr_alpha = 0;
  std::size_t steps = 0;
  double seconds = 0;
};

struct SearchResult {
  ArchDescriptor descriptor;
  std::vector<std::array<double, kNumSlots * kNumOps>> alpha_history;  // one row per epoch, slot-major
  std::vector<SearchEpochReport> epochs;
};

using SearchProgress = std::function<void(const SearchEpochReport&, const std::array<double, kNumSlots * kNumOps>&)>;

// Full alternating search over the training pool (train-side records of `ds`).
SearchResult run_search(const IdentityDataset& ds, const SupernetConfig& space, const SearchConfig& cfg,
                        const SearchProgress& progress = {});

// Labelled, augmented batch for records; labels are mapped through `category`.
LabelledBatch make_batch(const IdentityDataset& ds, std::span<const std::size_t> records,
                         const std::function<std::size_t(std::size_t identity)>& category, AugmentPolicy policy,
                         std::uint64_t seed, std::uint64_t first_index);

}  // namespace msinet

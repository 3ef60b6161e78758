#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "msinet/data.hpp"
#include "msinet/losses.hpp"
#include "msinet/msi_space.hpp"
#include "msinet/tcm.hpp"

namespace msinet {

struct TrainConfig {
  std::size_t epochs = 60;  // 0 keeps the initial weights
  double lr = 0.065;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t p = 8, k = 4;
  LossConfig loss;
  AugmentPolicy augment = AugmentPolicy::Supervised;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// A fixed network with its training heads and the identity -> class mapping.
struct ReidModel {
  ArchDescriptor descriptor;
  MsiNetwork<float> net;
  TrainHeads<float> heads;
  std::map<std::size_t, std::size_t> class_of;

  // Weights drawn from `seed`; one class per training-pool identity of `ds`.
  static ReidModel create(const ArchDescriptor& desc, const IdentityDataset& ds, const SamConfig& sam,
                          std::uint64_t seed);
  NamedTensors<float> named_tensors();
  std::vector<Tensor<float>*> trainable();
};

struct TrainEpochReport {
  std::size_t epoch = 0;
  double loss = 0, id = 0, triplet = 0, sam = 0;
  double lr = 0;
  std::size_t steps = 0;
  double seconds = 0;
};

using TrainProgress = std::function<void(const TrainEpochReport&)>;

// SGD on id + triplet (+ SAM) over PK batches of the training pool.
// Degenerate-batch notices from the SAM term are appended to `warnings`.
std::vector<TrainEpochReport> train_model(ReidModel& model, const IdentityDataset& ds, const TrainConfig& cfg,
                                          const TrainProgress& progress = {},
                                          std::vector<std::string>* warnings = nullptr);

// Text checkpoint: descriptor block, then one line per tensor with its name,
// shape and shortest round-trip values.
std::string checkpoint_to_text(ReidModel& model);
// Loads values into a model built with the same descriptor and class count.
void checkpoint_from_text(ReidModel& model, const std::string& text, const std::string& where = "checkpoint");
void save_checkpoint(ReidModel& model, const std::string& path);
// Builds the model described by the checkpoint and loads its weights.
ReidModel load_checkpoint(const std::string& path, const IdentityDataset& ds, const SamConfig& sam);

}  // namespace msinet

#include "msinet/train.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "msinet/error.hpp"
#include "msinet/numerics/optim.hpp"
#include "msinet/numerics/tape.hpp"
#include "msinet/seed.hpp"
#include "util/atomic_file.hpp"
#include "util/number_format.hpp"

namespace msinet {

namespace {

constexpr std::uint64_t kModelInitStream = 0x71;
constexpr std::uint64_t kTrainSamplerStream = 0x72;
constexpr std::uint64_t kTrainAugStream = 0x73;
constexpr const char* kCheckpointMagic = "msinet-checkpoint 1";
constexpr const char* kDescriptorEnd = "end-descriptor";

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ArgumentError("training learning rate must be positive");
  if (momentum < 0 || momentum >= 1 || weight_decay < 0) throw ArgumentError("bad SGD momentum or weight decay");
  if (p < 2 || k < 2) throw ArgumentError("training batches need P >= 2 and K >= 2 for triplet mining");
  if (!(loss.margin >= 0)) throw ArgumentError("triplet margin must be non-negative");
  if (!(loss.sam.lambda_sa >= 0)) throw ArgumentError("lambda_sa must be non-negative");
}

ReidModel ReidModel::create(const ArchDescriptor& desc, const IdentityDataset& ds, const SamConfig& sam,
                            std::uint64_t seed) {
  desc.config.validate();
  std::map<std::size_t, std::size_t> class_of;
  for (std::size_t r : ds.indices(SplitSide::Train)) class_of.emplace(ds.records[r].identity, 0);
  if (class_of.empty()) throw ArgumentError("training needs records on the train side");
  std::size_t i = 0;
  for (auto& [id, c] : class_of) c = i++;
  Rng rng(derive_seed({seed, kModelInitStream}));
  auto net = MsiNetwork<float>::fixed_network(desc, rng);
  auto heads = TrainHeads<float>::create(desc.config.embedding_dim, class_of.size(), desc.config.widths[2], sam, rng);
  return ReidModel{desc, std::move(net), std::move(heads), std::move(class_of)};
}

NamedTensors<float> ReidModel::named_tensors() {
  NamedTensors<float> out = net.named_tensors();
  heads.collect("heads", out);
  return out;
}

std::vector<Tensor<float>*> ReidModel::trainable() {
  std::vector<Tensor<float>*> out;
  for (auto& nt : named_tensors())
    if (nt.trainable) out.push_back(nt.tensor);
  return out;
}

std::vector<TrainEpochReport> train_model(ReidModel& model, const IdentityDataset& ds, const TrainConfig& cfg,
                                          const TrainProgress& progress, std::vector<std::string>* warnings) {
  cfg.validate();
  const auto pool = ds.indices(SplitSide::Train);
  const auto category = [&](std::size_t id) {
    auto it = model.class_of.find(id);
    if (it == model.class_of.end()) throw ArgumentError("identity " + std::to_string(id) + " has no class");
    return it->second;
  };
  const Schedule schedule = Schedule::scaled(cfg.epochs);
  auto params = model.trainable();
  SgdState<float> opt;
  opt.options = SgdOptions{cfg.lr, cfg.momentum, cfg.weight_decay};
  model.net.set_mode(NormMode::Train);
  model.heads.neck.mode = NormMode::Train;

  std::vector<TrainEpochReport> reports;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainEpochReport rep;
    rep.epoch = epoch;
    rep.lr = lr_at(epoch, cfg.lr, schedule);
    opt.options.lr = rep.lr;
    const auto batches = pk_batches(ds, pool, cfg.p, cfg.k, derive_seed({cfg.seed, kTrainSamplerStream}), epoch);
    const std::uint64_t aug_seed = derive_seed({cfg.seed, kTrainAugStream, epoch});
    std::uint64_t index = 0;
    for (const auto& b : batches) {
      const LabelledBatch batch = make_batch(ds, b, category, cfg.augment, aug_seed, index);
      index += b.size();
      zero_grads<float>(params);
      Tape<float> tape;
      const auto out = fixed_forward(tape.constant(batch.images), model.descriptor, model.net);
      const auto terms = total_loss(out, batch.labels, model.heads, cfg.loss, warnings);
      const double loss = terms.total.value()[0];
      if (!std::isfinite(loss))
        throw NonFiniteError("training loss is not finite at epoch " + std::to_string(epoch) + " step " +
                             std::to_string(rep.steps));
      tape.backward(terms.total);
      sgd_step<float>(params, opt);
      rep.loss += loss;
      rep.id += terms.id;
      rep.triplet += terms.triplet;
      rep.sam += terms.sam;
      ++rep.steps;
    }
    for (const Tensor<float>* t : params)
      if (!t->all_finite()) throw NonFiniteError("model weights became non-finite at epoch " + std::to_string(epoch));
    const double n = static_cast<double>(rep.steps);
    rep.loss /= n, rep.id /= n, rep.triplet /= n, rep.sam /= n;
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    reports.push_back(rep);
    if (progress) progress(rep);
  }
  return reports;
}

std::string checkpoint_to_text(ReidModel& model) {
  std::ostringstream out;
  out << kCheckpointMagic << '\n' << descriptor_to_text(model.descriptor) << kDescriptorEnd << '\n';
  out << "classes " << model.class_of.size() << '\n';
  for (auto& nt : model.named_tensors()) {
    const Tensor<float>& t = *nt.tensor;
    out << nt.name << ' ' << t.rank();
    for (std::size_t d : t.shape()) out << ' ' << d;
    for (float v : t.values()) out << ' ' << format_number(v);
    out << '\n';
  }
  return out.str();
}

namespace {

std::string checkpoint_descriptor(const std::string& text, const std::string& where, std::size_t& body_line,
                                  std::istringstream& in) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line != kCheckpointMagic) throw ParseError(where, 1, "not a checkpoint file");
  std::string desc;
  for (;;) {
    ++lineno;
    if (!std::getline(in, line)) throw ParseError(where, lineno, "descriptor block is not terminated");
    if (line == kDescriptorEnd) break;
    desc += line + '\n';
  }
  (void)text;
  body_line = lineno;
  return desc;
}

}  // namespace

void checkpoint_from_text(ReidModel& model, const std::string& text, const std::string& where) {
  std::istringstream in(text);
  std::size_t lineno = 0;
  const std::string desc_text = checkpoint_descriptor(text, where, lineno, in);
  if (descriptor_from_text(desc_text, where) != model.descriptor)
    throw ParseError(where, 2, "checkpoint descriptor differs from the model");
  std::string line;
  ++lineno;
  if (!std::getline(in, line) || line != "classes " + std::to_string(model.class_of.size()))
    throw ParseError(where, lineno, "class count differs from the model");
  for (auto& nt : model.named_tensors()) {
    ++lineno;
    if (!std::getline(in, line)) throw ParseError(where, lineno, "missing tensor " + nt.name);
    std::istringstream ls(line);
    std::string name;
    std::size_t rank = 0;
    ls >> name >> rank;
    if (name != nt.name) throw ParseError(where, lineno, "expected tensor " + nt.name + ", found '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) ls >> d;
    if (!ls || shape != nt.tensor->shape())
      throw ParseError(where, lineno, "tensor " + name + " has shape " + shape_to_string(shape) + ", expected " +
                                          shape_to_string(nt.tensor->shape()));
    for (float& v : nt.tensor->values()) {
      std::string tok;
      if (!(ls >> tok)) throw ParseError(where, lineno, "tensor " + name + " has too few values");
      v = parse_float(tok, where, lineno);
    }
    std::string extra;
    if (ls >> extra) throw ParseError(where, lineno, "tensor " + name + " has too many values");
  }
  ++lineno;
  if (std::getline(in, line) && !line.empty()) throw ParseError(where, lineno, "unexpected trailing content");
}

void save_checkpoint(ReidModel& model, const std::string& path) { write_file_atomic(path, checkpoint_to_text(model)); }

ReidModel load_checkpoint(const std::string& path, const IdentityDataset& ds, const SamConfig& sam) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::size_t lineno = 0;
  const ArchDescriptor desc = descriptor_from_text(checkpoint_descriptor(text, path, lineno, in), path);
  // A PAM head is only present in checkpoints trained with it; probe the text for it.
  SamConfig probe = sam;
  if (text.find("\nheads.pam.") != std::string::npos) probe.mode = SamMode::PamSelf;
  else if (sam_mode_needs_pam(probe.mode)) probe.mode = SamMode::Off;
  ReidModel model = ReidModel::create(desc, ds, probe, 0);
  checkpoint_from_text(model, text, path);
  return model;
}

}  // namespace msinet

#include "msinet/tcm.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

#include "msinet/error.hpp"
#include "msinet/numerics/ops.hpp"
#include "msinet/numerics/tape.hpp"
#include "msinet/seed.hpp"

namespace msinet {

namespace {

constexpr std::uint64_t kSplitStream = 0x51;
constexpr std::uint64_t kSearchInitStream = 0x52;
constexpr std::uint64_t kTrainSideStream = 0x53;
constexpr std::uint64_t kValSideStream = 0x54;
constexpr std::uint64_t kSearchAugStream = 0x55;
constexpr double kNormEps = 1e-12;

void normalize(std::span<double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  const double inv = 1.0 / std::max(std::sqrt(s), kNormEps);
  for (double& x : v) x *= inv;
}

void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NonFiniteError(what + " is not finite");
}

void require_finite(std::span<Tensor<float>* const> tensors, const std::string& what) {
  for (const Tensor<float>* t : tensors)
    if (!t->all_finite()) throw NonFiniteError(what + " contains non-finite values");
}

}  // namespace

void SplitConfig::validate() const {
  if (!(train_pct > 0 && train_pct <= 100) || !(val_pct > 0 && val_pct <= 100))
    throw ArgumentError("split percentages must be in (0, 100]");
}

std::size_t overlap_count(std::size_t num_ids, const SplitConfig& cfg) {
  const double excess = std::max(0.0, cfg.train_pct + cfg.val_pct - 100.0);
  return static_cast<std::size_t>(std::floor(excess * static_cast<double>(num_ids) / 100.0 + 1e-9));
}

TwinSplit twin_split(const IdentityDataset& ds, std::span<const std::size_t> records, const SplitConfig& cfg) {
  cfg.validate();
  std::map<std::size_t, std::vector<std::size_t>> by_id;
  for (std::size_t r : records) {
    if (r >= ds.records.size()) throw ArgumentError("twin_split: record index out of range");
    by_id[ds.records[r].identity].push_back(r);
  }
  const std::size_t n = by_id.size();
  if (n < 2) throw ArgumentError("twin_split needs at least 2 identities");
  std::vector<std::size_t> ids;
  for (const auto& [id, _] : by_id) ids.push_back(id);
  Rng rng(derive_seed({cfg.seed, kSplitStream}));
  shuffle_range(ids.begin(), ids.end(), rng);

  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * cfg.train_pct / 100.0 + 1e-9));
  const std::size_t n_overlap = overlap_count(n, cfg);
  const std::size_t n_val = n - n_train + n_overlap;
  if (n_train == 0 || n_val == 0) throw ArgumentError("twin_split: a side would have no identities");

  TwinSplit out;
  out.overlap = n_overlap;
  const std::size_t val_start = n - n_val;
  for (std::size_t i = 0; i < n; ++i) {
    const bool in_train = i < n_train, in_val = i >= val_start;
    const auto& recs = by_id[ids[i]];
    if (in_train && in_val) {
      if (recs.size() < 2)
        throw ArgumentError("twin_split: identity " + std::to_string(ids[i]) +
                            " is on both sides but has fewer than 2 images");
      for (std::size_t j = 0; j < recs.size(); ++j) (j % 2 == 0 ? out.train : out.val).push_back(recs[j]);
    } else {
      auto& side = in_train ? out.train : out.val;
      side.insert(side.end(), recs.begin(), recs.end());
    }
    if (in_train) out.train_ids.push_back(ids[i]);
    if (in_val) out.val_ids.push_back(ids[i]);
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.train_ids.begin(), out.train_ids.end());
  std::sort(out.val_ids.begin(), out.val_ids.end());
  return out;
}

MemoryBank MemoryBank::init(const Tensor<double>& features, std::span<const std::size_t> labels, double beta,
                            double tau) {
  if (features.rank() != 2 || features.dim(0) != labels.size())
    throw ArgumentError("init_memory expects [N,D] features with one label per row");
  if (!(beta > 0 && beta < 1) || !(tau > 0)) throw ArgumentError("memory needs beta in (0,1) and tau > 0");
  MemoryBank bank;
  bank.beta = beta;
  bank.tau = tau;
  std::set<std::size_t> cats(labels.begin(), labels.end());
  if (cats.empty()) throw ArgumentError("init_memory needs at least one category");
  for (std::size_t c : cats) bank.label_index.emplace(c, bank.label_index.size());
  const std::size_t d = features.dim(1);
  bank.centroids = Tensor<double>({cats.size(), d});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double* row = bank.centroids.data() + bank.label_index[labels[i]] * d;
    for (std::size_t k = 0; k < d; ++k) row[k] += features[i * d + k];
  }
  for (std::size_t r = 0; r < cats.size(); ++r) normalize({bank.centroids.data() + r * d, d});
  return bank;
}

std::size_t MemoryBank::row(std::size_t label) const {
  auto it = label_index.find(label);
  if (it == label_index.end()) throw ArgumentError("memory has no category " + std::to_string(label));
  return it->second;
}

void MemoryBank::update(std::span<const double> feature, std::size_t label) {
  const std::size_t d = centroids.dim(1);
  if (feature.size() != d) throw ArgumentError("memory update: feature dimension mismatch");
  double* c = centroids.data() + row(label) * d;
  for (std::size_t k = 0; k < d; ++k) c[k] = beta * c[k] + (1 - beta) * feature[k];
  normalize({c, d});
}

template <typename T>
Var<T> contrastive_loss(Var<T> features, std::span<const std::size_t> labels, const MemoryBank& bank) {
  if (features.shape().size() != 2 || features.shape()[0] != labels.size())
    throw ArgumentError("contrastive_loss expects [B,D] features with one label per row");
  if (features.shape()[1] != bank.centroids.dim(1)) throw ArgumentError("contrastive_loss: feature dimension mismatch");
  std::vector<std::size_t> rows;
  for (std::size_t l : labels) rows.push_back(bank.row(l));
  Tape<T>& tape = *features.tape;
  Var<T> c = tape.constant(bank.centroids.template cast<T>());
  Var<T> logits = ops::scale(ops::matmul(features, c, false, true), static_cast<T>(1.0 / bank.tau));
  return ops::cross_entropy(logits, rows);
}

Schedule Schedule::reference() { return Schedule{}; }

Schedule Schedule::scaled(std::size_t total_epochs) {
  const Schedule ref = reference();
  auto scale = [&](std::size_t e) {
    return static_cast<std::size_t>(std::lround(static_cast<double>(e) * static_cast<double>(total_epochs) / 350.0));
  };
  Schedule s;
  s.gamma = ref.gamma;
  s.warmup_epochs = scale(ref.warmup_epochs);
  s.milestones.clear();
  for (std::size_t m : ref.milestones) s.milestones.push_back(scale(m));
  return s;
}

double lr_at(std::size_t epoch, double base_lr, const Schedule& schedule) {
  if (epoch < schedule.warmup_epochs)
    return base_lr * (0.1 + 0.9 * static_cast<double>(epoch) / static_cast<double>(schedule.warmup_epochs));
  double lr = base_lr;
  for (std::size_t m : schedule.milestones)
    if (epoch >= m) lr *= schedule.gamma;
  return lr;
}

std::string search_scheme_name(SearchScheme s) {
  switch (s) {
    case SearchScheme::Tcm: return "tcm";
    case SearchScheme::TcmOverlap: return "tcm_overlap";
    case SearchScheme::CeOverlap: return "ce_overlap";
  }
  throw InternalError("unknown search scheme");
}

SearchScheme parse_search_scheme(const std::string& name) {
  for (SearchScheme s : {SearchScheme::Tcm, SearchScheme::TcmOverlap, SearchScheme::CeOverlap})
    if (search_scheme_name(s) == name) return s;
  throw ArgumentError("unknown search scheme '" + name + "' (expected tcm, tcm_overlap or ce_overlap)");
}

void SearchConfig::validate() const {
  split.validate();
  if (epochs == 0) throw ArgumentError("search needs at least one epoch");
  if (!(lr_weights > 0) || !(lr_alpha > 0)) throw ArgumentError("search learning rates must be positive");
  if (momentum < 0 || momentum >= 1 || weight_decay < 0) throw ArgumentError("bad SGD momentum or weight decay");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
    throw ArgumentError("Adam betas must be in [0,1)");
  if (!(tau > 0) || !(memory_beta > 0 && memory_beta < 1)) throw ArgumentError("need tau > 0 and beta in (0,1)");
  if (p < 2 || k < 1) throw ArgumentError("search batches need P >= 2 and K >= 1");
}

SplitConfig effective_split(const SearchConfig& cfg) {
  if (cfg.scheme == SearchScheme::Tcm) return cfg.split;
  return SplitConfig{100, 100, cfg.split.seed};
}

SearchState SearchState::create(const SupernetConfig& space, const SearchConfig& cfg, Rng& rng) {
  SearchState st{MsiNetwork<float>::supernet(space, rng), Tensor<float>({kNumSlots, kNumOps}), {}, {}, {}, {}, {}, 0};
  st.alpha.set_requires_grad(true);
  st.weight_opt.options = SgdOptions{cfg.lr_weights, cfg.momentum, cfg.weight_decay};
  st.alpha_opt.options = AdamOptions{cfg.lr_alpha, cfg.adam_beta1, cfg.adam_beta2, 1e-8, 0.0};
  return st;
}

std::vector<Tensor<float>*> SearchState::weights() {
  auto w = net.trainable();
  if (classifier) {
    w.push_back(&classifier->weight);
    if (classifier->bias) w.push_back(&*classifier->bias);
  }
  return w;
}

namespace {

Tensor<double> normalized_rows(const Tensor<float>& v) {
  Tensor<double> out = v.cast<double>();
  const std::size_t n = out.dim(0), d = out.dim(1);
  for (std::size_t i = 0; i < n; ++i) normalize({out.data() + i * d, d});
  return out;
}

Var<float> phase_loss(SearchState& st, Var<float> embedding, std::span<const std::size_t> labels,
                      SearchScheme scheme, const MemoryBank& bank) {
  if (scheme == SearchScheme::CeOverlap) {
    if (!st.classifier) throw InternalError("cross-entropy search without a classifier");
    return ops::cross_entropy(linear(embedding, *st.classifier), labels);
  }
  return contrastive_loss(ops::l2_normalize(embedding, 1), labels, bank);
}

}  // namespace

PhaseResult weight_phase(SearchState& st, const LabelledBatch& batch, SearchScheme scheme, double lr) {
  auto weights = st.weights();
  zero_grads<float>(weights);
  st.net.set_update_running(true);
  Tape<float> tape;
  Var<float> alpha = tape.frozen(st.alpha);
  const auto out = supernet_forward(tape.constant(batch.images), alpha, st.net);
  Var<float> loss = phase_loss(st, out.embedding, batch.labels, scheme, st.train_bank);
  PhaseResult res{loss.value()[0], normalized_rows(out.embedding.value())};
  require_finite(res.loss, "search weight-phase loss");
  tape.backward(loss);
  st.weight_opt.options.lr = lr;
  sgd_step<float>(weights, st.weight_opt);
  require_finite(weights, "supernet weights");
  return res;
}

PhaseResult alpha_phase(SearchState& st, const LabelledBatch& batch, SearchScheme scheme, double lr) {
  st.alpha.zero_grad();
  st.net.set_update_running(false);
  Tape<float> tape;
  Var<float> alpha = tape.param(st.alpha);
  tape.freeze_params(true);
  const auto out = supernet_forward(tape.constant(batch.images), alpha, st.net);
  Var<float> loss = phase_loss(st, out.embedding, batch.labels, scheme, st.val_bank);
  PhaseResult res{loss.value()[0], normalized_rows(out.embedding.value())};
  st.net.set_update_running(true);
  require_finite(res.loss, "search architecture-phase loss");
  tape.backward(loss);
  Tensor<float>* a[] = {&st.alpha};
  st.alpha_opt.options.lr = lr;
  adam_step<float>(a, st.alpha_opt);
  require_finite(a, "architecture parameters");
  return res;
}

StepLosses search_step(SearchState& st, const LabelledBatch& train, const LabelledBatch& val, SearchScheme scheme,
                       double lr_weights, double lr_alpha) {
  const bool memories = scheme != SearchScheme::CeOverlap;
  const PhaseResult w = weight_phase(st, train, scheme, lr_weights);
  const std::size_t d = w.features.dim(1);
  if (memories)
    for (std::size_t i = 0; i < train.labels.size(); ++i)
      st.train_bank.update({w.features.data() + i * d, d}, train.labels[i]);
  const PhaseResult a = alpha_phase(st, val, scheme, lr_alpha);
  if (memories)
    for (std::size_t i = 0; i < val.labels.size(); ++i)
      st.val_bank.update({a.features.data() + i * d, d}, val.labels[i]);
  return {w.loss, a.loss};
}

LabelledBatch make_batch(const IdentityDataset& ds, std::span<const std::size_t> records,
                         const std::function<std::size_t(std::size_t)>& category, AugmentPolicy policy,
                         std::uint64_t seed, std::uint64_t first_index) {
  std::vector<FloatImage> imgs;
  LabelledBatch b;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = ds.records.at(records[i]);
    imgs.push_back(augment(to_float(r.image), policy, seed, first_index + i));
    b.labels.push_back(category(r.identity));
  }
  b.images = stack_images<float>(imgs);
  return b;
}

MemoryBank build_memory(SearchState& st, const IdentityDataset& ds, std::span<const std::size_t> records,
                        double beta, double tau, std::size_t batch_size) {
  std::vector<double> feats;
  std::vector<std::size_t> labels;
  std::size_t d = 0;
  st.net.set_update_running(false);
  for (std::size_t start = 0; start < records.size();) {
    std::size_t n = std::min(batch_size, records.size() - start);
    // Batch statistics need more than one sample; fold a lone tail into this batch.
    if (records.size() - start - n == 1) ++n;
    const auto chunk = records.subspan(start, n);
    start += n;
    const LabelledBatch b = make_batch(
        ds, chunk, [](std::size_t id) { return id; }, AugmentPolicy::None, 0, 0);
    Tape<float> tape;
    tape.freeze_params(true);
    const auto out = supernet_forward(tape.constant(b.images), tape.frozen(st.alpha), st.net);
    const Tensor<double> f = normalized_rows(out.embedding.value());
    d = f.dim(1);
    feats.insert(feats.end(), f.values().begin(), f.values().end());
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
  }
  st.net.set_update_running(true);
  return MemoryBank::init(Tensor<double>({labels.size(), d}, std::move(feats)), labels, beta, tau);
}

SearchResult run_search(const IdentityDataset& ds, const SupernetConfig& space, const SearchConfig& cfg,
                        const SearchProgress& progress) {
  cfg.validate();
  space.validate();
  const auto pool = ds.indices(SplitSide::Train);
  if (pool.empty()) throw ArgumentError("search needs training records");
  const TwinSplit split = twin_split(ds, pool, effective_split(cfg));

  Rng rng(derive_seed({cfg.seed, kSearchInitStream}));
  SearchState st = SearchState::create(space, cfg, rng);
  std::map<std::size_t, std::size_t> class_of;
  for (std::size_t r : pool) class_of.emplace(ds.records[r].identity, 0);
  {
    std::size_t i = 0;
    for (auto& [id, c] : class_of) c = i++;
  }
  if (cfg.scheme == SearchScheme::CeOverlap) {
    st.classifier = LinearParams<float>::create(space.embedding_dim, class_of.size(), false, 0.001, rng);
  } else {
    st.train_bank = build_memory(st, ds, split.train, cfg.memory_beta, cfg.tau);
    st.val_bank = build_memory(st, ds, split.val, cfg.memory_beta, cfg.tau);
  }
  // Memories are keyed by identity; the classifier by dense class index.
  const auto category = [&](std::size_t id) {
    return cfg.scheme == SearchScheme::CeOverlap ? class_of.at(id) : id;
  };

  const Schedule schedule = Schedule::scaled(cfg.epochs);
  SearchResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    st.epoch = epoch;
    const double lr_w = lr_at(epoch, cfg.lr_weights, schedule);
    const double lr_a = lr_at(epoch, cfg.lr_alpha, schedule);
    const auto train_batches = pk_batches(ds, split.train, cfg.p, cfg.k, derive_seed({cfg.seed, kTrainSideStream}), epoch);
    const auto val_batches = pk_batches(ds, split.val, cfg.p, cfg.k, derive_seed({cfg.seed, kValSideStream}), epoch);
    const std::uint64_t aug_seed = derive_seed({cfg.seed, kSearchAugStream, epoch});
    SearchEpochReport rep;
    rep.epoch = epoch;
    rep.lr_weights = lr_w;
    rep.lr_alpha = lr_a;
    std::uint64_t index = 0;
    for (std::size_t s = 0; s < train_batches.size(); ++s) {
      const auto& tb = train_batches[s];
      const auto& vb = val_batches[s % val_batches.size()];
      const LabelledBatch train = make_batch(ds, tb, category, cfg.augment, aug_seed, index);
      index += tb.size();
      const LabelledBatch val = make_batch(ds, vb, category, cfg.augment, aug_seed, index);
      index += vb.size();
      const StepLosses l = search_step(st, train, val, cfg.scheme, lr_w, lr_a);
      rep.train_loss += l.train;
      rep.val_loss += l.val;
      ++rep.steps;
    }
    rep.train_loss /= static_cast<double>(rep.steps);
    rep.val_loss /= static_cast<double>(rep.steps);
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::array<double, kNumSlots * kNumOps> snapshot{};
    for (std::size_t i = 0; i < snapshot.size(); ++i) snapshot[i] = st.alpha[i];
    result.alpha_history.push_back(snapshot);
    result.epochs.push_back(rep);
    if (progress) progress(rep, snapshot);
  }
  result.descriptor = discretize(st.alpha.cast<double>(), space);
  return result;
}

template Var<float> contrastive_loss(Var<float>, std::span<const std::size_t>, const MemoryBank&);
template Var<double> contrastive_loss(Var<double>, std::span<const std::size_t>, const MemoryBank&);

}  // namespace msinet

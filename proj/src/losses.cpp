#include "msinet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "msinet/error.hpp"
#include "msinet/numerics/ops.hpp"
#include "numerics/gemm.hpp"

namespace msinet {

template <typename T>
Var<T> id_loss(Var<T> features, std::span<const std::size_t> labels, LinearParams<T>& classifier) {
  const std::size_t classes = classifier.weight.dim(0);
  for (std::size_t l : labels)
    if (l >= classes)
      throw ArgumentError("id_loss: label " + std::to_string(l) + " outside " + std::to_string(classes) + " classes");
  return ops::cross_entropy(linear(features, classifier), labels);
}

template <typename T>
Var<T> triplet_batch_hard(Var<T> features, std::span<const std::size_t> labels, T margin) {
  if (features.value().rank() != 2 || features.shape()[0] != labels.size())
    throw ArgumentError("triplet: features must be [B,D] with one label per row");
  if (margin < T(0)) throw ArgumentError("triplet: margin must be non-negative");
  const std::size_t batch = labels.size();
  Var<T> dist = ops::pairwise_distance(features);
  const Tensor<T>& d = dist.value();
  std::vector<std::size_t> pos(batch), neg(batch);
  for (std::size_t a = 0; a < batch; ++a) {
    std::optional<std::size_t> hp, hn;
    for (std::size_t j = 0; j < batch; ++j) {
      const T v = d[a * batch + j];
      if (labels[j] == labels[a]) {
        if (j != a && (!hp || v > d[a * batch + *hp])) hp = j;
      } else if (!hn || v < d[a * batch + *hn]) {
        hn = j;
      }
    }
    if (!hp || !hn)
      throw ArgumentError("triplet: anchor " + std::to_string(a) + " has no " + (hp ? "negative" : "positive") +
                          " in the batch");
    pos[a] = a * batch + *hp;
    neg[a] = a * batch + *hn;
  }
  Var<T> gap = ops::sub(ops::gather(dist, std::span<const std::size_t>(pos)), ops::gather(dist, std::span<const std::size_t>(neg)));
  return ops::mean(ops::relu(ops::add_scalar(gap, margin)));
}

template <typename T>
Var<T> correlation_activation(Var<T> x_i, Var<T> x_j) {
  if (x_i.value().rank() != 3 || x_i.shape() != x_j.shape())
    throw ArgumentError("correlation_activation: maps must share one [C,H,W] shape, got " +
                        shape_to_string(x_i.shape()) + " and " + shape_to_string(x_j.shape()));
  const Shape s = x_i.shape();
  const Shape flat{s[0], s[1] * s[2]};
  // [N,N] with rows indexed by x_j positions.
  Var<T> corr = ops::matmul(ops::reshape(x_j, flat), ops::reshape(x_i, flat), true, false);
  return ops::max_along(corr, 0);
}

template <typename T>
Var<T> correlation_activations(Var<T> maps, std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  const Shape& s = maps.shape();
  if (s.size() != 4) throw ArgumentError("correlation_activations: maps must be [B,C,H,W]");
  const std::size_t batch = s[0], channels = s[1], n = s[2] * s[3], plane = channels * n;
  if (pairs.empty()) throw ArgumentError("correlation_activations: no pairs");
  for (const auto& [i, j] : pairs)
    if (i >= batch || j >= batch) throw ArgumentError("correlation_activations: pair index out of range");

  const T* x = maps.value().data();
  Tensor<T> out({pairs.size(), n});
  std::vector<std::size_t> arg(pairs.size() * n);
  std::vector<T> corr(n * n);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [i, j] = pairs[k];
    std::fill(corr.begin(), corr.end(), T(0));
    detail::gemm_acc(true, false, n, n, channels, x + j * plane, x + i * plane, corr.data());
    for (std::size_t p = 0; p < n; ++p) {
      std::size_t best = 0;
      for (std::size_t q = 1; q < n; ++q)
        if (corr[q * n + p] > corr[best * n + p]) best = q;
      out[k * n + p] = corr[best * n + p];
      arg[k * n + p] = best;
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> kept(pairs.begin(), pairs.end());
  return maps.tape->record(
      std::move(out), {maps},
      [kept = std::move(kept), arg = std::move(arg), xi = maps.id, channels, n, plane](Tape<T>& t, std::size_t self) {
        auto g = t.grad_view(self);
        const T* x = t.value(xi).data();
        auto dx = t.grad(xi);
        for (std::size_t k = 0; k < kept.size(); ++k) {
          const auto [i, j] = kept[k];
          for (std::size_t p = 0; p < n; ++p) {
            const T gp = g[k * n + p];
            if (gp == T(0)) continue;
            const std::size_t q = arg[k * n + p];
            for (std::size_t c = 0; c < channels; ++c) {
              dx[i * plane + c * n + p] += gp * x[j * plane + c * n + q];
              dx[j * plane + c * n + q] += gp * x[i * plane + c * n + p];
            }
          }
        }
      },
      "correlation_activations");
}

template <typename T>
PamParams<T> PamParams<T>::create(std::size_t channels, Rng& rng) {
  PamParams p;
  p.conv = Conv2dParams<T>::create(channels, 1, 1, 1, 0, 1, true, rng);
  return p;
}

template <typename T>
void PamParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  conv.collect(prefix + ".conv", out);
}

template <typename T>
Var<T> pam_forward(Var<T> maps, PamParams<T>& p) {
  if (maps.value().rank() != 4) throw ArgumentError("pam: maps must be [B,C,H,W]");
  const Shape& s = maps.shape();
  return ops::reshape(ops::sigmoid(conv2d(maps, p.conv)), Shape{s[0], s[2] * s[3]});
}

std::string sam_mode_name(SamMode m) {
  switch (m) {
    case SamMode::Off: return "off";
    case SamMode::PosSelf: return "pos_self";
    case SamMode::NegSelf: return "neg_self";
    case SamMode::Unified: return "unified";
    case SamMode::Separated: return "separated";
    case SamMode::PamSelf: return "pam_self";
  }
  throw InternalError("sam_mode_name: bad mode");
}

SamMode parse_sam_mode(const std::string& name) {
  for (SamMode m : {SamMode::Off, SamMode::PosSelf, SamMode::NegSelf, SamMode::Unified, SamMode::Separated,
                    SamMode::PamSelf})
    if (sam_mode_name(m) == name) return m;
  throw ArgumentError("unknown SAM mode '" + name + "' (expected off, pos_self, neg_self, unified, separated or pam_self)");
}

namespace {

// Accumulates weighted (1 - cos) comparisons between rows of two matrices.
struct Alignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<double> weights;

  void add(std::size_t u, std::size_t v, double w) {
    pairs.emplace_back(u, v);
    weights.push_back(w);
  }
};

template <typename T>
Var<T> alignment_value(Var<T> u, Var<T> v, const Alignment& al) {
  Tensor<T> w({al.weights.size()});
  double total = 0;
  for (std::size_t k = 0; k < al.weights.size(); ++k) {
    w[k] = static_cast<T>(al.weights[k]);
    total += al.weights[k];
  }
  Var<T> cos = ops::pair_cosine(u, v, std::span<const std::pair<std::size_t, std::size_t>>(al.pairs));
  return ops::add_scalar(ops::scale(ops::dot(cos, u.tape->constant(std::move(w))), T(-1)), static_cast<T>(total));
}

// Row-wise means of groups of rows of `rows` -> [groups, N].
template <typename T>
Var<T> group_means(Var<T> rows, const std::vector<std::vector<std::size_t>>& groups) {
  Tensor<T> m({groups.size(), rows.shape()[0]});
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t r : groups[g]) m[g * rows.shape()[0] + r] += static_cast<T>(1.0 / double(groups[g].size()));
  return ops::matmul(rows.tape->constant(std::move(m)), rows);
}

}  // namespace

template <typename T>
Var<T> sam_loss(Var<T> maps, std::span<const std::size_t> labels, SamMode mode, PamParams<T>* pam,
                std::vector<std::string>* warnings) {
  Tape<T>& tape = *maps.tape;
  if (mode == SamMode::Off) return tape.constant(Tensor<T>({1}, T(0)));
  if (maps.value().rank() != 4 || maps.shape()[0] != labels.size())
    throw ArgumentError("sam_loss: maps must be [B,C,H,W] with one label per sample");
  if (sam_mode_needs_pam(mode) && !pam) throw ArgumentError("sam_loss: mode pam_self needs PAM parameters");
  const std::size_t batch = labels.size();

  std::vector<std::vector<std::size_t>> pos(batch), neg(batch);
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t j = 0; j < batch; ++j) {
      if (j == i) continue;
      (labels[j] == labels[i] ? pos[i] : neg[i]).push_back(j);
    }

  // Correlation rows needed by the mode, indexed by (anchor, other).
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::size_t> row_of(batch * batch, SIZE_MAX);
  auto need = [&](std::size_t i, std::size_t j) {
    if (row_of[i * batch + j] == SIZE_MAX) {
      row_of[i * batch + j] = pairs.size();
      pairs.emplace_back(i, j);
    }
  };
  const bool use_pos = mode != SamMode::NegSelf;
  const bool use_neg = mode != SamMode::PosSelf;
  for (std::size_t i = 0; i < batch; ++i) {
    if (mode == SamMode::PosSelf || mode == SamMode::NegSelf) need(i, i);
    if (use_pos)
      for (std::size_t j : pos[i]) need(i, j);
    if (use_neg)
      for (std::size_t j : neg[i]) need(i, j);
  }
  auto warn = [&](const std::string& what) {
    if (warnings) warnings->push_back("sam_loss(" + sam_mode_name(mode) + "): " + what + "; term contributes 0");
  };
  auto count_nonempty = [&](const std::vector<std::vector<std::size_t>>& g) {
    return static_cast<std::size_t>(std::count_if(g.begin(), g.end(), [](const auto& v) { return !v.empty(); }));
  };
  const std::size_t pos_anchors = count_nonempty(pos), neg_anchors = count_nonempty(neg);
  if (pairs.empty()) {
    warn("no comparison pairs in the batch");
    return tape.constant(Tensor<T>({1}, T(0)));
  }
  Var<T> acts = correlation_activations(maps, std::span<const std::pair<std::size_t, std::size_t>>(pairs));

  std::optional<Var<T>> loss;
  auto accumulate = [&](Var<T> term) { loss = loss ? ops::add(*loss, term) : term; };

  switch (mode) {
    case SamMode::PosSelf:
    case SamMode::NegSelf: {
      const auto& group = mode == SamMode::PosSelf ? pos : neg;
      const std::size_t anchors = mode == SamMode::PosSelf ? pos_anchors : neg_anchors;
      if (anchors == 0) {
        warn(mode == SamMode::PosSelf ? "no positive pairs" : "no negative pairs");
        break;
      }
      Alignment al;
      for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j : group[i])
          al.add(row_of[i * batch + i], row_of[i * batch + j], 1.0 / double(anchors * group[i].size()));
      accumulate(alignment_value(acts, acts, al));
      break;
    }
    case SamMode::Unified: {
      std::vector<std::vector<std::size_t>> groups;
      std::vector<std::size_t> anchor_of;
      for (std::size_t i = 0; i < batch; ++i) {
        std::vector<std::size_t> rows;
        for (std::size_t j = 0; j < batch; ++j)
          if (j != i) rows.push_back(row_of[i * batch + j]);
        if (!rows.empty()) {
          groups.push_back(std::move(rows));
          anchor_of.push_back(i);
        }
      }
      Var<T> means = group_means(acts, groups);
      Alignment al;
      for (std::size_t g = 0; g < groups.size(); ++g)
        for (std::size_t r : groups[g]) al.add(g, r, 1.0 / double(groups.size() * groups[g].size()));
      accumulate(alignment_value(means, acts, al));
      break;
    }
    case SamMode::Separated: {
      for (int side = 0; side < 2; ++side) {
        const auto& src = side == 0 ? pos : neg;
        std::vector<std::vector<std::size_t>> groups;
        for (std::size_t i = 0; i < batch; ++i) {
          if (src[i].empty()) continue;
          std::vector<std::size_t> rows;
          for (std::size_t j : src[i]) rows.push_back(row_of[i * batch + j]);
          groups.push_back(std::move(rows));
        }
        if (groups.empty()) {
          warn(side == 0 ? "no positive pairs" : "no negative pairs");
          continue;
        }
        Var<T> means = group_means(acts, groups);
        Alignment al;
        for (std::size_t g = 0; g < groups.size(); ++g)
          for (std::size_t r : groups[g]) al.add(g, r, 1.0 / double(groups.size() * groups[g].size()));
        accumulate(alignment_value(means, acts, al));
      }
      break;
    }
    case SamMode::PamSelf: {
      if (pos_anchors == 0) {
        warn("no positive pairs");
      } else {
        Var<T> target = pam_forward(maps, *pam);
        Alignment al;
        for (std::size_t i = 0; i < batch; ++i)
          for (std::size_t j : pos[i]) al.add(i, row_of[i * batch + j], 1.0 / double(pos_anchors * pos[i].size()));
        accumulate(alignment_value(target, acts, al));
      }
      std::size_t anchors = 0;
      for (std::size_t i = 0; i < batch; ++i) anchors += neg[i].size() >= 2;
      if (anchors == 0) {
        warn("no negative pairs");
      } else {
        Alignment al;
        for (std::size_t i = 0; i < batch; ++i) {
          const auto& n = neg[i];
          if (n.size() < 2) continue;
          const double w = 1.0 / double(anchors * (n.size() * (n.size() - 1) / 2));
          for (std::size_t a = 0; a < n.size(); ++a)
            for (std::size_t b = a + 1; b < n.size(); ++b) al.add(row_of[i * batch + n[a]], row_of[i * batch + n[b]], w);
        }
        accumulate(alignment_value(acts, acts, al));
      }
      break;
    }
    case SamMode::Off: break;
  }
  return loss ? *loss : tape.constant(Tensor<T>({1}, T(0)));
}

template <typename T>
TrainHeads<T> TrainHeads<T>::create(std::size_t dim, std::size_t num_ids, std::size_t map_channels,
                                    const SamConfig& sam, Rng& rng) {
  if (num_ids == 0) throw ArgumentError("heads: need at least one identity");
  TrainHeads h;
  h.neck = BatchNormState<T>::create(dim);
  h.classifier = LinearParams<T>::create(dim, num_ids, false, 0.001, rng);
  if (sam_mode_needs_pam(sam.mode)) h.pam = PamParams<T>::create(map_channels, rng);
  return h;
}

template <typename T>
void TrainHeads<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  neck.collect(prefix + ".neck", out);
  classifier.collect(prefix + ".classifier", out);
  if (pam) pam->collect(prefix + ".pam", out);
}

template <typename T>
LossTerms<T> total_loss(const NetworkOutput<T>& out, std::span<const std::size_t> labels, TrainHeads<T>& heads,
                        const LossConfig& cfg, std::vector<std::string>* warnings) {
  Var<T> id = id_loss(batchnorm(out.embedding, heads.neck), labels, heads.classifier);
  Var<T> tri = triplet_batch_hard(out.embedding, labels, static_cast<T>(cfg.margin));
  LossTerms<T> terms;
  terms.id = static_cast<double>(id.value()[0]);
  terms.triplet = static_cast<double>(tri.value()[0]);
  terms.total = ops::add(id, tri);
  if (cfg.sam.mode != SamMode::Off && cfg.sam.lambda_sa != 0.0) {
    Var<T> sa = sam_loss(out.feature_map, labels, cfg.sam.mode, heads.pam ? &*heads.pam : nullptr, warnings);
    terms.sam = static_cast<double>(sa.value()[0]);
    terms.total = ops::add(terms.total, ops::scale(sa, static_cast<T>(cfg.sam.lambda_sa)));
  }
  return terms;
}

#define MSINET_INSTANTIATE_LOSSES(T)                                                                            \
  template Var<T> id_loss(Var<T>, std::span<const std::size_t>, LinearParams<T>&);                             \
  template Var<T> triplet_batch_hard(Var<T>, std::span<const std::size_t>, T);                                 \
  template Var<T> correlation_activation(Var<T>, Var<T>);                                                      \
  template Var<T> correlation_activations(Var<T>, std::span<const std::pair<std::size_t, std::size_t>>);       \
  template struct PamParams<T>;                                                                                \
  template Var<T> pam_forward(Var<T>, PamParams<T>&);                                                          \
  template Var<T> sam_loss(Var<T>, std::span<const std::size_t>, SamMode, PamParams<T>*, std::vector<std::string>*); \
  template struct TrainHeads<T>;                                                                               \
  template LossTerms<T> total_loss(const NetworkOutput<T>&, std::span<const std::size_t>, TrainHeads<T>&,       \
                                   const LossConfig&, std::vector<std::string>*);

MSINET_INSTANTIATE_LOSSES(float)
MSINET_INSTANTIATE_LOSSES(double)

}  // namespace msinet

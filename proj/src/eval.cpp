#include "msinet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "msinet/error.hpp"
#include "msinet/numerics/tape.hpp"

namespace msinet {

Tensor<double> distance_matrix(const Tensor<double>& query, const Tensor<double>& gallery) {
  if (query.rank() != 2 || gallery.rank() != 2 || query.dim(1) != gallery.dim(1))
    throw ArgumentError("distance_matrix expects [Nq,D] and [Ng,D], got " + shape_to_string(query.shape()) +
                        " and " + shape_to_string(gallery.shape()));
  const std::size_t nq = query.dim(0), ng = gallery.dim(0), d = query.dim(1);
  Tensor<double> out({nq, ng});
  for (std::size_t i = 0; i < nq; ++i) {
    const double* a = query.data() + i * d;
    for (std::size_t j = 0; j < ng; ++j) {
      const double* b = gallery.data() + j * d;
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
      out[i * ng + j] = std::sqrt(s);
    }
  }
  return out;
}

void l2_normalize_rows(Tensor<double>& features) {
  if (features.rank() != 2) throw ArgumentError("l2_normalize_rows expects [N,D]");
  const std::size_t n = features.dim(0), d = features.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = features.data() + i * d;
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += row[k] * row[k];
    if (s == 0) continue;
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t k = 0; k < d; ++k) row[k] *= inv;
  }
}

RetrievalMetrics rank_metrics(const Tensor<double>& dist, const RetrievalLabels& query, const RetrievalLabels& gallery,
                              std::size_t max_rank) {
  if (dist.rank() != 2) throw ArgumentError("rank_metrics expects a [Nq,Ng] distance matrix");
  const std::size_t nq = dist.dim(0), ng = dist.dim(1);
  if (query.ids.size() != nq || query.views.size() != nq || gallery.ids.size() != ng || gallery.views.size() != ng)
    throw ArgumentError("rank_metrics: label counts do not match the distance matrix");
  if (max_rank == 0) throw ArgumentError("max_rank must be positive");

  RetrievalMetrics m;
  m.cmc.assign(max_rank, 0.0);
  double ap_sum = 0;
  std::vector<std::size_t> order(ng);
  for (std::size_t q = 0; q < nq; ++q) {
    const double* row = dist.data() + q * ng;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    std::size_t rank = 0, hits = 0, first_hit = ng;
    double precision_sum = 0;
    for (std::size_t g : order) {
      const bool same_id = gallery.ids[g] == query.ids[q];
      if (same_id && gallery.views[g] == query.views[q]) continue;
      ++rank;
      if (!same_id) continue;
      ++hits;
      if (first_hit == ng) first_hit = rank - 1;
      precision_sum += static_cast<double>(hits) / static_cast<double>(rank);
    }
    if (hits == 0) continue;
    ++m.valid_queries;
    for (std::size_t r = first_hit; r < max_rank; ++r) m.cmc[r] += 1.0;
    ap_sum += precision_sum / static_cast<double>(hits);
  }
  if (m.valid_queries == 0) throw EvaluationError("no query has a true match in the gallery");
  for (double& c : m.cmc) c /= static_cast<double>(m.valid_queries);
  m.mean_ap = ap_sum / static_cast<double>(m.valid_queries);
  return m;
}

namespace {

Tensor<double> embed_records(const IdentityDataset& ds, const std::vector<std::size_t>& idx, const Embedder& embed,
                             std::size_t batch_size, RetrievalLabels& labels) {
  std::vector<double> rows;
  std::size_t dim = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    std::vector<FloatImage> imgs;
    for (std::size_t i = start; i < std::min(idx.size(), start + batch_size); ++i) {
      const auto& r = ds.records[idx[i]];
      imgs.push_back(to_float(r.image));
      labels.ids.push_back(r.identity);
      labels.views.push_back(r.view);
    }
    const Tensor<double> e = embed(stack_images<float>(imgs));
    if (e.rank() != 2 || e.dim(0) != imgs.size()) throw ArgumentError("embedder returned the wrong shape");
    dim = e.dim(1);
    rows.insert(rows.end(), e.values().begin(), e.values().end());
  }
  Tensor<double> out({idx.size(), dim}, std::move(rows));
  l2_normalize_rows(out);
  return out;
}

}  // namespace

RetrievalMetrics evaluate(const IdentityDataset& ds, const Embedder& embed, std::size_t batch_size,
                          std::size_t max_rank) {
  if (batch_size == 0) throw ArgumentError("batch size must be positive");
  const auto probe = ds.indices(SplitSide::Probe), gallery = ds.indices(SplitSide::Gallery);
  if (probe.empty() || gallery.empty()) throw EvaluationError("dataset has no probe or no gallery records");
  RetrievalLabels ql, gl;
  const Tensor<double> q = embed_records(ds, probe, embed, batch_size, ql);
  const Tensor<double> g = embed_records(ds, gallery, embed, batch_size, gl);
  return rank_metrics(distance_matrix(q, g), ql, gl, max_rank);
}

Embedder network_embedder(MsiNetwork<float>& net, const ArchDescriptor& desc) {
  return [&net, desc](const Tensor<float>& images) {
    net.set_mode(NormMode::Eval);
    Tensor<double> out;
    try {
      Tape<float> tape;
      tape.freeze_params(true);
      const auto res = fixed_forward(tape.constant(images), desc, net);
      out = res.embedding.value().cast<double>();
    } catch (...) {
      net.set_mode(NormMode::Train);
      throw;
    }
    net.set_mode(NormMode::Train);
    return out;
  };
}

}  // namespace msinet

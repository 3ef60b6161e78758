#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "msinet/data.hpp"
#include "msinet/msi_space.hpp"
#include "msinet/numerics/tensor.hpp"

namespace msinet {

struct RetrievalMetrics {
  std::vector<double> cmc;  // cmc[r] = fraction of valid queries matched within the top r+1
  double mean_ap = 0;
  std::size_t valid_queries = 0;

  double rank1() const { return cmc.empty() ? 0.0 : cmc[0]; }
};

// Pairwise Euclidean distances between rows: [Nq,D] x [Ng,D] -> [Nq,Ng].
Tensor<double> distance_matrix(const Tensor<double>& query, const Tensor<double>& gallery);

// Scales each row of [N,D] to unit length; all-zero rows stay zero.
void l2_normalize_rows(Tensor<double>& features);

// Identity and view of each row of a distance matrix side.
struct RetrievalLabels {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> views;
};

// CMC up to `max_rank` and mAP. For each query, gallery entries sharing both
// its identity and its view are removed; a query without a remaining true
// match is skipped. Ranking is by ascending distance, ties by gallery index.
// Throws EvaluationError when no query is valid.
RetrievalMetrics rank_metrics(const Tensor<double>& dist, const RetrievalLabels& query, const RetrievalLabels& gallery,
                              std::size_t max_rank = 20);

// Maps a [B,3,H,W] batch to [B,D] embeddings.
using Embedder = std::function<Tensor<double>(const Tensor<float>& images)>;

// Embeds probe and gallery records (no augmentation), L2-normalizes and ranks.
RetrievalMetrics evaluate(const IdentityDataset& ds, const Embedder& embed, std::size_t batch_size = 64,
                          std::size_t max_rank = 20);

// Eval-mode embeddings of `net` under a discrete architecture; batch-norm
// layers are returned to training mode afterwards.
Embedder network_embedder(MsiNetwork<float>& net, const ArchDescriptor& desc);

}  // namespace msinet

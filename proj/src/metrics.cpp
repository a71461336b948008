// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace maskrdt {

double ctr(double episode_return, std::size_t episode_length, double r_max) {
  if (episode_length == 0) throw std::invalid_argument("ctr: episode length must be >= 1");
  if (!(r_max > 0.0)) throw std::invalid_argument("ctr: r_max must be positive");
  return episode_return / (static_cast<double>(episode_length) * r_max);
}

std::size_t rank_of(std::span<const double> logits, std::size_t item) {
  if (item >= logits.size()) throw std::out_of_range("rank_of: item outside catalog");
  const double v = logits[item];
  std::size_t ahead = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] > v || (logits[i] == v && i < item)) ++ahead;
  }
  return ahead + 1;
}

TopK topk_metrics(std::span<const RankingExample> examples, std::size_t k) {
  if (examples.empty()) throw std::invalid_argument("topk_metrics: no examples");
  if (k == 0) throw std::invalid_argument("topk_metrics: k must be >= 1");
  TopK out;
  for (const auto& ex : examples) {
    if (k > ex.logits.size()) {
      throw std::invalid_argument("topk_metrics: k=" + std::to_string(k) + " exceeds catalog of " +
                                  std::to_string(ex.logits.size()));
    }
    const auto r = rank_of(ex.logits, ex.truth);
    if (r <= k) {
      out.recall += 1.0;
      out.ndcg += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    }
  }
  const auto n = static_cast<double>(examples.size());
  out.recall /= n;
  out.ndcg /= n;
  out.precision = out.recall / static_cast<double>(k);
  return out;
}

}  // namespace maskrdt

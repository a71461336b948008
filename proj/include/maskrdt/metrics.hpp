// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace maskrdt {

// episode_return / (episode_length * r_max)
double ctr(double episode_return, std::size_t episode_length, double r_max);

struct RankingExample {
  std::vector<double> logits;
  std::size_t truth = 0;
};

struct TopK {
  double recall = 0.0;
  double precision = 0.0;
  double ndcg = 0.0;
};

// 1-based rank of `item`; ties go to the lower item id.
std::size_t rank_of(std::span<const double> logits, std::size_t item);

// One relevant item per example, so the ideal DCG is 1.
TopK topk_metrics(std::span<const RankingExample> examples, std::size_t k);

}  // namespace maskrdt

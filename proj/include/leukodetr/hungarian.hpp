#pragma once

#include <vector>

#include "leukodetr/tensor.hpp"

namespace leukodetr {

struct MatchResult {
  std::vector<int64_t> gt_to_query;  // size G, injective into [0, Q)
  double cost = 0.0;                 // total cost of the optimal assignment
};

// Minimum-cost injective assignment of ground truths (columns) to queries
// (rows) of a [Q, G] cost matrix, Q >= G. Jonker-Volgenant style shortest
// augmenting paths, O(G^2 * Q).
MatchResult hungarian_match(const TensorD& cost);

}  // namespace leukodetr

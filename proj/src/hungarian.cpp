#include "leukodetr/hungarian.hpp"

#include <cmath>
#include <limits>

namespace leukodetr {

MatchResult hungarian_match(const TensorD& cost) {
  check_arg(cost.rank() == 2, "hungarian_match: cost must be [Q, G]");
  int64_t q = cost.size(0), g = cost.size(1);
  check_arg(g <= q, "hungarian_match: more ground truths than queries (G=" + std::to_string(g) +
                        " > Q=" + std::to_string(q) + ")");
  for (int64_t i = 0; i < cost.numel(); ++i)
    check_arg(std::isfinite(cost[i]), "hungarian_match: non-finite cost entry");

  MatchResult result;
  result.gt_to_query.assign(g, -1);
  if (g == 0) return result;

  const double inf = std::numeric_limits<double>::infinity();
  // 1-based; p[j] is the ground truth currently assigned to query j.
  std::vector<double> u(g + 1, 0.0), v(q + 1, 0.0);
  std::vector<int64_t> p(q + 1, 0), way(q + 1, 0);
  for (int64_t i = 1; i <= g; ++i) {
    p[0] = i;
    int64_t j0 = 0;
    std::vector<double> minv(q + 1, inf);
    std::vector<char> used(q + 1, 0);
    do {
      used[j0] = 1;
      int64_t i0 = p[j0], j1 = 0;
      double delta = inf;
      for (int64_t j = 1; j <= q; ++j) {
        if (used[j]) continue;
        double cur = cost.at(j - 1, i0 - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= q; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int64_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  for (int64_t j = 1; j <= q; ++j) {
    if (p[j] != 0) result.gt_to_query[p[j] - 1] = j - 1;
  }
  for (int64_t i = 0; i < g; ++i) result.cost += cost.at(result.gt_to_query[i], i);
  return result;
}

}  // namespace leukodetr

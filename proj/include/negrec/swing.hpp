// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "negrec/types.hpp"

namespace negrec {

// Item-to-item collaboration scores over negative-feedback events:
//   Swi(i,j) = sum_{u,v in U(i) cap U(j), u != v}
//                w(u) * w(v) * Id(|U(i) cap U(j)|) / (|I(u) cap I(v)| + a2)
//                * 1/sqrt(N_j)
// with w(u) = 1/(|I(u)| + a1)^theta, N_j = |U(j)|, and Id(x) = 1 iff
// x > pair_threshold. Note the 1/sqrt(N_j) factor makes the score
// asymmetric: Swi(i,j)/Swi(j,i) = sqrt(N_i/N_j).

struct SwingParams {
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  double theta = 0.5;
  int pair_threshold = 1;  // co-user count must strictly exceed this

  void validate() const;
};

struct SwingNeighbor {
  ItemId item = 0;
  double score = 0.0;

  bool operator==(const SwingNeighbor&) const = default;
};

struct SwingIndex {
  SwingParams params;
  // Deduplicated interaction tables; values sorted ascending.
  std::map<ItemId, std::vector<UserId>> users_per_item;
  std::map<UserId, std::vector<ItemId>> items_per_user;
  // Nonzero-score neighbors per item, sorted by descending score with ties
  // broken by ascending item id. Self-pairs are excluded.
  std::map<ItemId, std::vector<SwingNeighbor>> neighbors;

  void save(const std::string& path) const;
  static SwingIndex load(const std::string& path);
};

// Builds the index from negative-feedback events. Repeated (user, item)
// pairs collapse to one interaction. Throws if any event has a different
// polarity.
SwingIndex build_swing_index(std::span<const InteractionEvent> events,
                             const SwingParams& params);

// Exact formula value; 0 for items unknown to the index. i == j is computed
// by the same formula (it simply never appears in neighbor lists).
double swing_similarity(const SwingIndex& index, ItemId i, ItemId j);

// Top-m neighbors of i; fewer if i has fewer nonzero-score neighbors.
std::vector<SwingNeighbor> top_collaborative(const SwingIndex& index, ItemId i, int m);

}  // namespace negrec

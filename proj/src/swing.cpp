// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "negrec/swing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <stdexcept>

namespace negrec {

namespace {

// Sorted-vector intersection size.
std::size_t intersection_size(const std::vector<ItemId>& a, const std::vector<ItemId>& b) {
  std::size_t n = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++n;
      ++ia;
      ++ib;
    }
  }
  return n;
}

std::vector<UserId> intersect(const std::vector<UserId>& a, const std::vector<UserId>& b) {
  std::vector<UserId> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

// The user-pair double sum shared by Swi(i,j) and Swi(j,i); everything except
// the 1/sqrt(N_j) popularity damping.
double pair_sum(const SwingIndex& index, const std::vector<UserId>& co_users) {
  const double a1 = index.params.alpha1;
  const double a2 = index.params.alpha2;
  const double theta = index.params.theta;
  std::vector<double> weight(co_users.size());
  for (std::size_t n = 0; n < co_users.size(); ++n) {
    const auto& items = index.items_per_user.at(co_users[n]);
    weight[n] = 1.0 / std::pow(static_cast<double>(items.size()) + a1, theta);
  }
  double sum = 0.0;
  for (std::size_t a = 0; a < co_users.size(); ++a) {
    const auto& items_a = index.items_per_user.at(co_users[a]);
    for (std::size_t b = 0; b < co_users.size(); ++b) {
      if (a == b) continue;
      const auto& items_b = index.items_per_user.at(co_users[b]);
      const double shared = static_cast<double>(intersection_size(items_a, items_b));
      sum += weight[a] * weight[b] / (shared + a2);
    }
  }
  return sum;
}

}  // namespace

void SwingParams::validate() const {
  if (alpha1 < 0.0 || alpha2 < 0.0) {
    throw std::invalid_argument("SwingParams: alpha1 and alpha2 must be >= 0");
  }
  if (pair_threshold < 0) {
    throw std::invalid_argument("SwingParams: pair_threshold must be >= 0");
  }
}

SwingIndex build_swing_index(std::span<const InteractionEvent> events,
                             const SwingParams& params) {
  params.validate();
  SwingIndex index;
  index.params = params;

  std::set<std::pair<UserId, ItemId>> seen;
  for (const InteractionEvent& e : events) {
    if (e.polarity != Polarity::NegativeFeedback) {
      throw std::invalid_argument("build_swing_index: non-negative-feedback event");
    }
    seen.insert({e.user, e.item});
  }
  for (const auto& [user, item] : seen) {
    index.users_per_item[item].push_back(user);
    index.items_per_user[user].push_back(item);
  }
  // std::set iteration already yields each table's values in ascending order,
  // but sort anyway so the invariant does not depend on that subtlety.
  for (auto& [item, users] : index.users_per_item) std::sort(users.begin(), users.end());
  for (auto& [user, items] : index.items_per_user) std::sort(items.begin(), items.end());

  for (const auto& [i, users_i] : index.users_per_item) {
    std::vector<SwingNeighbor> list;
    for (const auto& [j, users_j] : index.users_per_item) {
      if (i == j) continue;
      const std::vector<UserId> co = intersect(users_i, users_j);
      if (static_cast<int>(co.size()) <= params.pair_threshold) continue;
      const double score = pair_sum(index, co) / std::sqrt(static_cast<double>(users_j.size()));
      if (score > 0.0) list.push_back({j, score});
    }
    std::sort(list.begin(), list.end(), [](const SwingNeighbor& a, const SwingNeighbor& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.item < b.item;
    });
    if (!list.empty()) index.neighbors[i] = std::move(list);
  }
  return index;
}

double swing_similarity(const SwingIndex& index, ItemId i, ItemId j) {
  const auto it_i = index.users_per_item.find(i);
  const auto it_j = index.users_per_item.find(j);
  if (it_i == index.users_per_item.end() || it_j == index.users_per_item.end()) {
    return 0.0;
  }
  const std::vector<UserId> co = intersect(it_i->second, it_j->second);
  if (static_cast<int>(co.size()) <= index.params.pair_threshold) return 0.0;
  return pair_sum(index, co) / std::sqrt(static_cast<double>(it_j->second.size()));
}

std::vector<SwingNeighbor> top_collaborative(const SwingIndex& index, ItemId i, int m) {
  if (m < 0) throw std::invalid_argument("top_collaborative: m must be >= 0");
  const auto it = index.neighbors.find(i);
  if (m == 0 || it == index.neighbors.end()) return {};
  const auto& list = it->second;
  const std::size_t take = std::min(list.size(), static_cast<std::size_t>(m));
  return std::vector<SwingNeighbor>(list.begin(), list.begin() + take);
}

// ---------------------------------------------------------------------------
// Persistence: little-endian binary, magic "NRSW", version 1.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'N', 'R', 'S', 'W'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("SwingIndex::load: truncated file");
  return value;
}

template <typename K, typename V>
void put_table(std::ofstream& out, const std::map<K, std::vector<V>>& table) {
  put<std::uint64_t>(out, table.size());
  for (const auto& [key, values] : table) {
    put<std::int64_t>(out, key);
    put<std::uint64_t>(out, values.size());
    for (const V& v : values) put<std::int64_t>(out, v);
  }
}

template <typename K, typename V>
std::map<K, std::vector<V>> get_table(std::ifstream& in) {
  std::map<K, std::vector<V>> table;
  const auto entries = get<std::uint64_t>(in);
  for (std::uint64_t e = 0; e < entries; ++e) {
    const auto key = static_cast<K>(get<std::int64_t>(in));
    const auto count = get<std::uint64_t>(in);
    std::vector<V> values;
    values.reserve(count);
    for (std::uint64_t n = 0; n < count; ++n) {
      values.push_back(static_cast<V>(get<std::int64_t>(in)));
    }
    table.emplace(key, std::move(values));
  }
  return table;
}

}  // namespace

void SwingIndex::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("SwingIndex::save: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<double>(out, params.alpha1);
  put<double>(out, params.alpha2);
  put<double>(out, params.theta);
  put<std::int64_t>(out, params.pair_threshold);
  put_table(out, users_per_item);
  put_table(out, items_per_user);
  put<std::uint64_t>(out, neighbors.size());
  for (const auto& [item, list] : neighbors) {
    put<std::int64_t>(out, item);
    put<std::uint64_t>(out, list.size());
    for (const SwingNeighbor& n : list) {
      put<std::int64_t>(out, n.item);
      put<double>(out, n.score);
    }
  }
  if (!out) throw std::runtime_error("SwingIndex::save: write failed for " + path);
}

SwingIndex SwingIndex::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("SwingIndex::load: cannot open " + path);
  char magic[4];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + 4, kMagic)) {
    throw std::runtime_error("SwingIndex::load: " + path + " is not a swing index");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) {
    throw std::runtime_error("SwingIndex::load: unsupported version " +
                             std::to_string(version));
  }
  SwingIndex index;
  index.params.alpha1 = get<double>(in);
  index.params.alpha2 = get<double>(in);
  index.params.theta = get<double>(in);
  index.params.pair_threshold = static_cast<int>(get<std::int64_t>(in));
  index.users_per_item = get_table<ItemId, UserId>(in);
  index.items_per_user = get_table<UserId, ItemId>(in);
  const auto lists = get<std::uint64_t>(in);
  for (std::uint64_t l = 0; l < lists; ++l) {
    const auto item = static_cast<ItemId>(get<std::int64_t>(in));
    const auto count = get<std::uint64_t>(in);
    std::vector<SwingNeighbor> list;
    list.reserve(count);
    for (std::uint64_t n = 0; n < count; ++n) {
      SwingNeighbor neighbor;
      neighbor.item = static_cast<ItemId>(get<std::int64_t>(in));
      neighbor.score = get<double>(in);
      list.push_back(neighbor);
    }
    index.neighbors.emplace(item, std::move(list));
  }
  return index;
}

}  // namespace negrec

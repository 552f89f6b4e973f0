// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "negrec/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "negrec/rng.hpp"

namespace negrec {

const char* to_string(Polarity p) {
  switch (p) {
    case Polarity::NegativeFeedback: return "neg";
    case Polarity::Click: return "click";
    case Polarity::Favorite: return "fav";
    case Polarity::Purchase: return "purchase";
    case Polarity::Exposure: return "expo";
  }
  return "?";
}

const char* to_string(Reason r) {
  switch (r) {
    case Reason::NotThisProduct: return "not_this_product";
    case Reason::NotThisCategory: return "not_this_category";
    case Reason::NotThisStore: return "not_this_store";
    case Reason::UncomfortableImage: return "uncomfortable_image";
    case Reason::SeenOrPurchased: return "seen_or_purchased";
    case Reason::SuspectedAI: return "suspected_ai";
    case Reason::ClickbaitPrice: return "clickbait_price";
    case Reason::SuspectedCounterfeit: return "suspected_counterfeit";
    case Reason::None: return "none";
  }
  return "?";
}

Polarity polarity_from_string(const std::string& s) {
  for (auto p : {Polarity::NegativeFeedback, Polarity::Click, Polarity::Favorite,
                 Polarity::Purchase, Polarity::Exposure}) {
    if (s == to_string(p)) return p;
  }
  throw std::invalid_argument("unknown polarity token: '" + s + "'");
}

Reason reason_from_string(const std::string& s) {
  for (auto r : {Reason::NotThisProduct, Reason::NotThisCategory, Reason::NotThisStore,
                 Reason::UncomfortableImage, Reason::SeenOrPurchased, Reason::SuspectedAI,
                 Reason::ClickbaitPrice, Reason::SuspectedCounterfeit, Reason::None}) {
    if (s == to_string(r)) return r;
  }
  throw std::invalid_argument("unknown reason token: '" + s + "'");
}

std::string to_string(const SemanticId& sid) {
  std::string out;
  for (std::size_t d = 0; d < sid.codes.size(); ++d) {
    if (d) out.push_back('-');
    out += std::to_string(sid.codes[d]);
  }
  return out;
}

const ItemDescriptor* Corpus::find_item(ItemId id) const {
  auto it = std::lower_bound(items.begin(), items.end(), id,
                             [](const ItemDescriptor& d, ItemId v) { return d.item < v; });
  if (it == items.end() || it->item != id) return nullptr;
  return &*it;
}

const ItemDescriptor& Corpus::item_at(ItemId id) const {
  const ItemDescriptor* d = find_item(id);
  if (!d) throw std::out_of_range("unknown item id " + std::to_string(id));
  return *d;
}

void Corpus::validate() const {
  std::unordered_set<UserId> user_set(users.begin(), users.end());
  int prev_day = 0;
  for (const auto& e : events) {
    if (e.day < prev_day) throw std::invalid_argument("corpus events not sorted by day");
    prev_day = e.day;
    if (e.day < 0) throw std::invalid_argument("negative day index");
    if (!user_set.count(e.user)) throw std::invalid_argument("event references undeclared user");
    if (!find_item(e.item)) throw std::invalid_argument("event references undeclared item");
    if (e.reason != Reason::None && e.polarity != Polarity::NegativeFeedback) {
      throw std::invalid_argument("reason set on non-negative event");
    }
  }
  const std::size_t dim = d_feat();
  for (const auto& it : items) {
    if (it.features.size() != dim) throw std::invalid_argument("inconsistent feature dimension");
    for (double v : it.features) {
      if (!std::isfinite(v)) throw std::invalid_argument("non-finite item feature");
    }
  }
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("SynthConfig: " + msg); };
  if (num_users <= 0) fail("num_users must be positive");
  if (num_items <= 0) fail("num_items must be positive");
  if (num_categories <= 0) fail("num_categories must be positive");
  if (num_days <= 0) fail("num_days must be positive");
  if (d_feat <= 0) fail("d_feat must be positive");
  if (neg_rate < 0) fail("neg_rate must be >= 0");
  if (pos_rate < 0) fail("pos_rate must be >= 0");
  if (exposures_per_day < 0) fail("exposures_per_day must be >= 0");
  if (interest_sharpness <= 0) fail("interest_sharpness must be > 0");
  if (feature_noise < 0) fail("feature_noise must be >= 0");
}

namespace {

// Category choice with planted affinity: weight 1 for neutral categories,
// 1 + sharpness for planted ones.
int sample_category(Rng& rng, int num_categories, const std::vector<int>& planted,
                    double sharpness) {
  std::vector<double> w(num_categories, 1.0);
  for (int c : planted) w[c] += sharpness;
  double total = 0.0;
  for (double x : w) total += x;
  double u = rng.uniform() * total;
  for (int c = 0; c < num_categories; ++c) {
    u -= w[c];
    if (u < 0) return c;
  }
  return num_categories - 1;
}

Reason sample_negative_reason(Rng& rng) {
  // Interest-related reasons dominate (80%); the tail covers the fatigue and
  // quality reasons that Appendix-style cleaning removes.
  static constexpr std::array<Reason, 8> kReasons = {
      Reason::NotThisProduct,   Reason::NotThisCategory, Reason::NotThisStore,
      Reason::UncomfortableImage, Reason::SeenOrPurchased, Reason::SuspectedAI,
      Reason::ClickbaitPrice,   Reason::SuspectedCounterfeit};
  static constexpr std::array<double, 8> kWeights = {0.2, 0.2, 0.2, 0.2, 0.05, 0.05, 0.05, 0.05};
  double u = rng.uniform();
  for (std::size_t i = 0; i < kReasons.size(); ++i) {
    u -= kWeights[i];
    if (u < 0) return kReasons[i];
  }
  return kReasons.back();
}

Polarity sample_positive_polarity(Rng& rng) {
  double u = rng.uniform();
  if (u < 0.7) return Polarity::Click;
  if (u < 0.85) return Polarity::Favorite;
  return Polarity::Purchase;
}

}  // namespace

SynthCorpus generate_synthetic_corpus(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, "corpus.synth"));

  SynthCorpus out;
  Corpus& corpus = out.corpus;
  corpus.num_days = cfg.num_days;

  // Category centroids, well separated relative to item noise.
  std::vector<std::vector<double>> centroids(cfg.num_categories);
  for (auto& c : centroids) {
    c.resize(cfg.d_feat);
    for (auto& v : c) v = rng.normal();
  }

  corpus.items.resize(cfg.num_items);
  std::vector<std::vector<ItemId>> items_by_category(cfg.num_categories);
  for (int i = 0; i < cfg.num_items; ++i) {
    auto& item = corpus.items[i];
    item.item = i;
    item.category = static_cast<int>(rng.uniform_int(cfg.num_categories));
    item.features.resize(cfg.d_feat);
    for (int k = 0; k < cfg.d_feat; ++k) {
      item.features[k] = centroids[item.category][k] + cfg.feature_noise * rng.normal();
    }
    items_by_category[item.category].push_back(item.item);
  }
  // Rare small corpora can leave a category empty; backfill one item so
  // category-conditioned sampling stays total.
  for (int c = 0; c < cfg.num_categories; ++c) {
    if (items_by_category[c].empty()) {
      items_by_category[c].push_back(static_cast<ItemId>(rng.uniform_int(cfg.num_items)));
    }
  }

  // Within-category popularity skew (1/rank) so a user's repeated negatives
  // concentrate on a few head items, as interaction logs do.
  std::vector<std::vector<double>> category_cdf(cfg.num_categories);
  for (int c = 0; c < cfg.num_categories; ++c) {
    const auto& pool = items_by_category[c];
    std::vector<double> w(pool.size());
    double total = 0.0;
    for (std::size_t r = 0; r < pool.size(); ++r) {
      w[r] = 1.0 / static_cast<double>(r + 1);
      total += w[r];
    }
    double acc = 0.0;
    category_cdf[c].resize(pool.size());
    for (std::size_t r = 0; r < pool.size(); ++r) {
      acc += w[r] / total;
      category_cdf[c][r] = acc;
    }
  }
  auto sample_item_in_category = [&](Rng& r, int c) -> ItemId {
    const auto& cdf = category_cdf[c];
    double u = r.uniform();
    auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    std::size_t idx = static_cast<std::size_t>(it - cdf.begin());
    if (idx >= cdf.size()) idx = cdf.size() - 1;
    return items_by_category[c][idx];
  };

  corpus.users.resize(cfg.num_users);
  out.planted.disliked_categories.resize(cfg.num_users);
  out.planted.liked_categories.resize(cfg.num_users);
  for (int u = 0; u < cfg.num_users; ++u) {
    corpus.users[u] = u;
    int n_dis = 1 + static_cast<int>(rng.uniform_int(4));
    int n_lik = 1 + static_cast<int>(rng.uniform_int(4));
    auto order = rng.sample_without_replacement(static_cast<std::size_t>(cfg.num_categories),
                                                static_cast<std::size_t>(
                                                    std::min(cfg.num_categories, n_dis + n_lik)));
    auto& dis = out.planted.disliked_categories[u];
    auto& lik = out.planted.liked_categories[u];
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (static_cast<int>(i) < n_dis) {
        dis.push_back(static_cast<int>(order[i]));
      } else {
        lik.push_back(static_cast<int>(order[i]));
      }
    }
    if (lik.empty()) lik.push_back(static_cast<int>(order.back()));
  }

  // Day-major, user-major emission gives the stable within-day order the
  // history and tie-break contracts rely on.
  for (int day = 0; day < cfg.num_days; ++day) {
    for (int u = 0; u < cfg.num_users; ++u) {
      for (int k = 0; k < cfg.exposures_per_day; ++k) {
        ItemId item = static_cast<ItemId>(rng.uniform_int(cfg.num_items));
        corpus.events.push_back({u, item, Polarity::Exposure, Reason::None, day});
      }
      int n_pos = rng.poisson(cfg.pos_rate);
      for (int k = 0; k < n_pos; ++k) {
        int cat = sample_category(rng, cfg.num_categories, out.planted.liked_categories[u],
                                  cfg.interest_sharpness);
        ItemId item = sample_item_in_category(rng, cat);
        corpus.events.push_back({u, item, sample_positive_polarity(rng), Reason::None, day});
      }
      int n_neg = rng.poisson(cfg.neg_rate);
      for (int k = 0; k < n_neg; ++k) {
        int cat = sample_category(rng, cfg.num_categories, out.planted.disliked_categories[u],
                                  cfg.interest_sharpness);
        ItemId item = sample_item_in_category(rng, cat);
        corpus.events.push_back(
            {u, item, Polarity::NegativeFeedback, sample_negative_reason(rng), day});
      }
    }
  }
  return out;
}

std::vector<InteractionEvent> filter_by_reason(const std::vector<InteractionEvent>& events) {
  std::vector<InteractionEvent> kept;
  kept.reserve(events.size());
  for (const auto& e : events) {
    if (e.polarity != Polarity::NegativeFeedback || is_interest_reason(e.reason)) {
      kept.push_back(e);
    }
  }
  return kept;
}

Corpus filtered_by_reason(const Corpus& corpus) {
  Corpus out;
  out.events = filter_by_reason(corpus.events);
  out.items = corpus.items;
  out.users = corpus.users;
  out.num_days = corpus.num_days;
  return out;
}

std::vector<InteractionEvent> user_history(const Corpus& corpus, UserId user, int as_of_day,
                                           int window_days, PolarityFilter filter) {
  if (window_days != kUnboundedWindow && window_days < 1) {
    throw std::invalid_argument("user_history: window_days must be >= 1 or unbounded");
  }
  const int day_lo = window_days == kUnboundedWindow ? 0 : std::max(0, as_of_day - window_days);
  std::vector<InteractionEvent> out;
  for (const auto& e : corpus.events) {
    if (e.day >= as_of_day) break;  // events are day-sorted
    if (e.user != user || e.day < day_lo) continue;
    bool match = false;
    switch (filter) {
      case PolarityFilter::All: match = true; break;
      case PolarityFilter::Negative: match = e.polarity == Polarity::NegativeFeedback; break;
      case PolarityFilter::Positive: match = is_positive(e.polarity); break;
      case PolarityFilter::Exposure: match = e.polarity == Polarity::Exposure; break;
      case PolarityFilter::Feedback:
        match = e.polarity != Polarity::Exposure;
        break;
    }
    if (match) out.push_back(e);
  }
  return out;
}

TemporalSplit temporal_split(const Corpus& corpus, int train_end_day, int horizon_days) {
  if (train_end_day <= 0 || train_end_day >= corpus.num_days) {
    throw std::invalid_argument("temporal_split: train_end_day out of range");
  }
  if (horizon_days < 1) throw std::invalid_argument("temporal_split: horizon_days must be >= 1");

  auto day_lower = [&](int day) {
    return static_cast<std::size_t>(
        std::lower_bound(corpus.events.begin(), corpus.events.end(), day,
                         [](const InteractionEvent& e, int d) { return e.day < d; }) -
        corpus.events.begin());
  };

  const int eval_end_day = std::min(corpus.num_days, train_end_day + horizon_days);
  TemporalSplit split;
  split.train = CorpusSlice{&corpus, 0, day_lower(train_end_day), 0, train_end_day};
  split.eval = CorpusSlice{&corpus, day_lower(train_end_day), day_lower(eval_end_day),
                           train_end_day, eval_end_day};
  return split;
}

void save_events_tsv(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  for (const auto& e : corpus.events) {
    os << e.user << '\t' << e.item << '\t' << to_string(e.polarity) << '\t' << to_string(e.reason)
       << '\t' << e.day << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

void save_items_tsv(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  char buf[64];
  for (const auto& it : corpus.items) {
    os << it.item << '\t' << it.category;
    for (double v : it.features) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);  // exact double round-trip
      os << '\t' << buf;
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Corpus load_corpus_tsv(const std::filesystem::path& events_path,
                       const std::filesystem::path& items_path) {
  Corpus corpus;
  {
    std::ifstream is(items_path);
    if (!is) throw std::runtime_error("cannot open: " + items_path.string());
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      ItemDescriptor d;
      if (!(ss >> d.item >> d.category)) {
        throw std::runtime_error("malformed items.tsv line: " + line);
      }
      double v;
      while (ss >> v) d.features.push_back(v);
      corpus.items.push_back(std::move(d));
    }
    std::sort(corpus.items.begin(), corpus.items.end(),
              [](const ItemDescriptor& a, const ItemDescriptor& b) { return a.item < b.item; });
  }
  {
    std::ifstream is(events_path);
    if (!is) throw std::runtime_error("cannot open: " + events_path.string());
    std::string line;
    std::unordered_set<UserId> seen_users;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      InteractionEvent e;
      std::string pol, reason;
      if (!(ss >> e.user >> e.item >> pol >> reason >> e.day)) {
        throw std::runtime_error("malformed events.tsv line: " + line);
      }
      e.polarity = polarity_from_string(pol);
      e.reason = reason_from_string(reason);
      corpus.events.push_back(e);
      if (seen_users.insert(e.user).second) corpus.users.push_back(e.user);
      corpus.num_days = std::max(corpus.num_days, e.day + 1);
    }
    std::sort(corpus.users.begin(), corpus.users.end());
  }
  corpus.validate();
  return corpus;
}

}  // namespace negrec
